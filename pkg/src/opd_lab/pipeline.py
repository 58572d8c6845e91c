"""SFT -> TD -> OPD training stages, evaluation and the end-to-end recipe.

Every stage is a deterministic function of (initial params, data, config):
batches come from a permutation seeded by (seed, epoch), and any sampling rng
lives in the TrainState so a checkpointed run resumes bit-identically.
"""
from __future__ import annotations

import hashlib
import json
import logging
import os
from concurrent.futures import ThreadPoolExecutor
from dataclasses import asdict, dataclass, field, replace
from typing import Callable, Optional, Sequence

import numpy as np

from .checkpoint import TrainState
from .eval_diag import SetScore, record_vuss, score_set, vuss_from_metrics
from .model import (
    ModelParams,
    backward,
    ce_loss_and_grad,
    forward,
    init_params,
    sgd_step,
    teacher_forcing_inputs,
)
from .opd import OpdConfig, UnionSupport, batch_opd_loss, build_union, kl_grad
from .rollout import Rollout, generate, topk_sorted
from .synth_task import TaskConfig, Utterance, generate_dataset, split_dataset
from .teacher import score_transcript
from .tokenizers import TokenizerSpec, TokenMap, build_teacher_tokenizer, build_token_map, encode

log = logging.getLogger(__name__)

STAGES = ("sft", "td", "opd")


class TrainingAborted(RuntimeError):
    def __init__(self, message: str, last_good: TrainState):
        super().__init__(message)
        self.last_good = last_good


@dataclass(frozen=True)
class StageConfig:
    stage: str
    steps: int
    batch_size: int = 16
    lr: float = 0.5
    seed: int = 0
    log_every: int = 10
    opd: Optional[OpdConfig] = None
    decode_mode: str = "greedy"
    rollout_slack: int = 3

    def __post_init__(self):
        if self.stage not in STAGES + ("teacher",):
            raise ValueError(f"unknown stage {self.stage!r}")
        if self.steps < 0 or self.batch_size < 1 or self.log_every < 1:
            raise ValueError("need steps >= 0, batch_size >= 1, log_every >= 1")
        if not self.lr > 0:
            raise ValueError("lr must be positive")
        if self.stage == "opd" and self.opd is None:
            object.__setattr__(self, "opd", OpdConfig())

    def to_json(self) -> dict:
        d = asdict(self)
        if self.opd is None:
            d.pop("opd")
        return d


@dataclass(frozen=True)
class Setup:
    """Everything both models share: tokenizers, id map and frame rate."""

    student_spec: TokenizerSpec
    teacher_spec: TokenizerSpec
    token_map: TokenMap
    fpt: int

    @classmethod
    def build(cls, task: TaskConfig, merges: Sequence[tuple[str, str]] = ()) -> "Setup":
        student = task.tokenizer
        teacher = build_teacher_tokenizer(student, merges)
        return cls(student, teacher, build_token_map(teacher, student), task.frames_per_token)

    @classmethod
    def shared(cls, spec: TokenizerSpec, fpt: int) -> "Setup":
        return cls(spec, spec, build_token_map(spec, spec), fpt)

    def fingerprint(self) -> str:
        return f"{self.student_spec.fingerprint}:{self.teacher_spec.fingerprint}:{self.fpt}"


def config_hash(config: StageConfig, setup: Setup) -> str:
    blob = json.dumps({"stage": config.to_json(), "setup": setup.fingerprint()}, sort_keys=True)
    return hashlib.sha256(blob.encode()).hexdigest()[:16]


def batch_indices(n: int, batch_size: int, seed: int, step: int) -> np.ndarray:
    """Shuffled fixed-size batches; a fresh permutation per epoch, last partial batch kept."""
    per_epoch = -(-n // batch_size)
    epoch, k = divmod(step, per_epoch)
    perm = np.random.default_rng([seed, epoch]).permutation(n)
    return perm[k * batch_size : (k + 1) * batch_size]


def _threads() -> int:
    try:
        return max(1, int(os.environ.get("OPD_LAB_THREADS", "1")))
    except ValueError:
        return 1


def _fan_out(fn: Callable, items: Sequence):
    """Order-preserving map; parallel across OPD_LAB_THREADS workers."""
    workers = min(_threads(), len(items))
    if workers <= 1:
        return [fn(x) for x in items]
    with ThreadPoolExecutor(workers) as pool:
        return list(pool.map(fn, items))


def max_rollout_len(u: Utterance, fpt: int, slack: int) -> int:
    return -(-u.frames.shape[0] // fpt) + slack


# --- generic loop ------------------------------------------------------------

StepFn = Callable[[ModelParams, list, np.random.Generator, dict], tuple]


def _train_loop(
    params: ModelParams,
    data: Sequence,
    config: StageConfig,
    setup: Setup,
    step_fn: StepFn,
    state: Optional[TrainState],
    stop_at: Optional[int],
    record_fn: Callable[[dict, dict], dict],
    sink: Optional[Callable[[dict], None]],
    tokenizer_hash: str,
) -> TrainState:
    chash = config_hash(config, setup)
    if state is None:
        state = TrainState(
            params=params.copy(),
            stage=config.stage,
            config_hash=chash,
            rng_state=np.random.default_rng([config.seed, 7]).bit_generator.state,
            tokenizer_hash=tokenizer_hash,
        )
    elif state.config_hash != chash or state.stage != config.stage:
        raise ValueError(f"cannot resume {state.stage}/{state.config_hash} as {config.stage}/{chash}")
    else:
        state = replace(state, params=state.params.copy(), counters=dict(state.counters), records=list(state.records))
    end = config.steps if stop_at is None else min(stop_at, config.steps)
    if len(data) == 0:
        return state
    rng = state.rng()
    while state.step < end:
        batch = [data[i] for i in batch_indices(len(data), config.batch_size, config.seed, state.step)]
        loss, grad, diag = step_fn(state.params, batch, rng, state.counters)
        if not np.isfinite(loss) or not grad.is_finite():
            raise TrainingAborted(f"{config.stage}: non-finite loss/gradient at step {state.step}", state)
        new_params = sgd_step(state.params, grad, config.lr)
        if not new_params.is_finite():
            raise TrainingAborted(f"{config.stage}: update at step {state.step} produced non-finite parameters", state)
        c = state.counters
        c["loss_sum"] = c.get("loss_sum", 0.0) + loss
        c["loss_n"] = c.get("loss_n", 0) + 1
        state = replace(state, params=new_params, step=state.step + 1, rng_state=rng.bit_generator.state)
        if state.step % config.log_every == 0 or state.step == config.steps:
            rec = {"step": state.step, "stage": config.stage, "loss": c["loss_sum"] / c["loss_n"], "config_hash": chash}
            rec.update(record_fn(c, diag))
            c["loss_sum"], c["loss_n"] = 0.0, 0
            state.records.append(rec)
            if sink is not None:
                sink(rec)
    return state


def _no_extra(counters: dict, diag: dict) -> dict:
    return {}


# --- supervised stages -------------------------------------------------------


def _ce_step(spec: TokenizerSpec, fpt: int, targets: Callable[[Utterance], list[int]]) -> StepFn:
    def step(params, batch, rng, counters):
        results = _fan_out(lambda u: ce_loss_and_grad(params, u.frames, targets(u), spec, fpt), batch)
        loss = float(np.mean([r[0] for r in results]))
        grad = results[0][1]
        for _, g in results[1:]:
            grad = grad + g
        return loss, grad.scale(1.0 / len(results)), {}

    return step


def reference_targets(spec: TokenizerSpec) -> Callable[[Utterance], list[int]]:
    return lambda u: encode(spec, u.ref_text) + [spec.eos_id]


def run_sft(
    params: ModelParams,
    data: Sequence[Utterance],
    config: StageConfig,
    spec: TokenizerSpec,
    fpt: int,
    *,
    state: Optional[TrainState] = None,
    stop_at: Optional[int] = None,
    sink=None,
) -> TrainState:
    """Cross-entropy on reference transcripts under teacher forcing."""
    setup = Setup.shared(spec, fpt)
    return _train_loop(params, data, config, setup, _ce_step(spec, fpt, reference_targets(spec)),
                       state, stop_at, _no_extra, sink, spec.fingerprint)


def teacher_transcripts(teacher: ModelParams, pool: Sequence[Utterance], setup: Setup, slack: int = 3) -> dict[int, str]:
    """Greedy teacher transcripts of the TD pool, keyed by utterance id."""
    def one(u):
        r = generate(teacher, u.frames, setup.teacher_spec, setup.fpt, max_rollout_len(u, setup.fpt, slack), k=1)
        return u.id, r.text

    return dict(_fan_out(one, list(pool)))


def run_td(
    params: ModelParams,
    teacher: ModelParams,
    pool: Sequence[Utterance],
    config: StageConfig,
    setup: Setup,
    *,
    state: Optional[TrainState] = None,
    stop_at: Optional[int] = None,
    sink=None,
) -> TrainState:
    """SFT of the student on the teacher's own transcripts of the TD pool."""
    spec = setup.student_spec
    cache = teacher_transcripts(teacher, pool, setup, config.rollout_slack)

    def targets(u: Utterance) -> list[int]:
        return encode(spec, cache[u.id]) + [spec.eos_id]

    return _train_loop(params, pool, config, setup, _ce_step(spec, setup.fpt, targets),
                       state, stop_at, _no_extra, sink, spec.fingerprint)


# --- on-policy distillation -------------------------------------------------------


@dataclass
class OpdItem:
    supports: list[UnionSupport] = field(default_factory=list)
    rows: list[int] = field(default_factory=list)
    cache: object = None
    empty: bool = False
    fallback: bool = False
    positions: int = 0
    mismatched: int = 0
    requested: int = 0
    dropped: int = 0


def opd_item(student: ModelParams, teacher: ModelParams, u: Utterance, setup: Setup,
             config: StageConfig, rng: Optional[np.random.Generator] = None) -> OpdItem:
    """Rollout, teacher scoring and union supports for one utterance.

    ``rows`` gives, per support, the row of the gradient-bearing re-score pass
    (``cache``) that the support's student logits come from.
    """
    opd = config.opd
    spec = setup.student_spec
    rollout = generate(student, u.frames, spec, setup.fpt, max_rollout_len(u, setup.fpt, config.rollout_slack),
                       k=opd.k_student, decode_mode=config.decode_mode, rng=rng)
    out = OpdItem(empty=rollout.empty)
    if rollout.empty:
        if not opd.fallback_enabled:
            return out
        out.fallback = True
        raw = encode(spec, u.ref_text) + [spec.eos_id]
        text, clean, pos_map = u.ref_text, raw[:-1], list(range(len(raw) - 1))
    else:
        raw, text, clean, pos_map = list(rollout.raw_ids), rollout.text, list(rollout.clean_ids), list(rollout.position_map)
    stopped = opd.stop_supervision and raw[-1] == spec.eos_id
    if stopped:
        pos_map = pos_map + [len(raw) - 1]

    # Re-score the visited states; this pass carries the gradient.
    prev, offsets = teacher_forcing_inputs(spec, raw)
    cache = forward(student, u.frames, prev, offsets, setup.fpt)
    if out.fallback:
        topk = [topk_sorted(cache.logits[p], opd.k_student) for p in range(len(raw))]
    else:
        topk = [[i for i, _ in cands] for cands in rollout.student_topk]

    scores = score_transcript(teacher, u.frames, text, clean, spec, setup.teacher_spec,
                              setup.token_map, setup.fpt, opd.k_teacher, stop=stopped)
    out.cache = cache
    out.positions = len(pos_map)
    out.requested, out.dropped = scores.topk_requested, scores.topk_dropped
    for i, tpos in enumerate(scores.positions):
        if tpos is None:
            out.mismatched += 1
            continue
        row = pos_map[i]
        out.supports.append(build_union(tpos, topk[row], cache.logits[row], spec, setup.token_map, position=i))
        out.rows.append(row)
    return out


def opd_step_fn(teacher: ModelParams, setup: Setup, config: StageConfig) -> StepFn:
    tau = config.opd.tau

    def step(params, batch, rng, counters):
        if config.decode_mode == "sample":
            rngs = [np.random.default_rng(s) for s in rng.integers(0, 2**63, size=len(batch))]
        else:
            rngs = [None] * len(batch)
        items = _fan_out(lambda a: opd_item(params, teacher, a[0], setup, config, a[1]), list(zip(batch, rngs)))
        supports = [s for it in items for s in it.supports]
        bl = batch_opd_loss(supports, tau)
        grad = params.zeros_like()
        if not bl.no_valid_positions:
            for it in items:
                if it.cache is None:
                    continue
                dz = np.zeros_like(it.cache.logits)
                for s, row in zip(it.supports, it.rows):
                    if s.valid:
                        dz[row, s.ids] += kl_grad(s, tau) / bl.n_valid
                grad = grad + backward(params, it.cache, dz)
        c = counters
        c["empty_rollouts"] = c.get("empty_rollouts", 0) + sum(it.empty for it in items)
        c["fallback_count"] = c.get("fallback_count", 0) + sum(it.fallback for it in items)
        c["positions"] = c.get("positions", 0) + sum(it.positions for it in items)
        c["mismatched"] = c.get("mismatched", 0) + sum(it.mismatched for it in items)
        c["requested"] = c.get("requested", 0) + sum(it.requested for it in items)
        c["dropped"] = c.get("dropped", 0) + sum(it.dropped for it in items)
        c.setdefault("sizes", []).extend(s.size for s in supports if s.valid)
        c["no_valid_steps"] = c.get("no_valid_steps", 0) + int(bl.no_valid_positions)
        return bl.loss, grad, {}

    return step


def _opd_record(config: StageConfig):
    def record(c: dict, diag: dict) -> dict:
        sizes = c.get("sizes", [])
        rec = {
            "vuss_mean": record_vuss(sizes),
            "vuss_min": min(sizes) if sizes else None,
            "vuss_max": max(sizes) if sizes else None,
            "fallback_count": c.get("fallback_count", 0),
            "fallback_in_window": c.get("fallback_count", 0) - c.get("fallback_at_last_record", 0),
            "empty_rollouts": c.get("empty_rollouts", 0),
            "mismatch_rate": c["mismatched"] / c["positions"] if c.get("positions") else None,
            "mapped_drop_rate": c["dropped"] / c["requested"] if c.get("requested") else None,
            "k_teacher": config.opd.k_teacher,
            "k_student": config.opd.k_student,
        }
        # Interval accumulators reset; fallback/empty counts stay cumulative.
        c["sizes"] = []
        c["positions"] = c["mismatched"] = c["requested"] = c["dropped"] = 0
        c["fallback_at_last_record"] = c.get("fallback_count", 0)
        return rec

    return record


def run_opd(
    params: ModelParams,
    teacher: ModelParams,
    data: Sequence[Utterance],
    config: StageConfig,
    setup: Setup,
    *,
    state: Optional[TrainState] = None,
    stop_at: Optional[int] = None,
    sink=None,
) -> TrainState:
    """On-policy distillation: rollout, teacher scoring, union top-k KL, SGD."""
    if config.stage != "opd":
        raise ValueError("run_opd needs an opd stage config")
    return _train_loop(params, data, config, setup, opd_step_fn(teacher, setup, config),
                       state, stop_at, _opd_record(config), sink, setup.student_spec.fingerprint)


# --- evaluation -------------------------------------------------------------


def transcribe(params: ModelParams, data: Sequence[Utterance], spec: TokenizerSpec, fpt: int, slack: int = 3) -> list[str]:
    return _fan_out(lambda u: generate(params, u.frames, spec, fpt, max_rollout_len(u, fpt, slack), k=1).text, list(data))


def evaluate(params: ModelParams, data: Sequence[Utterance], spec: TokenizerSpec, fpt: int, unit: str = "char", slack: int = 3) -> SetScore:
    hyps = transcribe(params, data, spec, fpt, slack)
    return score_set(hyps, [u.ref_text for u in data], unit)


# --- full recipe --------------------------------------------------------------

DEFAULT_MERGES = (("t", "h"), ("h", "e"), ("i", "n"), ("e", "r"), ("a", "n"), ("o", "n"))


@dataclass(frozen=True)
class RecipeConfig:
    task: TaskConfig = field(default_factory=TaskConfig)
    count: int = 1000
    fractions: tuple[float, float, float] = (0.8, 0.016, 0.1)
    student_hidden: int = 16
    teacher_hidden_multiplier: int = 2
    teacher_noise_scale: float = 0.5
    teacher_data_count: int = 800
    init_scale: float = 0.1
    merges: tuple[tuple[str, str], ...] = DEFAULT_MERGES
    sft: StageConfig = StageConfig("sft", steps=100, batch_size=16, lr=0.5, log_every=10)
    teacher: StageConfig = StageConfig("teacher", steps=600, batch_size=16, lr=0.5, log_every=50)
    td: StageConfig = StageConfig("td", steps=100, batch_size=8, lr=0.5, log_every=10)
    opd: StageConfig = StageConfig("opd", steps=300, batch_size=16, lr=0.5, log_every=30, opd=OpdConfig())
    vuss_window: int = 10

    def with_seed(self, seed: int) -> "RecipeConfig":
        return replace(
            self,
            teacher=replace(self.teacher, seed=seed),
            sft=replace(self.sft, seed=seed),
            td=replace(self.td, seed=seed),
            opd=replace(self.opd, seed=seed),
        )


def make_data(cfg: RecipeConfig, seed: int):
    data = generate_dataset(cfg.task, cfg.count, seed)
    return split_dataset(data, cfg.fractions)


def teacher_data(cfg: RecipeConfig, seed: int) -> list[Utterance]:
    """Low-noise draw of the same channel, disjoint in seed space from the student data."""
    task = replace(cfg.task, noise_sigma=cfg.task.noise_sigma * cfg.teacher_noise_scale)
    return generate_dataset(task, cfg.teacher_data_count, seed + 10_000)


def init_teacher(cfg: RecipeConfig, setup: Setup, seed: int) -> ModelParams:
    rng = np.random.default_rng([seed, 1])
    return init_params(len(setup.teacher_spec), cfg.task.feature_dim,
                       cfg.student_hidden * cfg.teacher_hidden_multiplier, rng, cfg.init_scale)


def train_teacher(cfg: RecipeConfig, setup: Setup, seed: int, sink=None) -> ModelParams:
    """Wider model trained longer on cleaner audio, then frozen."""
    return run_sft(init_teacher(cfg, setup, seed), teacher_data(cfg, seed), cfg.teacher,
                   setup.teacher_spec, setup.fpt, sink=sink).params


def init_student(cfg: RecipeConfig, setup: Setup, seed: int) -> ModelParams:
    rng = np.random.default_rng([seed, 2])
    return init_params(len(setup.student_spec), cfg.task.feature_dim, cfg.student_hidden, rng, cfg.init_scale)


def run_recipe(cfg: RecipeConfig, seed: int, sink=None) -> dict:
    """Teacher, SFT, SFT+OPD, SFT+TD, SFT+TD+OPD on one seed; CERs and VUSS."""
    cfg = cfg.with_seed(seed)
    setup = Setup.build(cfg.task, cfg.merges)
    train, td_pool, held_out = make_data(cfg, seed)
    fpt, spec = setup.fpt, setup.student_spec

    teacher = train_teacher(cfg, setup, seed)
    base = run_sft(init_student(cfg, setup, seed), train, cfg.sft, spec, fpt, sink=sink)
    opd_only = run_opd(base.params, teacher, train, cfg.opd, setup, sink=sink)
    td = run_td(base.params, teacher, td_pool, cfg.td, setup, sink=sink)
    td_opd = run_opd(td.params, teacher, train, cfg.opd, setup, sink=sink)

    def cer(p, s=spec):
        return evaluate(p, held_out, s, fpt).rate

    return {
        "seed": seed,
        "cer": {
            "teacher": cer(teacher, setup.teacher_spec),
            "sft": cer(base.params),
            "sft_opd": cer(opd_only.params),
            "sft_td": cer(td.params),
            "sft_td_opd": cer(td_opd.params),
        },
        "vuss_before_td": vuss_from_metrics(opd_only.records, cfg.vuss_window),
        "vuss_after_td": vuss_from_metrics(td_opd.records, cfg.vuss_window),
        "fallback": {
            "sft_opd": opd_only.counters.get("fallback_count", 0),
            "sft_td_opd": td_opd.counters.get("fallback_count", 0),
        },
        "records": {"sft_opd": opd_only.records, "sft_td_opd": td_opd.records},
    }
