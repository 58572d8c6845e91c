"""Command-line entry point: ``opd-lab <subcommand>`` or ``python -m opd_lab``.

    generate-data   synthesize the task and write train / td_pool / eval splits
    train           run one stage (teacher, sft, td, opd) and write a checkpoint
    eval            CER/WER report for a checkpoint or a hypothesis file
    diagnose        VUSS comparison between two OPD metrics streams
    export-metrics  metrics JSONL -> CSV

Every output carries the run config hash. Wall-clock data goes only to
``*.meta.json`` sidecars, so reruns produce byte-identical artifacts.
"""
from __future__ import annotations

import argparse
import csv
import json
import sys
import time
from datetime import datetime, timezone
from pathlib import Path
from typing import Optional

from . import pipeline as pl
from .checkpoint import CheckpointError, TrainState, load_checkpoint, save_checkpoint
from .config import ConfigError, RunConfig, load_config
from .eval_diag import EvalReport, read_metrics, score_set, support_overlap_interpretation, vuss_from_metrics
from .model import ModelError
from .synth_task import load_dataset, save_dataset
from .tokenizers import TokenizerError

SPLITS = ("train", "td_pool", "eval")
STAGE_SPLIT = {"sft": "train", "td": "td_pool", "opd": "train"}
EXIT_ERROR = 2
EXIT_ABORTED = 3


class CliError(RuntimeError):
    pass


def _write_json(path: Path, obj) -> None:
    path.write_text(json.dumps(obj, indent=2, sort_keys=True) + "\n")


def _sidecar(path: Path, argv: list[str], started: float, **extra) -> None:
    _write_json(path, {
        "created_utc": datetime.now(timezone.utc).isoformat(timespec="seconds"),
        "elapsed_s": round(time.time() - started, 3),
        "argv": argv,
        **extra,
    })


def _run_config(args) -> RunConfig:
    cfg = load_config(args.config) if args.config else RunConfig()
    return cfg.with_seed(args.seed)


def _out_dir(path) -> Path:
    out = Path(path)
    out.mkdir(parents=True, exist_ok=True)
    return out


# --- generate-data -----------------------------------------------------------


def cmd_generate_data(args, argv) -> int:
    started = time.time()
    cfg = _run_config(args)
    out = _out_dir(args.out)
    parts = pl.make_data(cfg.recipe, args.seed)
    extra = {"run_config_hash": cfg.hash, "fractions": list(cfg.recipe.fractions)}
    for name, part in zip(SPLITS, parts):
        save_dataset(out / name, cfg.recipe.task, part, args.seed, mode=args.mode, extra={**extra, "split": name})
    _write_json(out / "config.json", {"config_hash": cfg.hash, "seed": args.seed, "config": cfg.to_json()})
    _sidecar(out / "generate.meta.json", argv, started)
    print(" ".join(f"{n}={len(p)}" for n, p in zip(SPLITS, parts)) + f" config_hash={cfg.hash}")
    return 0


# --- train -------------------------------------------------------------------


def _load_params(path, tokenizer_hash: str):
    return load_checkpoint(path, expected_tokenizer_hash=tokenizer_hash).params


def _run_stage(stage: str, cfg: RunConfig, setup: pl.Setup, args, state: Optional[TrainState], stop_at: Optional[int]):
    recipe = cfg.recipe
    sc = cfg.stage(stage)
    if stage == "teacher":
        init = pl.init_teacher(recipe, setup, args.seed)
        return pl.run_sft(init, pl.teacher_data(recipe, args.seed), sc, setup.teacher_spec, setup.fpt,
                          state=state, stop_at=stop_at)
    _, data = load_dataset(Path(args.data) / STAGE_SPLIT[stage])
    spec = setup.student_spec
    if args.init:
        init = _load_params(args.init, spec.fingerprint)
    elif stage == "sft":
        init = pl.init_student(recipe, setup, args.seed)
    else:
        raise CliError(f"stage {stage} needs --init (a student checkpoint)")
    if stage == "sft":
        return pl.run_sft(init, data, sc, spec, setup.fpt, state=state, stop_at=stop_at)
    if not args.teacher:
        raise CliError(f"stage {stage} needs --teacher (a teacher checkpoint)")
    teacher = _load_params(args.teacher, setup.teacher_spec.fingerprint)
    runner = pl.run_td if stage == "td" else pl.run_opd
    return runner(init, teacher, data, sc, setup, state=state, stop_at=stop_at)


def _stage_hash(stage: str, cfg: RunConfig, setup: pl.Setup) -> str:
    if stage in ("teacher", "sft"):
        spec = setup.teacher_spec if stage == "teacher" else setup.student_spec
        return pl.config_hash(cfg.stage(stage), pl.Setup.shared(spec, setup.fpt))
    return pl.config_hash(cfg.stage(stage), setup)


def _write_metrics(path: Path, records) -> None:
    with open(path, "w") as fh:
        for r in records:
            fh.write(json.dumps(r, sort_keys=True) + "\n")


def cmd_train(args, argv) -> int:
    started = time.time()
    cfg = _run_config(args)
    stage = args.stage
    if stage != "teacher" and not args.data:
        raise CliError(f"stage {stage} needs --data (output of generate-data)")
    out = _out_dir(args.out)
    setup = pl.Setup.build(cfg.recipe.task, cfg.recipe.merges)
    tok_hash = (setup.teacher_spec if stage == "teacher" else setup.student_spec).fingerprint
    state = None
    if args.resume:
        state = load_checkpoint(args.resume, _stage_hash(stage, cfg, setup), tok_hash)
    total = cfg.stage(stage).steps
    target = total if args.stop_at is None else min(args.stop_at, total)
    every = args.checkpoint_every or target
    ckpt = out / f"{stage}.ckpt"
    metrics = out / f"{stage}.metrics.jsonl"
    try:
        while True:
            nxt = min(target, (state.step if state else 0) + every)
            state = _run_stage(stage, cfg, setup, args, state, nxt)
            save_checkpoint(state, ckpt)
            if state.step >= target:
                break
    except pl.TrainingAborted as exc:
        last = out / f"{stage}.last_good.ckpt"
        save_checkpoint(exc.last_good, last)
        _write_metrics(metrics, exc.last_good.records)
        _write_json(out / "failure.json", {
            "stage": stage,
            "step": exc.last_good.step,
            "message": str(exc),
            "last_good_checkpoint": last.name,
            "config_hash": cfg.hash,
        })
        print(f"error: {exc}; last good checkpoint at {last}", file=sys.stderr)
        return EXIT_ABORTED
    _write_metrics(metrics, state.records)
    _write_json(out / f"{stage}.summary.json", {
        "stage": stage,
        "step": state.step,
        "steps_total": total,
        "config_hash": cfg.hash,
        "stage_config_hash": state.config_hash,
        "tokenizer_hash": state.tokenizer_hash,
        "counters": {k: v for k, v in state.counters.items() if not isinstance(v, list)},
    })
    _sidecar(out / f"{stage}.meta.json", argv, started)
    print(f"{stage}: step {state.step}/{total} -> {ckpt} (config_hash={cfg.hash})")
    return 0


# --- eval --------------------------------------------------------------------


def cmd_eval(args, argv) -> int:
    started = time.time()
    cfg = _run_config(args)
    out = _out_dir(args.out)
    _, data = load_dataset(Path(args.data) / args.split)
    refs = [u.ref_text for u in data]
    if args.hyps:
        hyps = Path(args.hyps).read_text().splitlines()
        if len(hyps) != len(refs):
            raise CliError(f"{args.hyps}: {len(hyps)} lines for {len(refs)} utterances")
    elif args.checkpoint:
        setup = pl.Setup.build(cfg.recipe.task, cfg.recipe.merges)
        state = load_checkpoint(args.checkpoint)
        specs = {s.fingerprint: s for s in (setup.student_spec, setup.teacher_spec)}
        if state.tokenizer_hash not in specs:
            raise CliError(f"{args.checkpoint}: tokenizer {state.tokenizer_hash} matches neither model of this config")
        hyps = pl.transcribe(state.params, data, specs[state.tokenizer_hash], setup.fpt)
        (out / "hyps.txt").write_text("".join(h + "\n" for h in hyps))
    else:
        raise CliError("eval needs --checkpoint or --hyps")
    report = EvalReport(config_hash=cfg.hash)
    for unit in (("char", "word") if args.unit == "both" else (args.unit,)):
        s = score_set(hyps, refs, unit)
        report.sets[f"{args.split}:{s.metric}"] = s
    _write_json(out / "eval.json", report.to_json())
    table = report.table()
    (out / "eval.txt").write_text(f"# config_hash {cfg.hash}\n{table}\n")
    _sidecar(out / "eval.meta.json", argv, started)
    print(table)
    return 0


# --- diagnose / export ---------------------------------------------------------


def _hashes(records) -> list[str]:
    return sorted({r["config_hash"] for r in records if "config_hash" in r})


def cmd_diagnose(args, argv) -> int:
    before, after = read_metrics(args.before), read_metrics(args.after)
    cmp = support_overlap_interpretation(
        vuss_from_metrics(before, args.window), vuss_from_metrics(after, args.window)
    )
    cmp["window"] = args.window
    cmp["config_hash"] = {"before": _hashes(before), "after": _hashes(after)}
    text = json.dumps(cmp, indent=2, sort_keys=True) + "\n"
    if args.out:
        path = Path(args.out)
        path.parent.mkdir(parents=True, exist_ok=True)
        path.write_text(text)
    print(f"VUSS before {cmp['before']['mean']:.4f} after {cmp['after']['mean']:.4f} "
          f"delta {cmp['delta']:.4f} overlap increased: {str(cmp['overlap_increased']).lower()}")
    return 0


LEADING_COLUMNS = ("step", "stage", "loss", "config_hash")


def cmd_export_metrics(args, argv) -> int:
    records = read_metrics(args.metrics)
    keys = sorted({k for r in records for k in r} - set(LEADING_COLUMNS))
    cols = [c for c in LEADING_COLUMNS if any(c in r for r in records)] + keys
    path = Path(args.out)
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(cols)
        for r in records:
            w.writerow(["" if r.get(c) is None else repr(r[c]) if isinstance(r[c], float) else r[c] for c in cols])
    print(f"wrote {len(records)} rows to {path}")
    return 0


# --- parser ------------------------------------------------------------------


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="opd-lab", description=__doc__.split("\n\n")[0])
    sub = p.add_subparsers(dest="command", required=True)

    def common(sp, out_required=True):
        sp.add_argument("--config", help="run config JSON (default: built-in defaults)")
        sp.add_argument("--seed", type=int, default=0)
        sp.add_argument("--out", required=out_required, help="output directory")

    g = sub.add_parser("generate-data", help="write train/td_pool/eval splits")
    common(g)
    g.add_argument("--mode", choices=("regenerate", "blobs"), default="regenerate",
                   help="store seeds only, or frames as .npy blobs")

    t = sub.add_parser("train", help="run one training stage")
    common(t)
    t.add_argument("--stage", required=True, choices=("teacher", "sft", "td", "opd"))
    t.add_argument("--data", help="generate-data output directory")
    t.add_argument("--init", help="student checkpoint to start from (required for td/opd)")
    t.add_argument("--teacher", help="frozen teacher checkpoint (td/opd)")
    t.add_argument("--resume", help="checkpoint of this stage to continue from")
    t.add_argument("--stop-at", type=int, help="stop after this many total steps (for interrupted runs)")
    t.add_argument("--checkpoint-every", type=int, default=0, help="also checkpoint every N steps")

    e = sub.add_parser("eval", help="CER/WER report")
    common(e)
    e.add_argument("--data", required=True)
    e.add_argument("--split", choices=SPLITS, default="eval")
    e.add_argument("--checkpoint")
    e.add_argument("--hyps", help="hypothesis file, one line per utterance in dataset order")
    e.add_argument("--unit", choices=("char", "word", "both"), default="both")

    d = sub.add_parser("diagnose", help="compare VUSS of two OPD metrics streams")
    d.add_argument("--before", required=True, help="OPD metrics JSONL started from the SFT model")
    d.add_argument("--after", required=True, help="OPD metrics JSONL started from the TD model")
    d.add_argument("--window", type=int, default=10)
    d.add_argument("--out", help="write the comparison JSON here")

    x = sub.add_parser("export-metrics", help="metrics JSONL to CSV")
    x.add_argument("--metrics", required=True)
    x.add_argument("--format", choices=("csv",), default="csv")
    x.add_argument("--out", required=True)
    return p


COMMANDS = {
    "generate-data": cmd_generate_data,
    "train": cmd_train,
    "eval": cmd_eval,
    "diagnose": cmd_diagnose,
    "export-metrics": cmd_export_metrics,
}


def main(argv: Optional[list[str]] = None) -> int:
    argv = list(sys.argv[1:] if argv is None else argv)
    args = build_parser().parse_args(argv)
    try:
        return COMMANDS[args.command](args, argv)
    except (CliError, ConfigError, CheckpointError, TokenizerError, ModelError, FileNotFoundError, ValueError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_ERROR


if __name__ == "__main__":
    sys.exit(main())
