from dataclasses import replace

import numpy as np
import pytest
from hypothesis import settings

from opd_lab.pipeline import Setup, StageConfig, run_sft
from opd_lab.synth_task import TaskConfig, generate_dataset
from opd_lab.model import init_params

settings.register_profile("opd", deadline=None, max_examples=60, derandomize=True)
settings.load_profile("opd")

SMALL_TASK = TaskConfig(
    alphabet="aehnt ",
    words=("the", "then", "an", "ant", "hen", "tea", "net", "hat"),
    min_words=1,
    max_words=3,
    noise_sigma=0.0,
    feature_dim=8,
)


@pytest.fixture(scope="session")
def small_task():
    return SMALL_TASK


@pytest.fixture(scope="session")
def small_setup():
    return Setup.build(SMALL_TASK, (("t", "h"), ("h", "e"), ("a", "n")))


@pytest.fixture(scope="session")
def small_data():
    return generate_dataset(SMALL_TASK, 60, seed=3)


def _trained(spec, hidden, data, steps, seed):
    params = init_params(len(spec), SMALL_TASK.feature_dim, hidden, np.random.default_rng(seed), 0.1)
    cfg = StageConfig("sft", steps=steps, batch_size=8, lr=0.5, seed=seed, log_every=50)
    return run_sft(params, data, cfg, spec, SMALL_TASK.frames_per_token).params


@pytest.fixture(scope="session")
def small_student(small_setup, small_data):
    """Briefly trained: imperfect but stops and transcribes."""
    return _trained(small_setup.student_spec, 8, small_data, 60, seed=5)


@pytest.fixture(scope="session")
def converged_teacher(small_setup, small_data):
    """Teacher-tokenizer model trained to exact transcription of noise-free audio."""
    return _trained(small_setup.teacher_spec, 16, small_data, 600, seed=6)


@pytest.fixture(scope="session")
def converged_student(small_setup, small_data):
    return _trained(small_setup.student_spec, 16, small_data, 600, seed=7)


# --- acceptance report ------------------------------------------------------------

ACCEPTANCE_LINES: dict[int, str] = {}


@pytest.fixture
def acceptance():
    """Record the outcome of one acceptance criterion before asserting it."""
    def record(number: int, title: str, passed: bool, detail: str) -> bool:
        ACCEPTANCE_LINES[number] = f"[{'PASS' if passed else 'FAIL'}] {number}. {title}: {detail}"
        return passed
    return record


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for n in sorted(ACCEPTANCE_LINES):
            terminalreporter.write_line(ACCEPTANCE_LINES[n])
