import sys
import time
from dataclasses import dataclass
from pathlib import Path

import pytest
from hypothesis import settings

sys.path.insert(0, str(Path(__file__).parent))

settings.register_profile("default", max_examples=50, deadline=None)
settings.load_profile("default")


@pytest.fixture(scope="session")
def desk_corpus(tmp_path_factory):
    from stseg.data import generate_desk_corpus

    root = tmp_path_factory.mktemp("desk_data")
    ds = generate_desk_corpus(root, seed=0, n_train=20, n_test=20, size=64)
    return root, ds


@pytest.fixture(scope="session")
def tiny_corpus(tmp_path_factory):
    """Small 64x64 corpus for quick pipeline checks."""
    from stseg.data import generate_desk_corpus

    root = tmp_path_factory.mktemp("tiny_data")
    ds = generate_desk_corpus(root, seed=3, n_train=4, n_test=4, size=64, n_sources=3)
    return root, ds


@dataclass
class DeskRun:
    config: object
    record: object
    seconds: float
    report: object
    csv_path: Path
    data: object


def desk_profile_for(root, **changes):
    from stseg.config import desk_profile

    return desk_profile(data_root=str(root), category="desk", **changes)


def _desk_run(root, dataset, run_root):
    from stseg.infer import Predictor, evaluate_predictor
    from stseg.metrics import write_reports
    from stseg.trainer import TrainData, train

    cfg = desk_profile_for(root, run_root=str(run_root))
    data = TrainData.from_config(cfg, dataset)
    start = time.perf_counter()
    record = train(cfg, data=data)
    seconds = time.perf_counter() - start
    report = evaluate_predictor(Predictor.from_run(cfg), dataset)
    csv_path, _ = write_reports([report], Path(run_root) / "metrics")
    return DeskRun(cfg, record, seconds, report, csv_path, data)


@pytest.fixture(scope="session")
def desk_run(desk_corpus, tmp_path_factory):
    """Full two-stage desk-profile run on the seed-0 corpus (several minutes on one core)."""
    return _desk_run(*desk_corpus, tmp_path_factory.mktemp("desk_run_a"))


@pytest.fixture(scope="session")
def desk_run_repeat(desk_corpus, desk_run, tmp_path_factory):
    return _desk_run(*desk_corpus, tmp_path_factory.mktemp("desk_run_b"))


def tiny_config(root, **changes):
    from stseg.config import desk_profile

    base = dict(
        data_root=str(root), category="desk", run_root=str(root / "runs"),
        batch_size=2, student_steps=3, seg_steps=3, seg_width=16, log_every=1,
    )
    base.update(changes)
    return desk_profile(**base)


def pytest_terminal_summary(terminalreporter):
    module = sys.modules.get("test_acceptance") or sys.modules.get("tests.test_acceptance")
    results = getattr(module, "RESULTS", None)
    if not results:
        return
    terminalreporter.section("acceptance criteria")
    for number in sorted(results):
        title, ok, seconds, detail = results[number]
        line = f"criterion {number}: {'PASS' if ok else 'FAIL'} ({seconds:.1f}s) {title}"
        terminalreporter.write_line(line + (f" [{detail}]" if detail else ""))
