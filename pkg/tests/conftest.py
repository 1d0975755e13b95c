import numpy as np
import pytest
import torch

from drivefusion.dataset import GenConfig, generate_synthetic

TINY = GenConfig(
    n_routes=2,
    chapters_per_route=3,
    frames_per_chapter=40,
    resolution=(32, 18),
    seed=3,
    split_fractions=(0.5, 0.25, 0.25),
)


@pytest.fixture(scope="session")
def tiny_manifest(tmp_path_factory):
    return generate_synthetic(TINY, tmp_path_factory.mktemp("tiny") / "data")


@pytest.fixture(autouse=True)
def _torch_threads():
    torch.set_num_threads(1)
    yield


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


# criterion number -> list of (part, passed, detail); printed after the run
ACCEPTANCE: dict = {}


@pytest.fixture
def record_criterion():
    def record(number, passed, detail, part=None):
        ACCEPTANCE.setdefault(number, []).append((part, bool(passed), detail))
        print(f"criterion {number}{f' [{part}]' if part else ''}: {'PASS' if passed else 'FAIL'} {detail}")

    return record


def pytest_terminal_summary(terminalreporter):
    if not ACCEPTANCE:
        return
    terminalreporter.section("acceptance criteria")
    for number in sorted(ACCEPTANCE):
        parts = ACCEPTANCE[number]
        passed = all(p for _, p, _ in parts)
        if len(parts) == 1:
            detail = parts[0][2]
        else:
            detail = "; ".join(f"{name} {'ok' if p else 'FAILED'} ({d})" for name, p, d in parts)
        terminalreporter.write_line(f"criterion {number}: {'PASS' if passed else 'FAIL'}  {detail}")
