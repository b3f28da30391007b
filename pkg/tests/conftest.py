import numpy as np
import pytest

from mvdlm.design import DesignMatrix, StimulusSpec, build_design
from mvdlm.dlm import ModelConfig
from mvdlm.summary import SubjectSummary, SummaryMeta, VoxelSummary

# lines reported by the acceptance suite, echoed at the end of the session
ACCEPTANCE_LINES: list[str] = []


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for line in sorted(ACCEPTANCE_LINES, key=lambda s: int(s.split()[2].rstrip(":"))):
            terminalreporter.write_line(line)


def block_regressor(T: int, tr: float = 2.0, period: float = 20.0, name="task",
                    offset: float = 0.0) -> DesignMatrix:
    onsets = np.arange(offset, T * tr, 2 * period)
    return build_design([StimulusSpec(onsets, np.full(onsets.size, period), name)], T, tr)


@pytest.fixture
def rng():
    return np.random.default_rng(20240611)


@pytest.fixture
def block_design():
    return block_regressor(120)


@pytest.fixture
def two_task_design():
    T, tr = 120, 2.0
    a = StimulusSpec(np.arange(0, T * tr, 80.0), np.full(3, 20.0), "a")
    b = StimulusSpec(np.arange(40, T * tr, 80.0), np.full(3, 20.0), "b")
    return build_design([a, b], T, tr)


@pytest.fixture
def cfg():
    return ModelConfig(beta=0.95, burn_in=10)


def random_summary(rng, indices=(3, 8, 11), p=2, T=12, q=3) -> SubjectSummary:
    C = np.stack([np.eye(p) * (1 + t) for t in range(T + 1)])
    voxels = {}
    for i in indices:
        A = rng.normal(size=(T + 1, q, q))
        voxels[i] = VoxelSummary(i, np.arange(q) + i, rng.normal(size=(T + 1, p, q)),
                                 A @ np.swapaxes(A, 1, 2) + np.eye(q), C)
    meta = SummaryMeta(dims=(4, 4, 4), r=1, beta=[0.95] * p, task_names=["a", "b"][:p],
                       burn_in=2, n_scans=T, design_hash="abc")
    return SubjectSummary(meta, C, np.arange(T + 1) + 1.0, voxels=voxels)
