"""Whole-volume subject maps: composition, determinism, failures and outputs."""
import numpy as np
import pytest

from mvdlm.dlm import ModelConfig, run_filter
from mvdlm.errors import ConfigurationError
from mvdlm.mapping import map_subject, voxel_rng
from mvdlm.nifti import read_nifti
from mvdlm.simulate import PhantomSpec, Region, generate_phantom
from mvdlm.trajectories import evidence, sample_trajectories
from mvdlm.volume import extract_series, neighborhood

from conftest import block_regressor


@pytest.fixture(scope="module")
def phantom():
    design = block_regressor(100)
    spec = PhantomSpec(dims=(6, 6, 5), regions=[Region((2, 2, 2), 1.5, 5.0)], noise_sd=1.0,
                       seed=3)
    vol, truth = generate_phantom(spec, design)
    return vol, truth, design


def test_single_voxel_equals_pipeline(phantom):
    vol, _, design = phantom
    cfg = ModelConfig(burn_in=20)
    mask = np.zeros(vol.dims, dtype=bool)
    mask[2, 2, 2] = True
    ev = map_subject(vol.with_mask(mask), design, cfg, "ffbs", "average", 300, seed=9)
    cl = neighborhood((2, 2, 2), 1, mask)
    post = run_filter(extract_series(vol, cl), design, cfg)
    idx = np.ravel_multi_index((2, 2, 2), vol.dims)
    draws = sample_trajectories(post, "ffbs", "average", 300, voxel_rng(9, idx))
    assert ev.values[0, 2, 2, 2] == evidence(draws[:, 0]).probability
    assert ev.values[0].sum() == ev.values[0, 2, 2, 2]


@pytest.mark.parametrize("algorithm", ["fest", "fsts", "ffbs"])
def test_deterministic_and_chunk_invariant(phantom, algorithm):
    vol, _, design = phantom
    cfg = ModelConfig(burn_in=20)
    a = map_subject(vol, design, cfg, algorithm, "marginal", 100, seed=4)
    b = map_subject(vol, design, cfg, algorithm, "marginal", 100, seed=4)
    c = map_subject(vol, design, cfg, algorithm, "marginal", 100, seed=4, workers=2)
    np.testing.assert_array_equal(a.values, b.values)
    np.testing.assert_array_equal(a.values, c.values)
    d = map_subject(vol, design, cfg, algorithm, "marginal", 100, seed=5)
    assert not np.array_equal(a.values, d.values)


def test_detects_region(phantom):
    vol, truth, design = phantom
    ev = map_subject(vol, design, ModelConfig(burn_in=20), "fest", "marginal", 200, seed=1)
    assert ev.active()[truth].mean() > 0.9
    assert ev.active()[~truth].mean() < 0.05
    assert np.all((ev.values >= 0) & (ev.values <= 1))


def test_failures_are_recorded_not_raised(phantom):
    vol, _, design = phantom
    data = vol.data.copy()
    data[0, 0, 0] = 7.0  # constant series forced into the mask
    bad = type(vol)(data, tr=vol.tr, mask=np.ones(vol.dims, dtype=bool))
    ev = map_subject(bad, design, ModelConfig(burn_in=20), "fsts", "marginal", 50, seed=1)
    failed = set(ev.failures)
    # the constant voxel and its in-grid neighbors share its cluster
    assert 0 in failed
    assert len(failed) == 4
    assert np.all(ev.values.reshape(1, -1)[0, list(failed)] == 0)
    assert len(ev.failures) < ev.mask.sum()


def test_joint_kind_and_contrast(two_task_design):
    T = two_task_design.n_scans
    rng = np.random.default_rng(0)
    data = rng.normal(size=(4, 4, 3, T))
    data += 6.0 * (two_task_design.values[:, 0] - two_task_design.values[:, 1])
    from mvdlm.volume import Bold4D
    vol = Bold4D(data)
    # retain only scans after both tasks have been seen at least once
    ev = map_subject(vol, two_task_design, ModelConfig(burn_in=50), "fest", "joint", 200,
                     contrasts=[(0, 1)])
    assert ev.values.shape == (2, 4, 4, 3)
    assert "a-b" in ev.contrasts
    assert ev.map("a-b")[1, 1, 1] > 0.95
    assert ev.map("b")[1, 1, 1] < 0.95


def test_summary_in_memory_and_on_disk(phantom, tmp_path):
    vol, _, design = phantom
    cfg = ModelConfig(burn_in=20)
    mem = map_subject(vol, design, cfg, "fsts", "average", 20, summary=True, chunk_size=16)
    disk = map_subject(vol, design, cfg, "fsts", "average", 20, summary=tmp_path / "s.mvdlm",
                       chunk_size=16)
    np.testing.assert_array_equal(mem.values, disk.values)
    assert len(mem.summary) == len(disk.summary) == vol.mask.sum()
    for v in (0, 37, int(disk.summary.indices[-1])):
        a, b = mem.summary.voxel(v), disk.summary.voxel(v)
        np.testing.assert_array_equal(a.m, b.m)
        np.testing.assert_array_equal(a.S, b.S)
        np.testing.assert_array_equal(a.neighbors, b.neighbors)
    assert disk.summary.meta.design_hash == design.digest()


def test_save_outputs(phantom, tmp_path):
    vol, _, design = phantom
    ev = map_subject(vol, design, ModelConfig(burn_in=20), "fsts", "average", 20)
    paths = ev.save(tmp_path, header=vol.header)
    img, _ = read_nifti(paths[0])
    np.testing.assert_allclose(img, ev.values[0], atol=1e-7)
    rows = paths[-1].read_text().splitlines()
    assert rows[0] == "i,j,k,task" and len(rows) == vol.mask.sum() + 1


@pytest.mark.parametrize("kw", [dict(threshold=0.0), dict(n_draws=0), dict(contrasts=[(0, 0)])])
def test_argument_validation(phantom, kw):
    vol, _, design = phantom
    with pytest.raises(ConfigurationError):
        map_subject(vol, design, ModelConfig(burn_in=20), **kw)


def test_design_length_mismatch(phantom):
    vol, _, _ = phantom
    with pytest.raises(ConfigurationError):
        map_subject(vol, block_regressor(90), ModelConfig(burn_in=20))
