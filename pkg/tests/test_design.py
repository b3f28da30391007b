"""HRF, expected BOLD regressors and design files."""
import math

import numpy as np
import pytest

from mvdlm.design import (
    DesignMatrix,
    HrfParams,
    StimulusSpec,
    build_design,
    canonical_hrf,
    expected_bold,
    load_design,
    load_stimulus,
    save_design,
    stimulus_train,
)
from mvdlm.dlm import ModelConfig, run_filter
from mvdlm.errors import FormatError, ParameterError


def gamma_density(t, shape, scale):
    if t <= 0:
        return 0.0
    return t ** (shape - 1) * math.exp(-t / scale) / (math.gamma(shape) * scale ** shape)


def hrf_by_hand(t, p=HrfParams()):
    return (gamma_density(t, p.peak_delay / p.peak_dispersion, p.peak_dispersion)
            - p.undershoot_ratio * gamma_density(t, p.undershoot_delay / p.undershoot_dispersion,
                                                 p.undershoot_dispersion))


class TestHrf:
    def test_shape_matches_closed_form(self):
        t = np.linspace(0, 32, 321)
        raw = np.array([hrf_by_hand(v) for v in t])
        h = canonical_hrf(t)
        np.testing.assert_allclose(h * raw.max(), raw, rtol=1e-3, atol=1e-6)

    def test_peak_and_undershoot(self):
        t = np.arange(0, 32, 0.01)
        h = canonical_hrf(t)
        assert h.max() == pytest.approx(1.0, abs=1e-6)
        assert 4.5 < t[np.argmax(h)] < 5.5
        assert h.min() < 0
        assert 13 < t[np.argmin(h)] < 17

    def test_zero_before_onset(self):
        assert np.all(canonical_hrf(np.array([-5.0, -0.1])) == 0)

    def test_rejects_bad_params(self):
        with pytest.raises(ParameterError):
            HrfParams(peak_delay=-1.0)
        with pytest.raises(ParameterError):
            HrfParams(length=10.0)


class TestExpectedBold:
    def test_matches_brute_force_convolution(self):
        stim = StimulusSpec([4.0, 30.0], [6.0, 3.0])
        n_scans, tr, up = 30, 2.0, 8
        dt = tr / up
        x = expected_bold(stim, n_scans, tr, upsample=up, normalize=False)
        kernel_len = int(round(32.0 / dt)) + 1
        h = [canonical_hrf(np.array([i * dt]))[0] for i in range(kernel_len)]
        f = stimulus_train(stim, n_scans * up, dt)
        for k in range(n_scans):
            fine = k * up
            acc = sum(f[i] * h[fine - i] for i in range(fine + 1) if fine - i < kernel_len)
            assert x[k] == pytest.approx(acc * dt, abs=1e-12)

    def test_linearity(self):
        a = StimulusSpec([0.0], [10.0])
        b = StimulusSpec([50.0], [10.0])
        both = StimulusSpec([0.0, 50.0], [10.0, 10.0])
        xa, xb, xab = (expected_bold(s, 60, 2.0, normalize=False) for s in (a, b, both))
        np.testing.assert_allclose(xa + xb, xab, atol=1e-12)

    def test_shift_by_whole_scans(self):
        stim = StimulusSpec([4.0, 40.0], [8.0, 8.0])
        x = expected_bold(stim, 60, 2.0, normalize=False)
        y = expected_bold(stim.shifted(6.0), 60, 2.0, normalize=False)
        np.testing.assert_allclose(y[3:], x[:-3], atol=1e-12)
        np.testing.assert_allclose(y[:3], 0.0, atol=1e-12)

    def test_normalized_peak(self):
        x = expected_bold(StimulusSpec([0.0, 40.0], [20.0, 20.0]), 60, 2.0)
        assert np.max(np.abs(x)) == pytest.approx(1.0)

    def test_empty_window_warns(self):
        with pytest.warns(RuntimeWarning):
            x = expected_bold(StimulusSpec([500.0], [5.0]), 20, 2.0)
        assert np.all(x == 0)

    def test_argmax_invariance(self):
        """Scaling regressors by c > 0 and effects by 1/c keeps the sign of m."""
        d = build_design([StimulusSpec([0.0, 60.0], [20.0, 20.0]),
                          StimulusSpec([30.0, 90.0], [20.0, 20.0])], 60, 2.0)
        beta = np.array([[1.5], [-0.8]])
        cfg = ModelConfig(beta=0.98, burn_in=1)
        signs = []
        for c in (1.0, 0.1, 7.0):
            y = (d.values * c) @ (beta / c)
            signs.append(np.sign(run_filter(y, d.values * c, cfg).m[1:, :, 0]))
        np.testing.assert_array_equal(signs[0], signs[1])
        np.testing.assert_array_equal(signs[0], signs[2])
        np.testing.assert_array_equal(signs[0][-1], np.sign(beta[:, 0]))


class TestStimulus:
    def test_validation(self):
        with pytest.raises(ParameterError):
            StimulusSpec([0.0, 1.0], [1.0])
        with pytest.raises(ParameterError):
            StimulusSpec([5.0, 1.0], [1.0, 1.0])
        with pytest.raises(ParameterError):
            StimulusSpec([1.0], [0.0])

    def test_train_boxcar(self):
        f = stimulus_train(StimulusSpec([2.0], [4.0]), 10, 1.0)
        np.testing.assert_array_equal(f, [0, 0, 1, 1, 1, 1, 0, 0, 0, 0])

    def test_load_whitespace_and_comma(self, tmp_path):
        a = tmp_path / "a.txt"
        a.write_text("# onsets\n0 10 1\n30 10 1\n")
        b = tmp_path / "b.csv"
        b.write_text("onset,duration\n0,10\n30,10\n")
        sa, sb = load_stimulus(a), load_stimulus(b)
        np.testing.assert_array_equal(sa.onsets, sb.onsets)
        assert sa.name == "a"

    def test_load_bad_columns(self, tmp_path):
        p = tmp_path / "s.txt"
        p.write_text("0 1 2 3\n")
        with pytest.raises(FormatError, match=":1:"):
            load_stimulus(p)


class TestDesignFiles:
    def test_round_trip(self, tmp_path, two_task_design):
        path = tmp_path / "d.csv"
        save_design(two_task_design, path)
        back = load_design(path, tr=two_task_design.tr)
        np.testing.assert_array_equal(back.values, two_task_design.values)
        assert back.task_names == ["a", "b"]
        assert back.digest() == two_task_design.digest()

    def test_ragged_row_names_row(self, tmp_path):
        p = tmp_path / "d.csv"
        p.write_text("a,b\n1,2\n3\n")
        with pytest.raises(FormatError, match="row 2"):
            load_design(p)

    def test_bad_cell_names_column(self, tmp_path):
        p = tmp_path / "d.csv"
        p.write_text("a,b\n1,2\n3,x\n")
        with pytest.raises(FormatError, match="column 'b'"):
            load_design(p)
        p.write_text("a,b\n1,nan\n")
        with pytest.raises(FormatError, match="non-finite"):
            load_design(p)

    def test_digest_sensitive_to_values(self):
        d1 = DesignMatrix(np.ones((4, 1)))
        d2 = DesignMatrix(np.ones((4, 1)) * 2)
        assert d1.digest() != d2.digest()
        assert d1.digest() == DesignMatrix(np.ones((4, 1))).digest()

    def test_names_default(self):
        assert DesignMatrix(np.zeros((3, 2))).task_names == ["task1", "task2"]
