import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from optikonv.errors import ContractError, ParameterError
from optikonv.optics import OpticsConfig, PhaseMask, Psf, psf_from_phase
from optikonv.pgm import export_dose_map, read_dose_map, read_pgm16
from optikonv.retrieval import (
    FabModel, _Forward, apply_fab_model, gerchberg_saxton, phase_gradient, retrieve_phase_sgd,
    simulated_loss, spot_target,
)
from _oracles import ncc

CFG = OpticsConfig(mask_pixels=64, distance=0.5e-3, aperture=None)


@pytest.fixture(scope="module")
def random_mask_target():
    phase = np.random.default_rng(3).uniform(0, 2 * np.pi, (64, 64))
    return psf_from_phase(PhaseMask(phase, CFG))


class TestGradient:
    def test_matches_finite_differences(self):
        t = spot_target().intensity.astype(np.float64)
        fwd = _Forward(CFG)
        phase = np.random.default_rng(0).uniform(0, 2 * np.pi, (64, 64))
        _, grad = phase_gradient(phase, t, fwd)
        for idx in [(3, 4), (30, 30), (50, 10), (63, 0)]:
            h = 1e-6
            p = phase.copy()
            p[idx] += h
            lp, _ = phase_gradient(p, t, fwd)
            p[idx] -= 2 * h
            lm, _ = phase_gradient(p, t, fwd)
            num = (lp - lm) / (2 * h)
            # loss ~1 in float64 with h=1e-6 leaves ~1e-10 absolute noise
            assert abs(num - grad[idx]) <= 1e-5 * np.abs(grad).max()


class TestGerchbergSaxton:
    def test_one_iteration_valid(self):
        mask = gerchberg_saxton(spot_target(), CFG, iters=1)
        assert mask.phase.min() >= 0 and mask.phase.astype(np.float64).max() < 2 * np.pi

    def test_random_mask_target(self, random_mask_target):
        mask = gerchberg_saxton(random_mask_target, CFG, iters=200)
        assert ncc(psf_from_phase(mask).intensity, random_mask_target.intensity) >= 0.9

    def test_airy_spot(self):
        cfg = OpticsConfig(mask_pixels=64, distance=0.5e-3, aperture=4)
        target = psf_from_phase(PhaseMask(np.zeros((64, 64)), cfg))
        mask = gerchberg_saxton(target, cfg, iters=200)
        assert ncc(psf_from_phase(mask).intensity, target.intensity) >= 0.99

    def test_rejects_zero_iters(self):
        with pytest.raises(ParameterError):
            gerchberg_saxton(spot_target(), CFG, iters=0)


class TestSgdRetrieval:
    def test_beats_gs_on_random_mask(self, random_mask_target):
        gs = gerchberg_saxton(random_mask_target, CFG, iters=200)
        _, history = retrieve_phase_sgd(random_mask_target, CFG, iters=500)
        assert history[-1] < 0.2 * simulated_loss(gs.phase, random_mask_target, CFG)

    def test_zero_iterations(self):
        init = np.random.default_rng(1).uniform(0, 2 * np.pi, (64, 64))
        mask, history = retrieve_phase_sgd(spot_target(), CFG, iters=0, init_phase=init)
        assert history == []
        np.testing.assert_allclose(mask.phase, init.astype(np.float32), atol=1e-6)

    def test_history_monotone_and_finite(self):
        _, history = retrieve_phase_sgd(spot_target(), CFG, iters=150, lr=1e4)
        assert len(history) == 150
        assert np.isfinite(history).all()
        assert all(b <= a for a, b in zip(history, history[1:]))

    def test_sparse_spots_converge(self):
        target = spot_target()
        mask, history = retrieve_phase_sgd(target, CFG, iters=500)
        assert ncc(psf_from_phase(mask).intensity, target.intensity) >= 0.95
        assert history[-1] == pytest.approx(simulated_loss(mask.phase, target, CFG), rel=1e-4)

    def test_with_fab_model(self):
        fab = FabModel(levels=8, dose_blur_sigma=0.0)
        mask, history = retrieve_phase_sgd(spot_target(), CFG, iters=100, fab=fab)
        assert mask.levels == 8
        assert ncc(psf_from_phase(mask).intensity, spot_target().intensity) > 0.8
        assert all(b <= a for a, b in zip(history, history[1:]))

    def test_unnormalized_target(self):
        with pytest.raises(ContractError):
            retrieve_phase_sgd(Psf(np.ones((64, 64)), normalized=False), CFG, iters=1)


class TestFabModel:
    def test_binary(self, rng):
        mask = PhaseMask(rng.uniform(0, 2 * np.pi, (64, 64)), CFG)
        out = apply_fab_model(mask, FabModel(levels=2, dose_blur_sigma=1.0))
        assert set(np.unique(out.phase).tolist()) <= {0.0, np.float32(np.pi).item()}

    def test_identity_when_off(self, rng):
        mask = PhaseMask(rng.uniform(0, 2 * np.pi, (64, 64)), CFG)
        out = apply_fab_model(mask, FabModel(levels=0, dose_blur_sigma=0.0))
        np.testing.assert_array_equal(out.phase, mask.phase)

    @settings(max_examples=20, deadline=None)
    @given(st.integers(2, 64), st.integers(0, 2 ** 31 - 1))
    def test_quantization_error_bound(self, levels, seed):
        phase = np.random.default_rng(seed).uniform(0, 2 * np.pi, (64, 64))
        mask = PhaseMask(phase, CFG)
        out = apply_fab_model(mask, FabModel(levels=levels)).phase.astype(np.float64)
        d = np.abs(out - mask.phase.astype(np.float64))
        d = np.minimum(d, 2 * np.pi - d)
        assert d.max() <= np.pi / levels + 1e-6

    def test_rejects_one_level(self):
        with pytest.raises(ParameterError):
            apply_fab_model(PhaseMask(np.zeros((64, 64)), CFG), FabModel(levels=1))


class TestDoseMap:
    def test_formula_and_header(self, tmp_path):
        phase = np.zeros((64, 64))
        phase[0, 1] = np.pi
        mask = PhaseMask(phase, CFG, levels=2)
        path = export_dose_map(mask, tmp_path / "dose.pgm")
        values, tokens, _ = read_pgm16(path)
        assert tokens == ["P5", "64", "64", "65535"]
        assert values[0, 0] == 0 and values[0, 1] == 32768

    @pytest.mark.parametrize("levels", [2, 3, 8, 16, 256])
    def test_round_trip(self, tmp_path, rng, levels):
        fab = FabModel(levels=levels)
        mask = apply_fab_model(PhaseMask(rng.uniform(0, 2 * np.pi, (64, 64)), CFG), fab)
        path = export_dose_map(mask, tmp_path / "d.pgm")
        np.testing.assert_array_equal(read_dose_map(path), mask.phase)

    def test_unquantized_rejected(self, tmp_path):
        with pytest.raises(ContractError):
            export_dose_map(PhaseMask(np.zeros((64, 64)), CFG), tmp_path / "x.pgm")
