import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from otfs_jspl.baselines import OmpConfig, omp, somp3d
from otfs_jspl.channel import flatten_dda, sample_paths
from otfs_jspl.measurement import MeasurementModel, build_operator, make_pilot_pattern, observe
from otfs_jspl.otfs import OtfsConfig

from conftest import crandn

CFG = OtfsConfig(32, 16, 8, 8)


def operator(seed, sigma=0.2, cfg=CFG):
    return build_operator(make_pilot_pattern(cfg, sigma, seed), cfg)


def block_sparse(rng, n_blocks, bk, br, cfg=CFG):
    nl, nk, nt = cfg.dda_shape
    h = np.zeros(cfg.dda_shape, dtype=complex)
    for l in rng.choice(cfg.n_cp, n_blocks, replace=False):
        k0, r0 = rng.integers(nk), rng.integers(nt)
        for dk in range(bk):
            for dr in range(br):
                h[l, (k0 + dk) % nk, (r0 + dr) % nt] = crandn(rng, 1)[0]
    return flatten_dda(h)


def noisy(op, h, snr_db, rng, cfg=CFG):
    y0 = op.matvec(h)
    nv = np.mean(np.abs(y0) ** 2) / 10 ** (snr_db / 10)
    return MeasurementModel(y0 + np.sqrt(nv) * crandn(rng, y0.size), op, nv, cfg)


def nmse_db(est, h):
    return 10 * np.log10(np.sum(np.abs(est - h) ** 2) / np.sum(np.abs(h) ** 2))


class TestConfig:
    @pytest.mark.parametrize("kw", [{"max_atoms": 0}, {"residual_tol": -0.1}, {"block_dims": (1, 0, 3)}, {"block_dims": (1, 3)}])
    def test_rejects(self, kw):
        with pytest.raises(ValueError):
            OmpConfig(**kw)

    def test_from_dict(self):
        assert OmpConfig.from_dict({"max_atoms": 3, "block_dims": [1, 2, 2], "x": 0}) == OmpConfig(3, 0.1, (1, 2, 2))


class TestOmp:
    def test_one_sparse_exact(self, rng):
        op = operator(0)
        h = np.zeros(CFG.n_coefficients, dtype=complex)
        h[1234] = 0.3 - 1.1j
        res = omp(MeasurementModel(op.matvec(h), op, 0.0, CFG), OmpConfig(max_atoms=1))
        assert res.support.tolist() == [1234]
        assert np.max(np.abs(res.estimate - h)) < 1e-8

    def test_zero_observation(self):
        op = operator(0)
        res = omp(MeasurementModel(np.zeros(CFG.n_measurements, complex), op, 0.0, CFG))
        assert res.support.size == 0 and not np.any(res.estimate)

    def test_five_sparse_support(self):
        hits = 0
        for seed in range(100):
            rng = np.random.default_rng(seed)
            op = operator(seed)
            h = np.zeros(CFG.n_coefficients, dtype=complex)
            idx = rng.choice(h.size, 5, replace=False)
            h[idx] = crandn(rng, 5)
            res = omp(MeasurementModel(op.matvec(h), op, 0.0, CFG), OmpConfig(max_atoms=5, residual_tol=0.0))
            hits += set(res.support.tolist()) == set(idx.tolist())
        assert hits >= 95

    def test_residual_monotone_and_orthogonal(self, rng):
        op = operator(3)
        ps = sample_paths(CFG, 4, 100.0, 3)
        model = observe(ps, make_pilot_pattern(CFG, 0.2, 3), CFG, 10.0, 3, operator=op)
        res = omp(model, OmpConfig(max_atoms=30, residual_tol=0.0))
        assert np.all(np.diff(res.residual_norms) <= 1e-12)
        A = op.columns(res.support)
        r = model.y - op.matvec(res.estimate)
        assert np.max(np.abs(A.conj().T @ r)) / np.linalg.norm(model.y) < 1e-8

    def test_residual_tolerance_stops(self):
        op = operator(2)
        ps = sample_paths(CFG, 3, 100.0, 2, on_grid=True)
        model = observe(ps, make_pilot_pattern(CFG, 0.2, 2), CFG, np.inf, 2, operator=op)
        res = omp(model, OmpConfig(max_atoms=50, residual_tol=1e-6))
        assert res.support.size == 3


class TestSomp3d:
    def test_unit_block_matches_first_omp_pick(self):
        ps = sample_paths(CFG, 1, 100.0, 4, on_grid=True)
        model = observe(ps, make_pilot_pattern(CFG, 0.2, 4), CFG, np.inf, 4)
        a = somp3d(model, OmpConfig(max_atoms=1, block_dims=(1, 1, 1)))
        b = omp(model, OmpConfig(max_atoms=1))
        assert a.support.tolist() == b.support.tolist()
        np.testing.assert_allclose(a.estimate, b.estimate, atol=1e-12)

    def test_three_block_superset(self):
        hits = 0
        for seed in range(100):
            rng = np.random.default_rng(seed)
            op = operator(seed)
            h = block_sparse(rng, 3, 3, 3)
            res = somp3d(MeasurementModel(op.matvec(h), op, 0.0, CFG), OmpConfig(27, 1e-9, (1, 3, 3)))
            hits += set(np.flatnonzero(h).tolist()) <= set(res.support.tolist())
        assert hits >= 95

    def test_halved_blocks_degrade(self):
        gaps = []
        for seed in range(30):
            rng = np.random.default_rng(seed)
            op = operator(seed)
            h = block_sparse(rng, 3, 4, 4)
            model = noisy(op, h, 20.0, rng)
            good = somp3d(model, OmpConfig(48, 0.0, (1, 4, 4)))
            half = somp3d(model, OmpConfig(48, 0.0, (1, 2, 2)))
            gaps.append(nmse_db(half.estimate, h) - nmse_db(good.estimate, h))
        assert np.median(gaps) >= 5.0

    def test_block_exceeds_grid(self):
        op = operator(0)
        with pytest.raises(ValueError):
            somp3d(MeasurementModel(np.ones(CFG.n_measurements, complex), op, 0.0, CFG), OmpConfig(block_dims=(1, 17, 1)))

    def test_zero_observation(self):
        op = operator(0)
        res = somp3d(MeasurementModel(np.zeros(CFG.n_measurements, complex), op, 0.0, CFG))
        assert res.support.size == 0 and not np.any(res.estimate)

    def test_atom_budget(self):
        op = operator(1)
        ps = sample_paths(CFG, 4, 100.0, 1)
        model = observe(ps, make_pilot_pattern(CFG, 0.2, 1), CFG, 5.0, 1, operator=op)
        res = somp3d(model, OmpConfig(max_atoms=20, residual_tol=0.0, block_dims=(1, 3, 3)))
        assert 20 <= res.support.size < 20 + 9
        assert np.all(np.diff(res.residual_norms) <= 1e-12)

    def test_cyclic_angle_block(self):
        op = operator(0)
        h = np.zeros(CFG.dda_shape, dtype=complex)
        h[2, 5, [7, 0]] = [1.0, -1.0j]
        h = flatten_dda(h)
        res = somp3d(MeasurementModel(op.matvec(h), op, 0.0, CFG), OmpConfig(2, 1e-9, (1, 1, 2)))
        assert set(np.flatnonzero(h).tolist()) <= set(res.support.tolist())


@settings(max_examples=20, deadline=None)
@given(seed=st.integers(0, 2**31), atoms=st.integers(1, 25), snr=st.sampled_from([0.0, 10.0, 30.0]))
def test_property_omp_residual_monotone(seed, atoms, snr):
    cfg = OtfsConfig(16, 8, 4, 4)
    ps = sample_paths(cfg, 3, 100.0, seed % 997)
    model = observe(ps, make_pilot_pattern(cfg, 0.3, seed), cfg, snr, seed)
    res = omp(model, OmpConfig(max_atoms=atoms, residual_tol=0.0))
    assert len(res.residual_norms) == res.support.size + 1 <= atoms + 1
    assert np.all(np.diff(res.residual_norms) <= 1e-12 * res.residual_norms[0])
    assert len(set(res.support.tolist())) == res.support.size
