import csv

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from grokunlearn import modsim as ms
from grokunlearn.modsim import ModularModelCfg
from grokunlearn.numkernel import RngState

SMALL = ModularModelCfg(m=8, d=256, p=0.5, rho=0.9, n_pairs=400, seed=1)


def test_validation():
    for bad in (dict(d=100, m=64), dict(p=0.0), dict(p=1.5), dict(rho=-0.1), dict(sigma=0.0), dict(m=4, d=4, rho=0.5)):
        with pytest.raises(ValueError):
            ModularModelCfg(**bad).validate()
    ModularModelCfg(m=4, d=4, rho=1.0).validate()  # 1-d blocks are fine without noise
    with pytest.raises(ValueError):
        ms.estimate_correlation(ModularModelCfg(n_pairs=50))


def test_frame_unit_and_block_supported():
    frame = ms.sample_module_frame(SMALL, RngState(0))
    assert frame.shape == (8, 32)
    np.testing.assert_allclose(np.linalg.norm(frame, axis=1), 1.0, atol=1e-6)
    full = ms.frame_vectors(SMALL, frame)
    for i in range(8):
        outside = np.delete(full[i], np.s_[i * 32 : (i + 1) * 32])
        assert not outside.any()
    single = ms.sample_module_frame(ModularModelCfg(m=1, d=16), RngState(0))
    assert single.shape == (1, 16) and np.linalg.norm(single) == pytest.approx(1.0)


def test_gradient_block_structure():
    cfg = ModularModelCfg(m=8, d=256, p=0.6, rho=0.7, sigma=1.5)
    frame = ms.sample_module_frame(cfg, RngState(0))
    g = ms.sample_gradient(cfg, frame, RngState(0, 5))
    assert g.values.shape == (256,) and len(g.index_map) == 8
    blocks = g.values.reshape(8, 32)
    active = np.linalg.norm(blocks, axis=1) > 0
    assert active.any()
    np.testing.assert_allclose(np.sum(blocks[active] ** 2, axis=1), 1.5**2 * 256 / 8, rtol=1e-5)
    # shared component is exactly sqrt(rho) of the block scale
    scale = np.sqrt(1.5**2 * 256 / 8)
    np.testing.assert_allclose(np.sum(blocks[active] * frame[active], axis=1), np.sqrt(0.7) * scale, rtol=1e-9)


def test_rho_one_blocks_are_frame_directions():
    cfg = ModularModelCfg(m=4, d=64, p=1.0, rho=1.0)
    frame = ms.sample_module_frame(cfg, RngState(3))
    g = ms.sample_gradient(cfg, frame, RngState(3, 1)).values.reshape(4, 16)
    np.testing.assert_allclose(g, np.sqrt(16) * frame, atol=1e-12)


def test_cross_module_inner_products_are_zero():
    cfg = ModularModelCfg(m=8, d=128, p=0.7, rho=0.5)
    frame = ms.sample_module_frame(cfg, RngState(0))
    a = ms.sample_gradient(cfg, frame, RngState(0, 1))
    b = ms.sample_gradient(cfg, frame, RngState(0, 2))

    def part(g, i):
        name, off, n = g.index_map[i]
        out = np.zeros_like(g.values)
        out[off : off + n] = g.values[off : off + n]
        return out

    for i in range(8):
        for j in range(8):
            if i != j:
                assert part(a, i) @ part(b, j) == 0.0


def test_shared_module_block_inner_product():
    cfg = ModularModelCfg(m=4, d=64, p=1.0, rho=0.6)
    frame = ms.sample_module_frame(cfg, RngState(0))
    a, _ = ms._sample_blocks(cfg, frame, np.random.default_rng(1), 10_000)
    b, _ = ms._sample_blocks(cfg, frame, np.random.default_rng(2), 10_000)
    ip = np.einsum("nk,nk->n", a[:, 0], b[:, 0])
    target = 0.6 * 64 / 4
    assert abs(ip.mean() - target) <= 3 * ip.std(ddof=1) / np.sqrt(ip.size)


def test_all_inactive_draws_are_resampled():
    cfg = ModularModelCfg(m=2, d=16, p=0.05, rho=0.5, n_pairs=200)
    r = ms.estimate_correlation(cfg)
    assert r.resampled > 0
    mask, _ = ms._active_masks(cfg, np.random.default_rng(0), 1000)
    assert mask.any(axis=1).all()


def test_p_one_rho_one_is_exactly_one():
    cfg = ModularModelCfg(m=8, d=64, p=1.0, rho=1.0, n_pairs=100)
    r = ms.estimate_correlation(cfg)
    assert r.empirical_corr_mean == 1.0 and r.standard_error == 0.0
    assert ms.aggregate_correlation(cfg, (5, 7), trials=20).empirical_corr_mean == 1.0


def test_operating_point():
    assert ModularModelCfg(p=0.5, rho=0.9).predicted == 0.45


def test_small_grid_matches_prediction():
    for p in (0.25, 0.75):
        r = ms.estimate_correlation(ModularModelCfg(m=16, d=512, p=p, rho=0.8, n_pairs=1000, seed=2))
        assert abs(r.empirical_corr_mean - p * 0.8) <= 0.03
        assert r.predicted == p * 0.8


def test_monotone_in_p():
    means = [ms.estimate_correlation(ModularModelCfg(m=16, d=512, p=p, rho=0.9, n_pairs=500)).empirical_corr_mean for p in (0.1, 0.5, 1.0)]
    assert means == sorted(means)


def test_aggregate_size_one_matches_pairwise():
    a = ms.aggregate_correlation(SMALL, (1, 1))
    b = ms.estimate_correlation(SMALL)
    assert a == b


def test_aggregate_large_sets_concentrate():
    pair = ms.aggregate_correlation(SMALL, (1, 1), trials=200)
    agg = ms.aggregate_correlation(SMALL, (500, 500), trials=20)
    assert agg.standard_error < pair.standard_error


def test_seeded_runs_are_reproducible():
    a = ms.aggregate_correlation(SMALL, trials=300, chunk_floats=2**24)
    b = ms.aggregate_correlation(SMALL, trials=300, chunk_floats=2**24)
    assert a == b


def test_sweep_csv(tmp_path):
    cfgs = [ModularModelCfg(m=4, d=64, p=p, rho=0.5, n_pairs=100) for p in (0.5, 1.0)]
    rows = ms.sweep(cfgs, tmp_path / "s.csv")
    with open(tmp_path / "s.csv") as fh:
        back = list(csv.DictReader(fh))
    assert list(back[0]) == list(ms.SWEEP_COLUMNS)
    assert len(back) == 2 and float(back[1]["empirical"]) == pytest.approx(rows[1]["empirical"])


@settings(max_examples=20, deadline=None)
@given(st.sampled_from([1, 2, 4, 8]), st.floats(0.05, 1.0), st.floats(0.0, 1.0), st.floats(0.1, 3.0), st.integers(0, 1000))
def test_norm_identity_property(m, p, rho, sigma, seed):
    cfg = ModularModelCfg(m=m, d=16 * m, p=p, rho=rho, sigma=sigma, seed=seed)
    frame = ms.sample_module_frame(cfg, RngState(seed))
    g, _ = ms._sample_blocks(cfg, frame, np.random.default_rng(seed), 4)
    n2 = np.sum(g**2, axis=2)
    active = n2 > 0
    np.testing.assert_allclose(n2[active], sigma**2 * 16, rtol=1e-9)
    assert active.any(axis=1).all()
