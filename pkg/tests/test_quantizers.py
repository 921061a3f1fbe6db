import numpy as np
import pytest

from bitbudget.quantizers import (
    QuantizerKind, fit_binary, fit_lsq, fit_ternary, fit_unit,
)


def grid_err(w, s, lo, hi):
    c = np.clip(np.round(w / s), lo, hi)
    return float(np.sum((w - s * c) ** 2))


def grid_search(w, lo, hi, smax, step=1e-3):
    grid = np.arange(step, smax, step)
    errs = [grid_err(w, s, lo, hi) for s in grid]
    i = int(np.argmin(errs))
    return float(grid[i]), errs[i]


# ---- binary ----------------------------------------------------------------

def test_binary_closed_form_example():
    r = fit_binary(np.array([1.0, -1.0, 2.0, -2.0]))
    assert r.scale == 1.5
    assert np.allclose(r.reconstructed, [1.5, -1.5, 1.5, -1.5])
    assert abs(np.sum((r.reconstructed - [1, -1, 2, -2]) ** 2) - 1.0) < 1e-12


def test_binary_constant_vector():
    r = fit_binary(np.array([0.7, 0.7, 0.7]))
    assert r.scale == pytest.approx(0.7)
    assert r.rel_error == pytest.approx(0.0, abs=1e-12)


def test_binary_matches_grid_search():
    w = np.random.default_rng(0).standard_normal(4096)
    r = fit_binary(w)
    grid = np.arange(1e-3, 3.0, 1e-3)
    sign = np.where(w >= 0, 1.0, -1.0)
    errs = [np.sum((w - a * sign) ** 2) for a in grid]
    a_star = grid[int(np.argmin(errs))]
    assert abs(r.scale - a_star) / a_star < 0.01


def test_binary_zero_unit():
    r = fit_binary(np.zeros(16))
    assert r.rel_error == 0.0
    assert set(np.unique(r.codes)) <= {-1, 1}


# ---- ternary ---------------------------------------------------------------

def test_ternary_zero_unit():
    r = fit_ternary(np.zeros((4, 4)))
    assert np.all(r.codes == 0) and r.rel_error == 0.0
    assert r.scale > 0


def test_ternary_two_level_exact():
    r = fit_ternary(np.array([1.0, 1.0, -1.0, -1.0]))
    assert np.array_equal(r.codes, [1, 1, -1, -1])
    assert r.scale == pytest.approx(1.0)
    assert r.rel_error == pytest.approx(0.0, abs=1e-12)


def test_ternary_near_joint_grid_optimum():
    w = np.random.default_rng(1).standard_normal(4096)
    r = fit_ternary(w)
    err = np.sum((r.reconstructed - w) ** 2)
    aw = np.abs(w)
    best = np.inf
    for t in np.linspace(0.0, 2.0, 801):
        sel = aw > t
        if not sel.any():
            continue
        s = aw[sel].mean()
        best = min(best, np.sum((w - s * np.sign(w) * sel) ** 2))
    assert err <= 1.02 * best


def test_ternary_level_set():
    w = np.random.default_rng(2).standard_normal((8, 8))
    r = fit_ternary(w)
    assert set(np.unique(r.codes)) <= {-1, 0, 1}
    assert np.allclose(r.reconstructed, r.scale * r.codes)


# ---- lsq -------------------------------------------------------------------

def test_lsq_on_grid_exact():
    s0 = 0.37
    for bits in (2, 3, 4, 8):
        if bits == 2:
            levels = np.arange(-2, 2)  # {-2,-1,0,1}
        else:
            q = 2 ** (bits - 1) - 1
            levels = np.arange(-q, q + 1)
        w = np.repeat(levels.astype(np.float64) * s0, 3)
        r = fit_lsq(w, bits)
        assert r.rel_error == pytest.approx(0.0, abs=1e-12), bits


def test_lsq8_gaussian_rel_error():
    for seed in (100, 101, 102, 103, 104):
        w = np.random.default_rng(seed).standard_normal(1024)
        r = fit_lsq(w, 8)
        assert r.rel_error < 0.01


def test_lsq3_scale_near_grid_optimum():
    w = np.random.default_rng(0).standard_normal(4096)
    r = fit_lsq(w, 3)
    s_star, _ = grid_search(w, -3, 3, 2.0)
    assert abs(r.scale - s_star) / s_star < 0.02


def test_lsq_level_sets():
    w = np.random.default_rng(3).standard_normal(512)
    bounds = {2: (-2, 1), 3: (-3, 3), 4: (-7, 7), 8: (-127, 127)}
    for bits, (lo, hi) in bounds.items():
        r = fit_lsq(w, bits)
        assert r.codes.min() >= lo and r.codes.max() <= hi
        assert np.allclose(r.reconstructed, r.scale * r.codes)


def test_error_monotone_in_bits():
    rels = {k: [] for k in (1.0, 1.58, 2.0, 3.0, 4.0, 8.0)}
    for seed in range(100):
        w = np.random.default_rng(seed).standard_normal(512)
        rels[1.0].append(fit_binary(w).rel_error)
        rels[1.58].append(fit_ternary(w).rel_error)
        for bits in (2, 3, 4, 8):
            rels[float(bits)].append(fit_lsq(w, bits).rel_error)
    means = [np.mean(rels[k]) for k in (1.0, 1.58, 2.0, 3.0, 4.0, 8.0)]
    assert all(a >= b for a, b in zip(means, means[1:]))


def test_refinement_never_exceeds_init_error():
    # keep-best: the returned error is <= the error of the first candidate
    for seed in range(10):
        w = np.random.default_rng(seed).standard_normal(256) * 0.05
        for bits in (2, 3, 4, 8):
            q_hi = {2: 2, 3: 3, 4: 7, 8: 127}[bits]
            s0 = min(2 * np.abs(w).mean() / np.sqrt(q_hi), np.abs(w).max() / q_hi)
            lo, hi = {2: (-2, 1), 3: (-3, 3), 4: (-7, 7), 8: (-127, 127)}[bits]
            init_err = grid_err(w, s0, lo, hi)
            r = fit_lsq(w, bits)
            assert np.sum((r.reconstructed - w) ** 2) <= init_err + 1e-12


# ---- fit_unit / fallback ----------------------------------------------------

def test_fit_unit_top_rung_no_fallback():
    w = np.random.default_rng(4).standard_normal((16, 16)) * 100
    r = fit_unit(w, 8.0)
    assert r.realized_kind is QuantizerKind.Lsq8


def test_fit_unit_zero_weights_action1():
    r = fit_unit(np.zeros((4, 4)), 1.0)
    assert r.rel_error == 0.0
    assert r.realized_kind is QuantizerKind.Binary1


def test_fit_unit_adversarial_fallback_to_ternary():
    w = np.zeros(64)
    w[17] = 1000.0
    binary = fit_binary(w)
    assert binary.rel_error > 0.95  # premise: the binary fit really is this bad
    r = fit_unit(w, 1.0, fallback_threshold=0.95)
    assert r.realized_kind is QuantizerKind.Ternary158
    assert r.rel_error < 0.95


def test_fit_unit_protected_identity():
    rng = np.random.default_rng(5)
    w = rng.standard_normal((8, 8))
    idx = np.array([3, 17, 40], dtype=np.int64)
    vals = np.array([9.0, -9.0, 4.5])
    r = fit_unit(w, 2.0, idx, vals)
    flat = r.reconstructed.ravel()
    assert np.array_equal(flat[idx], vals)


def test_fit_unit_single_escalation_only():
    # action 1 on an adversarial unit escalates exactly one rung even if the
    # ternary fit would still be poor for some other data
    w = np.zeros(64)
    w[0] = 1e6
    r = fit_unit(w, 1.0, fallback_threshold=0.95)
    assert r.realized_kind is QuantizerKind.Ternary158
