"""Tests for target distributions, projection, and cross-mesh transfer."""

import numpy as np
import pytest

from lensopt.domain import (
    DomainParams,
    Refinement,
    build_channel_domain,
    build_lens_domain,
)
from lensopt.stepping import TimeGrid
from lensopt.targets import (
    GaussianTarget,
    StoredTarget,
    eval_target,
    project_pointwise,
    synthesize_target,
    target_history,
    transfer_history,
)


def field_at_element_centers(domain, patch_index, coeffs):
    """Evaluate a coefficient field and positions at element midpoints."""
    patch = domain.patches[patch_index]
    dmap = domain.dof_map[patch_index]
    mids1 = [0.5 * (a + b) for _, a, b in patch.kv1.spans()]
    mids2 = [0.5 * (a + b) for _, a, b in patch.kv2.spans()]
    vals, pos = [], []
    for c2 in mids2:
        for c1 in mids1:
            loc, n, _ = patch.basis_at(c1, c2)
            vals.append(float(n @ coeffs[dmap[loc]]))
            pos.append(patch.geometry(c1, c2))
    return np.array(vals), np.array(pos)


# -- Gaussian target -------------------------------------------------------


def test_gaussian_pointwise_values():
    g = GaussianTarget()
    assert g.value(np.array([0.0, 0.105])) == 6e7
    one_sigma = 6e7 * np.exp(-0.5)
    assert g.value(np.array([0.02, 0.105])) == pytest.approx(one_sigma, rel=1e-14)
    assert g.value(np.array([0.0, 0.109])) == pytest.approx(one_sigma, rel=1e-14)
    assert g.value(np.array([0.0, 0.101])) == pytest.approx(one_sigma, rel=1e-14)


def test_gaussian_validation():
    with pytest.raises(ValueError):
        GaussianTarget(amplitude=-1.0)
    with pytest.raises(ValueError):
        GaussianTarget(sigma_x=0.0)


def test_projection_reproduces_constants():
    dom = build_lens_domain(
        DomainParams(degree=2, refinement=Refinement(3, 2, 3, 2, 2, 2))
    )
    c = project_pointwise(dom, lambda xy: np.ones(xy.shape[:-1]))
    assert np.allclose(c, 1.0, atol=1e-10)


def test_projection_reproduces_linears():
    dom = build_lens_domain(
        DomainParams(degree=2, refinement=Refinement(3, 2, 3, 2, 2, 2))
    )
    f = lambda xy: 2.0 * xy[..., 0] - 3.0 * xy[..., 1] + 0.5
    c = project_pointwise(dom, f)
    expect = f(dom.global_ctrl())
    assert np.allclose(c, expect, atol=1e-9)


def test_projected_gaussian_matches_at_element_centers():
    # focal-region density: about two elements per sigma_y, five per sigma_x;
    # the projection must track the analytic Gaussian to 2% of its amplitude
    g = GaussianTarget()
    dom = build_lens_domain(
        DomainParams(degree=2, refinement=Refinement(10, 4, 4, 2, 4, 20))
    )
    coeffs = project_pointwise(dom, g.value)
    worst = 0.0
    for p in (5, 6):  # patches hosting the focal region y in [S, L]
        vals, pos = field_at_element_centers(dom, p, coeffs)
        err = np.abs(vals - g.value(pos)) / g.amplitude
        worst = max(worst, float(err.max()))
    assert worst <= 0.02, worst


def test_eval_target_gaussian_static():
    dom = build_lens_domain(
        DomainParams(degree=2, refinement=Refinement(3, 2, 3, 2, 2, 2))
    )
    g = GaussianTarget()
    a = eval_target(g, dom, 0.0)
    b = eval_target(g, dom, 1e-5)
    assert np.array_equal(a, b)
    grid = TimeGrid(1e-5, 5)
    hist = target_history(g, dom, grid)
    assert hist.shape == (5, dom.n_global)
    assert np.array_equal(hist[0], hist[-1])


# -- stored targets --------------------------------------------------------


def test_stored_roundtrip_identical_grid():
    times = np.linspace(0.0, 1e-4, 11)
    rng = np.random.default_rng(3)
    coeffs = rng.normal(size=(11, 7))
    tgt = StoredTarget(times, coeffs)
    out = tgt.history_on(times)
    assert np.array_equal(out, coeffs)
    out[0, 0] = 99.0  # result is a copy, the stored data stays intact
    assert tgt.coeffs[0, 0] != 99.0


def test_stored_linear_interpolation():
    times = np.array([0.0, 1.0, 3.0])
    coeffs = np.array([[0.0, 10.0], [2.0, 8.0], [6.0, 4.0]])  # linear in t
    tgt = StoredTarget(times, coeffs)
    out = tgt.history_on(np.array([0.5, 2.0]))
    assert np.allclose(out, [[1.0, 9.0], [4.0, 6.0]])


def test_stored_out_of_range_rejected():
    tgt = StoredTarget(np.array([0.0, 1.0]), np.zeros((2, 3)))
    with pytest.raises(ValueError):
        tgt.history_on(np.array([-0.5]))
    with pytest.raises(ValueError):
        tgt.history_on(np.array([1.5]))


def test_stored_validation():
    with pytest.raises(ValueError):
        StoredTarget(np.array([0.0, 1.0]), np.zeros((3, 2)))
    with pytest.raises(ValueError):
        StoredTarget(np.array([1.0, 0.0]), np.zeros((2, 2)))


# -- cross-mesh transfer ---------------------------------------------------


def test_transfer_roundtrip_on_nested_channel_meshes():
    coarse = build_channel_domain(0.01, 0.03, 4, 4, degree=2)
    fine = build_channel_domain(0.01, 0.03, 8, 8, degree=2)
    rng = np.random.default_rng(11)
    u_c = rng.normal(size=(3, coarse.n_global))
    u_f = transfer_history(coarse, fine, u_c)  # exact embedding (nested spaces)
    back = transfer_history(fine, coarse, u_f)
    assert np.allclose(back, u_c, atol=1e-9)


def test_transfer_preserves_constants_on_lens():
    params = DomainParams(degree=2, refinement=Refinement(3, 2, 3, 2, 2, 2))
    coarse = build_lens_domain(params)
    fine = build_lens_domain(
        DomainParams(degree=2, refinement=params.refinement.doubled())
    )
    u_f = np.ones((2, fine.n_global))
    u_c = transfer_history(fine, coarse, u_f)
    assert np.allclose(u_c, 1.0, atol=1e-10)


def test_transfer_consistent_with_direct_projection():
    # projecting the Gaussian on the fine mesh and transferring down must be
    # close to projecting directly on the coarse mesh
    g = GaussianTarget(sigma_x=0.02, sigma_y=0.01)
    params = DomainParams(degree=2, refinement=Refinement(4, 2, 4, 2, 3, 6))
    coarse = build_lens_domain(params)
    fine = build_lens_domain(
        DomainParams(degree=2, refinement=params.refinement.doubled())
    )
    direct = project_pointwise(coarse, g.value)
    via_fine = transfer_history(fine, coarse, project_pointwise(fine, g.value)[None])[0]
    scale = np.abs(direct).max()
    assert np.abs(via_fine - direct).max() <= 0.05 * scale


def test_transfer_rejects_mismatched_input():
    coarse = build_channel_domain(0.01, 0.03, 4, 4, degree=2)
    fine = build_channel_domain(0.01, 0.03, 8, 8, degree=2)
    with pytest.raises(ValueError):
        transfer_history(coarse, fine, np.zeros((2, coarse.n_global + 1)))


# -- synthetic data --------------------------------------------------------


def test_synthesize_target_deterministic_and_aligned():
    params = DomainParams(degree=2, refinement=Refinement(3, 2, 3, 2, 2, 2))
    grid = TimeGrid(2e-5, 161)  # fine dt stays below the absorbing-term limit
    t1, dom1 = synthesize_target(params, grid, seed=42)
    t2, _ = synthesize_target(params, grid, seed=42)
    assert np.array_equal(t1.coeffs, t2.coeffs)
    assert np.array_equal(t1.times, grid.times)
    assert t1.coeffs.shape == (grid.n_steps, dom1.n_global)
    t3, _ = synthesize_target(params, grid, seed=43)
    assert not np.array_equal(t1.coeffs, t3.coeffs)


def test_synthesize_target_noise_calibration():
    params = DomainParams(degree=2, refinement=Refinement(3, 2, 3, 2, 2, 2))
    grid = TimeGrid(2e-5, 161)
    clean, _ = synthesize_target(params, grid, noise_level=0.0, seed=1)
    noisy, _ = synthesize_target(params, grid, noise_level=0.02, seed=1)
    peak = np.abs(clean.coeffs).max()
    assert peak > 0.0
    added = noisy.coeffs - clean.coeffs
    assert 0.015 * peak < added.std() < 0.025 * peak
