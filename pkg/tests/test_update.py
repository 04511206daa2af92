"""Tests for lens boundary updates, Coons propagation, and feasibility."""

import numpy as np
import pytest

from lensopt.domain import DomainParams, Refinement, build_lens_domain, design_dof_set
from lensopt.nurbs import TensorPatch, line_curve
from lensopt.update import (
    LENS_COLUMN,
    FeasibilityReport,
    ThicknessConstraint,
    check_feasible,
    coons_update,
    reference_thickness,
    shape_error_l2,
    update_boundary,
)


def lens_domain(degree=2, refinement=None):
    if refinement is None:
        refinement = Refinement(4, 2, 4, 2, 3, 3)
    return build_lens_domain(DomainParams(degree=degree, refinement=refinement))


def domains_equal(a, b):
    return all(
        np.array_equal(pa.ctrl, pb.ctrl) and np.array_equal(pa.weights, pb.weights)
        for pa, pb in zip(a.patches, b.patches)
    )


def smooth_bump(x, height, width=0.012, center=0.0):
    """Smooth downward-push profile vanishing toward the lens tip."""
    return height * np.exp(-(((x - center) / width) ** 2))


# -- reference thickness profile ----------------------------------------------


def test_thickness_axis_value_exact():
    assert float(reference_thickness(0.0)) == 0.01


def test_thickness_tip_value():
    d = float(reference_thickness(0.04))
    assert d == pytest.approx(1.0918331986596586e-05, rel=1e-12)
    assert -1e-4 <= d <= 1e-4


def test_thickness_monotone_decreasing():
    x = np.linspace(0.0, 0.04, 200)
    d = reference_thickness(x)
    assert d.shape == x.shape
    assert np.all(np.diff(d) < 0.0)
    assert np.all(d > 0.0)


def test_thickness_outside_domain_raises():
    with pytest.raises(ValueError):
        reference_thickness(-0.001)
    with pytest.raises(ValueError):
        reference_thickness(0.05)


# -- Coons interior propagation ------------------------------------------------


def test_coons_update_unit_square_midrow():
    # unit square, degree 1, 2x2 elements: lifting the top edge by 0.1 must
    # move the middle control row up by exactly half of that
    south = line_curve((0, 0), (1, 0), 1, 2)
    north = line_curve((0, 1), (1, 1), 1, 2)
    west = line_curve((0, 0), (0, 1), 1, 2)
    east = line_curve((1, 0), (1, 1), 1, 2)
    lifted = line_curve((0, 1.1), (1, 1.1), 1, 2)
    east2 = line_curve((1, 0), (1, 1.1), 1, 2)
    west2 = line_curve((0, 0), (0, 1.1), 1, 2)
    base = TensorPatch.from_edges(south, north, west, east)
    patch = coons_update(base, north=lifted, west=west2, east=east2)
    assert np.allclose(patch.ctrl[:, 1, 1], 0.55)
    assert np.allclose(patch.ctrl[:, 2, 1], 1.1)
    assert np.allclose(patch.ctrl[:, 0, 1], 0.0)


def test_coons_update_idempotent_on_lens_patches():
    dom = lens_domain()
    for p in LENS_COLUMN:
        patch = dom.patches[p]
        again = coons_update(patch)
        assert np.array_equal(again.ctrl, patch.ctrl)
        assert np.array_equal(again.weights, patch.weights)


# -- boundary update -----------------------------------------------------------


def test_update_zero_step_is_identity():
    dom = lens_domain()
    design = design_dof_set(dom)
    g = np.ones(design.ids.shape)
    new = update_boundary(dom, design, g, alpha=0.0)
    assert new is not dom
    assert domains_equal(new, dom)


def test_update_zero_gradient_is_identity():
    dom = lens_domain()
    design = design_dof_set(dom)
    new = update_boundary(dom, design, np.zeros(design.ids.shape), alpha=0.3)
    assert domains_equal(new, dom)


def test_update_wrong_shape_raises():
    dom = lens_domain()
    design = design_dof_set(dom)
    with pytest.raises(ValueError):
        update_boundary(dom, design, np.zeros(3), alpha=1.0)


def test_update_moves_only_upper_row():
    dom = lens_domain()
    design = design_dof_set(dom, movable="upper")
    x = dom.global_ctrl()[design.ids, 0]
    g = smooth_bump(x, 1.0)
    new = update_boundary(dom, design, g, alpha=2e-3)
    c0, c1 = dom.global_ctrl(), new.global_ctrl()
    lo, up = design.rows["lower"], design.rows["upper"]
    assert np.array_equal(c0[lo], c1[lo])  # lower boundary untouched
    assert np.array_equal(c0[:, 0], c1[:, 0])  # x coordinates never move
    moved = np.asarray(design.movable)
    dy = c1[design.ids, 1] - c0[design.ids, 1]
    assert np.allclose(dy[moved], -2e-3 * g[moved])
    assert np.all(dy[~moved] == 0.0)
    # the shared tip is pinned
    tip = up[-1]
    assert np.array_equal(c0[tip], c1[tip])


def test_update_moves_only_lower_row():
    dom = lens_domain()
    design = design_dof_set(dom, movable="lower")
    x = dom.global_ctrl()[design.ids, 0]
    g = smooth_bump(x, 1.0)
    new = update_boundary(dom, design, g, alpha=-2e-3)  # negative step: push down->up
    c0, c1 = dom.global_ctrl(), new.global_ctrl()
    up = design.rows["upper"]
    assert np.array_equal(c0[up], c1[up])
    tip = design.rows["lower"][-1]
    assert np.array_equal(c0[tip], c1[tip])


def test_update_keeps_domain_conforming():
    dom = lens_domain()
    design = design_dof_set(dom)
    x = dom.global_ctrl()[design.ids, 0]
    g = smooth_bump(x, 1.0)
    new = update_boundary(dom, design, g, alpha=3e-3)
    new.check_conforming()
    assert new.min_jacobian() > 0.0
    report = check_feasible(new, design)
    assert report.ok, report.violations


def test_update_restraightens_axis_edges():
    dom = lens_domain()
    design = design_dof_set(dom)
    x = dom.global_ctrl()[design.ids, 0]
    new = update_boundary(dom, design, smooth_bump(x, 1.0), alpha=4e-3)
    for p in (2, 3):  # west edges adjacent to the moved upper boundary
        edge = new.patches[p].edge_curve("west")
        t = edge.kv.greville()[:, None]
        expect = (1.0 - t) * edge.ctrl[0] + t * edge.ctrl[-1]
        assert np.array_equal(edge.ctrl, expect)
        assert np.all(edge.weights == 1.0)
        assert np.all(edge.ctrl[:, 0] == 0.0)  # still on the symmetry axis


def test_update_composes_with_inverse():
    dom = lens_domain()
    design = design_dof_set(dom)
    x = dom.global_ctrl()[design.ids, 0]
    g = smooth_bump(x, 1.0)
    there = update_boundary(dom, design, g, alpha=2e-3)
    back = update_boundary(there, design, g, alpha=-2e-3)
    for pa, pb in zip(back.patches, dom.patches):
        assert np.allclose(pa.ctrl, pb.ctrl, atol=1e-15)
        assert np.array_equal(pa.weights, pb.weights)


# -- feasibility ---------------------------------------------------------------


def test_feasible_reference_domain():
    dom = lens_domain()
    report = check_feasible(dom)
    assert isinstance(report, FeasibilityReport)
    assert report.ok and bool(report)
    assert report.violations == []
    # the tip pair has a structurally zero gap against a ~1.1e-5 requirement:
    # the margin is slightly negative but inside the tolerance band
    assert -1e-4 < report.thickness_margin < 0.0
    assert report.min_jacobian > 0.0


def test_feasibility_thickness_violation():
    dom = lens_domain()
    design = design_dof_set(dom)
    x = dom.global_ctrl()[design.ids, 0]
    # squeeze the gap near the axis to ~5 mm, below the 10 mm requirement,
    # while keeping the boundaries apart
    new = update_boundary(dom, design, smooth_bump(x, 1.0), alpha=0.015)
    report = check_feasible(new, design)
    assert not report.ok
    assert report.thickness_margin < -1e-4
    assert any("thickness" in v for v in report.violations)
    assert report.min_gap > 0.0


def test_feasibility_self_intersection():
    dom = lens_domain()
    design = design_dof_set(dom)
    x = dom.global_ctrl()[design.ids, 0]
    # push the upper boundary below the lower one near the axis
    new = update_boundary(dom, design, smooth_bump(x, 1.0), alpha=0.025)
    report = check_feasible(new, design)
    assert not report.ok
    assert report.min_gap < 0.0
    assert any("self-intersection" in v for v in report.violations)


def test_feasibility_containment():
    dom = lens_domain()
    design = design_dof_set(dom)
    x = dom.global_ctrl()[design.ids, 0]
    # lift the upper boundary past the sensor-side interface at y = S
    new = update_boundary(dom, design, smooth_bump(x, 1.0), alpha=-0.035)
    report = check_feasible(new, design)
    assert not report.ok
    assert any("sensor-side" in v for v in report.violations)


def test_feasibility_constraint_disabled():
    dom = lens_domain()
    design = design_dof_set(dom)
    x = dom.global_ctrl()[design.ids, 0]
    new = update_boundary(dom, design, smooth_bump(x, 1.0), alpha=0.015)
    relaxed = ThicknessConstraint(enabled=False)
    report = check_feasible(new, design, relaxed)
    assert report.ok, report.violations
    assert report.thickness_margin == np.inf


# -- shape error ---------------------------------------------------------------


def test_shape_error_constant_offset():
    y = np.full(25, 3e-3)
    goal = np.full(25, 4e-3)
    assert shape_error_l2(y, goal) == pytest.approx(1e-3, rel=1e-12)


def test_shape_error_zero_and_symmetry():
    rng = np.random.default_rng(7)
    y = rng.normal(size=25)
    assert shape_error_l2(y, y) == 0.0
    goal = rng.normal(size=25)
    assert shape_error_l2(y, goal) == shape_error_l2(goal, y)


def test_shape_error_shape_mismatch():
    with pytest.raises(ValueError):
        shape_error_l2(np.zeros(5), np.zeros(6))
