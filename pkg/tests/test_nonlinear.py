"""Tests for the flattening change of variables and the nonlinear iteration."""

import io
import json
import math
import warnings

import numpy as np
import pytest
from scipy.interpolate import PchipInterpolator
from scipy.optimize import brentq

from fbflow.domain import (
    DataTriple,
    Domain,
    Field,
    NormKind,
    Trace,
    build_grid,
    inner_product_H,
    norm,
)
from fbflow import nonlinear
from fbflow.nonlinear import (
    ChangeOfVariables,
    IterationState,
    change_of_variables,
    initial_guess,
    iterate_step,
    manifold_point,
    nonlinear_solve,
    orthogonal_base,
    pullback,
    pushforward,
)
from fbflow.ortho import _cached_basis, _lincomb_triples, ell_dual

DOM = Domain(0.0, 1.0)
_GRIDS = {}


def _uniform(n):
    if n not in _GRIDS:
        _GRIDS[n] = build_grid(DOM, n, n, None)
    return _GRIDS[n]


def _smooth_triple(grid, which=0):
    X, Y = grid.meshgrid()
    yp = grid.y[grid.iy0:]
    ym = grid.y[: grid.iy0 + 1]
    if which == 0:
        f = np.sin(np.pi * X) * (1 - Y**2) ** 2 * (0.3 + Y)
        d0 = yp**3 * (1 - yp) ** 3 * 0.8
        d1 = np.abs(ym) ** 3 * (1 + ym) ** 3 * -0.5
    else:
        f = np.sin(np.pi * X) ** 2 * X * (1 - Y**2) ** 2 * (Y - 0.2)
        d0 = yp**3 * (1 - yp) ** 3 * 0.3
        d1 = np.abs(ym) ** 3 * (1 + ym) ** 3 * 1.5
    return DataTriple(
        Field(grid, f), Trace(grid, "sigma0", d0), Trace(grid, "sigma1", d1)
    )


def _unit_base_direction(grid, basis, which=0):
    xi = orthogonal_base(_smooth_triple(grid, which), basis=basis)
    return _lincomb_triples([(1.0 / norm(xi, NormKind.Hdata), xi)])


def _l2(grid, values):
    W = np.outer(grid.weights_x(), grid.weights_y())
    return math.sqrt(float((W * values**2).sum()))


# ----------------------------------------------------------------------
# initial guess


def test_initial_guess_zero_traces():
    g = _uniform(33)
    u0 = initial_guess(Trace.zeros(g, "sigma0"), Trace.zeros(g, "sigma1"), DOM)
    assert not np.any(u0.values)


def test_initial_guess_matches_traces_on_inflow():
    g = _uniform(65)
    yp = g.y[g.iy0:]
    ym = g.y[: g.iy0 + 1]
    d0 = Trace(g, "sigma0", yp**2 * (1 - yp))
    d1 = Trace(g, "sigma1", ym**2 * (1 + ym))
    u0 = initial_guess(d0, d1, DOM)
    assert np.allclose(u0.values[0, g.iy0:], d0.values, atol=1e-14)
    assert np.allclose(u0.values[-1, : g.iy0 + 1], d1.values, atol=1e-14)
    # lift decays toward the opposite side of each half strip
    assert np.abs(u0.values[:, g.iy0]).max() <= 1e-14


# ----------------------------------------------------------------------
# change of variables


def test_cov_identity_at_zero_iterate():
    g = _uniform(49)
    cov = change_of_variables(Field.zeros(g), DataTriple.zeros(g))
    z = g.y
    assert np.array_equal(cov.Y.values, np.tile(z, (g.nx, 1)))
    assert np.all(cov.coeffs.alpha.values == 1.0)
    assert not np.any(cov.coeffs.gamma1.values)
    assert not np.any(cov.coeffs.gamma2.values)


def test_cov_grid_mismatch_rejected():
    g = _uniform(33)
    h = _uniform(49)
    with pytest.raises(ValueError, match="different grids"):
        change_of_variables(Field.zeros(g), DataTriple.zeros(h))


def test_cov_root_matches_bisection_oracle():
    # same-interpolant bracketing root finder as an independent route
    g = _uniform(65)
    X, Y = g.meshgrid()
    eps = 0.05
    un = Field(g, eps * Y * (1 - Y**2) * np.ones_like(X))
    cov = change_of_variables(un, DataTriple.zeros(g))
    y = g.y
    worst = 0.0
    for i in (0, g.nx // 2, g.nx - 1):
        itp = PchipInterpolator(y, un.values[i])
        for k in range(0, g.ny, 7):
            z = y[k]
            ref = brentq(lambda s: s + itp(s) - z, y[0], y[-1], xtol=1e-14)
            worst = max(worst, abs(cov.Y.values[i, k] - ref))
    assert worst <= 1e-10


def test_cov_alpha_matches_analytic():
    g = _uniform(65)
    X, Y = g.meshgrid()
    eps = 0.05
    un = Field(g, eps * Y * (1 - Y**2) * np.ones_like(X))
    cov = change_of_variables(un, DataTriple.zeros(g))
    alpha_ref = (1.0 + eps * (1.0 - 3.0 * cov.Y.values**2)) ** 2
    # discrete d_y(u_n) enters the composition, so the match is O(h^2)
    assert np.abs(cov.coeffs.alpha.values - alpha_ref).max() <= 5e-4


def test_cov_gamma_split_consistency():
    g = _uniform(65)
    X, Y = g.meshgrid()
    un = Field(g, 0.05 * (1 - Y**2) * (0.2 + Y) * np.ones_like(X))
    with warnings.catch_warnings():
        # u_n(x0, 0) != 0 shifts the map off the trace interval by design
        warnings.simplefilter("ignore", RuntimeWarning)
        cov = change_of_variables(un, DataTriple.zeros(g))
    z = g.y
    gam1 = cov.coeffs.gamma1.values
    gam2 = cov.coeffs.gamma2.values
    # gamma2 = -d_yy u at the preimage of z=0, here approx +0.05*(0.4+6*0.0099)
    assert np.abs(gam2[:, g.iy0] - 0.01704) .max() <= 2e-3
    # off the degenerate line the split must reassemble gamma exactly
    for k in (g.iy0 - 5, g.iy0 + 5):
        resid = z[k] * gam1[:, k] + gam2[:, k]
        dux = np.zeros(g.nx)
        duyy = 0.05 * (-0.4 - 6.0 * cov.Y.values[:, k])
        # first term of gamma vanishes since u_n is x-independent
        assert np.abs(resid - (z[k] * dux - duyy)).max() <= 2e-3


def test_cov_slope_precondition():
    g = _uniform(49)
    X, Y = g.meshgrid()
    un = Field(g, 1.2 * Y * (1 - Y**2) * np.ones_like(X))
    with pytest.raises(ValueError, match="not invertible"):
        change_of_variables(un, DataTriple.zeros(g))


def test_cov_transports_traces_with_excursion_warning():
    g = _uniform(65)
    X, Y = g.meshgrid()
    # nonzero iterate value on the degenerate corner pushes Y(x0, 0)
    # outside the trace interval by ~0.01
    un = Field(g, 0.01 * (1 - Y**2) * np.ones_like(X))
    yp = g.y[g.iy0:]
    ym = g.y[: g.iy0 + 1]
    tri = DataTriple(
        Field.zeros(g),
        Trace(g, "sigma0", yp * (1 - yp)),
        Trace(g, "sigma1", -ym * (1 + ym)),
    )
    with pytest.warns(RuntimeWarning, match="clamped"):
        cov = change_of_variables(un, tri)
    assert cov.delta0_t.values.shape == ((g.ny + 1) // 2,)


# ----------------------------------------------------------------------
# pullback / pushforward


def test_pullback_identity_cov():
    g = _uniform(49)
    X, Y = g.meshgrid()
    cov = change_of_variables(Field.zeros(g), DataTriple.zeros(g))
    f = Field(g, np.cos(X) * np.sin(2 * Y))
    assert np.abs(pullback(f, cov).values - f.values).max() <= 1e-14


def test_pullback_linear_field_exact():
    g = _uniform(49)
    X, Y = g.meshgrid()
    un = Field(g, 0.05 * Y * (1 - Y**2) * np.ones_like(X))
    cov = change_of_variables(un, DataTriple.zeros(g))
    f = Field(g, Y)
    assert np.abs(pullback(f, cov).values - cov.Y.values).max() <= 1e-14


def test_pullback_interpolation_order():
    # monotone cubic interpolation is third order for smooth fields;
    # fitted slope floor keeps the 10% margin used elsewhere
    errs = []
    for n in (65, 129, 257):
        g = build_grid(DOM, n, n, None)
        X, Y = g.meshgrid()
        un = Field(g, 0.05 * Y * (1 - Y**2) * np.ones_like(X))
        cov = change_of_variables(un, DataTriple.zeros(g))
        f = Field(g, (1 + X) * np.exp(Y) / 3.0)
        exact = (1 + X) * np.exp(cov.Y.values) / 3.0
        errs.append(np.abs(pullback(f, cov).values - exact).max())
    hs = [1.0 / (n - 1) for n in (65, 129, 257)]
    slope = np.polyfit(np.log(hs), np.log(errs), 1)[0]
    assert slope >= 2.9


def test_roundtrip_within_interpolation_tolerance():
    g = _uniform(129)
    X, Y = g.meshgrid()
    un = Field(g, 0.05 * Y * (1 - Y**2) * np.ones_like(X))
    cov = change_of_variables(un, DataTriple.zeros(g))
    f = Field(g, (1 + X) * np.sin(Y) / 5.0)
    back = pushforward(pullback(f, cov), cov)
    assert np.abs(back.values - f.values).max() <= 1e-6


def test_pushforward_clamps_with_warning():
    g = _uniform(49)
    X, Y = g.meshgrid()
    un = Field(g, 0.05 * Y * (1 - Y**2) * np.ones_like(X))
    cov = change_of_variables(un, DataTriple.zeros(g))
    # forge an iterate that pushes targets past the wall
    forged = ChangeOfVariables(
        Y=cov.Y,
        coeffs=cov.coeffs,
        g=cov.g,
        delta0_t=cov.delta0_t,
        delta1_t=cov.delta1_t,
        u_n=Field(g, 0.2 * (1 - Y**2) + 0.05),
    )
    F = Field(g, np.sin(Y))
    with pytest.warns(RuntimeWarning, match="pushforward clamped"):
        pushforward(F, forged)


# ----------------------------------------------------------------------
# iteration


def test_iterate_step_zero_fixed_point():
    g = _uniform(97)
    basis = _cached_basis(g)
    state = IterationState(n=0, u=Field.zeros(g))
    out = iterate_step(state, DataTriple.zeros(g), basis)
    assert not np.any(out.u.values)
    assert out.nu0 == 0.0 and out.nu1 == 0.0
    assert out.diff_history[-1] == 0.0


def test_corrector_matrix_identity_at_zero_iterate():
    from fbflow.domain import diff
    from fbflow.nonlinear import _pullback_triple

    g = _uniform(97)
    basis = _cached_basis(g)
    cov = change_of_variables(Field.zeros(g), DataTriple.zeros(g))
    Yx = diff(cov.Y, "x", 1).values
    M = np.empty((2, 2))
    for k, xi in enumerate((basis.xi0, basis.xi1)):
        pb = _pullback_triple(xi, cov, Yx)
        for i in (0, 1):
            M[i, k] = ell_dual(i, pb, cov.coeffs)
    assert np.abs(M - np.eye(2)).max() <= 1e-6


def test_iterate_step_post_orthogonality():
    g = _uniform(97)
    basis = _cached_basis(g)
    xi = _unit_base_direction(g, basis)
    tri = _lincomb_triples([(1e-2, xi)])
    state = iterate_step(IterationState(n=0, u=Field.zeros(g)), tri, basis)
    assert max(abs(v) for v in state.last_record["ell_post"]) <= 1e-8


def test_iterate_step_ill_conditioned_system(monkeypatch):
    g = _uniform(97)
    basis = _cached_basis(g)
    xi = _unit_base_direction(g, basis)
    tri = _lincomb_triples([(1e-2, xi)])
    monkeypatch.setattr(nonlinear, "ell_dual", lambda j, t, c: 1.0)
    with pytest.raises(ValueError, match="ill-conditioned"):
        iterate_step(IterationState(n=0, u=Field.zeros(g)), tri, basis)


def test_solve_zero_triple():
    g = _uniform(97)
    basis = _cached_basis(g)
    u, nu0, nu1, state = nonlinear_solve(
        DataTriple.zeros(g), basis=basis, initial="zero"
    )
    assert not np.any(u.values)
    assert nu0 == 0.0 and nu1 == 0.0
    assert state.status == "converged"


def test_solve_contraction_small_data():
    g = _uniform(97)
    basis = _cached_basis(g)
    xi = _unit_base_direction(g, basis)
    tri = _lincomb_triples([(1e-2, xi)])
    buf = io.StringIO()
    u, nu0, nu1, state = nonlinear_solve(
        tri, tol=1e-9, maxit=12, basis=basis, log=buf
    )
    assert state.status == "converged"
    assert state.n <= 12
    dh = state.diff_history
    assert all(dh[i + 1] / dh[i] <= 0.5 for i in range(1, len(dh) - 1))
    hy = float(np.max(np.diff(g.y)))
    assert state.residual_l2 <= 1e-6 + 2e-4 * hy
    records = [json.loads(line) for line in buf.getvalue().splitlines()]
    assert [r["n"] for r in records] == list(range(1, state.n + 1))
    assert set(records[0]) == {"n", "diff_qhalf", "nu0", "nu1", "Mn_cond", "ell_post"}


def test_solve_smallness_warning():
    g = _uniform(97)
    basis = _cached_basis(g)
    raw = _smooth_triple(g)
    tri = _lincomb_triples([(0.2 / norm(raw, NormKind.Hdata), raw)])
    with pytest.warns(RuntimeWarning, match="smallness threshold"):
        nonlinear_solve(tri, maxit=12, basis=basis)


def test_solve_unknown_initialization():
    g = _uniform(97)
    basis = _cached_basis(g)
    with pytest.raises(ValueError, match="unknown initialization"):
        nonlinear_solve(DataTriple.zeros(g), basis=basis, initial="guess")


def test_solve_non_contracting_raises(monkeypatch):
    g = _uniform(97)
    basis = _cached_basis(g)
    xi = _unit_base_direction(g, basis)
    tri = _lincomb_triples([(1e-2, xi)])

    def stub(state, triple, basis):
        diffs = state.diff_history + [1.0 + 0.1 * state.n]
        return IterationState(
            n=state.n + 1,
            u=state.u,
            nu0=0.0,
            nu1=0.0,
            diff_history=diffs,
            nu_history=state.nu_history + [(0.0, 0.0)],
            status="running",
            last_record={"n": state.n + 1, "diff_qhalf": diffs[-1],
                         "nu0": 0.0, "nu1": 0.0, "Mn_cond": 1.0,
                         "ell_post": [0.0, 0.0]},
        )

    monkeypatch.setattr(nonlinear, "iterate_step", stub)
    with pytest.raises(ValueError, match="not contracting"):
        nonlinear_solve(tri, tol=1e-9, maxit=12, basis=basis)


def test_solve_manufactured_nonlinear_case():
    g = _uniform(97)
    basis = _cached_basis(g)
    X, Y = g.meshgrid()
    eps = 1e-2
    ustar = eps * Y**3 * (1 - Y**2) ** 3 * (1 + X / 4)
    dxu = eps * Y**3 * (1 - Y**2) ** 3 / 4
    dyyu = eps * (1 + X / 4) * (6 * Y - 60 * Y**3 + 126 * Y**5 - 72 * Y**7)
    yp = g.y[g.iy0:]
    ym = g.y[: g.iy0 + 1]
    tri = DataTriple(
        Field(g, (Y + ustar) * dxu - dyyu),
        Trace(g, "sigma0", eps * yp**3 * (1 - yp**2) ** 3),
        Trace(g, "sigma1", eps * ym**3 * (1 - ym**2) ** 3 * 1.25),
    )
    with warnings.catch_warnings():
        warnings.simplefilter("ignore", RuntimeWarning)
        u, nu0, nu1, state = nonlinear_solve(tri, tol=1e-9, maxit=12, basis=basis)
    assert state.status == "converged"
    # regular manufactured data: correctors stay at discretization scale
    assert abs(nu0) <= 1e-5 and abs(nu1) <= 1e-5
    assert _l2(g, u.values - ustar) <= 2e-6
    # boundary fidelity: u restricted to the inflow sides equals the traces
    assert np.abs(u.values[0, g.iy0:] - tri.delta0.values).max() <= 1e-7
    assert np.abs(u.values[-1, : g.iy0 + 1] - tri.delta1.values).max() <= 5e-7


def test_solve_uniqueness_across_initializations():
    g = _uniform(97)
    basis = _cached_basis(g)
    xi = _unit_base_direction(g, basis)
    tri = _lincomb_triples([(1e-2, xi)])
    u_a, *_ = nonlinear_solve(tri, tol=1e-9, maxit=12, basis=basis)
    u_b, *_ = nonlinear_solve(tri, tol=1e-9, maxit=12, basis=basis, initial="zero")
    assert _l2(g, u_a.values - u_b.values) <= 1e-8


# ----------------------------------------------------------------------
# manifold probes


def test_orthogonal_base_kills_functionals():
    g = _uniform(97)
    basis = _cached_basis(g)
    out = orthogonal_base(_smooth_triple(g), basis=basis)
    assert max(abs(ell_dual(j, out, basis.coeffs)) for j in (0, 1)) <= 1e-12
    s = norm(out, NormKind.Hdata)
    for xi in (basis.xi0, basis.xi1):
        rel = abs(inner_product_H(xi, out)) / (norm(xi, NormKind.Hdata) * s)
        assert rel <= 1e-6


def test_orthogonal_base_keeps_direction_diversity():
    g = _uniform(97)
    basis = _cached_basis(g)
    a = _unit_base_direction(g, basis, 0)
    c = _unit_base_direction(g, basis, 1)
    assert abs(inner_product_H(a, c)) <= 0.9


def test_manifold_point_zero():
    g = _uniform(97)
    basis = _cached_basis(g)
    mp = manifold_point(DataTriple.zeros(g), basis=basis)
    assert not np.any(mp.xi.f.values)
    assert mp.nu0 == 0.0 and mp.nu1 == 0.0


def test_manifold_point_assembles_displayed_decomposition():
    g = _uniform(97)
    basis = _cached_basis(g)
    xi = _unit_base_direction(g, basis)
    xi = _lincomb_triples([(1e-2, xi)])
    mp = manifold_point(xi, basis=basis)
    ref = _lincomb_triples(
        [(1.0, mp.xi_perp), (mp.nu0, basis.xi0), (mp.nu1, basis.xi1)]
    )
    assert np.abs(mp.xi.f.values - ref.f.values).max() <= 1e-15
    assert mp.gram.shape == (2, 2)


def test_manifold_point_projects_with_warning():
    g = _uniform(97)
    basis = _cached_basis(g)
    xi = _unit_base_direction(g, basis)
    bad = _lincomb_triples([(1e-2, xi), (1e-9, basis.xi0)])
    with pytest.warns(RuntimeWarning, match="corrector components"):
        mp = manifold_point(bad, basis=basis)
    G, b = nonlinear._gram_and_inners(basis, mp.xi_perp)
    rel = np.abs(b) / (np.sqrt(np.diag(G)) * norm(mp.xi_perp, NormKind.Hdata))
    assert np.max(rel) <= 1e-6


def test_manifold_tangency_quadratic():
    g = _uniform(97)
    basis = _cached_basis(g)
    xi = _unit_base_direction(g, basis)
    eps = [1e-2, 5e-3, 2.5e-3]
    nus = []
    for e in eps:
        mp = manifold_point(_lincomb_triples([(e, xi)]), basis=basis)
        nus.append((mp.nu0, mp.nu1))
    for k in (0, 1):
        vals = [abs(p[k]) for p in nus]
        slope = np.polyfit(np.log(eps), np.log(vals), 1)[0]
        assert slope >= 1.8


def test_manifold_nu_lipschitz_pairs():
    g = _uniform(97)
    basis = _cached_basis(g)
    a = _unit_base_direction(g, basis, 0)
    c = _unit_base_direction(g, basis, 1)
    x1 = _lincomb_triples([(1e-2, a)])
    x2 = _lincomb_triples([(9e-3, a), (1e-3, c)])
    mp1 = manifold_point(x1, basis=basis)
    mp2 = manifold_point(x2, basis=basis)
    dnu = math.hypot(mp1.nu0 - mp2.nu0, mp1.nu1 - mp2.nu1)
    gap = norm(_lincomb_triples([(1.0, x1), (-1.0, x2)]), NormKind.Hdata)
    # nu is quadratically small, so the local Lipschitz constant is tiny
    assert dnu <= 1e-6 * gap
