"""Assembly and solution of the linear mixed-type problem.

The linear model is

    z u_x + gamma(x,z) u_z - alpha(x,z) u_zz = g        on (x0,x1) x (-1,1)

with Dirichlet data on the inflow edges ({x0} x (0,1), {x1} x (-1,0)) and
homogeneous Dirichlet walls at z = +-1.  The sign of z makes the problem
forward parabolic in the upper half and backward parabolic in the lower
half, so no marching direction exists: the discrete system is assembled
globally and factored once.

Discretization: first-order upwind differences in x (backward where the
transport speed z is positive, forward where it is negative, no x-term on
the degenerate line z = 0), upwind differences for the gamma convection,
and the centered three-point second difference in z on nonuniform nodes.
The z = 0 row carries the reduced equation gamma u_z - alpha u_zz = g.
With these choices the matrix is an M-matrix for smooth coefficients.

The adjoint solve constructs the dual profiles: distributional solutions of
the formal adjoint equation on each half-domain with prescribed jumps of
the value and the normal derivative across z = 0.  The jump is lifted by an
explicit local function supported in |z| <= 1/4, so the unknown remainder
is C^1 across the interface and one matrix pattern serves every solve.  A
doubled-unknown variant (interface constraints instead of lifting) is kept
as an internal cross-check.
"""

from __future__ import annotations

import json
import warnings
from dataclasses import dataclass, field

import numpy as np
import scipy.sparse as sp
import scipy.sparse.linalg as spla

from .domain import (
    DataTriple,
    Field,
    Grid,
    StopWatch,
    _check_same_grid,
    diff,
    fd_weights,
    plateau_bump,
)

__all__ = [
    "CoefficientSet",
    "LinearProblem",
    "SparseSystem",
    "SolveStats",
    "DualProfile",
    "assemble",
    "solve_linear",
    "solve_adjoint_with_jumps",
    "residual",
    "weak_residual",
]

# Smallness thresholds for the coefficient monitor.  The well-posedness
# theory needs alpha close to 1 and gamma small in weighted norms; exceeding
# these is reported as a warning, never an error.
_SMALL_ALPHA_DEV = 0.5
_SMALL_GAMMA1 = 0.5
_SMALL_GAMMA2 = 0.25

# Lifting support: identically linear for |z| <= 1/12, zero for |z| >= 1/8.
_LIFT_PLATEAU = 1.0 / 12.0
_LIFT_OUTER = 1.0 / 8.0


@dataclass(eq=False)
class CoefficientSet:
    """Variable coefficients (alpha, gamma = z*gamma1 + gamma2).

    alpha is the diffusion coefficient (must be positive everywhere);
    gamma is the vertical convection, stored through its split parts.
    provenance records whether this is the exact shear linearization or a
    set extracted from a nonlinear iterate.
    """

    alpha: Field
    gamma1: Field
    gamma2: Field
    provenance: str = "shear"
    _cache: dict = field(default_factory=dict, repr=False)

    def __post_init__(self):
        _check_same_grid(self.alpha.grid, self.gamma1.grid)
        _check_same_grid(self.alpha.grid, self.gamma2.grid)
        if np.any(self.alpha.values <= 0.0):
            raise ValueError("degenerate diffusion: alpha <= 0 somewhere")
        report = self.smallness_report()
        if not report["ok"]:
            warnings.warn(
                "coefficient smallness violated: "
                + ", ".join(f"{k}={v:.3g}" for k, v in report.items() if k != "ok"),
                RuntimeWarning,
                stacklevel=2,
            )

    @property
    def grid(self) -> Grid:
        return self.alpha.grid

    @classmethod
    def shear(cls, grid) -> "CoefficientSet":
        """The exact linearization around u = y: alpha = 1, gamma = 0."""
        one = Field(grid, np.ones(grid.shape))
        zero = Field.zeros(grid)
        return cls(one, zero, Field(grid, zero.values.copy()), provenance="shear")

    def gamma(self) -> Field:
        g = self.grid
        return Field(g, g.y[None, :] * self.gamma1.values + self.gamma2.values)

    def smallness_report(self) -> dict:
        dev = float(np.max(np.abs(self.alpha.values - 1.0)))
        g1 = float(np.max(np.abs(self.gamma1.values)))
        g2 = float(np.max(np.abs(self.gamma2.values)))
        return {
            "alpha_dev_inf": dev,
            "gamma1_inf": g1,
            "gamma2_inf": g2,
            "ok": bool(
                dev <= _SMALL_ALPHA_DEV and g1 <= _SMALL_GAMMA1 and g2 <= _SMALL_GAMMA2
            ),
        }


@dataclass(eq=False)
class LinearProblem:
    """Coefficients plus data (g, traces) for one linear solve."""

    coeffs: CoefficientSet
    data: DataTriple

    def __post_init__(self):
        _check_same_grid(self.coeffs.grid, self.data.grid)

    @property
    def grid(self) -> Grid:
        return self.coeffs.grid


@dataclass(eq=False)
class SparseSystem:
    """Assembled global system A u = b with its unknown ordering."""

    matrix: sp.csr_matrix
    rhs: np.ndarray
    ordering: str
    dirichlet: np.ndarray  # boolean mask over unknowns

    @property
    def n(self) -> int:
        return self.matrix.shape[0]


@dataclass
class SolveStats:
    residual_inf: float
    zdxu_l2: float
    dzz_l2: float
    n_unknowns: int
    factor_time_ms: float

    def to_json(self) -> str:
        return json.dumps(
            {
                "residual_inf": self.residual_inf,
                "z0_components": {"zdxu_l2": self.zdxu_l2, "dzz_l2": self.dzz_l2},
                "n_unknowns": self.n_unknowns,
                "factor_time_ms": self.factor_time_ms,
            }
        )


def _dirichlet_mask(grid, sign_x):
    """Dirichlet nodes: walls z=+-1 everywhere; inflow column per half.

    sign_x=+1 is the forward problem (inflow x0 for z>0, x1 for z<0);
    sign_x=-1 the adjoint (reversed).  The degenerate line z=0 is never
    Dirichlet: it carries the reduced equation at every x.
    """
    nx, ny = grid.shape
    mask = np.zeros((nx, ny), dtype=bool)
    mask[:, 0] = True
    mask[:, -1] = True
    up = grid.y > 0
    dn = grid.y < 0
    if sign_x > 0:
        mask[0, up] = True
        mask[-1, dn] = True
    else:
        mask[-1, up] = True
        mask[0, dn] = True
    return mask


def _assemble_operator(grid, sign_x, conv, diffusion, react):
    """Rows of sign_x*z*d_x + conv*d_z - diffusion*d_zz + react.

    conv, diffusion, react: nodal arrays (nx, ny).  Dirichlet rows are
    identity.  Returns (csr matrix, dirichlet mask).
    """
    x, y = grid.x, grid.y
    nx, ny = grid.shape
    mask = _dirichlet_mask(grid, sign_x)

    idx = np.arange(nx * ny).reshape(nx, ny)
    rows, cols, vals = [], [], []

    def add(r, c, v):
        rows.append(r)
        cols.append(c)
        vals.append(v)

    interior = ~mask
    ii, kk = np.nonzero(interior)
    diag = np.zeros(len(ii))

    # x transport: upwind against the local speed sign_x*z
    hx = np.diff(x)
    speed = sign_x * y[kk]
    pos = speed > 0
    neg = speed < 0
    n_int = idx[ii, kk]
    if np.any(pos):
        hxm = hx[ii[pos] - 1]
        w = speed[pos] / hxm
        diag[pos] += w
        add(n_int[pos], idx[ii[pos] - 1, kk[pos]], -w)
    if np.any(neg):
        hxp = hx[ii[neg]]
        w = -speed[neg] / hxp
        diag[neg] += w
        add(n_int[neg], idx[ii[neg] + 1, kk[neg]], -w)

    # z convection: upwind against conv sign
    hy = np.diff(y)
    c = conv[ii, kk]
    cpos = c > 0
    cneg = c < 0
    if np.any(cpos):
        w = c[cpos] / hy[kk[cpos] - 1]
        diag[cpos] += w
        add(n_int[cpos], idx[ii[cpos], kk[cpos] - 1], -w)
    if np.any(cneg):
        w = -c[cneg] / hy[kk[cneg]]
        diag[cneg] += w
        add(n_int[cneg], idx[ii[cneg], kk[cneg] + 1], -w)

    # centered second difference in z (nonuniform three-point)
    hm = hy[kk - 1]
    hp = hy[kk]
    a = diffusion[ii, kk]
    diag += 2.0 * a / (hm * hp)
    add(n_int, idx[ii, kk - 1], -2.0 * a / (hm * (hm + hp)))
    add(n_int, idx[ii, kk + 1], -2.0 * a / (hp * (hm + hp)))

    diag += react[ii, kk]
    add(n_int, n_int, diag)

    nb = idx[mask]
    add(nb, nb, np.ones(len(nb)))

    rows = np.concatenate([np.atleast_1d(r) for r in rows])
    cols = np.concatenate([np.atleast_1d(c) for c in cols])
    vals = np.concatenate([np.atleast_1d(v) for v in vals])
    A = sp.csr_matrix((vals, (rows, cols)), shape=(nx * ny, nx * ny))
    return A, mask


def assemble(problem: LinearProblem) -> SparseSystem:
    """Assemble the forward mixed-type system for a LinearProblem."""
    grid = problem.grid
    co = problem.coeffs
    A, mask = _assemble_operator(
        grid, +1, co.gamma().values, co.alpha.values, np.zeros(grid.shape)
    )
    b = np.where(mask, 0.0, problem.data.f.values).astype(float)
    iy0 = grid.iy0
    # inflow traces (z=0 and wall nodes excluded: reduced row / homogeneous)
    b_grid = b
    up = np.arange(iy0 + 1, grid.ny - 1)
    dn = np.arange(1, iy0)
    b_grid[0, up] = problem.data.delta0.values[up - iy0]
    b_grid[-1, dn] = problem.data.delta1.values[dn]
    b_grid[:, 0] = 0.0
    b_grid[:, -1] = 0.0
    return SparseSystem(A, b_grid.ravel(), "x-major (i*ny + k)", mask.ravel())


def _factor(matrix, cache, key):
    if key not in cache:
        cache[key] = spla.splu(matrix.tocsc())
    return cache[key]


def solve_linear(problem: LinearProblem):
    """Solve the forward problem; returns (Field, SolveStats)."""
    grid = problem.grid
    system = assemble(problem)
    with StopWatch() as sw:
        lu = _factor(system.matrix, problem.coeffs._cache, ("lu", "forward"))
    sol = lu.solve(system.rhs)
    if not np.all(np.isfinite(sol)):
        raise ValueError(
            "factorization failure: singular mixed-type system "
            f"(n={system.n}, nnz={system.matrix.nnz})"
        )
    u = Field(grid, sol.reshape(grid.shape))
    res = float(np.max(np.abs(system.matrix @ sol - system.rhs)))
    zdx = Field(grid, grid.y[None, :] * diff(u, "x", 1).values)
    dzz = diff(u, "y", 2)
    wx, wy = grid.weights_x(), grid.weights_y()

    def l2(v):
        return float(np.sqrt(wx @ (v * v) @ wy))

    stats = SolveStats(
        residual_inf=res,
        zdxu_l2=l2(zdx.values),
        dzz_l2=l2(dzz.values),
        n_unknowns=system.n,
        factor_time_ms=sw.ms,
    )
    return u, stats


def residual(u: Field, problem: LinearProblem) -> Field:
    """Pointwise residual z u_x + gamma u_z - alpha u_zz - g.

    Uses the same upwind stencils as the assembled system, so the residual
    of a discrete solution is zero to solver precision; Dirichlet rows
    report u - boundary value.
    """
    _check_same_grid(u.grid, problem.grid)
    system = assemble(problem)
    vec = system.matrix @ u.values.ravel() - system.rhs
    return Field(u.grid, vec.reshape(u.grid.shape))


def weak_residual(u: Field, problem: LinearProblem, v: Field) -> float:
    """Weak-form defect of u against one admissible test function.

    Computes -int y u v_x + int u_y v_y - int f v - int_{sigma0} y delta0 v
    + int_{sigma1} y delta1 v with trapezoid quadrature (shear coefficients).
    v must vanish on the boundary outside the two inflow edges.
    """
    grid = u.grid
    _check_same_grid(grid, v.grid)
    _check_same_grid(grid, problem.grid)
    scale = 1.0 + float(np.max(np.abs(v.values)))
    iy0 = grid.iy0
    forbidden = np.max(np.abs(v.values[:, 0])), np.max(np.abs(v.values[:, -1]))
    out0 = np.max(np.abs(v.values[0, : iy0 + 1]))  # {x0} x [-1, 0]
    out1 = np.max(np.abs(v.values[-1, iy0:]))  # {x1} x [0, 1]
    if max(*forbidden, out0, out1) > 1e-12 * scale:
        raise ValueError("test function must vanish outside the inflow edges")
    wx, wy = grid.weights_x(), grid.weights_y()

    def dot(a, b):
        return float(wx @ (a * b) @ wy)

    Y = grid.y[None, :]
    val = -dot(Y * u.values, diff(v, "x", 1).values)
    val += dot(diff(u, "y", 1).values, diff(v, "y", 1).values)
    val -= dot(problem.data.f.values, v.values)
    y_up = grid.y[iy0:]
    w_up = np.zeros_like(y_up)
    hy = np.diff(grid.y)
    w_up[:-1] += 0.5 * hy[iy0:]
    w_up[1:] += 0.5 * hy[iy0:]
    val -= float(np.sum(w_up * y_up * problem.data.delta0.values * v.values[0, iy0:]))
    y_dn = grid.y[: iy0 + 1]
    w_dn = np.zeros_like(y_dn)
    w_dn[:-1] += 0.5 * hy[:iy0]
    w_dn[1:] += 0.5 * hy[:iy0]
    val += float(np.sum(w_dn * y_dn * problem.data.delta1.values * v.values[-1, : iy0 + 1]))
    return val


# ----------------------------------------------------------------------
# dual profiles


@dataclass(eq=False)
class DualProfile:
    """Adjoint state with prescribed jumps across z = 0.

    values_plus is valid on z >= 0 (rows iy0..ny-1), values_minus on
    z <= 0 (rows 0..iy0); both are stored on the full grid for convenience,
    and share the z = 0 line as their doubled trace.
    """

    grid: Grid
    j: int
    values_plus: np.ndarray
    values_minus: np.ndarray
    target_value_jump: np.ndarray
    target_deriv_jump: np.ndarray

    def value_jump(self) -> np.ndarray:
        iy0 = self.grid.iy0
        return self.values_plus[:, iy0] - self.values_minus[:, iy0]

    def deriv_jump(self) -> np.ndarray:
        """One-sided d/dz from above minus from below at z = 0 (4-point)."""
        iy0 = self.grid.iy0
        y = self.grid.y
        ku = np.arange(iy0, iy0 + 4)
        kd = np.arange(iy0 - 3, iy0 + 1)
        wu = fd_weights(y[ku], 0.0, 1)
        wd = fd_weights(y[kd], 0.0, 1)
        return self.values_plus[:, ku] @ wu - self.values_minus[:, kd] @ wd

    def jump_errors(self, skip_columns: int = 2):
        """Worst deviation from the prescribed jumps, excluding the extreme
        x-columns where the corner singularity of the adjoint sits."""
        sl = slice(skip_columns, self.grid.nx - skip_columns)
        ev = np.max(np.abs(self.value_jump() - self.target_value_jump)[sl])
        ed = np.max(np.abs(self.deriv_jump() - self.target_deriv_jump)[sl])
        return float(ev), float(ed)


def _adjoint_pieces(coeffs):
    """Convection / diffusion / reaction fields of the formal adjoint.

    L* phi = -z phi_x - (gamma + 2 alpha_z) phi_z - alpha phi_zz
             - (gamma_z + alpha_zz) phi.
    """
    cache = coeffs._cache
    if "adjoint_pieces" not in cache:
        gam = coeffs.gamma()
        a_z = diff(coeffs.alpha, "y", 1).values
        a_zz = diff(coeffs.alpha, "y", 2).values
        g_z = diff(gam, "y", 1).values
        conv = -(gam.values + 2.0 * a_z)
        react = -(g_z + a_zz)
        cache["adjoint_pieces"] = (conv, coeffs.alpha.values, react)
    return cache["adjoint_pieces"]


def _jump_targets(coeffs, j):
    """Prescribed jumps of the dual profile across z = 0.

    Duality against the operator z d_x + gamma d_z - alpha d_zz gives
      j=1:  [phi] = 1/alpha(x,0),   [phi_z] = -(gamma + alpha_z)/alpha^2
      j=0:  [phi] = 0,              [phi_z] = -1/alpha(x,0)
    which reduce to the unit jumps for the shear coefficients.
    """
    grid = coeffs.grid
    iy0 = grid.iy0
    a0 = coeffs.alpha.values[:, iy0]
    g0 = coeffs.gamma().values[:, iy0]
    az0 = diff(coeffs.alpha, "y", 1).values[:, iy0]
    if j == 1:
        return 1.0 / a0, -(g0 + az0) / (a0 * a0)
    if j == 0:
        return np.zeros(grid.nx), -1.0 / a0
    raise ValueError(f"jump index must be 0 or 1, got {j}")


def _lifting(grid, value_jump, deriv_jump):
    """Nodal lifting step(|z|) * (a(x) + b(x) z), smooth across z = 0.

    Identically a + b z for |z| <= 1/12 and zero for |z| >= 1/8, so it has
    exactly the prescribed value/derivative pair at z = 0+ and vanishes far
    from the interface.
    """
    zabs = np.abs(grid.y)[None, :]
    step = plateau_bump(zabs, _LIFT_PLATEAU, _LIFT_OUTER)
    return step * (value_jump[:, None] + deriv_jump[:, None] * grid.y[None, :])


def solve_adjoint_with_jumps(j, coeffs, jump_tol=1e-3) -> DualProfile:
    """Dual profile: adjoint solution with prescribed jumps at z = 0.

    Lifts the jump with an explicit local function L supported near the
    interface, solves the global adjoint system for the C^1 remainder
    v = phi - 1_{z>0} L, and reconstructs phi on each half.  Raises
    "dual profile jump violation" if the measured jumps deviate from the
    targets by more than jump_tol (excluding the two extreme x-columns on
    each side, where the corner singularity pollutes one-sided stencils).
    """
    grid = coeffs.grid
    aj, bj = _jump_targets(coeffs, j)
    lift = _lifting(grid, aj, bj)
    conv, diffusion, react = _adjoint_pieces(coeffs)
    key = ("adjoint_matrix",)
    if key not in coeffs._cache:
        coeffs._cache[key] = _assemble_operator(grid, -1, conv, diffusion, react)
    A, mask = coeffs._cache[key]

    iy0 = grid.iy0
    op_lift = (A @ lift.ravel()).reshape(grid.shape)
    b = np.zeros(grid.shape)
    up = grid.y > 0
    b[:, up] = -op_lift[:, up]
    b[:, iy0] = -0.5 * op_lift[:, iy0]
    # Dirichlet rows: phi = 0 on outflow and walls, so v = -L there.
    b[mask] = 0.0
    b[-1, up] = -lift[-1, up]
    b[:, -1] = -lift[:, -1]  # zero in practice (support of L)
    b[:, 0] = -lift[:, 0]

    lu = _factor(A, coeffs._cache, ("lu", "adjoint"))
    v = lu.solve(b.ravel())
    if not np.all(np.isfinite(v)):
        raise ValueError("factorization failure: singular adjoint system")
    v = v.reshape(grid.shape)
    prof = DualProfile(
        grid=grid,
        j=j,
        values_plus=v + lift,
        values_minus=v.copy(),
        target_value_jump=aj,
        target_deriv_jump=bj,
    )
    ev, ed = prof.jump_errors()
    if max(ev, ed) > jump_tol:
        raise ValueError(
            f"dual profile jump violation: value {ev:.3e}, deriv {ed:.3e} "
            f"(tol {jump_tol:.1e})"
        )
    return prof


def _solve_adjoint_doubled(j, coeffs) -> DualProfile:
    """Doubled-unknown variant of the dual solve (internal cross-check).

    The z = 0 line is duplicated; the interface carries the two jump
    constraints (value difference and 4-point one-sided derivative
    difference) instead of a PDE row.
    """
    grid = coeffs.grid
    nx, ny = grid.shape
    iy0 = grid.iy0
    x, y = grid.x, grid.y
    aj, bj = _jump_targets(coeffs, j)
    conv, diffusion, react = _adjoint_pieces(coeffs)

    # Unknowns: plus-half rows k in [iy0, ny-1] then minus-half k in [0, iy0].
    nyu = ny - iy0
    nyd = iy0 + 1

    def pid(i, k):  # k absolute >= iy0
        return i * nyu + (k - iy0)

    def mid(i, k):  # k absolute <= iy0
        return nx * nyu + i * nyd + k

    n_unknowns = nx * (nyu + nyd)
    rows, cols, vals, b = [], [], [], np.zeros(n_unknowns)

    def add(r, c, v):
        rows.append(r)
        cols.append(c)
        vals.append(v)

    hx = np.diff(x)
    hy = np.diff(y)
    for i in range(nx):
        for k in range(ny):
            on_plus = k >= iy0
            on_minus = k <= iy0
            for side in ("plus", "minus"):
                if side == "plus" and not on_plus:
                    continue
                if side == "minus" and not on_minus:
                    continue
                nid = pid(i, k) if side == "plus" else mid(i, k)
                if k == iy0:
                    continue  # interface rows added separately
                if k == 0 or k == ny - 1:
                    add(nid, nid, 1.0)
                    continue
                speed = -y[k]
                if (speed > 0 and i == 0) or (speed < 0 and i == nx - 1):
                    add(nid, nid, 1.0)
                    continue
                ref = pid if side == "plus" else mid
                diag = 0.0
                if speed > 0:
                    w = speed / hx[i - 1]
                    diag += w
                    add(nid, ref(i - 1, k), -w)
                elif speed < 0:
                    w = -speed / hx[i]
                    diag += w
                    add(nid, ref(i + 1, k), -w)
                c = conv[i, k]
                if c > 0:
                    w = c / hy[k - 1]
                    diag += w
                    add(nid, ref(i, k - 1), -w)
                elif c < 0:
                    w = -c / hy[k]
                    diag += w
                    add(nid, ref(i, k + 1), -w)
                hm, hp = hy[k - 1], hy[k]
                a = diffusion[i, k]
                diag += 2.0 * a / (hm * hp)
                add(nid, ref(i, k - 1), -2.0 * a / (hm * (hm + hp)))
                add(nid, ref(i, k + 1), -2.0 * a / (hp * (hm + hp)))
                add(nid, nid, diag + react[i, k])
        # interface constraints at (i, z=0)
        r1 = pid(i, iy0)
        add(r1, pid(i, iy0), 1.0)
        add(r1, mid(i, iy0), -1.0)
        b[r1] = aj[i]
        r2 = mid(i, iy0)
        ku = np.arange(iy0, iy0 + 4)
        kd = np.arange(iy0 - 3, iy0 + 1)
        wu = fd_weights(y[ku], 0.0, 1)
        wd = fd_weights(y[kd], 0.0, 1)
        for k_, w_ in zip(ku, wu):
            add(r2, pid(i, k_), w_)
        for k_, w_ in zip(kd, wd):
            add(r2, mid(i, k_), -w_)
        b[r2] = bj[i]

    A = sp.csr_matrix((vals, (rows, cols)), shape=(n_unknowns, n_unknowns))
    sol = spla.splu(A.tocsc()).solve(b)
    vplus = np.zeros(grid.shape)
    vminus = np.zeros(grid.shape)
    vplus[:, iy0:] = sol[: nx * nyu].reshape(nx, nyu)
    vminus[:, : iy0 + 1] = sol[nx * nyu :].reshape(nx, nyd)
    return DualProfile(grid, j, vplus, vminus, aj, bj)
