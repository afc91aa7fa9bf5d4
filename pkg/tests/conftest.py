import numpy as np
import pytest

from fbflow.domain import DataTriple, Domain, Field, Grid, Trace, build_grid


@pytest.fixture
def unit_grid():
    return build_grid(Domain(0.0, 1.0), 33, 33, {"kind": "uniform"})


def admissible_trace(grid, tag, coeffs=(1.0,)):
    """Trace y^3 (1 -+ y)^3 * poly(y): vanishes to second order at the
    degenerate corner and satisfies value = curvature = 0 at the wall."""
    y = np.asarray(grid.y)
    iy0 = grid.iy0
    ys = y[iy0:] if tag == "sigma0" else y[: iy0 + 1]
    wall = 1.0 - ys if tag == "sigma0" else 1.0 + ys
    vals = ys**3 * wall**3 * np.polyval(list(coeffs)[::-1], ys)
    return Trace(grid, tag, vals)


def smooth_triple(grid, amp_f=1.0, amp0=1.0, amp1=1.0, kf=1.0):
    """An admissible data triple with smooth separable source."""
    X, Y = grid.meshgrid()
    Lx = grid.domain.length
    xi = (X - grid.domain.x0) / Lx
    f = Field(grid, amp_f * np.sin(np.pi * kf * xi) * (1.0 - Y**2) ** 3 * Y)
    d0 = amp0 * admissible_trace(grid, "sigma0")
    d1 = amp1 * admissible_trace(grid, "sigma1")
    return DataTriple(f, d0, d1)


def random_field(grid, rng, amp=1.0, modes=3):
    X, Y = grid.meshgrid()
    Lx = grid.domain.length
    xi = (X - grid.domain.x0) / Lx
    v = np.zeros(grid.shape)
    for k in range(1, modes + 1):
        a, b = rng.uniform(-1, 1, 2)
        v += a * np.sin(np.pi * k * xi) * np.cos(0.5 * np.pi * k * Y)
        v += b * np.cos(np.pi * k * xi) * np.sin(0.5 * np.pi * k * Y)
    return Field(grid, amp * v / modes)
