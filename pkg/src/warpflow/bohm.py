"""Ricci-flat doubly warped products closing smoothly at the origin.

With ``v0 = 1`` the fiber Ricci components vanish iff

    v_a'' = v_a [ (n_a - 1)(1 - v_a'^2)/v_a^2 - sum_{b != a} n_b v_a' v_b'/(v_a v_b) ]

for a = 1, 2.  The radial component ``-sum n_a v_a''/v_a`` is a first
integral of this pair; it is monitored, not integrated.  Near x = 0 the
solution is started from its power series ``v1 = x + a3 x^3 + ...``,
``v2 = c + b2 x^2 + ...``.
"""

from __future__ import annotations

import logging
import math
import warnings
from dataclasses import asdict, dataclass, field

import numpy as np
from numpy.polynomial import polynomial as P
from scipy.integrate import solve_ivp

from .geometry import WarpedProfile, ricci_arrays, series_coefficients

__all__ = [
    "BohmOptions",
    "ConeFit",
    "ProfileCollapse",
    "cone_slopes",
    "series_start",
    "integrate_bohm",
    "bohm_solution",
    "constraint_residual",
    "cone_fit",
    "cone_profile",
]

log = logging.getLogger(__name__)


class ProfileCollapse(RuntimeError):
    """A warping function reached zero or blew up before the outer radius."""

    def __init__(self, radius: float, reason: str):
        super().__init__(f"profile collapse at x = {radius:.6g}: {reason}")
        self.radius = radius
        self.reason = reason


@dataclass(frozen=True)
class BohmOptions:
    n1: int = 2
    n2: int = 2
    c: float = 1.0
    x_start: float = 1e-3
    L: float = 200.0
    rk_tol: float = 1e-10
    series_order: int = 8
    n_grid: int = 2048

    def __post_init__(self):
        if self.n1 < 2:
            raise ValueError("n1 must be ≥ 2")
        if self.n2 < 2:
            raise ValueError("n2 must be ≥ 2")
        if not (0 < self.x_start < 0.1):
            raise ValueError("x_start must lie in (0, 0.1)")
        if self.L < 1 or self.L <= self.x_start:
            raise ValueError("L must be ≥ 1")
        if self.rk_tol <= 0:
            raise ValueError("rk_tol must be positive")
        if self.c <= 0:
            raise ValueError("c must be positive")
        if self.series_order < 3:
            raise ValueError("series_order must be ≥ 3")
        if self.n_grid < 8:
            raise ValueError("n_grid must be ≥ 8")

    @property
    def dimension_warning(self) -> str | None:
        n = self.n1 + self.n2
        if not 4 <= n <= 8:
            return f"n1 + n2 = {n} lies outside [4, 8]; the profile may not approach the cone"
        return None

    def to_dict(self) -> dict:
        return asdict(self)


@dataclass(frozen=True)
class ConeFit:
    c1_hat: float
    c2_hat: float
    rel_err1: float
    rel_err2: float
    rate_estimate: float
    c1: float
    c2: float
    warnings: tuple = field(default_factory=tuple)

    def to_dict(self) -> dict:
        d = asdict(self)
        d["warnings"] = list(self.warnings)
        return d


def cone_slopes(n1: int, n2: int) -> tuple[float, float]:
    """Slopes of the Ricci-flat cone, ``c_a^2 = (n_a - 1)/(n - 1)``."""
    n = n1 + n2
    return math.sqrt((n1 - 1) / (n - 1)), math.sqrt((n2 - 1) / (n - 1))


# ---------------------------------------------------------------------------
# origin series


def _series_coeffs(n1: int, n2: int, c: float, order: int) -> tuple[np.ndarray, np.ndarray]:
    """Odd series of v1 and even series of v2 through x**order.

    The fiber equations are multiplied through by ``v1 v2``:

        E1 = v1 v2 v1'' - (n1-1)(1 - v1'^2) v2 + n2 v1 v1' v2'
        E2 = v1 v2 v2'' - (n2-1)(1 - v2'^2) v1 + n1 v1' v2 v2'

    The coefficient b_j first appears in E2 at x^(j-1) with factor
    c j (j - 1 + n1); a_k first appears in E1 at x^(k-1) with factor
    c k (k + 2 n1 - 3), once b_(k-1) is known.  Solving in the order
    b2, a3, b4, a5, ... is therefore triangular.
    """
    deg = order + 1
    c1 = np.zeros(deg + 1)
    c2 = np.zeros(deg + 1)
    c1[1] = 1.0
    c2[0] = c

    def residual(eq: int, power: int) -> float:
        v1, v2 = c1, c2
        d1, d2 = P.polyder(v1), P.polyder(v2)
        dd1, dd2 = P.polyder(v1, 2), P.polyder(v2, 2)
        if eq == 1:
            one_minus = -P.polymul(d1, d1)
            one_minus[0] += 1.0
            e = (P.polymul(P.polymul(v1, v2), dd1)
                 - (n1 - 1) * P.polymul(one_minus, v2)
                 + n2 * P.polymul(P.polymul(v1, d1), d2))
        else:
            one_minus = -P.polymul(d2, d2)
            one_minus[0] += 1.0
            e = (P.polymul(P.polymul(v1, v2), dd2)
                 - (n2 - 1) * P.polymul(one_minus, v1)
                 + n1 * P.polymul(P.polymul(d1, v2), d2))
        return float(e[power]) if power < e.size else 0.0

    for j in range(2, order + 1, 2):
        factor = c * j * (j - 1 + n1)
        assert factor != 0.0
        c2[j] = -residual(2, j - 1) / factor
        k = j + 1
        if k <= order:
            factor = c * k * (k + 2 * n1 - 3)
            assert factor != 0.0
            c1[k] = -residual(1, k - 1) / factor
    return c1[1 : order + 1 : 2].copy(), c2[0 : order + 1 : 2].copy()


def series_start(opts: BohmOptions) -> tuple[np.ndarray, dict]:
    """State ``(v1, v1', v2, v2')`` at ``x_start`` and the origin series."""
    a, b = _series_coeffs(opts.n1, opts.n2, opts.c, opts.series_order)
    origin = {"v1_odd": [float(t) for t in a], "v2_even": [float(t) for t in b]}
    c1, c2 = series_coefficients(origin)
    x = opts.x_start
    state = np.array([
        P.polyval(x, c1), P.polyval(x, P.polyder(c1)),
        P.polyval(x, c2), P.polyval(x, P.polyder(c2)),
    ])
    return state, origin


# ---------------------------------------------------------------------------
# integration


def _rhs(n1: int, n2: int):
    def f(x, y):
        v1, p1, v2, p2 = y
        a1 = (n1 - 1) * (1.0 - p1 * p1) / v1 - n2 * p1 * p2 / v2
        a2 = (n2 - 1) * (1.0 - p2 * p2) / v2 - n1 * p1 * p2 / v1
        return np.array([p1, a1, p2, a2])
    return f


def bohm_solution(opts: BohmOptions, y0: np.ndarray | None = None):
    """Integrate the fiber equations; returns ``(OdeSolution, origin_series)``.

    ``y0`` overrides the series start (used for the exact-cone check).
    """
    state, origin = series_start(opts)
    if y0 is not None:
        state = np.asarray(y0, dtype=float)
    rhs = _rhs(opts.n1, opts.n2)

    def hit_zero(x, y):
        return min(y[0], y[2])
    hit_zero.terminal = True
    hit_zero.direction = -1

    def blow_up(x, y):
        return 1e6 - max(abs(y[1]), abs(y[3]))
    blow_up.terminal = True
    blow_up.direction = -1

    scale = max(opts.c, opts.x_start)
    sol = solve_ivp(
        rhs, (opts.x_start, opts.L), state, method="RK45",
        rtol=opts.rk_tol, atol=opts.rk_tol * 1e-2 * scale,
        dense_output=True, events=(hit_zero, blow_up),
    )
    if sol.status == 1:
        if sol.t_events[0].size:
            raise ProfileCollapse(float(sol.t_events[0][0]), "warping function reached zero")
        raise ProfileCollapse(float(sol.t_events[1][0]), "derivative blow-up")
    if sol.status != 0:
        raise ProfileCollapse(float(sol.t[-1]), sol.message)
    log.debug("bohm integration: %d steps, %d rhs evaluations", sol.t.size, sol.nfev)
    return sol, origin


def _sample(opts: BohmOptions, sol, origin: dict, grid: np.ndarray) -> WarpedProfile:
    rhs = _rhs(opts.n1, opts.n2)
    c1, c2 = series_coefficients(origin)
    y = np.empty((4, grid.size))
    inner = grid < opts.x_start
    if np.any(inner):
        xi = grid[inner]
        y[:, inner] = [P.polyval(xi, c1), P.polyval(xi, P.polyder(c1)),
                       P.polyval(xi, c2), P.polyval(xi, P.polyder(c2))]
    if np.any(~inner):
        y[:, ~inner] = sol.sol(grid[~inner])
    acc = rhs(grid, y)
    if np.any(inner):
        xi = grid[inner]
        acc[1, inner] = P.polyval(xi, P.polyder(c1, 2))
        acc[3, inner] = P.polyval(xi, P.polyder(c2, 2))
    ones = np.ones_like(grid)
    return WarpedProfile(
        opts.n1, opts.n2, grid, ones, y[0], y[2],
        np.zeros_like(grid), y[1], y[3], acc[1], acc[3],
        origin_data=origin, series_radius=10.0 * opts.x_start,
    )


def default_grid(L: float, n: int) -> np.ndarray:
    """Cell-centred uniform grid ``x_k = (k - 1/2) L/n``, k = 1..n."""
    dx = L / n
    return (np.arange(n) + 0.5) * dx


def integrate_bohm(opts: BohmOptions, grid: np.ndarray | None = None) -> WarpedProfile:
    """Integrate a smooth-closure Ricci-flat profile and sample it.

    The default grid is the cell-centred uniform grid on [0, L] with
    ``opts.n_grid`` cells.  Raises :class:`ProfileCollapse` if a warping
    function degenerates before ``L``.
    """
    if opts.dimension_warning:
        warnings.warn(opts.dimension_warning, RuntimeWarning, stacklevel=2)
    sol, origin = bohm_solution(opts)
    if grid is None:
        grid = default_grid(opts.L, opts.n_grid)
    grid = np.asarray(grid, dtype=float)
    if grid[-1] > opts.L * (1 + 1e-12):
        raise ValueError("grid extends beyond L")
    return _sample(opts, sol, origin, grid)


def cone_profile(n1: int, n2: int, grid: np.ndarray) -> WarpedProfile:
    """The Ricci-flat cone ``v_a = c_a x`` sampled on ``grid``."""
    c1, c2 = cone_slopes(n1, n2)
    x = np.asarray(grid, dtype=float)
    z = np.zeros_like(x)
    return WarpedProfile(n1, n2, x, np.ones_like(x), c1 * x, c2 * x, z,
                         np.full_like(x, c1), np.full_like(x, c2), z, z)


# ---------------------------------------------------------------------------
# diagnostics


def constraint_residual(profile: WarpedProfile) -> np.ndarray:
    """Scale-invariant radial Ricci residual ``x^2 |sum_a n_a v_a''/v_a|``."""
    return profile.grid**2 * np.abs(ricci_arrays(profile)[0])


def cone_fit(profile: WarpedProfile) -> ConeFit:
    """Fit the asymptotic cone on the last decade of the grid.

    Slopes come from a least-squares line ``v_a ~ c x + d``; the rate is the
    log-log slope of ``|v_a/x - c_a|``.
    """
    x = profile.grid
    c_target = cone_slopes(profile.n1, profile.n2)
    tail = x >= x[-1] / 10.0
    if tail.sum() < 3:
        tail = np.zeros_like(x, dtype=bool)
        tail[-3:] = True
    notes = []
    slopes, rel, rates = [], [], []
    for v, ca in zip((profile.v1, profile.v2), c_target):
        A = np.vstack([x[tail], np.ones(tail.sum())]).T
        (slope, _), *_ = np.linalg.lstsq(A, v[tail], rcond=None)
        slopes.append(float(slope))
        rel.append(float(abs(v[-1] / x[-1] - ca) / ca))
        dev = np.abs(v[tail] / x[tail] - ca)
        ok = dev > 0
        if ok.sum() >= 3:
            rates.append(float(np.polyfit(np.log(x[tail][ok]), np.log(dev[ok]), 1)[0]))
        ratio = v[tail] / x[tail]
        dr = np.diff(ratio)
        if not (np.all(dr >= 0) or np.all(dr <= 0)):
            notes.append("non-monotone tail of v/x; cone fit may be unreliable")
    if min(slopes) <= 0:
        notes.append("non-positive fitted slope")
    rate = float(np.mean(rates)) if rates else float("nan")
    return ConeFit(slopes[0], slopes[1], rel[0], rel[1], rate, c_target[0], c_target[1],
                   tuple(dict.fromkeys(notes)))
