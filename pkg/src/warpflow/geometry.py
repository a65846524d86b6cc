"""Geometry of doubly warped product metrics.

The metric is ``g = v0^2 dx^2 + v1^2 g1 + v2^2 g2`` where ``g1``, ``g2`` are
round metrics on spheres of dimension ``n1``, ``n2``.  Everything reduces to
the three warping functions and their x-derivatives; s denotes arclength,
``ds = v0 dx``.

Perturbations ``h = eta0 dx^2 + eta1 (v1^2 g1) + eta2 (v2^2 g2)`` are stored
with the fiber components measured relative to the background fiber metrics
``v_a^2 g_a``.  This is the normalization in which the Lichnerowicz formulas
below hold and in which ``h = g`` corresponds to ``eta = (1, 1, 1)``.
"""

from __future__ import annotations

import csv
import json
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
from numpy.polynomial import polynomial as P

__all__ = [
    "WarpedProfile",
    "TensorPerturbation",
    "ChristoffelTable",
    "christoffel",
    "ricci_components",
    "ricci_arrays",
    "scalar_curvature",
    "lichnerowicz_v_form",
    "fd_derivatives",
    "series_coefficients",
    "save_profile",
    "load_profile",
    "RICCI_FLAT_TOL",
]

#: max of x^2 |Rc| accepted as "Ricci-flat" by the reduced Lichnerowicz formula
RICCI_FLAT_TOL = 1e-6

CSV_COLUMNS = ("x", "v0", "v1", "v2", "v0x", "v1x", "v2x", "v1xx", "v2xx")


@dataclass(frozen=True)
class WarpedProfile:
    """Sampled warping functions on a radial grid.

    ``origin_data`` holds the power series at x = 0:
    ``{"v1_odd": [1, a3, a5, ...], "v2_even": [c, b2, b4, ...]}`` meaning
    ``v1 = x + a3 x^3 + ...`` and ``v2 = c + b2 x^2 + ...``.  Inside
    ``series_radius`` the curvature routines evaluate the singular ratios
    from the series instead of the samples.
    """

    n1: int
    n2: int
    grid: np.ndarray
    v0: np.ndarray
    v1: np.ndarray
    v2: np.ndarray
    v0x: np.ndarray
    v1x: np.ndarray
    v2x: np.ndarray
    v1xx: np.ndarray
    v2xx: np.ndarray
    origin_data: dict = field(default_factory=dict)
    series_radius: float = 0.0

    def __post_init__(self):
        if self.n1 < 2 or self.n2 < 2:
            raise ValueError("fiber dimensions must be >= 2")
        x = np.asarray(self.grid, dtype=float)
        if x.ndim != 1 or x.size < 3:
            raise ValueError("grid must be a 1-d array with at least 3 points")
        if np.any(np.diff(x) <= 0) or x[0] <= 0:
            raise ValueError("grid must be strictly increasing and positive")
        for name in CSV_COLUMNS[1:]:
            arr = np.asarray(getattr(self, name), dtype=float)
            if arr.shape != x.shape:
                raise ValueError(f"{name} has shape {arr.shape}, expected {x.shape}")
            object.__setattr__(self, name, arr)
        object.__setattr__(self, "grid", x)
        if np.any(self.v0 <= 0) or np.any(self.v1 <= 0) or np.any(self.v2 <= 0):
            raise ValueError("warping functions must be positive on the grid")

    @property
    def n(self) -> int:
        return self.n1 + self.n2

    @property
    def size(self) -> int:
        return self.grid.size

    @property
    def dx(self) -> float:
        return float(self.grid[1] - self.grid[0])

    def is_uniform(self, rtol: float = 1e-9) -> bool:
        d = np.diff(self.grid)
        return bool(np.all(np.abs(d - d[0]) <= rtol * d[0]))

    def scaled(self, lam: float) -> "WarpedProfile":
        """Return the homothetic profile ``(x, v) -> (lam x, lam v)``.

        The metric scales by ``lam**2``; ``v0`` and the first derivatives of
        ``v1``, ``v2`` are unchanged, second derivatives and ``v0x`` scale by
        ``1/lam``.
        """
        od = {}
        if self.origin_data:
            a = np.asarray(self.origin_data["v1_odd"], dtype=float)
            b = np.asarray(self.origin_data["v2_even"], dtype=float)
            k = np.arange(a.size)
            od = {
                "v1_odd": list(a / lam ** (2 * k)),
                "v2_even": list(b * lam / lam ** (2 * np.arange(b.size))),
            }
        return WarpedProfile(
            self.n1, self.n2, lam * self.grid,
            self.v0, lam * self.v1, lam * self.v2,
            self.v0x / lam, self.v1x, self.v2x,
            self.v1xx / lam, self.v2xx / lam,
            origin_data=od, series_radius=lam * self.series_radius,
        )


@dataclass(frozen=True)
class TensorPerturbation:
    """Components of ``h = eta0 dx^2 + eta1 v1^2 g1 + eta2 v2^2 g2`` on a grid."""

    grid: np.ndarray
    eta0: np.ndarray
    eta1: np.ndarray
    eta2: np.ndarray

    def __post_init__(self):
        x = np.asarray(self.grid, dtype=float)
        object.__setattr__(self, "grid", x)
        for name in ("eta0", "eta1", "eta2"):
            arr = np.asarray(getattr(self, name), dtype=float)
            if arr.shape != x.shape:
                raise ValueError(f"{name} has shape {arr.shape}, expected {x.shape}")
            if not np.all(np.isfinite(arr)):
                raise ValueError(f"{name} has non-finite entries")
            object.__setattr__(self, name, arr)

    @classmethod
    def from_array(cls, grid, arr) -> "TensorPerturbation":
        arr = np.asarray(arr, dtype=float)
        return cls(grid, arr[0], arr[1], arr[2])

    @classmethod
    def zeros(cls, grid) -> "TensorPerturbation":
        z = np.zeros_like(np.asarray(grid, dtype=float))
        return cls(grid, z, z, z)

    def as_array(self) -> np.ndarray:
        """Stacked components, shape ``(3, len(grid))``."""
        return np.vstack([self.eta0, self.eta1, self.eta2])

    def __add__(self, other: "TensorPerturbation") -> "TensorPerturbation":
        _check_same_grid(self.grid, other.grid)
        return TensorPerturbation.from_array(self.grid, self.as_array() + other.as_array())

    def __sub__(self, other: "TensorPerturbation") -> "TensorPerturbation":
        _check_same_grid(self.grid, other.grid)
        return TensorPerturbation.from_array(self.grid, self.as_array() - other.as_array())

    def __mul__(self, c: float) -> "TensorPerturbation":
        return TensorPerturbation.from_array(self.grid, c * self.as_array())

    __rmul__ = __mul__


@dataclass(frozen=True)
class ChristoffelTable:
    """Radial Christoffel coefficients at one point.

    Fiber tensors are factored out: ``Gamma^0_ij = gamma_0ij * (g1hat)_ij``,
    ``Gamma^k_0j = gamma_k0j * delta^k_j`` and likewise for the second fiber.
    Intrinsic fiber symbols are not included.
    """

    gamma_000: float
    gamma_0ij: float
    gamma_k0j: float
    gamma_0ab: float
    gamma_c0b: float


def _check_same_grid(a, b):
    if a.shape != b.shape or not np.allclose(a, b, rtol=0, atol=1e-12 * max(1.0, abs(a[-1]))):
        raise ValueError("perturbation grid does not match")


def _check_index(profile: WarpedProfile, k: int) -> int:
    k = int(k)
    if k < 0 or k >= profile.size:
        raise IndexError(f"grid index {k} out of range [0, {profile.size})")
    return k


# ---------------------------------------------------------------------------
# power series at the origin


def series_coefficients(origin_data: dict) -> tuple[np.ndarray, np.ndarray]:
    """Full power-basis coefficient arrays for v1 and v2 from the origin data."""
    a = np.asarray(origin_data["v1_odd"], dtype=float)
    b = np.asarray(origin_data["v2_even"], dtype=float)
    deg = max(2 * a.size - 1, 2 * (b.size - 1))
    c1 = np.zeros(deg + 1)
    c2 = np.zeros(deg + 1)
    c1[1::2][: a.size] = a
    c2[0::2][: b.size] = b
    return c1, c2


def _series_div(num: np.ndarray, den: np.ndarray, order: int) -> np.ndarray:
    """Truncated power-series quotient num/den up to x**order (den[0] != 0)."""
    num = np.pad(num, (0, max(0, order + 1 - num.size)))[: order + 1]
    den = np.pad(den, (0, max(0, order + 1 - den.size)))[: order + 1]
    q = np.zeros(order + 1)
    for k in range(order + 1):
        q[k] = (num[k] - np.dot(q[:k], den[k:0:-1])) / den[0]
    return q


def _origin_ratios(origin_data: dict, x: float) -> dict:
    """Singular curvature ratios at small x evaluated from the origin series."""
    c1, c2 = series_coefficients(origin_data)
    order = c1.size
    q1 = c1[1:]  # v1 / x
    d1 = P.polyder(c1)
    dd1 = P.polyder(c1, 2)
    d2 = P.polyder(c2)
    dd2 = P.polyder(c2, 2)
    # (1 - v1'^2) / v1^2 = ((1 - v1'^2) / x^2) / (v1/x)^2
    num = -P.polymul(d1, d1)
    num[0] += 1.0
    r_curv1 = _series_div(num[2:], P.polymul(q1, q1), order)
    r_dd1 = _series_div(dd1[1:], q1, order)          # v1'' / v1
    r_mixed = _series_div(P.polymul(d1, d2[1:]), P.polymul(q1, c2), order)  # v1'v2'/(v1 v2)
    return {
        "v1": P.polyval(x, c1), "v2": P.polyval(x, c2),
        "v1x": P.polyval(x, d1), "v2x": P.polyval(x, d2),
        "v1xx": P.polyval(x, dd1), "v2xx": P.polyval(x, dd2),
        "dd1_over_v1": P.polyval(x, r_dd1),
        "curv1": P.polyval(x, r_curv1),
        "mixed": P.polyval(x, r_mixed),
    }


# ---------------------------------------------------------------------------
# connection and curvature


def christoffel(profile: WarpedProfile, k: int) -> ChristoffelTable:
    k = _check_index(profile, k)
    v0, v1, v2 = profile.v0[k], profile.v1[k], profile.v2[k]
    v1s = profile.v1x[k] / v0
    v2s = profile.v2x[k] / v0
    return ChristoffelTable(
        gamma_000=profile.v0x[k] / v0,
        gamma_0ij=-v1 * v1s,
        gamma_k0j=v1s / v1,
        gamma_0ab=-v2 * v2s,
        gamma_c0b=v2s / v2,
    )


def _s_derivatives(profile: WarpedProfile):
    """First and second arclength derivatives of v1, v2 on the whole grid."""
    v0, v0x = profile.v0, profile.v0x
    out = []
    for vx, vxx in ((profile.v1x, profile.v1xx), (profile.v2x, profile.v2xx)):
        vs = vx / v0
        vss = vxx / v0**2 - vx * v0x / v0**3
        out.append((vs, vss))
    return out


def ricci_arrays(profile: WarpedProfile) -> np.ndarray:
    """Ricci coefficients ``(r00, rc1, rc2)`` on the whole grid, shape (3, N).

    ``Rc = r00 ds^2 + rc1 (v1^2 g1) + rc2 (v2^2 g2)``.
    """
    (v1s, v1ss), (v2s, v2ss) = _s_derivatives(profile)
    v1, v2 = profile.v1, profile.v2
    n1, n2 = profile.n1, profile.n2
    dd1 = v1ss / v1
    dd2 = v2ss / v2
    curv1 = (1.0 - v1s**2) / v1**2
    curv2 = (1.0 - v2s**2) / v2**2
    mixed = v1s * v2s / (v1 * v2)
    if profile.origin_data and profile.series_radius > 0:
        near = profile.grid < profile.series_radius
        for k in np.flatnonzero(near):
            r = _origin_ratios(profile.origin_data, profile.grid[k])
            dd1[k], curv1[k], mixed[k] = r["dd1_over_v1"], r["curv1"], r["mixed"]
    r00 = -(n1 * dd1 + n2 * dd2)
    rc1 = -dd1 + (n1 - 1) * curv1 - n2 * mixed
    rc2 = -dd2 + (n2 - 1) * curv2 - n1 * mixed
    return np.vstack([r00, rc1, rc2])


def ricci_components(profile: WarpedProfile, k: int) -> tuple[float, float, float]:
    k = _check_index(profile, k)
    near_origin = profile.series_radius > 0 and profile.grid[k] < profile.series_radius
    if profile.v1[k] < 1e-300 and not near_origin:
        raise ZeroDivisionError("v1 vanishes; use the origin series at this point")
    r = ricci_arrays(profile)[:, k]
    return float(r[0]), float(r[1]), float(r[2])


def scalar_curvature(profile: WarpedProfile, k: int) -> float:
    r00, rc1, rc2 = ricci_components(profile, k)
    return r00 + profile.n1 * rc1 + profile.n2 * rc2


# ---------------------------------------------------------------------------
# Lichnerowicz Laplacian, v-form


def fd_derivatives(x: np.ndarray, f: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """Second-order finite-difference first and second derivatives.

    Centered in the interior, one-sided second order at both ends.  Works
    on nonuniform grids via the three-point Lagrange formulas.
    """
    f = np.asarray(f, dtype=float)
    d1 = np.empty_like(f)
    d2 = np.empty_like(f)
    h0 = x[1:-1] - x[:-2]
    h1 = x[2:] - x[1:-1]
    fm, f0, fp = f[:-2], f[1:-1], f[2:]
    d1[1:-1] = (-h1 / (h0 * (h0 + h1))) * fm + ((h1 - h0) / (h0 * h1)) * f0 + (h0 / (h1 * (h0 + h1))) * fp
    d2[1:-1] = 2.0 * (fm / (h0 * (h0 + h1)) - f0 / (h0 * h1) + fp / (h1 * (h0 + h1)))
    # one-sided: quadratic through the first/last three points for d1,
    # cubic through four points for d2 (second-order accurate)
    d1[0] = _lagrange_deriv(x[:3], f[:3], x[0], 1)
    d1[-1] = _lagrange_deriv(x[-3:], f[-3:], x[-1], 1)
    d2[0] = _lagrange_deriv(x[:4], f[:4], x[0], 2)
    d2[-1] = _lagrange_deriv(x[-4:], f[-4:], x[-1], 2)
    return d1, d2


def _lagrange_deriv(xs, fs, x0, order):
    c = np.polyfit(xs - x0, fs, len(xs) - 1)
    return float(np.polyder(c, order)[-1]) if order <= len(xs) - 1 else 0.0


def lichnerowicz_v_form(
    profile: WarpedProfile,
    h: TensorPerturbation,
    *,
    check_ricci_flat: bool = True,
) -> TensorPerturbation:
    """Apply ``Delta h + 2 Rm*h`` using the warping functions directly.

    Valid only on Ricci-flat backgrounds, where the ``Rc*h`` terms drop out;
    the precondition is checked unless ``check_ricci_flat`` is False.  The
    two end points use one-sided stencils and are less accurate.
    """
    _check_same_grid(profile.grid, h.grid)
    if check_ricci_flat:
        ric = ricci_arrays(profile)
        err = np.max(profile.grid**2 * np.abs(ric))
        if err > RICCI_FLAT_TOL:
            raise ValueError(
                f"profile is not Ricci-flat (max x^2|Rc| = {err:.3e} > {RICCI_FLAT_TOL:g})"
            )
    x = profile.grid
    n1, n2 = profile.n1, profile.n2
    v0 = profile.v0
    (v1s, v1ss), (v2s, v2ss) = _s_derivatives(profile)
    v1, v2 = profile.v1, profile.v2
    p1 = v1s / v1
    p2 = v2s / v2
    trace = n1 * p1 + n2 * p2
    curv1 = (n1 - 1) * (1.0 - v1s**2) / v1**2
    curv2 = (n2 - 1) * (1.0 - v2s**2) / v2**2

    def s_derivs(f):
        fx, fxx = fd_derivatives(x, f)
        fs = fx / v0
        fss = fxx / v0**2 - fx * profile.v0x / v0**3
        return fs, fss

    e0, e1, e2 = h.eta0, h.eta1, h.eta2
    (e0s, e0ss), (e1s, e1ss), (e2s, e2ss) = s_derivs(e0), s_derivs(e1), s_derivs(e2)

    lap0 = (e0ss + n1 * p1 * (e0s + 2 * p1 * (e1 - e0))
            + n2 * p2 * (e0s + 2 * p2 * (e2 - e0)))
    lap1 = e1ss + trace * e1s + 2 * p1**2 * (e0 - e1)
    lap2 = e2ss + trace * e2s + 2 * p2**2 * (e0 - e2)

    rm0 = -n1 * v1ss / v1 * e1 - n2 * v2ss / v2 * e2
    rm1 = -v1ss / v1 * e0 + curv1 * e1 - n2 * p1 * p2 * e2
    rm2 = -v2ss / v2 * e0 - n1 * p1 * p2 * e1 + curv2 * e2

    return TensorPerturbation(x, lap0 + 2 * rm0, lap1 + 2 * rm1, lap2 + 2 * rm2)


# ---------------------------------------------------------------------------
# serialization


def save_profile(profile: WarpedProfile, csv_path, json_path=None) -> None:
    """Write the profile CSV and its JSON sidecar (default: same stem, .json)."""
    csv_path = Path(csv_path)
    json_path = Path(json_path) if json_path else csv_path.with_suffix(".json")
    cols = [getattr(profile, c) for c in CSV_COLUMNS[1:]]
    with open(csv_path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(CSV_COLUMNS)
        for k in range(profile.size):
            w.writerow([repr(float(profile.grid[k]))] + [repr(float(c[k])) for c in cols])
    side = {
        "n1": profile.n1,
        "n2": profile.n2,
        "origin_series": {
            "v1_odd": [float(a) for a in profile.origin_data.get("v1_odd", [])],
            "v2_even": [float(b) for b in profile.origin_data.get("v2_even", [])],
        },
        "series_radius": profile.series_radius,
    }
    json_path.write_text(json.dumps(side, indent=2, sort_keys=True) + "\n")


def load_profile(csv_path, json_path=None) -> WarpedProfile:
    csv_path = Path(csv_path)
    json_path = Path(json_path) if json_path else csv_path.with_suffix(".json")
    side = json.loads(json_path.read_text())
    with open(csv_path, newline="") as fh:
        reader = csv.reader(fh)
        header = next(reader)
        if tuple(header) != CSV_COLUMNS:
            raise ValueError(f"unexpected profile header {header}")
        data = np.array([[float(v) for v in row] for row in reader])
    series = side.get("origin_series", {})
    od = {"v1_odd": series["v1_odd"], "v2_even": series["v2_even"]} if series.get("v1_odd") else {}
    return WarpedProfile(
        int(side["n1"]), int(side["n2"]), *data.T,
        origin_data=od, series_radius=float(side.get("series_radius", 0.0)),
    )
