"""Lichnerowicz Laplacian on doubly warped products as a singular ODE system.

With ``w_a = log(v_a / sqrt(n_a - 1))`` and ``v0 = 1`` the operator acting on
``eta = (eta0, eta1, eta2)`` is

    D eta = eta'' + A(x) eta' + B(x) eta,      A = sum_a n_a w_a',

and it is symmetric for ``<eta, eta~> = int eta^T W eta~ rho dx`` with
``W = diag(1, n1, n2)`` and ``rho = v1^n1 v2^n2``.  Since ``rho'/rho = A`` the
second-order part is ``rho^{-1} (rho eta')'`` and the discretization below
is a cell-centred flux form: no flux through x = 0 (``rho(0) = 0``) and a
homogeneous Dirichlet condition at x = L.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np
import scipy.sparse as sp
from numpy.polynomial import polynomial as P
from scipy.linalg import eig_banded
from scipy.sparse.linalg import eigsh

from .geometry import TensorPerturbation, WarpedProfile, series_coefficients

__all__ = [
    "OperatorCoefficients",
    "SpectralProblem",
    "EigenPair",
    "FrobeniusData",
    "ConeMatrix",
    "assemble_ode_operator",
    "cone_matrix",
    "frobenius_data",
    "discretize",
    "compute_spectrum",
    "count_eigenvalues",
    "eigenvalues_in",
    "apply_operator",
    "rayleigh_quotient",
    "weighted_inner_product",
    "oscillatory_test_tensor",
    "oscillation_rate",
    "fit_decay",
    "spectrum_report",
]


@dataclass(frozen=True)
class OperatorCoefficients:
    n1: int
    n2: int
    grid: np.ndarray
    A: np.ndarray
    B: np.ndarray          # shape (N, 3, 3)
    weight: np.ndarray     # rho at the grid points
    W: np.ndarray          # diag(1, n1, n2)
    face_weight: np.ndarray | None = None  # rho at cell faces k*dx, k = 0..N

    @property
    def size(self) -> int:
        return self.grid.size

    @property
    def dx(self) -> float:
        return float(self.grid[1] - self.grid[0])

    @property
    def L(self) -> float:
        return float(self.grid[-1] + 0.5 * self.dx)

    def WB(self) -> np.ndarray:
        return self.W[None, :, None] * self.B


@dataclass
class SpectralProblem:
    """``K u = lam M u`` with u interleaved as (eta0, eta1, eta2) per cell."""

    coeffs: OperatorCoefficients
    K: sp.csr_matrix
    M: np.ndarray
    bc: dict = field(default_factory=dict)

    @property
    def grid(self) -> np.ndarray:
        return self.coeffs.grid

    def standard_band(self) -> np.ndarray:
        """Upper band storage of ``M^{-1/2} K M^{-1/2}`` for LAPACK."""
        s = 1.0 / np.sqrt(self.M)
        S = sp.diags(s) @ self.K @ sp.diags(s)
        S = S.todia()
        bw = 3
        n = self.M.size
        band = np.zeros((bw + 1, n))
        for off, data in zip(S.offsets, S.data):
            if 0 <= off <= bw:
                band[bw - off, off:] = data[off:]
            elif off > bw:
                raise RuntimeError("bandwidth larger than expected")
        return band

    def operator(self) -> sp.csr_matrix:
        """The discrete ``D`` as a sparse matrix, ``M^{-1} K``."""
        return sp.diags(1.0 / self.M) @ self.K


@dataclass(frozen=True)
class EigenPair:
    lam: float
    tensor: TensorPerturbation
    decay_theta: float
    multiplicity_gap: float
    residual: float
    decay_r2: float = float("nan")


@dataclass(frozen=True)
class FrobeniusData:
    n1: int
    B0: np.ndarray
    B0_eigenvalues: np.ndarray
    B0_eigenvectors: np.ndarray
    exponents: tuple
    pairs: tuple                    # (alpha, beta) pairings
    admissible_direction: np.ndarray
    printed: dict
    discrepancies: tuple


@dataclass(frozen=True)
class ConeMatrix:
    C: np.ndarray
    eigenvalues: np.ndarray
    eigenvectors: np.ndarray


# ---------------------------------------------------------------------------
# coefficients


def _w_derivatives(profile: WarpedProfile):
    x = profile.grid
    v1, v2 = profile.v1.copy(), profile.v2.copy()
    v1x, v2x = profile.v1x.copy(), profile.v2x.copy()
    v1xx, v2xx = profile.v1xx.copy(), profile.v2xx.copy()
    if profile.series_radius > 0 and np.any(x < profile.series_radius):
        if not profile.origin_data:
            raise ValueError("profile has no origin series data")
        c1, c2 = series_coefficients(profile.origin_data)
        near = x < profile.series_radius
        xi = x[near]
        v1[near], v2[near] = P.polyval(xi, c1), P.polyval(xi, c2)
        v1x[near], v2x[near] = P.polyval(xi, P.polyder(c1)), P.polyval(xi, P.polyder(c2))
        v1xx[near], v2xx[near] = P.polyval(xi, P.polyder(c1, 2)), P.polyval(xi, P.polyder(c2, 2))
    w1x, w2x = v1x / v1, v2x / v2
    w1xx = v1xx / v1 - w1x**2
    w2xx = v2xx / v2 - w2x**2
    e1 = (profile.n1 - 1) / v1**2
    e2 = (profile.n2 - 1) / v2**2
    return (w1x, w1xx, e1), (w2x, w2xx, e2), (v1, v2)


def b_matrix(n1, n2, w1x, w1xx, e1, w2x, w2xx, e2) -> np.ndarray:
    """The potential matrix of the vector operator; ``e_a = exp(-2 w_a)``."""
    shape = np.shape(w1x)
    B = np.empty(shape + (3, 3))
    B[..., 0, 0] = -2 * n1 * w1x**2 - 2 * n2 * w2x**2
    B[..., 0, 1] = -2 * n1 * w1xx
    B[..., 0, 2] = -2 * n2 * w2xx
    B[..., 1, 0] = -2 * w1xx
    B[..., 1, 1] = 2 * e1 - 2 * n1 * w1x**2
    B[..., 1, 2] = -2 * n2 * w1x * w2x
    B[..., 2, 0] = -2 * w2xx
    B[..., 2, 1] = -2 * n1 * w1x * w2x
    B[..., 2, 2] = 2 * e2 - 2 * n2 * w2x**2
    return B


def _face_weights(profile: WarpedProfile) -> np.ndarray | None:
    """rho at the faces of a cell-centred uniform grid, None otherwise.

    Interpolates the smooth even factor ``rho / x^n1`` with four-point
    stencils and multiplies the exact power back in.
    """
    x = profile.grid
    dx = x[1] - x[0]
    if not profile.is_uniform() or abs(x[0] - 0.5 * dx) > 1e-9 * dx:
        return None
    n1, n2 = profile.n1, profile.n2
    sigma = (profile.v1 / x) ** n1 * profile.v2**n2
    N = x.size
    ext = np.concatenate([[sigma[0]], sigma])      # even ghost at -dx/2
    faces = np.arange(N + 1) * dx
    sf = np.empty(N + 1)
    # face k sits between ext[k] and ext[k+1]
    k = np.arange(1, N - 1)
    sf[1 : N - 1] = (-ext[k - 1] + 9 * ext[k] + 9 * ext[k + 1] - ext[k + 2]) / 16.0
    sf[0] = sigma[0]
    sf[N - 1] = (3 * sigma[N - 1] + 6 * sigma[N - 2] - sigma[N - 3]) / 8.0
    sf[N] = 1.875 * sigma[N - 1] - 1.25 * sigma[N - 2] + 0.375 * sigma[N - 3]
    return faces**n1 * sf


def assemble_ode_operator(profile: WarpedProfile) -> OperatorCoefficients:
    """Coefficients ``A``, ``B``, the weight and ``W`` on the profile grid."""
    if np.max(np.abs(profile.v0 - 1.0)) > 1e-12 or np.max(np.abs(profile.v0x)) > 1e-12:
        raise ValueError("the vector Lichnerowicz operator needs v0 == 1")
    (w1x, w1xx, e1), (w2x, w2xx, e2), (v1, v2) = _w_derivatives(profile)
    n1, n2 = profile.n1, profile.n2
    A = n1 * w1x + n2 * w2x
    B = b_matrix(n1, n2, w1x, w1xx, e1, w2x, w2xx, e2)
    weight = v1**n1 * v2**n2
    W = np.array([1.0, n1, n2])
    return OperatorCoefficients(n1, n2, profile.grid, A, B, weight, W, _face_weights(profile))


def cone_matrix(n1: int, n2: int) -> ConeMatrix:
    """The limit ``x^2 B(x)`` on the Ricci-flat cone and its eigen-decomposition."""
    if n1 < 2 or n2 < 2:
        raise ValueError("fiber dimensions must be >= 2")
    n = n1 + n2
    C = 2.0 * np.array([[-n, n1, n2], [1, n2 - 1, -n2], [1, -n1, n1 - 1]], dtype=float)
    lam, vec = np.linalg.eig(C)
    order = np.argsort(lam.real)
    return ConeMatrix(C, lam.real[order], vec.real[:, order])


def frobenius_data(n1: int) -> FrobeniusData:
    """Indicial data of the eigentensor equation at the regular singular point x = 0.

    The leading-order operator is ``x^2 z'' + n1 x z' + B0 z``; an exponent
    ``alpha`` for an eigenvalue ``beta`` of ``B0`` solves
    ``alpha (alpha - 1) + n1 alpha + beta = 0``.  The eigen-decomposition is
    computed; the commonly printed values ``beta0 = -(2 n1 + 1)`` and
    ``zeta0 = (2 n1, -1, 0)`` are checked and any mismatch is reported.
    """
    if n1 < 2:
        raise ValueError("n1 must be >= 2")
    B0 = np.array([[-2 * n1, 2 * n1, 0], [2, -2, 0], [0, 0, 0]], dtype=float)
    lam, vec = np.linalg.eig(B0)
    lam = lam.real
    order = np.argsort(lam)
    lam, vec = lam[order], vec.real[:, order]
    pairs = []
    for beta in lam:
        # alpha^2 + (n1 - 1) alpha + beta = 0
        disc = (n1 - 1) ** 2 - 4 * beta
        r = math.sqrt(disc)
        for alpha in ((-(n1 - 1) + r) / 2, (-(n1 - 1) - r) / 2):
            pairs.append((round(alpha, 12) + 0.0, float(beta)))
    exponents = tuple(sorted((a for a, _ in pairs), reverse=True))
    printed = {"beta0": -(2 * n1 + 1), "zeta0": [2 * n1, -1, 0]}
    issues = []
    beta_neg = float(lam[0])
    if abs(beta_neg - printed["beta0"]) > 1e-9:
        issues.append(
            f"printed beta0 = {printed['beta0']} differs from the computed eigenvalue {beta_neg:g} = -2(n1+1)"
        )
    z = np.array(printed["zeta0"], dtype=float)
    if np.linalg.norm(B0 @ z - beta_neg * z) > 1e-9 and np.linalg.norm(B0 @ z - printed["beta0"] * z) > 1e-9:
        v = vec[:, 0] / vec[1, 0] * -1.0
        issues.append(
            f"printed zeta0 = {printed['zeta0']} is not an eigenvector of B0; computed ({v[0]:g}, {v[1]:g}, {v[2]:g})"
        )
    return FrobeniusData(
        n1=n1, B0=B0, B0_eigenvalues=lam, B0_eigenvectors=vec,
        exponents=exponents, pairs=tuple(pairs),
        admissible_direction=np.array([0.0, 0.0, 1.0]),
        printed=printed, discrepancies=tuple(issues),
    )


# ---------------------------------------------------------------------------
# discretization


def discretize(coeffs: OperatorCoefficients, bc: dict | None = None) -> SpectralProblem:
    """Assemble the symmetric pencil ``(K, M)`` for ``D`` on (0, L).

    ``bc`` may set ``{"origin": "regular", "outer": "dirichlet"}`` (the only
    supported choices).  At the origin no condition is imposed beyond
    ``rho(0) = 0``: finite energy together with the singular part of ``B``
    selects the solutions that close up smoothly.
    """
    bc = {"origin": "regular", "outer": "dirichlet", **(bc or {})}
    if bc["origin"] != "regular" or bc["outer"] != "dirichlet":
        raise ValueError(f"unsupported boundary conditions {bc}")
    if coeffs.face_weight is None:
        raise ValueError("discretize needs a uniform cell-centred grid")
    N = coeffs.size
    dx = coeffs.dx
    W = coeffs.W
    rf = coeffs.face_weight
    rho = coeffs.weight
    mass = np.repeat(rho * dx, 3) * np.tile(W, N)
    # diagonal blocks
    diag_flux = -(rf[:-1] + rf[1:]) / dx
    diag_flux[-1] = -(rf[-2] + 2.0 * rf[-1]) / dx    # ghost -u_N at the outer face
    blocks = (rho * dx)[:, None, None] * coeffs.WB()
    blocks[:, np.arange(3), np.arange(3)] += diag_flux[:, None] * W[None, :]
    # symmetrize to round-off; W B is symmetric analytically
    blocks = 0.5 * (blocks + np.transpose(blocks, (0, 2, 1)))
    off = rf[1:-1] / dx
    rows, cols, vals = [], [], []
    base = 3 * np.arange(N)
    for i in range(3):
        for j in range(3):
            rows.append(base + i)
            cols.append(base + j)
            vals.append(blocks[:, i, j])
    for i in range(3):
        rows.append(base[:-1] + i)
        cols.append(base[1:] + i)
        vals.append(off * W[i])
        rows.append(base[1:] + i)
        cols.append(base[:-1] + i)
        vals.append(off * W[i])
    K = sp.csr_matrix(
        (np.concatenate(vals), (np.concatenate(rows), np.concatenate(cols))), shape=(3 * N, 3 * N)
    )
    return SpectralProblem(coeffs=coeffs, K=K, M=mass, bc=bc)


def _to_tensor(grid, u) -> TensorPerturbation:
    return TensorPerturbation.from_array(grid, np.asarray(u).reshape(-1, 3).T)


def _to_vector(h: TensorPerturbation) -> np.ndarray:
    return h.as_array().T.reshape(-1)


def apply_operator(problem: SpectralProblem, h: TensorPerturbation) -> TensorPerturbation:
    """Discrete ``D h`` (flux form, Dirichlet at L)."""
    u = _to_vector(h)
    return _to_tensor(problem.grid, (problem.K @ u) / problem.M)


def rayleigh_quotient(problem: SpectralProblem, h: TensorPerturbation) -> float:
    """``<h, D h> / <h, h>`` in the discrete weak form (handles kinks)."""
    u = _to_vector(h)
    return float(u @ (problem.K @ u) / (u @ (problem.M * u)))


# ---------------------------------------------------------------------------
# eigenvalues


def count_eigenvalues(problem: SpectralProblem, lo: float, hi: float) -> int:
    """Number of discrete eigenvalues in the half-open interval (lo, hi]."""
    return int(eigenvalues_in(problem, lo, hi).size)


def eigenvalues_in(problem: SpectralProblem, lo: float, hi: float) -> np.ndarray:
    band = problem.standard_band()
    vals = eig_banded(band, lower=False, eigvals_only=True, select="v", select_range=(lo, hi),
                      check_finite=False)
    return np.sort(vals)[::-1]


def _eig_top(problem: SpectralProblem, k: int, method: str):
    n = problem.M.size
    if method == "banded":
        band = problem.standard_band()
        vals, vecs = eig_banded(band, lower=False, select="i", select_range=(n - k, n - 1),
                                check_finite=False)
        u = vecs / np.sqrt(problem.M)[:, None]
    elif method == "shift-invert":
        # banded eigenvalues locate the top; eigenvectors come from shift-invert
        top = eig_banded(problem.standard_band(), lower=False, eigvals_only=True,
                         select="i", select_range=(n - 1, n - 1), check_finite=False)[0]
        sigma = top + max(1e-3, 0.1 * abs(top))
        Mm = sp.diags(problem.M)
        v0 = np.ones(n) / math.sqrt(n)
        vals, u = eigsh(problem.K.tocsc(), k=k, M=Mm.tocsc(), sigma=sigma, which="LM", v0=v0,
                        tol=1e-13)
    elif method == "dense":
        from scipy.linalg import eigh
        if n > 4500:
            raise ValueError("dense eigen-solve refused for more than 4500 unknowns")
        s = 1.0 / np.sqrt(problem.M)
        S = (problem.K.toarray() * s[:, None]) * s[None, :]
        vals, vecs = eigh(S, subset_by_index=(n - k, n - 1))
        u = vecs * s[:, None]
    else:
        raise ValueError(f"unknown eigen-solver {method!r}")
    order = np.argsort(vals)[::-1]
    return vals[order], u[:, order]


def compute_spectrum(problem: SpectralProblem, k: int, method: str = "shift-invert") -> list[EigenPair]:
    """The ``k`` largest eigenvalues with eigentensors, sorted descending.

    Eigentensors are normalized to unit weighted norm (trapezoid rule) with
    ``eta2 > 0`` at the first grid point.
    """
    if k < 1:
        raise ValueError("k must be >= 1")
    n = problem.M.size
    kk = min(k + 1, n)
    vals, U = _eig_top(problem, kk, method)
    grid = problem.grid
    Dop = problem.operator()
    pairs = []
    for j in range(min(k, vals.size)):
        lam = float(vals[j])
        u = U[:, j].copy()
        h = _to_tensor(grid, u)
        nrm = math.sqrt(weighted_inner_product(h, h, problem.coeffs))
        if h.eta2[0] < 0:
            nrm = -nrm
        u /= nrm
        h = _to_tensor(grid, u)
        r = Dop @ u - lam * u
        res = math.sqrt(abs(float(r @ (problem.M * r)))) / max(1.0, abs(lam))
        gaps = np.abs(np.delete(vals, j) - lam)
        gap = float(gaps.min()) if gaps.size else float("inf")
        theta, r2 = fit_decay(h, problem.coeffs, lam)
        pairs.append(EigenPair(lam, h, theta, gap, res, r2))
    return pairs


def fit_decay(h: TensorPerturbation, coeffs: OperatorCoefficients, lam: float,
              floor: float = 1e-10) -> tuple[float, float]:
    """Exponential decay rate of ``|eta|`` in the tail, with the fit's R^2.

    Fits ``log(x^{n/2} |eta|_W)`` against x where the cone asymptotics
    ``eta ~ x^{-n/2} exp(-theta x)`` apply: beyond three decay lengths of
    ``sqrt(lam)`` (and beyond L/2 when that is inside the resolved tail),
    above ``floor`` relative to the peak, and one decay length away from
    the Dirichlet wall.
    """
    x = h.grid
    if lam <= 0:
        return float("nan"), float("nan")
    n = coeffs.n1 + coeffs.n2
    amp = np.sqrt(np.einsum("ik,i,ik->k", h.as_array(), coeffs.W, h.as_array()))
    ell = 1.0 / math.sqrt(lam)
    L = x[-1]
    resolved = amp >= floor * amp.max()
    if not np.any(resolved):
        return float("nan"), float("nan")
    x_res = x[resolved].max()
    x_hi = min(x_res, L - ell)
    x_lo = max(3.0 * ell, min(L / 2.0, 0.5 * x_hi))
    win = (x >= x_lo) & (x <= x_hi) & resolved
    if win.sum() < 5:
        return float("nan"), float("nan")
    y = np.log(amp[win]) + 0.5 * n * np.log(x[win])
    slope, icpt = np.polyfit(x[win], y, 1)
    pred = slope * x[win] + icpt
    ss_res = float(np.sum((y - pred) ** 2))
    ss_tot = float(np.sum((y - y.mean()) ** 2))
    r2 = 1.0 - ss_res / ss_tot if ss_tot > 0 else float("nan")
    return float(-slope), r2


def weighted_inner_product(h: TensorPerturbation, ht: TensorPerturbation,
                           coeffs: OperatorCoefficients) -> float:
    """Trapezoid quadrature of ``eta^T W eta~ v1^n1 v2^n2 dx`` on the grid."""
    if h.grid.shape != coeffs.grid.shape or ht.grid.shape != coeffs.grid.shape:
        raise ValueError("tensors and coefficients must share a grid")
    integrand = np.einsum("ik,i,ik->k", h.as_array(), coeffs.W, ht.as_array()) * coeffs.weight
    nz = np.flatnonzero(integrand)
    if nz.size == 0:
        return 0.0
    return float(np.trapezoid(integrand, coeffs.grid))


# ---------------------------------------------------------------------------
# approximate eigenvectors from the cone model


def oscillation_rate(n: int, mu: float) -> float:
    """``b = sqrt(|n^2 - 10 n + 9 + 4 mu|) / 2`` for the model equation

    ``phi'' + (n/x) phi' + (2(n-1) - mu)/x^2 phi = 0``, whose solutions are
    ``x^((1-n)/2) sin(b log x)`` and ``x^((1-n)/2) cos(b log x)``.
    """
    disc = n * n - 10 * n + 9 + 4 * mu
    if disc >= 0:
        raise ValueError(f"n = {n}, mu = {mu}: n^2 - 10n + 9 + 4mu = {disc} is not negative")
    return 0.5 * math.sqrt(-disc)


def oscillatory_test_tensor(coeffs: OperatorCoefficients, R: float, mu: float) -> TensorPerturbation:
    """Compactly supported approximate eigentensor along ``(0, n2, -n1)``.

    ``phi(x) = (x/R)^alpha sin(b log(x/R))`` on ``[R, exp(pi/b) R]`` and 0
    elsewhere, ``alpha = (1 - n)/2``.
    """
    n1, n2 = coeffs.n1, coeffs.n2
    n = n1 + n2
    if not 4 <= n <= 8:
        raise ValueError(f"n1 + n2 = {n} outside [4, 8]: no oscillatory solutions")
    if not 0 < mu < 1.75:
        raise ValueError("mu must lie in (0, 7/4)")
    b = oscillation_rate(n, mu)
    alpha = (1 - n) / 2
    x = coeffs.grid
    right = math.exp(math.pi / b) * R
    if R <= 0 or right > x[-1]:
        raise ValueError(f"support [{R:g}, {right:g}] does not fit in the grid (0, {x[-1]:g}]")
    phi = np.zeros_like(x)
    sup = (x >= R) & (x <= right)
    t = x[sup] / R
    phi[sup] = t**alpha * np.sin(b * np.log(t))
    return TensorPerturbation(x, 0.0 * phi, n2 * phi, -n1 * phi)


# ---------------------------------------------------------------------------
# reporting


def spectrum_report(pairs: list[EigenPair]) -> dict:
    return {
        "lambdas": [p.lam for p in pairs],
        "residuals": [p.residual for p in pairs],
        "decay_thetas": [p.decay_theta for p in pairs],
        "gaps": [p.multiplicity_gap for p in pairs],
    }
