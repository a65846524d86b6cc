"""Ancient orbits and local unstable manifolds of hyperbolic fixed points.

For a map ``f(x) = T x + g(x)`` with ``T = T_s (+) T_u``, ``g(0) = 0`` and
``dg(0) = 0``, an orbit ``x_i = f(x_{i-1})`` (i <= 0) with ``x_0^u = v`` and
``sup_i a^{-i} |x_i| < inf`` satisfies

    x_i^s = sum_{j>=0} T_s^j g^s(x_{i-j-1})
    x_i^u = T_u^i v - sum_{j=1}^{-i} T_u^{-j} g^u(x_{i+j-1})

which is solved here by damped fixed-point iteration in the weighted norm.
Indices below ``-depth`` are filled by the linear extension
``x_k = (0, T_u^{k+depth} x_{-depth}^u)``.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Callable

import numpy as np
from scipy.linalg import cholesky, solve_discrete_lyapunov

__all__ = [
    "HyperbolicMapProblem",
    "AncientOrbit",
    "NonContraction",
    "upsilon_map",
    "solve_ancient_orbit",
    "unstable_graph",
    "fit_graph_coefficient",
    "adapt_norm",
    "toy_problem",
    "TOY_MAPS",
    "truncate_flow_map",
    "shadowing_defects",
    "orbit_report",
]


class NonContraction(RuntimeError):
    def __init__(self, message: str, contraction: float):
        super().__init__(message)
        self.contraction = contraction


@dataclass
class HyperbolicMapProblem:
    dim_s: int
    dim_u: int
    T_s: np.ndarray
    T_u: np.ndarray
    g: Callable[[np.ndarray], np.ndarray]
    a: float
    neighborhood_radius: float = 1.0
    name: str = ""
    context: object = field(default=None, repr=False)

    def __post_init__(self):
        self.T_s = np.atleast_2d(np.asarray(self.T_s, dtype=float)).reshape(self.dim_s, self.dim_s)
        self.T_u = np.atleast_2d(np.asarray(self.T_u, dtype=float)).reshape(self.dim_u, self.dim_u)
        if self.dim_u < 1:
            raise ValueError("need at least one unstable direction")
        if self.a <= 0:
            raise ValueError("a must be positive")
        if self.dim_s and self.rho_s >= self.a:
            raise ValueError(f"spectral radius of T_s ({self.rho_s:g}) is not below a = {self.a:g}")
        if np.min(np.abs(np.linalg.eigvals(self.T_u))) <= self.a:
            raise ValueError("T_u has a multiplier of modulus <= a")
        self._Tu_inv = np.linalg.inv(self.T_u)

    @property
    def dim(self) -> int:
        return self.dim_s + self.dim_u

    @property
    def rho_s(self) -> float:
        if self.dim_s == 0:
            return 0.0
        return float(np.max(np.abs(np.linalg.eigvals(self.T_s))))

    def is_adapted(self) -> bool:
        s_ok = self.dim_s == 0 or np.linalg.norm(self.T_s, 2) < self.a
        u_ok = np.linalg.svd(self.T_u, compute_uv=False).min() >= self.a
        return bool(s_ok and u_ok)

    def linear(self, x: np.ndarray) -> np.ndarray:
        return np.concatenate([self.T_s @ x[: self.dim_s], self.T_u @ x[self.dim_s :]])

    def f(self, x: np.ndarray) -> np.ndarray:
        return self.linear(x) + self.g(x)


@dataclass
class AncientOrbit:
    depth: int
    points: np.ndarray          # row k is x_{k - depth}
    weighted_norm: float
    v: np.ndarray
    residual: float = float("nan")
    contraction: float = float("nan")
    iterations: int = 0
    a: float = float("nan")

    @property
    def indices(self) -> np.ndarray:
        return np.arange(-self.depth, 1)

    def point(self, i: int) -> np.ndarray:
        return self.points[i + self.depth]

    @property
    def x0(self) -> np.ndarray:
        return self.points[-1]


# ---------------------------------------------------------------------------
# norms


def _weighted_norm(X: np.ndarray, a: float) -> float:
    depth = X.shape[0] - 1
    i = np.arange(-depth, 1)
    return float(np.max(a ** (-i.astype(float)) * np.linalg.norm(X, axis=1)))


def adapt_norm(problem: HyperbolicMapProblem, margin: float = 0.5):
    """Block-diagonal change of coordinates making the Euclidean norm adapted.

    Returns ``(adapted_problem, S)`` with ``y = S x``.  Uses the Lyapunov
    equations ``A^T P A - P = -I`` for ``A = T_s / r_s`` and
    ``A = T_u^{-1} r_u`` with ``r_s`` and ``r_u`` placed between the
    spectral radii and ``a``.
    """
    ds, du = problem.dim_s, problem.dim_u
    blocks = []
    if ds:
        r = problem.rho_s + margin * (problem.a - problem.rho_s)
        P = solve_discrete_lyapunov((problem.T_s / r).T, np.eye(ds))
        blocks.append(cholesky(0.5 * (P + P.T)))
    mu = float(np.min(np.abs(np.linalg.eigvals(problem.T_u))))
    r = mu - margin * (mu - problem.a)
    P = solve_discrete_lyapunov((problem._Tu_inv * r).T, np.eye(du))
    blocks.append(cholesky(0.5 * (P + P.T)))
    S = np.zeros((ds + du, ds + du))
    S[:ds, :ds] = blocks[0] if ds else S[:ds, :ds]
    S[ds:, ds:] = blocks[-1]
    Si = np.linalg.inv(S)
    g = problem.g
    new = HyperbolicMapProblem(
        ds, du,
        S[:ds, :ds] @ problem.T_s @ Si[:ds, :ds] if ds else np.zeros((0, 0)),
        S[ds:, ds:] @ problem.T_u @ Si[ds:, ds:],
        lambda y: S @ g(Si @ y),
        problem.a, problem.neighborhood_radius * float(np.linalg.norm(S, 2)),
        problem.name, problem.context,
    )
    return new, S


# ---------------------------------------------------------------------------
# the fixed-point map


class _GCache:
    def __init__(self, g):
        self.g = g
        self.store: dict = {}
        self.calls = 0

    def __call__(self, x: np.ndarray) -> np.ndarray:
        key = x.tobytes()
        hit = self.store.get(key)
        if hit is None:
            self.calls += 1
            hit = np.asarray(self.g(x), dtype=float)
            if len(self.store) > 4096:
                self.store.clear()
            self.store[key] = hit
        return hit


def _stable_terms(problem: HyperbolicMapProblem, truncation_tol: float) -> int:
    if problem.dim_s == 0 or problem.rho_s == 0.0:
        return 1
    ratio = problem.rho_s / problem.a
    return max(1, int(math.ceil(math.log(truncation_tol) / math.log(ratio))))


def upsilon_map(problem: HyperbolicMapProblem, seq: np.ndarray, truncation_tol: float = 1e-14,
                point_floor: float = 0.0, g=None) -> np.ndarray:
    """Nonlinear part of the orbit equations for ``seq`` (rows ``x_{-depth..0}``).

    Returns ``y`` with ``y_i^s = sum_{j>=0} T_s^j g^s(x_{i-j-1})`` and
    ``y_i^u = -sum_{j=1}^{-i} T_u^{-j} g^u(x_{i+j-1})``.  Stable sums stop
    after ``(rho(T_s)/a)^j < truncation_tol`` or at points with norm below
    ``point_floor``.
    """
    X = np.asarray(seq, dtype=float)
    depth = X.shape[0] - 1
    ds = problem.dim_s
    g = g if g is not None else problem.g
    if _weighted_norm(X, problem.a) > problem.neighborhood_radius:
        raise NonContraction("sequence left the neighborhood of the fixed point", float("inf"))
    G = np.array([g(x) for x in X]) if X.size else X
    Y = np.zeros_like(X)
    # unstable part, recursively from i = 0 downwards: y_{i-1} = T_u^{-1}(y_i - g^u(x_{i-1}))
    acc = np.zeros(problem.dim_u)
    Tu_inv = problem._Tu_inv
    for k in range(depth, -1, -1):
        Y[k, ds:] = acc
        if k > 0:
            acc = Tu_inv @ (acc - G[k - 1, ds:])
    if ds == 0:
        return Y
    jmax = _stable_terms(problem, truncation_tol)
    # extension below -depth
    ext = []
    xu = X[0, ds:].copy()
    for _ in range(jmax):
        xu = Tu_inv @ xu
        x = np.concatenate([np.zeros(ds), xu])
        if np.linalg.norm(x) < point_floor:
            break
        ext.append(x)
    Gext = np.array([g(x) for x in ext]) if ext else np.zeros((0, problem.dim))
    # s_i = T_s s_{i-1} + g^s(x_{i-1}), started from the truncated tail
    s = np.zeros(ds)
    for m in range(len(ext) - 1, -1, -1):
        s = problem.T_s @ s + Gext[m, :ds]
    Y[0, :ds] = s if depth >= 0 else s
    for k in range(1, depth + 1):
        Y[k, :ds] = problem.T_s @ Y[k - 1, :ds] + G[k - 1, :ds]
    return Y


def _linear_part(problem: HyperbolicMapProblem, v: np.ndarray, depth: int) -> np.ndarray:
    X = np.zeros((depth + 1, problem.dim))
    xu = np.asarray(v, dtype=float).copy()
    for k in range(depth, -1, -1):
        X[k, problem.dim_s :] = xu
        xu = problem._Tu_inv @ xu
    return X


def orbit_residual(problem: HyperbolicMapProblem, X: np.ndarray, g=None) -> float:
    g = g if g is not None else problem.g
    if X.shape[0] < 2:
        return 0.0
    r = [np.linalg.norm(X[k] - (problem.linear(X[k - 1]) + g(X[k - 1]))) for k in range(1, X.shape[0])]
    return float(max(r))


def solve_ancient_orbit(problem: HyperbolicMapProblem, v, depth: int = 30, damping: float = 0.5,
                        tol: float = 1e-13, max_iter: int = 2000, seed: np.ndarray | None = None,
                        truncation_tol: float = 1e-14, point_floor: float = 0.0) -> AncientOrbit:
    """Backward orbit through ``x_0^u = v`` decaying like ``a^i``.

    ``damping`` is the weight of the new iterate; the per-iteration
    contraction factor is monitored and a :class:`NonContraction` error is
    raised when it stays at or above one.
    """
    v = np.atleast_1d(np.asarray(v, dtype=float))
    if v.shape != (problem.dim_u,):
        raise ValueError(f"v must have {problem.dim_u} components")
    if not 0 < damping <= 1:
        raise ValueError("damping must lie in (0, 1]")
    g = _GCache(problem.g)
    base = _linear_part(problem, v, depth)
    X = base.copy() if seed is None else np.array(seed, dtype=float)
    if X.shape != base.shape:
        raise ValueError("seed has the wrong shape")
    prev = None
    q = 0.0
    bad = 0
    it = 0
    for it in range(1, max_iter + 1):
        Y = base + upsilon_map(problem, X, truncation_tol, point_floor, g)
        X_new = (1 - damping) * X + damping * Y
        step = _weighted_norm(X_new - X, problem.a)
        if prev is not None and prev > 0:
            q = step / prev
            bad = bad + 1 if q >= 1.0 else 0
            if bad >= 5:
                raise NonContraction(f"fixed-point iteration not contracting (factor {q:.3g})", q)
        X, prev = X_new, step
        if step <= tol * max(1.0, _weighted_norm(X, problem.a)):
            break
    else:
        raise NonContraction(f"no convergence in {max_iter} iterations (factor {q:.3g})", q)
    res = orbit_residual(problem, X, g)
    return AncientOrbit(depth, X, _weighted_norm(X, problem.a), v, res, q, it, problem.a)


def unstable_graph(problem: HyperbolicMapProblem, samples, **kw) -> tuple[list, list]:
    """Orbit endpoints ``x_0`` for each sample ``v`` and the tangency defects
    ``|pi^s(x_0)| / |v|``."""
    pairs, defects = [], []
    for v in samples:
        orbit = solve_ancient_orbit(problem, v, **kw)
        x0 = orbit.x0
        pairs.append((np.atleast_1d(np.asarray(v, dtype=float)), x0))
        nv = float(np.linalg.norm(v))
        defects.append(float(np.linalg.norm(x0[: problem.dim_s]) / nv) if nv > 0 else 0.0)
    return pairs, defects


def fit_graph_coefficient(pairs) -> float:
    """Least-squares ``c`` in ``x^s = c v^2`` for scalar stable/unstable parts."""
    v = np.array([p[0][0] for p in pairs])
    s = np.array([p[1][0] for p in pairs])
    return float(np.dot(v**2, s) / np.dot(v**2, v**2))


# ---------------------------------------------------------------------------
# toy gallery


def _toy_quadratic():
    return HyperbolicMapProblem(1, 1, [[0.5]], [[2.0]], lambda z: np.array([z[1] ** 2, 0.0]),
                                math.sqrt(2.0), 1.0, "quadratic")


def _toy_linear():
    return HyperbolicMapProblem(1, 1, [[0.5]], [[2.0]], lambda z: np.zeros(2), math.sqrt(2.0), 1.0, "linear")


def _toy_coupled():
    # two stable directions, a non-normal stable block and a nonlinearity in the unstable row
    Ts = [[0.3, 0.4], [0.0, 0.5]]
    return HyperbolicMapProblem(
        2, 1, Ts, [[3.0]],
        lambda z: np.array([z[2] ** 2, z[0] * z[2], z[0] * z[2] + z[2] ** 3]),
        math.sqrt(3.0), 1.0, "coupled",
    )


TOY_MAPS = {"quadratic": _toy_quadratic, "linear": _toy_linear, "coupled": _toy_coupled}


def toy_problem(name: str) -> HyperbolicMapProblem:
    try:
        return TOY_MAPS[name]()
    except KeyError:
        raise ValueError(f"unknown toy map {name!r}; choose from {sorted(TOY_MAPS)}") from None


# ---------------------------------------------------------------------------
# truncated flow maps


class FlowMapTruncation:
    """Galerkin truncation of the time-``dt`` reduced flow map on eigen-modes.

    The background's own discrete drift over ``dt`` is subtracted so that
    ``g(0) = 0`` holds exactly.
    """

    def __init__(self, model, pairs, dt: float):
        self.model = model
        self.pairs = list(pairs)
        self.dt = float(dt)
        self.lams = np.array([p.lam for p in self.pairs])
        self.basis = np.column_stack([model.to_vec(p.tensor.as_array()) for p in self.pairs])
        self.Mw = model.problem.M
        gram = self.basis.T @ (self.Mw[:, None] * self.basis)
        self._gram_inv = np.linalg.inv(gram)
        self._drift = None
        self.evals = 0

    def lift(self, c: np.ndarray) -> np.ndarray:
        return self.basis @ c

    def project(self, eta: np.ndarray) -> np.ndarray:
        return self._gram_inv @ (self.basis.T @ (self.Mw * eta))

    def norm(self, eta: np.ndarray) -> float:
        return math.sqrt(float(eta @ (self.Mw * eta)))

    def step(self, eta: np.ndarray, linear: bool = False) -> np.ndarray:
        from .flow import flow_map
        self.evals += 1
        return flow_map(self.model, eta, self.dt, linear=linear)

    def g_modal(self, c: np.ndarray) -> np.ndarray:
        # on the eigen-span the linearized map is exactly exp(lam dt)
        if self._drift is None:
            self._drift = self.project(self.step(np.zeros(self.basis.shape[0])))
        return self.project(self.step(self.lift(c))) - np.exp(self.lams * self.dt) * c - self._drift


def truncate_flow_map(model, eigenpairs, dims: int, dt: float, a: float | None = None,
                      neighborhood_radius: float = 0.05) -> HyperbolicMapProblem:
    """Hyperbolic map on the top ``dims`` eigen-modes of the reduced flow.

    ``T = diag(exp(lam_j dt))``; ``g`` projects the difference between the
    nonlinear and the linearized time-``dt`` maps onto the modes (the
    linearized map is ``exp(lam_j dt)`` on each mode).  Without
    an explicit ``a`` the split is placed at the largest multiplier gap.
    """
    pairs = sorted(eigenpairs, key=lambda p: -p.lam)
    if dims < 2 or dims > len(pairs):
        raise ValueError(f"dims must lie in [2, {len(pairs)}]")
    pairs = pairs[:dims]
    mult = np.exp(np.array([p.lam for p in pairs]) * dt)
    if a is None:
        logs = np.log(mult)
        gaps = logs[:-1] - logs[1:]
        k = int(np.argmax(gaps))
        if gaps[k] <= 0:
            raise ValueError("no spectral gap among the selected modes")
        a = math.exp(0.5 * (logs[k] + logs[k + 1]))
    unstable = mult > a
    if not np.any(unstable) or np.all(unstable):
        raise ValueError(f"no spectral gap at a = {a:g}")
    if np.any(np.abs(mult - a) < 1e-12):
        raise ValueError(f"a multiplier coincides with a = {a:g}")
    order = list(np.flatnonzero(~unstable)) + list(np.flatnonzero(unstable))
    pairs = [pairs[i] for i in order]
    ds = int((~unstable).sum())
    du = int(unstable.sum())
    trunc = FlowMapTruncation(model, pairs, dt)
    lam = trunc.lams
    return HyperbolicMapProblem(
        ds, du, np.diag(np.exp(lam[:ds] * dt)), np.diag(np.exp(lam[ds:] * dt)),
        trunc.g_modal, a, neighborhood_radius, "flow-map", trunc,
    )


def shadowing_defects(problem: HyperbolicMapProblem, orbit: AncientOrbit) -> np.ndarray:
    """Relative defects ``|Phi(lift x_{i-1}) - lift x_i| / |lift x_i|`` of the
    full nonlinear flow against the truncated orbit."""
    trunc = problem.context
    if not isinstance(trunc, FlowMapTruncation):
        raise ValueError("shadowing needs a truncated flow map")
    out = []
    for k in range(1, orbit.points.shape[0]):
        pred = trunc.step(trunc.lift(orbit.points[k - 1]))
        target = trunc.lift(orbit.points[k])
        out.append(trunc.norm(pred - target) / trunc.norm(target))
    return np.array(out)


def orbit_report(orbit: AncientOrbit) -> dict:
    return {
        "v": [float(c) for c in orbit.v],
        "points": [[float(c) for c in row] for row in orbit.points],
        "residual": orbit.residual,
        "contraction": orbit.contraction,
        "weighted_norm": orbit.weighted_norm,
        "iterations": orbit.iterations,
        "depth": orbit.depth,
    }
