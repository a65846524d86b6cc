"""Reduced Ricci-DeTurck flow for doubly warped products.

The unknowns are ``w0 = log v0`` and ``w_a = log(v_a / sqrt(n_a - 1))`` on a
fixed x-grid, with ``d/ds = exp(-w0) d/dx``.  Against a Ricci-flat
background ``W`` (with ``W0 = 0``) the DeTurck scalar is

    f = w0_s - sum_a n_a w_a,s + exp(w0) sum_a n_a exp(2 (W_a - w_a)) W_a,x

and the system reads

    w0_t  = f_s + sum_a n_a (w_a,ss + w_a,s^2)
    w_a,t = w_a,ss + (f + sum_b n_b w_b,s) w_a,s - exp(-2 w_a).

Its linearization at the background in ``p = w - W`` is ``p_t = D p``, where
``D`` is the operator of :mod:`warpflow.spectral` (with ``eta = 2 p``).

The semi-discretization splits the right-hand side as
``D_h p + [R(p) - J p]``: ``D_h`` is the discrete operator used for the
spectrum, ``R`` evaluates the system above with exact background
derivatives and centred differences of ``p``, and ``J`` is the Jacobian of
``R`` at ``p = 0``.  The bracket is quadratic in ``p``.
"""

from __future__ import annotations

import json
import math
import os
from dataclasses import dataclass, field

import numpy as np
import scipy.sparse as sp
from scipy.linalg import eig_banded

from .geometry import TensorPerturbation, WarpedProfile
from .spectral import (
    EigenPair,
    OperatorCoefficients,
    SpectralProblem,
    _w_derivatives,
    assemble_ode_operator,
    discretize,
    weighted_inner_product,
)

__all__ = [
    "FlowState",
    "FlowOptions",
    "FlowTrajectory",
    "FlowModel",
    "PositivityError",
    "perturb_metric",
    "perturbation_tensor",
    "flow_rhs",
    "evolve",
    "linearized_evolve",
    "count_sign_changes",
    "sturm_zero_count",
    "growth_rate",
    "write_trajectory",
    "flow_map",
    "linear_window",
]

_CS_STEP = 1e-20


class PositivityError(ValueError):
    def __init__(self, x: float, component: str):
        super().__init__(f"perturbed metric not positive at x = {x:.6g} ({component})")
        self.x = x
        self.component = component


@dataclass(frozen=True)
class FlowState:
    t: float
    grid: np.ndarray
    w0: np.ndarray
    w1: np.ndarray
    w2: np.ndarray
    background: WarpedProfile | None = field(default=None, repr=False, compare=False)
    provenance: dict = field(default_factory=dict, compare=False)

    def __post_init__(self):
        for name in ("w0", "w1", "w2"):
            arr = np.asarray(getattr(self, name), dtype=float)
            if arr.shape != self.grid.shape:
                raise ValueError(f"{name} does not match the grid")
            if not np.all(np.isfinite(arr)):
                raise ValueError(f"{name} has non-finite entries")
            object.__setattr__(self, name, arr)

    def as_array(self) -> np.ndarray:
        return np.vstack([self.w0, self.w1, self.w2])

    @property
    def v0(self) -> np.ndarray:
        return np.exp(self.w0)


@dataclass
class FlowOptions:
    cfl: float = 0.2                # dt <= cfl * dx^2
    stability: float = 2.0          # dt <= stability / |most negative eigenvalue|
    dt: float | None = None
    snapshot_dt: float = 0.5
    blowup: float = 2.0             # abort when max |w - W| exceeds this
    tol_band: float | None = None
    max_steps: int = 10_000_000


@dataclass
class FlowTrajectory:
    times: list
    states: list
    diagnostics: list
    status: str = "completed"
    message: str = ""
    dt: float = float("nan")
    tol_band: float = float("nan")

    @property
    def zero_counts(self) -> list[int]:
        return [d["zero_count"] for d in self.diagnostics]

    @property
    def norms(self) -> list[float]:
        return [d["norm"] for d in self.diagnostics]

    @property
    def final(self) -> FlowState:
        return self.states[-1]


# ---------------------------------------------------------------------------
# background model


class FlowModel:
    """Precomputed background data and linear operators for one profile."""

    def __init__(self, profile: WarpedProfile, problem: SpectralProblem | None = None):
        self.profile = profile
        coeffs = problem.coeffs if problem is not None else assemble_ode_operator(profile)
        self.problem = problem if problem is not None else discretize(coeffs)
        self.coeffs: OperatorCoefficients = coeffs
        self.grid = coeffs.grid
        self.dx = coeffs.dx
        self.N = coeffs.size
        self.n = np.array([profile.n1, profile.n2], dtype=float)
        (w1x, w1xx, e1), (w2x, w2xx, e2), (v1, v2) = _w_derivatives(profile)
        self.Wx = np.vstack([w1x, w2x])
        self.Wxx = np.vstack([w1xx, w2xx])
        self.eW = np.vstack([e1, e2])                        # exp(-2 W_a)
        self.W = np.vstack([
            np.zeros_like(v1),
            np.log(v1 / math.sqrt(profile.n1 - 1)),
            np.log(v2 / math.sqrt(profile.n2 - 1)),
        ])
        self.D = sp.diags(1.0 / self.problem.M) @ self.problem.K
        self.J = self._jacobian()
        self.A = (self.D - self.J).tocsr()
        self.lam_min = self._most_negative()

    # -- nonlinear part ----------------------------------------------------

    def _fd(self, P):
        left = P[:, :1]
        right = -P[:, -1:]
        Pe = np.concatenate([left, P, right], axis=1)
        Px = (Pe[:, 2:] - Pe[:, :-2]) / (2 * self.dx)
        Pxx = (Pe[:, 2:] - 2 * P + Pe[:, :-2]) / self.dx**2
        return Px, Pxx

    def slick_rhs(self, P: np.ndarray) -> np.ndarray:
        """The reduced system at ``w = W + P``; accepts complex ``P``."""
        Px, Pxx = self._fd(P)
        n = self.n[:, None]
        p0, p0x, p0xx = P[0], Px[0], Pxx[0]
        u = np.exp(-p0)
        wx = self.Wx + Px[1:]
        wxx = self.Wxx + Pxx[1:]
        E = np.exp(-2 * P[1:])
        ws = u * wx
        wss = u**2 * (wxx - p0x * wx)
        drag = (n * E * self.Wx).sum(axis=0)
        f = u * p0x - (n * ws).sum(axis=0) + drag / u
        fx = (
            u * (p0xx - p0x**2)
            - (n * u * (wxx - p0x * wx)).sum(axis=0)
            + (p0x * drag - 2 * (n * Px[1:] * E * self.Wx).sum(axis=0)
               + (n * E * self.Wxx).sum(axis=0)) / u
        )
        out = np.empty_like(P)
        out[0] = u * fx + (n * (wss + ws**2)).sum(axis=0)
        adv = f + (n * ws).sum(axis=0)
        out[1:] = wss + adv * ws - self.eW * E
        return out

    def _jacobian(self) -> sp.csr_matrix:
        N = self.N
        rows, cols, vals = [], [], []
        m = np.arange(N)
        for c in range(3):
            for r in range(3):
                P = np.zeros((3, N), dtype=complex)
                P[c, r::3] = 1j * _CS_STEP
                col = self.slick_rhs(P).imag / _CS_STEP
                delta = (r - m) % 3
                k = m + np.where(delta == 2, -1, delta)
                ok = (k >= 0) & (k < N)
                for d in range(3):
                    rows.append(3 * m[ok] + d)
                    cols.append(3 * k[ok] + c)
                    vals.append(col[d, ok])
        J = sp.csr_matrix(
            (np.concatenate(vals), (np.concatenate(rows), np.concatenate(cols))), shape=(3 * N, 3 * N)
        )
        J.eliminate_zeros()
        return J

    def _most_negative(self) -> float:
        n = self.problem.M.size
        band = self.problem.standard_band()
        return float(eig_banded(band, lower=False, eigvals_only=True, select="i",
                                select_range=(0, 0), check_finite=False)[0])

    # -- vector helpers ----------------------------------------------------

    @staticmethod
    def to_vec(P: np.ndarray) -> np.ndarray:
        return np.ascontiguousarray(P.T).reshape(-1)

    def to_fields(self, y: np.ndarray) -> np.ndarray:
        return y.reshape(self.N, 3).T

    def rhs_vec(self, y: np.ndarray) -> np.ndarray:
        P = self.to_fields(y)
        return self.A @ y + self.to_vec(self.slick_rhs(P))

    def linear_rhs_vec(self, y: np.ndarray) -> np.ndarray:
        return self.D @ y

    def stable_dt(self, opts: FlowOptions) -> float:
        if opts.dt is not None:
            return float(opts.dt)
        return min(opts.cfl * self.dx**2, opts.stability / abs(self.lam_min))

    def perturbation(self, state: FlowState) -> np.ndarray:
        return state.as_array() - self.W


_MODELS: dict = {}


def model_for(profile: WarpedProfile) -> FlowModel:
    key = id(profile)
    hit = _MODELS.get(key)
    if hit is not None and hit.profile is profile:
        return hit
    model = FlowModel(profile)
    if len(_MODELS) > 8:
        _MODELS.clear()
    _MODELS[key] = model
    return model


# ---------------------------------------------------------------------------
# states


def _background_w(profile: WarpedProfile) -> np.ndarray:
    return np.vstack([
        np.log(profile.v0),
        np.log(profile.v1 / math.sqrt(profile.n1 - 1)),
        np.log(profile.v2 / math.sqrt(profile.n2 - 1)),
    ])


def perturb_metric(profile: WarpedProfile, h: TensorPerturbation, eps: float,
                   provenance: dict | None = None) -> FlowState:
    """State of ``g + eps h`` with ``h`` relative to ``g`` componentwise.

    ``w0 = log v0 + log(1 + eps eta0)/2`` and
    ``w_a = log(v_a / sqrt(n_a - 1)) + log(1 + eps eta_a)/2``.
    """
    if not np.array_equal(profile.grid, h.grid):
        raise ValueError("perturbation and profile must share a grid")
    factors = 1.0 + eps * h.as_array()
    for c in range(3):
        bad = np.flatnonzero(factors[c] <= 0)
        if bad.size:
            raise PositivityError(float(profile.grid[bad[0]]), f"eta{c}")
    w = _background_w(profile) + 0.5 * np.log(factors)
    prov = {"eps": float(eps)}
    prov.update(provenance or {})
    return FlowState(0.0, profile.grid, w[0], w[1], w[2], background=profile, provenance=prov)


def perturbation_tensor(state: FlowState, profile: WarpedProfile | None = None) -> TensorPerturbation:
    """Inverse of :func:`perturb_metric` with ``eps = 1``."""
    profile = profile if profile is not None else state.background
    P = state.as_array() - _background_w(profile)
    return TensorPerturbation.from_array(state.grid, np.expm1(2 * P))


def flow_rhs(state: FlowState, model: FlowModel | None = None) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    """Time derivatives of ``(w0, w1, w2)`` from the centred-difference system."""
    model = model if model is not None else model_for(state.background)
    out = model.slick_rhs(model.perturbation(state))
    return out[0], out[1], out[2]


# ---------------------------------------------------------------------------
# zero counting


def count_sign_changes(values: np.ndarray, tol_band: float = 0.0) -> int:
    """Sign changes of ``values``; entries inside ``[-tol_band, tol_band]`` are ignored."""
    v = np.asarray(values, dtype=float)
    s = np.where(v > tol_band, 1, np.where(v < -tol_band, -1, 0))
    s = s[s != 0]
    return int(np.count_nonzero(s[1:] != s[:-1]))


def sturm_zero_count(state: FlowState, tol_band: float = 1e-8) -> int:
    return count_sign_changes(state.w1 - state.w2, tol_band)


# ---------------------------------------------------------------------------
# time stepping


def _rk4(f, y, dt):
    k1 = f(y)
    k2 = f(y + 0.5 * dt * k1)
    k3 = f(y + 0.5 * dt * k2)
    k4 = f(y + dt * k3)
    return y + dt / 6.0 * (k1 + 2 * k2 + 2 * k3 + k4)


def _diagnostics(model: FlowModel, state: FlowState, tol_band: float, cfl: float) -> dict:
    h = TensorPerturbation.from_array(state.grid, np.expm1(2 * model.perturbation(state)))
    amp = np.einsum("ik,i,ik->k", h.as_array(), model.coeffs.W, h.as_array()) * model.coeffs.weight
    L = model.coeffs.L
    outer = state.grid > 0.9 * L
    norm = math.sqrt(max(weighted_inner_product(h, h, model.coeffs), 0.0))
    outer_norm = math.sqrt(max(float(np.trapezoid(amp[outer], state.grid[outer])), 0.0))
    return {
        "t": state.t,
        "zero_count": sturm_zero_count(state, tol_band),
        "norm": norm,
        "max_abs": float(np.max(np.abs(h.as_array()))),
        "outer_norm": outer_norm,
        "cfl": cfl,
    }


def evolve(state: FlowState, t_final: float, opts: FlowOptions | None = None,
           model: FlowModel | None = None) -> FlowTrajectory:
    """Method-of-lines RK4 evolution with snapshots every ``opts.snapshot_dt``.

    Stops early with status ``"singular"`` when the perturbation exceeds
    ``opts.blowup`` and ``"nan"`` on non-finite values; the last good state
    is kept.
    """
    opts = opts or FlowOptions()
    if t_final <= state.t:
        raise ValueError("t_final must exceed the current time")
    model = model if model is not None else model_for(state.background)
    if state.background is None:
        state = FlowState(state.t, state.grid, state.w0, state.w1, state.w2,
                          background=model.profile, provenance=state.provenance)
    dt_max = model.stable_dt(opts)
    cfl = dt_max * abs(model.lam_min)
    if opts.tol_band is None:
        drift = float(np.max(np.abs(model.slick_rhs(np.zeros((3, model.N))))))
        tol_band = 10.0 * max(drift * max(t_final - state.t, 1.0), 1e-12)
    else:
        tol_band = opts.tol_band
    y = model.to_vec(model.perturbation(state))
    t = state.t
    snaps = np.arange(state.t + opts.snapshot_dt, t_final + 1e-12, opts.snapshot_dt)
    if snaps.size == 0 or snaps[-1] < t_final - 1e-12:
        snaps = np.append(snaps, t_final)
    traj = FlowTrajectory([state.t], [state], [_diagnostics(model, state, tol_band, cfl)],
                          dt=dt_max, tol_band=tol_band)
    steps = 0
    min_dt = dt_max
    for t_next in snaps:
        while t < t_next - 1e-12:
            # stiff coefficients carry factors up to exp(2 max|p|)
            dt = dt_max * math.exp(-2.0 * float(np.max(np.abs(y))))
            nleft = max(1, math.ceil((t_next - t) / dt - 1e-9))
            h = (t_next - t) / nleft
            y_new = _rk4(model.rhs_vec, y, h)
            steps += 1
            if not np.all(np.isfinite(y_new)):
                traj.status, traj.message = "nan", f"non-finite values near t = {t:.6g}"
                return traj
            if np.max(np.abs(y_new)) > opts.blowup:
                traj.status, traj.message = "singular", f"perturbation exceeded {opts.blowup} near t = {t:.6g}"
                return traj
            y = y_new
            t += h
            min_dt = min(min_dt, h)
            if steps > opts.max_steps:
                traj.status, traj.message = "max_steps", "step budget exhausted"
                return traj
        t = float(t_next)
        traj.dt = min_dt
        P = model.to_fields(y) + model.W
        st = FlowState(t, state.grid, P[0], P[1], P[2], background=state.background,
                       provenance=state.provenance)
        traj.times.append(t)
        traj.states.append(st)
        traj.diagnostics.append(_diagnostics(model, st, tol_band, cfl))
    return traj


def linearized_evolve(coeffs: OperatorCoefficients, h0: TensorPerturbation, t_final: float,
                      direction: str = "forward", eigenpairs: list[EigenPair] | None = None,
                      problem: SpectralProblem | None = None, dt: float | None = None,
                      span_tol: float = 1e-8) -> TensorPerturbation:
    """``exp(t D) h0`` forward by RK4, or ``exp(-t D) h0`` on the span of eigenpairs."""
    if t_final < 0:
        raise ValueError("t_final must be non-negative")
    if t_final == 0:
        return h0
    problem = problem if problem is not None else discretize(coeffs)
    if direction == "backward":
        if not eigenpairs:
            raise ValueError("backward evolution needs the eigenpairs spanning h0")
        Mw = problem.M
        u = FlowModel.to_vec(h0.as_array())
        basis = np.column_stack([FlowModel.to_vec(p.tensor.as_array()) for p in eigenpairs])
        gram = basis.T @ (Mw[:, None] * basis)
        c = np.linalg.solve(gram, basis.T @ (Mw * u))
        rest = u - basis @ c
        scale = math.sqrt(float(u @ (Mw * u))) or 1.0
        if math.sqrt(float(rest @ (Mw * rest))) > span_tol * scale:
            raise ValueError("backward evolution refused: h0 is not in the span of the given eigentensors")
        lam = np.array([p.lam for p in eigenpairs])
        out = basis @ (c * np.exp(-lam * t_final))
        return TensorPerturbation.from_array(h0.grid, out.reshape(-1, 3).T)
    if direction != "forward":
        raise ValueError("direction must be 'forward' or 'backward'")
    D = sp.diags(1.0 / problem.M) @ problem.K
    if dt is None:
        band = problem.standard_band()
        lmin = eig_banded(band, lower=False, eigvals_only=True, select="i", select_range=(0, 0),
                          check_finite=False)[0]
        dt = min(0.2 * coeffs.dx**2, 2.5 / abs(lmin))
    nsub = max(1, math.ceil(t_final / dt - 1e-9))
    h = t_final / nsub
    y = FlowModel.to_vec(h0.as_array())
    f = lambda z: D @ z
    for _ in range(nsub):
        y = _rk4(f, y, h)
    return TensorPerturbation.from_array(h0.grid, y.reshape(-1, 3).T)


def growth_rate(traj: FlowTrajectory, window: tuple[float, float] | None = None) -> float:
    """Least-squares slope of ``log(norm)`` against t over the window."""
    t = np.asarray(traj.times, dtype=float)
    nrm = np.asarray(traj.norms, dtype=float)
    if window is not None:
        sel = (t >= window[0] - 1e-12) & (t <= window[1] + 1e-12)
        t, nrm = t[sel], nrm[sel]
    if t.size < 3:
        raise ValueError("growth_rate needs at least three snapshots in the window")
    if np.any(nrm <= 0):
        raise ValueError("non-positive perturbation norm in the window")
    return float(np.polyfit(t, np.log(nrm), 1)[0])


def linear_window(traj: FlowTrajectory, max_rel: float = 0.1) -> tuple[float, float]:
    """Time span over which ``max |eta| <= max_rel`` (relative to the background)."""
    t = [d["t"] for d in traj.diagnostics if d["max_abs"] <= max_rel]
    if not t:
        raise ValueError("trajectory never in the linear regime")
    return float(min(t)), float(max(t))


def write_trajectory(traj: FlowTrajectory, out_dir: str, extra: dict | None = None) -> dict:
    os.makedirs(out_dir, exist_ok=True)
    for i, st in enumerate(traj.states):
        data = np.column_stack([st.grid, st.w0, st.w1, st.w2])
        np.savetxt(os.path.join(out_dir, f"snapshot_{i:04d}.csv"), data, delimiter=",",
                   header="x,w0,w1,w2", comments="", fmt="%.17g")
    try:
        rate = growth_rate(traj, linear_window(traj))
    except ValueError:
        rate = None
    report = {
        "times": [float(t) for t in traj.times],
        "zero_counts": traj.zero_counts,
        "norms": traj.norms,
        "rate_estimate": rate,
        "status": traj.status,
        "message": traj.message,
        "dt": traj.dt,
        "tol_band": traj.tol_band,
    }
    report.update(extra or {})
    with open(os.path.join(out_dir, "trajectory.json"), "w") as fh:
        json.dump(report, fh, indent=2, sort_keys=True)
    return report


def flow_map(model: FlowModel, eta: np.ndarray, t: float, linear: bool = False) -> np.ndarray:
    """Time-``t`` map on interleaved metric perturbations ``eta`` (relative to g).

    Fixed RK4 steps at the linear stability limit so that the nonlinear and
    linear maps share one step sequence.
    """
    dt = model.stable_dt(FlowOptions())
    nsub = max(1, math.ceil(t / dt - 1e-9))
    h = t / nsub
    if linear:
        y = np.asarray(eta, dtype=float)
        for _ in range(nsub):
            y = _rk4(model.linear_rhs_vec, y, h)
        return y
    if np.any(np.asarray(eta) <= -1.0):
        raise PositivityError(float("nan"), "eta")
    y = 0.5 * np.log1p(eta)
    for _ in range(nsub):
        y = _rk4(model.rhs_vec, y, h)
    return np.expm1(2.0 * y)
