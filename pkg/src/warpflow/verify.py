"""Fast invariant checks behind ``warpflow verify``."""

from __future__ import annotations

import math

import numpy as np


def _check(name, passed, detail, tolerance):
    return {"name": name, "passed": bool(passed), "detail": detail, "tolerance": tolerance}


def run_checks() -> list[dict]:
    from .bohm import BohmOptions, cone_fit, cone_profile, constraint_residual, default_grid, \
        integrate_bohm, series_start
    from .geometry import ricci_arrays
    from .manifold import fit_graph_coefficient, toy_problem, unstable_graph
    from .spectral import assemble_ode_operator, compute_spectrum, cone_matrix, discretize, frobenius_data

    out = []
    worst = 0.0
    grid = default_grid(10.0, 64)
    for n1 in range(2, 7):
        for n2 in range(2, 7):
            worst = max(worst, float(np.max(np.abs(ricci_arrays(cone_profile(n1, n2, grid))))))
    out.append(_check("cone Ricci-flat", worst <= 1e-12, f"max |Rc| = {worst:.2e}", 1e-12))

    err = 0.0
    for n1, n2, c in [(2, 2, 1.0), (2, 3, 1.0), (3, 2, 0.5), (4, 3, 2.0), (3, 5, 1.5)]:
        _, origin = series_start(BohmOptions(n1=n1, n2=n2, c=c))
        b2 = (n2 - 1) / (2 * c * (n1 + 1))
        a3 = -n2 * b2 / (3 * n1 * c)
        err = max(err, abs(origin["v2_even"][1] - b2), abs(origin["v1_odd"][1] - a3))
    out.append(_check("series coefficients", err <= 1e-12, f"max error {err:.2e}", 1e-12))

    err = 0.0
    for n1 in range(2, 7):
        for n2 in range(2, 7):
            n = n1 + n2
            cm = cone_matrix(n1, n2)
            err = max(err, float(np.max(np.abs(np.sort(cm.eigenvalues) - np.sort([0, -2 * (n + 1), 2 * (n - 1)])))),
                      float(np.max(np.abs(cm.C @ np.ones(3)))))
    out.append(_check("cone matrix spectrum", err <= 1e-10, f"max error {err:.2e}", 1e-10))

    fd = frobenius_data(2)
    ok = sorted(fd.exponents) == sorted([2.0, -3.0, 0.0, 0.0, -1.0, -1.0]) and len(fd.discrepancies) == 2
    out.append(_check("Frobenius exponents", ok, f"exponents {list(fd.exponents)}", 0.0))

    prof = integrate_bohm(BohmOptions(n1=2, n2=2, L=200.0, n_grid=2048))
    res = float(np.max(constraint_residual(prof)))
    fit = cone_fit(prof)
    out.append(_check("Böhm (2,2) constraint", res <= 1e-6, f"max residual {res:.2e}", 1e-6))
    out.append(_check("Böhm (2,2) cone slopes", max(fit.rel_err1, fit.rel_err2) <= 0.01,
                      f"relative errors {fit.rel_err1:.2e}, {fit.rel_err2:.2e}", 0.01))

    coeffs = assemble_ode_operator(prof)
    WB = coeffs.WB()
    asym = float(np.max(np.abs(WB - np.transpose(WB, (0, 2, 1)))) / max(1.0, np.max(np.abs(WB))))
    out.append(_check("W B symmetric", asym <= 1e-12, f"relative asymmetry {asym:.2e}", 1e-12))

    pairs = compute_spectrum(discretize(coeffs), 4)
    npos = sum(p.lam > 0 for p in pairs)
    out.append(_check("positive eigenvalues", npos >= 3,
                      f"{npos} positive: " + ", ".join(f"{p.lam:.6g}" for p in pairs if p.lam > 0), 3))

    toy = toy_problem("quadratic")
    graph, _ = unstable_graph(toy, [0.1, -0.1, 0.05, -0.05])
    c = fit_graph_coefficient(graph)
    out.append(_check("toy unstable graph", abs(c - 2 / 7) <= 1e-4, f"c = {c:.10f}", 1e-4))
    return out
