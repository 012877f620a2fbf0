"""Independent numerical oracles for the test suite.

These deliberately avoid the package's propagation machinery: the radial
system is integrated directly with a fixed-step RK4 scheme (complex energies
allowed), K is extracted by its own sin/cos matching, and resonance poles
come from a complex-plane root search of the outgoing-wave determinant
det(Y - i diag(q)), which shares its zeros with det(1 - iK(E)) continued
off the real axis.
"""

from __future__ import annotations

import numpy as np


def _w_matrix(problem, rho):
    return problem.w_bare(rho)


_W_CACHE = {}


def _w_samples(problem, n_steps, rho_end):
    """W(rho) at the RK4 half-step points, cached per (problem, grid)."""
    key = (id(problem), n_steps, rho_end)
    if key not in _W_CACHE:
        rhos = np.linspace(problem.rho_start, rho_end, 2 * n_steps + 1)
        _W_CACHE[key] = np.array([_w_matrix(problem, r) for r in rhos])
    return _W_CACHE[key]


def rk4_solution(problem, energy, n_steps=20000, rho_end=None):
    """Direct integration of u'' = (W - E) u from rho_start.

    Returns (F, F') at rho_end for N independent regular solutions started
    with F = 0, F' = I (Dirichlet at rho_start).  Complex E supported.
    """
    n = problem.n_channels
    rho_end = problem.rho_match if rho_end is None else rho_end
    h = (rho_end - problem.rho_start) / n_steps
    dtype = complex if np.iscomplexobj(np.asarray(energy)) else float
    f = np.zeros((n, n), dtype=dtype)
    fp = np.eye(n, dtype=dtype)
    eye = np.eye(n)
    w_all = _w_samples(problem, n_steps, rho_end) - energy * eye

    for i in range(n_steps):
        w0 = w_all[2 * i]
        wm = w_all[2 * i + 1]
        w1 = w_all[2 * i + 2]
        k1f, k1p = fp, w0 @ f
        k2f, k2p = fp + 0.5 * h * k1p, wm @ (f + 0.5 * h * k1f)
        k3f, k3p = fp + 0.5 * h * k2p, wm @ (f + 0.5 * h * k2f)
        k4f, k4p = fp + h * k3p, w1 @ (f + h * k3f)
        f = f + (h / 6.0) * (k1f + 2 * k2f + 2 * k3f + k4f)
        fp = fp + (h / 6.0) * (k1p + 2 * k2p + 2 * k3p + k4p)
        # renormalize columns to tame closed-channel growth
        scale = np.abs(f).max()
        if scale > 1e100:
            f /= scale
            fp /= scale
    return f, fp


def k_matrix_direct(problem, energy, n_steps=20000):
    """K(E) by direct integration and sin/cos matching at rho_match.

    All channels must be open; J = 0 phases.
    """
    thr = np.asarray(problem.thresholds)
    q = np.sqrt(energy - thr)
    f, fp = rk4_solution(problem, energy, n_steps=n_steps)
    rho = problem.rho_match
    s = np.diag(np.sin(q * rho))
    c = np.diag(np.cos(q * rho))
    sp = np.diag(q * np.cos(q * rho))
    cp = np.diag(-q * np.sin(q * rho))
    y = fp @ np.linalg.inv(f)
    # K-hat from (y c - cp) K-hat = (sp - y s)
    k_hat = np.linalg.solve(y @ c - cp, sp - y @ s)
    d = np.diag(np.sqrt(q))
    k = d @ k_hat @ np.linalg.inv(d)
    return 0.5 * (k + k.T)


def siegert_det(problem, energy, n_steps=8000):
    """det(Y(rho_match) - i diag(q)) with outgoing-wave branch of q."""
    thr = np.asarray(problem.thresholds)
    q = np.sqrt(energy - thr + 0j)
    q = np.where(q.real < 0, -q, q)
    f, fp = rk4_solution(problem, energy, n_steps=n_steps)
    y = fp @ np.linalg.inv(f)
    return np.linalg.det(y - 1j * np.diag(q))


def complex_pole(problem, e_guess, gamma_guess, n_steps=8000, tol=1e-12,
                 max_iter=60):
    """Resonance pole E0 - i Gamma/2 by secant iteration on the determinant.

    Seeds from a small complex triangle around the guess; returns
    (E0, Gamma).
    """
    z0 = e_guess - 0.5j * gamma_guess
    z1 = z0 * (1 + 1e-6) - 0.3j * gamma_guess
    f0 = siegert_det(problem, z0, n_steps=n_steps)
    f1 = siegert_det(problem, z1, n_steps=n_steps)
    for _ in range(max_iter):
        if f1 == f0:
            break
        z2 = z1 - f1 * (z1 - z0) / (f1 - f0)
        if not np.isfinite(z2):
            break
        z0, f0 = z1, f1
        z1 = z2
        f1 = siegert_det(problem, z1, n_steps=n_steps)
        if abs(z1 - z0) < tol * max(1.0, abs(z1)):
            break
    return float(z1.real), float(-2.0 * z1.imag)


def pole_scan(problem, e_lo, e_hi, n_e=60, gamma_scale=1e-3, n_steps=4000):
    """Coarse |det| scan on a complex-E grid; returns candidate seeds.

    Local minima of |det| along the line Im E = -gamma_scale/2 seed the
    secant polish; used to count poles in a window.
    """
    es = np.linspace(e_lo, e_hi, n_e)
    vals = np.array(
        [abs(siegert_det(problem, e - 0.5j * gamma_scale, n_steps=n_steps))
         for e in es]
    )
    seeds = []
    for i in range(1, n_e - 1):
        if vals[i] < vals[i - 1] and vals[i] < vals[i + 1]:
            seeds.append(float(es[i]))
    return seeds, es, vals
