"""Adiabatic eigenproblem on the hyperangular (chi, theta) domain.

At fixed hyperradius rho the channel functions and terms solve

    h phi_j = eps_j(rho) phi_j,
    h = -(4 / (rho^2 sin^2 chi)) [d_chi sin^2 chi d_chi
        + (1/sin theta) d_theta sin theta d_theta] + V(rho, chi, theta),

with the volume element sin^2 chi sin theta dchi dtheta.  The weak form is
assembled with quadratic Lagrange elements on a tensor grid; for Coulomb
systems the element boundaries are clustered around the two light-heavy
coalescence points, whose angular size shrinks like 1/rho.

Nonadiabatic coupling tables use centered finite differences of the channel
functions on the rho grid (one-sided at the ends), after the eigenvector
signs are fixed by continuity:

    H_jj'(rho) = < d_rho phi_j | d_rho phi_j' >,
    Q_jj'(rho) = - < phi_j | d_rho phi_j' >.
"""

from __future__ import annotations

import math
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field

import numpy as np
import scipy.sparse as sp
import scipy.sparse.linalg as spla

from .channels import ThreeBodyMasses
from .errors import AssemblyError, EigensolverError, TrackingError, ValidationError
from .fem import Grid1D, TensorGrid, mass_matrix, stiffness_matrix

ORTHO_TOL = 1e-5


@dataclass(frozen=True)
class HyperangularGrid:
    """Node counts of the (chi, theta) tensor grid; element order is 2."""

    n_chi: int = 131
    n_theta: int = 61
    n_quad: int = 4

    def __post_init__(self):
        for name, n in (("n_chi", self.n_chi), ("n_theta", self.n_theta)):
            if n < 3 or n % 2 == 0:
                raise ValidationError(f"{name} must be odd and >= 3, got {n}")


@dataclass(frozen=True)
class ClusterSpec:
    """Node-density model for the coalescence-point clusters.

    Each cluster is a graded well in the node density, 1/(core + |d|) under
    a Gaussian envelope: element sizes grow linearly away from the Coulomb
    cusp, which is what exponential atomic states need.  Extents are in
    units of the atom's length scale 1/m_red; the angular widths scale like
    1/rho and are capped so the density degrades to uniform at small rho.
    """

    extent_n1: float = 9.0
    extent_n2: float = 36.0
    core_frac: float = 0.125  # innermost element size as fraction of decay length
    frac_tight: float = 0.30
    frac_medium: float = 0.10
    frac_theta_tight: float = 0.24
    frac_theta_medium: float = 0.08
    width_cap: float = 1.2


def coulomb_potential(masses: ThreeBodyMasses, rho: float):
    """V(chi, theta) for the three Coulomb pairs at fixed rho.

    Interparticle distances in terms of the mass-weighted coordinates:
    r = rho sin(chi/2)/sqrt(2 mu) (light to heavy-pair center of mass),
    R = rho cos(chi/2)/sqrt(2 M) (heavy-heavy), and the two light-heavy
    separations follow from the heavy positions -c1 R, +c2 R with
    c1 = m2/(m1+m2), c2 = m1/(m1+m2).
    """
    if rho <= 0.0:
        raise AssemblyError(f"rho must be positive, got {rho!r}")
    mu = masses.mu
    mm = masses.mass_heavy_pair
    c1 = masses.m2 / (masses.m1 + masses.m2)
    c2 = masses.m1 / (masses.m1 + masses.m2)
    z12 = masses.z1 * masses.z2
    z1l = masses.z1 * masses.z_light
    z2l = masses.z2 * masses.z_light

    def v(chi, theta):
        r = rho * np.sin(0.5 * chi) / math.sqrt(2.0 * mu)
        rr = rho * np.cos(0.5 * chi) / math.sqrt(2.0 * mm)
        ct = np.cos(theta)
        r1 = np.sqrt(r * r + (c1 * rr) ** 2 + 2.0 * c1 * r * rr * ct)
        r2 = np.sqrt(r * r + (c2 * rr) ** 2 - 2.0 * c2 * r * rr * ct)
        if np.any(rr == 0.0) or np.any(r1 == 0.0) or np.any(r2 == 0.0):
            raise AssemblyError(
                f"quadrature node exactly at a Coulomb singularity (rho={rho})"
            )
        return z12 / rr + z1l / r1 + z2l / r2

    return v


def coalescence_points(masses: ThreeBodyMasses):
    """(chi, theta) of the two light-heavy coalescence points."""
    ratio = math.sqrt(masses.mu / masses.mass_heavy_pair)
    c1 = masses.m2 / (masses.m1 + masses.m2)
    c2 = masses.m1 / (masses.m1 + masses.m2)
    chi1 = 2.0 * math.atan(ratio * c1)
    chi2 = 2.0 * math.atan(ratio * c2)
    return (chi1, math.pi), (chi2, 0.0)


def build_grids(
    masses: ThreeBodyMasses | None,
    rho: float,
    grid: HyperangularGrid,
    cluster: ClusterSpec | None = None,
) -> TensorGrid:
    """Tensor grid for one rho; clustered for Coulomb systems, else uniform."""
    if masses is None or cluster is None:
        return TensorGrid(
            Grid1D.uniform(0.0, math.pi, grid.n_chi),
            Grid1D.uniform(0.0, math.pi, grid.n_theta),
            n_quad=grid.n_quad,
        )
    (chi1, _), (chi2, _) = coalescence_points(masses)
    m_red1 = masses.m1 / (masses.m1 + 1.0)
    m_red2 = masses.m2 / (masses.m2 + 1.0)
    chi_scale = 2.0 * math.sqrt(2.0 * masses.mu) / rho
    rr = rho / math.sqrt(2.0 * masses.mass_heavy_pair)

    def graded(x, center, width, core):
        # normalized 1/(core + |d|) well under a Gaussian envelope
        d = np.abs(x - center)
        raw = np.exp(-0.5 * (d / width) ** 2) / (core + d)
        # closed-form-ish normalization on a fine local grid
        t = np.linspace(-4.0 * width, 4.0 * width, 801)
        norm = np.trapezoid(np.exp(-0.5 * (t / width) ** 2) / (core + np.abs(t)), t)
        return raw / norm

    chi_terms = []
    theta_terms = []
    for chi_c, m_red, cfrac in ((chi1, m_red1, masses.m2 / (masses.m1 + masses.m2)),
                                (chi2, m_red2, masses.m1 / (masses.m1 + masses.m2))):
        theta_c = math.pi if chi_c == chi1 else 0.0
        for n_sq, extent, frac, frac_t in (
            (1.0, cluster.extent_n1, cluster.frac_tight, cluster.frac_theta_tight),
            (4.0, cluster.extent_n2, cluster.frac_medium, cluster.frac_theta_medium),
        ):
            decay_chi = chi_scale * n_sq / m_red
            width = min(chi_scale * extent / m_red, cluster.width_cap)
            chi_terms.append((frac, chi_c, width, cluster.core_frac * decay_chi))
            decay_t = (n_sq / m_red) / max(cfrac * rr * math.cos(0.5 * chi_c), 1e-12)
            width_t = min(decay_t * extent / n_sq, cluster.width_cap)
            theta_terms.append(
                (frac_t, theta_c, width_t, cluster.core_frac * decay_t)
            )

    base_chi = max(0.04, 1.0 - sum(t[0] for t in chi_terms))
    base_theta = max(0.04, 1.0 - sum(t[0] for t in theta_terms))

    def chi_density(x):
        w = np.full_like(x, base_chi / math.pi)
        for frac, c, width, core in chi_terms:
            w = w + frac * graded(x, c, width, core)
        return w

    def theta_density(x):
        w = np.full_like(x, base_theta / math.pi)
        for frac, c, width, core in theta_terms:
            w = w + frac * graded(x, c, width, core)
        return w

    return TensorGrid(
        Grid1D.from_density(0.0, math.pi, grid.n_chi, chi_density),
        Grid1D.from_density(0.0, math.pi, grid.n_theta, theta_density),
        n_quad=grid.n_quad,
    )


def assemble_adiabatic_operator(tensor: TensorGrid, rho: float, potential=None):
    """Weak-form (stiffness-like, mass-like) pair of the adiabatic Hamiltonian.

    Returns sparse (A, B) with A symmetric and B symmetric positive definite;
    potential=None assembles the bare hyperangular kinetic operator.
    """
    if rho <= 0.0:
        raise AssemblyError(f"rho must be positive, got {rho!r}")
    gx, gy, nq = tensor.gx, tensor.gy, tensor.n_quad
    sin2 = lambda x: np.sin(x) ** 2
    sin1 = np.sin
    k_chi = stiffness_matrix(gx, sin2, nq)
    m0_chi = mass_matrix(gx, None, nq)
    m2_chi = mass_matrix(gx, sin2, nq)
    k_th = stiffness_matrix(gy, sin1, nq)
    m_th = mass_matrix(gy, sin1, nq)

    a = (4.0 / rho**2) * (sp.kron(k_chi, m_th) + sp.kron(m0_chi, k_th))
    if potential is not None:
        a = a + tensor.potential_matrix(potential, wx_fn=sin2, wy_fn=sin1)
    b = sp.kron(m2_chi, m_th)
    a = (0.5 * (a + a.T)).tocsc()
    return a, b.tocsc()


def adiabatic_pair(masses: ThreeBodyMasses, rho: float, grid: HyperangularGrid,
                   cluster: ClusterSpec | None = None):
    """Convenience: (stiffness-like, mass-like) pair for a Coulomb system.

    Builds the rho-adapted tensor grid, evaluates the three-pair Coulomb
    potential, and assembles the weak form; returns (A, B, tensor).
    """
    if cluster is None:
        cluster = ClusterSpec()
    tensor = build_grids(masses, rho, grid, cluster)
    a, b = assemble_adiabatic_operator(
        tensor, rho, coulomb_potential(masses, rho)
    )
    return a, b, tensor


def _sigma_estimate(a, b, tensor: TensorGrid, masses, rho) -> float:
    """Safe shift below the lowest eigenvalue, from Rayleigh quotients.

    Trial states: a constant (dominates at small rho where the kinetic term
    freezes localization) and hydrogenic atoms pinned at the coalescence
    points (dominant at large rho).  Rayleigh quotients bound eps_1 from
    above; the margin pushes the shift below it.
    """
    trials = [np.ones(tensor.n_dof)]
    if masses is not None:
        nx, ny = tensor.gx.n_nodes, tensor.gy.n_nodes
        chi = tensor.gx.nodes[:, None]
        theta = tensor.gy.nodes[None, :]
        mu = masses.mu
        mm = masses.mass_heavy_pair
        r = rho * np.sin(0.5 * chi) / math.sqrt(2.0 * mu)
        rr = rho * np.cos(0.5 * chi) / math.sqrt(2.0 * mm)
        for c, m, sgn in (
            (masses.m2 / (masses.m1 + masses.m2), masses.m1, +1.0),
            (masses.m1 / (masses.m1 + masses.m2), masses.m2, -1.0),
        ):
            m_red = m / (m + 1.0)
            dist = np.sqrt(
                r * r + (c * rr) ** 2 + sgn * 2.0 * c * r * rr * np.cos(theta)
            )
            trials.append(np.exp(-m_red * dist).reshape(nx * ny))
    best = np.inf
    for t in trials:
        denom = float(t @ (b @ t))
        if denom > 0.0:
            best = min(best, float(t @ (a @ t)) / denom)
    return best - 0.25 * abs(best) - 1.0 - 1.0 / max(rho, 0.02)


def solve_adiabatic_point(
    tensor: TensorGrid,
    rho: float,
    n_terms: int,
    potential=None,
    masses=None,
    sigma: float | None = None,
):
    """Lowest n_terms eigenpairs at one rho; B-orthonormal, terms ascending."""
    a, b = assemble_adiabatic_operator(tensor, rho, potential)
    if sigma is None:
        sigma = _sigma_estimate(a, b, tensor, masses, rho)
    try:
        vals, vecs = spla.eigsh(
            a, k=n_terms, M=b, sigma=sigma, which="LM",
            ncv=max(4 * n_terms + 1, 25), maxiter=400,
        )
    except spla.ArpackNoConvergence as exc:
        raise EigensolverError(
            f"adiabatic eigensolver stalled at rho={rho!r}",
            rho=rho, iterations=400,
        ) from exc
    order = np.argsort(vals)
    return vals[order], vecs[:, order].T  # (n_terms, n_dof)


@dataclass(frozen=True)
class AdiabaticSolution:
    """Terms and nonadiabatic couplings on a rho grid (basis optional)."""

    rho_grid: np.ndarray
    terms: np.ndarray  # (n_rho, N)
    h_table: np.ndarray | None = None  # (n_rho, N, N)
    q_table: np.ndarray | None = None  # (n_rho, N, N)
    basis: list | None = field(default=None, repr=False)  # [(TensorGrid, vecs)]
    meta: dict = field(default_factory=dict)

    @property
    def n_terms(self) -> int:
        return self.terms.shape[1]

    def thresholds(self) -> np.ndarray:
        """Asymptotic term values, read off at the largest rho point."""
        return self.terms[-1].copy()


def _fd_weights(rho_grid: np.ndarray, k: int):
    """First-derivative weights on the (up to 3-point) stencil around k."""
    n = rho_grid.size
    if n < 2:
        raise ValidationError("need at least 2 rho points for differencing")
    if 0 < k < n - 1:
        hm = rho_grid[k] - rho_grid[k - 1]
        hp = rho_grid[k + 1] - rho_grid[k]
        return (
            (k - 1, k, k + 1),
            (-hp / (hm * (hm + hp)), (hp - hm) / (hm * hp), hm / (hp * (hm + hp))),
        )
    if k == 0:
        h = rho_grid[1] - rho_grid[0]
        return (0, 1), (-1.0 / h, 1.0 / h)
    h = rho_grid[-1] - rho_grid[-2]
    return (n - 2, n - 1), (-1.0 / h, 1.0 / h)


def _quad_values(tensor: TensorGrid, vecs: np.ndarray):
    px, _, py, _ = tensor.quad_points()
    return tensor.evaluate(vecs, px, py)  # (N, nqx, nqy)


def _measure_kernel(tensor: TensorGrid) -> np.ndarray:
    return tensor.weighted_kernel(
        wx_fn=lambda x: np.sin(x) ** 2, wy_fn=np.sin
    )


def fix_signs(solution_points: list) -> list:
    """Enforce sign continuity in rho: maximal overlap with the previous point.

    The first point gets a positive mean value.  Each entry of the list is
    (TensorGrid, vecs); vecs rows are flipped in place.
    """
    tensor0, vecs0 = solution_points[0]
    kern0 = _measure_kernel(tensor0)
    vals0 = _quad_values(tensor0, vecs0)
    means = np.einsum("xy,jxy->j", kern0, vals0)
    for j, m in enumerate(means):
        if m < 0.0:
            vecs0[j] *= -1.0
    prev_tensor, prev_vecs = tensor0, vecs0
    for tensor, vecs in solution_points[1:]:
        kern = _measure_kernel(tensor)
        px, _, py, _ = tensor.quad_points()
        here = _quad_values(tensor, vecs)
        prev = prev_tensor.evaluate(prev_vecs, px, py)
        ov = np.einsum("xy,jxy,jxy->j", kern, prev, here)
        for j, o in enumerate(ov):
            if o < 0.0:
                vecs[j] *= -1.0
        prev_tensor, prev_vecs = tensor, vecs
    return solution_points


def _solve_one(args):
    masses, rho, grid, cluster, n_terms, mode = args
    if mode == "coulomb":
        tensor = build_grids(masses, rho, grid, cluster)
        potential = coulomb_potential(masses, rho)
    else:  # bare hyperangular operator (potential-free test mode)
        tensor = build_grids(None, rho, grid, None)
        potential = None
    vals, vecs = solve_adiabatic_point(
        tensor, rho, n_terms, potential=potential, masses=masses
    )
    return tensor, vals, vecs


def solve_terms(
    masses: ThreeBodyMasses | None,
    grid: HyperangularGrid,
    rho_grid,
    n_terms: int,
    cluster: ClusterSpec | None = None,
    mode: str = "coulomb",
    keep_basis: bool = True,
    n_workers: int = 1,
) -> AdiabaticSolution:
    """Adiabatic terms (and basis) at every rho point, sign-continuous.

    Independent rho points may be dispatched to worker processes; the sign
    fixing runs afterwards as a sequential pass.
    """
    rho_grid = np.asarray(rho_grid, dtype=float)
    if np.any(np.diff(rho_grid) <= 0) or np.any(rho_grid <= 0):
        raise ValidationError("rho grid must be positive and strictly increasing")
    if mode == "coulomb" and cluster is None:
        cluster = ClusterSpec()
    jobs = [(masses, rho, grid, cluster, n_terms, mode) for rho in rho_grid]
    if n_workers > 1:
        with ProcessPoolExecutor(max_workers=n_workers) as pool:
            results = list(pool.map(_solve_one, jobs, chunksize=1))
    else:
        results = [_solve_one(j) for j in jobs]
    terms = np.array([vals for _, vals, _ in results])
    points = fix_signs([[tensor, vecs] for tensor, _, vecs in results])
    meta = {
        "mode": mode,
        "n_chi": grid.n_chi,
        "n_theta": grid.n_theta,
        "n_terms": n_terms,
    }
    if masses is not None:
        meta.update(m1=masses.m1, m2=masses.m2, z1=masses.z1, z2=masses.z2,
                    z_light=masses.z_light)
    return AdiabaticSolution(
        rho_grid=rho_grid,
        terms=terms,
        basis=points if keep_basis else None,
        meta=meta,
    )


def coupling_tables(solution: AdiabaticSolution, overlap_floor: float = 0.5):
    """H and Q tables by rho differencing of the sign-continuous basis.

    H is the Gram matrix of the differenced derivatives (symmetric PSD by
    construction); Q is antisymmetrized after assembly, with the raw defect
    checked against the orthonormality budget.  Raises TrackingError when
    adjacent basis overlaps fall below overlap_floor.
    """
    if solution.basis is None:
        raise ValidationError("solution carries no basis; rerun with keep_basis")
    rho = solution.rho_grid
    if rho.size < 3:
        raise ValidationError("need at least 3 rho points for differencing")
    n = solution.n_terms
    n_rho = rho.size
    h_table = np.empty((n_rho, n, n))
    q_table = np.empty((n_rho, n, n))

    # check tracking quality first: diagonal overlaps of adjacent points
    for k in range(n_rho - 1):
        tensor, vecs = solution.basis[k]
        tn, vn = solution.basis[k + 1]
        kern = _measure_kernel(tensor)
        px, _, py, _ = tensor.quad_points()
        here = _quad_values(tensor, vecs)
        nxt = tn.evaluate(vn, px, py)
        diag = np.einsum("xy,jxy,jxy->j", kern, here, nxt)
        if np.any(np.abs(diag) < overlap_floor):
            j = int(np.argmin(np.abs(diag)))
            raise TrackingError(
                f"basis continuity lost between rho={rho[k]:.6g} and "
                f"rho={rho[k+1]:.6g} (term {j + 1}, overlap {diag[j]:.3f}); "
                "refine the rho grid near this point"
            )

    for k in range(n_rho):
        idx, wts = _fd_weights(rho, k)
        tensor, vecs = solution.basis[k]
        kern = _measure_kernel(tensor)
        px, _, py, _ = tensor.quad_points()
        here = _quad_values(tensor, vecs)
        dphi = np.zeros_like(here)
        for i, w in zip(idx, wts):
            ti, vi = solution.basis[i]
            vals = here if i == k else ti.evaluate(vi, px, py)
            dphi += w * vals
        h_table[k] = np.einsum("xy,jxy,Jxy->jJ", kern, dphi, dphi)
        q_raw = -np.einsum("xy,jxy,Jxy->jJ", kern, here, dphi)
        q_table[k] = 0.5 * (q_raw - q_raw.T)
    return h_table, q_table


def solve_with_couplings(
    masses,
    grid,
    rho_grid,
    n_terms,
    cluster=None,
    mode="coulomb",
    n_workers=1,
    overlap_floor: float = 0.5,
) -> AdiabaticSolution:
    """Terms plus coupling tables, streamed over rho.

    Solves rho points in chunks (optionally in parallel), keeps only a
    rolling window of three sign-fixed bases, and differences them into the
    H/Q tables; memory stays bounded for long rho grids.
    """
    rho_grid = np.asarray(rho_grid, dtype=float)
    if np.any(np.diff(rho_grid) <= 0) or np.any(rho_grid <= 0):
        raise ValidationError("rho grid must be positive and strictly increasing")
    if rho_grid.size < 3:
        raise ValidationError("need at least 3 rho points for differencing")
    if mode == "coulomb" and cluster is None:
        cluster = ClusterSpec()

    pending = list(rho_grid)[::-1]  # stack, smallest rho on top
    cache: dict[float, tuple] = {}  # speculative chunk results, keyed by rho
    pool = ProcessPoolExecutor(max_workers=n_workers) if n_workers > 1 else None
    chunk = max(1, n_workers) * 3

    def solve_at(rho):
        if rho not in cache:
            todo = [r for r in pending[::-1] if r not in cache][:chunk]
            if rho not in todo:
                todo.insert(0, rho)
            batch = [(masses, r, grid, cluster, n_terms, mode) for r in todo]
            if pool is not None:
                results = list(pool.map(_solve_one, batch, chunksize=1))
            else:
                results = [_solve_one(j) for j in batch]
            for r, (tensor, vals, vecs) in zip(todo, results):
                cache[r] = (tensor, vals, vecs)
        tensor, vals, vecs = cache.pop(rho)
        return tensor, vals, [tensor, vecs]

    accepted_rho: list[float] = []
    accepted_terms: list[np.ndarray] = []
    bases: dict[int, list] = {}  # rolling window of sign-fixed bases
    h_rows: list[np.ndarray] = []
    q_rows: list[np.ndarray] = []
    max_bisect = 7

    def min_overlap(prev, here):
        tensor, vecs = here
        kern = _measure_kernel(tensor)
        px, _, py, _ = tensor.quad_points()
        vals = _quad_values(tensor, vecs)
        pt, pv = prev
        prev_vals = pt.evaluate(pv, px, py)
        ov = np.einsum("xy,jxy,jxy->j", kern, prev_vals, vals)
        return float(np.abs(ov).min())

    def emit_couplings(k):
        idx, wts = _fd_weights(np.asarray(accepted_rho), k)
        h = np.empty((n_terms, n_terms))
        q = np.empty((n_terms, n_terms))
        _couplings_at(bases, k, idx, wts, h[None], q[None], overlap_floor,
                      np.asarray(accepted_rho), row_offset=k)
        h_rows.append(h)
        q_rows.append(q)

    depth = 0
    try:
        while pending:
            rho = pending.pop()
            tensor, vals, basis = solve_at(rho)
            prev = bases.get(len(accepted_rho) - 1)
            _fix_signs_against(prev, basis)
            if prev is not None:
                ov = min_overlap(prev, basis)
                if ov < overlap_floor:
                    if depth >= max_bisect:
                        raise TrackingError(
                            f"basis continuity lost near rho={rho:.6g} "
                            f"(overlap {ov:.3f} after {depth} bisections)"
                        )
                    # bisect: revisit this rho after an inserted midpoint
                    pending.append(rho)
                    pending.append(0.5 * (accepted_rho[-1] + rho))
                    cache[rho] = (basis[0], vals, basis[1])
                    depth += 1
                    continue
            depth = 0
            k = len(accepted_rho)
            accepted_rho.append(rho)
            accepted_terms.append(vals)
            bases[k] = basis
            if k == 1:
                emit_couplings(0)
            if k >= 2:
                emit_couplings(k - 1)
                del bases[k - 2]
        emit_couplings(len(accepted_rho) - 1)
    finally:
        if pool is not None:
            pool.shutdown()

    meta = {
        "mode": mode,
        "n_chi": grid.n_chi,
        "n_theta": grid.n_theta,
        "n_terms": n_terms,
    }
    if masses is not None:
        meta.update(m1=masses.m1, m2=masses.m2, z1=masses.z1, z2=masses.z2,
                    z_light=masses.z_light)
    return AdiabaticSolution(
        rho_grid=np.asarray(accepted_rho),
        terms=np.asarray(accepted_terms),
        h_table=np.asarray(h_rows),
        q_table=np.asarray(q_rows),
        basis=None,
        meta=meta,
    )


def _fix_signs_against(prev, here):
    """Flip rows of here's vectors toward maximal overlap with prev."""
    tensor, vecs = here
    kern = _measure_kernel(tensor)
    px, _, py, _ = tensor.quad_points()
    vals = _quad_values(tensor, vecs)
    if prev is None:
        means = np.einsum("xy,jxy->j", kern, vals)
        for j, m in enumerate(means):
            if m < 0.0:
                vecs[j] *= -1.0
        return
    pt, pv = prev
    prev_vals = pt.evaluate(pv, px, py)
    ov = np.einsum("xy,jxy,jxy->j", kern, prev_vals, vals)
    for j, o in enumerate(ov):
        if o < 0.0:
            vecs[j] *= -1.0


def _couplings_at(window, k, idx, wts, h_table, q_table, overlap_floor, rho,
                  row_offset=0):
    tensor, vecs = window[k]
    kern = _measure_kernel(tensor)
    px, _, py, _ = tensor.quad_points()
    here = _quad_values(tensor, vecs)
    dphi = np.zeros_like(here)
    for i, w in zip(idx, wts):
        if i == k:
            vals = here
        else:
            ti, vi = window[i]
            vals = ti.evaluate(vi, px, py)
            diag = np.einsum("xy,jxy,jxy->j", kern, here, vals)
            if np.any(np.abs(diag) < overlap_floor):
                j = int(np.argmin(np.abs(diag)))
                raise TrackingError(
                    f"basis continuity lost between rho={rho[k]:.6g} and "
                    f"rho={rho[i]:.6g} (term {j + 1}, overlap {diag[j]:.3f}); "
                    "refine the rho grid near this point"
                )
        dphi += w * vals
    h_table[k - row_offset] = np.einsum("xy,jxy,Jxy->jJ", kern, dphi, dphi)
    q_raw = -np.einsum("xy,jxy,Jxy->jJ", kern, here, dphi)
    q_table[k - row_offset] = 0.5 * (q_raw - q_raw.T)


def orthonormality_defect(solution: AdiabaticSolution, k: int) -> float:
    """Max |<phi_i|phi_j> - delta_ij| at rho point k, by quadrature."""
    tensor, vecs = solution.basis[k]
    kern = _measure_kernel(tensor)
    vals = _quad_values(tensor, vecs)
    gram = np.einsum("xy,jxy,Jxy->jJ", kern, vals, vals)
    return float(np.abs(gram - np.eye(solution.n_terms)).max())


def geometric_rho_grid(rho_min: float, rho_max: float, n: int) -> np.ndarray:
    return np.geomspace(rho_min, rho_max, n)


def refine_rho_grid(rho_grid: np.ndarray, terms: np.ndarray, n_extra: int):
    """Add n_extra points where the terms vary fastest (gradient-adapted).

    Extra points are midpoints of the intervals with the largest total term
    variation; returns the merged ascending grid.
    """
    if n_extra <= 0:
        return np.asarray(rho_grid, dtype=float)
    var = np.abs(np.diff(terms, axis=0)).sum(axis=1)
    order = np.argsort(var)[::-1][:n_extra]
    mids = 0.5 * (rho_grid[order] + rho_grid[order + 1])
    return np.unique(np.concatenate([rho_grid, mids]))
