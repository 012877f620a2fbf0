"""Coupled radial equations: scattering K-matrices and box eigenvalues.

The truncated N-channel radial system

    [-d2/drho2 + eps_j(rho) - E + 15/(4 rho^2)] f_j
      + sum_j' [H_jj' f_j' + Q_jj' f_j'' + d/drho (Q_jj' f_j')] = 0

is brought to symmetric Schroedinger form u'' = (W(rho) - E) u by the
orthogonal gauge S' = Q S, f = S u, which folds the antisymmetric
first-derivative coupling into the propagation matrix

    W = S^T [diag(eps) + H + Q^2 + 15/(4 rho^2)] S.

Both solvers share one discretization: a symmetric Numerov-quality
three-point pencil A0 u = E A1 u on a piecewise-uniform grid (steps halve
toward small rho, with the low-order join rows confined to the classically
forbidden region).  The scattering solve propagates the matrix ratio
P_k = u_{k+1} u_k^{-1} of the same pencil rows (stable in closed channels)
and matches to the channel asymptotics

    f_j ~ delta_ij sin(q_j rho - pi J/2) + (q_i/q_j)^(1/2) K_ij cos(...),

with decaying exponentials in closed channels; the auxiliary box problem
diagonalizes the pencil with Dirichlet ends.  Sharing the stencil keeps the
box spectrum and the K(E) pole structure consistent far below the
discretization error of either alone.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np
import scipy.sparse as sp
import scipy.sparse.linalg as spla
from scipy.interpolate import CubicSpline
from scipy.linalg import expm

from .algebra import KMatrix
from .errors import (
    ClosedChannelError,
    EigensolverError,
    MatchingQualityError,
    NoOpenChannelError,
    ValidationError,
)

THRESHOLD_GUARD = 1e-12
ASYMMETRY_LIMIT = 1e-4


@dataclass(frozen=True)
class RadialProblem:
    """Channel potentials/couplings and boundary data for the radial system.

    eps, h_mat, q_mat are callables rho -> arrays ((N,), (N,N), (N,N));
    thresholds are the asymptotic channel energies used in the matching.
    include_rho_term toggles the universal 15/(4 rho^2) barrier (off in
    flat test modes).
    """

    n_channels: int
    thresholds: np.ndarray
    eps: object
    h_mat: object = None
    q_mat: object = None
    rho_start: float = 0.05
    rho_match: float = 500.0
    include_rho_term: bool = True
    angular_momentum: int = 0

    def __post_init__(self):
        thr = np.asarray(self.thresholds, dtype=float)
        if thr.size > self.n_channels:
            raise ValidationError("more thresholds than channels")
        if self.rho_start <= 0 or self.rho_match <= self.rho_start:
            raise ValidationError("need 0 < rho_start < rho_match")
        object.__setattr__(self, "thresholds", thr)

    @classmethod
    def from_tables(
        cls,
        rho_table,
        eps_table,
        h_table=None,
        q_table=None,
        thresholds=None,
        rho_start=None,
        rho_match=None,
        include_rho_term=True,
        angular_momentum=0,
        n_channels=None,
    ) -> "RadialProblem":
        """Build from per-rho tables (the coupling-file contract).

        Tables are interpolated by cubic splines; thresholds default to the
        term values at the last table point.  n_channels < table width
        truncates the retained basis.
        """
        rho_table = np.asarray(rho_table, dtype=float)
        eps_table = np.asarray(eps_table, dtype=float)
        n_full = eps_table.shape[1]
        n = n_full if n_channels is None else int(n_channels)
        if not 1 <= n <= n_full:
            raise ValidationError(f"n_channels must be in [1, {n_full}]")
        eps_sp = CubicSpline(rho_table, eps_table[:, :n], axis=0)
        h_sp = q_sp = None
        if h_table is not None:
            h_sp = CubicSpline(rho_table, np.asarray(h_table)[:, :n, :n], axis=0)
        if q_table is not None:
            q_sp = CubicSpline(rho_table, np.asarray(q_table)[:, :n, :n], axis=0)
        if thresholds is None:
            thresholds = eps_table[-1, :n]
        return cls(
            n_channels=n,
            thresholds=np.asarray(thresholds, dtype=float)[:n],
            eps=eps_sp,
            h_mat=h_sp,
            q_mat=q_sp,
            rho_start=float(rho_start if rho_start is not None else rho_table[0]),
            rho_match=float(rho_match if rho_match is not None else rho_table[-1]),
            include_rho_term=include_rho_term,
            angular_momentum=angular_momentum,
        )

    def coupling_range_ok(self, tol: float = 1e-6) -> bool:
        """True when off-diagonal couplings at rho_match are below tol."""
        total = 0.0
        if self.h_mat is not None:
            h = np.asarray(self.h_mat(self.rho_match))
            total += float(np.abs(h - np.diag(np.diag(h))).max())
        if self.q_mat is not None:
            total += float(np.abs(self.q_mat(self.rho_match)).max())
        return total <= tol

    def w_bare(self, rho: float) -> np.ndarray:
        """diag(eps) + H + Q^2 (+ barrier term), before the gauge rotation."""
        n = self.n_channels
        w = np.diag(np.asarray(self.eps(rho), dtype=float))
        if self.h_mat is not None:
            w = w + np.asarray(self.h_mat(rho), dtype=float)
        if self.q_mat is not None:
            q = np.asarray(self.q_mat(rho), dtype=float)
            w = w + q @ q
        if self.include_rho_term:
            w = w + (15.0 / (4.0 * rho * rho)) * np.eye(n)
        return 0.5 * (w + w.T)

    def has_gauge(self) -> bool:
        if self.q_mat is None:
            return False
        probe = np.asarray(self.q_mat(0.5 * (self.rho_start + self.rho_match)))
        return bool(np.abs(probe).max() > 0.0)


@dataclass
class RadialGrid:
    """Piecewise-uniform master grid with pencil samples.

    points includes both ends; bond k connects points k and k+1.  Numerov
    bonds/diagonals carry the 4th-order M-weights; the few rows adjacent to
    step changes fall back to the plain second-order form.
    """

    points: np.ndarray
    bond_h: np.ndarray  # (n_pts - 1,)
    join_bond: np.ndarray  # bool (n_pts - 1,)
    w_samples: np.ndarray  # (n_pts, N, N) gauge-rotated W(rho)
    gauge: np.ndarray | None  # (n_pts, N, N) or None

    @property
    def n_points(self) -> int:
        return self.points.size

    def index_of(self, rho: float) -> int:
        i = int(np.argmin(np.abs(self.points - rho)))
        return i


def _gauge_path(problem: RadialProblem, points: np.ndarray) -> np.ndarray:
    """Orthogonal gauge S(rho) with S' = Q S, midpoint-exponential steps."""
    n = problem.n_channels
    out = np.empty((points.size, n, n))
    s = np.eye(n)
    out[0] = s
    for k in range(points.size - 1):
        h = points[k + 1] - points[k]
        q = np.asarray(problem.q_mat(points[k] + 0.5 * h), dtype=float)
        q = 0.5 * (q - q.T)
        s = expm(h * q) @ s
        out[k + 1] = s
    return out


def build_grid(
    problem: RadialProblem,
    rho_end: float | None = None,
    h_max: float = 0.05,
    e_ref: float | None = None,
    points_per_wave: float = 40.0,
) -> RadialGrid:
    """Adapted-step master grid: h halves wherever the local wavenumber asks.

    The step targets points_per_wave points per local wavelength of the
    stiffest channel; joins land in the strongly repulsive small-rho region.
    """
    rho_end = problem.rho_match if rho_end is None else float(rho_end)
    if e_ref is None:
        e_ref = float(np.max(problem.thresholds)) + 1.0

    def h_required(rho):
        w = problem.w_bare(rho)
        kap_sq = np.max(np.abs(np.linalg.eigvalsh(w) - e_ref))
        kap = math.sqrt(max(kap_sq, 1e-12))
        return min(h_max, 2.0 * math.pi / (points_per_wave * kap))

    pieces = []
    joins = []
    rho = problem.rho_start
    h = h_max
    while h_required(rho) < h:
        h *= 0.5
    while rho < rho_end - 1e-12:
        # extend with step h until the local requirement allows doubling
        limit = rho_end
        probe = rho
        while probe < rho_end and h_required(min(probe * 1.3 + h, rho_end)) < 2.0 * h:
            probe = probe * 1.3 + h
        limit = min(probe, rho_end)
        n_steps = max(1, int(math.ceil((limit - rho) / h)))
        if rho + n_steps * h > rho_end:
            n_steps = max(1, int(math.ceil((rho_end - rho) / h)))
            h_seg = (rho_end - rho) / n_steps
        else:
            h_seg = h
        seg = rho + h_seg * np.arange(1, n_steps + 1)
        pieces.append(seg)
        if len(pieces) > 1:
            joins.append(sum(len(p) for p in pieces[:-1]) - 1 + 1)
        rho = seg[-1]
        h = min(2.0 * h, h_max)
    points = np.concatenate([[problem.rho_start]] + pieces)
    bond_h = np.diff(points)
    join_bond = np.zeros(bond_h.size, dtype=bool)
    # mark bonds whose neighbors have unequal spacing on either side
    for k in range(1, bond_h.size):
        if not math.isclose(bond_h[k], bond_h[k - 1], rel_tol=1e-9):
            join_bond[max(0, k - 1) : min(bond_h.size, k + 1)] = True

    gauge = _gauge_path(problem, points) if problem.has_gauge() else None
    n = problem.n_channels
    w = np.empty((points.size, n, n))
    for k, rho_k in enumerate(points):
        wb = problem.w_bare(rho_k)
        if gauge is not None:
            wb = gauge[k].T @ wb @ gauge[k]
        w[k] = 0.5 * (wb + wb.T)
    return RadialGrid(
        points=points, bond_h=bond_h, join_bond=join_bond,
        w_samples=w, gauge=gauge,
    )


def _pencil_parts(grid: RadialGrid):
    """E-independent bond/diagonal blocks of the symmetric three-point pencil.

    Bond k (between interior rows k and k+1):
        numerov: g0 = -I/h + h (W_k + W_{k+1}) / 24,   g1 = h/12
        join:    g0 = -I/h,                            g1 = 0
    Diagonal row k (h-weighted):
        numerov: d0 = (1/hl + 1/hr) I + hbar (10/12) W_k,  d1 = hbar 10/12
        join:    d0 = (1/hl + 1/hr) I + hbar W_k,          d1 = hbar
    so each row approximates hbar (-u'' + W u - E u) = 0.
    """
    w = grid.w_samples
    n = w.shape[1]
    eye = np.eye(n)
    nb = grid.bond_h.size
    g0 = np.empty((nb, n, n))
    g1 = np.empty(nb)
    for k in range(nb):
        h = grid.bond_h[k]
        if grid.join_bond[k]:
            g0[k] = -eye / h
            g1[k] = 0.0
        else:
            g0[k] = -eye / h + h * (w[k] + w[k + 1]) / 24.0
            g1[k] = h / 12.0
    npts = grid.n_points
    d0 = np.empty((npts, n, n))
    d1 = np.empty(npts)
    for k in range(npts):
        hl = grid.bond_h[k - 1] if k > 0 else grid.bond_h[0]
        hr = grid.bond_h[k] if k < nb else grid.bond_h[-1]
        hbar = 0.5 * (hl + hr)
        plain = (k > 0 and grid.join_bond[k - 1]) or (k < nb and grid.join_bond[k])
        coef = 1.0 if plain else 10.0 / 12.0
        d0[k] = (1.0 / hl + 1.0 / hr) * eye + hbar * coef * w[k]
        d1[k] = hbar * coef
    return g0, g1, d0, d1


def assemble_pencil(grid: RadialGrid, last_index: int):
    """Sparse symmetric (A0, A1) over interior points 1..last_index-1.

    Dirichlet ends at points[0] and points[last_index]; eigenvalues of
    A0 x = E A1 x are the box spectrum on that interval.
    """
    g0, g1, d0, d1 = _pencil_parts(grid)
    n = grid.w_samples.shape[1]
    idx = np.arange(1, last_index)
    m = idx.size
    eye = np.eye(n)

    def blocks(diag_blocks, offdiag_blocks):
        a = sp.lil_matrix((m * n, m * n))
        for i in range(m):
            a[i * n : (i + 1) * n, i * n : (i + 1) * n] = diag_blocks[i]
            if i + 1 < m:
                a[i * n : (i + 1) * n, (i + 1) * n : (i + 2) * n] = offdiag_blocks[i]
                a[(i + 1) * n : (i + 2) * n, i * n : (i + 1) * n] = offdiag_blocks[i].T
        return a.tocsc()

    a0 = blocks([d0[k] for k in idx], [g0[k] for k in idx[:-1]])
    a1 = blocks([d1[k] * eye for k in idx], [g1[k] * eye for k in idx[:-1]])
    return a0, a1


def _sigma_floor(grid: RadialGrid, last_index: int) -> float:
    lam = min(
        float(np.linalg.eigvalsh(grid.w_samples[k]).min())
        for k in range(1, last_index)
    )
    return lam - 0.5 * (abs(lam) + 1.0)


def stabilization_eigenvalues(
    problem: RadialProblem,
    alpha: float,
    n_levels: int,
    grid: RadialGrid | None = None,
    sigma: float | None = None,
    return_vectors: bool = False,
):
    """Eigenvalues of the Dirichlet box problem on [rho_start, alpha].

    sigma=None targets the bottom of the spectrum (lowest n_levels);
    passing sigma returns the n_levels eigenvalues nearest to it.  alpha is
    snapped to the master grid.
    """
    if alpha < problem.rho_start:
        raise ValidationError(f"alpha={alpha!r} below rho_start")
    if grid is None:
        grid = build_grid(problem, rho_end=alpha)
    last = grid.index_of(alpha)
    if last < 3:
        raise ValidationError(f"alpha={alpha!r} leaves too few grid points")
    a0, a1 = assemble_pencil(grid, last)
    if sigma is None:
        sigma = _sigma_floor(grid, last)
    k = min(n_levels, a0.shape[0] - 1)
    try:
        vals, vecs = spla.eigsh(
            a0, k=k, M=a1, sigma=sigma, which="LM",
            ncv=min(max(4 * k + 1, 25), a0.shape[0]), maxiter=600,
        )
    except spla.ArpackNoConvergence as exc:
        raise EigensolverError(
            f"box eigensolver stalled at alpha={alpha!r}", rho=alpha
        ) from exc
    order = np.argsort(vals)
    if return_vectors:
        return vals[order], vecs[:, order]
    return vals[order]


def _references(problem, grid, energies, k_index):
    """Diagonal asymptotic reference values at grid point k_index.

    Open channels: sin/cos(q rho - pi J / 2); closed channels: the decaying
    exponential (normalized at the match point) in the A slot and zero in
    the B slot.  Values are rotated into the gauge frame.
    """
    rho = grid.points[k_index]
    rho_m = grid.points[-1]
    thr = problem.thresholds
    n = problem.n_channels
    ne = energies.size
    a = np.zeros((ne, n, n))
    b = np.zeros((ne, n, n))
    phase = 0.5 * math.pi * problem.angular_momentum
    for j in range(n):
        de = energies - thr[j]
        open_ = de > 0
        q = np.sqrt(np.where(open_, de, 1.0))
        kap = np.sqrt(np.where(open_, 1.0, -de))
        a[:, j, j] = np.where(
            open_, np.sin(q * rho - phase), np.exp(-kap * (rho - rho_m))
        )
        b[:, j, j] = np.where(open_, np.cos(q * rho - phase), 0.0)
    if grid.gauge is not None:
        gt = grid.gauge[k_index].T
        a = gt[None] @ a
        b = gt[None] @ b
    return a, b


def propagate_ratio(problem: RadialProblem, grid: RadialGrid, energies) -> np.ndarray:
    """Ratio P = u_M u_{M-1}^{-1} of the pencil recursion, batched over E.

    Starts from the Dirichlet condition u_0 = 0 at rho_start (the strongly
    repulsive barrier enforces the regular solution).
    """
    energies = np.atleast_1d(np.asarray(energies, dtype=float))
    g0, g1, d0, d1 = _pencil_parts(grid)
    n = grid.w_samples.shape[1]
    ne = energies.size
    eye = np.eye(n)
    e_col = energies[:, None, None]

    def bond(k):
        return g0[k][None] - (g1[k] * e_col) * eye[None]

    def diag(k):
        return d0[k][None] - (d1[k] * e_col) * eye[None]

    # row 1 with u_0 = 0:  bond_1 u_2 + diag_1 u_1 = 0
    p = -np.linalg.solve(bond(1), diag(1))
    for k in range(2, grid.n_points - 1):
        rhs = diag(k) + np.matmul(bond(k - 1), np.linalg.inv(p))
        p = -np.linalg.solve(bond(k), rhs)
    return p


def extract_k(
    problem: RadialProblem,
    energies,
    grid: RadialGrid | None = None,
    defect_limit: float = ASYMMETRY_LIMIT,
):
    """Reaction matrices K(E) for a batch of energies.

    Returns (list of KMatrix, asymmetry defects).  Raises
    NoOpenChannelError / ClosedChannelError guards at construction and
    MatchingQualityError when |K - K^T| exceeds defect_limit.
    """
    energies = np.atleast_1d(np.asarray(energies, dtype=float))
    thr = problem.thresholds
    if np.any(np.abs(energies[:, None] - thr[None, :]) < THRESHOLD_GUARD):
        raise ClosedChannelError(
            "energy within 1e-12 of a channel threshold; offset it"
        )
    if np.any(energies <= thr.min()):
        bad = float(energies[energies <= thr.min()][0])
        raise NoOpenChannelError(f"all channels closed at E={bad!r}")
    open_masks = energies[:, None] > thr[None, :]
    if not np.all(open_masks.sum(axis=1) == open_masks[0].sum()):
        raise ValidationError("energy batch mixes different open-channel counts")
    n_open = int(open_masks[0].sum())
    open_idx = np.nonzero(open_masks[0])[0]
    closed_idx = np.nonzero(~open_masks[0])[0]

    if grid is None:
        grid = build_grid(problem)
    p = propagate_ratio(problem, grid, energies)
    m = grid.n_points - 1
    a_m, b_m = _references(problem, grid, energies, m)
    a_p, b_p = _references(problem, grid, energies, m - 1)

    lhs = a_m - np.matmul(p, a_p)   # multiplies Ca
    rhs = np.matmul(p, b_p) - b_m   # multiplies Cb
    sys_mat = np.concatenate([rhs[:, :, open_idx], -lhs[:, :, closed_idx]], axis=2)
    sol = np.linalg.solve(sys_mat, lhs[:, :, open_idx])
    k_hat = sol[:, :n_open, :]

    q_open = np.sqrt(energies[:, None] - thr[None, open_idx])
    sq = np.sqrt(q_open)
    k_full = sq[:, :, None] * k_hat / sq[:, None, :]

    out = []
    defects = np.empty(energies.size)
    for i, e in enumerate(energies):
        km = k_full[i]
        defect = float(np.abs(km - km.T).max())
        scale = max(1.0, float(np.abs(km).max()))
        if defect > defect_limit * scale:
            raise MatchingQualityError(
                f"asymmetric K at E={e!r}: defect {defect:.3e}",
                energy=float(e), defect=defect,
            )
        out.append(KMatrix(energy=float(e), entries=0.5 * (km + km.T)))
        defects[i] = defect
    return out, defects


def truncation_scan(rho_table, eps_table, h_table, q_table, energy, n_list,
                    h_max=0.05, **problem_kwargs):
    """Open-block K for a sequence of retained-channel counts N.

    Returns (dict N -> 2x2 K block, successive max differences); the
    differences should decrease as the truncated basis converges.
    """
    mats = {}
    for n in sorted(n_list):
        prob = RadialProblem.from_tables(
            rho_table, eps_table, h_table, q_table, n_channels=n,
            **problem_kwargs,
        )
        grid = build_grid(prob, h_max=h_max)
        k, _ = extract_k(prob, [energy], grid=grid)
        mats[n] = k[0].entries[:2, :2]
    ns = sorted(mats)
    deltas = [
        float(np.abs(mats[b] - mats[a]).max()) for a, b in zip(ns, ns[1:])
    ]
    return mats, deltas
