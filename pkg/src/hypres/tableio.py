"""Line-oriented delimited-text tables with digest-carrying headers.

Every stage artifact is plain text: '#'-prefixed header lines carry
key: value metadata (including the config digest that produced the file),
then whitespace-delimited numeric rows.  Formatting is deterministic, so
identical inputs reproduce identical bytes.
"""

from __future__ import annotations

import hashlib
from pathlib import Path

import numpy as np

from .errors import CacheError, ValidationError


def digest_text(text: str) -> str:
    return hashlib.sha256(text.encode()).hexdigest()[:16]


def digest_file(path) -> str:
    return hashlib.sha256(Path(path).read_bytes()).hexdigest()[:16]


def write_table(path, rows: np.ndarray, meta: dict, columns: str) -> None:
    rows = np.atleast_2d(np.asarray(rows, dtype=float))
    with open(path, "w") as fh:
        for key, value in meta.items():
            fh.write(f"# {key}: {value}\n")
        fh.write(f"# columns: {columns}\n")
        for row in rows:
            fh.write(" ".join(f"{v:.17e}" for v in row) + "\n")


def read_table(path):
    """Returns (rows array, meta dict); raises CacheError when missing."""
    p = Path(path)
    if not p.exists():
        raise CacheError(f"missing table {path}")
    meta = {}
    rows = []
    with open(p) as fh:
        for raw in fh:
            line = raw.strip()
            if not line:
                continue
            if line.startswith("#"):
                body = line[1:].strip()
                if ":" in body:
                    key, value = body.split(":", 1)
                    meta[key.strip()] = value.strip()
                continue
            rows.append([float(x) for x in line.split()])
    if rows and len({len(r) for r in rows}) != 1:
        raise ValidationError(f"ragged rows in {path}")
    return np.asarray(rows, dtype=float), meta


def write_keyvalues(path, pairs: dict, header: dict | None = None) -> None:
    with open(path, "w") as fh:
        for key, value in (header or {}).items():
            fh.write(f"# {key}: {value}\n")
        for key, value in pairs.items():
            if isinstance(value, float):
                fh.write(f"{key} = {value:.17e}\n")
            else:
                fh.write(f"{key} = {value}\n")


def read_keyvalues(path):
    p = Path(path)
    if not p.exists():
        raise CacheError(f"missing report {path}")
    meta = {}
    pairs = {}
    with open(p) as fh:
        for raw in fh:
            line = raw.strip()
            if not line:
                continue
            if line.startswith("#"):
                body = line[1:].strip()
                if ":" in body:
                    key, value = body.split(":", 1)
                    meta[key.strip()] = value.strip()
                continue
            key, value = line.split("=", 1)
            value = value.strip()
            try:
                pairs[key.strip()] = float(value)
            except ValueError:
                pairs[key.strip()] = value
    return pairs, meta


def save_couplings(path, solution, extra_meta=None) -> None:
    """Terms + coupling tables: rho, eps_1..N, H flattened, Q flattened."""
    n_rho = solution.rho_grid.size
    n = solution.n_terms
    h = solution.h_table
    q = solution.q_table
    if h is None or q is None:
        raise ValidationError("solution has no coupling tables")
    rows = np.hstack(
        [
            solution.rho_grid[:, None],
            solution.terms,
            h.reshape(n_rho, n * n),
            q.reshape(n_rho, n * n),
        ]
    )
    meta = {"n_terms": n}
    meta.update(solution.meta)
    meta.update(extra_meta or {})
    cols = (
        "rho eps_1..eps_N H_11..H_NN(row-major) Q_11..Q_NN(row-major)"
    )
    write_table(path, rows, meta, cols)


def load_couplings(path):
    """Inverse of save_couplings: (rho, eps, H, Q, meta)."""
    rows, meta = read_table(path)
    n = int(meta["n_terms"])
    expected = 1 + n + 2 * n * n
    if rows.shape[1] != expected:
        raise ValidationError(
            f"{path}: expected {expected} columns for n_terms={n}, "
            f"got {rows.shape[1]}"
        )
    rho = rows[:, 0]
    eps = rows[:, 1 : 1 + n]
    h = rows[:, 1 + n : 1 + n + n * n].reshape(-1, n, n)
    q = rows[:, 1 + n + n * n :].reshape(-1, n, n)
    return rho, eps, h, q, meta


def save_terms(path, solution, extra_meta=None) -> None:
    rows = np.hstack([solution.rho_grid[:, None], solution.terms])
    meta = {"n_terms": solution.n_terms}
    meta.update(solution.meta)
    meta.update(extra_meta or {})
    write_table(path, rows, meta, "rho eps_1..eps_N")


def load_terms(path):
    rows, meta = read_table(path)
    return rows[:, 0], rows[:, 1:], meta
