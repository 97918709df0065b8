"""Dense and sparse matrix primitives shared by every other module.

Conventions:
  * dense matrices are 2-D, C-contiguous ``float64`` numpy arrays;
  * sparse symmetric operators live in :class:`CsrMatrix`;
  * non-finite values are data, never errors.  Nothing here masks a NaN or
    an overflow; :func:`finite_probe` is the detection primitive.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import NamedTuple

import numpy as np

try:  # optional JIT for the sparse product; the numpy path is the fallback
    from numba import njit as _njit

    _HAVE_NUMBA = True
except ImportError:  # pragma: no cover - exercised only without numba
    _HAVE_NUMBA = False

__all__ = [
    "CsrMatrix",
    "FiniteProbe",
    "as_dense",
    "dense_matmul",
    "finite_probe",
    "jacobi_eigh",
    "spmm",
]

JACOBI_SIZE_CAP = 2000


def as_dense(data) -> np.ndarray:
    """Coerce ``data`` to a 2-D float64 array, validating the shape."""
    a = np.asarray(data, dtype=np.float64)
    if a.ndim != 2:
        raise ValueError(f"expected a 2-D matrix, got ndim={a.ndim}")
    return np.ascontiguousarray(a)


def dense_matmul(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    """Dense product with 64-bit accumulation."""
    a = as_dense(a)
    b = as_dense(b)
    if a.shape[1] != b.shape[0]:
        raise ValueError(f"dense_matmul shape mismatch: {a.shape} x {b.shape}")
    with np.errstate(all="ignore"):
        return a @ b


@dataclass(frozen=True)
class CsrMatrix:
    """Square sparse matrix in compressed-sparse-row form.

    Column indices are strictly increasing within each row, which fixes the
    per-row summation order of :func:`spmm` and makes it reproducible.
    ``symmetric=True`` asserts (and validates) that the stored pattern and
    values are symmetric.
    """

    n: int
    row_ptr: np.ndarray
    col_idx: np.ndarray
    vals: np.ndarray
    symmetric: bool = field(default=False)

    def __post_init__(self):
        object.__setattr__(self, "row_ptr", np.asarray(self.row_ptr, dtype=np.int64))
        object.__setattr__(self, "col_idx", np.asarray(self.col_idx, dtype=np.int64))
        object.__setattr__(self, "vals", np.asarray(self.vals, dtype=np.float64))
        n, row_ptr, col_idx, vals = self.n, self.row_ptr, self.col_idx, self.vals
        if n < 0:
            raise ValueError("matrix dimension must be nonnegative")
        if row_ptr.shape != (n + 1,):
            raise ValueError(f"row_ptr must have length n+1={n + 1}")
        if row_ptr[0] != 0 or row_ptr[-1] != len(vals) or len(col_idx) != len(vals):
            raise ValueError("row_ptr endpoints do not match nnz")
        if np.any(np.diff(row_ptr) < 0):
            raise ValueError("row_ptr must be nondecreasing")
        if len(col_idx) and (col_idx.min() < 0 or col_idx.max() >= n):
            raise ValueError("column index out of range")
        # strict increase inside each row; row boundaries may go backwards
        if len(col_idx) > 1:
            d = np.diff(col_idx)
            starts = np.zeros(len(col_idx), dtype=bool)
            inner = row_ptr[1:-1]
            starts[inner[inner < len(col_idx)]] = True
            if np.any(d[~starts[1:]] <= 0):
                raise ValueError("column indices must strictly increase within a row")
        if self.symmetric and not self._is_symmetric():
            raise ValueError("matrix flagged symmetric is not symmetric")

    @property
    def nnz(self) -> int:
        return len(self.vals)

    @staticmethod
    def from_coo(n: int, rows, cols, vals, symmetric: bool = False) -> "CsrMatrix":
        """Build from coordinate triplets.  Duplicate entries are not allowed."""
        rows = np.asarray(rows, dtype=np.int64)
        cols = np.asarray(cols, dtype=np.int64)
        vals = np.asarray(vals, dtype=np.float64)
        order = np.lexsort((cols, rows))
        rows, cols, vals = rows[order], cols[order], vals[order]
        if len(rows) > 1 and np.any((np.diff(rows) == 0) & (np.diff(cols) == 0)):
            raise ValueError("duplicate coordinate entries")
        row_ptr = np.zeros(n + 1, dtype=np.int64)
        np.add.at(row_ptr, rows + 1, 1)
        np.cumsum(row_ptr, out=row_ptr)
        return CsrMatrix(n, row_ptr, cols, vals, symmetric=symmetric)

    @staticmethod
    def from_dense(a, symmetric: bool = False) -> "CsrMatrix":
        a = as_dense(a)
        if a.shape[0] != a.shape[1]:
            raise ValueError("CsrMatrix must be square")
        rows, cols = np.nonzero(a)
        return CsrMatrix.from_coo(a.shape[0], rows, cols, a[rows, cols], symmetric=symmetric)

    @staticmethod
    def identity(n: int) -> "CsrMatrix":
        idx = np.arange(n, dtype=np.int64)
        return CsrMatrix(n, np.arange(n + 1, dtype=np.int64), idx, np.ones(n), symmetric=True)

    def to_dense(self) -> np.ndarray:
        out = np.zeros((self.n, self.n))
        out[self.row_expansion(), self.col_idx] = self.vals
        return out

    def row_expansion(self) -> np.ndarray:
        """Row index of every stored entry."""
        return np.repeat(np.arange(self.n, dtype=np.int64), np.diff(self.row_ptr))

    def transpose(self) -> "CsrMatrix":
        if self.symmetric:
            return self
        return CsrMatrix.from_coo(self.n, self.col_idx, self.row_expansion(), self.vals)

    def diagonal(self) -> np.ndarray:
        out = np.zeros(self.n)
        rows = self.row_expansion()
        on_diag = rows == self.col_idx
        out[rows[on_diag]] = self.vals[on_diag]
        return out

    def with_values(self, vals, symmetric: bool | None = None) -> "CsrMatrix":
        """Same sparsity pattern, new values."""
        sym = self.symmetric if symmetric is None else symmetric
        return CsrMatrix(self.n, self.row_ptr, self.col_idx, vals, symmetric=sym)

    def _is_symmetric(self) -> bool:
        t = CsrMatrix.from_coo(self.n, self.col_idx, self.row_expansion(), self.vals)
        return (
            np.array_equal(t.row_ptr, self.row_ptr)
            and np.array_equal(t.col_idx, self.col_idx)
            and np.array_equal(t.vals, self.vals)
        )


if _HAVE_NUMBA:

    @_njit(cache=True)
    def _spmm_kernel(n, row_ptr, col_idx, vals, x, out):  # pragma: no cover - jitted
        for i in range(n):
            for e in range(row_ptr[i], row_ptr[i + 1]):
                j = col_idx[e]
                v = vals[e]
                for f in range(x.shape[1]):
                    out[i, f] += v * x[j, f]


def spmm(a: CsrMatrix, x: np.ndarray) -> np.ndarray:
    """Sparse times dense.  Per-row accumulation runs in ascending column order.

    Non-finite values in either operand propagate into the product.
    """
    x = as_dense(x)
    if a.n != x.shape[0]:
        raise ValueError(f"spmm shape mismatch: operator n={a.n}, x rows={x.shape[0]}")
    out = np.zeros((a.n, x.shape[1]))
    if a.nnz == 0:
        return out
    if _HAVE_NUMBA:
        _spmm_kernel(a.n, a.row_ptr, a.col_idx, a.vals, x, out)
        return out
    with np.errstate(all="ignore"):
        contrib = a.vals[:, None] * x[a.col_idx]
        nonempty = np.nonzero(np.diff(a.row_ptr))[0]
        out[nonempty] = np.add.reduceat(contrib, a.row_ptr[nonempty], axis=0)
    return out


class FiniteProbe(NamedTuple):
    is_finite: bool
    max_abs: float


def finite_probe(x) -> FiniteProbe:
    """Report whether every entry is finite, plus the largest finite magnitude.

    Total over all bit patterns: never raises, NaN and inf are simply counted
    as non-finite.  ``max_abs`` is 0 when no finite entry exists.
    """
    a = np.asarray(x, dtype=np.float64)
    mask = np.isfinite(a)
    all_finite = bool(mask.all())
    if all_finite:
        max_abs = float(np.max(np.abs(a))) if a.size else 0.0
    else:
        finite_vals = a[mask]
        max_abs = float(np.max(np.abs(finite_vals))) if finite_vals.size else 0.0
    return FiniteProbe(all_finite, max_abs)


def _round_robin_rounds(n: int) -> list[tuple[np.ndarray, np.ndarray]]:
    """Partition all index pairs of {0..n-1} into rounds of disjoint pairs."""
    m = n if n % 2 == 0 else n + 1
    players = list(range(m))
    rounds = []
    for _ in range(m - 1):
        ps, qs = [], []
        for i in range(m // 2):
            p, q = players[i], players[m - 1 - i]
            if p < n and q < n:
                ps.append(min(p, q))
                qs.append(max(p, q))
        rounds.append((np.asarray(ps, dtype=np.int64), np.asarray(qs, dtype=np.int64)))
        players = [players[0], players[-1]] + players[1:-1]
    return rounds


def jacobi_eigh(
    a: CsrMatrix | np.ndarray,
    max_sweeps: int = 60,
    size_cap: int = JACOBI_SIZE_CAP,
) -> tuple[np.ndarray, np.ndarray]:
    """Full symmetric eigendecomposition by cyclic Jacobi rotations.

    One sweep visits every off-diagonal pair exactly once, in round-robin
    rounds of disjoint pairs so each round is applied as a single vectorized
    batch of Givens rotations.  Returns ``(eigenvalues, eigenvectors)`` with
    eigenvalues ascending and eigenvectors in the matching columns.
    """
    dense = a.to_dense() if isinstance(a, CsrMatrix) else as_dense(a)
    n = dense.shape[0]
    if dense.shape[0] != dense.shape[1]:
        raise ValueError("jacobi_eigh requires a square matrix")
    if n > size_cap:
        raise ValueError(f"matrix size {n} exceeds the eigensolver cap {size_cap}")
    scale = float(np.max(np.abs(dense))) if n else 0.0
    if not np.isfinite(dense).all():
        raise ValueError("jacobi_eigh requires finite entries")
    if np.max(np.abs(dense - dense.T), initial=0.0) > 1e-12 * max(1.0, scale):
        raise ValueError("jacobi_eigh requires a symmetric matrix")
    if n == 0:
        return np.zeros(0), np.zeros((0, 0))

    m = 0.5 * (dense + dense.T)  # kill asymmetric rounding before rotating
    v = np.eye(n)
    if n == 1:
        return m.diagonal().copy(), v

    rounds = _round_robin_rounds(n)
    tol = 1e-14 * max(1.0, float(np.linalg.norm(m)))

    def _off_norm() -> float:
        hollow = m.copy()
        np.fill_diagonal(hollow, 0.0)
        return float(np.linalg.norm(hollow))

    for _ in range(max_sweeps):
        if _off_norm() <= tol:
            break
        for ps, qs in rounds:
            apq = m[ps, qs]
            active = np.abs(apq) > 1e-300
            if not np.any(active):
                continue
            app = m[ps, ps]
            aqq = m[qs, qs]
            with np.errstate(all="ignore"):
                tau = np.where(active, (aqq - app) / (2.0 * np.where(active, apq, 1.0)), 0.0)
                t = np.where(
                    active,
                    np.sign(tau + (tau == 0)) / (np.abs(tau) + np.sqrt(1.0 + tau * tau)),
                    0.0,
                )
            c = 1.0 / np.sqrt(1.0 + t * t)
            s = t * c
            # rows, then columns; pairs inside a round are disjoint
            rp, rq = m[ps, :], m[qs, :]
            m[ps, :] = c[:, None] * rp - s[:, None] * rq
            m[qs, :] = s[:, None] * rp + c[:, None] * rq
            cp, cq = m[:, ps], m[:, qs]
            m[:, ps] = cp * c - cq * s
            m[:, qs] = cp * s + cq * c
            vp, vq = v[:, ps], v[:, qs]
            v[:, ps] = vp * c - vq * s
            v[:, qs] = vp * s + vq * c
    else:
        raise RuntimeError(
            f"jacobi_eigh failed to converge in {max_sweeps} sweeps "
            f"(off-diagonal residual {_off_norm():.3e})"
        )

    w = m.diagonal().copy()
    order = np.argsort(w, kind="stable")
    return w[order], np.ascontiguousarray(v[:, order])
