"""Polynomial propagation bases and their scalar diagnostics.

Two three-term recurrences, one per spectral domain:

  * Chebyshev on the shifted Laplacian (spectrum [-1, 1]):
        T_0 = 1,  T_1 = x,  T_k = 2 x T_{k-1} - T_{k-2};
    bounded by 1 on the domain, hence numerically stable at any depth.

  * Krawtchouk on the scaled Laplacian (spectrum [0, 1]), mapped onto the
    integer lattice [0, N] via x = N * lambda:
        K_0 = 1,  K_1 = 1 - x / (p N),
        p (N - k) K_{k+1} = [p (N - k) + k (1 - p) - x] K_k - k (1 - p) K_{k-1};
    the division by p (N - k) makes growth explode as p approaches 0, which
    is the failure mode this artifact instruments.

Propagation deliberately continues past the first non-finite order: the
poisoned values must reach downstream consumers unmodified, with the
overflow recorded in the stack rather than repaired.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from .linalg import CsrMatrix, as_dense, finite_probe, spmm

__all__ = [
    "BasisStack",
    "KrawtchoukShape",
    "cheb_propagate",
    "cheb_scalar",
    "collapse_degree",
    "krawtchouk_hypergeom",
    "krawtchouk_propagate",
    "krawtchouk_recurrence_terms",
    "krawtchouk_scalar",
    "overflow_degree",
    "scalar_response",
]


@dataclass(frozen=True)
class KrawtchoukShape:
    """Weight parameter and lattice size of the adaptive basis."""

    p: float
    lattice: int

    def __post_init__(self):
        if not (0.0 < self.p < 1.0):
            raise ValueError("p must lie strictly inside (0, 1)")
        if self.lattice < 1:
            raise ValueError("lattice size must be positive")


@dataclass
class BasisStack:
    """Propagated matrices P_0 X .. P_K X plus overflow instrumentation.

    ``max_abs[k]`` is the largest finite magnitude at order k, recorded
    before any downstream use; ``first_nonfinite_order`` is the smallest
    order containing any non-finite entry, or None.
    """

    k_max: int
    mats: list[np.ndarray]
    max_abs: list[float]
    first_nonfinite_order: int | None


def _instrumented_stack(k_max: int, mats: list[np.ndarray]) -> BasisStack:
    max_abs: list[float] = []
    first_bad: int | None = None
    for k, m in enumerate(mats):
        probe = finite_probe(m)
        max_abs.append(probe.max_abs)
        if first_bad is None and not probe.is_finite:
            first_bad = k
    return BasisStack(k_max, mats, max_abs, first_bad)


def cheb_propagate(l_hat: CsrMatrix, x, k_max: int) -> BasisStack:
    """Stack of T_k(L_hat) X for k = 0..k_max."""
    if k_max < 1:
        raise ValueError("k_max must be at least 1")
    x = as_dense(x)
    if l_hat.n != x.shape[0]:
        raise ValueError("operator size does not match feature rows")
    mats = [x, spmm(l_hat, x)]
    with np.errstate(all="ignore"):
        for _ in range(2, k_max + 1):
            mats.append(2.0 * spmm(l_hat, mats[-1]) - mats[-2])
    return _instrumented_stack(k_max, mats)


def krawtchouk_recurrence_terms(k: int, lattice: int) -> tuple[
    tuple[float, float], tuple[float, float], tuple[float, float]
]:
    """Affine coefficients (alpha, beta) in p for one recurrence step.

    Returns ``(a, b, d)`` with a(p) = p(N-2k)+k multiplying K_k,
    b(p) = k(1-p) multiplying K_{k-1}, and d(p) = p(N-k) the divisor.
    Shared by the numpy propagation here and the in-tape rebuild in the
    model layer, so the two paths cannot drift apart.
    """
    n = float(lattice)
    return ((n - 2.0 * k, float(k)), (-float(k), float(k)), (n - float(k), 0.0))


def krawtchouk_propagate(
    l_scaled: CsrMatrix, x, k_max: int, shape: KrawtchoukShape
) -> BasisStack:
    """Stack of K_k(N * L_scaled; p, N) X for k = 0..k_max.

    Propagation runs to k_max even after an order overflows; the stack's
    instrumentation reports where finiteness was lost.
    """
    if k_max < 1:
        raise ValueError("k_max must be at least 1")
    if shape.lattice < k_max:
        raise ValueError(f"lattice size {shape.lattice} must be >= k_max {k_max}")
    x = as_dense(x)
    if l_scaled.n != x.shape[0]:
        raise ValueError("operator size does not match feature rows")
    p, n = shape.p, float(shape.lattice)
    mats = [x]
    with np.errstate(all="ignore"):
        for k in range(k_max):
            (aa, ab), (ba, bb), (da, db) = krawtchouk_recurrence_terms(k, shape.lattice)
            a_k = aa * p + ab
            b_k = ba * p + bb
            d_k = da * p + db
            acc = a_k * mats[k] - n * spmm(l_scaled, mats[k])
            if k > 0:
                acc = acc - b_k * mats[k - 1]
            mats.append(acc / d_k)
    return _instrumented_stack(k_max, mats)


def cheb_scalar(lams, k_max: int) -> np.ndarray:
    """T_k(lambda) for k = 0..k_max on a grid; shape (k_max+1, len(grid))."""
    lams = np.atleast_1d(np.asarray(lams, dtype=np.float64))
    out = np.empty((k_max + 1, lams.size))
    out[0] = 1.0
    if k_max >= 1:
        out[1] = lams
    with np.errstate(all="ignore"):
        for k in range(2, k_max + 1):
            out[k] = 2.0 * lams * out[k - 1] - out[k - 2]
    return out


def krawtchouk_scalar(xs, k_max: int, shape: KrawtchoukShape) -> np.ndarray:
    """K_k(x; p, N) on lattice coordinates via the recurrence; (k_max+1, len)."""
    xs = np.atleast_1d(np.asarray(xs, dtype=np.float64))
    p, n = shape.p, float(shape.lattice)
    out = np.empty((k_max + 1, xs.size))
    out[0] = 1.0
    with np.errstate(all="ignore"):
        if k_max >= 1:
            out[1] = 1.0 - xs / (p * n)
        for k in range(1, k_max):
            a_k = p * (n - k) + k * (1.0 - p)
            b_k = k * (1.0 - p)
            d_k = p * (n - k)
            out[k + 1] = ((a_k - xs) * out[k] - b_k * out[k - 1]) / d_k
    return out


def krawtchouk_hypergeom(n: int, x: float, p: float, lattice: int) -> float:
    """Direct hypergeometric sum  sum_j (-n)_j (-x)_j / ((-N)_j j!) p^{-j}.

    Independent of the recurrence; defined for polynomial degree n <= N.
    """
    if n > lattice:
        raise ValueError("degree exceeds lattice size")
    total = 1.0
    term = 1.0
    for j in range(n):
        # ratio of consecutive terms: ((j - n)(j - x)) / ((j - N)(j + 1) p)
        term *= (j - n) * (j - x) / ((j - lattice) * (j + 1) * p)
        total += term
    return total


def scalar_response(
    kind: str,
    weights,
    grid,
    shape: KrawtchoukShape | None = None,
) -> np.ndarray:
    """Filter response g(lambda) = sum_k w_k P_k(lambda) on an eigenvalue grid.

    The grid lives in the operator domain: [-1, 1] for ``cheb`` and [0, 1]
    for ``krawtchouk`` (lattice scaling by N happens internally).
    """
    weights = np.asarray(weights, dtype=np.float64)
    grid = np.atleast_1d(np.asarray(grid, dtype=np.float64))
    k_max = len(weights) - 1
    if kind == "cheb":
        if np.any(grid < -1.0 - 1e-12) or np.any(grid > 1.0 + 1e-12):
            raise ValueError("cheb grid must lie in [-1, 1]")
        basis = cheb_scalar(grid, k_max)
    elif kind == "krawtchouk":
        if shape is None:
            raise ValueError("krawtchouk response needs a shape")
        if np.any(grid < -1e-12) or np.any(grid > 1.0 + 1e-12):
            raise ValueError("krawtchouk grid must lie in [0, 1]")
        basis = krawtchouk_scalar(grid * shape.lattice, k_max, shape)
    else:
        raise ValueError(f"unknown basis kind {kind!r}")
    return weights @ basis


def overflow_degree(
    kind: str,
    lam_extreme: float,
    cap: int = 200,
    shape: KrawtchoukShape | None = None,
) -> int | None:
    """Smallest order whose scalar value at ``lam_extreme`` is non-finite.

    Deterministic scan of the recurrence; returns None when every order up
    to ``cap`` stays finite (Chebyshev always does on its domain).
    """
    if cap > 200:
        raise ValueError("scan cap is limited to 200")
    if kind == "cheb":
        vals = cheb_scalar([lam_extreme], cap)[:, 0]
    elif kind == "krawtchouk":
        if shape is None:
            raise ValueError("krawtchouk scan needs a shape")
        k_max = min(cap, shape.lattice)
        vals = krawtchouk_scalar([lam_extreme * shape.lattice], k_max, shape)[:, 0]
    else:
        raise ValueError(f"unknown basis kind {kind!r}")
    bad = np.flatnonzero(~np.isfinite(vals))
    return int(bad[0]) if bad.size else None


def collapse_degree(p: float, lam_extreme: float, cap: int = 200) -> int | None:
    """Smallest filter degree K at which the N=K Krawtchouk basis overflows.

    For each candidate K the lattice is N=K (the default model coupling) and
    the scalar recurrence is scanned at the extreme eigenvalue; returns the
    first K whose scan goes non-finite at or below K, or None up to ``cap``.
    """
    for k in range(1, cap + 1):
        deg = overflow_degree(
            "krawtchouk", lam_extreme, cap=k, shape=KrawtchoukShape(p, k)
        )
        if deg is not None and deg <= k:
            return k
    return None
