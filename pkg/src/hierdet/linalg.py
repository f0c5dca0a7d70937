"""Dense float64 vector/matrix kernels and a conjugate gradient solver."""

from __future__ import annotations

from typing import Callable, NamedTuple

import numpy as np

from .errors import NumericalError


class LinearOperator:
    """A symmetric linear map on R^dim exposed as a callable.

    Linearity and symmetry are not checked on every application; the test
    suite verifies both for every operator family fed to `cg_solve`.
    """

    __slots__ = ("dim", "_apply")

    def __init__(self, dim: int, apply: Callable[[np.ndarray], np.ndarray]):
        if dim < 1:
            raise ValueError(f"operator dimension must be >= 1, got {dim}")
        self.dim = int(dim)
        self._apply = apply

    def __call__(self, v: np.ndarray) -> np.ndarray:
        return self._apply(v)


def matrix_operator(a) -> LinearOperator:
    """Wrap a dense symmetric matrix as a LinearOperator."""
    a = np.asarray(a, dtype=np.float64)
    if a.ndim != 2 or a.shape[0] != a.shape[1]:
        raise ValueError(f"expected a square matrix, got shape {a.shape}")
    return LinearOperator(a.shape[0], lambda v: a @ v)


class CgResult(NamedTuple):
    x: np.ndarray
    residual_norm: float
    iters_used: int


def cg_solve(op: LinearOperator, b, max_iters: int, tol: float = 0.0) -> CgResult:
    """Solve op(x) = b by conjugate gradients started from x0 = 0.

    Iterates until the residual norm drops to tol * ||b|| or `max_iters`
    steps have run, whichever comes first.  The returned residual norm is
    recomputed explicitly as ||b - op(x)|| at exit.  All reductions are
    plain float64 dot products, so identical inputs give bit-identical
    results.
    """
    b = np.ascontiguousarray(b, dtype=np.float64)
    if b.ndim != 1:
        raise ValueError(f"right-hand side must be a vector, got shape {b.shape}")
    if op.dim != b.size:
        raise ValueError(
            f"dimension mismatch: operator is {op.dim}, vector is {b.size}")
    if max_iters < 1:
        raise ValueError(f"max_iters must be >= 1, got {max_iters}")
    if tol < 0:
        raise ValueError(f"tol must be nonnegative, got {tol}")

    norm_b = float(np.linalg.norm(b))
    threshold = tol * norm_b
    x = np.zeros_like(b)
    if norm_b <= threshold:
        return CgResult(x, norm_b, 0)

    r = b.copy()
    d = r.copy()
    rs = float(r @ r)
    iters = 0
    for k in range(1, max_iters + 1):
        ad = op(d)
        curvature = float(d @ ad)
        if not np.isfinite(curvature) or curvature <= 0.0:
            raise NumericalError(
                f"conjugate gradient breakdown at iteration {k}: "
                f"curvature {curvature}")
        alpha = rs / curvature
        x = x + alpha * d
        r = r - alpha * ad
        rs_new = float(r @ r)
        if not np.isfinite(rs_new):
            raise NumericalError(f"non-finite residual at iteration {k}")
        iters = k
        if np.sqrt(rs_new) <= threshold:
            break
        d = r + (rs_new / rs) * d
        rs = rs_new

    residual = b - op(x)
    return CgResult(x, float(np.linalg.norm(residual)), iters)


def dense_spd_solve(a, b) -> np.ndarray:
    """Solve a @ x = b for symmetric positive definite `a` via Cholesky.

    Direct-factorization oracle for `cg_solve` and the Newton step; meant
    for small systems only.
    """
    a = np.asarray(a, dtype=np.float64)
    b = np.ascontiguousarray(b, dtype=np.float64)
    if a.ndim != 2 or a.shape[0] != a.shape[1]:
        raise ValueError(f"expected a square matrix, got shape {a.shape}")
    if b.shape != (a.shape[0],):
        raise ValueError(
            f"dimension mismatch: matrix is {a.shape}, vector is {b.shape}")
    scale = max(1.0, float(np.abs(a).max()))
    if not np.allclose(a, a.T, rtol=0.0, atol=1e-10 * scale):
        raise ValueError("matrix is not symmetric within 1e-10")
    try:
        lower = np.linalg.cholesky(a)
    except np.linalg.LinAlgError as exc:
        raise NumericalError(f"matrix is not positive definite: {exc}") from exc
    y = np.linalg.solve(lower, b)
    return np.linalg.solve(lower.T, y)
