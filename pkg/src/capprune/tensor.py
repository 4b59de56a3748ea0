"""Dense array kernels used by the rest of the package.

Arrays are plain :class:`numpy.ndarray` values. Weights and features are kept
in float32; statistics and factorizations run in float64.

Flattened-row convention
------------------------
:func:`im2col` lays out a receptive field channel-major: rows
``c*k*k .. c*k*k + k*k - 1`` belong to input channel ``c`` and within a channel
the kernel positions follow row-major ``(kh, kw)`` order. This is the same
order produced by ``weight.reshape(C_out, -1)`` for a ``C_out x C_in x k x k``
kernel, and every channel-to-row mapping in the package relies on it.
"""
from __future__ import annotations

import numpy as np
from scipy.linalg import solve_triangular

from .errors import NotPositiveDefiniteError, ShapeError

SYMMETRY_RTOL = 1e-9
DIAG_RTOL = 1e-14


def matmul(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    """Matrix product of two 2-D arrays with a dimension check."""
    a = np.asarray(a)
    b = np.asarray(b)
    if a.ndim != 2 or b.ndim != 2:
        raise ShapeError(f"matmul expects 2-D operands, got {a.shape} and {b.shape}")
    if a.shape[1] != b.shape[0]:
        raise ShapeError(f"inner dimensions differ: {a.shape} x {b.shape}")
    return a @ b


def conv_output_size(size: int, kernel: int, stride: int, padding: int) -> int:
    padded = size + 2 * padding
    if padded < kernel:
        raise ShapeError(f"kernel {kernel} larger than padded input extent {padded}")
    return (padded - kernel) // stride + 1


def im2col(x: np.ndarray, kernel: int, stride: int = 1, padding: int = 0) -> np.ndarray:
    """Unfold an NCHW batch into a ``(C*k*k, N*H_out*W_out)`` patch matrix.

    Column ``n*H_out*W_out + i*W_out + j`` holds the receptive field of output
    position ``(i, j)`` of image ``n``.
    """
    x = np.asarray(x)
    if x.ndim != 4:
        raise ShapeError(f"im2col expects NCHW input, got shape {x.shape}")
    if kernel < 1 or stride < 1 or padding < 0:
        raise ShapeError(f"invalid kernel/stride/padding ({kernel}, {stride}, {padding})")
    n, c, h, w = x.shape
    h_out = conv_output_size(h, kernel, stride, padding)
    w_out = conv_output_size(w, kernel, stride, padding)
    if padding:
        x = np.pad(x, ((0, 0), (0, 0), (padding, padding), (padding, padding)))
    # windows: N, C, H_out', W_out', k, k
    windows = np.lib.stride_tricks.sliding_window_view(x, (kernel, kernel), axis=(2, 3))
    windows = windows[:, :, ::stride, ::stride][:, :, :h_out, :w_out]
    cols = windows.transpose(1, 4, 5, 0, 2, 3).reshape(c * kernel * kernel, n * h_out * w_out)
    return np.ascontiguousarray(cols)


def symmetrize(m: np.ndarray, rtol: float = SYMMETRY_RTOL) -> np.ndarray:
    m = np.asarray(m, dtype=np.float64)
    if m.ndim != 2 or m.shape[0] != m.shape[1]:
        raise ShapeError(f"expected a square matrix, got shape {m.shape}")
    scale = max(np.abs(m).max(initial=0.0), np.finfo(np.float64).tiny)
    if np.abs(m - m.T).max(initial=0.0) > rtol * scale:
        raise ShapeError("matrix is not symmetric within tolerance")
    return 0.5 * (m + m.T)


def cholesky(m: np.ndarray) -> np.ndarray:
    """Lower Cholesky factor of a symmetric positive-definite matrix.

    The input is symmetrized first. Raises :class:`NotPositiveDefiniteError`
    when a non-positive pivot is met.
    """
    m = symmetrize(m)
    if m.shape[0] == 0:
        return np.zeros((0, 0))
    if not np.all(np.isfinite(m)):
        raise NotPositiveDefiniteError("matrix has non-finite entries")
    try:
        lower = np.linalg.cholesky(m)
    except np.linalg.LinAlgError as exc:
        raise NotPositiveDefiniteError(str(exc)) from None
    diag = np.diag(lower)
    if not np.all(np.isfinite(lower)) or diag.min() <= DIAG_RTOL * diag.max():
        raise NotPositiveDefiniteError("near-zero pivot in Cholesky factorization")
    return lower


def _check_lower(l: np.ndarray) -> np.ndarray:
    l = np.asarray(l, dtype=np.float64)
    if l.ndim != 2 or l.shape[0] != l.shape[1]:
        raise ShapeError(f"expected a square matrix, got shape {l.shape}")
    if l.shape[0]:
        diag = np.diag(l)
        if diag.min() <= DIAG_RTOL * max(np.abs(diag).max(), 1e-300):
            raise NotPositiveDefiniteError("near-zero diagonal entry in triangular factor")
    return l


def tri_inverse(l: np.ndarray) -> np.ndarray:
    """Inverse of a lower-triangular matrix with positive diagonal."""
    l = _check_lower(l)
    return solve_triangular(l, np.eye(l.shape[0]), lower=True)


def cho_solve(lower: np.ndarray, rhs: np.ndarray) -> np.ndarray:
    """Solve ``(L L^T) x = rhs`` by a forward then a backward substitution."""
    z = solve_triangular(lower, rhs, lower=True)
    return solve_triangular(lower, z, lower=True, trans="T")
