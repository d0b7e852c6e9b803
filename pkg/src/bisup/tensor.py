"""Dense float64 tensor helpers.

Tensors are plain ``numpy.ndarray`` objects of dtype float64.  The helpers
here fix the reduction order of every product so results are bit-for-bit
reproducible regardless of the BLAS build or thread count.
"""
from __future__ import annotations

import struct
from dataclasses import dataclass
from typing import BinaryIO

import numpy as np

from .errors import NumericError, ShapeError

Tensor = np.ndarray

TENSOR_MAGIC = b"BSTN"

SVD_MAX_SWEEPS = 100
SVD_TOL = 1e-12


def as_tensor(x, shape=None) -> Tensor:
    t = np.asarray(x, dtype=np.float64)
    if shape is not None and t.shape != tuple(shape):
        raise ShapeError(f"expected shape {tuple(shape)}, got {t.shape}")
    return t


def matmul(a: Tensor, b: Tensor) -> Tensor:
    """Matrix product with a fixed accumulation order.

    Accepts stacked operands (``(..., m, k) @ (..., k, n)``) with numpy
    broadcasting over leading dimensions.  Every output element is
    accumulated as ``((a0*b0 + a1*b1) + a2*b2) + ...``, the same order as a
    naive triple loop.
    """
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    if a.ndim < 2 or b.ndim < 2:
        raise ShapeError(f"matmul needs >=2-d operands, got {a.shape} and {b.shape}")
    k = a.shape[-1]
    if b.shape[-2] != k:
        raise ShapeError(f"inner dimensions differ: {a.shape} @ {b.shape}")
    if k == 0:
        lead = np.broadcast_shapes(a.shape[:-2], b.shape[:-2])
        return np.zeros(lead + (a.shape[-2], b.shape[-1]))
    out = a[..., :, 0:1] * b[..., 0:1, :]
    for i in range(1, k):
        out += a[..., :, i : i + 1] * b[..., i : i + 1, :]
    return out


def softmax_rows(a: Tensor) -> Tensor:
    """Softmax over the last axis with max subtraction.  ``-inf`` entries get weight 0."""
    a = np.asarray(a, dtype=np.float64)
    shifted = a - np.max(a, axis=-1, keepdims=True)
    e = np.exp(shifted)
    return e / np.sum(e, axis=-1, keepdims=True)


def rmsnorm(x: Tensor, weight: Tensor, eps: float = 1e-6) -> Tensor:
    x = np.asarray(x, dtype=np.float64)
    weight = np.asarray(weight, dtype=np.float64)
    if weight.shape != x.shape[-1:]:
        raise ShapeError(f"rmsnorm weight {weight.shape} does not match last dim of {x.shape}")
    inv = 1.0 / np.sqrt(np.mean(x * x, axis=-1, keepdims=True) + eps)
    return (x * inv) * weight


@dataclass(frozen=True)
class SvdResult:
    u: Tensor
    singular_values: Tensor
    v_t: Tensor

    @property
    def rank(self) -> int:
        return len(self.singular_values)

    def reconstruct(self) -> Tensor:
        return matmul(self.u * self.singular_values, self.v_t)


def _orthonormal_completion(cols: Tensor, missing: np.ndarray) -> Tensor:
    """Replace the columns flagged in ``missing`` by unit vectors orthogonal to the rest."""
    cols = cols.copy()
    m = cols.shape[0]
    basis = [cols[:, j] for j in range(cols.shape[1]) if not missing[j]]
    candidates = iter(np.eye(m))
    for j in np.flatnonzero(missing):
        while True:
            v = next(candidates).copy()
            for _ in range(2):
                for q in basis:
                    v -= np.dot(q, v) * q
            nrm = np.linalg.norm(v)
            if nrm > 1e-6:
                break
        v /= nrm
        cols[:, j] = v
        basis.append(v)
    return cols


def _jacobi_svd(a: Tensor) -> tuple[Tensor, Tensor, Tensor]:
    # one-sided (Hestenes) Jacobi on the columns of a; requires m >= n
    m, n = a.shape
    work = a.copy()
    v = np.eye(n)
    for sweep in range(1, SVD_MAX_SWEEPS + 1):
        rotated = False
        for i in range(n - 1):
            for j in range(i + 1, n):
                ci = work[:, i]
                cj = work[:, j]
                alpha = np.dot(ci, ci)
                beta = np.dot(cj, cj)
                gamma = np.dot(ci, cj)
                if gamma == 0.0 or abs(gamma) <= SVD_TOL * np.sqrt(alpha * beta):
                    continue
                rotated = True
                zeta = (beta - alpha) / (2.0 * gamma)
                t = np.copysign(1.0, zeta) / (abs(zeta) + np.sqrt(1.0 + zeta * zeta))
                c = 1.0 / np.sqrt(1.0 + t * t)
                s = c * t
                new_i = c * ci - s * cj
                work[:, j] = s * ci + c * cj
                work[:, i] = new_i
                vi = v[:, i].copy()
                v[:, i] = c * vi - s * v[:, j]
                v[:, j] = s * vi + c * v[:, j]
        if not rotated:
            break
    else:
        raise NumericError(f"Jacobi SVD did not converge after {SVD_MAX_SWEEPS} sweeps")
    sigma = np.linalg.norm(work, axis=0)
    order = np.argsort(-sigma, kind="stable")
    sigma = sigma[order]
    work = work[:, order]
    v = v[:, order]
    scale = sigma.max() if n else 0.0
    tiny = sigma <= max(scale, 1.0) * 1e-14 * max(m, n)
    u = np.zeros_like(work)
    u[:, ~tiny] = work[:, ~tiny] / sigma[~tiny]
    if tiny.any():
        sigma = np.where(tiny, 0.0, sigma)
        u = _orthonormal_completion(u, tiny)
    return u, sigma, v.T


def svd_truncated(e: Tensor, r: int) -> SvdResult:
    """Top-``r`` singular triplets of a matrix via one-sided Jacobi rotations."""
    e = np.asarray(e, dtype=np.float64)
    if e.ndim != 2:
        raise ShapeError(f"svd needs a matrix, got shape {e.shape}")
    if not np.all(np.isfinite(e)):
        raise NumericError("svd input contains non-finite values")
    d1, d2 = e.shape
    if not 1 <= r <= min(d1, d2):
        raise ShapeError(f"rank {r} outside [1, {min(d1, d2)}] for shape {e.shape}")
    if d1 >= d2:
        u, s, vt = _jacobi_svd(e)
    else:
        v, s, ut = _jacobi_svd(e.T)
        u, vt = ut.T, v.T
    return SvdResult(u=u[:, :r].copy(), singular_values=s[:r].copy(), v_t=vt[:r].copy())


def write_tensor(fh: BinaryIO, t: Tensor) -> None:
    t = np.asarray(t, dtype=np.float64)
    fh.write(TENSOR_MAGIC)
    fh.write(struct.pack("<I", t.ndim))
    fh.write(struct.pack(f"<{t.ndim}Q", *t.shape))
    fh.write(np.ascontiguousarray(t, dtype="<f8").tobytes())


def _read_exact(fh: BinaryIO, n: int) -> bytes:
    buf = fh.read(n)
    if len(buf) != n:
        raise ValueError("unexpected end of tensor stream")
    return buf


def read_tensor(fh: BinaryIO) -> Tensor:
    magic = _read_exact(fh, 4)
    if magic != TENSOR_MAGIC:
        raise ValueError(f"bad tensor magic {magic!r}")
    (rank,) = struct.unpack("<I", _read_exact(fh, 4))
    dims = struct.unpack(f"<{rank}Q", _read_exact(fh, 8 * rank))
    count = int(np.prod(dims, dtype=np.int64)) if rank else 1
    data = np.frombuffer(_read_exact(fh, 8 * count), dtype="<f8")
    return data.reshape(dims).astype(np.float64)
