"""Complex tensor plumbing: vectorization, Kronecker algebra, real embeddings.

Conventions used throughout the package:

* vec() is column-major (first index fastest), matching the identity
  vec(A X B) = (B^T kron A) vec(X).
* A rank-3 tensor indexed (f, a, b) has two flattenings: the plain
  column-major one (``vectorize``), and the per-leading-slice stacking
  ``vec_by_slice`` = [vec(T[0]); vec(T[1]); ...] used as the canonical
  parameter ordering wherever block-diagonal (per-subcarrier) structure
  matters.
* The real embedding of a complex vector z is [Re z; Im z] (concatenated
  halves), and scores convert between the embedding gradient and the
  conjugate-Wirtinger gradient via
      d/dz* = 0.5 * (d/dRe z + 1j * d/dIm z).

Everything is float64 / complex128.
"""

from __future__ import annotations

import numpy as np
from scipy.linalg import block_diag

__all__ = [
    "vectorize",
    "unvectorize",
    "vec_by_slice",
    "unvec_by_slice",
    "direct_sum",
    "kron",
    "complex_to_real",
    "real_to_complex",
    "real_to_complex_score",
    "complex_to_real_score",
    "expand_hermitian",
]


def vectorize(t: np.ndarray) -> np.ndarray:
    """Column-major flattening (first index fastest). Inverse of unvectorize."""
    return np.asarray(t).reshape(-1, order="F")


def unvectorize(v: np.ndarray, shape: tuple) -> np.ndarray:
    """Reassemble a column-major flattened array. Rejects size mismatch."""
    v = np.asarray(v)
    if v.size != int(np.prod(shape)):
        raise ValueError(f"cannot unvectorize length {v.size} into shape {shape}")
    return v.reshape(shape, order="F")


def vec_by_slice(t: np.ndarray) -> np.ndarray:
    """Stack column-major vecs of the leading-axis slices: [vec(t[0]); vec(t[1]); ...].

    For a tensor indexed (f, a, b) this is the canonical parameter ordering:
    subcarrier-blocked with the within-slice vec column-major (a fastest).
    """
    t = np.asarray(t)
    if t.ndim < 2:
        raise ValueError("vec_by_slice needs at least 2 axes")
    # moving the leading axis last makes it the slowest column-major index
    return np.moveaxis(t, 0, -1).reshape(-1, order="F")


def unvec_by_slice(v: np.ndarray, shape: tuple) -> np.ndarray:
    """Inverse of vec_by_slice for a tensor of the given (f, a, b, ...) shape."""
    v = np.asarray(v)
    if v.size != int(np.prod(shape)):
        raise ValueError(f"cannot unstack length {v.size} into shape {shape}")
    inner = tuple(shape[1:]) + (shape[0],)
    return np.moveaxis(v.reshape(inner, order="F"), -1, 0)


def direct_sum(blocks) -> np.ndarray:
    """Block-diagonal direct sum of square or rectangular matrices."""
    blocks = [np.atleast_2d(b) for b in blocks]
    if not blocks:
        raise ValueError("direct_sum of no blocks")
    return block_diag(*blocks)


def kron(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    """Kronecker product, thin alias kept for symmetry with direct_sum."""
    return np.kron(a, b)


def complex_to_real(z: np.ndarray) -> np.ndarray:
    """Real embedding [Re z; Im z] of a complex vector (last axis doubled)."""
    z = np.asarray(z)
    return np.concatenate([z.real, z.imag], axis=-1)


def real_to_complex(v: np.ndarray) -> np.ndarray:
    """Inverse of complex_to_real. Requires even last-axis length."""
    v = np.asarray(v)
    n = v.shape[-1]
    if n % 2:
        raise ValueError("real embedding must have even length")
    return v[..., : n // 2] + 1j * v[..., n // 2 :]


def real_to_complex_score(g: np.ndarray) -> np.ndarray:
    """Map a real-embedding gradient to the conjugate-Wirtinger gradient.

    For real f(z), with g = [df/dRe z; df/dIm z]:
        d f / d z* = 0.5 * (df/dRe z + 1j * df/dIm z)
    """
    g = np.asarray(g)
    n = g.shape[-1]
    if n % 2:
        raise ValueError("real gradient must have even length")
    return 0.5 * (g[..., : n // 2] + 1j * g[..., n // 2 :])


def complex_to_real_score(s: np.ndarray) -> np.ndarray:
    """Map a conjugate-Wirtinger gradient back to the real-embedding gradient.

    Inverse of real_to_complex_score: [2 Re s; 2 Im s].
    """
    s = np.asarray(s)
    return np.concatenate([2.0 * s.real, 2.0 * s.imag], axis=-1)


def expand_hermitian(m: np.ndarray) -> np.ndarray:
    """Real block expansion [[Re M, -Im M], [Im M, Re M]] of a complex matrix.

    For Hermitian M this is the symmetric real matrix acting on [Re z; Im z]
    the way M acts on z.
    """
    m = np.asarray(m)
    return np.block([[m.real, -m.imag], [m.imag, m.real]])
