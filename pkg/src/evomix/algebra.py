"""
Pointwise 3x3 matrix algebra.

Matrices are plain ``numpy`` arrays of shape ``(..., 3, 3)``; every function
broadcasts over leading axes so the same code serves a single matrix and a
whole staggered tensor field.

Coordinates
-----------

``vec9`` lists the entries of ``T`` in the order

    (T00, T11, T22, T12, T20, T01, T21, T02, T10),

which is a permutation of the entries and hence an isometry for the Frobenius
norm. Symmetric matrices are stored with six orthonormal (Mandel) coordinates

    (T00, T11, T22, sqrt(2) T12, sqrt(2) T20, sqrt(2) T01),

so that the embedding of symmetric matrices into ``vec9`` is an isometry as
well. Skew matrices are identified with axial vectors through :func:`axial_to_skew`.
"""

from __future__ import annotations

import numpy as np

# flat (row-major) positions of the vec9 slots
VEC9_INDEX = np.array([0, 4, 8, 5, 6, 1, 7, 2, 3])
_VEC9_INVERSE = np.argsort(VEC9_INDEX)

SQRT2 = np.sqrt(2.0)

SKEW_TOL = 1.0e-12


class NotSkewError(ValueError):
    """Raised when an axial vector is requested from a non-skew matrix."""


def sym_part(w: np.ndarray) -> np.ndarray:
    w = np.asarray(w, dtype=float)
    return 0.5 * (w + np.swapaxes(w, -1, -2))


def skew_part(w: np.ndarray) -> np.ndarray:
    w = np.asarray(w, dtype=float)
    return 0.5 * (w - np.swapaxes(w, -1, -2))


def frobenius(t: np.ndarray, s: np.ndarray) -> np.ndarray:
    """Frobenius inner product ``trace(T^T S)``, batched over leading axes."""
    return np.einsum("...ij,...ij->...", np.asarray(t, float), np.asarray(s, float))


def vec9(t: np.ndarray) -> np.ndarray:
    t = np.asarray(t, dtype=float)
    return t.reshape(t.shape[:-2] + (9,))[..., VEC9_INDEX]


def mat3(x: np.ndarray) -> np.ndarray:
    x = np.asarray(x, dtype=float)
    return x[..., _VEC9_INVERSE].reshape(x.shape[:-1] + (3, 3))


def axial_to_skew(alpha: np.ndarray) -> np.ndarray:
    """The unitary map ``I`` from axial vectors onto skew matrices.

    ``(a1, a2, a3)`` is sent to ``[[0, -a3, a2], [a3, 0, -a1], [-a2, a1, 0]] / sqrt(2)``.
    """
    a = np.asarray(alpha, dtype=float)
    a1, a2, a3 = a[..., 0], a[..., 1], a[..., 2]
    z = np.zeros_like(a1)
    out = np.stack(
        [
            np.stack([z, -a3, a2], axis=-1),
            np.stack([a3, z, -a1], axis=-1),
            np.stack([-a2, a1, z], axis=-1),
        ],
        axis=-2,
    )
    return out / SQRT2


def skew_to_axial(s: np.ndarray, tol: float = SKEW_TOL) -> np.ndarray:
    """Inverse of :func:`axial_to_skew`.

    The input must already be skew; a symmetric remainder larger than
    ``tol * |S|_F`` raises :class:`NotSkewError` instead of being projected away.
    """
    s = np.asarray(s, dtype=float)
    sym = np.sqrt(frobenius(sym_part(s), sym_part(s)))
    scale = np.sqrt(frobenius(s, s))
    if np.any(sym > tol * scale):
        raise NotSkewError(
            f"matrix is not skew-symmetric (symmetric part {np.max(sym):.3e})"
        )
    return SQRT2 * np.stack([s[..., 2, 1], s[..., 0, 2], s[..., 1, 0]], axis=-1)


def cross(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    """Cross product written through the axial map: ``sqrt(2) I(a) b``."""
    return SQRT2 * np.einsum("...ij,...j->...i", axial_to_skew(a), np.asarray(b, float))


def _basis_columns(fn, n: int) -> np.ndarray:
    return np.stack([vec9(fn(np.eye(n)[k])) for k in range(n)], axis=1)


def _mandel_to_mat(s: np.ndarray) -> np.ndarray:
    s = np.asarray(s, dtype=float)
    r = 1.0 / SQRT2
    t = np.empty(s.shape[:-1] + (3, 3))
    t[..., 0, 0], t[..., 1, 1], t[..., 2, 2] = s[..., 0], s[..., 1], s[..., 2]
    t[..., 1, 2] = t[..., 2, 1] = r * s[..., 3]
    t[..., 2, 0] = t[..., 0, 2] = r * s[..., 4]
    t[..., 0, 1] = t[..., 1, 0] = r * s[..., 5]
    return t


def sym6_to_mat3(s: np.ndarray) -> np.ndarray:
    """Symmetric matrix from its Mandel coordinates."""
    return _mandel_to_mat(s)


def mat3_to_sym6(t: np.ndarray) -> np.ndarray:
    """Mandel coordinates of ``sym(T)``."""
    t = sym_part(t)
    return np.stack(
        [
            t[..., 0, 0],
            t[..., 1, 1],
            t[..., 2, 2],
            SQRT2 * t[..., 1, 2],
            SQRT2 * t[..., 2, 0],
            SQRT2 * t[..., 0, 1],
        ],
        axis=-1,
    )


# 9x6 embedding of symmetric matrices and 9x3 embedding of skew matrices
# (composed with I), both in vec9 coordinates and both with orthonormal columns.
SYM_EMBED = _basis_columns(_mandel_to_mat, 6)
SKEW_EMBED = _basis_columns(axial_to_skew, 3)
