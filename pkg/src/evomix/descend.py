"""
Mother-descendant congruences.

Given a skew block operator ``[[0, -C^*], [C, 0]]`` on ``H (+) Y`` and a
bounded ``B : Y -> X``, the descendant is obtained by congruence with
``diag(1, B)``. In finite dimensions every closure is the operator itself, so
the descendant is exactly ``[[0, -(BC)^*], [BC, 0]]``, expressed in an
orthonormal basis of the range ``B[Y]``.

All spaces are assumed to carry a uniform weight (one cell volume per
unknown), so adjoints with respect to the weighted inner products coincide
with plain transposes.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
import scipy.linalg
import scipy.sparse as sp

from .discrete_operators import DimensionError, SparseOperator, assemble_block_A, skew_residual
from .material import BlockDiagonal, MaterialLaw, check_evo_positivity

RANK_TOL = 1.0e-10


class RankDeficientError(ValueError):
    pass


@dataclass(frozen=True, eq=False)
class BoundedMap:
    """``B : Y -> X`` with an orthonormal basis of its range.

    ``range_basis`` is ``None`` when ``B`` is onto ``X``; the descendant then
    keeps the natural coordinates of ``X``.
    """

    matrix: object
    range_basis: np.ndarray | None

    @classmethod
    def from_matrix(cls, matrix, tol: float = RANK_TOL) -> "BoundedMap":
        if sp.issparse(matrix):
            matrix = sp.csr_matrix(matrix)
            if _orthogonal_rows(matrix):
                return cls(matrix, None)
            dense = matrix.toarray()
        else:
            matrix = np.atleast_2d(np.asarray(matrix, dtype=float))
            dense = matrix
        q, r, _ = scipy.linalg.qr(dense, pivoting=True, mode="economic")
        diag = np.abs(np.diag(r))
        norm = np.linalg.norm(dense, 2) if dense.size else 0.0
        rank = int(np.count_nonzero(diag > tol * norm)) if norm > 0 else 0
        if rank == dense.shape[0]:
            return cls(matrix, None)
        return cls(matrix, q[:, :rank])

    @property
    def shape(self):
        return self.matrix.shape

    @property
    def rank(self) -> int:
        return self.shape[0] if self.range_basis is None else self.range_basis.shape[1]

    def coordinates(self) -> np.ndarray | sp.csr_matrix:
        """``Q^T B``: the map into range coordinates."""
        if self.range_basis is None:
            return self.matrix
        return self.range_basis.T @ _dense(self.matrix)

    def adjoint_on_range(self) -> np.ndarray:
        """``B^* iota_{B[Y]}`` as a ``dim Y x rank`` matrix."""
        return _dense(self.coordinates()).T


def _dense(m):
    return m.toarray() if sp.issparse(m) else np.asarray(m)


def _orthogonal_rows(m: sp.csr_matrix) -> bool:
    """True when ``B B^T`` is diagonal and positive (B then has full row rank)."""
    g = (m @ m.T).tocsr()
    g.eliminate_zeros()
    d = g.diagonal()
    off = g - sp.diags(d)
    off.eliminate_zeros()
    return off.nnz == 0 and bool(np.all(d > 0))


def _uniform_weight(w: np.ndarray) -> float:
    if len(w) and not np.all(w == w[0]):
        raise ValueError("descendants require uniformly weighted spaces")
    return float(w[0]) if len(w) else 1.0


def descend_operator(C: SparseOperator, B: BoundedMap) -> SparseOperator:
    """Descendant ``[[0, -(BC)^*], [BC, 0]]`` on ``H (+) B[Y]`` coordinates."""
    if B.shape[1] != C.shape[0]:
        raise DimensionError(f"B {B.shape} cannot act on the range of C {C.shape}")
    w = _uniform_weight(np.concatenate([C.domain_weights, C.range_weights]))
    bc = B.coordinates() @ C.matrix
    lower = SparseOperator(bc, np.full(C.shape[1], w), np.full(B.rank, w), C.domain_layout)
    return assemble_block_A(-lower.adjoint(), lower)


def _congruence(m: BlockDiagonal, P) -> BlockDiagonal:
    dense = _dense(P @ m.to_sparse() @ P.T) if sp.issparse(P) else P @ m.todense() @ P.T
    return BlockDiagonal.uniform(dense)


def _lift(B: BoundedMap, dim_h: int):
    coords = B.coordinates()
    if sp.issparse(coords):
        return sp.block_diag([sp.identity(dim_h), coords], format="csr")
    return scipy.linalg.block_diag(np.eye(dim_h), coords)


def descend_material(M: MaterialLaw, B: BoundedMap) -> MaterialLaw:
    """``diag(1, B) M diag(1, B^*)`` restricted to ``H (+) B[Y]`` coordinates.

    The result is a single dense block; intended for small systems.
    """
    dim_h = M.M0.size - B.shape[1]
    if dim_h < 0:
        raise DimensionError(f"material of size {M.M0.size} is too small for B {B.shape}")
    P = _lift(B, dim_h)
    return MaterialLaw(_congruence(M.M0, P), _congruence(M.M1, P), M.labels)


def positivity_transfer_constant(c_star: float, B: BoundedMap) -> float:
    """``c_star * min(1, sigma_min(B^* on B[Y])^2)``."""
    if not c_star > 0:
        raise ValueError(f"c_star must be positive, got {c_star}")
    adj = B.adjoint_on_range()
    if adj.shape[1] == 0:
        raise RankDeficientError("B has a trivial range")
    smin = scipy.linalg.svdvals(adj)[-1] if adj.shape[1] <= adj.shape[0] else 0.0
    if smin <= RANK_TOL * max(scipy.linalg.svdvals(adj)[0], np.finfo(float).tiny):
        raise RankDeficientError("range basis is rank deficient")
    return float(c_star * min(1.0, smin ** 2))


@dataclass(frozen=True, eq=False)
class MotherSystem:
    C: SparseOperator
    M: MaterialLaw

    def __post_init__(self):
        if self.M.M0.size != sum(self.C.shape):
            raise DimensionError(
                f"material acts on {self.M.M0.size} unknowns, operator on {sum(self.C.shape)}"
            )

    @property
    def layout(self) -> tuple[int, int]:
        return self.C.shape[1], self.C.shape[0]


@dataclass(frozen=True)
class DescendantReport:
    skew_residual: float
    eta_mother: float
    eta: float
    c_tilde: float
    nu: float

    @property
    def holds(self) -> bool:
        return self.eta >= self.c_tilde - 1.0e-10


def verify_descendant(mother: MotherSystem, B: BoundedMap, nu: float = 1.0) -> DescendantReport:
    """Build the descendant and compare its positivity with the guaranteed bound."""
    mother_report = check_evo_positivity(mother.M, nu)
    if not mother_report.admissible:
        raise ValueError(f"mother system is not admissible at nu={nu}: {mother_report}")
    A = descend_operator(mother.C, B)
    law = descend_material(mother.M, B)
    m = nu * law.M0.todense() + 0.5 * (law.M1.todense() + law.M1.todense().T)
    eta = float(np.linalg.eigvalsh(0.5 * (m + m.T))[0])
    return DescendantReport(
        skew_residual=skew_residual(A),
        eta_mother=mother_report.eta,
        eta=eta,
        c_tilde=positivity_transfer_constant(mother_report.eta, B),
        nu=float(nu),
    )
