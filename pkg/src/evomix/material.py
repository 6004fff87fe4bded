"""
Material laws ``M(d0^-1) = M0 + d0^-1 M1`` with block-diagonal coefficients.

Both operators are stored as :class:`BlockDiagonal` matrices: groups of small
dense blocks, each acting on a contiguous run of unknowns. The pointwise media
of the catalog use one block per cell in the layout ``(E, H)`` (electromagnetic)
or ``(v, T)`` with ``T`` in Mandel coordinates (elastic). Assembled systems
reuse the same type with their own block layout.

Admissibility means ``nu M0 + sym(M1) >= eta > 0``; for block-diagonal laws
the smallest eigenvalue is computed exactly block by block.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
import scipy.sparse as sp

SYMMETRY_TOL = 1.0e-14
NU_SCAN = tuple(2.0 ** k for k in range(11))


class InadmissibleMaterial(ValueError):
    """A material law violating the positivity requirements."""


@dataclass(frozen=True, eq=False)
class BlockDiagonal:
    """Direct sum of dense blocks.

    ``groups`` is a tuple of ``(starts, blocks)`` pairs with ``blocks`` of
    shape ``(nb, k, k)``; block ``b`` of a group acts on unknowns
    ``starts[b] : starts[b] + k``.
    """

    groups: tuple
    size: int

    @classmethod
    def uniform(cls, blocks, offset: int = 0) -> "BlockDiagonal":
        blocks = np.asarray(blocks, dtype=float)
        if blocks.ndim == 2:
            blocks = blocks[None]
        nb, k, _ = blocks.shape
        starts = offset + k * np.arange(nb)
        return cls(((starts, blocks),), offset + nb * k)

    @classmethod
    def direct_sum(cls, *parts: "BlockDiagonal") -> "BlockDiagonal":
        groups, offset = [], 0
        for part in parts:
            for starts, blocks in part.groups:
                groups.append((starts + offset, blocks))
            offset += part.size
        return cls(tuple(groups), offset)

    def _same_structure(self, other: "BlockDiagonal") -> bool:
        return self.size == other.size and len(self.groups) == len(other.groups) and all(
            np.array_equal(s1, s2) and b1.shape == b2.shape
            for (s1, b1), (s2, b2) in zip(self.groups, other.groups)
        )

    def __add__(self, other: "BlockDiagonal") -> "BlockDiagonal":
        if not self._same_structure(other):
            raise ValueError("block structures differ")
        return BlockDiagonal(
            tuple((s, b1 + b2) for (s, b1), (_, b2) in zip(self.groups, other.groups)),
            self.size,
        )

    def scaled(self, factor: float) -> "BlockDiagonal":
        return BlockDiagonal(tuple((s, factor * b) for s, b in self.groups), self.size)

    def transpose(self) -> "BlockDiagonal":
        return BlockDiagonal(tuple((s, np.swapaxes(b, 1, 2)) for s, b in self.groups), self.size)

    def sym(self) -> "BlockDiagonal":
        return BlockDiagonal(
            tuple((s, 0.5 * (b + np.swapaxes(b, 1, 2))) for s, b in self.groups), self.size
        )

    def asymmetry(self) -> float:
        """Largest ``|B - B^T| / |B|`` over all blocks (max-entry norms)."""
        worst = 0.0
        for _, b in self.groups:
            if not b.size:
                continue
            scale = np.maximum(np.abs(b).max(axis=(1, 2)), np.finfo(float).tiny)
            diff = np.abs(b - np.swapaxes(b, 1, 2)).max(axis=(1, 2))
            worst = max(worst, float(np.max(diff / scale)))
        return worst

    def to_sparse(self) -> sp.csr_matrix:
        rows, cols, vals = [], [], []
        for starts, blocks in self.groups:
            nb, k, _ = blocks.shape
            r = starts[:, None, None] + np.arange(k)[None, :, None]
            c = starts[:, None, None] + np.arange(k)[None, None, :]
            rows.append(np.broadcast_to(r, blocks.shape).ravel())
            cols.append(np.broadcast_to(c, blocks.shape).ravel())
            vals.append(blocks.ravel())
        if not rows:
            return sp.csr_matrix((self.size, self.size))
        mat = sp.coo_matrix(
            (np.concatenate(vals), (np.concatenate(rows), np.concatenate(cols))),
            shape=(self.size, self.size),
        ).tocsr()
        mat.eliminate_zeros()
        return mat

    def todense(self) -> np.ndarray:
        return self.to_sparse().toarray()

    def min_eig(self):
        """Smallest eigenvalue of a symmetric block diagonal and a unit eigenvector."""
        best, witness = np.inf, np.zeros(self.size)
        for starts, blocks in self.groups:
            if not len(blocks):
                continue
            lam, vec = np.linalg.eigh(blocks)
            b = int(np.argmin(lam[:, 0]))
            if lam[b, 0] < best:
                best = float(lam[b, 0])
                witness = np.zeros(self.size)
                k = blocks.shape[1]
                witness[starts[b]:starts[b] + k] = vec[b, :, 0]
        return best, witness


@dataclass(frozen=True, eq=False)
class MaterialLaw:
    M0: BlockDiagonal
    M1: BlockDiagonal
    labels: tuple = ()

    def __post_init__(self):
        if self.M0.size != self.M1.size:
            raise ValueError("M0 and M1 act on different spaces")

    def __add__(self, other: "MaterialLaw") -> "MaterialLaw":
        labels = self.labels + tuple(l for l in other.labels if l not in self.labels)
        return MaterialLaw(self.M0 + other.M0, self.M1 + other.M1, labels)

    @property
    def n_blocks(self) -> int:
        return sum(len(s) for s, _ in self.M0.groups)


@dataclass(frozen=True, eq=False)
class AdmissibilityReport:
    eta: float
    nu_used: float
    admissible: bool
    witness: np.ndarray

    def __str__(self):
        flag = "admissible" if self.admissible else "NOT admissible"
        return f"eta = {self.eta:.6g} at nu = {self.nu_used:g}: {flag}"


def check_evo_positivity(law: MaterialLaw, nu: float) -> AdmissibilityReport:
    """Smallest eigenvalue of ``nu M0 + sym(M1)``; admissible iff positive."""
    if not nu > 0:
        raise ValueError(f"nu must be positive, got {nu}")
    asym = law.M0.asymmetry()
    if asym > SYMMETRY_TOL:
        raise InadmissibleMaterial(f"M0 is not symmetric (relative asymmetry {asym:.3e})")
    eta, witness = (law.M0.scaled(nu) + law.M1.sym()).min_eig()
    return AdmissibilityReport(eta, float(nu), bool(eta > 0.0), witness)


def smallest_admissible_nu(law: MaterialLaw, candidates=NU_SCAN) -> AdmissibilityReport | None:
    """First ``nu`` of ``candidates`` at which the law is admissible, if any."""
    for nu in candidates:
        report = check_evo_positivity(law, nu)
        if report.admissible:
            return report
    return None


def _tensor_field(x, dim: int, name: str) -> np.ndarray:
    """Coerce a scalar / per-cell scalar / matrix / per-cell matrix to ``(nb, dim, dim)``."""
    x = np.asarray(x, dtype=float)
    eye = np.eye(dim)
    if x.ndim == 0:
        return (x * eye)[None]
    if x.ndim == 1:
        return x[:, None, None] * eye
    if x.ndim == 2 and x.shape == (dim, dim):
        return x[None]
    if x.ndim == 3 and x.shape[1:] == (dim, dim):
        return x
    raise ValueError(f"{name}: cannot interpret shape {x.shape} as {dim}x{dim} coefficients")


def _broadcast(*fields):
    nb = max(len(f) for f in fields)
    out = []
    for f in fields:
        if len(f) not in (1, nb):
            raise ValueError("per-cell coefficient arrays have inconsistent lengths")
        out.append(np.broadcast_to(f, (nb,) + f.shape[1:]))
    return out


def _block2(a, b, c, d) -> np.ndarray:
    return np.concatenate([np.concatenate([a, b], axis=2), np.concatenate([c, d], axis=2)], axis=1)


def _require_symmetric(x: np.ndarray, name: str):
    scale = np.maximum(np.abs(x).max(axis=(1, 2)), 1.0)
    if np.any(np.abs(x - np.swapaxes(x, 1, 2)).max(axis=(1, 2)) > SYMMETRY_TOL * scale):
        raise InadmissibleMaterial(f"{name} must be symmetric")


def _eig_bounds(x: np.ndarray):
    lam = np.linalg.eigvalsh(x)
    return lam[:, 0], lam[:, -1]


def _em_dim(*values) -> int:
    for v in values:
        v = np.asarray(v)
        if v.ndim >= 2:
            return v.shape[-1]
    return 3


def make_isotropic_em(epsilon, mu, sigma=0.0) -> MaterialLaw:
    """``M0 = diag(eps, mu)``, ``M1 = diag(sigma, 0)`` per cell, layout ``(E, H)``."""
    dim = _em_dim(epsilon, mu, sigma)
    eps, mu_, sig = _broadcast(*(_tensor_field(x, dim, n) for x, n in
                                 ((epsilon, "epsilon"), (mu, "mu"), (sigma, "sigma"))))
    _require_symmetric(eps, "epsilon")
    _require_symmetric(mu_, "mu")
    lo_mu, hi_mu = _eig_bounds(mu_)
    if np.any(lo_mu <= 0.0):
        raise InadmissibleMaterial("mu must be positive definite")
    lo_eps, hi_eps = _eig_bounds(eps)
    if np.any(lo_eps < -SYMMETRY_TOL * np.maximum(hi_eps, 1.0)):
        raise InadmissibleMaterial("epsilon must be nonnegative")
    z = np.zeros_like(eps)
    return MaterialLaw(
        BlockDiagonal.uniform(_block2(eps, z, z, mu_)),
        BlockDiagonal.uniform(_block2(sig, z, z, z)),
        ("epsilon", "mu", "sigma"),
    )


BIANISOTROPIC_TOL = 1.0e-12


def bianisotropic_coupling_norm(epsilon, mu, kappa) -> np.ndarray:
    """Per-cell spectral norm of ``mu^-1/2 kappa eps^-1/2``."""
    dim = _em_dim(epsilon, mu, kappa)
    eps, mu_, kap = _broadcast(*(_tensor_field(x, dim, n) for x, n in
                                 ((epsilon, "epsilon"), (mu, "mu"), (kappa, "kappa"))))

    def inv_sqrt(x):
        lam, vec = np.linalg.eigh(x)
        with np.errstate(divide="ignore"):
            d = np.where(lam > 0, 1.0 / np.sqrt(np.where(lam > 0, lam, 1.0)), np.inf)
        return np.einsum("bij,bj,bkj->bik", vec, d, vec)

    prod = inv_sqrt(mu_) @ kap @ inv_sqrt(eps)
    return np.linalg.norm(np.nan_to_num(prod, nan=np.inf), ord=2, axis=(1, 2))


def make_bianisotropic(epsilon, mu, kappa, sigma=0.0) -> MaterialLaw:
    """``M0 = [[eps, kappa^T], [kappa, mu]]`` subject to ``|mu^-1/2 kappa eps^-1/2| <= 1``.

    Where ``eps`` is singular the bound is checked as ``M0 >= 0`` directly.
    """
    base = make_isotropic_em(epsilon, mu, sigma)
    (_, blocks), = base.M0.groups
    dim = blocks.shape[1] // 2
    kap = _tensor_field(kappa, dim, "kappa")
    eps, mu_, kap = _broadcast(blocks[:, :dim, :dim], blocks[:, dim:, dim:], kap)
    m0 = _block2(eps, np.swapaxes(kap, 1, 2), kap, mu_)

    lo_eps, _ = _eig_bounds(eps)
    regular = lo_eps > 0
    ok = np.ones(len(m0), dtype=bool)
    if np.any(regular):
        ok[regular] = bianisotropic_coupling_norm(eps[regular], mu_[regular], kap[regular]) \
            <= 1.0 + BIANISOTROPIC_TOL
    if np.any(~regular):
        lo, hi = _eig_bounds(m0[~regular])
        ok[~regular] = lo >= -BIANISOTROPIC_TOL * np.maximum(hi, 1.0)
    if not np.all(ok):
        raise InadmissibleMaterial(
            f"bi-anisotropic coupling exceeds |mu^-1/2 kappa eps^-1/2| <= 1 "
            f"in {np.count_nonzero(~ok)} cell(s)"
        )
    (_, m1), = base.M1.groups
    m1 = np.broadcast_to(m1, m0.shape)
    return MaterialLaw(BlockDiagonal.uniform(m0), BlockDiagonal.uniform(m1),
                       ("epsilon", "mu", "sigma", "kappa"))


def _fragment(m1: np.ndarray, label: str) -> MaterialLaw:
    return MaterialLaw(BlockDiagonal.uniform(np.zeros_like(m1)), BlockDiagonal.uniform(m1), (label,))


def make_chiral(chi) -> MaterialLaw:
    """``M1 = [[0, -chi], [chi, 0]]`` with ``chi`` symmetric (an M1-only fragment)."""
    c = _tensor_field(chi, _em_dim(chi), "chi")
    _require_symmetric(c, "chiral chi")
    return _fragment(_block2(np.zeros_like(c), -c, c, np.zeros_like(c)), "chi")


def make_omega(chi) -> MaterialLaw:
    """``M1 = [[0, chi], [chi, 0]]`` with ``chi`` skew (an M1-only fragment)."""
    c = _tensor_field(chi, _em_dim(chi), "chi")
    scale = np.maximum(np.abs(c).max(axis=(1, 2)), 1.0)
    if np.any(np.abs(c + np.swapaxes(c, 1, 2)).max(axis=(1, 2)) > SYMMETRY_TOL * scale):
        raise InadmissibleMaterial("omega-medium chi must be skew-symmetric")
    return _fragment(_block2(np.zeros_like(c), c, c, np.zeros_like(c)), "chi")


def isotropic_stiffness(lam: float, mu: float) -> np.ndarray:
    """Lame stiffness ``C T = 2 mu T + lam tr(T) I`` in Mandel coordinates."""
    c = 2.0 * mu * np.eye(6)
    c[:3, :3] += lam
    return c


def make_elastic(rho, stiffness) -> MaterialLaw:
    """``M0 = diag(rho, C^-1)`` per cell in the ``(v, T)`` layout, ``M1 = 0``."""
    r = _tensor_field(rho, 3, "rho")
    c = np.asarray(stiffness, dtype=float)
    if c.shape == (6, 6):
        c = c[None]
    if c.ndim != 3 or c.shape[1:] != (6, 6):
        raise ValueError(f"stiffness must be 6x6 (Mandel) per cell, got {c.shape}")
    r, c = _broadcast(r, c)
    _require_symmetric(r, "rho")
    _require_symmetric(c, "stiffness")
    lo, _ = _eig_bounds(r)
    if np.any(lo <= 0):
        raise InadmissibleMaterial("mass density must be positive definite")
    lo, hi = _eig_bounds(c)
    if np.any(lo <= 1.0e-12 * hi):
        raise InadmissibleMaterial("stiffness tensor must be positive definite")
    cinv = np.linalg.inv(c)
    cinv = 0.5 * (cinv + np.swapaxes(cinv, 1, 2))
    z36 = np.zeros((len(r), 3, 6))
    m0 = _block2(r, z36, np.swapaxes(z36, 1, 2), cinv)
    return MaterialLaw(BlockDiagonal.uniform(m0), BlockDiagonal.uniform(np.zeros_like(m0)),
                       ("rho", "compliance"))
