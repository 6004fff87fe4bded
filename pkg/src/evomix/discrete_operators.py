"""
Staggered-grid realisation of the Jacobian ``grad`` with zero extension and
of the operators derived from it.

Unknowns
--------

Vector fields (velocity ``v`` and electric field ``E``) sit at cell centres.
Tensor-valued quantities sit at *stagger points*: point ``p`` with integer
coordinates in ``[-1, n-1]`` per axis carries the nine one-sided differences

    (grad u)_{ij}(p) = (u_i(p + e_j) - u_i(p)) / h_j,

where cells outside the mask (including cells outside the grid) hold zero.
Component ``(i, j)`` therefore lives on the face between cells ``p`` and
``p + e_j``; all nine are indexed by the same ``p`` so that ``sym`` and
``skew`` act pointwise. Every vector cell and every stagger point stands for
one cell volume, which is the weight of the discrete L2 inner products.

``div``, ``Div`` and ``curl`` are never discretised independently. They are
weighted negative transposes of ``grad``-based operators, so every block
operator built from them is skew by construction.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from functools import cached_property

import numpy as np
import scipy.sparse as sp

from . import algebra

CELL_VECTOR = "cell_vector"
POINT_TENSOR9 = "point_tensor9"
POINT_SYM6 = "point_sym6"
POINT_VECTOR3 = "point_vector3"

_NCOMP = {CELL_VECTOR: 3, POINT_TENSOR9: 9, POINT_SYM6: 6, POINT_VECTOR3: 3}

ADJOINT_TOL = 1.0e-13


class DimensionError(ValueError):
    pass


@dataclass(frozen=True)
class StaggeredGrid:
    """Uniform box grid; ``spacing`` may differ per axis."""

    cells: tuple[int, int, int]
    spacing: tuple[float, float, float]
    origin: tuple[float, float, float] = (0.0, 0.0, 0.0)

    def __post_init__(self):
        cells = tuple(int(c) for c in self.cells)
        spacing = tuple(float(h) for h in self.spacing)
        origin = tuple(float(o) for o in self.origin)
        if len(cells) != 3 or len(spacing) != 3 or len(origin) != 3:
            raise ValueError("grid needs three axes")
        if min(cells) < 1:
            raise ValueError(f"cell counts must be >= 1, got {cells}")
        if min(spacing) <= 0.0:
            raise ValueError(f"spacing must be positive, got {spacing}")
        object.__setattr__(self, "cells", cells)
        object.__setattr__(self, "spacing", spacing)
        object.__setattr__(self, "origin", origin)

    @property
    def n_cells(self) -> int:
        return int(np.prod(self.cells))

    @property
    def point_shape(self) -> tuple[int, int, int]:
        return tuple(c + 1 for c in self.cells)

    @property
    def n_points(self) -> int:
        return int(np.prod(self.point_shape))

    @property
    def cell_volume(self) -> float:
        return float(np.prod(self.spacing))

    def cell_index(self, ijk) -> np.ndarray:
        return np.ravel_multi_index(tuple(np.asarray(ijk).T), self.cells)

    def point_index(self, pqr) -> np.ndarray:
        """Linear id of stagger point(s) ``p`` with coordinates in ``[-1, n-1]``."""
        return np.ravel_multi_index(tuple(np.asarray(pqr).T + 1), self.point_shape)

    def cell_coords(self, ids=None) -> np.ndarray:
        ids = np.arange(self.n_cells) if ids is None else np.asarray(ids)
        return np.stack(np.unravel_index(ids, self.cells), axis=-1)

    def point_coords(self, ids=None) -> np.ndarray:
        ids = np.arange(self.n_points) if ids is None else np.asarray(ids)
        return np.stack(np.unravel_index(ids, self.point_shape), axis=-1) - 1

    def cell_centers(self, ids=None) -> np.ndarray:
        h = np.asarray(self.spacing)
        return np.asarray(self.origin) + (self.cell_coords(ids) + 0.5) * h

    def component_positions(self, point_ids, j: int) -> np.ndarray:
        """Physical location of the derivative-``j`` components at stagger points."""
        h = np.asarray(self.spacing)
        x = np.asarray(self.origin) + (self.point_coords(point_ids) + 0.5) * h
        x[:, j] += 0.5 * h[j]
        return x

    def refined(self, factor: int = 2) -> "StaggeredGrid":
        return StaggeredGrid(
            tuple(c * factor for c in self.cells),
            tuple(h / factor for h in self.spacing),
            self.origin,
        )


@dataclass(frozen=True, eq=False)
class Layout:
    """Which grid sites a flat vector covers, ``ncomp`` values per site."""

    kind: str
    sites: np.ndarray
    ncomp: int

    @property
    def size(self) -> int:
        return len(self.sites) * self.ncomp

    def position(self, ids) -> np.ndarray:
        """Row of each site id inside this layout (``-1`` if absent)."""
        ids = np.asarray(ids)
        pos = np.searchsorted(self.sites, ids)
        pos = np.minimum(pos, len(self.sites) - 1)
        hit = self.sites[pos] == ids if len(self.sites) else np.zeros(ids.shape, bool)
        return np.where(hit, pos, -1)

    def with_kind(self, kind: str, sites=None) -> "Layout":
        return Layout(kind, self.sites if sites is None else np.asarray(sites), _NCOMP[kind])


@dataclass(frozen=True, eq=False)
class Field:
    layout: Layout
    values: np.ndarray

    def __post_init__(self):
        if self.values.shape != (self.layout.size,):
            raise DimensionError(
                f"{self.layout.kind} field needs {self.layout.size} values, "
                f"got {self.values.shape}"
            )
        if not np.all(np.isfinite(self.values)):
            raise ValueError("field values must be finite")

    def per_site(self) -> np.ndarray:
        return self.values.reshape(-1, self.layout.ncomp)


class SparseOperator:
    """Sparse linear map between weighted coordinate spaces.

    ``domain_weights`` and ``range_weights`` are the diagonal Gram matrices
    of the two spaces (one entry per scalar unknown). :meth:`adjoint` is the
    transpose with respect to those inner products.
    """

    def __init__(self, matrix, domain_weights=None, range_weights=None,
                 domain_layout: Layout | None = None, range_layout: Layout | None = None):
        self.matrix = sp.csr_matrix(matrix)
        m, n = self.matrix.shape
        self.domain_weights = np.ones(n) if domain_weights is None else np.asarray(domain_weights, float)
        self.range_weights = np.ones(m) if range_weights is None else np.asarray(range_weights, float)
        if self.domain_weights.shape != (n,) or self.range_weights.shape != (m,):
            raise DimensionError("weights do not match operator shape")
        if np.any(self.domain_weights <= 0) or np.any(self.range_weights <= 0):
            raise ValueError("weights must be positive")
        self.domain_layout = domain_layout
        self.range_layout = range_layout

    @property
    def shape(self):
        return self.matrix.shape

    @cached_property
    def _transpose(self):
        return self.matrix.T.tocsr()

    @property
    def T(self) -> "SparseOperator":
        """Plain transpose (weights and layouts swapped)."""
        return SparseOperator(self._transpose, self.range_weights, self.domain_weights,
                              self.range_layout, self.domain_layout)

    def adjoint(self) -> "SparseOperator":
        d = sp.diags(1.0 / self.domain_weights)
        w = sp.diags(self.range_weights)
        return SparseOperator(d @ self._transpose @ w, self.range_weights, self.domain_weights,
                              self.range_layout, self.domain_layout)

    def __matmul__(self, other):
        if isinstance(other, SparseOperator):
            if other.shape[0] != self.shape[1]:
                raise DimensionError(f"cannot compose {self.shape} with {other.shape}")
            return SparseOperator(self.matrix @ other.matrix, other.domain_weights,
                                  self.range_weights, other.domain_layout, self.range_layout)
        return self.matrix @ other

    def __neg__(self):
        return self.scaled(-1.0)

    def scaled(self, factor: float) -> "SparseOperator":
        return SparseOperator(factor * self.matrix, self.domain_weights, self.range_weights,
                              self.domain_layout, self.range_layout)

    def nnz_per_row(self) -> np.ndarray:
        return np.diff(self.matrix.indptr)

    def todense(self) -> np.ndarray:
        return self.matrix.toarray()


def _padded_mask(grid: StaggeredGrid, mask) -> np.ndarray:
    mask = np.asarray(mask, dtype=bool)
    if mask.shape != grid.cells:
        raise DimensionError(f"mask shape {mask.shape} does not match grid {grid.cells}")
    ext = np.zeros(tuple(c + 2 for c in grid.cells), dtype=bool)
    ext[1:-1, 1:-1, 1:-1] = mask
    return ext


def active_points(grid: StaggeredGrid, mask) -> np.ndarray:
    """Stagger points reached by ``grad`` of a field supported on ``mask``."""
    ext = _padded_mask(grid, mask)
    nx, ny, nz = grid.point_shape
    act = (ext[:nx, :ny, :nz] | ext[1:, :ny, :nz] | ext[:nx, 1:, :nz] | ext[:nx, :ny, 1:])
    return np.flatnonzero(act.ravel())


def cell_layout(grid: StaggeredGrid, mask) -> Layout:
    mask = np.asarray(mask, dtype=bool)
    if mask.shape != grid.cells:
        raise DimensionError(f"mask shape {mask.shape} does not match grid {grid.cells}")
    return Layout(CELL_VECTOR, np.flatnonzero(mask.ravel()), 3)


def assemble_grad0(grid: StaggeredGrid, mask) -> SparseOperator:
    """Jacobian of a zero-extended cell vector field, as a ``point_tensor9`` field.

    Rows are ordered point by point, nine vec9 slots per point; columns cell
    by cell, three components per cell.
    """
    cells = cell_layout(grid, mask)
    if len(cells.sites) == 0:
        raise ValueError("mask is empty")
    points = Layout(POINT_TENSOR9, active_points(grid, mask), 9)

    pcoord = grid.point_coords(points.sites)
    n = np.asarray(grid.cells)
    rows, cols, vals = [], [], []
    for slot, flat in enumerate(algebra.VEC9_INDEX):
        i, j = divmod(int(flat), 3)
        hj = grid.spacing[j]
        row = 9 * np.arange(len(points.sites)) + slot
        for shift, sign in ((0, -1.0), (1, 1.0)):
            c = pcoord.copy()
            c[:, j] += shift
            inside = np.all((c >= 0) & (c < n), axis=1)
            pos = np.full(len(c), -1)
            pos[inside] = cells.position(grid.cell_index(c[inside]))
            ok = pos >= 0
            rows.append(row[ok])
            cols.append(3 * pos[ok] + i)
            vals.append(np.full(ok.sum(), sign / hj))
    rows = np.concatenate(rows)
    cols = np.concatenate(cols)
    vals = np.concatenate(vals)
    mat = sp.coo_matrix((vals, (rows, cols)), shape=(points.size, cells.size)).tocsr()
    mat.sort_indices()
    vol = grid.cell_volume
    return SparseOperator(mat, np.full(cells.size, vol), np.full(points.size, vol),
                          cells, points)


def assemble_div_as_negative_adjoint(grad0: SparseOperator, volume_weights=None) -> SparseOperator:
    """``div := -grad0^*`` in the weighted inner products.

    ``volume_weights`` is an optional ``(cell_weights, point_weights)`` pair
    overriding the weights carried by ``grad0``.
    """
    if volume_weights is not None:
        wc, wp = (np.asarray(w, float) for w in volume_weights)
        if wc.shape != (grad0.shape[1],) or wp.shape != (grad0.shape[0],):
            raise DimensionError("volume weights do not match grad0")
        if np.any(wc <= 0) or np.any(wp <= 0):
            raise ValueError("volume weights must be positive")
        grad0 = SparseOperator(grad0.matrix, wc, wp, grad0.domain_layout, grad0.range_layout)
    return -grad0.adjoint()


def pointwise(block: np.ndarray, npoints: int) -> sp.csr_matrix:
    """Block-diagonal matrix applying ``block`` at each of ``npoints`` sites."""
    return sp.kron(sp.identity(npoints, format="csr"), sp.csr_matrix(block), format="csr")


def _npoints(op: SparseOperator, side: str) -> int:
    n = op.shape[0] if side == "range" else op.shape[1]
    if n % 9:
        raise DimensionError(f"tensor side of size {n} is not a multiple of 9")
    return n // 9


def _project(grad0: SparseOperator, basis: np.ndarray, kind: str, factor: float = 1.0):
    npts = _npoints(grad0, "range")
    k = basis.shape[1]
    proj = SparseOperator(factor * pointwise(basis.T, npts),
                          grad0.range_weights, np.repeat(grad0.range_weights[::9], k),
                          grad0.range_layout,
                          None if grad0.range_layout is None else grad0.range_layout.with_kind(kind))
    return proj


def _embed(div: SparseOperator, basis: np.ndarray, kind: str, factor: float = 1.0):
    npts = _npoints(div, "domain")
    k = basis.shape[1]
    return SparseOperator(factor * pointwise(basis, npts),
                          np.repeat(div.domain_weights[::9], k), div.domain_weights,
                          None if div.domain_layout is None else div.domain_layout.with_kind(kind),
                          div.domain_layout)


def _check_pair(grad0: SparseOperator, div: SparseOperator):
    if grad0.shape != div.shape[::-1]:
        raise DimensionError(f"grad0 {grad0.shape} and div {div.shape} are not compatible")


def derive_elastic_pair(grad0: SparseOperator, div: SparseOperator):
    """``Grad0 = sym o grad0`` on Mandel slots and ``Div = div o iota_sym``."""
    _check_pair(grad0, div)
    Grad0 = _project(grad0, algebra.SYM_EMBED, POINT_SYM6) @ grad0
    Div = div @ _embed(div, algebra.SYM_EMBED, POINT_SYM6)
    return Grad0, Div


def derive_maxwell_pair(grad0: SparseOperator, div: SparseOperator):
    """``curl0 = sqrt2 I* skew grad0`` and ``curl = -sqrt2 div iota_skew I``."""
    _check_pair(grad0, div)
    curl0 = _project(grad0, algebra.SKEW_EMBED, POINT_VECTOR3, algebra.SQRT2) @ grad0
    curl = div @ _embed(div, algebra.SKEW_EMBED, POINT_VECTOR3, -algebra.SQRT2)
    return curl0, curl


def adjoint_mismatch(top_right: SparseOperator, bottom_left: SparseOperator) -> float:
    """Relative size of ``top_right + bottom_left^*`` (zero for a skew block)."""
    diff = (top_right.matrix + bottom_left.adjoint().matrix).tocsr()
    scale = max(abs(bottom_left.matrix).max(), abs(top_right.matrix).max(), np.finfo(float).tiny)
    return float(abs(diff).max() / scale) if diff.nnz else 0.0


def assemble_block_A(top_right: SparseOperator, bottom_left: SparseOperator,
                     tol: float = ADJOINT_TOL) -> SparseOperator:
    """``A = [[0, top_right], [bottom_left, 0]]`` on ``H (+) Y``.

    Requires ``top_right = -bottom_left^*``; A is then skew in the weighted
    inner product.
    """
    if top_right.shape != bottom_left.shape[::-1]:
        raise DimensionError(f"blocks {top_right.shape} and {bottom_left.shape} do not fit")
    if (not np.array_equal(top_right.domain_weights, bottom_left.range_weights)
            or not np.array_equal(top_right.range_weights, bottom_left.domain_weights)):
        raise DimensionError("blocks disagree on space weights")
    err = adjoint_mismatch(top_right, bottom_left)
    if err > tol:
        raise ValueError(f"blocks are not negative adjoints (relative mismatch {err:.3e})")
    mat = sp.bmat([[None, top_right.matrix], [bottom_left.matrix, None]], format="csr")
    w = np.concatenate([bottom_left.domain_weights, bottom_left.range_weights])
    return SparseOperator(mat, w, w)


def skew_residual(A: SparseOperator) -> float:
    """``max|A + A^*| / max|A|`` in the weighted sense."""
    diff = (A.matrix + A.adjoint().matrix).tocsr()
    scale = abs(A.matrix).max() if A.matrix.nnz else 1.0
    return float(abs(diff).max() / scale) if diff.nnz else 0.0


def quadratic_form_residual(A: SparseOperator, x: np.ndarray) -> float:
    """``|<x, A x>_w| / (|x|_w^2 max|A|)``."""
    w = A.range_weights
    scale = abs(A.matrix).max() * np.dot(w * x, x)
    return float(abs(np.dot(w * x, A.matrix @ x)) / scale) if scale else 0.0


@dataclass(frozen=True, eq=False)
class InterfaceFaces:
    """Faces between an elastic (``cell0``) and an electromagnetic (``cell1``) cell."""

    cell0: np.ndarray
    cell1: np.ndarray
    axis: np.ndarray
    sign: np.ndarray

    @property
    def normals(self) -> np.ndarray:
        """Unit normals pointing from the elastic into the electromagnetic cell."""
        n = np.zeros((len(self.axis), 3))
        n[np.arange(len(self.axis)), self.axis] = self.sign
        return n

    def __len__(self):
        return len(self.axis)


@dataclass(frozen=True, eq=False)
class DomainPartition:
    """Elastic (``mask0``) and electromagnetic (``mask1``) cell sets.

    Cells in neither mask are outside the computational region; the shared
    unknown vanishes there. Stagger points are assigned to a subdomain
    through an owner cell: the point's own cell if it is inside the region,
    otherwise its first forward neighbour (x, then y, then z) that is.
    """

    grid: StaggeredGrid
    mask0: np.ndarray
    mask1: np.ndarray
    _cache: dict = field(default_factory=dict, compare=False, repr=False)

    def __post_init__(self):
        m0 = np.asarray(self.mask0, dtype=bool)
        m1 = np.asarray(self.mask1, dtype=bool)
        for m in (m0, m1):
            if m.shape != self.grid.cells:
                raise DimensionError(f"mask shape {m.shape} does not match grid {self.grid.cells}")
        if np.any(m0 & m1):
            raise ValueError("subdomain masks overlap")
        if not np.any(m0 | m1):
            raise ValueError("partition is empty")
        object.__setattr__(self, "mask0", m0)
        object.__setattr__(self, "mask1", m1)

    @classmethod
    def from_boxes(cls, grid: StaggeredGrid, boxes0=(), boxes1=()) -> "DomainPartition":
        """Boxes are ``((x0, x1), (y0, y1), (z0, z1))`` half-open cell ranges."""
        masks = []
        for boxes in (boxes0, boxes1):
            m = np.zeros(grid.cells, dtype=bool)
            for box in boxes:
                m[tuple(slice(int(a), int(b)) for a, b in box)] = True
            masks.append(m)
        if np.any(masks[0] & masks[1]):
            raise ValueError("subdomain masks overlap")
        return cls(grid, masks[0], masks[1])

    @classmethod
    def from_raster(cls, grid: StaggeredGrid, raster: bytes) -> "DomainPartition":
        """One byte per cell in C order: 0 outside, 1 elastic, 2 electromagnetic."""
        codes = np.frombuffer(raster, dtype=np.uint8)
        if codes.size != grid.n_cells:
            raise DimensionError(f"raster has {codes.size} cells, grid has {grid.n_cells}")
        if np.any(codes > 2):
            raise ValueError("raster codes must be 0, 1 or 2")
        codes = codes.reshape(grid.cells)
        return cls(grid, codes == 1, codes == 2)

    def refined(self, factor: int = 2) -> "DomainPartition":
        rep = lambda m: m.repeat(factor, 0).repeat(factor, 1).repeat(factor, 2)
        return DomainPartition(self.grid.refined(factor), rep(self.mask0), rep(self.mask1))

    @property
    def region(self) -> np.ndarray:
        return self.mask0 | self.mask1

    @property
    def cell_domain(self) -> np.ndarray:
        """Per grid cell: 0 elastic, 1 electromagnetic, -1 outside (flattened)."""
        d = np.full(self.grid.n_cells, -1)
        d[self.mask0.ravel()] = 0
        d[self.mask1.ravel()] = 1
        return d

    @property
    def cells(self) -> Layout:
        return cell_layout(self.grid, self.region)

    @property
    def points(self) -> np.ndarray:
        if "points" not in self._cache:
            self._cache["points"] = active_points(self.grid, self.region)
        return self._cache["points"]

    @property
    def point_owner(self) -> np.ndarray:
        """Owner cell id of each active stagger point."""
        if "owner" not in self._cache:
            g = self.grid
            p = g.point_coords(self.points)
            n = np.asarray(g.cells)
            region = self.region.ravel()
            owner = np.full(len(p), -1)
            for shift in (None, 0, 1, 2):
                c = p.copy()
                if shift is not None:
                    c[:, shift] += 1
                inside = np.all((c >= 0) & (c < n), axis=1) & (owner < 0)
                ids = g.cell_index(c[inside])
                ok = region[ids]
                sel = np.flatnonzero(inside)[ok]
                owner[sel] = ids[ok]
            self._cache["owner"] = owner
        return self._cache["owner"]

    @property
    def point_domain(self) -> np.ndarray:
        return self.cell_domain[self.point_owner]

    @property
    def interface_faces(self) -> InterfaceFaces:
        if "faces" not in self._cache:
            dom = self.cell_domain.reshape(self.grid.cells)
            c0, c1, ax, sg = [], [], [], []
            for k in range(3):
                lo = [slice(None)] * 3
                hi = [slice(None)] * 3
                lo[k] = slice(0, -1)
                hi[k] = slice(1, None)
                a, b = dom[tuple(lo)], dom[tuple(hi)]
                for first, second, sign in ((0, 1, 1), (1, 0, -1)):
                    hit = np.argwhere((a == first) & (b == second))
                    if not len(hit):
                        continue
                    lower = self.grid.cell_index(hit)
                    upper = self.grid.cell_index(hit + np.eye(3, dtype=int)[k])
                    c0.append(lower if sign > 0 else upper)
                    c1.append(upper if sign > 0 else lower)
                    ax.append(np.full(len(hit), k))
                    sg.append(np.full(len(hit), sign))
            cat = lambda xs: np.concatenate(xs) if xs else np.zeros(0, dtype=int)
            c0, c1, ax, sg = map(cat, (c0, c1, ax, sg))
            order = np.lexsort((ax, c1, c0))
            self._cache["faces"] = InterfaceFaces(c0[order], c1[order], ax[order], sg[order])
        return self._cache["faces"]
