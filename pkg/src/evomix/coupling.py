"""
Elastic body and electromagnetic region coupled through a shared interface unknown.

The state is ``(u, T, H)``: one cell-centred vector field ``u`` that is the
velocity ``v`` on elastic cells and the electric field ``E`` on
electromagnetic cells, the Mandel stress ``T`` on elastic stagger points and
the magnetic field ``H`` on electromagnetic stagger points. The spatial
operator is the descendant of ``[[0, -div], [-grad0, 0]]`` under ``I0^T``:

    I0^T W = (sym W on elastic points, -sqrt2 I* skew W on EM points).

No interface condition is imposed. Whatever the traces do at the interface
follows from ``u`` being a single field differentiated across it; the
diagnostics below only measure the outcome.
"""

from __future__ import annotations

from dataclasses import dataclass
from functools import cached_property

import numpy as np
import scipy.sparse as sp

from . import algebra
from .descend import BoundedMap, descend_operator
from .discrete_operators import (
    DomainPartition,
    SparseOperator,
    StaggeredGrid,
    assemble_grad0,
    pointwise,
)
from .evolution import EvoSystem, Trajectory
from .material import BlockDiagonal, InadmissibleMaterial, MaterialLaw, check_evo_positivity

COUPLING_TOL = 1.0e-14


def build_I0(partition: DomainPartition) -> BoundedMap:
    """``I0^T`` as a map from tensor fields on all active points to ``(T, H)`` coordinates."""
    dom = partition.point_domain
    npts = len(dom)
    rows = []
    for d, basis in ((0, algebra.SYM_EMBED.T), (1, -algebra.SQRT2 * algebra.SKEW_EMBED.T)):
        sel = np.flatnonzero(dom == d)
        pick = sp.csr_matrix((np.ones(len(sel)), (np.arange(len(sel)), sel)), shape=(len(sel), npts))
        rows.append(sp.kron(pick, sp.csr_matrix(basis), format="csr"))
    return BoundedMap(sp.vstack(rows, format="csr"), None)


@dataclass(frozen=True, eq=False)
class CoupledLayout:
    """Offsets of the three unknown blocks inside a flat state vector."""

    cells: np.ndarray          # grid ids of region cells (shared unknown, 3 each)
    cell_domain: np.ndarray    # 0 elastic / 1 electromagnetic, per region cell
    points0: np.ndarray        # grid point ids carrying T (6 each)
    points1: np.ndarray        # grid point ids carrying H (3 each)

    @property
    def n_shared(self) -> int:
        return 3 * len(self.cells)

    @property
    def n_stress(self) -> int:
        return 6 * len(self.points0)

    @property
    def size(self) -> int:
        return self.n_shared + self.n_stress + 3 * len(self.points1)

    def shared(self, x: np.ndarray) -> np.ndarray:
        return x[..., :self.n_shared].reshape(x.shape[:-1] + (-1, 3))

    def stress(self, x: np.ndarray) -> np.ndarray:
        return x[..., self.n_shared:self.n_shared + self.n_stress].reshape(x.shape[:-1] + (-1, 6))

    def magnetic(self, x: np.ndarray) -> np.ndarray:
        return x[..., self.n_shared + self.n_stress:].reshape(x.shape[:-1] + (-1, 3))

    def pack(self, u, T, H) -> np.ndarray:
        return np.concatenate([np.ravel(u), np.ravel(T), np.ravel(H)])

    def velocity(self, x: np.ndarray) -> np.ndarray:
        return self.shared(x) * (self.cell_domain == 0)[:, None]

    def electric(self, x: np.ndarray) -> np.ndarray:
        return self.shared(x) * (self.cell_domain == 1)[:, None]

    @staticmethod
    def _rows(sites, ids):
        pos = np.searchsorted(sites, ids)
        pos = np.minimum(pos, max(len(sites) - 1, 0))
        if len(sites) == 0 or np.any(sites[pos] != np.asarray(ids)):
            raise KeyError("site not present in layout")
        return pos

    def cell_rows(self, cell_ids) -> np.ndarray:
        return self._rows(self.cells, cell_ids)

    def stress_rows(self, point_ids) -> np.ndarray:
        return self._rows(self.points0, point_ids)

    def magnetic_rows(self, point_ids) -> np.ndarray:
        return self._rows(self.points1, point_ids)


@dataclass(frozen=True, eq=False)
class CoupledSystem:
    A: SparseOperator
    law: MaterialLaw
    layout: CoupledLayout
    partition: DomainPartition

    @property
    def grid(self) -> StaggeredGrid:
        return self.partition.grid

    @property
    def M0(self) -> BlockDiagonal:
        return self.law.M0

    @property
    def M1(self) -> BlockDiagonal:
        return self.law.M1

    @cached_property
    def evo(self) -> EvoSystem:
        return EvoSystem(self.law.M0.to_sparse(), self.law.M1.to_sparse(), self.A.matrix,
                         self.grid.cell_volume)

    def apply_A(self, x: np.ndarray) -> np.ndarray:
        return self.A.matrix @ x


def _coefficients(law: MaterialLaw, ids: np.ndarray, n_cells: int, name: str):
    (_, m0), = law.M0.groups
    (_, m1), = law.M1.groups
    if len(m0) == 1:
        return m0[np.zeros(len(ids), dtype=int)], m1[np.zeros(len(ids), dtype=int)]
    if len(m0) != n_cells:
        raise ValueError(f"{name} law has {len(m0)} cell blocks, grid has {n_cells} cells")
    return m0[ids], m1[ids]


def _offdiag(x: np.ndarray, k: int) -> float:
    return max(np.abs(x[:, :k, k:]).max(initial=0.0), np.abs(x[:, k:, :k]).max(initial=0.0))


def coupled_material(partition: DomainPartition, layout: CoupledLayout,
                     elastic_law: MaterialLaw | None, em_law: MaterialLaw | None) -> MaterialLaw:
    """``M0 = diag(rho + eps, C^-1, mu)``, ``M1 = diag(sigma, 0, 0)`` on the coupled layout."""
    n = partition.grid.n_cells
    owner = partition.point_owner
    points = partition.points
    owner0 = owner[np.searchsorted(points, layout.points0)] if len(layout.points0) else owner[:0]
    owner1 = owner[np.searchsorted(points, layout.points1)] if len(layout.points1) else owner[:0]

    cells0 = layout.cells[layout.cell_domain == 0]
    cells1 = layout.cells[layout.cell_domain == 1]
    shared0 = np.zeros((len(layout.cells), 3, 3))
    shared1 = np.zeros((len(layout.cells), 3, 3))

    cinv = np.zeros((len(layout.points0), 6, 6))
    mu = np.zeros((len(layout.points1), 3, 3))
    if len(cells0) or len(owner0):
        if elastic_law is None:
            raise ValueError("elastic cells present but no elastic material given")
        m0, m1 = _coefficients(elastic_law, cells0, n, "elastic")
        if np.abs(m1).max(initial=0.0) > 0 or _offdiag(m0, 3) > 0:
            raise ValueError("elastic law must be diag(rho, C^-1) with M1 = 0")
        shared0[layout.cell_domain == 0] = m0[:, :3, :3]
        cinv = _coefficients(elastic_law, owner0, n, "elastic")[0][:, 3:, 3:]
    if len(cells1) or len(owner1):
        if em_law is None:
            raise ValueError("electromagnetic cells present but no EM material given")
        m0, m1 = _coefficients(em_law, cells1, n, "electromagnetic")
        if _offdiag(m0, 3) > 0 or _offdiag(m1, 3) > 0 or np.abs(m1[:, 3:, 3:]).max(initial=0.0) > 0:
            raise ValueError(
                "the staggered layout separates E (cells) from H (points); only "
                "block-diagonal electromagnetic laws (no kappa, chi) can be simulated"
            )
        shared0[layout.cell_domain == 1] = m0[:, :3, :3]
        shared1[layout.cell_domain == 1] = m1[:, :3, :3]
        mu = _coefficients(em_law, owner1, n, "electromagnetic")[0][:, 3:, 3:]

    zeros = lambda a: np.zeros_like(a)
    M0 = BlockDiagonal.direct_sum(BlockDiagonal.uniform(shared0), BlockDiagonal.uniform(cinv, 0),
                                  BlockDiagonal.uniform(mu, 0))
    M1 = BlockDiagonal.direct_sum(BlockDiagonal.uniform(shared1), BlockDiagonal.uniform(zeros(cinv)),
                                  BlockDiagonal.uniform(zeros(mu)))
    return MaterialLaw(M0, M1, ("rho+epsilon", "compliance", "mu", "sigma"))


def coupled_layout(partition: DomainPartition) -> CoupledLayout:
    cells = partition.cells.sites
    dom = partition.point_domain
    return CoupledLayout(
        cells=cells,
        cell_domain=partition.cell_domain[cells],
        points0=partition.points[dom == 0],
        points1=partition.points[dom == 1],
    )


def assemble_coupled(partition: DomainPartition, elastic_law: MaterialLaw | None,
                     em_law: MaterialLaw | None, nu: float = 1.0) -> CoupledSystem:
    """Assemble the coupled system and check its admissibility at ``nu``."""
    grad0 = assemble_grad0(partition.grid, partition.region)
    B = build_I0(partition)
    A = descend_operator(-grad0, B)
    layout = coupled_layout(partition)
    law = coupled_material(partition, layout, elastic_law, em_law)
    report = check_evo_positivity(law, nu)
    if not report.admissible:
        raise InadmissibleMaterial(f"coupled material law is not admissible: {report}")
    return CoupledSystem(A, law, layout, partition)


@dataclass(frozen=True, eq=False)
class InterfaceDiagnostics:
    """Per-face transmission residuals, in :attr:`DomainPartition.interface_faces` order."""

    r_traction: np.ndarray
    r_tangential: np.ndarray
    r_energy: np.ndarray
    r_normal_traction: np.ndarray

    def maxima(self) -> dict:
        m = lambda a: float(np.max(np.abs(a))) if len(a) else 0.0
        return {
            "traction": m(self.r_traction),
            "tangential": m(self.r_tangential),
            "energy": m(self.r_energy),
            "nTn": m(self.r_normal_traction),
        }


@dataclass(frozen=True, eq=False)
class FaceTraces:
    """One-sided traces at every interface face (leading axes broadcast over time)."""

    normal: np.ndarray   # (nf, 3)
    v: np.ndarray
    E: np.ndarray
    Tn: np.ndarray
    H: np.ndarray


# Offsets of the stored samples from the face, in cells along the normal.
# v and E sit at cell centres (1/2 and 3/2); the normal-normal stress
# entry sits on the face and the shear entries average 1/4 away; the
# tangential H entries average 3/4 away. Traces are linearly extrapolated
# to the face from two samples on the same side, never across it.
_V_OFFSET = 0.5
_TN_OFFSET = 0.25
_H_OFFSET = 0.75


@dataclass(frozen=True, eq=False)
class _FaceStencil:
    normal: np.ndarray
    v_rows: tuple
    e_rows: tuple
    t_rows: tuple
    h_rows: tuple
    has0: np.ndarray   # second elastic sample exists behind the face
    has1: np.ndarray   # second EM sample exists beyond the face


def _face_stencil(system: CoupledSystem) -> _FaceStencil:
    if "face_stencil" not in system.__dict__:
        grid = system.grid
        faces = system.partition.interface_faces
        lay = system.layout
        step = faces.normals.astype(int)
        ca, cb = grid.cell_coords(faces.cell0), grid.cell_coords(faces.cell1)
        dom = system.partition.cell_domain
        far = []
        for c, d in ((ca - step, 0), (cb + step, 1)):
            inside = np.all((c >= 0) & (c < np.asarray(grid.cells)), axis=1)
            ok = inside.copy()
            ok[inside] = dom[grid.cell_index(c[inside])] == d
            far.append((np.where(ok[:, None], c, ca if d == 0 else cb), ok))
        (fa, has0), (fb, has1) = far
        system.__dict__["face_stencil"] = _FaceStencil(
            normal=faces.normals,
            v_rows=(lay.cell_rows(faces.cell0), lay.cell_rows(grid.cell_index(fa))),
            e_rows=(lay.cell_rows(faces.cell1), lay.cell_rows(grid.cell_index(fb))),
            t_rows=(lay.stress_rows(grid.point_index(ca)), lay.stress_rows(grid.point_index(fa))),
            h_rows=(lay.magnetic_rows(grid.point_index(cb)),
                    lay.magnetic_rows(grid.point_index(fb))),
            has0=has0,
            has1=has1,
        )
    return system.__dict__["face_stencil"]


def _extrapolate(near, far, offset):
    """Linear extrapolation over ``offset`` cells from samples one cell apart."""
    return (1.0 + offset) * near - offset * far


def face_traces(states: np.ndarray, system: CoupledSystem) -> FaceTraces:
    """One-sided traces: v and T n from the elastic side, E and H from the EM side."""
    st = _face_stencil(system)
    lay = system.layout
    n = st.normal
    u, T6, H = lay.shared(states), lay.stress(states), lay.magnetic(states)
    w0 = np.where(st.has0, _V_OFFSET, 0.0)[:, None]
    w1 = np.where(st.has1, _V_OFFSET, 0.0)[:, None]
    v = _extrapolate(u[..., st.v_rows[0], :], u[..., st.v_rows[1], :], w0)
    E = _extrapolate(u[..., st.e_rows[0], :], u[..., st.e_rows[1], :], w1)

    def traction(rows):
        T = algebra.sym6_to_mat3(T6[..., rows, :])
        return np.einsum("...ij,...j->...i", T, np.broadcast_to(n, T.shape[:-1]))

    shear = np.where(st.has0[:, None] & (np.abs(n) == 0), _TN_OFFSET, 0.0)
    Tn = _extrapolate(traction(st.t_rows[0]), traction(st.t_rows[1]), shear)
    wh = np.where(st.has1, _H_OFFSET, 0.0)[:, None]
    Hf = _extrapolate(H[..., st.h_rows[0], :], H[..., st.h_rows[1], :], wh)
    return FaceTraces(normal=n, v=v, E=E, Tn=Tn, H=Hf)


def _dot(a, b):
    return np.einsum("...i,...i->...", a, b)


def residuals_from_traces(tr: FaceTraces) -> InterfaceDiagnostics:
    n = np.broadcast_to(tr.normal, tr.v.shape)
    return InterfaceDiagnostics(
        r_traction=np.linalg.norm(tr.Tn - algebra.cross(n, tr.H), axis=-1),
        r_tangential=np.linalg.norm(algebra.cross(n, tr.v - tr.E), axis=-1),
        r_energy=_dot(tr.v, tr.Tn) - _dot(n, algebra.cross(tr.H, tr.E)),
        r_normal_traction=np.abs(_dot(n, tr.Tn)),
    )


def interface_diagnostics(state: np.ndarray, system: CoupledSystem) -> InterfaceDiagnostics:
    """Transmission residuals per interface face (leading axes of ``state`` broadcast)."""
    return residuals_from_traces(face_traces(np.asarray(state), system))


def causal_antiderivative(times: np.ndarray, values: np.ndarray) -> np.ndarray:
    """Cumulative trapezoidal integral from the first time node (zero there)."""
    dt = np.diff(times).reshape((-1,) + (1,) * (values.ndim - 1))
    steps = 0.5 * dt * (values[1:] + values[:-1])
    return np.concatenate([np.zeros_like(values[:1]), np.cumsum(steps, axis=0)])


def causal_derivative(times: np.ndarray, values: np.ndarray) -> np.ndarray:
    """Backward differences, zero at the first node."""
    dt = np.diff(times).reshape((-1,) + (1,) * (values.ndim - 1))
    return np.concatenate([np.zeros_like(values[:1]), np.diff(values, axis=0) / dt])


@dataclass(frozen=True, eq=False)
class CakoniHsiaoDiagnostics:
    """Residuals of the time-integrated transmission conditions, shape ``(times, faces)``.

    ``r_energy_ch`` is the flux mismatch ``n.((int H) x d0 E) - n.(H x E)``
    implied by those conditions; ``r_energy`` is the same balance evaluated
    with the simulated traction, for side-by-side comparison.
    """

    times: np.ndarray
    r_traction: np.ndarray
    r_tangential: np.ndarray
    r_energy_ch: np.ndarray
    r_energy: np.ndarray


def cakoni_hsiao_from_traces(times: np.ndarray, tr: FaceTraces) -> CakoniHsiaoDiagnostics:
    """Same as :func:`cakoni_hsiao_diagnostics` from a history of face traces."""
    times = np.asarray(times, dtype=float)
    if len(times) < 2:
        raise ValueError("need at least two time nodes to integrate in time")
    n = np.broadcast_to(tr.normal, tr.v.shape)
    int_h = causal_antiderivative(times, tr.H)
    int_v = causal_antiderivative(times, tr.v)
    d_e = causal_derivative(times, tr.E)
    poynting = _dot(n, algebra.cross(tr.H, tr.E))
    return CakoniHsiaoDiagnostics(
        times=times,
        r_traction=np.linalg.norm(tr.Tn - algebra.cross(n, int_h), axis=-1),
        r_tangential=np.linalg.norm(algebra.cross(n, int_v) - algebra.cross(n, tr.E), axis=-1),
        r_energy_ch=_dot(n, algebra.cross(int_h, d_e)) - poynting,
        r_energy=_dot(tr.v, tr.Tn) - poynting,
    )


def stack_traces(traces) -> FaceTraces:
    traces = list(traces)
    return FaceTraces(
        normal=traces[0].normal,
        **{k: np.stack([getattr(t, k) for t in traces]) for k in ("v", "E", "Tn", "H")},
    )


def cakoni_hsiao_diagnostics(traj: Trajectory, system: CoupledSystem) -> CakoniHsiaoDiagnostics:
    if len(traj) < 2:
        raise ValueError("need at least two time nodes to integrate in time")
    return cakoni_hsiao_from_traces(traj.times, face_traces(traj.states, system))
