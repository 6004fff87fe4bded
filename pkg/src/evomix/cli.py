"""
Batch front end for scenario files.

    evomix check <cfg>
    evomix run <cfg> [--out DIR]
    evomix convergence <cfg> --levels K [--out DIR]

Scenarios are INI files. Sections and keys::

    [grid]       cells = nx ny nz; spacing = h | hx hy hz; origin = x y z
    [partition]  omega0 = x0 x1 y0 y1 z0 z1 [; ...]; omega1 = ...; raster = file
    [elastic]    rho; lame_lambda + lame_mu | stiffness (36 Mandel entries)
    [em]         epsilon; mu; sigma; kappa (1 or 9 numbers); chi; chi_kind
    [time]       dt; steps; scheme = cn | euler; t0
    [forcing]    center; width; amplitude; component; onset; duration; region
    [output]     directory; cadence; vtk
    [report]     nu
    [study]      kind = interface | temporal; max_unknowns; max_seconds

Boxes are half-open cell ranges. A raster file holds one byte per cell in C
order (0 outside, 1 elastic, 2 electromagnetic) and replaces the boxes.
Exit status: 0 success, 1 usage or parse error, 2 inadmissible material,
3 solver failure. ``EVOMIX_THREADS`` caps the BLAS/OpenMP thread pools.
"""

from __future__ import annotations

import argparse
import configparser
import difflib
import logging
import math
import os
import sys
import time
from dataclasses import dataclass, field, replace
from pathlib import Path

import numpy as np

from . import algebra
from .coupling import (
    CoupledSystem,
    assemble_coupled,
    cakoni_hsiao_from_traces,
    coupled_layout,
    face_traces,
    interface_diagnostics,
    residuals_from_traces,
    stack_traces,
)
from .discrete_operators import DomainPartition, StaggeredGrid
from .evolution import (
    CRANK_NICOLSON,
    SCHEMES,
    KrylovError,
    NotPositiveRealError,
    TimeGrid,
    energy_step,
    iterate,
)
from .material import (
    AdmissibilityReport,
    InadmissibleMaterial,
    MaterialLaw,
    check_evo_positivity,
    isotropic_stiffness,
    make_bianisotropic,
    make_chiral,
    make_elastic,
    make_isotropic_em,
    make_omega,
)

logger = logging.getLogger(__name__)

EXIT_OK = 0
EXIT_USAGE = 1
EXIT_INADMISSIBLE = 2
EXIT_SOLVER = 3

THREADS_ENV = "EVOMIX_THREADS"

CSV_HEADER = (
    "t", "energy", "dissipation", "work", "energy_residual", "causality_residual",
    "max_r_traction", "max_r_tangential", "max_r_energy", "max_r_nTn",
)
FACE_HEADER = (
    "face", "cell0", "cell1", "axis", "sign",
    "r_traction", "r_tangential", "r_energy", "r_nTn",
    "ch_traction", "ch_tangential", "ch_energy",
)
REGIONS = ("omega0", "omega1", "all")
STUDY_KINDS = ("interface", "temporal")
CHI_KINDS = ("chiral", "omega")


class ConfigError(ValueError):
    """Malformed or inconsistent scenario file; the message names the key."""


def fmt(x: float) -> str:
    return format(float(x), ".17g")


# ---------------------------------------------------------------- config


@dataclass(frozen=True)
class GridConfig:
    cells: tuple
    spacing: tuple
    origin: tuple = (0.0, 0.0, 0.0)


@dataclass(frozen=True)
class PartitionConfig:
    omega0: tuple = ()
    omega1: tuple = ()
    raster: str | None = None


@dataclass(frozen=True)
class ElasticConfig:
    rho: float
    lame_lambda: float | None = None
    lame_mu: float | None = None
    stiffness: tuple | None = None

    def stiffness_matrix(self) -> np.ndarray:
        if self.stiffness is not None:
            return np.asarray(self.stiffness, dtype=float).reshape(6, 6)
        return isotropic_stiffness(self.lame_lambda, self.lame_mu)


@dataclass(frozen=True)
class EMConfig:
    epsilon: float
    mu: float
    sigma: float = 0.0
    kappa: tuple = (0.0,)
    chi: tuple = (0.0,)
    chi_kind: str = "chiral"

    @property
    def has_kappa(self) -> bool:
        return any(k != 0.0 for k in self.kappa)

    @property
    def has_chi(self) -> bool:
        return any(c != 0.0 for c in self.chi)


@dataclass(frozen=True)
class TimeConfig:
    dt: float
    steps: int
    scheme: str = CRANK_NICOLSON
    t0: float = 0.0


@dataclass(frozen=True)
class ForcingConfig:
    center: tuple
    width: float
    duration: float
    amplitude: float = 1.0
    component: int = 1
    onset: float = 0.0
    region: str = "omega1"


@dataclass(frozen=True)
class OutputConfig:
    directory: str = "out"
    cadence: int = 1
    vtk: bool = False


@dataclass(frozen=True)
class StudyConfig:
    kind: str = "interface"
    max_unknowns: int = 2_000_000
    max_seconds: float = 600.0


@dataclass(frozen=True)
class ScenarioConfig:
    grid: GridConfig
    partition: PartitionConfig
    time: TimeConfig
    elastic: ElasticConfig | None = None
    em: EMConfig | None = None
    forcing: ForcingConfig | None = None
    output: OutputConfig = field(default_factory=OutputConfig)
    study: StudyConfig = field(default_factory=StudyConfig)
    nu: float = 1.0
    base_dir: str = field(default=".", compare=False)


_REQUIRED = object()


class _Section:
    """Typed access to one INI section that remembers which keys were read."""

    def __init__(self, parser: configparser.ConfigParser, name: str):
        self.name = name
        self._items = dict(parser.items(name)) if parser.has_section(name) else {}
        self._used = set()

    def __contains__(self, key):
        return key in self._items

    def _fail(self, key, msg):
        raise ConfigError(f"[{self.name}] {key}: {msg}")

    def get(self, key, conv, default=_REQUIRED):
        self._used.add(key)
        if key not in self._items:
            if default is _REQUIRED:
                typo = difflib.get_close_matches(key, set(self._items) - self._used, n=1)
                if typo:
                    self._fail(typo[0], f"unknown key (did you mean {key!r}?)")
                self._fail(key, "missing required key")
            return default
        raw = self._items[key]
        try:
            return conv(raw)
        except (ValueError, TypeError) as exc:
            self._fail(key, f"cannot parse {raw!r} ({exc})")

    def finish(self):
        extra = sorted(set(self._items) - self._used)
        if extra:
            self._fail(extra[0], "unknown key")


def _floats(n=None):
    def conv(raw: str) -> tuple:
        vals = tuple(float(x) for x in raw.split())
        if n is not None and len(vals) not in (n if isinstance(n, tuple) else (n,)):
            raise ValueError(f"expected {n} numbers, got {len(vals)}")
        if not all(math.isfinite(v) for v in vals):
            raise ValueError("non-finite value")
        return vals
    return conv


def _float(raw: str) -> float:
    v = float(raw)
    if not math.isfinite(v):
        raise ValueError("non-finite value")
    return v


def _ints(n):
    def conv(raw: str) -> tuple:
        vals = tuple(int(x) for x in raw.split())
        if len(vals) != n:
            raise ValueError(f"expected {n} integers, got {len(vals)}")
        return vals
    return conv


def _boxes(raw: str) -> tuple:
    return tuple(
        tuple(tuple(v[2 * k:2 * k + 2]) for k in range(3))
        for v in (_ints(6)(chunk) for chunk in raw.split(";") if chunk.strip())
    )


def _bool(raw: str) -> bool:
    low = raw.strip().lower()
    if low in ("1", "true", "yes", "on"):
        return True
    if low in ("0", "false", "no", "off"):
        return False
    raise ValueError("expected a boolean")


def _choice(options):
    def conv(raw: str) -> str:
        raw = raw.strip()
        if raw not in options:
            raise ValueError(f"expected one of {', '.join(options)}")
        return raw
    return conv


SECTIONS = ("grid", "partition", "elastic", "em", "time", "forcing", "output", "report", "study")


def parse_config(text: str, base_dir: str = ".") -> ScenarioConfig:
    parser = configparser.ConfigParser(interpolation=None, inline_comment_prefixes=("#",))
    try:
        parser.read_string(text)
    except configparser.Error as exc:
        raise ConfigError(f"syntax error: {exc}") from None
    unknown = [s for s in parser.sections() if s not in SECTIONS]
    if unknown:
        raise ConfigError(f"[{unknown[0]}]: unknown section")
    for required in ("grid", "partition", "time"):
        if not parser.has_section(required):
            raise ConfigError(f"[{required}]: missing required section")

    s = _Section(parser, "grid")
    cells = s.get("cells", _ints(3))
    spacing = s.get("spacing", _floats((1, 3)))
    grid = GridConfig(cells, spacing * 3 if len(spacing) == 1 else spacing,
                      s.get("origin", _floats(3), (0.0, 0.0, 0.0)))
    s.finish()
    if min(cells) < 1:
        raise ConfigError("[grid] cells: every axis needs at least one cell")
    if min(grid.spacing) <= 0:
        raise ConfigError("[grid] spacing: must be positive")

    s = _Section(parser, "partition")
    part = PartitionConfig(s.get("omega0", _boxes, ()), s.get("omega1", _boxes, ()),
                           s.get("raster", str, None))
    s.finish()
    for key in ("omega0", "omega1"):
        for box in getattr(part, key):
            if any(not 0 <= a < b <= n for (a, b), n in zip(box, cells)):
                raise ConfigError(f"[partition] {key}: box {box} is empty or outside the grid")
    if part.raster is None and not (part.omega0 or part.omega1):
        raise ConfigError("[partition] omega0: no subdomain given")

    elastic = None
    if parser.has_section("elastic"):
        s = _Section(parser, "elastic")
        elastic = ElasticConfig(
            rho=s.get("rho", _float),
            lame_lambda=s.get("lame_lambda", _float, None),
            lame_mu=s.get("lame_mu", _float, None),
            stiffness=s.get("stiffness", _floats(36), None),
        )
        s.finish()
        lame = (elastic.lame_lambda is not None, elastic.lame_mu is not None)
        if elastic.stiffness is None and not all(lame):
            raise ConfigError("[elastic] lame_mu: need lame_lambda and lame_mu, or stiffness")
        if elastic.stiffness is not None and any(lame):
            raise ConfigError("[elastic] stiffness: give either stiffness or Lame constants")

    em = None
    if parser.has_section("em"):
        s = _Section(parser, "em")
        em = EMConfig(
            epsilon=s.get("epsilon", _float),
            mu=s.get("mu", _float),
            sigma=s.get("sigma", _float, 0.0),
            kappa=s.get("kappa", _floats((1, 9)), (0.0,)),
            chi=s.get("chi", _floats((1, 9)), (0.0,)),
            chi_kind=s.get("chi_kind", _choice(CHI_KINDS), "chiral"),
        )
        s.finish()

    s = _Section(parser, "time")
    tcfg = TimeConfig(s.get("dt", _float), s.get("steps", int),
                      s.get("scheme", _choice(SCHEMES), CRANK_NICOLSON), s.get("t0", _float, 0.0))
    s.finish()
    if tcfg.dt <= 0:
        raise ConfigError("[time] dt: must be positive")
    if tcfg.steps < 1:
        raise ConfigError("[time] steps: must be at least 1")

    forcing = None
    if parser.has_section("forcing"):
        s = _Section(parser, "forcing")
        forcing = ForcingConfig(
            center=s.get("center", _floats(3)),
            width=s.get("width", _float),
            duration=s.get("duration", _float),
            amplitude=s.get("amplitude", _float, 1.0),
            component=s.get("component", int, 1),
            onset=s.get("onset", _float, tcfg.t0),
            region=s.get("region", _choice(REGIONS), "omega1"),
        )
        s.finish()
        if forcing.width <= 0 or forcing.duration <= 0:
            raise ConfigError("[forcing] width: width and duration must be positive")
        if forcing.component not in (0, 1, 2):
            raise ConfigError("[forcing] component: must be 0, 1 or 2")
        if not forcing.onset < tcfg.t0 + tcfg.dt * tcfg.steps:
            raise ConfigError("[forcing] onset: must lie before the end of the time window")

    s = _Section(parser, "output")
    output = OutputConfig(s.get("directory", str, "out"), s.get("cadence", int, 1),
                          s.get("vtk", _bool, False))
    s.finish()
    if output.cadence < 1:
        raise ConfigError("[output] cadence: must be at least 1")

    s = _Section(parser, "study")
    study = StudyConfig(s.get("kind", _choice(STUDY_KINDS), "interface"),
                        s.get("max_unknowns", int, 2_000_000),
                        s.get("max_seconds", _float, 600.0))
    s.finish()

    s = _Section(parser, "report")
    nu = s.get("nu", _float, 1.0)
    s.finish()
    if nu <= 0:
        raise ConfigError("[report] nu: must be positive")

    return ScenarioConfig(grid, part, tcfg, elastic, em, forcing, output, study, nu, base_dir)


def load_config(path) -> ScenarioConfig:
    path = Path(path)
    try:
        text = path.read_text()
    except OSError as exc:
        raise ConfigError(f"cannot read {path}: {exc.strerror}") from None
    return parse_config(text, str(path.parent))


def _join(vals) -> str:
    return " ".join(str(v) if isinstance(v, (int, str)) else repr(float(v)) for v in vals)


def serialize_config(cfg: ScenarioConfig) -> str:
    """INI text that parses back to an equal :class:`ScenarioConfig`."""
    boxes = lambda bs: " ; ".join(_join(a for ab in box for a in ab) for box in bs)
    sec = {
        "grid": {"cells": _join(cfg.grid.cells), "spacing": _join(cfg.grid.spacing),
                 "origin": _join(cfg.grid.origin)},
        "partition": {},
        "time": {"dt": repr(cfg.time.dt), "steps": str(cfg.time.steps),
                 "scheme": cfg.time.scheme, "t0": repr(cfg.time.t0)},
    }
    if cfg.partition.omega0:
        sec["partition"]["omega0"] = boxes(cfg.partition.omega0)
    if cfg.partition.omega1:
        sec["partition"]["omega1"] = boxes(cfg.partition.omega1)
    if cfg.partition.raster is not None:
        sec["partition"]["raster"] = cfg.partition.raster
    if cfg.elastic is not None:
        e = {"rho": repr(cfg.elastic.rho)}
        if cfg.elastic.stiffness is not None:
            e["stiffness"] = _join(cfg.elastic.stiffness)
        else:
            e["lame_lambda"] = repr(cfg.elastic.lame_lambda)
            e["lame_mu"] = repr(cfg.elastic.lame_mu)
        sec["elastic"] = e
    if cfg.em is not None:
        m = cfg.em
        sec["em"] = {"epsilon": repr(m.epsilon), "mu": repr(m.mu), "sigma": repr(m.sigma),
                     "kappa": _join(m.kappa), "chi": _join(m.chi), "chi_kind": m.chi_kind}
    if cfg.forcing is not None:
        f = cfg.forcing
        sec["forcing"] = {"center": _join(f.center), "width": repr(f.width),
                          "duration": repr(f.duration), "amplitude": repr(f.amplitude),
                          "component": str(f.component), "onset": repr(f.onset),
                          "region": f.region}
    sec["output"] = {"directory": cfg.output.directory, "cadence": str(cfg.output.cadence),
                     "vtk": "true" if cfg.output.vtk else "false"}
    sec["study"] = {"kind": cfg.study.kind, "max_unknowns": str(cfg.study.max_unknowns),
                    "max_seconds": repr(cfg.study.max_seconds)}
    sec["report"] = {"nu": repr(cfg.nu)}
    lines = []
    for name, items in sec.items():
        lines.append(f"[{name}]")
        lines.extend(f"{k} = {v}" for k, v in items.items())
        lines.append("")
    return "\n".join(lines)


# ---------------------------------------------------------------- scenarios


def _coefficient(vals: tuple) -> np.ndarray | float:
    return vals[0] if len(vals) == 1 else np.asarray(vals, dtype=float).reshape(3, 3)


def em_law(cfg: EMConfig) -> MaterialLaw:
    """The full electromagnetic law, bi-anisotropic and chiral/omega parts included."""
    if cfg.has_kappa:
        law = make_bianisotropic(cfg.epsilon, cfg.mu, _coefficient(cfg.kappa), cfg.sigma)
    else:
        law = make_isotropic_em(cfg.epsilon, cfg.mu, cfg.sigma)
    if cfg.has_chi:
        chi = _coefficient(cfg.chi)
        if np.ndim(chi) == 0:
            chi = chi * np.eye(3)
        law = law + (make_chiral(chi) if cfg.chi_kind == "chiral" else make_omega(chi))
    return law


def elastic_law(cfg: ElasticConfig) -> MaterialLaw:
    return make_elastic(cfg.rho, cfg.stiffness_matrix())


def check_materials(cfg: ScenarioConfig) -> AdmissibilityReport:
    """Admissibility of every configured subdomain law at ``cfg.nu``; the worst one wins."""
    reports = []
    if cfg.elastic is not None:
        reports.append(check_evo_positivity(elastic_law(cfg.elastic), cfg.nu))
    if cfg.em is not None:
        reports.append(check_evo_positivity(em_law(cfg.em), cfg.nu))
    if not reports:
        raise ConfigError("[elastic]: no material section given")
    return min(reports, key=lambda r: r.eta)


def build_partition(cfg: ScenarioConfig, level: int = 0) -> DomainPartition:
    g = cfg.grid
    grid = StaggeredGrid(tuple(g.cells), tuple(g.spacing), tuple(g.origin))
    if cfg.partition.raster is not None:
        path = Path(cfg.base_dir) / cfg.partition.raster
        try:
            raw = path.read_bytes()
        except OSError as exc:
            raise ConfigError(f"[partition] raster: cannot read {path}: {exc.strerror}") from None
        try:
            part = DomainPartition.from_raster(grid, raw)
        except ValueError as exc:
            raise ConfigError(f"[partition] raster: {exc}") from None
    else:
        try:
            part = DomainPartition.from_boxes(grid, cfg.partition.omega0, cfg.partition.omega1)
        except ValueError as exc:
            raise ConfigError(f"[partition] omega0: {exc}") from None
    return part.refined(2 ** level) if level else part


@dataclass(frozen=True, eq=False)
class Scenario:
    config: ScenarioConfig
    system: CoupledSystem
    time: TimeGrid
    profile: np.ndarray | None

    @property
    def onset(self) -> float | None:
        return None if self.config.forcing is None else self.config.forcing.onset

    def forcing(self, t: float):
        f = self.config.forcing
        if f is None or self.profile is None or not f.onset <= t <= f.onset + f.duration:
            return None
        return math.sin(math.pi * (t - f.onset) / f.duration) ** 2 * self.profile


def forcing_profile(cfg: ForcingConfig, system: CoupledSystem) -> np.ndarray:
    """Smooth compact bump ``(1 - r^2/w^2)^3`` on the shared unknown, one component."""
    lay = system.layout
    c = system.grid.cell_centers(lay.cells)
    r2 = np.sum((c - np.asarray(cfg.center)) ** 2, axis=1) / cfg.width ** 2
    bump = np.where(r2 < 1.0, (1.0 - r2) ** 3, 0.0)
    if cfg.region != "all":
        bump = bump * (lay.cell_domain == REGIONS.index(cfg.region))
    out = np.zeros(lay.size)
    out[cfg.component:lay.n_shared:3] = cfg.amplitude * bump
    return out


def build_scenario(cfg: ScenarioConfig, level: int = 0) -> Scenario:
    """Assemble the coupled system, refined ``level`` times (h and dt halved each time)."""
    part = build_partition(cfg, level)
    if part.mask0.any() and cfg.elastic is None:
        raise ConfigError("[elastic]: elastic cells present but section missing")
    if part.mask1.any() and cfg.em is None:
        raise ConfigError("[em]: electromagnetic cells present but section missing")
    if cfg.em is not None and (cfg.em.has_kappa or cfg.em.has_chi):
        raise ConfigError(
            "[em] kappa: bi-anisotropic and chiral/omega couplings mix E (cells) with "
            "H (stagger points) and cannot be simulated; use `check` for them"
        )
    elastic = elastic_law(cfg.elastic) if cfg.elastic is not None else None
    em = em_law(cfg.em) if cfg.em is not None else None
    system = assemble_coupled(part, elastic, em, cfg.nu)
    factor = 2 ** level
    tgrid = TimeGrid(cfg.time.t0, cfg.time.dt / factor, cfg.time.steps * factor)
    profile = forcing_profile(cfg.forcing, system) if cfg.forcing is not None else None
    return Scenario(cfg, system, tgrid, profile)


# ---------------------------------------------------------------- run


@dataclass(frozen=True, eq=False)
class RunReport:
    admissibility: AdmissibilityReport
    files: tuple
    final_energy: float
    max_causality: float
    max_residuals: dict
    times: np.ndarray = field(repr=False, default=None)
    ch: object = field(repr=False, default=None)

    def summary(self) -> str:
        lines = [str(self.admissibility), f"final_energy = {fmt(self.final_energy)}",
                 f"max_causality_residual = {fmt(self.max_causality)}"]
        lines += [f"max_r_{k} = {fmt(v)}" for k, v in self.max_residuals.items()]
        lines += [f"wrote {f}" for f in self.files]
        return "\n".join(lines)


def _write_rows(path: Path, header, rows):
    with open(path, "w", newline="\n") as fh:
        fh.write(", ".join(header) + "\n")
        for row in rows:
            fh.write(", ".join(v if isinstance(v, str) else fmt(v) for v in row) + "\n")


def write_vtk(path: Path, system: CoupledSystem, state: np.ndarray, t: float):
    """Legacy ASCII structured points: ``u`` on cells, ``T`` and ``H`` on nodes.

    Stagger point ``p`` (coordinates in ``[-1, n-1]``) is written to node ``p + 1``.
    """
    grid, lay = system.grid, system.layout
    n = np.asarray(grid.cells)
    u = np.zeros((grid.n_cells, 3))
    u[lay.cells] = lay.shared(state)
    T = np.zeros((grid.n_points, 3, 3))
    T[lay.points0] = algebra.sym6_to_mat3(lay.stress(state))
    H = np.zeros((grid.n_points, 3))
    H[lay.points1] = lay.magnetic(state)

    def xfast(a, shape):
        a = a.reshape(tuple(shape) + a.shape[1:])
        return a.transpose((2, 1, 0) + tuple(range(3, a.ndim))).reshape((-1,) + a.shape[3:])

    with open(path, "w", newline="\n") as fh:
        fh.write("# vtk DataFile Version 3.0\n")
        fh.write(f"evomix state t={fmt(t)}\nASCII\nDATASET STRUCTURED_POINTS\n")
        fh.write("DIMENSIONS {} {} {}\n".format(*(n + 1)))
        fh.write("ORIGIN {} {} {}\n".format(*map(fmt, grid.origin)))
        fh.write("SPACING {} {} {}\n".format(*map(fmt, grid.spacing)))
        fh.write(f"CELL_DATA {grid.n_cells}\nVECTORS u double\n")
        for row in xfast(u, n):
            fh.write(" ".join(map(fmt, row)) + "\n")
        fh.write(f"POINT_DATA {grid.n_points}\nTENSORS T double\n")
        for m in xfast(T, n + 1):
            fh.write("\n".join(" ".join(map(fmt, r)) for r in m) + "\n")
        fh.write("VECTORS H double\n")
        for row in xfast(H, n + 1):
            fh.write(" ".join(map(fmt, row)) + "\n")


def run_scenario(cfg: ScenarioConfig, out_dir, level: int = 0) -> RunReport:
    """Time-step a scenario and write the per-step and per-face diagnostics."""
    admissibility = check_materials(cfg)
    if not admissibility.admissible:
        raise InadmissibleMaterial(str(admissibility))
    sc = build_scenario(cfg, level)
    system, evo = sc.system, sc.system.evo
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    cadence = cfg.output.cadence
    faces = system.partition.interface_faces
    onset = sc.onset

    rows, traces, times, files = [], [], [], []
    diss = work = 0.0
    pre_onset = 0.0
    prev = None
    for n, t, u, f in iterate(evo, sc.forcing, sc.time, cfg.time.scheme):
        if prev is None:
            eb = energy_step(evo, u, u, None, sc.time.dt, cfg.time.scheme)
        else:
            eb = energy_step(evo, prev, u, f, sc.time.dt, cfg.time.scheme)
        diss += eb.dissipation
        work += eb.work
        causal = float(np.max(np.abs(u), initial=0.0)) if onset is not None and t < onset else 0.0
        pre_onset = max(pre_onset, causal)
        tr = face_traces(u, system)
        traces.append(tr)
        times.append(t)
        m = residuals_from_traces(tr).maxima()
        rows.append((t, eb.energy, diss, work, eb.residual, causal,
                     m["traction"], m["tangential"], m["energy"], m["nTn"]))
        if cfg.output.vtk and n % cadence == 0:
            path = out / f"state_{n:06d}.vtk"
            write_vtk(path, system, u, t)
            files.append(str(path))
        prev = u

    main = out / "diagnostics.csv"
    _write_rows(main, CSV_HEADER, rows)
    files.insert(0, str(main))

    times = np.asarray(times)
    ch = cakoni_hsiao_from_traces(times, stack_traces(traces))
    face_dir = out / "faces"
    face_dir.mkdir(exist_ok=True)
    ids = np.arange(len(faces))
    for n in range(0, len(times), cadence):
        d = residuals_from_traces(traces[n])
        path = face_dir / f"faces_{n:06d}.csv"
        _write_rows(path, FACE_HEADER, (
            (str(i), str(c0), str(c1), str(ax), str(sg), a, b, c, e, p, q, r)
            for i, c0, c1, ax, sg, a, b, c, e, p, q, r in zip(
                ids, faces.cell0, faces.cell1, faces.axis, faces.sign,
                d.r_traction, d.r_tangential, d.r_energy, d.r_normal_traction,
                ch.r_traction[n], ch.r_tangential[n], ch.r_energy_ch[n])
        ))
        files.append(str(path))

    arr = np.asarray([r[6:] for r in rows])
    maxima = dict(zip(("traction", "tangential", "energy", "nTn"),
                      arr.max(axis=0) if len(arr) else np.zeros(4)))
    return RunReport(admissibility, tuple(files), rows[-1][1], pre_onset,
                     {k: float(v) for k, v in maxima.items()}, times, ch)


# ---------------------------------------------------------------- convergence


@dataclass(frozen=True)
class ConvergenceTable:
    header: tuple
    rows: tuple
    truncated: str | None = None

    def to_csv(self) -> str:
        lines = [", ".join(self.header)]
        lines += [", ".join(v if isinstance(v, str) else fmt(v) for v in r) for r in self.rows]
        if self.truncated:
            lines.append(f"# truncated: {self.truncated}")
        return "\n".join(lines) + "\n"

    def column(self, name: str) -> np.ndarray:
        k = self.header.index(name)
        return np.array([np.nan if r[k] == "" else float(r[k]) for r in self.rows])


def observed_orders(values) -> list:
    """``log2`` of consecutive ratios; empty string for the first level."""
    out = [""]
    for a, b in zip(values[:-1], values[1:]):
        out.append(math.log2(a / b) if a > 0 and b > 0 else float("nan"))
    return out


INTERFACE_KEYS = ("traction", "tangential", "energy", "nTn")


def _interface_level(cfg: ScenarioConfig, level: int) -> dict:
    sc = build_scenario(cfg, level)
    best = dict.fromkeys(INTERFACE_KEYS, 0.0)
    for _, _, u, _ in iterate(sc.system.evo, sc.forcing, sc.time, cfg.time.scheme):
        for k, v in interface_diagnostics(u, sc.system).maxima().items():
            best[k] = max(best[k], v)
    return best


def manufactured_error(cfg: ScenarioConfig, level: int) -> float:
    """Final-time error against ``U(t) = sin(2 pi t / T) phi`` on the semi-discrete system.

    ``phi`` is a smooth bump on the shared unknown. The forcing
    ``M0 U' + (M1 + A) U`` makes ``U`` an exact solution, so the error is
    purely temporal.
    """
    if cfg.time.t0 != 0.0:
        raise ConfigError("[time] t0: the manufactured study starts at t0 = 0")
    sc = build_scenario(replace(cfg, forcing=None), 0)
    evo, lay = sc.system.evo, sc.system.layout
    c = sc.system.grid.cell_centers(lay.cells)
    lo = np.asarray(cfg.grid.origin)
    hi = lo + np.asarray(cfg.grid.cells) * np.asarray(cfg.grid.spacing)
    phi = np.zeros(lay.size)
    phi[1:lay.n_shared:3] = np.prod(np.sin(np.pi * (c - lo) / (hi - lo)), axis=1)
    w = 2.0 * math.pi / (cfg.time.dt * cfg.time.steps)
    m0phi = evo.M0 @ phi
    kphi = (evo.M1 + evo.A) @ phi

    def forcing(t):
        return w * math.cos(w * t) * m0phi + math.sin(w * t) * kphi

    factor = 2 ** level
    tgrid = TimeGrid(0.0, cfg.time.dt / factor, cfg.time.steps * factor)
    for _, _, u, _ in iterate(evo, forcing, tgrid, cfg.time.scheme):
        pass
    exact = math.sin(w * tgrid.t_end) * phi
    return float(np.linalg.norm(u - exact) / np.linalg.norm(phi))


def convergence_study(cfg: ScenarioConfig, levels: int) -> ConvergenceTable:
    if levels < 2:
        raise ConfigError("convergence needs --levels >= 2")
    start = time.monotonic()
    rows, truncated = [], None
    base = build_partition(cfg)
    for level in range(levels):
        factor = 2 ** level
        if cfg.study.kind == "interface":
            size = coupled_layout(base.refined(factor) if level else base).size
        else:
            size = coupled_layout(base).size
        if size > cfg.study.max_unknowns:
            truncated = f"level {level} needs {size} unknowns > max_unknowns {cfg.study.max_unknowns}"
            break
        if level and time.monotonic() - start > cfg.study.max_seconds:
            truncated = f"level {level} skipped after {cfg.study.max_seconds:g} s"
            break
        dt = cfg.time.dt / factor
        if cfg.study.kind == "interface":
            best = _interface_level(cfg, level)
            h = min(cfg.grid.spacing) / factor
            rows.append([str(level), str(cfg.grid.cells[0] * factor), h, dt]
                        + [best[k] for k in INTERFACE_KEYS])
        else:
            rows.append([str(level), dt, str(cfg.time.steps * factor),
                         manufactured_error(cfg, level)])
        logger.info("level %d done after %.1f s", level, time.monotonic() - start)

    if cfg.study.kind == "interface":
        header = ("level", "cells", "h", "dt") + tuple(f"max_r_{k}" for k in INTERFACE_KEYS) \
            + tuple(f"order_{k}" for k in INTERFACE_KEYS)
        cols = [observed_orders([r[4 + j] for r in rows]) for j in range(4)]
        rows = [r + [c[i] for c in cols] for i, r in enumerate(rows)]
    else:
        header = ("level", "dt", "steps", "error", "order")
        orders = observed_orders([r[3] for r in rows])
        rows = [r + [o] for r, o in zip(rows, orders)]
    return ConvergenceTable(header, tuple(tuple(r) for r in rows), truncated)


# ---------------------------------------------------------------- entry point


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        self.exit(EXIT_USAGE, f"{self.prog}: error: {message}\n")


def build_parser() -> argparse.ArgumentParser:
    p = _Parser(prog="evomix", description=__doc__.strip().splitlines()[0])
    p.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="command", required=True, parser_class=_Parser)
    c = sub.add_parser("check", help="material admissibility only")
    c.add_argument("config")
    r = sub.add_parser("run", help="time-step a scenario and write diagnostics")
    r.add_argument("config")
    r.add_argument("--out", help="output directory (default: [output] directory)")
    v = sub.add_parser("convergence", help="refinement study")
    v.add_argument("config")
    v.add_argument("--levels", type=int, required=True)
    v.add_argument("--out", help="also write convergence.csv here")
    return p


def _threads():
    raw = os.environ.get(THREADS_ENV)
    if raw is None or raw == "":
        return None
    try:
        n = int(raw)
    except ValueError:
        n = 0
    if n < 1:
        raise ConfigError(f"{THREADS_ENV}: expected a positive integer, got {raw!r}")
    return n


def _dispatch(args) -> int:
    cfg = load_config(args.config)
    if args.command == "check":
        report = check_materials(cfg)
        print(f"eta = {fmt(report.eta)}")
        print(f"nu = {fmt(report.nu_used)}")
        print(f"admissible = {str(report.admissible).lower()}")
        return EXIT_OK if report.admissible else EXIT_INADMISSIBLE
    if args.command == "run":
        out = args.out if args.out is not None else str(Path(cfg.base_dir) / cfg.output.directory)
        print(run_scenario(cfg, out).summary())
        return EXIT_OK
    table = convergence_study(cfg, args.levels)
    text = table.to_csv()
    sys.stdout.write(text)
    if args.out is not None:
        Path(args.out).mkdir(parents=True, exist_ok=True)
        (Path(args.out) / "convergence.csv").write_text(text)
    return EXIT_OK


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        threads = _threads()
        if threads is None:
            return _dispatch(args)
        from threadpoolctl import threadpool_limits

        with threadpool_limits(limits=threads):
            return _dispatch(args)
    except ConfigError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except (InadmissibleMaterial, NotPositiveRealError) as exc:
        print(f"inadmissible: {exc}", file=sys.stderr)
        return EXIT_INADMISSIBLE
    except KrylovError as exc:
        tail = ", ".join(f"{r:.3e}" for r in exc.residuals[-5:])
        print(f"solver failure: {exc}; last residuals [{tail}]", file=sys.stderr)
        return EXIT_SOLVER


if __name__ == "__main__":
    sys.exit(main())
