"""Run configuration: an INI file with one section per pipeline concern.

    [system]
    name = linear_sink
    components =                      ; polynomial table, one entry per coordinate, '|'-separated
    domain_lo = -3.0, -3.0
    domain_hi = 3.0, 3.0

    [K]
    kind = annulus                    ; empty | box | annulus | points
    ...

Polynomial entries are sums of terms `coef*x0^a*x1^b`, e.g. `-1.0*x0 + x0^2*x1`.
`parse_config(emit_config(c)) == c` holds for every valid config.
"""
from __future__ import annotations

import configparser
import dataclasses
import hashlib
import re
import types
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any, Union, get_args, get_origin, get_type_hints

from app.construct import ConstructConfig
from app.errors import ConfigError
from app.flow import FlowMapConfig
from app.regions import Annulus, Box, Neighborhood, PointSet
from app.system import FIXTURES, ScalarField, Term, VectorField, fixture_field, polynomial_field, polynomial_scalar
from app.verify import Tolerances


def _positive(owner: str, **values: float) -> None:
    for name, v in values.items():
        if v is not None and not v > 0:
            raise ValueError(f"[{owner}] {name} must be positive, got {v}")


@dataclass(frozen=True)
class SystemConfig:
    name: str = "linear_sink"
    components: tuple[str, ...] = ()
    domain_lo: tuple[float, ...] = (-3.0, -3.0)
    domain_hi: tuple[float, ...] = (3.0, 3.0)

    def __post_init__(self) -> None:
        if len(self.domain_lo) != len(self.domain_hi) or not self.domain_lo:
            raise ValueError("[system] domain_lo and domain_hi need the same, nonzero number of coordinates.")
        if any(h <= l for l, h in zip(self.domain_lo, self.domain_hi)):
            raise ValueError("[system] domain_hi must exceed domain_lo in every coordinate.")
        if self.components and len(self.components) != len(self.domain_lo):
            raise ValueError(f"[system] {len(self.components)} components given for a {len(self.domain_lo)}-d domain.")
        if not self.components and self.name not in FIXTURES:
            raise ValueError(f"[system] {self.name!r} is not a fixture and no components were given.")


@dataclass(frozen=True)
class ChainConfig:
    h: float = 0.05
    T: float = 1.0
    epsilon: float | None = None
    samples_per_cell: int = 1
    inflate_cells: float = 2.0

    def __post_init__(self) -> None:
        _positive("chain", h=self.h, T=self.T, epsilon=self.epsilon, samples_per_cell=self.samples_per_cell)
        if self.inflate_cells < 0:
            raise ValueError("[chain] inflate_cells must not be negative.")


@dataclass(frozen=True)
class RegionConfig:
    kind: str = "annulus"
    lo: tuple[float, ...] = ()
    hi: tuple[float, ...] = ()
    center: tuple[float, ...] = (0.0, 0.0)
    r_lo: float = 1.0
    r_hi: float = 1.5
    # flattened coordinates, one point per `dim` numbers
    points: tuple[float, ...] = ()

    def __post_init__(self) -> None:
        if self.kind not in ("empty", "box", "annulus", "points"):
            raise ValueError(f"[K] kind must be empty, box, annulus or points, got {self.kind!r}")
        if self.kind == "box" and (not self.lo or len(self.lo) != len(self.hi)):
            raise ValueError("[K] a box needs lo and hi corners of equal dimension.")
        if self.kind == "annulus" and not 0 <= self.r_lo < self.r_hi:
            raise ValueError("[K] annulus radii must satisfy 0 <= r_lo < r_hi.")


@dataclass(frozen=True)
class GConfig:
    kind: str = "constant"
    value: float = -1.0
    terms: str = ""
    radius: float = 0.25
    collar: float | None = None

    def __post_init__(self) -> None:
        if self.kind not in ("constant", "polynomial"):
            raise ValueError(f"[g] kind must be constant or polynomial, got {self.kind!r}")
        if self.kind == "polynomial" and not self.terms.strip():
            raise ValueError("[g] a polynomial g needs terms.")
        _positive("g", radius=self.radius, collar=self.collar)


@dataclass(frozen=True)
class BaseConfig:
    mode: str = "fixture"
    # analytic base to use; empty means the one named after the system
    fixture: str = ""
    kernel: str = "wendland53"
    shape: float = 0.5
    spacing: float = 0.2
    margin: float = 0.1

    def __post_init__(self) -> None:
        if self.mode not in ("fixture", "collocation"):
            raise ValueError(f"[base] mode must be fixture or collocation, got {self.mode!r}")
        if self.kernel not in ("wendland53", "wendland42"):
            raise ValueError(f"[base] unknown kernel {self.kernel!r}")
        _positive("base", shape=self.shape, spacing=self.spacing)


@dataclass(frozen=True)
class CoverConfig:
    section_extent: float = 1.0
    section_margin: float = 0.25
    cover_time: float = 1.0
    level_gap: float = 1e-3
    recurrent_margin: float = 0.05
    k_samples: int = 256
    max_boxes: int = 64

    def __post_init__(self) -> None:
        _positive(
            "cover",
            section_extent=self.section_extent,
            section_margin=self.section_margin,
            cover_time=self.cover_time,
            level_gap=self.level_gap,
            k_samples=self.k_samples,
            max_boxes=self.max_boxes,
        )
        if self.cover_time > 1:
            raise ValueError("[cover] cover_time must not exceed 1.")


@dataclass(frozen=True)
class ExportConfig:
    grid: int = 41

    def __post_init__(self) -> None:
        if self.grid < 2:
            raise ValueError("[export] grid needs at least 2 points per axis.")


@dataclass(frozen=True)
class RunSection:
    seed: int = 0
    threads: int = 1
    flow_tol: float = 1e-10

    def __post_init__(self) -> None:
        _positive("run", threads=self.threads, flow_tol=self.flow_tol)


@dataclass(frozen=True)
class RunConfig:
    system: SystemConfig = field(default_factory=SystemConfig)
    chain: ChainConfig = field(default_factory=ChainConfig)
    K: RegionConfig = field(default_factory=RegionConfig)
    g: GConfig = field(default_factory=GConfig)
    base: BaseConfig = field(default_factory=BaseConfig)
    cover: CoverConfig = field(default_factory=CoverConfig)
    tolerances: Tolerances = field(default_factory=Tolerances)
    export: ExportConfig = field(default_factory=ExportConfig)
    run: RunSection = field(default_factory=RunSection)

    @property
    def dim(self) -> int:
        return len(self.system.domain_lo)

    def with_overrides(self, seed: int | None = None, threads: int | None = None) -> "RunConfig":
        run = self.run
        if seed is not None:
            run = dataclasses.replace(run, seed=seed)
        if threads is not None:
            run = dataclasses.replace(run, threads=threads)
        return dataclasses.replace(self, run=run)

    def digest(self) -> str:
        return hashlib.sha256(emit_config(self).encode("utf-8")).hexdigest()


# ------------------------------------------------------------- emit / parse

def _optional(tp: Any) -> tuple[Any, bool]:
    if get_origin(tp) in (Union, types.UnionType):
        args = [a for a in get_args(tp) if a is not type(None)]
        return args[0], len(args) < len(get_args(tp))
    return tp, False


def _format(value: Any) -> str:
    if value is None:
        return "none"
    if isinstance(value, tuple):
        sep = " | " if value and isinstance(value[0], str) else ", "
        return sep.join(_format(v) for v in value)
    if isinstance(value, bool):
        return "true" if value else "false"
    if isinstance(value, float):
        return repr(value)
    return str(value)


def _convert(raw: str, tp: Any) -> Any:
    tp, optional = _optional(tp)
    text = raw.strip()
    if optional and text.lower() in ("none", ""):
        return None
    if get_origin(tp) is tuple:
        (item,) = get_args(tp)[:1]
        if not text:
            return ()
        sep = "|" if item is str else ","
        return tuple(_convert(part, item) for part in text.split(sep))
    if tp is bool:
        if text.lower() not in ("true", "false"):
            raise ValueError(f"expected true or false, got {text!r}")
        return text.lower() == "true"
    if tp is int:
        return int(text)
    if tp is float:
        return float(text)
    return text


def emit_config(cfg: RunConfig) -> str:
    parser = configparser.ConfigParser(interpolation=None)
    parser.optionxform = str
    for section in dataclasses.fields(cfg):
        values = getattr(cfg, section.name)
        parser[section.name] = {f.name: _format(getattr(values, f.name)) for f in dataclasses.fields(values)}
    lines = []
    for name in parser.sections():
        lines.append(f"[{name}]")
        lines.extend(f"{key} = {value}" for key, value in parser[name].items())
        lines.append("")
    return "\n".join(lines)


def parse_config(text: str, source: str = "<config>") -> RunConfig:
    parser = configparser.ConfigParser(interpolation=None, inline_comment_prefixes=(";", "#"))
    parser.optionxform = str
    try:
        parser.read_string(text, source=source)
    except configparser.Error as exc:
        raise ConfigError(f"{source}: {exc}") from exc

    hints = get_type_hints(RunConfig)
    known = {f.name for f in dataclasses.fields(RunConfig)}
    unknown = set(parser.sections()) - known
    if unknown:
        raise ConfigError(f"{source}: unknown section(s) {', '.join(sorted(unknown))}")

    sections = {}
    for name in known:
        cls = hints[name]
        field_types = get_type_hints(cls)
        values = {}
        if parser.has_section(name):
            for key, raw in parser[name].items():
                if key not in field_types:
                    raise ConfigError(f"{source}: [{name}] has no setting {key!r}")
                try:
                    values[key] = _convert(raw, field_types[key])
                except ValueError as exc:
                    raise ConfigError(f"{source}: [{name}] {key}: {exc}") from exc
        try:
            sections[name] = cls(**values)
        except ValueError as exc:
            raise ConfigError(f"{source}: {exc}") from exc
    return RunConfig(**sections)


def load_config(path: Path) -> RunConfig:
    path = Path(path)
    try:
        text = path.read_text(encoding="utf-8")
    except OSError as exc:
        raise ConfigError(f"cannot read config {path}: {exc}") from exc
    return parse_config(text, str(path))


def save_config(cfg: RunConfig, path: Path) -> Path:
    path = Path(path)
    path.write_text(emit_config(cfg), encoding="utf-8")
    return path


# --------------------------------------------------------------- polynomials

_FACTOR = re.compile(r"x(\d+)(?:\^(\d+))?")


def parse_polynomial(text: str, dim: int) -> list[Term]:
    """`-1.0*x0 + 2*x0^2*x1` -> [(-1.0, (1, 0)), (2.0, (2, 1))]."""
    body = text.replace(" ", "")
    if not body:
        raise ConfigError("empty polynomial")
    terms: list[Term] = []
    for token in re.split(r"(?<![eE*^])(?=[+-])", body):
        if not token:
            continue
        sign = -1.0 if token[0] == "-" else 1.0
        token = token.lstrip("+-")
        coef = sign
        exps = [0] * dim
        for factor in token.split("*"):
            match = _FACTOR.fullmatch(factor)
            if match:
                i = int(match.group(1))
                if i >= dim:
                    raise ConfigError(f"variable x{i} in {text!r} exceeds dimension {dim}")
                exps[i] += int(match.group(2) or 1)
                continue
            try:
                coef *= float(factor)
            except ValueError:
                raise ConfigError(f"cannot read term factor {factor!r} in {text!r}") from None
        terms.append((coef, tuple(exps)))
    return terms


# ------------------------------------------------------------------ builders

def build_domain(cfg: RunConfig) -> Box:
    return Box(tuple(cfg.system.domain_lo), tuple(cfg.system.domain_hi))


def build_field(cfg: RunConfig) -> VectorField:
    domain = build_domain(cfg)
    if cfg.system.components:
        table = [parse_polynomial(c, cfg.dim) for c in cfg.system.components]
        return polynomial_field(cfg.system.name, table, domain)
    return fixture_field(cfg.system.name, domain)


def build_region(cfg: RunConfig):
    K = cfg.K
    dim = cfg.dim
    if K.kind == "empty":
        return PointSet.empty(dim)
    if K.kind == "box":
        return Box(tuple(K.lo), tuple(K.hi))
    if K.kind == "annulus":
        return Annulus(tuple(K.center), K.r_lo, K.r_hi)
    if len(K.points) % dim:
        raise ConfigError(f"[K] {len(K.points)} point coordinates do not split into {dim}-d points")
    pts = tuple(tuple(K.points[i:i + dim]) for i in range(0, len(K.points), dim))
    return PointSet(pts, dim)


def build_g(cfg: RunConfig) -> ScalarField:
    if cfg.g.kind == "constant":
        return ScalarField.constant(cfg.g.value)
    return polynomial_scalar("g", parse_polynomial(cfg.g.terms, cfg.dim))


def build_neighborhood(cfg: RunConfig, K) -> Neighborhood:
    return Neighborhood(K, cfg.g.radius)


def flow_config(cfg: RunConfig) -> FlowMapConfig:
    return FlowMapConfig(abs_tol=cfg.run.flow_tol, rel_tol=cfg.run.flow_tol)


def construct_config(cfg: RunConfig) -> ConstructConfig:
    c = cfg.cover
    return ConstructConfig(
        section_extent=c.section_extent,
        section_margin=c.section_margin,
        cover_time=c.cover_time,
        level_gap=c.level_gap,
        recurrent_margin=c.recurrent_margin,
        collar=cfg.g.collar,
        k_samples=c.k_samples,
        max_boxes=c.max_boxes,
        seed=cfg.run.seed,
        flow=flow_config(cfg),
    )
