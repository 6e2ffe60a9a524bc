"""Experiment driver: config files, error sweeps, CSV tables and SVG plots.

Configs are flat UTF-8 ``key = value`` files; unknown keys are
rejected.  A sweep runs every (operator, alpha, k) cell against one
cached fine reference solution per alpha and writes a CSV sorted by
(operator, alpha, k).  Cells that fail numerically become ``failed``
rows rather than aborting the run.  Timings are recorded only when
``record_timings`` is enabled, so default runs are byte-reproducible.
"""

from __future__ import annotations

import hashlib
import json
import os
import time
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass
from fractions import Fraction
from pathlib import Path

import numpy as np

from . import coefficient as coefmod
from .assembly import BilinearFormContext, LoadSpec
from .errors import ParameterError, SolverError
from .interp import OPERATOR_KINDS, build_operator
from .lod import relative_energy_error, reference_solution, solve_multiscale
from .mesh import BoundarySpec, EDGE_NAMES, build_hierarchy

CSV_HEADER = "operator,alpha,k,H,h,rel_energy_error,wall_time_s,seed,status"

CONFIG_KEYS = {
    "coarse_level": int,
    "fine_level": int,
    "coefficient": str,
    "alpha": "float_list",
    "seed": int,
    "smoothing_passes": int,
    "one_fraction": float,
    "dirichlet": "edges",
    "f": "load",
    "operators": "str_list",
    "k": "int_list",
    "rhs_correction": "bool",
    "delta": "fraction",
    "csv": str,
    "svg_prefix": str,
    "cache_dir": str,
    "record_timings": "bool",
}

COEFFICIENT_KINDS = ("stripes", "balls", "field")


def _parse_value(key, kind, raw):
    try:
        if kind is int:
            return int(raw)
        if kind is float:
            return float(raw)
        if kind is str:
            return raw
        if kind == "bool":
            if raw.lower() in ("true", "1", "yes", "on"):
                return True
            if raw.lower() in ("false", "0", "no", "off"):
                return False
            raise ValueError(f"not a boolean: {raw}")
        if kind == "float_list":
            return tuple(float(v) for v in raw.split(","))
        if kind == "int_list":
            return tuple(int(v) for v in raw.split(","))
        if kind == "str_list":
            return tuple(v.strip() for v in raw.split(","))
        if kind == "fraction":
            return Fraction(raw)
        if kind == "edges":
            if raw == "all":
                return tuple(EDGE_NAMES)
            return tuple(v.strip() for v in raw.split(","))
        if kind == "load":
            tag, _, rest = raw.partition(":")
            if tag == "const":
                return LoadSpec.constant(float(rest or "1"))
            if tag == "rect":
                vals = [float(v) for v in rest.split(",")]
                if len(vals) != 4:
                    raise ValueError("rect needs x0,x1,y0,y1")
                return LoadSpec.rectangle(*vals)
            if tag == "hat":
                vals = [float(v) for v in rest.split(",")]
                if len(vals) != 2:
                    raise ValueError("hat needs x,y")
                return LoadSpec.hat(*vals)
            raise ValueError(f"unknown load kind {tag!r}")
    except (ValueError, ParameterError) as exc:
        raise ParameterError(f"config key {key!r}: {exc}") from exc
    raise ParameterError(f"config key {key!r} has no parser")


def parse_config_text(text) -> dict:
    values = {}
    for lineno, line in enumerate(text.splitlines(), start=1):
        stripped = line.strip()
        if not stripped or stripped.startswith("#"):
            continue
        if "=" not in stripped:
            raise ParameterError(f"config line {lineno}: expected key = value")
        key, _, raw = stripped.partition("=")
        key, raw = key.strip(), raw.strip()
        if key not in CONFIG_KEYS:
            raise ParameterError(f"unknown config key {key!r} (line {lineno})")
        if key in values:
            raise ParameterError(f"duplicate config key {key!r} (line {lineno})")
        values[key] = _parse_value(key, CONFIG_KEYS[key], raw)
    return values


def parse_config(path) -> dict:
    return parse_config_text(Path(path).read_text(encoding="utf-8"))


@dataclass(frozen=True)
class ExperimentConfig:
    """Validated sweep description."""

    coarse_level: int
    fine_level: int
    coefficient: str
    alphas: tuple
    operators: tuple
    ks: tuple
    f: LoadSpec
    dirichlet: tuple = tuple(EDGE_NAMES)
    seed: int = 0
    smoothing_passes: int = 6
    one_fraction: float = 0.5
    rhs_correction: bool = True
    delta: Fraction = Fraction(1, 4)
    csv: str | None = None
    svg_prefix: str | None = None
    cache_dir: str | None = None
    record_timings: bool = False

    def __post_init__(self):
        if self.coefficient not in COEFFICIENT_KINDS:
            raise ParameterError(
                f"coefficient must be one of {COEFFICIENT_KINDS}, got {self.coefficient!r}"
            )
        for name, seq in (("operators", self.operators), ("alpha", self.alphas), ("k", self.ks)):
            if not seq:
                raise ParameterError(f"config list {name!r} must be nonempty")
            if len(set(seq)) != len(seq):
                raise ParameterError(f"config list {name!r} contains duplicates")
        for op in self.operators:
            if op not in OPERATOR_KINDS:
                raise ParameterError(f"unknown operator {op!r}")
        for a in self.alphas:
            if not (0.0 < a <= 1.0):
                raise ParameterError(f"alpha values must be in (0, 1], got {a}")
        for k in self.ks:
            if k < 1:
                raise ParameterError(f"k values must be >= 1, got {k}")
        if not self.dirichlet:
            raise ParameterError("dirichlet boundary must be nonempty")
        BoundarySpec.edges(*self.dirichlet)  # validates edge names

    @classmethod
    def from_mapping(cls, values: dict) -> "ExperimentConfig":
        required = ("coarse_level", "fine_level", "coefficient", "alpha", "operators", "k", "f")
        missing = [key for key in required if key not in values]
        if missing:
            raise ParameterError(f"config is missing required keys: {missing}")
        return cls(
            coarse_level=values["coarse_level"],
            fine_level=values["fine_level"],
            coefficient=values["coefficient"],
            alphas=values["alpha"],
            operators=values["operators"],
            ks=values["k"],
            f=values["f"],
            dirichlet=values.get("dirichlet", tuple(EDGE_NAMES)),
            seed=values.get("seed", 0),
            smoothing_passes=values.get("smoothing_passes", 6),
            one_fraction=values.get("one_fraction", 0.5),
            rhs_correction=values.get("rhs_correction", True),
            delta=values.get("delta", Fraction(1, 4)),
            csv=values.get("csv"),
            svg_prefix=values.get("svg_prefix"),
            cache_dir=values.get("cache_dir"),
            record_timings=values.get("record_timings", False),
        )

    @classmethod
    def from_file(cls, path) -> "ExperimentConfig":
        return cls.from_mapping(parse_config(path))

    def sweep_cells(self):
        return [
            (op, alpha, k)
            for op in self.operators
            for alpha in self.alphas
            for k in self.ks
        ]


@dataclass
class ResultRow:
    operator: str
    alpha: float
    k: int
    H: float
    h: float
    rel_energy_error: float
    wall_time_s: float
    seed: int
    status: str

    def csv_line(self):
        return ",".join(
            [
                self.operator,
                _fmt(self.alpha),
                str(self.k),
                _fmt(self.H),
                _fmt(self.h),
                _fmt(self.rel_energy_error),
                _fmt(self.wall_time_s),
                str(self.seed),
                self.status,
            ]
        )


def _fmt(x):
    return f"{float(x):.17g}"


def build_coefficient(config: ExperimentConfig, mesh, alpha):
    if config.coefficient == "stripes":
        return coefmod.gen_stripes(mesh, alpha)
    if config.coefficient == "balls":
        return coefmod.gen_random_balls(mesh, alpha, config.seed)
    return coefmod.gen_random_field(
        mesh, alpha, config.seed,
        smoothing_passes=config.smoothing_passes,
        one_fraction=config.one_fraction,
    )


def _reference_cache_key(config: ExperimentConfig, alpha):
    payload = {
        "coarse_level": config.coarse_level,
        "fine_level": config.fine_level,
        "coefficient": config.coefficient,
        "seed": config.seed,
        "smoothing_passes": config.smoothing_passes,
        "one_fraction": config.one_fraction,
        "dirichlet": sorted(config.dirichlet),
        "f": config.f.describe(),
        "alpha": repr(alpha),
    }
    return hashlib.sha256(json.dumps(payload, sort_keys=True).encode()).hexdigest()


def _cached_reference(config, ctx, alpha):
    if not config.cache_dir:
        return reference_solution(ctx, config.f)
    cache = Path(config.cache_dir)
    cache.mkdir(parents=True, exist_ok=True)
    path = cache / f"ref_{_reference_cache_key(config, alpha)}.npy"
    if path.exists():
        u = np.load(path)
        if u.shape == (ctx.mesh.fine.num_nodes,):
            return u
    u = reference_solution(ctx, config.f)
    np.save(path, u)
    return u


def _worker_count():
    raw = os.environ.get("LOD_THREADS", "0")
    try:
        n = int(raw)
    except ValueError:
        n = 0
    if n <= 0:
        n = min(4, os.cpu_count() or 1)
    return n


def run_experiment(config: ExperimentConfig):
    """Run the full sweep; returns the sorted result rows and writes the CSV."""
    mesh = build_hierarchy(
        config.coarse_level, config.fine_level, BoundarySpec.edges(*config.dirichlet)
    )

    contexts, references, operators = {}, {}, {}
    op_errors = {}
    for alpha in config.alphas:
        coef = build_coefficient(config, mesh, alpha)
        ctx = BilinearFormContext(mesh, coef)
        contexts[alpha] = ctx
        references[alpha] = _cached_reference(config, ctx, alpha)
        for kind in config.operators:
            try:
                operators[(kind, alpha)] = build_operator(kind, mesh, coef, delta=_op_delta(config, kind))
            except (ParameterError, SolverError, np.linalg.LinAlgError) as exc:
                op_errors[(kind, alpha)] = exc

    def run_cell(cell):
        kind, alpha, k = cell
        start = time.perf_counter()
        try:
            if (kind, alpha) in op_errors:
                raise op_errors[(kind, alpha)]
            ctx = contexts[alpha]
            sol = solve_multiscale(
                ctx, operators[(kind, alpha)], k, config.f,
                rhs_correction=config.rhs_correction,
            )
            err = relative_energy_error(ctx, references[alpha], sol.u_total)
            status = "ok"
        except (ParameterError, SolverError, np.linalg.LinAlgError):
            err, status = float("nan"), "failed"
        elapsed = time.perf_counter() - start if config.record_timings else 0.0
        return ResultRow(
            kind, alpha, k, mesh.H, mesh.h, err, elapsed, config.seed, status
        )

    cells = config.sweep_cells()
    workers = _worker_count()
    if workers > 1 and len(cells) > 1:
        with ThreadPoolExecutor(max_workers=workers) as pool:
            rows = list(pool.map(run_cell, cells))
    else:
        rows = [run_cell(cell) for cell in cells]

    rows.sort(key=lambda r: (r.operator, r.alpha, r.k))
    if config.csv:
        write_csv(config.csv, rows)
    if config.svg_prefix:
        emit_svg(rows, config.svg_prefix)
    return rows


def _op_delta(config, kind):
    if kind == "IH":
        return config.delta
    if kind == "IH1":
        return Fraction(1)
    return None


def write_csv(path, rows):
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    lines = [CSV_HEADER] + [row.csv_line() for row in rows]
    path.write_text("\n".join(lines) + "\n", encoding="utf-8")


def read_csv(path):
    lines = Path(path).read_text(encoding="utf-8").strip().splitlines()
    if not lines or lines[0] != CSV_HEADER:
        raise ParameterError(f"{path}: not a results CSV (bad header)")
    rows = []
    for line in lines[1:]:
        parts = line.split(",")
        rows.append(
            ResultRow(
                parts[0], float(parts[1]), int(parts[2]), float(parts[3]),
                float(parts[4]), float(parts[5]), float(parts[6]),
                int(parts[7]), parts[8],
            )
        )
    return rows


# -- SVG output ----------------------------------------------------------------

_PALETTE = ("#1b6ca8", "#c0392b", "#27ae60", "#8e44ad", "#d68910", "#16a085",
            "#7f8c8d", "#2c3e50")
_WIDTH, _HEIGHT = 640, 480
_ML, _MR, _MT, _MB = 70, 30, 40, 55


def _svg_coords(k, log_err, k_range, y_range):
    kx0, kx1 = k_range
    y0, y1 = y_range
    fx = 0.5 if kx1 == kx0 else (k - kx0) / (kx1 - kx0)
    fy = 0.5 if y1 == y0 else (log_err - y0) / (y1 - y0)
    x = _ML + fx * (_WIDTH - _ML - _MR)
    y = _HEIGHT - _MB - fy * (_HEIGHT - _MT - _MB)
    return x, y


def _render_panel(operator, rows):
    """One self-contained SVG: log10 relative error against patch size."""
    pts = [
        (r.alpha, r.k, r.rel_energy_error)
        for r in rows
        if r.status == "ok" and np.isfinite(r.rel_energy_error) and r.rel_energy_error > 0
    ]
    alphas = sorted({p[0] for p in pts}, reverse=True)
    if pts:
        k_lo = min(p[1] for p in pts)
        k_hi = max(p[1] for p in pts)
        y_lo = float(np.floor(min(np.log10(p[2]) for p in pts)))
        y_hi = float(np.ceil(max(np.log10(p[2]) for p in pts)))
        if y_hi == y_lo:
            y_hi = y_lo + 1.0
    else:
        k_lo, k_hi, y_lo, y_hi = 1, 2, -8.0, 0.0

    out = [
        f'<svg xmlns="http://www.w3.org/2000/svg" width="{_WIDTH}" height="{_HEIGHT}" '
        f'viewBox="0 0 {_WIDTH} {_HEIGHT}">',
        f'<rect width="{_WIDTH}" height="{_HEIGHT}" fill="white"/>',
        f'<text x="{_WIDTH / 2:.1f}" y="24" text-anchor="middle" '
        f'font-family="sans-serif" font-size="16">{operator}: relative energy error vs k</text>',
    ]
    # axes
    x0, y0 = _svg_coords(k_lo, y_lo, (k_lo, k_hi), (y_lo, y_hi))
    x1, y1 = _svg_coords(k_hi, y_hi, (k_lo, k_hi), (y_lo, y_hi))
    out.append(
        f'<line x1="{x0:.1f}" y1="{y0:.1f}" x2="{x1:.1f}" y2="{y0:.1f}" stroke="black"/>'
    )
    out.append(
        f'<line x1="{x0:.1f}" y1="{y0:.1f}" x2="{x0:.1f}" y2="{y1:.1f}" stroke="black"/>'
    )
    for k in range(int(k_lo), int(k_hi) + 1):
        x, _ = _svg_coords(k, y_lo, (k_lo, k_hi), (y_lo, y_hi))
        out.append(f'<line x1="{x:.1f}" y1="{y0:.1f}" x2="{x:.1f}" y2="{y0 + 5:.1f}" stroke="black"/>')
        out.append(
            f'<text x="{x:.1f}" y="{y0 + 20:.1f}" text-anchor="middle" '
            f'font-family="sans-serif" font-size="12">{k}</text>'
        )
    dec = max(1, int(round((y_hi - y_lo) / 8)))
    lvl = y_lo
    while lvl <= y_hi + 1e-9:
        _, y = _svg_coords(k_lo, lvl, (k_lo, k_hi), (y_lo, y_hi))
        out.append(f'<line x1="{x0 - 5:.1f}" y1="{y:.1f}" x2="{x0:.1f}" y2="{y:.1f}" stroke="black"/>')
        out.append(
            f'<text x="{x0 - 8:.1f}" y="{y + 4:.1f}" text-anchor="end" '
            f'font-family="sans-serif" font-size="12">1e{int(lvl)}</text>'
        )
        lvl += dec
    out.append(
        f'<text x="{(_ML + _WIDTH - _MR) / 2:.1f}" y="{_HEIGHT - 12}" text-anchor="middle" '
        f'font-family="sans-serif" font-size="13">patch size k</text>'
    )
    # one polyline per alpha
    for idx, alpha in enumerate(alphas):
        color = _PALETTE[idx % len(_PALETTE)]
        series = sorted((p[1], p[2]) for p in pts if p[0] == alpha)
        coords = [
            _svg_coords(k, np.log10(e), (k_lo, k_hi), (y_lo, y_hi)) for k, e in series
        ]
        if len(coords) > 1:
            path = " ".join(f"{x:.1f},{y:.1f}" for x, y in coords)
            out.append(f'<polyline points="{path}" fill="none" stroke="{color}" stroke-width="1.5"/>')
        for x, y in coords:
            out.append(f'<circle cx="{x:.1f}" cy="{y:.1f}" r="3" fill="{color}"/>')
        ly = _MT + 14 * idx + 10
        out.append(f'<rect x="{_WIDTH - _MR - 130}" y="{ly - 8}" width="10" height="10" fill="{color}"/>')
        out.append(
            f'<text x="{_WIDTH - _MR - 115}" y="{ly + 1}" font-family="sans-serif" '
            f'font-size="12">alpha = {alpha:g}</text>'
        )
    out.append("</svg>")
    return "\n".join(out) + "\n"


def emit_svg(rows, prefix):
    """Write one SVG per operator (axes-only placeholder when there are no rows)."""
    prefix = Path(prefix)
    if prefix.parent != Path("."):
        prefix.parent.mkdir(parents=True, exist_ok=True)
    paths = []
    operators = sorted({r.operator for r in rows})
    if not operators:
        path = Path(f"{prefix}empty.svg")
        path.write_text(_render_panel("no data", []), encoding="utf-8")
        return [path]
    for operator in operators:
        panel = _render_panel(operator, [r for r in rows if r.operator == operator])
        path = Path(f"{prefix}{operator}.svg")
        path.write_text(panel, encoding="utf-8")
        paths.append(path)
    return paths
