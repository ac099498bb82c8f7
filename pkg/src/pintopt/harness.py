"""Experiment configuration, orchestration, cost accounting and CSV/figure output.

Config files are line oriented::

    # comment
    kind = compare
    N = 6000
    workers = 1, 2, 4

Every key maps onto a field of :class:`ModelConfig`, :class:`MgritConfig`,
:class:`OptimizerConfig` or the experiment itself; anything else is rejected.
"""

from __future__ import annotations

import csv
import logging
import math
import re
import time
from dataclasses import dataclass, field, fields, replace
from pathlib import Path
from typing import Sequence

import numpy as np

from .adjoint_mgrit import Piggyback, estimate_time_lag, serial_adjoint
from .errors import ExperimentFailed, InsufficientData, InvalidConfig, InvalidInput, ParseError, PintoptError, ValidationError
from .mgrit import CYCLE_TYPES, COARSE_OPERATORS, RELAXATIONS, CostCounter, Mgrit, MgritConfig, estimate_contraction, serial_solve
from .model_problem import ModelConfig, VanDerPolAdvection
from .optimize import (
    TRACE_COLUMNS,
    OptimizationResult,
    OptimizationTrace,
    OptimizerConfig,
    alpha_bound,
    oneshot_run,
    reduced_space_parallel,
    reduced_space_serial,
)

logger = logging.getLogger(__name__)

KINDS = ("piggyback", "oneshot", "reduced_serial", "reduced_parallel", "compare", "scaling")
SCALABLE = ("piggyback", "oneshot", "reduced_parallel")
COMPARE_DEFAULT_N = 6000


@dataclass(frozen=True)
class ExperimentConfig:
    model: ModelConfig = field(default_factory=ModelConfig)
    mgrit: MgritConfig = field(default_factory=MgritConfig)
    optimizer: OptimizerConfig = field(default_factory=OptimizerConfig)
    kind: str = "piggyback"
    workers: tuple = (1,)
    out: str = "results"
    seed: int = 0
    # design for the fixed-design piggyback experiment
    rho: float = 2.0
    # core count assumed by the critical-path ("span") counter
    cores: int = 256
    scaling_kind: str = "piggyback"
    # relative noise added to the cold-start state guess (seeded)
    init_noise: float = 0.0

    def __post_init__(self):
        if self.kind not in KINDS:
            raise ValidationError(f"must be one of {KINDS}", "kind")
        if not self.workers or any(int(w) < 1 for w in self.workers):
            raise ValidationError("worker counts must be >= 1", "workers")
        if self.scaling_kind not in SCALABLE:
            raise ValidationError(f"must be one of {SCALABLE}", "scaling_kind")
        if self.cores < 1:
            raise ValidationError("must be >= 1", "cores")
        if self.init_noise < 0:
            raise ValidationError("must be >= 0", "init_noise")


# -- parsing -------------------------------------------------------------------

_SECTIONS = {
    "model": [f.name for f in fields(ModelConfig)],
    "mgrit": [f.name for f in fields(MgritConfig)],
    "optimizer": [f.name for f in fields(OptimizerConfig)],
    "experiment": ["kind", "workers", "out", "seed", "rho", "cores", "scaling_kind", "init_noise"],
}
_SECTION_OF = {k: s for s, keys in _SECTIONS.items() for k in keys}

_INT = {"L", "N", "picard_max", "m", "max_levels", "max_iters", "max_outer", "inner_max", "warmup", "seed", "cores"}
_BOOL = {"linear"}
_STR = {
    "cycle_type": CYCLE_TYPES,
    "relaxation": RELAXATIONS,
    "coarsest_solve": ("sequential",),
    "coarse_operator": COARSE_OPERATORS,
    "kind": KINDS,
    "scaling_kind": SCALABLE,
    "out": None,
}
_OPTIONAL = {"a_target"}

# field -> (predicate, message)
_RULES = {
    "dt": (lambda v: v > 0, "must be > 0"),
    "dx": (lambda v: v > 0, "must be > 0"),
    "T": (lambda v: v > 0, "must be > 0"),
    "N": (lambda v: v >= 1, "must be >= 1"),
    "L": (lambda v: v >= 3, "must be >= 3"),
    "mu": (lambda v: v >= 0, "must be >= 0"),
    "picard_tol": (lambda v: v > 0, "must be > 0"),
    "picard_max": (lambda v: v >= 1, "must be >= 1"),
    "gamma": (lambda v: v >= 0, "must be >= 0"),
    "m": (lambda v: v >= 2, "must be >= 2"),
    "max_levels": (lambda v: v >= 1, "must be >= 1"),
    "halting_tol": (lambda v: v > 0, "must be > 0"),
    "max_iters": (lambda v: v >= 1, "must be >= 1"),
    "theta": (lambda v: v > 0, "must be > 0"),
    "grad_tol": (lambda v: v > 0, "must be > 0"),
    "max_outer": (lambda v: v >= 1, "must be >= 1"),
    "inner_tol": (lambda v: v > 0, "must be > 0"),
    "inner_max": (lambda v: v >= 1, "must be >= 1"),
    "alpha": (lambda v: v >= 0, "must be >= 0"),
    "warmup": (lambda v: v >= 0, "must be >= 0"),
    "divergence_factor": (lambda v: v > 1, "must be > 1"),
    "cores": (lambda v: v >= 1, "must be >= 1"),
    "init_noise": (lambda v: v >= 0, "must be >= 0"),
    "seed": (lambda v: v >= 0, "must be >= 0"),
}


def _convert(key: str, raw: str):
    if key in _OPTIONAL and raw.lower() == "none":
        return None
    if key == "workers":
        parts = [p for p in re.split(r"[,\s]+", raw) if p]
        if not parts:
            raise ValueError("empty worker list")
        return tuple(int(p) for p in parts)
    if key in _BOOL:
        low = raw.lower()
        if low not in ("true", "false", "1", "0", "yes", "no"):
            raise ValueError(f"not a boolean: {raw!r}")
        return low in ("true", "1", "yes")
    if key in _STR:
        choices = _STR[key]
        if choices is not None and raw not in choices:
            raise ValueError(f"must be one of {choices}")
        return raw
    if key in _INT:
        try:
            return int(raw)
        except ValueError:
            value = float(raw)
            if not value.is_integer():
                raise ValueError(f"not an integer: {raw!r}") from None
            return int(value)
    value = float(raw)
    if not math.isfinite(value):
        raise ValueError(f"not finite: {raw!r}")
    return value


def _read_pairs(text: str) -> dict:
    pairs: dict = {}
    for lineno, line in enumerate(text.splitlines(), start=1):
        body = line.split("#", 1)[0].strip()
        if not body:
            continue
        if "=" not in body:
            raise ParseError(f"expected 'key = value', got {body!r}", lineno)
        key, raw = (s.strip() for s in body.split("=", 1))
        if key not in _SECTION_OF:
            raise ParseError(f"unknown key {key!r}", lineno)
        if key in pairs:
            raise ParseError(f"duplicate key {key!r}", lineno)
        if not raw:
            raise ParseError(f"missing value for {key!r}", lineno)
        try:
            pairs[key] = _convert(key, raw)
        except ValueError as exc:
            raise ParseError(f"bad value for {key!r}: {exc}", lineno) from None
    return pairs


def _resolve_time_grid(pairs: dict, kind: str) -> dict:
    """Fill in whichever of ``N``, ``dt``, ``T`` is missing so that ``N*dt = T``."""
    d = ModelConfig()
    given = {k for k in ("N", "dt", "T") if k in pairs}
    if not given and kind == "compare":
        pairs["N"] = COMPARE_DEFAULT_N
        given = {"N"}
    N, dt, T = pairs.get("N", d.N), pairs.get("dt", d.dt), pairs.get("T", d.T)
    if given == {"N", "dt", "T"}:
        pass
    elif {"N", "dt"} <= given or given == {"N"}:
        T = N * dt
    elif {"N", "T"} <= given:
        dt = T / N
    elif given:
        # only dt and/or T: keep the horizon, derive the step count
        N = round(T / dt)
        if N < 1 or abs(N * dt - T) > 1e-12 * T:
            raise ValidationError(f"T = {T!r} is not a whole number of steps dt = {dt!r}", "N")
    pairs.update(N=N, dt=dt, T=T)
    if abs(N * dt - T) > 1e-12 * max(abs(T), 1.0):
        raise ValidationError(f"N*dt = {N * dt!r} does not match T = {T!r}", "T")

    L, dx = pairs.get("L"), pairs.get("dx")
    if L is not None and dx is None:
        pairs["dx"] = 1.0 / L
    elif dx is not None and L is None:
        pairs["L"] = round(1.0 / dx)
    L, dx = pairs.get("L", d.L), pairs.get("dx", d.dx)
    if abs(L * dx - 1.0) > 1e-12:
        raise ValidationError(f"L*dx = {L * dx!r} must equal 1", "dx")
    return pairs


def _build(pairs: dict) -> ExperimentConfig:
    for key, value in pairs.items():
        rule = _RULES.get(key)
        if rule is not None and value is not None and not rule[0](value):
            raise ValidationError(rule[1], key)
    kind = pairs.get("kind", "piggyback")
    pairs = _resolve_time_grid(dict(pairs), kind)
    parts = {s: {k: v for k, v in pairs.items() if _SECTION_OF[k] == s} for s in _SECTIONS}
    try:
        model = ModelConfig(**parts["model"])
        mgrit = MgritConfig(**parts["mgrit"])
        optimizer = OptimizerConfig(**parts["optimizer"])
    except ValidationError:
        raise
    except InvalidConfig as exc:
        msg = str(exc)
        head = re.match(r"\w+", msg)
        name = head.group(0) if head and head.group(0) in _SECTION_OF else "config"
        raise ValidationError(msg, name) from None
    return ExperimentConfig(model=model, mgrit=mgrit, optimizer=optimizer, **parts["experiment"])


def parse_config(text: str, overrides: Sequence[str] = ()) -> ExperimentConfig:
    """Parse config text; ``overrides`` are ``key=value`` strings applied on top."""
    pairs = _read_pairs(text)
    for item in overrides:
        if "=" not in item:
            raise ParseError(f"override {item!r} is not key=value", 0)
        key, raw = (s.strip() for s in item.split("=", 1))
        if key not in _SECTION_OF:
            raise ParseError(f"unknown key {key!r} in override", 0)
        # an override of one time-grid quantity should not fight the file's others
        if key in ("N", "dt", "T"):
            for other in {"N", "dt", "T"} - {key}:
                if other in pairs and not any(o.split("=", 1)[0].strip() == other for o in overrides):
                    if other == "T" or (other == "dt" and key == "T"):
                        pairs.pop(other)
        try:
            pairs[key] = _convert(key, raw)
        except ValueError as exc:
            raise ValidationError(str(exc), key) from None
    return _build(pairs)


def config_echo(cfg: ExperimentConfig) -> str:
    """Canonical text form; ``parse_config(config_echo(c)) == c``."""
    lines = []
    for section, obj in (("model", cfg.model), ("mgrit", cfg.mgrit), ("optimizer", cfg.optimizer), ("experiment", cfg)):
        lines.append(f"# {section}")
        for key in _SECTIONS[section]:
            value = getattr(obj, key)
            if value is None:
                text = "none"
            elif isinstance(value, bool):
                text = "true" if value else "false"
            elif isinstance(value, tuple):
                text = ", ".join(str(v) for v in value)
            else:
                text = repr(value) if isinstance(value, float) else str(value)
            lines.append(f"{key} = {text}")
    return "\n".join(lines) + "\n"


# -- CSV ---------------------------------------------------------------------------


def _fmt(value) -> str:
    if isinstance(value, (bool, np.bool_)):
        return str(bool(value))
    if isinstance(value, (int, np.integer)):
        return str(int(value))
    if isinstance(value, (float, np.floating)):
        # repr is the shortest string that round-trips
        return repr(float(value))
    return str(value)


def emit_csv(records: Sequence[dict], path, columns: Sequence[str] | None = None) -> Path:
    """Write ``records`` as UTF-8 CSV with a header row; floats round-trip exactly."""
    if columns is None:
        if not records:
            raise InvalidInput("columns are required for an empty record list")
        columns = list(records[0].keys())
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with path.open("w", encoding="utf-8", newline="") as fh:
        writer = csv.writer(fh, lineterminator="\n")
        writer.writerow(columns)
        for rec in records:
            writer.writerow([_fmt(rec.get(c, "")) for c in columns])
    return path


def read_csv(path) -> list[dict]:
    """Inverse of :func:`emit_csv` for numeric columns (others stay strings)."""

    def conv(text):
        for cast in (int, float):
            try:
                return cast(text)
            except ValueError:
                pass
        return text

    with Path(path).open(encoding="utf-8", newline="") as fh:
        return [{k: conv(v) for k, v in row.items()} for row in csv.DictReader(fh)]


# -- cost report ------------------------------------------------------------------

COST_COLUMNS = (
    "method",
    "outer_iterations",
    "cycles",
    "steps",
    "adjoint_steps",
    "work",
    "span",
    "wall_time",
    "speedup",
    "speedup_span",
    "overhead",
    "overhead_work",
    "overhead_span",
)

WALL_COLUMNS = ("wall_time", "speedup", "overhead")


@dataclass(frozen=True)
class SimulationCost:
    """A plain forward time-serial simulation, the denominator of the overhead columns."""

    steps: int
    wall_time: float


def cost_report(traces: Sequence[OptimizationTrace], simulation: SimulationCost | None = None) -> list[dict]:
    """One row per method: counters, wall time, speedup vs. the serial method, overhead vs. simulation.

    ``work`` counts forward plus adjoint step applications; ``span`` is the
    forward plus adjoint critical path. Speedups are relative to the
    ``reduced_serial`` trace when present, else to the first trace.
    """
    if not traces:
        raise InvalidInput("cost_report needs at least one trace")
    base = next((t for t in traces if t.method == "reduced_serial"), traces[0])

    def totals(t):
        f = t.final
        return f["wall_time"], f["steps"] + f["adjoint_steps"], f["span"] + f["adjoint_span"]

    b_wall, _, b_span = totals(base)
    rows = []
    if simulation is not None:
        rows.append(
            dict(
                method="simulation",
                outer_iterations=0,
                cycles=0,
                steps=simulation.steps,
                adjoint_steps=0,
                work=simulation.steps,
                span=simulation.steps,
                wall_time=simulation.wall_time,
                speedup=b_wall / simulation.wall_time,
                speedup_span=b_span / simulation.steps,
                overhead=1.0,
                overhead_work=1.0,
                overhead_span=1.0,
            )
        )
    for t in traces:
        wall, work, span = totals(t)
        f = t.final
        row = dict(
            method=t.method,
            outer_iterations=t.iterations,
            cycles=f["cycles"],
            steps=f["steps"],
            adjoint_steps=f["adjoint_steps"],
            work=work,
            span=span,
            wall_time=wall,
            speedup=b_wall / wall,
            speedup_span=b_span / span,
            overhead=math.nan,
            overhead_work=math.nan,
            overhead_span=math.nan,
        )
        if simulation is not None:
            row.update(
                overhead=wall / simulation.wall_time,
                overhead_work=work / simulation.steps,
                overhead_span=span / simulation.steps,
            )
        rows.append(row)
    return rows


# -- experiments -----------------------------------------------------------------


@dataclass
class ResultBundle:
    """Tables (name -> (columns, rows)), the summary table and the config echo."""

    kind: str
    config_echo: str
    tables: dict = field(default_factory=dict)
    summary: list = field(default_factory=list)
    summary_columns: tuple = ()
    results: dict = field(default_factory=dict)
    figures: list = field(default_factory=list)

    def add_table(self, name: str, columns: Sequence[str], rows: list[dict]):
        self.tables[name] = (tuple(columns), rows)

    def write(self, out_dir, figures: bool = True) -> list[Path]:
        out = Path(out_dir)
        out.mkdir(parents=True, exist_ok=True)
        written = [out / "config.txt"]
        written[0].write_text(self.config_echo, encoding="utf-8")
        for name, (columns, rows) in self.tables.items():
            written.append(emit_csv(rows, out / f"{name}.csv", columns))
        if self.summary_columns:
            written.append(emit_csv(self.summary, out / "summary.csv", self.summary_columns))
        if figures:
            from .plots import render_figures

            self.figures = render_figures(self, out)
            written.extend(self.figures)
        return written


def _model(cfg: ExperimentConfig) -> VanDerPolAdvection:
    return VanDerPolAdvection(cfg.model)


def _solver(cfg: ExperimentConfig, model, workers: int) -> Mgrit:
    return Mgrit(model, cfg.model.N, cfg.model.dt, cfg.mgrit, workers=workers, cores=cfg.cores)


def _initial_state(cfg: ExperimentConfig, solver: Mgrit) -> np.ndarray:
    u = solver.initial_guess()
    if cfg.init_noise > 0:
        rng = np.random.default_rng(cfg.seed)
        u[1:] += cfg.init_noise * rng.standard_normal(u[1:].shape) * np.abs(u[1:]).max()
    return u


PIGGYBACK_COLUMNS = (
    "iteration",
    "state_norm",
    "adjoint_norm",
    "state_rel",
    "adjoint_rel",
    "gradient_norm",
    "objective",
    "wall_time",
)


def _piggyback(cfg: ExperimentConfig, workers: int, bundle: ResultBundle):
    model = _model(cfg)
    with _solver(cfg, model, workers) as solver:
        pg = Piggyback(solver, model)
        u0 = _initial_state(cfg, solver)
        t0 = time.perf_counter()
        try:
            u, ubar, g, rec = pg.solve(cfg.rho, tol=cfg.mgrit.halting_tol, max_iters=cfg.mgrit.max_iters, u=u0)
        finally:
            wall = time.perf_counter() - t0
        counts = solver.counter.snapshot()
    s0, a0 = rec.state_norms[0], rec.adjoint_norms[0]
    rows = [
        dict(r, state_rel=r["state_norm"] / s0, adjoint_rel=r["adjoint_norm"] / a0) for r in rec.rows()
    ]
    bundle.add_table("piggyback", PIGGYBACK_COLUMNS, rows)

    # time-serial reference runs for the same design
    t0 = time.perf_counter()
    u_ser = serial_solve(model, cfg.model.N, cfg.model.dt, cfg.rho)
    t_fwd = time.perf_counter() - t0
    t0 = time.perf_counter()
    _, g_ser = serial_adjoint(model, u_ser, cfg.rho, cfg.model.dt)
    t_adj = time.perf_counter() - t0

    def rate(values):
        try:
            return estimate_contraction(values)
        except InsufficientData:
            return math.nan

    eta_s, eta_a = rate(rec.state_norms), rate(rec.adjoint_norms)
    lag = estimate_time_lag(rec)
    bound = alpha_bound(eta_s, lag) if 0 <= eta_s < 1 else math.nan
    summary = dict(
        rho=float(cfg.rho),
        workers=workers,
        cycles=rec.cycles,
        eta_state=eta_s,
        eta_adjoint=eta_a,
        time_lag=lag,
        alpha_bound=bound,
        gradient=float(np.asarray(g)[0]),
        serial_gradient=float(np.asarray(g_ser)[0]),
        max_state_error=float(np.max(np.abs(u - u_ser))),
        steps=counts["steps"],
        adjoint_steps=counts["adjoint_steps"],
        span=counts["span"],
        adjoint_span=counts["adjoint_span"],
        wall_time=wall,
        serial_forward_time=t_fwd,
        serial_adjoint_time=t_adj,
    )
    bundle.summary.append(summary)
    bundle.summary_columns = tuple(summary)
    bundle.results.update(u=u, ubar=ubar, grad=np.asarray(g), record=rec)


def _optimizer(cfg: ExperimentConfig, method: str, workers: int) -> OptimizationResult:
    model = _model(cfg)
    if method == "reduced_serial":
        return reduced_space_serial(model, cfg.model.N, cfg.model.dt, cfg.optimizer, cores=cfg.cores)
    with _solver(cfg, model, workers) as solver:
        pg = Piggyback(solver, model)
        if method == "oneshot":
            return oneshot_run(pg, cfg.optimizer, u0=_initial_state(cfg, solver))
        return reduced_space_parallel(pg, cfg.optimizer)


def _optimization(cfg: ExperimentConfig, method: str, workers: int, bundle: ResultBundle):
    try:
        res = _optimizer(cfg, method, workers)
    except PintoptError as exc:
        if isinstance(exc.partial, OptimizationResult):
            bundle.add_table(method, TRACE_COLUMNS, exc.partial.trace.rows)
        raise
    bundle.add_table(method, TRACE_COLUMNS, res.trace.rows)
    bundle.results[method] = res
    return res


def _simulation_cost(cfg: ExperimentConfig) -> SimulationCost:
    model = _model(cfg)
    counter = CostCounter(1, cfg.model.N, cfg.cores)
    t0 = time.perf_counter()
    serial_solve(model, cfg.model.N, cfg.model.dt, cfg.optimizer.rho0, counter)
    return SimulationCost(steps=counter.total_steps, wall_time=time.perf_counter() - t0)


def _compare(cfg: ExperimentConfig, workers: int, bundle: ResultBundle):
    # the serial simulation doubles as a warm-up for a_target and the propagator caches
    sim = _simulation_cost(cfg)
    traces = []
    for method in ("reduced_serial", "reduced_parallel", "oneshot"):
        traces.append(_optimization(cfg, method, workers, bundle).trace)
    rows = cost_report(traces, sim)
    for row in rows:
        res = bundle.results.get(row["method"])
        row["rho"] = float(res.rho[0]) if res is not None else math.nan
    bundle.summary = rows
    bundle.summary_columns = COST_COLUMNS + ("rho",)


SCALING_COLUMNS = ("workers", "wall_time", "cycles", "max_deviation", "rho")


def _scaling(cfg: ExperimentConfig, bundle: ResultBundle):
    kind = cfg.scaling_kind
    reference = None
    rows = []
    for w in cfg.workers:
        sub = ResultBundle(kind, bundle.config_echo)
        t0 = time.perf_counter()
        if kind == "piggyback":
            _piggyback(cfg, w, sub)
            wall = sub.summary[0]["wall_time"]
            arrays = [sub.results["u"], sub.results["ubar"], sub.results["grad"]]
            cycles, rho = sub.results["record"].cycles, cfg.rho
        else:
            res = _optimization(cfg, kind, w, sub)
            wall = res.trace.final["wall_time"]
            arrays = [res.u, res.ubar, res.rho, res.trace.column("grad_norm")]
            cycles, rho = res.trace.final["cycles"], float(res.rho[0])
        logger.info("scaling %s workers=%d wall=%.2fs (%.2fs incl. setup)", kind, w, wall, time.perf_counter() - t0)
        if reference is None:
            reference = arrays
        dev = max(float(np.max(np.abs(a - b))) if np.shape(a) == np.shape(b) else math.inf for a, b in zip(arrays, reference))
        rows.append(dict(workers=w, wall_time=wall, cycles=cycles, max_deviation=dev, rho=rho))
    bundle.add_table("scaling", SCALING_COLUMNS, rows)
    bundle.summary = rows
    bundle.summary_columns = SCALING_COLUMNS


def run_experiment(cfg: ExperimentConfig) -> ResultBundle:
    """Run the experiment named by ``cfg.kind``; solver errors become :class:`ExperimentFailed`."""
    bundle = ResultBundle(cfg.kind, config_echo(cfg))
    workers = int(cfg.workers[0])
    try:
        if cfg.kind == "piggyback":
            _piggyback(cfg, workers, bundle)
        elif cfg.kind in ("oneshot", "reduced_serial", "reduced_parallel"):
            res = _optimization(cfg, cfg.kind, workers, bundle)
            bundle.summary = cost_report([res.trace])
            for row in bundle.summary:
                row["rho"] = float(res.rho[0])
            bundle.summary_columns = COST_COLUMNS + ("rho",)
        elif cfg.kind == "compare":
            _compare(cfg, workers, bundle)
        else:
            _scaling(cfg, bundle)
    except PintoptError as exc:
        if isinstance(exc, InvalidConfig):
            raise
        raise ExperimentFailed(f"{cfg.kind} experiment failed: {exc}", partial=bundle) from exc
    return bundle


def strip_wall_columns(rows: list[dict]) -> list[dict]:
    """Rows without the measured-time columns (for determinism comparisons)."""
    drop = set(WALL_COLUMNS) | {"serial_forward_time", "serial_adjoint_time"}
    return [{k: v for k, v in r.items() if k not in drop} for r in rows]


__all__ = [
    "ExperimentConfig",
    "ResultBundle",
    "SimulationCost",
    "config_echo",
    "cost_report",
    "emit_csv",
    "parse_config",
    "read_csv",
    "run_experiment",
    "strip_wall_columns",
]
