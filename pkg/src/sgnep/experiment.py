"""Config-driven experiments: build the game and graph, run, and write artifacts.

A run directory holds

* ``metrics.csv``: one row per major iteration, columns :data:`CSV_COLUMNS`,
  floats written with 17 significant digits so reruns are byte-identical;
* ``meta.json``: resolved config, instance metadata (including substituted
  data), probe and reference reports, wall time;
* ``metrics.png``: four panels (distance, step length, consensus, violation)
  with raw series and moving averages.
"""

from __future__ import annotations

import copy
import csv
import io
import json
import os
import sys
import time
from dataclasses import dataclass
from pathlib import Path

import numpy as np

if sys.version_info >= (3, 11):
    import tomllib
else:
    import tomli as tomllib

from . import __version__
from .errors import ConfigError
from .game import Game, oracle_report
from .graph import CommGraph, build_comm_graph
from .operators import SplittingConfig, assumption6_step_sizes, build_phi, local_set_sampler, monotonicity_probe
from .reference import ReferenceSolution, reference_solution
from .solver import METRIC_COLUMNS, RunResult, Schedules, run
from .topology import circle_plus_chords, complete_graph

OUTPUT_ROOT_ENV = "SGNEP_OUTPUT_ROOT"
CSV_COLUMNS = METRIC_COLUMNS

_SCHEMA = {
    "game": {
        "kind": str, "seed": int,
        # quadratic
        "N": int, "dim": int, "m": int, "noise": float, "coupling": float, "box": list,
        "tightness": float, "spread": float,
        # cournot
        "network_file": str, "n_firms": int, "cap": float,
        # assembly
        "n_players": int, "L": int, "c_spread": float, "cap_fraction": float,
    },
    "graph": {"kind": str, "chords": int, "seed": int, "edges": list},
    "splitting": {
        "rho_mu": float, "rho_z": float, "mode": str, "safety": float,
        "tau1": float, "tau2": float, "tau3": float, "tau4": float,
    },
    "schedule": {
        "gamma_kind": str, "gamma": float, "a": float, "T_kind": str, "T": int,
        "b": float, "scale": float, "floor": int, "unsafe_schedule": bool,
    },
    "run": {
        "K": int, "seed": int, "exact": bool, "early_stop_tol": float, "output_dir": str,
        "ma_window": int, "reference_tol": float, "probe_trials": int, "plot": bool,
    },
}
_GAME_KEYS = {
    "quadratic": {"N", "dim", "m", "noise", "coupling", "box", "tightness", "spread"},
    "cournot": {"network_file", "n_firms", "noise", "cap"},
    "assembly": {"n_players", "m", "L", "c_spread", "cap_fraction"},
}
_DEFAULT_WINDOW = {"quadratic": 30, "cournot": 30, "assembly": 20}


@dataclass
class ExperimentConfig:
    """Validated experiment description (sections mirror the TOML tables)."""

    game: dict
    graph: dict
    splitting: dict
    schedule: dict
    run: dict
    source: str = "<memory>"

    @property
    def name(self) -> str:
        return Path(self.source).stem if self.source != "<memory>" else "experiment"

    def schedules(self) -> Schedules:
        s = {k: v for k, v in self.schedule.items() if k != "unsafe_schedule"}
        try:
            return Schedules(**s)
        except (TypeError, ValueError) as exc:
            raise ConfigError(str(exc), field="schedule") from exc

    def as_dict(self) -> dict:
        return {k: copy.deepcopy(getattr(self, k)) for k in ("game", "graph", "splitting", "schedule", "run")}


def _check_type(section, key, value, want):
    if want is float and isinstance(value, int) and not isinstance(value, bool):
        return float(value)
    if (want is int and isinstance(value, bool)) or not isinstance(value, want):
        raise ConfigError(f"expected {want.__name__}, got {type(value).__name__}", field=f"{section}.{key}")
    return value


def validate_config(raw: dict, source="<memory>") -> ExperimentConfig:
    """Reject unknown tables/keys and wrong types; fill defaults."""
    for section in raw:
        if section not in _SCHEMA:
            raise ConfigError(f"unknown table [{section}]", field=section)
    clean = {}
    for section, schema in _SCHEMA.items():
        table = raw.get(section, {})
        if not isinstance(table, dict):
            raise ConfigError("expected a table", field=section)
        out = {}
        for key, value in table.items():
            if key not in schema:
                raise ConfigError(f"unknown key {key!r}", field=f"{section}.{key}")
            out[key] = _check_type(section, key, value, schema[key])
        clean[section] = out
    game = clean["game"]
    kind = game.get("kind")
    if kind not in _GAME_KEYS:
        raise ConfigError(f"game.kind must be one of {sorted(_GAME_KEYS)}", field="game.kind")
    extra = set(game) - _GAME_KEYS[kind] - {"kind", "seed"}
    if extra:
        key = sorted(extra)[0]
        raise ConfigError(f"key {key!r} does not apply to the {kind} game", field=f"game.{key}")
    game.setdefault("seed", 0)
    graph = clean["graph"]
    graph.setdefault("kind", "game" if kind != "quadratic" else "complete")
    if graph["kind"] not in ("game", "complete", "ring_chords", "edges"):
        raise ConfigError("graph.kind must be game, complete, ring_chords or edges", field="graph.kind")
    if graph["kind"] == "game" and kind == "quadratic":
        raise ConfigError("the quadratic game ships no communication graph", field="graph.kind")
    if graph["kind"] == "edges" and "edges" not in graph:
        raise ConfigError("graph.kind = 'edges' needs an edge list", field="graph.edges")
    sp_ = clean["splitting"]
    for key in ("rho_mu", "rho_z"):
        if key not in sp_:
            raise ConfigError("missing", field=f"splitting.{key}")
        if sp_[key] <= 0:
            raise ConfigError("must be positive", field=f"splitting.{key}")
    sp_.setdefault("mode", "explicit")
    if sp_["mode"] == "explicit":
        missing = [t for t in ("tau1", "tau2", "tau3", "tau4") if t not in sp_]
        if missing:
            raise ConfigError("explicit step sizes need tau1..tau4", field=f"splitting.{missing[0]}")
    elif sp_["mode"] == "assumption6":
        sp_.setdefault("safety", 0.99)
    else:
        raise ConfigError("splitting.mode must be explicit or assumption6", field="splitting.mode")
    sched = clean["schedule"]
    sched.setdefault("unsafe_schedule", False)
    cfg = ExperimentConfig(game, graph, sp_, sched, clean["run"], str(source))
    schedules = cfg.schedules()
    if not schedules.summable and not sched["unsafe_schedule"]:
        a, b = schedules.exponents
        raise ConfigError(
            f"schedule has a + b/2 = {a + b / 2:g}, which is not > 1; set unsafe_schedule = true to run it anyway",
            field="schedule",
        )
    r = cfg.run
    if "K" not in r or r["K"] < 1:
        raise ConfigError("iteration budget must be a positive integer", field="run.K")
    r.setdefault("seed", 0)
    r.setdefault("exact", False)
    r.setdefault("ma_window", _DEFAULT_WINDOW[kind])
    r.setdefault("reference_tol", 1e-8)
    r.setdefault("probe_trials", 50)
    r.setdefault("plot", True)
    return cfg


def load_config(path) -> ExperimentConfig:
    path = Path(path)
    try:
        text = path.read_text()
    except OSError as exc:
        raise ConfigError(f"cannot read {path}: {exc}") from exc
    try:
        raw = tomllib.loads(text)
    except tomllib.TOMLDecodeError as exc:
        raise ConfigError(f"{path}: {exc}") from exc
    return validate_config(raw, source=path)


# -- instance construction ---------------------------------------------------


def build_game(cfg: ExperimentConfig) -> Game:
    g = dict(cfg.game)
    kind = g.pop("kind")
    if kind == "quadratic":
        from .games.quadratic import random_quadratic_game

        if "box" in g:
            g["box"] = tuple(float(v) for v in g["box"])
        return random_quadratic_game(**g)
    if kind == "cournot":
        from .games.cournot import build_paper_cournot

        if "network_file" in g:
            nf = Path(g["network_file"])
            if not nf.is_absolute() and cfg.source != "<memory>":
                nf = Path(cfg.source).parent / nf
            g["network_file"] = nf
        return build_paper_cournot(**g)
    from .games.assembly import build_paper_assembly

    return build_paper_assembly(**g)


def build_graph(cfg: ExperimentConfig, game: Game) -> CommGraph:
    gr = cfg.graph
    N = game.N
    kind = gr["kind"]
    if kind == "game":
        edges = game.comm_edges
    elif kind == "complete":
        edges = complete_graph(N)
    elif kind == "ring_chords":
        edges = circle_plus_chords(N, gr.get("chords", 2), np.random.default_rng(gr.get("seed", 0)))
    else:
        try:
            edges = [(int(a) - 1, int(b) - 1) for a, b in gr["edges"]]
        except (TypeError, ValueError) as exc:
            raise ConfigError("edges must be pairs of 1-based player labels", field="graph.edges") from exc
    return build_comm_graph(edges, N)


def build_splitting(cfg: ExperimentConfig, graph: CommGraph, game: Game) -> SplittingConfig:
    s = cfg.splitting
    if s["mode"] == "assumption6":
        return assumption6_step_sizes(graph, game, s["rho_mu"], s["rho_z"], s["safety"])
    return SplittingConfig.uniform(graph, s["rho_mu"], s["rho_z"], s["tau1"], s["tau2"], s["tau3"], s["tau4"])


def output_root() -> Path:
    return Path(os.environ.get(OUTPUT_ROOT_ENV, "results"))


def output_dir(cfg: ExperimentConfig) -> Path:
    sub = cfg.run.get("output_dir", cfg.name)
    p = Path(sub)
    return p if p.is_absolute() else output_root() / p


def cache_dir() -> Path:
    return output_root() / "cache"


# -- artifacts ----------------------------------------------------------------


def _fmt(v) -> str:
    if isinstance(v, (int, np.integer)):
        return str(int(v))
    return format(float(v), ".17g")


def metrics_csv(records) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(CSV_COLUMNS)
    for r in records:
        w.writerow([_fmt(r[c]) for c in CSV_COLUMNS])
    return buf.getvalue()


def read_metrics(path) -> dict[str, np.ndarray]:
    with open(path, newline="") as fh:
        rows = list(csv.DictReader(fh))
    return {c: np.array([float(r[c]) for r in rows]) for c in CSV_COLUMNS}


def moving_average(x, window: int) -> np.ndarray:
    """Trailing simple moving average (shorter windows at the start)."""
    x = np.asarray(x, float)
    c = np.cumsum(np.insert(x, 0, 0.0))
    idx = np.arange(1, x.size + 1)
    lo = np.maximum(idx - window, 0)
    return (c[idx] - c[lo]) / (idx - lo)


def plot_metrics(series: dict[str, np.ndarray], window: int, path, title=""):
    import matplotlib

    matplotlib.use("Agg")
    import matplotlib.pyplot as plt

    k = series["k"]
    panels = [
        ("distance to reference (relative)", ["dist_rel_ref"]),
        ("step length", ["step"]),
        ("consensus spread", ["consensus_y", "consensus_lam"]),
        ("shared-constraint violation", ["violation"]),
    ]
    fig, axes = plt.subplots(2, 2, figsize=(11, 7))
    for ax, (label, cols) in zip(axes.ravel(), panels):
        for col in cols:
            y = series[col]
            if not np.any(np.isfinite(y)):
                continue
            line, = ax.plot(k, y, lw=0.6, alpha=0.35)
            ax.plot(k, moving_average(y, window), lw=1.6, color=line.get_color(), label=f"{col} (MA {window})")
        ax.set_title(label)
        ax.set_xlabel("iteration")
        if np.all(series[cols[0]][np.isfinite(series[cols[0]])] > 0):
            ax.set_yscale("log")
        ax.legend(fontsize=7)
    if title:
        fig.suptitle(title)
    fig.tight_layout()
    fig.savefig(path, dpi=110)
    plt.close(fig)


def plot_overlay(curves: dict[str, np.ndarray], window: int, path, ylabel="distance to reference (relative)"):
    import matplotlib

    matplotlib.use("Agg")
    import matplotlib.pyplot as plt

    fig, ax = plt.subplots(figsize=(7, 4.5))
    for label, y in curves.items():
        k = np.arange(1, len(y) + 1)
        line, = ax.plot(k, y, lw=0.5, alpha=0.3)
        ax.plot(k, moving_average(y, window), lw=1.6, color=line.get_color(), label=label)
    ax.set_yscale("log")
    ax.set_xlabel("iteration")
    ax.set_ylabel(ylabel)
    ax.legend(fontsize=8)
    fig.tight_layout()
    fig.savefig(path, dpi=110)
    plt.close(fig)


def _json_default(o):
    if isinstance(o, np.ndarray):
        return o.tolist()
    if isinstance(o, (np.floating, np.integer, np.bool_)):
        return o.item()
    if isinstance(o, Path):
        return str(o)
    raise TypeError(f"not serializable: {type(o).__name__}")


def _write_json(path, obj):
    Path(path).write_text(json.dumps(obj, indent=2, sort_keys=True, default=_json_default) + "\n")


# -- commands -------------------------------------------------------------------


@dataclass
class Prepared:
    cfg: ExperimentConfig
    game: Game
    graph: CommGraph
    splitting: SplittingConfig


def prepare(cfg: ExperimentConfig) -> Prepared:
    game = build_game(cfg)
    graph = build_graph(cfg, game)
    return Prepared(cfg, game, graph, build_splitting(cfg, graph, game))


def instance_meta(p: Prepared) -> dict:
    meta = dict(p.game.metadata())
    subs = []
    if getattr(p.game, "network_substituted", False):
        subs.append("transport network replaced by the seeded synthetic road map")
    if meta.get("sigma_symmetrized"):
        subs.append("price slope matrix symmetrized")
    meta["substitutions"] = subs
    meta["comm_edges"] = [list(map(int, e)) for e in p.graph.edges]
    return meta


def compute_reference(p: Prepared) -> ReferenceSolution:
    return reference_solution(p.game, tol=p.cfg.run["reference_tol"], cache_dir=cache_dir())


def probe(cfg: ExperimentConfig, trials=None, oracle_points=10, oracle_draws=2000) -> dict:
    """Monotonicity probe and stochastic-oracle report for the configured instance."""
    p = prepare(cfg)
    trials = cfg.run["probe_trials"] if trials is None else trials
    rep = monotonicity_probe(p.game, local_set_sampler(p.game), trials=max(trials, 1), graph=p.graph, rho_mu=p.splitting.rho_mu)
    out = {"monotonicity": rep.as_dict()}
    if p.game.has_expected_gradient:
        out["oracle"] = oracle_report(p.game, local_set_sampler(p.game), points=oracle_points, draws=oracle_draws).as_dict()
    return out


def _meta_base(p: Prepared, schedules: Schedules) -> dict:
    return {
        "version": __version__,
        "config": p.cfg.as_dict(),
        "config_file": p.cfg.source,
        "instance": instance_meta(p),
        "splitting": {
            "rho_mu": p.splitting.rho_mu, "rho_z": p.splitting.rho_z,
            "tau1": p.splitting.tau1, "tau2": p.splitting.tau2,
            "tau3": p.splitting.tau3, "tau4": p.splitting.tau4, "sigma1": p.splitting.sigma1,
        },
        "schedule": {"description": schedules.describe(), "summable": schedules.summable},
    }


def execute(p: Prepared, schedules: Schedules, x_ref=None, phi=None, callback=None) -> RunResult:
    r = p.cfg.run
    return run(
        p.game, p.graph, p.splitting, schedules, r["K"], r["seed"], x_ref=x_ref, exact=r["exact"], phi=phi,
        early_stop_tol=r.get("early_stop_tol"), callback=callback,
    )


def run_experiment(cfg: ExperimentConfig, out: Path | None = None, callback=None) -> tuple[Path, RunResult]:
    """Run one configured experiment and write its artifacts; returns ``(out_dir, result)``."""
    p = prepare(cfg)
    out = Path(out) if out is not None else output_dir(cfg)
    out.mkdir(parents=True, exist_ok=True)
    schedules = cfg.schedules()
    meta = _meta_base(p, schedules)
    phi = build_phi(p.graph, p.game, p.splitting)
    meta["phi"] = {"min_eig": phi.min_eig, "method": phi.method, "dim": phi.dim}
    if cfg.run["probe_trials"] > 0:
        rep = monotonicity_probe(
            p.game, local_set_sampler(p.game), trials=cfg.run["probe_trials"], graph=p.graph, rho_mu=p.splitting.rho_mu
        )
        meta["probe"] = rep.as_dict()
    ref = compute_reference(p)
    meta["reference"] = {"method": ref.method, "residual": ref.residual, "iterations": ref.iterations, **ref.meta}
    try:
        result = execute(p, schedules, x_ref=ref.x, phi=phi, callback=callback)
        meta["status"] = "completed"
    except Exception as exc:
        partial = getattr(exc, "partial", None)
        if partial is not None:
            (out / "metrics.csv").write_text(metrics_csv(partial.records))
        meta["status"] = f"failed: {exc}"
        _write_json(out / "meta.json", meta)
        raise
    (out / "metrics.csv").write_text(metrics_csv(result.records))
    meta["iterations"] = len(result.records)
    meta["stopped_early"] = result.stopped_early
    meta["wall_time_s"] = result.wall_time
    meta["final"] = {c: result.records[-1][c] for c in CSV_COLUMNS} if result.records else {}
    _write_json(out / "meta.json", meta)
    if cfg.run["plot"]:
        plot_metrics({c: result.column(c) for c in CSV_COLUMNS}, cfg.run["ma_window"], out / "metrics.png", cfg.name)
    return out, result


def parse_schedule(spec: str, base: Schedules) -> Schedules:
    """Parse an inner-step schedule token.

    ``const:T`` gives a constant count; ``power:scale:b:floor`` gives
    ``ceil(scale * k**b) + floor``.  The relaxation sequence is taken from
    ``base``.
    """
    parts = spec.strip().split(":")
    try:
        if parts[0] == "const" and len(parts) == 2:
            return Schedules(base.gamma_kind, base.gamma, base.a, "constant", int(parts[1]), base.b, base.scale, base.floor)
        if parts[0] == "power" and len(parts) == 4:
            return Schedules(base.gamma_kind, base.gamma, base.a, "power", base.T, float(parts[2]), float(parts[1]), int(parts[3]))
    except ValueError as exc:
        raise ConfigError(f"bad schedule {spec!r}: {exc}", field="--schedules") from exc
    raise ConfigError(f"bad schedule {spec!r}; use const:T or power:scale:b:floor", field="--schedules")


def _compare_worker(args):
    cfg, sched, sub = args
    p = prepare(cfg)
    ref = compute_reference(p)
    out_cfg = copy.deepcopy(cfg)
    out_cfg.schedule = {
        "gamma_kind": sched.gamma_kind, "gamma": sched.gamma, "a": sched.a, "T_kind": sched.T_kind,
        "T": sched.T, "b": sched.b, "scale": sched.scale, "floor": sched.floor,
        "unsafe_schedule": cfg.schedule.get("unsafe_schedule", False),
    }
    out_cfg.run = dict(cfg.run, plot=False, probe_trials=0)
    _, result = run_experiment(out_cfg, out=sub)
    return result.column("dist_rel_ref")


def compare_schedules(cfg: ExperimentConfig, specs: list[str], out: Path | None = None, jobs: int = 1):
    """Run the base experiment once per schedule; write ``compare.csv`` and ``compare.png``.

    Returns ``(out_dir, {label: distance curve})``.
    """
    base = cfg.schedules()
    scheds = [parse_schedule(s, base) for s in specs]
    for spec, s in zip(specs, scheds):
        if not s.summable and not cfg.schedule.get("unsafe_schedule", False):
            raise ConfigError(f"schedule {spec!r} is not summable; set unsafe_schedule = true", field="--schedules")
    out = Path(out) if out is not None else output_dir(cfg) / "compare"
    out.mkdir(parents=True, exist_ok=True)
    labels, seen = [], {}
    for s in specs:
        lab = s.strip()
        seen[lab] = seen.get(lab, 0) + 1
        labels.append(lab if seen[lab] == 1 else f"{lab}#{seen[lab]}")  # repeated schedules keep separate columns
    # compute the cached reference once before any fan-out
    compute_reference(prepare(cfg))
    tasks = [(cfg, s, out / f"run{j}") for j, s in enumerate(scheds)]
    t0 = time.perf_counter()
    if jobs > 1 and len(tasks) > 1:
        from concurrent.futures import ProcessPoolExecutor

        with ProcessPoolExecutor(max_workers=jobs) as ex:
            curves_list = list(ex.map(_compare_worker, tasks))
    else:
        curves_list = [_compare_worker(t) for t in tasks]
    curves = dict(zip(labels, curves_list))
    K = max(len(c) for c in curves_list)
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(["k"] + [f"dist[{lab}]" for lab in labels])
    for k in range(K):
        w.writerow([k + 1] + [_fmt(c[k]) if k < len(c) else "" for c in curves_list])
    (out / "compare.csv").write_text(buf.getvalue())
    window = cfg.run["ma_window"]
    _write_json(
        out / "meta.json",
        {
            "config": cfg.as_dict(), "schedules": {lab: s.describe() for lab, s in zip(labels, scheds)},
            "final_ma": {lab: float(moving_average(c, window)[-1]) for lab, c in curves.items()},
            "runs": {lab: f"run{j}" for j, lab in enumerate(labels)}, "wall_time_s": time.perf_counter() - t0,
        },
    )
    if cfg.run["plot"]:
        plot_overlay(curves, window, out / "compare.png")
    return out, curves


def reference_command(cfg: ExperimentConfig) -> tuple[Path, ReferenceSolution]:
    p = prepare(cfg)
    ref = compute_reference(p)
    out = output_dir(cfg)
    out.mkdir(parents=True, exist_ok=True)
    _write_json(
        out / "reference.json",
        {"x": ref.x, "lam": ref.lam, "residual": ref.residual, "iterations": ref.iterations, "method": ref.method,
         "meta": ref.meta, "instance": instance_meta(p)},
    )
    return out, ref


__all__ = [
    "ExperimentConfig", "validate_config", "load_config", "build_game", "build_graph", "build_splitting",
    "run_experiment", "compare_schedules", "parse_schedule", "reference_command", "probe", "metrics_csv",
    "read_metrics", "moving_average", "OUTPUT_ROOT_ENV", "CSV_COLUMNS",
]
