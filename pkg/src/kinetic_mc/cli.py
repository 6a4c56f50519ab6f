"""Batch runner: ``kinetic-mc run|validate|list-experiments``.

A run is described by an INI-style file.  Keys before any section header
belong to ``[run]``; graph experiments also read a ``[graph]`` section.
Artifacts are CSV files plus ``manifest.json``.
"""

from __future__ import annotations

import configparser
import difflib
import json
import math
import os
import re
import sys
import time
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Any, Callable, Mapping, Sequence

import click
import numpy as np

from . import __version__
from . import equilibria as eq
from . import graph as gr
from . import montecarlo as mc
from .fourier_metrics import xi_grid
from .kinetics import (
    AdvectionDiffusion,
    AdvectionDominated,
    ConservedEnergy,
    EpsilonTooLarge,
    InteractionLaw,
    materialize,
)
from .sampling import (
    Deterministic,
    RngStream,
    TwoPointAtoms,
    TwoPointSym,
    UniformInterval,
    sample_initial_condition,
    standard_uniform_noise,
)

EXIT_CONFIG = 2
EXIT_RUNTIME = 3
EXIT_SELF_CHECK = 4
SEED_ENV = "KINETIC_MC_SEED"
FLOAT_FMT = "%.17g"


class ParseError(ValueError):
    def __init__(self, message: str, line: int | None = None):
        self.line = line
        super().__init__(f"line {line}: {message}" if line is not None else message)


class ValidationError(ValueError):
    def __init__(self, problems: Sequence[tuple[str, str]]):
        self.problems = list(problems)
        super().__init__("; ".join(f"{k}: {r}" for k, r in self.problems))


# --------------------------------------------------------------------------
# Value parsers


def _float(s: str) -> float:
    return float(s)


def _int(s: str) -> int:
    v = float(s)
    if not v.is_integer():
        raise ValueError(f"expected an integer, got {s!r}")
    return int(v)


def _floats(s: str) -> tuple[float, ...]:
    return tuple(float(x) for x in s.replace(",", " ").split())


def _matrix(s: str) -> tuple[tuple[float, ...], ...]:
    rows = tuple(_floats(r) for r in s.split(";") if r.strip())
    if not rows or any(len(r) != len(rows) for r in rows):
        raise ValueError("expected a square matrix with rows separated by ';'")
    return rows


_DIST = re.compile(r"^\s*([a-z_]+)\s*\(([^)]*)\)\s*$")
_DIST_ARITY = {"uniform": 2, "two_point": 1, "atoms": 2, "gaussian": 2}


def _distribution(s: str) -> tuple[str, tuple[float, ...]]:
    m = _DIST.match(s)
    if not m or m.group(1) not in _DIST_ARITY:
        raise ValueError(f"expected one of {', '.join(f'{k}(...)' for k in _DIST_ARITY)}, got {s!r}")
    args = _floats(m.group(2))
    if len(args) != _DIST_ARITY[m.group(1)]:
        raise ValueError(f"{m.group(1)} takes {_DIST_ARITY[m.group(1)]} argument(s)")
    return m.group(1), args


def build_distribution(spec: tuple[str, tuple[float, ...]]):
    name, a = spec
    if name == "uniform":
        if not a[1] > a[0]:
            raise ValueError("uniform(low, high) needs low < high")
        return UniformInterval(*a)
    if name == "two_point":
        return TwoPointSym(a[0])
    if name == "atoms":
        return TwoPointAtoms(*a)
    if not a[1] > 0:
        raise ValueError("gaussian(mean, variance) needs a positive variance")
    return eq.Gaussian(*a)


RUN_KEYS: dict[str, Callable[[str], Any]] = {
    "experiment": str.strip,
    "seed": _int,
    "n_particles": _int,
    "dt": _float,
    "T": _float,
    "eps": _floats,
    "dt_over_eps": _floats,
    "lam": _float,
    "sigma_sq": _float,
    "sigma": _float,
    "delta": _float,
    "f0": _distribution,
    "g0": _distribution,
    "snapshots": _floats,
    "trace_every": _float,
    "hist_bins": _int,
    "hist_lo": _float,
    "hist_hi": _float,
    "xi_min": _float,
    "xi_max": _float,
    "xi_points": _int,
    "output_dir": str.strip,
}

GRAPH_KEYS: dict[str, Callable[[str], Any]] = {
    "P": _matrix,
    "weights": _matrix,
    "chi": _float,
    "mu": _float,
    "mus": _floats,
    "beta": _float,
    "rho10": _float,
    "M110": _float,
    "lam1": _float,
    "sigma1_sq": _float,
    "g20_variance": _float,
    "p": _float,
    "q": _float,
    "dt_ode": _float,
}


# --------------------------------------------------------------------------
# Experiments


@dataclass(frozen=True)
class Experiment:
    name: str
    description: str
    run_defaults: Mapping[str, str]
    graph_defaults: Mapping[str, str] = field(default_factory=dict)
    graph_optional: frozenset[str] = frozenset()


_COMMON = {"trace_every": "0.1", "output_dir": "out"}

EXPERIMENTS: dict[str, Experiment] = {
    e.name: e
    for e in [
        Experiment(
            "fig1",
            "advection-diffusion scaling relaxing to the inverse-gamma equilibrium, one run per eps",
            {
                **_COMMON,
                "n_particles": "200000",
                "eps": "4e-2, 1e-2, 1e-3",
                "dt_over_eps": "0.5, 1, 1",
                "lam": "3.5",
                "sigma_sq": "6",
                "f0": "uniform(-1, 3)",
                "T": "10",
                "snapshots": "0, 2.5, 5, 10",
                "hist_bins": "100",
                "hist_lo": "0",
                "hist_hi": "6",
            },
        ),
        Experiment(
            "fig2",
            "advection-dominated scaling against the exact transport solution",
            {
                **_COMMON,
                "n_particles": "200000",
                "eps": "1e-3",
                "dt_over_eps": "1",
                "lam": "1",
                "sigma": "1.3",
                "delta": "1",
                "f0": "uniform(-1, 3)",
                "T": "4",
                "snapshots": "1, 2, 4",
                "hist_bins": "100",
            },
        ),
        Experiment(
            "cons_energy_sigma0",
            "noise-free conserved-energy scaling against the Gaussian fixed point (short horizon only)",
            {
                **_COMMON,
                "n_particles": "100000",
                "eps": "1e-2",
                "dt_over_eps": "1",
                "lam": "1",
                "sigma": "0",
                "f0": "two_point(1)",
                "T": "1",
                "snapshots": "0, 0.5, 1",
                "hist_bins": "100",
                "hist_lo": "-4",
                "hist_hi": "4",
                "xi_min": "1e-2",
                "xi_max": "5",
                "xi_points": "256",
            },
        ),
        Experiment(
            "two_vertex",
            "two vertices, one draining into the other, against the closed-form pair (g1, g2)",
            {
                **_COMMON,
                "n_particles": "200000",
                "eps": "1e-3",
                "dt_over_eps": "1",
                "T": "3",
                "snapshots": "1, 3",
                "hist_bins": "100",
                "hist_lo": "-2",
                "hist_hi": "6",
            },
            {
                "beta": "0.3",
                "chi": "1",
                "mus": "1, 0",
                "rho10": "0.6",
                "M110": "1",
                "lam1": "3.5",
                "sigma1_sq": "6",
                "g20_variance": "0.25",
            },
        ),
        Experiment(
            "d2_contraction",
            "coupled graph runs from two initial data; fitted decay of the graph d2 distance",
            {
                **_COMMON,
                "n_particles": "20000",
                "dt": "0.01",
                "T": "5",
                "f0": "uniform(-1, 3)",
                "g0": "atoms(0.5, 1.5)",
                "xi_min": "1e-2",
                "xi_max": "1e2",
                "xi_points": "128",
            },
            {"P": "0.5, 0.25; 0.5, 0.75", "chi": "0.1", "mu": "1", "p": "0.7", "q": "0.3"},
            frozenset({"weights"}),
        ),
        Experiment(
            "perron",
            "vertex-mass ODE trace and its Perron equilibrium",
            {**_COMMON, "T": "50"},
            {"P": "0.5, 0.25; 0.5, 0.75", "chi": "1", "dt_ode": "1e-3"},
            frozenset({"weights"}),
        ),
    ]
}

_RUN_ALWAYS = {"experiment", "seed"}


def _allowed_run_keys(exp: Experiment) -> set[str]:
    keys = _RUN_ALWAYS | set(exp.run_defaults)
    if "eps" in exp.run_defaults:
        keys |= {"xi_min", "xi_max", "xi_points"}
    if "hist_bins" in exp.run_defaults:
        keys |= {"hist_lo", "hist_hi"}
    return keys


def _allowed_graph_keys(exp: Experiment) -> set[str]:
    keys = set(exp.graph_defaults) | set(exp.graph_optional)
    if "P" in keys or "weights" in keys:
        keys |= {"P", "weights"}
    return keys


# --------------------------------------------------------------------------
# Config loading


@dataclass
class RunConfig:
    experiment: str
    seed: int
    seed_source: str
    run: dict[str, Any]
    graph: dict[str, Any]
    raw: dict[str, dict[str, str]]

    def echo(self) -> dict:
        return {"experiment": self.experiment, "seed": self.seed, "seed_source": self.seed_source, **self.raw}


def _suggest(key: str, known: Sequence[str]) -> str:
    # A trailing 2 usually means "squared", e.g. "sigma2" for "sigma_sq".
    squared = re.sub(r"_?2$", "_sq", key)
    if squared != key and squared in known:
        return f"; did you mean {squared!r}?"
    close = difflib.get_close_matches(key, list(known), n=1, cutoff=0.6)
    return f"; did you mean {close[0]!r}?" if close else ""


def _read_ini(text: str) -> configparser.ConfigParser:
    cp = configparser.ConfigParser(interpolation=None, strict=True, delimiters=("=",), comment_prefixes=("#", ";"), inline_comment_prefixes=("#",))
    cp.optionxform = str
    try:
        cp.read_string("[run]\n" + text)
    except configparser.DuplicateSectionError as exc:
        raise ParseError(f"duplicate section [{exc.section}]", (exc.lineno or 1) - 1) from None
    except configparser.DuplicateOptionError as exc:
        raise ParseError(f"duplicate key {exc.option!r}", (exc.lineno or 1) - 1) from None
    except configparser.ParsingError as exc:
        line, raw = exc.errors[0]
        raise ParseError(f"cannot parse {raw.strip()!r}", line - 1) from None
    except configparser.Error as exc:
        raise ParseError(str(exc)) from None
    return cp


def _key_lines(text: str) -> dict[tuple[str, str], int]:
    lines, section = {}, "run"
    for n, line in enumerate(text.splitlines(), start=1):
        s = line.strip()
        if s.startswith("[") and s.endswith("]"):
            section = s[1:-1].strip()
        elif "=" in s and not s.startswith(("#", ";")):
            lines[(section, s.split("=", 1)[0].strip())] = n
    return lines


def parse_config(text: str, env: Mapping[str, str] | None = None) -> RunConfig:
    env = os.environ if env is None else env
    cp = _read_ini(text)
    where = _key_lines(text)
    for section in cp.sections():
        if section not in ("run", "graph"):
            raise ParseError(f"unknown section [{section}]; expected [run] or [graph]")
    raw_run = dict(cp["run"])
    raw_graph = dict(cp["graph"]) if cp.has_section("graph") else {}
    for section, raw, known in (("run", raw_run, RUN_KEYS), ("graph", raw_graph, GRAPH_KEYS)):
        for key in raw:
            if key not in known:
                raise ParseError(f"unknown key {key!r} in [{section}]{_suggest(key, known)}", where.get((section, key)))

    problems: list[tuple[str, str]] = []
    name = raw_run.get("experiment", "").strip()
    if name not in EXPERIMENTS:
        problems.append(("experiment", f"must be one of {', '.join(EXPERIMENTS)}"))
        raise ValidationError(problems)
    exp = EXPERIMENTS[name]
    allowed_run, allowed_graph = _allowed_run_keys(exp), _allowed_graph_keys(exp)
    for key in raw_run:
        if key not in allowed_run:
            problems.append((key, f"not used by experiment {name!r}"))
    for key in raw_graph:
        if key not in allowed_graph:
            problems.append((f"graph.{key}", f"not used by experiment {name!r}"))
    if "seed" not in raw_run:
        problems.append(("seed", "required"))

    merged_run = {**exp.run_defaults, **raw_run}
    merged_graph = {**exp.graph_defaults, **raw_graph}
    if "weights" in raw_graph and "P" not in raw_graph:
        merged_graph.pop("P", None)
    seed_source = "config"
    if env.get(SEED_ENV):
        merged_run["seed"] = env[SEED_ENV]
        seed_source = f"environment variable {SEED_ENV}"

    run: dict[str, Any] = {}
    graph: dict[str, Any] = {}
    for target, merged, parsers, prefix in ((run, merged_run, RUN_KEYS, ""), (graph, merged_graph, GRAPH_KEYS, "graph.")):
        for key, value in merged.items():
            if key not in parsers:
                continue
            try:
                target[key] = parsers[key](value)
            except ValueError as exc:
                problems.append((prefix + key, str(exc)))
    if not problems:
        problems.extend(_validate(exp, run, graph))
    if problems:
        raise ValidationError(problems)
    raw = {"run": {k: merged_run[k] for k in sorted(merged_run)}}
    if merged_graph:
        raw["graph"] = {k: merged_graph[k] for k in sorted(merged_graph)}
    return RunConfig(name, run["seed"], seed_source, run, graph, raw)


def load_config(path: str | os.PathLike, env: Mapping[str, str] | None = None) -> RunConfig:
    return parse_config(Path(path).read_text(encoding="utf-8"), env)


def _regime(name: str, run: Mapping[str, Any]):
    eta = standard_uniform_noise()
    if name == "fig1":
        return AdvectionDiffusion(run["lam"], run["sigma_sq"], eta)
    if name == "fig2":
        return AdvectionDominated(run["lam"], run["sigma"], run["delta"], eta)
    if name == "cons_energy_sigma0":
        return ConservedEnergy(run["lam"], run["sigma"], eta if run["sigma"] > 0 else None)
    raise KeyError(name)


def _graph_model(exp: Experiment, graph: Mapping[str, Any], laws) -> gr.GraphModel:
    mu_spec = gr.Normalized(graph["mu"]) if "mu" in graph else gr.PerVertex(tuple(graph["mus"]))
    if "weights" in graph and "P" not in graph:
        return gr.GraphModel.from_weights(np.array(graph["weights"]), graph["chi"], mu_spec, laws)
    return gr.GraphModel(np.array(graph["P"]), graph["chi"], mu_spec, laws)


def _identity_law() -> InteractionLaw:
    return InteractionLaw(Deterministic(1.0), Deterministic(0.0))


def _validate(exp: Experiment, run: dict, graph: dict) -> list[tuple[str, str]]:
    problems: list[tuple[str, str]] = []

    def need(cond: bool, key: str, reason: str):
        if not cond:
            problems.append((key, reason))

    if "seed" in run:
        need(0 <= run["seed"] < 2**64, "seed", "must fit in 64 unsigned bits")
    if "n_particles" in run:
        n = run["n_particles"]
        need(n >= 2 and n % 2 == 0, "n_particles", "must be even and at least 2")
    if "T" in run:
        need(run["T"] > 0, "T", "must be positive")
    if "dt" in run:
        need(run["dt"] > 0, "dt", "must be positive")
    if "trace_every" in run:
        need(run["trace_every"] > 0, "trace_every", "must be positive")
    if "hist_bins" in run:
        need(run["hist_bins"] >= 1, "hist_bins", "must be at least 1")
    if "hist_lo" in run and "hist_hi" in run:
        need(run["hist_hi"] > run["hist_lo"], "hist_hi", "must exceed hist_lo")
    if "xi_points" in run:
        need(run["xi_points"] >= 2, "xi_points", "must be at least 2")
    if "xi_min" in run and "xi_max" in run:
        need(0 < run["xi_min"] < run["xi_max"], "xi_min", "need 0 < xi_min < xi_max")
    if "snapshots" in run and "T" in run:
        bad = [s for s in run["snapshots"] if not 0 <= s <= run["T"]]
        need(not bad, "snapshots", f"times {bad} fall outside [0, T]")
    for key in ("f0", "g0"):
        if key in run:
            try:
                build_distribution(run[key])
            except ValueError as exc:
                problems.append((key, str(exc)))

    if "eps" in run:
        eps, ratios = run["eps"], run.get("dt_over_eps", ())
        need(len(eps) >= 1, "eps", "at least one value required")
        need(len(ratios) == len(eps), "dt_over_eps", f"needs one ratio per eps value ({len(eps)})")
        need(all(0 < r <= 1 for r in ratios), "dt_over_eps", "ratios must lie in (0, 1]")
        if exp.name in ("fig1", "fig2", "cons_energy_sigma0"):
            try:
                regime = _regime(exp.name, run)
            except (ValueError, KeyError) as exc:
                problems.append(("lam", str(exc)))
            else:
                for e in eps:
                    try:
                        materialize(regime, e)
                    except EpsilonTooLarge as exc:
                        problems.append(("eps", f"{e:g} is not below the admissibility bound eps_max={exc.eps_max:.12g}"))
                    except ValueError as exc:
                        problems.append(("eps", str(exc)))

    if exp.name in ("d2_contraction", "perron"):
        if "P" not in graph and "weights" not in graph:
            problems.append(("graph.P", "either P or weights is required"))
        else:
            laws = None
            try:
                if exp.name == "d2_contraction":
                    law = InteractionLaw(Deterministic(graph["p"]), Deterministic(graph["q"]))
                    size = len(graph.get("P") or graph.get("weights"))
                    laws = (law,) * size
                    need(graph["mu"] * run["dt"] <= 1, "dt", "mu*dt must not exceed 1")
                else:
                    size = len(graph.get("P") or graph.get("weights"))
                    laws = (_identity_law(),) * size
                    need(graph["dt_ode"] > 0, "graph.dt_ode", "must be positive")
                g = _graph_model(exp, {**graph, **({"mu": 1.0} if exp.name == "perron" else {})}, laws)
                need(g.chi * run.get("dt", 0.0) <= 1, "dt", "chi*dt must not exceed 1")
                if exp.name == "perron":
                    need(gr.is_strongly_connected(g), "graph.P", "the graph must be strongly connected")
            except ValueError as exc:
                problems.append(("graph.P" if "weights" not in graph else "graph.weights", str(exc)))

    if exp.name == "two_vertex":
        try:
            eq.GraphTwoVertexPair(
                graph["rho10"], graph["M110"], graph["lam1"], graph["sigma1_sq"], graph["beta"],
                eq.Gaussian(0.0, graph["g20_variance"]),
            )
        except ValueError as exc:
            problems.append(("graph", str(exc)))
        need(len(graph["mus"]) == 2, "graph.mus", "two vertices need two frequencies")
        need(graph["chi"] > 0, "graph.chi", "must be positive")
        regime = AdvectionDiffusion(graph["lam1"], graph["sigma1_sq"], standard_uniform_noise())
        for e in run.get("eps", ()):
            try:
                materialize(regime, e)
            except ValueError as exc:
                problems.append(("eps", str(exc)))
            need(e * max(run.get("dt_over_eps", (1,))) <= e / graph["chi"], "dt_over_eps", "dt must not exceed eps/chi")
        if run.get("eps"):
            need(len(run["eps"]) == 1, "eps", "the two-vertex experiment takes a single eps")
    return problems


# --------------------------------------------------------------------------
# Emitters


def _fmt(x: float) -> str:
    return FLOAT_FMT % x


def emit_histogram_csv(h: mc.Histogram, path: str | os.PathLike) -> None:
    rows = ["bin_left,bin_right,density"]
    rows += [f"{_fmt(a)},{_fmt(b)},{_fmt(d)}" for a, b, d in zip(h.edges[:-1], h.edges[1:], h.density)]
    _write(path, rows)


def emit_trace_csv(series: Mapping[str, Sequence[float]], path: str | os.PathLike, index: str = "t") -> None:
    """``series`` must contain the ``index`` column, which is written first."""
    if index not in series:
        raise ValueError(f"a trace needs a {index!r} column")
    names = [index] + [k for k in series if k != index]
    n = len(series[index])
    if any(len(series[k]) != n for k in names):
        raise ValueError("all trace columns must have the same length")
    rows = [",".join(names)]
    rows += [",".join(_fmt(float(series[k][j])) for k in names) for j in range(n)]
    _write(path, rows)


def _write(path, rows: list[str]) -> None:
    path = Path(path)
    try:
        with open(path, "w", encoding="utf-8", newline="\n") as fh:
            fh.write("\n".join(rows) + "\n")
    except OSError as exc:
        raise OSError(f"cannot write {path}: {exc}") from exc


def read_csv(path: str | os.PathLike) -> tuple[list[str], np.ndarray]:
    lines = Path(path).read_text(encoding="utf-8").splitlines()
    header = lines[0].split(",")
    data = np.array([[float(x) for x in ln.split(",")] for ln in lines[1:]], dtype=float).reshape(-1, len(header))
    return header, data


# --------------------------------------------------------------------------
# Runners


@dataclass
class Outcome:
    artifacts: list[str] = field(default_factory=list)
    derived: dict[str, Any] = field(default_factory=dict)
    checks: dict[str, bool] = field(default_factory=dict)
    warnings: list[str] = field(default_factory=list)
    timings: dict[str, float] = field(default_factory=dict)


class _Timer:
    def __init__(self, outcome: Outcome, phase: str):
        self.outcome, self.phase = outcome, phase

    def __enter__(self):
        self.t0 = time.perf_counter()

    def __exit__(self, *exc):
        self.outcome.timings[self.phase] = self.outcome.timings.get(self.phase, 0.0) + time.perf_counter() - self.t0


def _tag(x: float) -> str:
    return f"{x:g}".replace("+", "")


def _snapshot_hook(snapshots: Sequence[float], dt: float, store: dict):
    def cb(e):
        for s in snapshots:
            if abs(e.t - s) < 0.5 * dt and s not in store:
                store[s] = e.states.copy() if isinstance(e, mc.Ensemble) else e.copy()

    return cb


def _moment_observers():
    return {"M1": lambda s: mc.ensemble_moment(s, 1), "M2": lambda s: mc.ensemble_moment(s, 2)}


def _record_every(run, dt: float) -> int:
    return max(1, int(round(run["trace_every"] / dt)))


def _outside(h: mc.Histogram) -> dict[str, float]:
    # Sample fractions beyond the histogram range, which the CSV cannot show.
    return {"below": h.underflow / h.n_samples, "above": h.overflow / h.n_samples}


def _overlay_csv(path: Path, centers: np.ndarray, density: np.ndarray, out: Outcome) -> None:
    emit_trace_csv({"v": centers, "density": density}, path, index="v")
    out.artifacts.append(path.name)


def _single_population(cfg: RunConfig, out_dir: Path, workers: int, out: Outcome) -> None:
    run = cfg.run
    regime = _regime(cfg.experiment, run)
    f0 = build_distribution(run["f0"])
    init_stream = RngStream(cfg.seed, (0, 0, mc.PURPOSE_INIT))
    with _Timer(out, "sample_initial"):
        s0 = sample_initial_condition(init_stream, f0, run["n_particles"])
    M10 = float(np.mean(s0))
    out.derived["M10_empirical"] = M10
    for run_id, (eps, ratio) in enumerate(zip(run["eps"], run["dt_over_eps"])):
        dt = eps * ratio
        law, report = materialize(regime, eps)
        tag = f"eps{_tag(eps)}"
        info: dict[str, Any] = {"eps": eps, "dt": dt, "admissibility": report.as_dict()}
        snaps: dict[float, np.ndarray] = {}
        e0 = mc.Ensemble(s0, dt, min(dt / eps, 1.0), cfg.seed, run_id=run_id)
        with _Timer(out, f"simulate_{tag}"):
            trace = mc.run(
                e0, law, run["T"], _moment_observers(),
                callbacks=[_snapshot_hook(run["snapshots"], dt, snaps)],
                workers=workers, record_every=_record_every(run, dt),
            )
        with _Timer(out, f"write_{tag}"):
            emit_trace_csv({"t": trace.times, **trace.series}, out_dir / f"moments_{tag}.csv")
            out.artifacts.append(f"moments_{tag}.csv")
            for t in sorted(snaps):
                states = snaps[t]
                edges = _edges(cfg, run, t)
                h = mc.histogram(states, edges)
                name = f"hist_{tag}_t{_tag(t)}.csv"
                emit_histogram_csv(h, out_dir / name)
                out.artifacts.append(name)
                info.setdefault("histogram_outside", {})[_tag(t)] = _outside(h)
                overlay, params = _overlay(cfg, run, eps, M10, t)
                if overlay is not None:
                    _overlay_csv(out_dir / f"overlay_{tag}_t{_tag(t)}.csv", h.centers, overlay(h.centers), out)
                    info["overlay"] = {k: v for k, v in params.items() if k != "cdf"}
                    info.setdefault("l1_to_overlay", {})[_tag(t)] = mc.l1_to_density(h, params["cdf"])
        final = trace.series["M2"][-1]
        out.checks[f"finite_moments_{tag}"] = bool(np.all(np.isfinite(trace.series["M2"])))
        info["final_M1"], info["final_M2"] = trace.series["M1"][-1], final
        out.derived[tag] = info
        if cfg.experiment == "cons_energy_sigma0":
            out.checks[f"energy_near_initial_{tag}"] = bool(abs(final - trace.series["M2"][0]) <= 0.05)
    if cfg.experiment == "cons_energy_sigma0":
        grid = xi_grid(run["xi_min"], run["xi_max"], run["xi_points"])
        out.derived["gaussian_fixed_point_residual"] = {
            _tag(e): eq.gaussian_fixed_point_residual(run["lam"], e, 1.0, grid) for e in run["eps"]
        }
        out.warnings.append(
            "the mean of the noise-free conserved-energy scaling is an unstable equilibrium of its own "
            "evolution equation: any sampling error in the initial mean grows like exp(sqrt(2*lam/eps)*t), "
            "so only short horizons are meaningful"
        )


def _edges(cfg: RunConfig, run, t: float) -> np.ndarray:
    bins = run["hist_bins"]
    if "hist_lo" in run and "hist_hi" in run:
        return np.linspace(run["hist_lo"], run["hist_hi"], bins + 1)
    # Transport overlay: bins over the support of the exact solution.
    f0 = build_distribution(run["f0"])
    M10 = f0.mean()
    shrink = math.exp(-run["lam"] * t)
    return np.linspace(M10 + (f0.low - M10) * shrink, M10 + (f0.high - M10) * shrink, bins + 1)


def _overlay(cfg: RunConfig, run, eps: float, M10_emp: float, t: float):
    if cfg.experiment == "fig1":
        d = eq.advection_diffusion_equilibrium(run["lam"], run["sigma_sq"], build_distribution(run["f0"]).mean())
        if isinstance(d, eq.DiracAtom):
            return None, {}
        return d.pdf, {"family": "inverse_gamma", "shape": d.shape, "scale": d.scale, "reflected": d.reflected, "cdf": d.cdf}
    if cfg.experiment == "fig2":
        f0 = build_distribution(run["f0"])
        d = eq.TransportSelfSimilar(f0, run["lam"], f0.mean(), t)
        return d.pdf, {"family": "transport_self_similar", "lam": run["lam"], "M10": f0.mean(), "cdf": d.cdf}
    d = eq.Gaussian(0.0, 1.0)
    return d.pdf, {"family": "gaussian", "mean": 0.0, "variance": 1.0, "cdf": d.cdf}


def _two_vertex(cfg: RunConfig, out_dir: Path, workers: int, out: Outcome) -> None:
    run, gcfg = cfg.run, cfg.graph
    eps = run["eps"][0]
    dt = eps * run["dt_over_eps"][0]
    beta = gcfg["beta"]
    pair = eq.GraphTwoVertexPair(
        gcfg["rho10"], gcfg["M110"], gcfg["lam1"], gcfg["sigma1_sq"], beta, eq.Gaussian(0.0, gcfg["g20_variance"])
    )
    law1, report = materialize(AdvectionDiffusion(gcfg["lam1"], gcfg["sigma1_sq"], standard_uniform_noise()), eps)
    g = gr.GraphModel(np.array([[1 - beta, 0.0], [beta, 1.0]]), gcfg["chi"], gr.PerVertex(tuple(gcfg["mus"])), (law1, _identity_law()))
    n = run["n_particles"]
    n1 = int(round(gcfg["rho10"] * n))
    with _Timer(out, "sample_initial"):
        v1 = pair.vertex1_law.sample(RngStream(cfg.seed, (0, 0, mc.PURPOSE_INIT, 0)), n1)
        v2 = pair.g20.sample(RngStream(cfg.seed, (0, 0, mc.PURPOSE_INIT, 1)), n - n1)
    e0 = gr.GraphEnsemble(np.r_[np.zeros(n1, int), np.ones(n - n1, int)], np.r_[v1, v2], dt, cfg.seed)
    snaps: dict[float, gr.GraphEnsemble] = {}

    def vertex1_mean(e):
        v = e.residents(0)
        return float(v.mean()) if v.size else math.nan

    with _Timer(out, "simulate"):
        trace = gr.run_graph_quasi_invariant(
            e0, g, eps, run["T"],
            observers={"rho1": lambda e: e.masses(2)[0], "rho2": lambda e: e.masses(2)[1], "M1_vertex1": vertex1_mean},
            callbacks=[_snapshot_hook(run["snapshots"], dt, snaps)],
            workers=workers, record_every=_record_every(run, dt),
        )
    exact = [pair.mass1(t) for t in trace.times]
    with _Timer(out, "write"):
        emit_trace_csv({"t": trace.times, **trace.series, "rho1_exact": exact}, out_dir / "masses.csv")
        out.artifacts.append("masses.csv")
        edges = np.linspace(run["hist_lo"], run["hist_hi"], run["hist_bins"] + 1)
        l1, outside = {}, {}
        for t in sorted(snaps):
            for i, (mass, pdf, cdf) in enumerate(
                [
                    (pair.mass1(t), lambda v, t=t: pair.g1(v, t), lambda v, t=t: pair.cdf1(v, t)),
                    (pair.mass2(t), lambda v, t=t: pair.g2(v, t), lambda v, t=t: pair.cdf2(v, t)),
                ],
                start=1,
            ):
                h = mc.histogram(snaps[t].residents(i - 1), edges)
                name = f"hist_vertex{i}_t{_tag(t)}.csv"
                emit_histogram_csv(h, out_dir / name)
                out.artifacts.append(name)
                outside[f"vertex{i}_t{_tag(t)}"] = _outside(h)
                _overlay_csv(out_dir / f"overlay_vertex{i}_t{_tag(t)}.csv", h.centers, pdf(h.centers) / mass, out)
                l1[f"vertex{i}_t{_tag(t)}"] = mc.l1_to_density(h, cdf, mass)
    counts = np.bincount(trace.final.vertex, minlength=2)
    out.checks["particle_count_conserved"] = int(counts.sum()) == n
    out.derived.update(
        {
            "eps": eps,
            "dt": dt,
            "admissibility_vertex1": report.as_dict(),
            "profile": {"family": "inverse_gamma", "shape": pair.vertex1_law.shape, "scale": pair.vertex1_law.scale},
            "l1_to_overlay": l1,
            "histogram_outside": outside,
        }
    )


def _d2(cfg: RunConfig, out_dir: Path, workers: int, out: Outcome) -> None:
    run, gcfg = cfg.run, cfg.graph
    law = InteractionLaw(Deterministic(gcfg["p"]), Deterministic(gcfg["q"]))
    size = len(gcfg.get("P") or gcfg.get("weights"))
    g = _graph_model(EXPERIMENTS["d2_contraction"], gcfg, (law,) * size)
    n = run["n_particles"]
    with _Timer(out, "sample_initial"):
        vertex0 = np.arange(n) % g.N
        f0 = build_distribution(run["f0"]).sample(RngStream(cfg.seed, (0, 0, mc.PURPOSE_INIT, 0)), n)
        g0 = build_distribution(run["g0"]).sample(RngStream(cfg.seed, (0, 0, mc.PURPOSE_INIT, 1)), n)
        common = float(np.mean(f0))
        # Each vertex starts from the same mean in both data.
        for i in range(g.N):
            sel = vertex0 == i
            f0[sel] += common - f0[sel].mean()
            g0[sel] += common - g0[sel].mean()
    grid = xi_grid(run["xi_min"], run["xi_max"], run["xi_points"])
    with _Timer(out, "simulate"):
        rep = gr.d2_contraction_experiment(g, vertex0, f0, g0, run["T"], run["dt"], cfg.seed, grid=grid, workers=workers)
    with _Timer(out, "write"):
        emit_trace_csv({"t": rep.times, "D2": rep.distances}, out_dir / "d2_trace.csv")
        out.artifacts.append("d2_trace.csv")
    out.derived.update(
        {
            "slope": rep.slope,
            "slope_se": rep.slope_se,
            "envelope_rate": rep.envelope_rate,
            "slope_within_envelope": rep.passed,
            "coupling": rep.coupling,
            "centering": rep.centering,
            "l2_decay_condition": asdict(gr.l2_decay_condition(g)),
        }
    )
    out.checks["finite_distances"] = bool(np.all(np.isfinite(rep.distances)))


def _perron(cfg: RunConfig, out_dir: Path, workers: int, out: Outcome) -> None:
    run, gcfg = cfg.run, cfg.graph
    size = len(gcfg.get("P") or gcfg.get("weights"))
    g = _graph_model(EXPERIMENTS["perron"], {**gcfg, "mu": 1.0}, (_identity_law(),) * size)
    rho0 = np.zeros(g.N)
    rho0[0] = 1.0
    with _Timer(out, "solve"):
        times, rho = gr.density_ode_solve(g, rho0, run["T"], gcfg["dt_ode"])
        rho_inf = gr.density_equilibrium(g)
    every = _record_every(run, gcfg["dt_ode"])
    keep = np.r_[np.arange(0, times.size, every), [times.size - 1]]
    keep = np.unique(keep)
    with _Timer(out, "write"):
        emit_trace_csv({"t": times[keep], **{f"rho{i + 1}": rho[keep, i] for i in range(g.N)}}, out_dir / "masses.csv")
        emit_trace_csv({"vertex": np.arange(1, g.N + 1, dtype=float), "rho_inf": rho_inf}, out_dir / "equilibrium.csv", index="vertex")
        out.artifacts += ["masses.csv", "equilibrium.csv"]
    residual = float(np.max(np.abs(g.P @ rho_inf - rho_inf)))
    out.derived.update({"perron_residual": residual, "ode_vs_perron": float(np.max(np.abs(rho[-1] - rho_inf)))})
    out.checks["mass_conserved"] = bool(np.max(np.abs(rho.sum(axis=1) - 1.0)) <= 1e-12)
    out.checks["perron_residual"] = residual <= 1e-12


RUNNERS: dict[str, Callable[[RunConfig, Path, int, Outcome], None]] = {
    "fig1": _single_population,
    "fig2": _single_population,
    "cons_energy_sigma0": _single_population,
    "two_vertex": _two_vertex,
    "d2_contraction": _d2,
    "perron": _perron,
}


def _jsonable(x):
    if isinstance(x, dict):
        return {str(k): _jsonable(v) for k, v in x.items()}
    if isinstance(x, (list, tuple)):
        return [_jsonable(v) for v in x]
    if isinstance(x, (np.floating, np.integer, np.bool_)):
        return x.item()
    if isinstance(x, float) and not math.isfinite(x):
        return repr(x)
    return x


def run_experiment(cfg: RunConfig, out_dir: str | os.PathLike | None = None, workers: int = 1) -> int:
    """Run one experiment, write its artifacts and return the process exit code."""
    out_dir = Path(out_dir if out_dir is not None else cfg.run.get("output_dir", "out"))
    out = Outcome()
    t0 = time.perf_counter()
    try:
        out_dir.mkdir(parents=True, exist_ok=True)
        RUNNERS[cfg.experiment](cfg, out_dir, workers, out)
    except Exception as exc:  # noqa: BLE001 - any failure during the run is a runtime error
        click.echo(f"runtime error: {exc}", err=True)
        return EXIT_RUNTIME
    out.timings["total"] = time.perf_counter() - t0
    manifest = {
        "tool": "kinetic-mc",
        "version": __version__,
        "config": cfg.echo(),
        "derived": out.derived,
        "self_check": out.checks,
        "warnings": out.warnings,
        "artifacts": sorted(out.artifacts),
        "timings_seconds": out.timings,
    }
    (out_dir / "manifest.json").write_text(json.dumps(_jsonable(manifest), indent=2, sort_keys=True) + "\n", encoding="utf-8")
    for w in out.warnings:
        click.echo(f"warning: {w}", err=True)
    failed = [k for k, ok in out.checks.items() if not ok]
    if failed:
        click.echo(f"self-check failed: {', '.join(failed)}", err=True)
        return EXIT_SELF_CHECK
    return 0


# --------------------------------------------------------------------------
# Command line


def _load_or_exit(path: str) -> RunConfig:
    try:
        return load_config(path)
    except ParseError as exc:
        click.echo(f"config parse error: {exc}", err=True)
    except ValidationError as exc:
        for key, reason in exc.problems:
            click.echo(f"config error: {key}: {reason}", err=True)
    except OSError as exc:
        click.echo(f"cannot read config: {exc}", err=True)
    sys.exit(EXIT_CONFIG)


@click.group()
@click.version_option(__version__, prog_name="kinetic-mc")
def main():
    """Monte Carlo experiments for linear symmetric kinetic exchange models."""


@main.command()
@click.argument("config_path", type=click.Path(dir_okay=False))
@click.option("--workers", type=click.IntRange(min=1), default=1, show_default=True, help="Threads; results do not depend on it.")
@click.option("--out", "out_dir", type=click.Path(file_okay=False), default=None, help="Output directory (overrides output_dir).")
def run(config_path: str, workers: int, out_dir: str | None):
    """Run the experiment described by CONFIG_PATH."""
    cfg = _load_or_exit(config_path)
    code = run_experiment(cfg, out_dir, workers)
    if code == 0:
        click.echo(f"{cfg.experiment}: done")
    sys.exit(code)


@main.command()
@click.argument("config_path", type=click.Path(dir_okay=False))
def validate(config_path: str):
    """Check CONFIG_PATH without running anything."""
    cfg = _load_or_exit(config_path)
    click.echo(f"{cfg.experiment}: ok (seed {cfg.seed} from {cfg.seed_source})")


@main.command("list-experiments")
def list_experiments():
    """Show the canned experiments."""
    for name, exp in EXPERIMENTS.items():
        click.echo(f"{name:20s} {exp.description}")


if __name__ == "__main__":
    main()
