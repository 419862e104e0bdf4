"""Replication harness: simulate, fit, summarise.

Scenarios that share a DGP configuration and master seed see the same
simulated panel in replication r, so one replication is simulated once and
every nuisance variant is fitted once, whatever the number of scenarios
that use it. Results are a pure function of the configuration and seed;
the worker count only changes wall time.
"""

from __future__ import annotations

import csv
import io
import json
import logging
import math
import platform
import sys
import time
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any, Callable, Iterable, Sequence

import numpy as np
import scipy

from .dgp import DgpConfig, replication_rng, simulate
from .estimator import KINDS, CausalSpec, EstimatingProblem, check_kind, estimate_from_problem
from .exceptions import ConfigError, ConvergenceError, SNMMError
from .nuisance import (
    INTENSITY_C,
    INTENSITY_W,
    OUTCOME_W,
    PROPENSITY_C,
    PROPENSITY_W,
    NuisancePredictions,
    fit_cox,
    fit_outcome,
    fit_propensity,
    outcome_terms_c,
)
from .panel import build_features

log = logging.getLogger(__name__)

MAX_FAILURE_SHARE = 0.05
Z95 = 1.96
FLAGS = ("C", "W")


@dataclass(frozen=True)
class ScenarioConfig:
    """One cell of a study: a DGP, an estimating function and nuisance flags."""

    dgp: DgpConfig
    kind: str = "pgh"
    pi: str = "C"
    gamma: str = "C"
    h: str = "C"
    R: int = 200
    master_seed: int = 0
    label: str = ""
    outcome_mode: str = "direct"
    cluster: str = "time"

    def __post_init__(self):
        check_kind(self.kind)
        for name in ("pi", "gamma", "h"):
            if getattr(self, name) not in FLAGS:
                raise ConfigError(f"{name} flag must be 'C' or 'W', got {getattr(self, name)!r}")
        if self.R < 2:
            raise ConfigError("a scenario needs at least 2 replications")
        if self.outcome_mode not in ("direct", "two_part"):
            raise ConfigError(f"unknown outcome_mode {self.outcome_mode!r}")
        if self.cluster not in ("time", "region_time"):
            raise ConfigError(f"unknown cluster {self.cluster!r}")

    @property
    def name(self) -> str:
        prefix = f"{self.label}_" if self.label else ""
        return f"{prefix}{self.kind}_pi{self.pi}_gamma{self.gamma}_h{self.h}"

    @property
    def data_key(self) -> str:
        """Scenarios with equal keys share simulated data."""
        return json.dumps([self.dgp.to_dict(), self.master_seed], sort_keys=True)

    @property
    def solve_key(self) -> tuple:
        """Scenarios with equal keys solve the same equation on shared data."""
        return (
            self.kind,
            self.pi if self.kind != "h" else "-",
            self.gamma,
            self.h if self.kind != "pg" else "-",
            self.outcome_mode if self.kind != "pg" else "-",
            self.cluster,
        )

    def to_dict(self) -> dict[str, Any]:
        return {
            "name": self.name,
            "label": self.label,
            "kind": self.kind,
            "pi": self.pi,
            "gamma": self.gamma,
            "h": self.h,
            "R": self.R,
            "master_seed": self.master_seed,
            "outcome_mode": self.outcome_mode,
            "cluster": self.cluster,
            "dgp": self.dgp.to_dict(),
        }


@dataclass
class ReplicationRecord:
    scenario: str
    r: int
    ok: bool
    psi: list[float] | None = None
    se: list[float] | None = None
    iterations: int = 0
    clamp_rate: float = 0.0
    error: str | None = None

    def to_dict(self) -> dict[str, Any]:
        return dict(self.__dict__)


# ---------------------------------------------------------------- one replication


class _Fits:
    """Lazy per-replication cache of nuisance fits."""

    def __init__(self, panel, frame):
        self.panel, self.frame = panel, frame
        self._cache: dict[tuple, Any] = {}

    def _get(self, key, fn):
        if key not in self._cache:
            try:
                self._cache[key] = ("ok", fn())
            except SNMMError as err:
                self._cache[key] = ("err", f"{key[0]}: {err}")
        status, value = self._cache[key]
        if status == "err":
            raise _NuisanceFailure(value)
        return value

    def intensity_lp(self, flag):
        feats = INTENSITY_C if flag == "C" else INTENSITY_W
        return self._get(("intensity", flag), lambda: fit_cox(self.frame, feats).linear_predictor(self.frame))

    def propensity(self, flag):
        terms = PROPENSITY_C if flag == "C" else PROPENSITY_W
        return self._get(
            ("propensity", flag),
            lambda: fit_propensity(self.panel, terms).predict_regions(self.panel)[self.frame.region_index],
        )

    def outcome(self, flag, mode):
        def run():
            terms = outcome_terms_c(self.frame.K) if flag == "C" else OUTCOME_W
            model = fit_outcome(self.frame, terms, mode)
            h = np.full((self.frame.n, self.frame.T, self.frame.K), np.nan)
            mask = self.frame.visit == 1
            h[mask] = model.predict_frame(self.frame, mask)
            return h

        return self._get(("outcome", flag, mode), run)


class _NuisanceFailure(Exception):
    pass


def _run_group(scenarios: Sequence[ScenarioConfig], r: int) -> list[ReplicationRecord]:
    """Simulate replication r once and evaluate every scenario on it."""
    first = scenarios[0]
    try:
        sim = simulate(first.dgp, replication_rng(first.master_seed, r))
    except SNMMError as err:
        return [ReplicationRecord(s.name, r, False, error=f"simulation: {err}") for s in scenarios]
    panel = sim.panel
    frame = build_features(panel)
    fits = _Fits(panel, frame)
    spec = CausalSpec(K=panel.K)
    solved: dict[tuple, ReplicationRecord] = {}
    out = []
    for sc in scenarios:
        key = sc.solve_key
        if key not in solved:
            try:
                pred = NuisancePredictions(
                    fits.intensity_lp(sc.gamma),
                    None if sc.kind == "h" else fits.propensity(sc.pi),
                    None if sc.kind == "pg" else fits.outcome(sc.h, sc.outcome_mode),
                )
                problem = EstimatingProblem.build(frame, pred, spec, sc.kind)
                est = estimate_from_problem(problem, spec, cluster=sc.cluster)
                rec = ReplicationRecord(
                    "", r, True, est.psi.tolist(), est.se.tolist(), est.trace.iterations, sim.clamp_rate
                )
            except (SNMMError, _NuisanceFailure, np.linalg.LinAlgError, FloatingPointError) as err:
                rec = ReplicationRecord("", r, False, clamp_rate=sim.clamp_rate, error=str(err))
            solved[key] = rec
        base = solved[key]
        out.append(ReplicationRecord(sc.name, r, base.ok, base.psi, base.se, base.iterations, base.clamp_rate, base.error))
    return out


def run_replication(scenario: ScenarioConfig, r: int) -> ReplicationRecord:
    """Simulate and fit one replication of one scenario; failures are recorded."""
    if not 0 <= r < scenario.R:
        raise ValueError(f"replication index {r} outside [0, {scenario.R})")
    return _run_group([scenario], r)[0]


# ---------------------------------------------------------------- metrics


@dataclass
class MetricsTable:
    """Per-component Monte Carlo summary of one scenario."""

    names: list[str]
    truth: np.ndarray
    bias: np.ndarray
    ssd: np.ndarray
    ese: np.ndarray
    cp: np.ndarray
    mcse: np.ndarray
    n_ok: int
    n_failed: int
    estimates: np.ndarray = field(repr=False, default=None)
    ses: np.ndarray = field(repr=False, default=None)

    @property
    def failure_share(self) -> float:
        total = self.n_ok + self.n_failed
        return self.n_failed / total if total else 0.0

    def to_csv(self) -> str:
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(["component", "bias", "ssd", "ese", "cp", "mcse"])
        for j, name in enumerate(self.names):
            w.writerow([name] + [repr(float(v[j])) for v in (self.bias, self.ssd, self.ese, self.cp, self.mcse)])
        return buf.getvalue()

    def text(self, scale: float = 100.0) -> str:
        head = f"{'':10} {'BIAS':>8} {'SSD':>8} {'ESE':>8} {'CP':>6} {'MCSE':>7}"
        rows = [head]
        for j, name in enumerate(self.names):
            rows.append(
                f"{name:10} {scale * self.bias[j]:8.2f} {scale * self.ssd[j]:8.2f} "
                f"{scale * self.ese[j]:8.2f} {100 * self.cp[j]:6.1f} {scale * self.mcse[j]:7.2f}"
            )
        rows.append(f"replications: {self.n_ok} ok, {self.n_failed} failed")
        return "\n".join(rows)


def summarize(records: Iterable[ReplicationRecord], truth, names: Sequence[str] | None = None) -> MetricsTable:
    """BIAS, SSD, ESE, CP and the Monte Carlo SE of the bias."""
    records = list(records)
    ok = [r for r in records if r.ok]
    failed = len(records) - len(ok)
    if len(ok) < 2:
        raise ConvergenceError(f"only {len(ok)} of {len(records)} replications succeeded; need at least 2")
    truth = np.asarray(truth, dtype=float)
    est = np.array([r.psi for r in ok], dtype=float)
    se = np.array([r.se for r in ok], dtype=float)
    bias = est.mean(axis=0) - truth
    ssd = est.std(axis=0, ddof=1)
    cover = np.abs(est - truth) <= Z95 * se
    names = list(names) if names is not None else [f"psi[{j}]" for j in range(truth.size)]
    return MetricsTable(
        names=names,
        truth=truth,
        bias=bias,
        ssd=ssd,
        ese=se.mean(axis=0),
        cp=cover.mean(axis=0),
        mcse=ssd / math.sqrt(len(ok)),
        n_ok=len(ok),
        n_failed=failed,
        estimates=est,
        ses=se,
    )


# ---------------------------------------------------------------- studies


@dataclass
class StudyResult:
    scenarios: list[ScenarioConfig]
    tables: dict[str, MetricsTable]
    records: dict[str, list[ReplicationRecord]]
    wall_time: float

    @property
    def failed_scenarios(self) -> list[str]:
        return [name for name, t in self.tables.items() if t.failure_share > MAX_FAILURE_SHARE]

    def check(self):
        bad = self.failed_scenarios
        if bad:
            raise ConvergenceError(f"more than {MAX_FAILURE_SHARE:.0%} failed replications in: {', '.join(bad)}")

    def clamp_rates(self) -> dict[str, float]:
        out = {}
        for name, recs in self.records.items():
            rates = [r.clamp_rate for r in recs]
            out[name] = float(np.mean(rates)) if rates else 0.0
        return out


def _group(scenarios: Sequence[ScenarioConfig]) -> list[list[ScenarioConfig]]:
    groups: dict[str, list[ScenarioConfig]] = {}
    for sc in scenarios:
        groups.setdefault(sc.data_key, []).append(sc)
    # stable order independent of the order scenarios were listed in
    return [sorted(g, key=lambda s: s.name) for _, g in sorted(groups.items())]


def _task(args):
    group, r = args
    return _run_group(group, r)


def run_study(
    scenarios: Sequence[ScenarioConfig],
    workers: int = 1,
    progress: Callable[[int, int], None] | None = None,
    done: dict[tuple[str, int], ReplicationRecord] | None = None,
    on_record: Callable[[list[ReplicationRecord]], None] | None = None,
) -> StudyResult:
    """Run every scenario; replications are distributed over ``workers`` processes.

    ``done`` holds records from an earlier partial run (keyed by scenario name
    and replication index); those replications are not recomputed.
    """
    names = [s.name for s in scenarios]
    if len(set(names)) != len(names):
        raise ConfigError("scenario names must be unique")
    start = time.perf_counter()
    done = dict(done or {})
    tasks = []
    for group in _group(scenarios):
        R = max(s.R for s in group)
        for r in range(R):
            members = [s for s in group if r < s.R and (s.name, r) not in done]
            if members:
                tasks.append((members, r))
    total = len(tasks)
    results: dict[tuple[str, int], ReplicationRecord] = dict(done)

    def collect(recs, i):
        for rec in recs:
            results[(rec.scenario, rec.r)] = rec
        if on_record is not None:
            on_record(recs)
        if progress is not None:
            progress(i + 1, total)
        elif (i + 1) % max(1, total // 10) == 0 or i + 1 == total:
            log.info("finished %d/%d replication tasks", i + 1, total)

    if workers <= 1 or total <= 1:
        for i, task in enumerate(tasks):
            collect(_task(task), i)
    else:
        with ProcessPoolExecutor(max_workers=workers) as pool:
            for i, recs in enumerate(pool.map(_task, tasks, chunksize=max(1, total // (8 * workers)))):
                collect(recs, i)

    tables, by_scenario = {}, {}
    for sc in scenarios:
        recs = [results[(sc.name, r)] for r in range(sc.R)]
        by_scenario[sc.name] = recs
        try:
            tables[sc.name] = summarize(recs, sc.dgp.psi, CausalSpec(K=sc.dgp.K).names)
        except ConvergenceError as err:
            raise ConvergenceError(f"scenario {sc.name}: {err}") from err
    return StudyResult(list(scenarios), tables, by_scenario, time.perf_counter() - start)


# ---------------------------------------------------------------- config and IO


STUDY_KEYS = {"seed", "replications", "dgp", "scenarios", "grid", "outcome_mode", "cluster", "dump_estimates", "name"}
SCENARIO_KEYS = {"kind", "pi", "gamma", "h", "label", "replications", "outcome_mode", "cluster"}


def _as_list(value):
    return value if isinstance(value, list) else [value]


def scenarios_from_config(cfg: dict[str, Any], seed: int | None = None) -> list[ScenarioConfig]:
    """Expand a study config into scenarios.

    ``dgp`` is one DGP mapping or a list of them (each may carry a
    ``label``); ``grid`` crosses lists of ``kind``/``pi``/``gamma``/``h``
    values, and ``scenarios`` lists explicit cells. Both may be given.
    """
    unknown = set(cfg) - STUDY_KEYS
    if unknown:
        raise ConfigError(f"unknown study key(s): {', '.join(sorted(unknown))}")
    master = int(seed if seed is not None else cfg.get("seed", 0))
    R = int(cfg.get("replications", 200))
    mode = cfg.get("outcome_mode", "direct")
    cluster = cfg.get("cluster", "time")
    dgps = []
    for i, d in enumerate(_as_list(cfg.get("dgp", {"setting": "P1"}))):
        if not isinstance(d, dict):
            raise ConfigError("each dgp entry must be a mapping")
        d = dict(d)
        label = str(d.pop("label", d.get("setting", f"dgp{i}") if len(_as_list(cfg.get("dgp", {}))) > 1 else ""))
        dgps.append((label, DgpConfig.from_dict(d)))
    cells: list[dict[str, Any]] = []
    grid = cfg.get("grid")
    if grid is not None:
        bad = set(grid) - {"kind", "pi", "gamma", "h"}
        if bad:
            raise ConfigError(f"unknown grid key(s): {', '.join(sorted(bad))}")
        for kind in _as_list(grid.get("kind", list(KINDS))):
            for pi in _as_list(grid.get("pi", ["C"])):
                for gamma in _as_list(grid.get("gamma", ["C"])):
                    for h in _as_list(grid.get("h", ["C"])):
                        cells.append({"kind": kind, "pi": pi, "gamma": gamma, "h": h})
    for cell in cfg.get("scenarios", []):
        bad = set(cell) - SCENARIO_KEYS
        if bad:
            raise ConfigError(f"unknown scenario key(s): {', '.join(sorted(bad))}")
        cells.append(cell)
    if not cells:
        cells = [{"kind": "pgh"}]
    out = []
    for label, dgp in dgps:
        for cell in cells:
            cell = dict(cell)
            out.append(
                ScenarioConfig(
                    dgp=dgp,
                    kind=cell.get("kind", "pgh"),
                    pi=cell.get("pi", "C"),
                    gamma=cell.get("gamma", "C"),
                    h=cell.get("h", "C"),
                    R=int(cell.get("replications", R)),
                    master_seed=master,
                    label=cell.get("label", label),
                    outcome_mode=cell.get("outcome_mode", mode),
                    cluster=cell.get("cluster", cluster),
                )
            )
    return out


def robustness_grid(dgp: DgpConfig, R: int = 200, seed: int = 0, label: str = "") -> list[ScenarioConfig]:
    """All 8 nuisance crosses for each of the three estimating functions."""
    return [
        ScenarioConfig(dgp, kind, pi, gamma, h, R, seed, label)
        for kind in KINDS
        for pi in FLAGS
        for gamma in FLAGS
        for h in FLAGS
    ]


def _versions() -> dict[str, str]:
    from . import __version__

    return {
        "snmm": __version__,
        "python": platform.python_version(),
        "numpy": np.__version__,
        "scipy": scipy.__version__,
    }


RECORDS_FILE = "replications.jsonl"
MANIFEST_FILE = "manifest.json"


def load_checkpoint(out_dir: Path) -> dict[tuple[str, int], ReplicationRecord]:
    path = Path(out_dir) / RECORDS_FILE
    done = {}
    if path.exists():
        for line in path.read_text().splitlines():
            if line.strip():
                d = json.loads(line)
                done[(d["scenario"], d["r"])] = ReplicationRecord(**d)
    return done


def write_study(result: StudyResult, out_dir, config: dict[str, Any] | None = None, dump_estimates: bool = False) -> Path:
    """One metrics CSV per scenario plus a JSON manifest."""
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    files = {}
    for sc in result.scenarios:
        table = result.tables[sc.name]
        path = out / f"{sc.name}.csv"
        path.write_text(table.to_csv())
        files[sc.name] = path.name
        if dump_estimates:
            buf = io.StringIO()
            w = csv.writer(buf, lineterminator="\n")
            w.writerow(["r", "ok"] + table.names + [f"se_{n}" for n in table.names])
            for rec in result.records[sc.name]:
                vals = (rec.psi or [math.nan] * len(table.names)) + (rec.se or [math.nan] * len(table.names))
                w.writerow([rec.r, int(rec.ok)] + [repr(float(v)) for v in vals])
            (out / f"{sc.name}_estimates.csv").write_text(buf.getvalue())
    manifest = {
        "config": config,
        "scenarios": [sc.to_dict() for sc in result.scenarios],
        "files": files,
        "failures": {name: t.n_failed for name, t in result.tables.items()},
        "failed_scenarios": result.failed_scenarios,
        "mean_clamp_rate": result.clamp_rates(),
        "versions": _versions(),
        "wall_time_seconds": result.wall_time,
        "command": sys.argv,
    }
    path = out / MANIFEST_FILE
    path.write_text(json.dumps(manifest, indent=2, default=str) + "\n")
    return path


def study_complete(out_dir, scenarios: Sequence[ScenarioConfig]) -> bool:
    """True when ``out_dir`` already holds outputs for exactly these scenarios."""
    out = Path(out_dir)
    path = out / MANIFEST_FILE
    if not path.exists():
        return False
    try:
        manifest = json.loads(path.read_text())
    except json.JSONDecodeError:
        return False
    if manifest.get("scenarios") != [sc.to_dict() for sc in scenarios]:
        return False
    return all((out / f"{sc.name}.csv").exists() for sc in scenarios)
