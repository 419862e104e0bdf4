"""Command line entry point: ``snmm simulate | fit | mc | report``.

Exit codes: 0 success, 2 configuration error, 3 data or identification
problem, 4 numerical failure. Set ``SNMM_LOG`` to error, warn, info or debug.
"""

from __future__ import annotations

import argparse
import json
import logging
import os
import sys
from pathlib import Path
from typing import Any

from .dgp import DgpConfig, simulate
from .estimator import KINDS, CausalSpec, fit_pipeline
from .exceptions import ConfigError, SNMMError, ValidationError
from .montecarlo import (
    MANIFEST_FILE,
    RECORDS_FILE,
    ReplicationRecord,
    load_checkpoint,
    run_study,
    scenarios_from_config,
    study_complete,
    write_study,
)
from .nuisance import NuisanceSpec
from .panel import read_panel_csv, write_panel_csv

log = logging.getLogger("snmm")

LOG_LEVELS = {"error": logging.ERROR, "warn": logging.WARNING, "info": logging.INFO, "debug": logging.DEBUG}
SIMULATE_KEYS = {"dgp", "seed"}
FIT_KEYS = {"panel", "estimator", "nuisance", "causal", "cluster", "seed"}


def _setup_logging():
    level = os.environ.get("SNMM_LOG", "warn").lower()
    if level not in LOG_LEVELS:
        raise ConfigError(f"SNMM_LOG must be one of {', '.join(LOG_LEVELS)}, got {level!r}")
    logging.basicConfig(level=LOG_LEVELS[level], format="%(levelname)s %(name)s: %(message)s", stream=sys.stderr)
    logging.captureWarnings(True)


def load_config(path: str | None) -> dict[str, Any]:
    if path is None:
        return {}
    try:
        text = Path(path).read_text(encoding="utf-8")
    except OSError as err:
        raise ConfigError(f"cannot read config {path}: {err}") from err
    try:
        cfg = json.loads(text)
    except json.JSONDecodeError as err:
        raise ConfigError(f"config {path} is not valid JSON: {err}") from err
    if not isinstance(cfg, dict):
        raise ConfigError("config must be a JSON object")
    return cfg


def _reject_unknown(cfg: dict, allowed: set, where: str):
    unknown = set(cfg) - allowed
    if unknown:
        raise ConfigError(f"unknown {where} key(s): {', '.join(sorted(unknown))}")


def _write_json(path: Path, obj):
    path.write_text(json.dumps(obj, indent=2, sort_keys=True) + "\n", encoding="utf-8")


def cmd_simulate(args) -> int:
    cfg = load_config(args.config)
    _reject_unknown(cfg, SIMULATE_KEYS, "simulate")
    dgp = DgpConfig.from_dict(cfg.get("dgp", {"setting": "P1"}))
    seed = args.seed if args.seed is not None else cfg.get("seed", dgp.seed)
    dgp = dgp.with_seed(int(seed))
    sim = simulate(dgp)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    regions, subjects = write_panel_csv(sim.panel, out)
    _write_json(
        out / MANIFEST_FILE,
        {
            "command": "simulate",
            "config": {"dgp": dgp.to_dict(), "seed": int(seed)},
            "files": [regions.name, subjects.name],
            "clamp_count": sim.clamp_count,
            "clamp_rate": sim.clamp_rate,
        },
    )
    print(f"wrote {regions} and {subjects} (clamp rate {sim.clamp_rate:.4f})")
    return 0


def _nuisance_spec(d: dict[str, Any] | None) -> NuisanceSpec:
    d = dict(d or {})
    _reject_unknown(d, {"intensity", "propensity", "outcome", "outcome_mode"}, "nuisance")
    kw: dict[str, Any] = {}
    for key in ("intensity", "propensity"):
        if key in d:
            kw[key] = tuple(d[key])
    if d.get("outcome") is not None:
        kw["outcome"] = tuple(d["outcome"])
    if "outcome_mode" in d:
        kw["outcome_mode"] = d["outcome_mode"]
    return NuisanceSpec(**kw)


def cmd_fit(args) -> int:
    cfg = load_config(args.config)
    _reject_unknown(cfg, FIT_KEYS, "fit")
    paths = dict(cfg.get("panel", {}))
    _reject_unknown(paths, {"regions", "subjects"}, "panel")
    if args.regions:
        paths["regions"] = args.regions
    if args.subjects:
        paths["subjects"] = args.subjects
    if "regions" not in paths or "subjects" not in paths:
        raise ConfigError("fit needs panel paths: set panel.regions and panel.subjects or pass --regions/--subjects")
    for key in ("regions", "subjects"):
        if not Path(paths[key]).exists():
            raise ValidationError(f"{key} file {paths[key]} does not exist")
    kind = args.estimator or cfg.get("estimator", "pgh")
    if kind not in KINDS:
        raise ConfigError(f"unknown estimator {kind!r}")
    panel = read_panel_csv(paths["regions"], paths["subjects"])
    causal = dict(cfg.get("causal", {}))
    _reject_unknown(causal, {"category_terms", "shared_terms"}, "causal")
    spec = CausalSpec(
        K=panel.K,
        category_terms=tuple(causal.get("category_terms", CausalSpec.category_terms)),
        shared_terms=tuple(causal.get("shared_terms", CausalSpec.shared_terms)),
    )
    nspec = _nuisance_spec(cfg.get("nuisance"))
    est = fit_pipeline(panel, nspec, kind, spec, cluster=cfg.get("cluster", "time"))
    print(est.table())
    if args.out:
        out = Path(args.out)
        out.mkdir(parents=True, exist_ok=True)
        result = est.to_dict()
        result["config"] = {
            "panel": paths,
            "estimator": kind,
            "nuisance": nspec.to_dict(),
            "causal": spec.to_dict(),
            "cluster": est.cluster,
        }
        _write_json(out / "estimate.json", result)
    return 0


def cmd_mc(args) -> int:
    cfg = load_config(args.config)
    scenarios = scenarios_from_config(cfg, seed=args.seed)
    if args.estimator:
        scenarios = [s for s in scenarios if s.kind == args.estimator]
        if not scenarios:
            raise ConfigError(f"no scenarios use estimator {args.estimator!r}")
    out = Path(args.out)
    if args.resume and study_complete(out, scenarios):
        print(f"study in {out} is already complete; nothing to do")
        return 0
    out.mkdir(parents=True, exist_ok=True)
    ckpt = out / RECORDS_FILE
    done = load_checkpoint(out) if args.resume else {}
    if not args.resume and ckpt.exists():
        ckpt.unlink()

    def save(recs: list[ReplicationRecord]):
        with ckpt.open("a", encoding="utf-8") as fh:
            for rec in recs:
                fh.write(json.dumps(rec.to_dict()) + "\n")

    def progress(i, total):
        if i == total or i % max(1, total // 20) == 0:
            log.info("replication tasks: %d/%d", i, total)

    result = run_study(scenarios, workers=args.workers, progress=progress, done=done, on_record=save)
    resolved = dict(cfg)
    resolved["seed"] = scenarios[0].master_seed
    write_study(result, out, resolved, dump_estimates=bool(cfg.get("dump_estimates", False)))
    for sc in scenarios:
        print(f"[{sc.name}]")
        print(result.tables[sc.name].text())
        print()
    result.check()
    return 0


def cmd_report(args) -> int:
    target = Path(args.path or args.out or ".")
    if target.is_file() and target.suffix == ".json" and target.name != MANIFEST_FILE:
        data = json.loads(target.read_text())
        from .estimator import stars

        for name, psi, se, p in zip(data["names"], data["psi"], data["se"], data["pvalue"]):
            print(f"{name:<10} {psi:>10.4f} {se:>9.4f} {p:>9.4f} {stars(p)}")
        return 0
    manifest_path = target / MANIFEST_FILE if target.is_dir() else target
    if not manifest_path.exists():
        raise ValidationError(f"no {MANIFEST_FILE} found at {target}")
    manifest = json.loads(manifest_path.read_text())
    base = manifest_path.parent
    files = manifest.get("files", {})
    if isinstance(files, list):
        print(f"panel files: {', '.join(files)}")
        return 0
    import csv

    for name, fname in files.items():
        print(f"[{name}]  failures: {manifest.get('failures', {}).get(name, 0)}")
        print(f"{'':10} {'BIAS':>8} {'SSD':>8} {'ESE':>8} {'CP':>6} {'MCSE':>7}   (x100, CP in %)")
        with (base / fname).open() as fh:
            for row in csv.DictReader(fh):
                v = {k: float(row[k]) for k in ("bias", "ssd", "ese", "cp", "mcse")}
                print(
                    f"{row['component']:10} {100 * v['bias']:8.2f} {100 * v['ssd']:8.2f} "
                    f"{100 * v['ese']:8.2f} {100 * v['cp']:6.1f} {100 * v['mcse']:7.2f}"
                )
        print()
    return 0


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="snmm", description=__doc__.splitlines()[0])
    sub = parser.add_subparsers(dest="command", required=True)

    def common(p, out_required=False):
        p.add_argument("--config", metavar="PATH", help="JSON config file")
        p.add_argument("--out", metavar="DIR", required=out_required, help="output directory")
        p.add_argument("--seed", type=int, metavar="U64", help="master seed (overrides the config)")

    p = sub.add_parser("simulate", help="simulate a panel and write it as CSV")
    common(p, out_required=True)
    p.set_defaults(func=cmd_simulate)

    p = sub.add_parser("fit", help="fit psi on a CSV panel")
    common(p)
    p.add_argument("--regions", metavar="CSV")
    p.add_argument("--subjects", metavar="CSV")
    p.add_argument("--estimator", choices=KINDS)
    p.set_defaults(func=cmd_fit)

    p = sub.add_parser("mc", help="run a Monte Carlo study")
    common(p, out_required=True)
    p.add_argument("--workers", type=int, default=1, metavar="N")
    p.add_argument("--estimator", choices=KINDS)
    p.add_argument("--resume", action="store_true", help="reuse finished replications in --out")
    p.set_defaults(func=cmd_mc)

    p = sub.add_parser("report", help="print tables from a study directory or estimate JSON")
    p.add_argument("path", nargs="?")
    p.add_argument("--out", metavar="DIR")
    p.set_defaults(func=cmd_report)
    return parser


def main(argv: list[str] | None = None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        _setup_logging()
        return args.func(args)
    except SNMMError as err:
        print(f"error: {err}", file=sys.stderr)
        return err.exit_code


if __name__ == "__main__":
    sys.exit(main())
