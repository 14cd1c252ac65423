"""Command-line front door: ``synth``, ``train``, ``eval``, ``ablate``, ``dump-affinity``.

Exit codes: 0 success, 2 configuration error, 3 runtime error.
"""
from __future__ import annotations

import argparse
import csv
import io
import json
import logging
import shutil
import sys
from dataclasses import replace
from pathlib import Path

import numpy as np

from .config import ConfigError, ExperimentConfig, field_types, load_config, load_snapshot, save_snapshot
from .model import load_checkpoint, save_checkpoint
from .protocol import STRATEGIES, EvalRow, compute_affinity, evaluate_model, run_federation, client_prompts
from .synth import generate_federation, load_federation
from .weak_labels import Sparsity

log = logging.getLogger("fedlppa")

EXIT_OK, EXIT_CONFIG, EXIT_RUNTIME = 0, 2, 3

# Table 5 rows as (name, method, tdf, pd, la)
ABLATION_GRID = (
    ("baseline", "fedavg", False, False, False),
    ("+TDF", "fedlppa", True, False, False),
    ("+TDF+PD", "fedlppa", True, True, False),
    ("+TDF+LA", "fedlppa", True, False, True),
    ("full", "fedlppa", True, True, True),
)


class RuntimeFailure(RuntimeError):
    pass


# -- helpers ----------------------------------------------------------------

def _prepare_dir(path: Path, force: bool) -> Path:
    if path.exists() and any(path.iterdir()):
        if not force:
            raise ConfigError(f"{path} exists and is not empty (use --force to overwrite)")
        shutil.rmtree(path)
    path.mkdir(parents=True, exist_ok=True)
    return path


def _fmt(v: float) -> str:
    return f"{v:.6f}"


def metrics_header(num_fg: int) -> list[str]:
    return (["round", "site"] + [f"dsc_{c}" for c in range(1, num_fg + 1)]
            + [f"hd95_{c}" for c in range(1, num_fg + 1)] + ["loss"])


def metrics_row(row: EvalRow) -> list[str]:
    return [str(row.round), str(row.site)] + [_fmt(v) for v in row.dsc] + [_fmt(v) for v in row.hd95] + [
        _fmt(row.loss)]


def write_matrix(path: Path, a: np.ndarray) -> None:
    with path.open("w", newline="") as fh:
        writer = csv.writer(fh)
        for r in a:
            writer.writerow([_fmt(v) for v in r])


def summarize(per_site: dict[int, tuple[list[float], list[float]]], extra: dict | None = None) -> dict:
    """Per-site class-averaged scores plus an "Overall" mean of the per-site averages."""
    sites = {}
    for k in sorted(per_site):
        dsc, hd = per_site[k]
        sites[f"site_{k}"] = {"dsc": [float(v) for v in dsc], "hd95": [float(v) for v in hd],
                              "dsc_mean": float(np.mean(dsc)), "hd95_mean": float(np.mean(hd))}
    overall = {"dsc": float(np.mean([s["dsc_mean"] for s in sites.values()])) if sites else float("nan"),
               "hd95": float(np.mean([s["hd95_mean"] for s in sites.values()])) if sites else float("nan")}
    return {**(extra or {}), "sites": sites, "Overall": overall}


def _load_sites(cfg: ExperimentConfig):
    data = cfg.resolve(cfg.data_dir)
    try:
        return load_federation(data)
    except FileNotFoundError as exc:
        raise RuntimeFailure(f"dataset not found: {exc}") from exc


# -- commands ---------------------------------------------------------------

def cmd_synth(cfg: ExperimentConfig, force: bool = False) -> Path:
    out = _prepare_dir(cfg.resolve(cfg.data_dir), force)
    generate_federation(cfg.site_specs(), cfg.seed, out)
    save_snapshot(cfg, out / "config.json")
    return out


def cmd_train(cfg: ExperimentConfig, force: bool = False, workers: int = 1, config_path=None,
              sites=None) -> Path:
    sites = _load_sites(cfg) if sites is None else sites
    run_dir = _prepare_dir(cfg.resolve(cfg.output_dir), force)
    save_snapshot(cfg, run_dir / "config.json")
    if config_path is not None:
        shutil.copy(config_path, run_dir / "config.toml")
    fed = cfg.fed_config()
    metrics_path = run_dir / "metrics.csv"
    with metrics_path.open("w", newline="") as fh:
        csv.writer(fh).writerow(metrics_header(1))

    def on_eval(t, rows):
        with metrics_path.open("a", newline="") as fh:
            writer = csv.writer(fh)
            for r in rows:
                writer.writerow(metrics_row(r))
        log.info("round %d: mean DSC %.4f", t, float(np.mean([np.mean(r.dsc) for r in rows])))

    result = run_federation(fed, sites, run_dir=run_dir, workers=workers, on_eval=on_eval)
    for t, a in sorted(result.affinity.items()):
        write_matrix(run_dir / f"affinity_round_{t}.csv", a)
    ckpt = run_dir / "checkpoints"
    for k, (model, cid, asp) in result.eval_models.items():
        save_checkpoint(model, ckpt / f"site_{k}")
        (ckpt / f"site_{k}" / "client.json").write_text(
            json.dumps({"client_id": cid, "sparsity": Sparsity(asp).name.lower()}))
    if result.rows:
        final = {r.site: (r.dsc, r.hd95) for r in result.final_rows()}
        summary = summarize(final, {"method": cfg.method, "round": result.rows[-1].round})
        (run_dir / "summary.json").write_text(json.dumps(summary, indent=1, sort_keys=True))
    return run_dir


def cmd_eval(run_dir, data_dir=None) -> dict:
    """Re-evaluate the saved per-site checkpoints; writes and returns summary.json."""
    run_dir = Path(run_dir)
    snap = run_dir / "config.json"
    if not snap.exists():
        raise RuntimeFailure(f"{run_dir} is not a run directory (no config.json)")
    cfg = load_snapshot(snap)
    if data_dir is not None:
        cfg = replace(cfg, data_dir=str(data_dir))
    sites = _load_sites(cfg)
    per_site = {}
    for k, (_, test) in enumerate(sites):
        folder = run_dir / "checkpoints" / f"site_{k}"
        if not folder.exists():
            raise RuntimeFailure(f"missing checkpoint {folder}")
        model = load_checkpoint(folder)
        meta = json.loads((folder / "client.json").read_text())
        per_site[k] = evaluate_model(model, test, meta["client_id"], Sparsity[meta["sparsity"].upper()])
    summary = summarize(per_site, {"method": cfg.method, "round": cfg.rounds})
    (run_dir / "summary.json").write_text(json.dumps(summary, indent=1, sort_keys=True))
    return summary


def ablation_configs(cfg: ExperimentConfig, grid: str = "all") -> list[tuple[str, str, ExperimentConfig]]:
    """(grid, row name, config) triples; every row keeps the base config's data and seed."""
    rows = []
    if grid in ("table5", "all"):
        for name, method, tdf, pd, la in ABLATION_GRID:
            rows.append(("table5", name, replace(cfg, method=method, tdf_on=tdf, pd_on=pd, la_on=la)))
    if grid in ("strategy", "all"):
        for s in STRATEGIES:
            rows.append(("strategy", s, replace(cfg, method="fedlppa", tdf_on=True, pd_on=True, la_on=True,
                                                strategy=s)))
    if not rows:
        raise ConfigError(f"unknown grid {grid!r}")
    return rows


def cmd_ablate(cfg: ExperimentConfig, grid: str = "all", force: bool = False, workers: int = 1) -> Path:
    sites = _load_sites(cfg)
    out = _prepare_dir(cfg.resolve(cfg.output_dir), force)
    save_snapshot(cfg, out / "config.json")
    table = []
    for grid_name, name, row_cfg in ablation_configs(cfg, grid):
        slug = name.replace("+", "plus_").strip("_") if grid_name == "table5" else name
        row_cfg = replace(row_cfg, output_dir=str(out / grid_name / slug))
        run_dir = cmd_train(row_cfg, force=True, workers=workers, sites=sites)
        summary = json.loads((run_dir / "summary.json").read_text()) if (run_dir / "summary.json").exists() else None
        dsc = summary["Overall"]["dsc"] if summary else float("nan")
        hd = summary["Overall"]["hd95"] if summary else float("nan")
        table.append({"grid": grid_name, "row": name, "method": row_cfg.method, "tdf_on": row_cfg.tdf_on,
                      "pd_on": row_cfg.pd_on, "la_on": row_cfg.la_on, "strategy": row_cfg.strategy,
                      "seed": row_cfg.seed, "dsc": dsc, "hd95": hd})
    buf = io.StringIO()
    writer = csv.DictWriter(buf, fieldnames=list(table[0]))
    writer.writeheader()
    for r in table:
        writer.writerow({**r, "dsc": _fmt(r["dsc"]), "hd95": _fmt(r["hd95"])})
    (out / "ablation.csv").write_text(buf.getvalue())
    print(buf.getvalue(), end="")
    return out


def cmd_dump_affinity(run_dir, round_index: int | None = None) -> np.ndarray:
    """Affinity matrix of a run: a stored round, or recomputed from the saved checkpoints."""
    run_dir = Path(run_dir)
    stored = {int(p.stem.rsplit("_", 1)[1]): p for p in run_dir.glob("affinity_round_*.csv")}
    if round_index is not None and round_index not in stored:
        raise RuntimeFailure(f"no affinity file for round {round_index}")
    if stored:
        path = stored[round_index if round_index is not None else max(stored)]
        return np.loadtxt(path, delimiter=",", ndmin=2)
    folders = sorted((run_dir / "checkpoints").glob("site_*"), key=lambda p: int(p.name.split("_")[1]))
    if not folders:
        raise RuntimeFailure(f"no affinity files or checkpoints in {run_dir}")
    prompts = []
    for folder in folders:
        model = load_checkpoint(folder)
        if model.tdf is None:
            raise RuntimeFailure("run has no prompts (fusion module disabled)")
        cid = json.loads((folder / "client.json").read_text())["client_id"]
        prompts.append(client_prompts(model, model.flat("theta"), cid))
    return compute_affinity(prompts)


# -- argument parsing ---------------------------------------------------------

def _add_config_flags(p: argparse.ArgumentParser) -> None:
    p.add_argument("--config", help="TOML file with flat ExperimentConfig keys")
    for key in field_types():
        flag = "lambda" if key == "lam" else key
        p.add_argument(f"--{flag}", dest=f"cfg_{key}", metavar=flag.upper(), default=None)


def _overrides(args) -> dict:
    return {k[4:]: v for k, v in vars(args).items() if k.startswith("cfg_") and v is not None}


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="fedlppa", description=__doc__.splitlines()[0])
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("synth", help="generate the synthetic federation")
    _add_config_flags(p)
    p.add_argument("--force", action="store_true")

    p = sub.add_parser("train", help="run one federation")
    _add_config_flags(p)
    p.add_argument("--force", action="store_true")
    p.add_argument("--workers", type=int, default=1)

    p = sub.add_parser("eval", help="re-evaluate a run directory")
    p.add_argument("run_dir")
    p.add_argument("--data_dir", default=None)

    p = sub.add_parser("ablate", help="run the ablation and strategy grids")
    _add_config_flags(p)
    p.add_argument("--grid", choices=("table5", "strategy", "all"), default="all")
    p.add_argument("--force", action="store_true")
    p.add_argument("--workers", type=int, default=1)

    p = sub.add_parser("dump-affinity", help="print a run's prompt affinity matrix as CSV")
    p.add_argument("run_dir")
    p.add_argument("--round", type=int, default=None)
    return parser


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return EXIT_OK if exc.code == 0 else EXIT_CONFIG
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        if args.command == "synth":
            out = cmd_synth(load_config(args.config, _overrides(args)), args.force)
            print(out)
        elif args.command == "train":
            if args.workers < 1:
                raise ConfigError("--workers must be >= 1")
            cfg = load_config(args.config, _overrides(args))
            print(cmd_train(cfg, args.force, args.workers, config_path=args.config))
        elif args.command == "eval":
            print(json.dumps(cmd_eval(args.run_dir, args.data_dir), indent=1, sort_keys=True))
        elif args.command == "ablate":
            cmd_ablate(load_config(args.config, _overrides(args)), args.grid, args.force, args.workers)
        elif args.command == "dump-affinity":
            a = cmd_dump_affinity(args.run_dir, args.round)
            writer = csv.writer(sys.stdout)
            for r in a:
                writer.writerow([_fmt(v) for v in r])
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except (RuntimeFailure, OSError, RuntimeError, ValueError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_RUNTIME
    return EXIT_OK


if __name__ == "__main__":
    sys.exit(main())
