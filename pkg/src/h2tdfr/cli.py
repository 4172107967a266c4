"""Command-line front end.

    h2tdfr <subcommand> [--config FILE] [--preset NAME] [--out DIR] [--section.key=value ...]

Subcommands: generate, erm, dfr, affine-dfr, h2t-dfr, eval, sweep, report.
Artifacts go under ``$H2TDFR_ARTIFACTS`` (default ``./artifacts``) unless
``--out`` is given. Failures exit nonzero with a JSON error on stderr.
"""
from __future__ import annotations

import argparse
import json
import logging
import os
import sys
from concurrent.futures import ProcessPoolExecutor
from pathlib import Path

from . import datasets as ds
from . import pipeline as pl
from .config import METHODS, PRESETS, REFERENCE_RESULTS, ConfigError, RunConfig, resolve_config

ARTIFACT_ENV = "H2TDFR_ARTIFACTS"

log = logging.getLogger("h2tdfr")

EXIT_CONFIG = 2
EXIT_MISSING = 3
EXIT_PHASE = 4
EXIT_MISMATCH = 5


class MissingArtifact(FileNotFoundError):
    pass


def artifact_root() -> Path:
    return Path(os.environ.get(ARTIFACT_ENV, "artifacts"))


def _fail(kind: str, message: str, code: int, **extra) -> int:
    print(json.dumps({"error": kind, "message": message, **extra}, sort_keys=True), file=sys.stderr)
    return code


def _load_config_file(path: str | None):
    """A config file may also be a run manifest; its config block is used."""
    if path is None:
        return None
    p = Path(path)
    if not p.exists():
        raise ConfigError("config", f"config file not found: {p}")
    text = p.read_text().strip()
    if not text:
        return {}
    try:
        doc = json.loads(text)
    except json.JSONDecodeError as exc:
        raise ConfigError("config", f"{p} is not valid JSON ({exc})") from None
    if isinstance(doc, dict) and doc.get("format") == "h2tdfr-run":
        return doc["config"]
    return doc


def _resolve(args, overrides: list[str], method: str | None = None):
    flags = list(overrides)
    if method is not None:
        flags.append(f"--method={json.dumps(method)}")
    return resolve_config(_load_config_file(args.config), flags, args.preset)


def _phase1_from(path: str):
    """Phase-1 model (and losses, when known) from a checkpoint file or run dir."""
    p = Path(path)
    if p.is_dir():
        manifest = p / "manifest.json"
        ckpt = p / "phase1.ckpt.json"
        if not ckpt.exists():
            raise MissingArtifact(str(ckpt))
        losses = json.loads(manifest.read_text()).get("phase1_losses", []) if manifest.exists() else []
        return pl.load_checkpoint(ckpt), losses
    if not p.exists():
        raise MissingArtifact(str(p))
    return pl.load_checkpoint(p), []


def run_one(config: RunConfig, provenance: dict, out_dir: Path, phase1_from: str | None = None) -> dict:
    splits = pl.load_splits(config)
    p1 = losses = None
    if phase1_from is not None:
        p1, losses = _phase1_from(phase1_from)
    result = pl.run(config, splits=splits, phase1_model=p1, phase1_losses=losses)
    pl.write_run(result, config, out_dir, provenance, splits)
    return result.metrics.to_dict()


def _sweep_worker(payload):
    config_dict, provenance, out_dir = payload
    config = RunConfig.model_validate(config_dict)
    return run_one(config, provenance, Path(out_dir))


def cmd_generate(args, overrides) -> int:
    resolved = _resolve(args, overrides)
    cfg = resolved.config
    spec = cfg.data.generator_spec(cfg.seed)
    out = Path(args.out) if args.out else artifact_root() / "data" / f"{spec.variant}-seed{spec.seed}"
    path = ds.save_generated(ds.generate(spec), spec, out)
    print(json.dumps({"manifest": str(path)}))
    return 0


def cmd_method(args, overrides, method: str) -> int:
    resolved = _resolve(args, overrides, method)
    cfg = resolved.config
    out = Path(args.out) if args.out else artifact_root() / method / f"seed-{cfg.seed}"
    metrics = run_one(cfg, resolved.provenance, out, args.phase1_from)
    print(json.dumps({"run_dir": str(out), "metrics": metrics}, sort_keys=True))
    return 0


def cmd_eval(args, overrides) -> int:
    run_dir = Path(args.run)
    manifest_path = run_dir / "manifest.json"
    if not manifest_path.exists():
        raise MissingArtifact(str(manifest_path))
    manifest = json.loads(manifest_path.read_text())
    config = RunConfig.model_validate(manifest["config"])
    ckpt = run_dir / manifest["artifacts"]["checkpoint"]
    if not ckpt.exists():
        raise MissingArtifact(str(ckpt))
    model = pl.load_checkpoint(ckpt)
    splits = pl.load_splits(config)
    metrics = pl.evaluate_groups(model, splits.test)
    text = pl.metrics_json(metrics)
    stored_path = run_dir / manifest["artifacts"]["metrics"]
    stored = stored_path.read_text() if stored_path.exists() else None
    match = stored == text
    print(json.dumps({"run_dir": str(run_dir), "metrics": metrics.to_dict(), "matches_stored": match},
                     sort_keys=True))
    if args.check and not match:
        return _fail("mismatch", "recomputed metrics differ from stored metrics.json", EXIT_MISMATCH)
    return 0


def cmd_sweep(args, overrides) -> int:
    resolved = _resolve(args, overrides)
    base = resolved.config
    root = Path(args.out) if args.out else artifact_root() / f"sweep-{base.method}"
    jobs = [(base.with_seed(s).echo(), resolved.provenance, str(root / f"seed-{s}")) for s in range(args.seeds)]
    if args.jobs > 1:
        with ProcessPoolExecutor(args.jobs) as pool:
            results = list(pool.map(_sweep_worker, jobs))
    else:
        results = [_sweep_worker(j) for j in jobs]
    metrics = [pl.GroupMetrics.from_dict(m) for m in results]
    agg = {"method": base.method, "preset": base.preset, "seeds": list(range(args.seeds)),
           "runs": [j[2] for j in jobs], "aggregate": pl.aggregate_metrics(metrics)}
    (root / "aggregate.json").write_text(json.dumps(agg, indent=2, sort_keys=True) + "\n")
    print(json.dumps(agg, sort_keys=True))
    return 0


def collect_manifests(paths) -> list[dict]:
    found = []
    for p in paths:
        p = Path(p)
        files = [p] if p.is_file() else sorted(p.rglob("manifest.json"))
        for f in files:
            doc = json.loads(f.read_text())
            if doc.get("format") == "h2tdfr-run":
                found.append(doc)
    return found


def _fmt(mean: float, se: float | None) -> str:
    return f"{100 * mean:.2f}" if se is None else f"{100 * mean:.2f} ± {100 * se:.2f}"


def render_report(manifests: list[dict]) -> str:
    """Table with worst-group and mean-group accuracy (mean ± stderr over seeds)."""
    rows: dict = {}
    for m in manifests:
        key = (m.get("preset") or "synthetic", m["method"])
        rows.setdefault(key, []).append(pl.GroupMetrics.from_dict(m["metrics"]))
    order = {name: i for i, name in enumerate(METHODS)}
    lines = [
        "| Dataset | Method | Seeds | Worst-group accuracy Mean (%) | Mean group accuracy Mean (%) | Reference |",
        "|---|---|---|---|---|---|",
    ]
    for (dataset, method) in sorted(rows, key=lambda k: (k[0], order.get(k[1], 99))):
        ms = rows[(dataset, method)]
        worst = pl.aggregate(x.worst for x in ms)
        mean = pl.aggregate(x.mean_group for x in ms)
        ref = REFERENCE_RESULTS.get((dataset, method))
        ref_txt = "" if ref is None else f"{ref[0][0]:.2f} ± {ref[0][1]:.2f} / {ref[1][0]:.2f} ± {ref[1][1]:.2f}"
        lines.append(f"| {dataset} | {method} | {len(ms)} | {_fmt(*worst)} | {_fmt(*mean)} | {ref_txt} |")
    return "\n".join(lines) + "\n"


def cmd_report(args, overrides) -> int:
    paths = args.paths or [str(artifact_root())]
    for p in paths:
        if not Path(p).exists():
            raise MissingArtifact(p)
    manifests = collect_manifests(paths)
    if not manifests:
        raise MissingArtifact(f"no run manifests under {', '.join(paths)}")
    text = render_report(manifests)
    if args.output:
        Path(args.output).write_text(text)
    print(text, end="")
    return 0


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="h2tdfr", description=__doc__.split("\n")[0], allow_abbrev=False)
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True)

    def common(p, out=True):
        p.add_argument("--config", help="JSON config file (or a run manifest)")
        p.add_argument("--preset", choices=PRESETS)
        if out:
            p.add_argument("--out", help="output directory")
        return p

    common(sub.add_parser("generate", allow_abbrev=False, help="write a synthetic dataset (CSV + manifest)"))
    for method in METHODS:
        p = common(sub.add_parser(method, allow_abbrev=False, help=f"run {method} end to end"))
        p.add_argument("--from", dest="phase1_from", help="phase-1 checkpoint file or run directory")
    p = sub.add_parser("eval", allow_abbrev=False, help="re-evaluate a stored run")
    p.add_argument("--run", required=True)
    p.add_argument("--check", action="store_true", help="exit nonzero if metrics differ from the stored ones")
    p = common(sub.add_parser("sweep", allow_abbrev=False, help="run seeds 0..k-1 and aggregate"))
    p.add_argument("--seeds", type=int, default=5)
    p.add_argument("--jobs", type=int, default=1)
    p = sub.add_parser("report", allow_abbrev=False, help="tabulate stored runs")
    p.add_argument("paths", nargs="*")
    p.add_argument("--output")
    return parser


def main(argv: list[str] | None = None) -> int:
    parser = build_parser()
    args, rest = parser.parse_known_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(asctime)s %(name)s %(levelname)s %(message)s")
    bad = [r for r in rest if not r.startswith("--") or "=" not in r]
    if bad:
        return _fail("usage", f"unrecognized arguments: {' '.join(bad)}", EXIT_CONFIG)
    if args.command in ("eval", "report") and rest:
        return _fail("usage", f"{args.command} takes no config overrides", EXIT_CONFIG)
    handlers = {"generate": cmd_generate, "eval": cmd_eval, "sweep": cmd_sweep, "report": cmd_report}
    try:
        if args.command in METHODS:
            return cmd_method(args, rest, args.command)
        return handlers[args.command](args, rest)
    except ConfigError as exc:
        return _fail("config", str(exc), EXIT_CONFIG, key=exc.key)
    except MissingArtifact as exc:
        return _fail("missing_artifact", f"missing artifact: {exc}", EXIT_MISSING, artifact=str(exc))
    except pl.PhaseError as exc:
        if isinstance(exc.cause, FileNotFoundError):
            return _fail("missing_artifact", str(exc), EXIT_MISSING, phase=exc.phase)
        return _fail("phase", str(exc), EXIT_PHASE, phase=exc.phase)
    except (ds.DatasetError, ValueError) as exc:
        return _fail("invalid", str(exc), EXIT_CONFIG)


if __name__ == "__main__":
    sys.exit(main())
