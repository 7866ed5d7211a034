"""Command-line entry point: ``accelmix <subcommand> --config run.yaml``.

Exit codes: 0 success, 1 unexpected error, 2 invalid configuration or
arguments, 3 data problems, 4 numerical failures, 5 file I/O.
"""
from __future__ import annotations

import argparse
import csv
import logging
import os
import sys

from . import mbi
from . import pipeline as pl
from .errors import AccelmixError, ValidationError

log = logging.getLogger("accelmix")

SUBCOMMANDS = ("ingest", "featurize", "fit", "search", "classify", "survival", "synth", "run")


def _common(p):
    p.add_argument("--config", required=True, help="YAML run configuration")
    p.add_argument("--seed", type=int, default=None, help="override config seed")
    p.add_argument("--workers", type=int, default=None,
                   help=f"worker processes (also ${pl.WORKERS_ENV}; default 1)")
    p.add_argument("--out", default=None, help="override output directory")


def build_parser() -> argparse.ArgumentParser:
    ap = argparse.ArgumentParser(
        prog="accelmix",
        description="Force-map clustering of accelerometer epochs with survival contrasts.",
        epilog="Config defaults: activity=moderate, grid 25x25 at pooled 99.5th percentiles "
               "with 4x4 sub-cell midpoints, "
               "logit_floor=1e-10, search G=1..6 s,v=1..3 with kmeans and random_soft, "
               "max_iter=400, eps=1e-4, var_floor=1e-8, survival time_origin=followup.",
    )
    ap.add_argument("-v", "--verbose", action="count", default=0)
    sub = ap.add_subparsers(dest="command", required=True)

    for name, text in [
        ("ingest", "parse epoch files listed in the manifest"),
        ("featurize", "ingest and build force maps"),
        ("search", "model search over the configured G, s, v grids"),
        ("run", "full pipeline"),
    ]:
        _common(sub.add_parser(name, help=text))

    p = sub.add_parser("fit", help="fit one mixture")
    _common(p)
    p.add_argument("--G", type=int, required=True)
    p.add_argument("--s", type=int, required=True)
    p.add_argument("--v", type=int, required=True)
    p.add_argument("--init", choices=mbi.INIT_METHODS, default="kmeans")

    p = sub.add_parser("classify", help="MAP cluster labels from a saved model")
    _common(p)
    p.add_argument("--model", default=None, help="model .npz (default: <out>/model.npz)")

    p = sub.add_parser("survival", help="survival contrasts for saved cluster labels")
    _common(p)
    p.add_argument("--clusters", default=None, help="clusters CSV (default: <out>/clusters.csv)")

    p = sub.add_parser("synth", help="write a synthetic cohort and its config")
    p.add_argument("--kind", choices=("maps", "epochs"), default="maps")
    p.add_argument("--n-per", type=int, default=1000, help="participants per group")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--out", required=True)
    return ap


def _config(args) -> pl.PipelineConfig:
    return pl.load_config(args.config, {"seed": args.seed, "workers": args.workers,
                                        "out": args.out})


def _features(cfg, report):
    if cfg.input.features is not None:
        return pl.load_features(cfg, report)
    saved = os.path.join(cfg.out_dir, pl.FEATURES_NAME)
    if os.path.isfile(saved):
        return pl.Features.load(saved)
    series, _ = pl.stage_ingest(cfg, report)
    return pl.stage_featurize(cfg, series, report)


def _read_clusters(path) -> dict:
    try:
        with open(path, newline="", encoding="utf-8") as fh:
            return {r["participant_id"]: int(r["cluster"]) for r in csv.DictReader(fh)}
    except OSError as exc:
        raise ValidationError(f"cannot read clusters {path}: {exc}") from None


def dispatch(args) -> int:
    if args.command == "synth":
        print(pl.write_synthetic_inputs(args.kind, args.out, args.n_per, args.seed))
        return 0
    cfg = _config(args)
    if args.command == "run":
        pl.run_pipeline(cfg)
        print(os.path.join(cfg.out_dir, pl.REPORT_NAME))
        return 0
    report = pl.RunReport(cfg)
    try:
        if args.command == "ingest":
            pl.stage_ingest(cfg, report)
        elif args.command == "featurize":
            series, _ = pl.stage_ingest(cfg, report)
            pl.stage_featurize(cfg, series, report)
        elif args.command == "search":
            pl.stage_search(cfg, _features(cfg, report), report)
        elif args.command == "fit":
            feats = _features(cfg, report)
            spec = mbi.MixtureSpec(args.G, args.s, args.v, args.init, cfg.seed,
                                   max_iter=cfg.search.max_iter, eps=cfg.search.eps,
                                   var_floor=cfg.search.var_floor)
            model = pl.order_by_force(mbi.fit(feats.X, spec), feats.grid)
            mbi.save_model(model, report.artifact("model.npz"))
            report.data["fit"] = {"bic": model.bic, "loglik": model.loglik,
                                  "converged": model.converged, "iterations": model.n_iter}
        elif args.command == "classify":
            model = mbi.load_model(args.model or os.path.join(cfg.out_dir, "model.npz"))
            pl.stage_classify(cfg, model, _features(cfg, report), report)
        elif args.command == "survival":
            if cfg.survival.path is None:
                raise ValidationError("config has no survival.path")
            clusters = _read_clusters(args.clusters or os.path.join(cfg.out_dir, "clusters.csv"))
            pl.stage_survival(cfg, clusters, report)
        report.stage_done(args.command)
        report.data["status"] = "ok"
    except AccelmixError as exc:
        report.data.update(status="failed", failed_stage=args.command,
                           error=f"{type(exc).__name__}: {exc}")
        raise
    finally:
        report.write()
    return 0


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.WARNING - 10 * min(args.verbose, 2),
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        return dispatch(args)
    except AccelmixError as exc:
        print(f"accelmix: {type(exc).__name__}: {exc}", file=sys.stderr)
        return exc.exit_code
    except Exception as exc:  # noqa: BLE001 - last-resort exit code
        log.exception("unexpected failure")
        print(f"accelmix: internal error: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
