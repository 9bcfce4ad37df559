"""Command-line entry point: ``eenas {search,train-one,eval,report}``."""

import argparse
import json
import logging
import os
import sys
import time

import numpy as np

from . import __version__
from . import archive as arc
from . import autodiff as ad
from . import model as mdl
from . import report as rpt
from . import search as srch
from . import trainer as trn
from .config import RunConfig
from .errors import ConfigError, EenasError

log = logging.getLogger("eenas")

MANIFEST = "manifest.json"


def _dump(obj, path):
    with open(path, "w", encoding="utf-8") as fh:
        json.dump(obj, fh, indent=2, sort_keys=True)
        fh.write("\n")


def _load_config(args):
    cfg = RunConfig.load(args.config) if args.config else RunConfig.default()
    return cfg.with_overrides(seed=args.seed, output_dir=args.out)


def _manifest(cfg, command, **paths):
    return {"config_sha256": cfg.digest(), "code_version": __version__, "command": command, "config": cfg.tree, **paths}


def _check_resume_manifest(out_dir, cfg):
    path = os.path.join(out_dir, MANIFEST)
    if not os.path.exists(path):
        return
    with open(path, encoding="utf-8") as fh:
        old = json.load(fh)
    if old.get("config_sha256") != cfg.digest():
        log.warning("resuming under a different configuration than %s recorded", path)


def cmd_search(args):
    cfg = _load_config(args)
    out = cfg.output_dir()
    os.makedirs(out, exist_ok=True)
    resume = None
    if args.resume:
        resume = arc.load_archive(args.resume)
        _check_resume_manifest(out, cfg)
    archive_path = os.path.join(out, "archive.ndjson")
    cand_dir = os.path.join(out, "candidates")
    scfg = cfg.search_config()
    result = srch.search_loop(scfg, cfg.train_config(), cfg.splits(), archive_path, resume, cand_dir)
    entries = result.state.archive
    if not entries:
        raise EenasError("no candidate could be trained; archive is empty")
    reports = rpt.emit_report(entries, os.path.join(out, "report"), scfg.accuracy_constraint, scfg.macs_constraint, cfg.tree["report"]["entry"], cand_dir)
    selected = [
        {"rank": s.knee_rank, "key": s.entry.key, "admissible": s.admissible, **s.entry.to_dict()} for s in result.selected
    ]
    _dump(selected, os.path.join(out, "selected.json"))
    hist = {"first_admissible_iteration": result.state.first_admissible, "history": result.state.history, "failures": result.state.failures}
    with open(os.path.join(out, "history.json"), "w", encoding="utf-8") as fh:
        json.dump(hist, fh, indent=2, sort_keys=True, default=str)
        fh.write("\n")
    checkpoints = sorted(os.path.join(cand_dir, f) for f in os.listdir(cand_dir) if f.endswith(".nchw")) if os.path.isdir(cand_dir) else []
    _dump(_manifest(cfg, "search", archive=archive_path, reports=reports, checkpoints=checkpoints, elapsed_seconds=result.elapsed), os.path.join(out, MANIFEST))
    for s in result.selected:
        flag = "admissible" if s.admissible else "NOT admissible"
        print(f"{s.knee_rank + 1}. {s.entry.key}  F_A={s.entry.accuracy:.4f}  F_M={s.entry.macs / 1e6:.4f}M  {flag}")
    print(f"archive: {archive_path} ({len(entries)} entries, {result.elapsed:.1f}s)")
    return 0


def _evaluation_record(genome, evaluation, epochs):
    return {
        "genome": list(genome.chromosome()),
        "key": genome.key(),
        "theta": list(genome.theta),
        "B": len(evaluation.gamma),
        "thresholds": evaluation.thresholds,
        "F_A": evaluation.accuracy,
        "F_A_backbone": evaluation.backbone_accuracy,
        "F_M": evaluation.macs,
        "gamma": evaluation.gamma,
        "U": evaluation.utilization,
        "ece": evaluation.ece,
        "epochs": epochs,
    }


def cmd_train_one(args):
    cfg = _load_config(args)
    genome = mdl.parse_genome(args.genome)
    out = cfg.output_dir()
    os.makedirs(out, exist_ok=True)
    scfg = cfg.search_config()
    tcfg = srch.training_config_for(cfg.train_config(), scfg)
    splits = cfg.splits()
    outcome = trn.train_and_evaluate(genome, splits, tcfg, scfg.constrained, scfg.max_exits, scfg.head_channels)
    srch.save_candidate_artifacts(out, genome, outcome)
    record = _evaluation_record(genome, outcome.evaluation, outcome.epochs)
    stem = srch.candidate_stem(out, genome)
    _dump(record, stem + ".eval.json")
    _dump(_manifest(cfg, "train-one", checkpoints=[stem + ".nchw"], reports=[stem + ".eval.json"]), os.path.join(out, MANIFEST))
    print(json.dumps(record, sort_keys=True))
    return 0


def cmd_eval(args):
    cfg = _load_config(args)
    ckpt = args.checkpoint
    spec_path = args.spec or (ckpt[: -len(".nchw")] if ckpt.endswith(".nchw") else ckpt) + ".spec.json"
    for p in (ckpt, spec_path):
        if not os.path.exists(p):
            raise FileNotFoundError(p)
    with open(spec_path, encoding="utf-8") as fh:
        spec = mdl.spec_from_json(fh.read())
    params = {k: ad.Tensor(v) for k, v in ad.load_checkpoint(ckpt).items()}
    missing = set(mdl.param_names(spec)) - set(params)
    if missing:
        raise EenasError(f"checkpoint lacks parameters {sorted(missing)}")
    splits = cfg.splits()
    tcfg = cfg.train_config()
    cache = trn.collect_outputs(spec, params, splits.val.images, splits.val.labels, tcfg.eval_batch)
    if args.thresholds is not None:
        thresholds = [float(t) for t in args.thresholds.split(",") if t.strip()]
        if len(thresholds) != spec.num_exits - 1:
            raise EenasError(f"{len(thresholds)} thresholds given for {spec.num_exits} exits")
        evaluation = trn.evaluate(cache, spec.gamma, thresholds)
    else:
        _, evaluation = trn.tune_thresholds(cache, spec.gamma, tcfg.accuracy_constraint, tcfg.macs_constraint, cfg.tree["search"]["constrained"])
    record = _evaluation_record(spec.genome, evaluation, 0)
    record["admissible"] = bool(evaluation.accuracy >= tcfg.accuracy_constraint and evaluation.macs <= tcfg.macs_constraint)
    print(json.dumps(record, sort_keys=True))
    return 0


def cmd_report(args):
    cfg = _load_config(args)
    path = args.archive or os.path.join(cfg.output_dir(), "archive.ndjson")
    if not os.path.exists(path):
        raise FileNotFoundError(path)
    entries = arc.load_archive(path)
    if not entries:
        raise EenasError("archive contains no entries")
    out = args.report_dir or os.path.join(cfg.output_dir(), "report")
    cand_dir = args.candidates or os.path.join(os.path.dirname(os.path.abspath(path)), "candidates")
    c = cfg.tree["constraints"]
    entry = args.entry if args.entry is not None else cfg.tree["report"]["entry"]
    for p in rpt.emit_report(entries, out, c["accuracy"], c["macs"], entry, cand_dir):
        print(p)
    return 0


def build_parser():
    parser = argparse.ArgumentParser(prog="eenas", description=__doc__)
    parser.add_argument("--version", action="version", version=f"%(prog)s {__version__}")
    parser.add_argument("-v", "--verbose", action="count", default=0, help="more logging (repeatable)")
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", help="JSON run configuration (defaults apply when omitted)")
    common.add_argument("--seed", type=int, help="override the configured seed")
    common.add_argument("--out", help="output directory (else config output_dir, $EENAS_OUT, ./eenas-out)")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("search", parents=[common], help="run the full architecture search")
    p.add_argument("--resume", help="archive (NDJSON) of an interrupted run with the same configuration")
    p.set_defaults(func=cmd_search)

    p = sub.add_parser("train-one", parents=[common], help="train and evaluate one explicit genome")
    p.add_argument("--genome", required=True, help='e.g. "1-3-16_1-3-16_1-3-16_1-3-16|1010"')
    p.set_defaults(func=cmd_train_one)

    p = sub.add_parser("eval", parents=[common], help="re-evaluate a checkpoint on the validation split")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--spec", help="spec JSON (default: next to the checkpoint)")
    p.add_argument("--thresholds", help="comma-separated thresholds; tuned under the constraints when omitted")
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("report", parents=[common], help="regenerate tables and plots from an archive")
    p.add_argument("--archive", help="archive path (default: <out>/archive.ndjson)")
    p.add_argument("--entry", type=int, help="archive index for the threshold sweep and histograms")
    p.add_argument("--report-dir", help="where to write (default: <out>/report)")
    p.add_argument("--candidates", help="directory of cached candidate outputs")
    p.set_defaults(func=cmd_report)
    return parser


def main(argv=None):
    parser = build_parser()
    args = parser.parse_args(argv)
    level = logging.WARNING - 10 * min(args.verbose, 2)
    logging.basicConfig(level=level, format="%(asctime)s %(levelname)s %(name)s: %(message)s")
    started = time.monotonic()
    try:
        status = args.func(args)
    except ConfigError as exc:
        print(f"eenas: {exc}", file=sys.stderr)
        return 2
    except FileNotFoundError as exc:
        print(f"eenas: file not found: {exc.filename or exc}", file=sys.stderr)
        return 3
    except (EenasError, ValueError, OSError) as exc:
        print(f"eenas: {exc}", file=sys.stderr)
        return 1
    log.info("%s finished in %.1fs", args.command, time.monotonic() - started)
    return status


if __name__ == "__main__":  # pragma: no cover
    sys.exit(main())
