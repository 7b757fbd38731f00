"""Command line: ``fuzzyp300 {synth,import,train,eval,analyze}``.

Every failure prints one line ``error[<code>]: <message>`` to stderr and
exits with status 1.
"""

from __future__ import annotations

import argparse
import json
import logging
import sys
from concurrent.futures import ThreadPoolExecutor
from dataclasses import replace
from pathlib import Path

from . import pipeline
from .epochs import (
    COHORTS,
    import_csv_epochs,
    load_epochs,
    read_manifest,
    save_epochs,
    synth_oddball,
)
from .errors import ConfigurationError, FuzzyP300Error
from .model import load_checkpoint

log = logging.getLogger("fuzzyp300")


def _config(args) -> pipeline.RunConfig:
    cfg = pipeline.load_config(args.config)
    if getattr(args, "no_preprocess", False):
        cfg = replace(cfg, preprocess=False)
    return cfg


def cmd_synth(args) -> int:
    cfg = _config(args)
    spec, geo = cfg.synth, cfg.geometry
    if args.seed is not None:
        spec = replace(spec, seed=args.seed)
    if args.latency is not None:
        spec = replace(spec, p300_latency_s=args.latency)
    if args.cohort is not None:
        geo = replace(geo, cohort=args.cohort)
    if args.subject is not None:
        geo = replace(geo, subject=args.subject)
    data = synth_oddball(spec, geo.n_channels, geo.n_samples, geo.sample_rate_hz,
                         geo.cohort, geo.subject, geo.session)
    out = Path(args.out)
    if out.parent and not out.parent.exists():
        out.parent.mkdir(parents=True)
    try:
        save_epochs(data, out)
    except OSError as exc:
        raise ConfigurationError(f"cannot write {out}: {exc}") from exc
    n_t = int(data.labels.sum())
    print(f"wrote {out}: {data.n_trials} trials ({n_t} target, {data.n_trials - n_t} non-target), "
          f"{data.n_channels} channels x {data.n_samples} samples @ {data.sample_rate_hz:g} Hz")
    return 0


def cmd_import(args) -> int:
    data = import_csv_epochs(args.source, args.fs, args.t0, args.cohort, args.subject, args.session)
    save_epochs(data, args.out)
    print(f"wrote {args.out}: {data.n_trials} trials, {data.n_channels} x {data.n_samples}")
    return 0


def _train_one(data_path, cfg, out_dir, apply_filter):
    data = load_epochs(data_path)
    doc = pipeline.train_subject(data, cfg, out_dir, apply_filter)
    return data, doc


def cmd_train(args) -> int:
    cfg = _config(args)
    if args.seed is not None:
        cfg = replace(cfg, train=replace(cfg.train, seed=args.seed))
    out = Path(args.out)
    apply_filter = cfg.preprocess
    data_path = Path(args.data)

    if data_path.suffix == ".json":
        entries = read_manifest(data_path)
        dirs = [out / f"{e.get('cohort', 'SYN')}_s{e.get('subject', 0)}_ses{e.get('session', 0)}" for e in entries]
        with ThreadPoolExecutor(max_workers=max(1, args.jobs)) as pool:
            results = list(pool.map(lambda a: _train_one(a[0]["path"], cfg, a[1], apply_filter),
                                    zip(entries, dirs)))
        manifest = {"schema_version": 1, "checkpoints": []}
        per_subject = {}
        for (data, doc), d in zip(results, dirs):
            manifest["checkpoints"].append({
                "path": str(d.relative_to(out) / pipeline.CHECKPOINT_FILE),
                "cohort": data.cohort, "subject": int(data.subject), "session": int(data.session),
            })
            per_subject[d.name] = doc["scores"]
        pipeline.dump_json(manifest, out / "checkpoints.json")
        from .metrics import summarize_subjects
        pipeline.dump_json(summarize_subjects(per_subject), out / "metrics.json")
        print(f"trained {len(results)} subject models into {out}")
        return 0

    _, doc = _train_one(data_path, cfg, out, apply_filter)
    s = doc["scores"]
    print(f"best epoch {doc['best_epoch']}: valid accuracy {s['accuracy']:.4f} f1 {s['f1']:.4f} "
          f"precision {s['precision']:.4f} recall {s['recall']:.4f}")
    return 0


def cmd_eval(args) -> int:
    model, hyper = load_checkpoint(args.checkpoint)
    data = load_epochs(args.data)
    apply_filter = False if args.no_preprocess else None
    doc = pipeline.evaluate_checkpoint(model, hyper, data, apply_filter)
    text = json.dumps(doc, indent=2, sort_keys=True) + "\n"
    if args.out:
        out = Path(args.out)
        if out.suffix != ".json":
            out.mkdir(parents=True, exist_ok=True)
            out = out / "eval_metrics.json"
        out.write_text(text)
    sys.stdout.write(text)
    return 0


def cmd_analyze(args) -> int:
    cfg = _config(args)
    groups = pipeline.read_checkpoint_manifest(args.manifest)
    report = pipeline.analyze(groups, args.out, cfg.analysis)
    flags = report.significant_in_window()
    print(f"wrote center report to {args.out}; rules significant in window: "
          f"{[r for r, v in flags.items() if v]}")
    return 0


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="fuzzyp300", description=__doc__.splitlines()[0])
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True)

    def common(p, seed=True):
        p.add_argument("--config", help="JSON run configuration")
        if seed:
            p.add_argument("--seed", type=int)
        return p

    p = common(sub.add_parser("synth", help="generate a synthetic oddball EPO1 file"))
    p.add_argument("--out", required=True)
    p.add_argument("--latency", type=float, help="override P300 latency (s)")
    p.add_argument("--cohort", choices=COHORTS)
    p.add_argument("--subject", type=int)
    p.set_defaults(func=cmd_synth)

    p = sub.add_parser("import", help="convert per-trial CSV files to EPO1")
    p.add_argument("source", help="directory with labels.csv and trial CSVs")
    p.add_argument("--out", required=True)
    p.add_argument("--fs", type=float, required=True)
    p.add_argument("--t0", type=float, required=True)
    p.add_argument("--cohort", choices=COHORTS, default="SYN")
    p.add_argument("--subject", type=int, default=0)
    p.add_argument("--session", type=int, default=0)
    p.set_defaults(func=cmd_import)

    p = common(sub.add_parser("train", help="train on one EPO1 file or a manifest of files"))
    p.add_argument("data")
    p.add_argument("--out", required=True)
    p.add_argument("--jobs", type=int, default=1)
    p.add_argument("--no-preprocess", action="store_true")
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("eval", help="evaluate a checkpoint on an EPO1 file")
    p.add_argument("checkpoint")
    p.add_argument("data")
    p.add_argument("--out")
    p.add_argument("--no-preprocess", action="store_true")
    p.set_defaults(func=cmd_eval)

    p = common(sub.add_parser("analyze", help="cohort centre analysis from a checkpoint manifest"), seed=False)
    p.add_argument("manifest")
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_analyze)
    return parser


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.DEBUG if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        return args.func(args)
    except FuzzyP300Error as exc:
        print(f"error[{exc.code}]: {exc}", file=sys.stderr)
    except FileNotFoundError as exc:
        print(f"error[io]: {exc}", file=sys.stderr)
    except OSError as exc:
        print(f"error[io]: {exc}", file=sys.stderr)
    return 1


if __name__ == "__main__":
    sys.exit(main())
