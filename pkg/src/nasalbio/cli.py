"""Command-line entry point: ``nasalbio <subcommand> [options]``.

Exit codes: 0 success, 1 total failure or bad input, 2 partial failure.
"""

from __future__ import annotations

import argparse
import logging
import math
import sys
from dataclasses import asdict, replace
from pathlib import Path

import numpy as np

from . import io, plotting
from .config import ConfigError, load_config
from .descriptors import FeatureVector
from .experiment import (PROTOCOLS, ExperimentSpec, ProtocolError, consistency_table,
                         run_experiment, split_gallery, write_precision_report)
from .geometry import GeometryError
from .pipeline import KINDS, PipelineResult, Sample, StageError, run_batch
from .selection import FitnessContext, nsga2_select
from .synthetic import Expression, SyntheticNoseSpec, generate_synthetic, random_expression

log = logging.getLogger("nasalbio")

EXPRESSIONS = ("anger", "disgust", "fear", "happiness", "sadness", "surprise")


def _exit_code(n_total: int, n_failed: int) -> int:
    if n_total and n_failed >= n_total:
        return 1
    return 2 if n_failed else 0


def _samples(rows) -> list[Sample]:
    return [Sample(r["sample_id"], r["path"], r["format"] or None, None, r["subject"],
                   r["expression"], r["session"]) for r in rows]


def _out(args) -> Path:
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    return out


def _with_seed(cfg, seed):
    return cfg if seed is None else replace(cfg, ga=replace(cfg.ga, rng_seed=seed))


# ---------------------------------------------------------------- subcommands

def cmd_synth(args, cfg) -> int:
    out = _out(args)
    fmt = args.format
    ext = {"ply": ".ply", "xyz": ".xyz", "scanner_grid": ".grid"}[fmt]
    rows, truth = [], []
    for s in range(args.subjects):
        subject_seed = args.seed * 100_000 + s
        rng = np.random.default_rng([args.seed, s, 5])
        for e in range(args.captures):
            expr_name = "neutral" if e == 0 else EXPRESSIONS[(e - 1) % len(EXPRESSIONS)]
            expr = Expression() if e == 0 else random_expression(rng, args.expression_magnitude)
            roll = math.radians(rng.uniform(-args.max_roll, args.max_roll)) if args.max_roll else 0.0
            spec = SyntheticNoseSpec(subject_seed=subject_seed, expression=expr,
                                     noise_sigma=args.noise, roll=roll, sample_seed=e)
            cloud, lms = generate_synthetic(spec)
            sid = f"s{s:03d}_c{e:02d}"
            path = out / f"{sid}{ext}"
            if fmt == "ply":
                io.write_ply(path, cloud)
            elif fmt == "xyz":
                io.write_xyz(path, cloud)
            else:
                io.write_scanner_grid(path, cloud.points, cloud.valid, 1, len(cloud))
            rows.append({"sample_id": sid, "path": path.name, "format": fmt, "subject": f"s{s:03d}",
                         "expression": expr_name, "session": f"{e:02d}"})
            truth.append((sid, lms, "truth"))
    io.write_manifest(out / "manifest.csv", rows)
    io.write_landmarks_csv(out / "truth.csv", truth)
    print(f"wrote {len(rows)} captures of {args.subjects} subjects to {out}")
    return 0


def _run(args, cfg, kinds):
    rows = io.read_manifest(args.manifest)
    results = run_batch(_samples(rows), cfg, kinds, args.jobs)
    return rows, results


def _write_common(out, results):
    io.write_landmarks_csv(out / "landmarks.csv",
                           [(r.sample_id, r.landmarks, "ok" if r.ok else f"failed:{r.error.stage}")
                            for r in results])
    io.write_table(out / "failures.csv", ["sample_id", "stage", "reason"],
                   [(r.error.sample_id, r.error.stage, r.error.reason) for r in results if not r.ok])
    io.write_table(out / "timings.csv", ["sample_id", "stage", "seconds"],
                   [(r.sample_id, k, v) for r in results for k, v in r.timings.items()])


def cmd_landmark(args, cfg) -> int:
    out = _out(args)
    rows, results = _run(args, cfg, ())
    _write_common(out, results)
    failed = sum(not r.ok for r in results)
    print(f"landmarked {len(results) - failed}/{len(results)} samples")
    return _exit_code(len(results), failed)


def cmd_extract(args, cfg) -> int:
    out = _out(args)
    rows, results = _run(args, cfg, (args.descriptor,))
    _write_common(out, results)
    ok = [r for r in results if r.ok]
    if ok:
        io.write_features(out / f"features_{args.descriptor}", [r.sample_id for r in ok],
                          [r.features[args.descriptor] for r in ok])
    print(f"extracted {len(ok)}/{len(results)} feature vectors")
    return _exit_code(len(results), len(results) - len(ok))


def _results_from_features(stem, rows) -> list[PipelineResult]:
    ids, X, meta = io.read_features(stem)
    known = {r["sample_id"] for r in rows}
    missing = sorted(set(ids) - known)
    if missing:
        raise ProtocolError(f"feature file has samples absent from the manifest: {missing[:5]}")
    kind = meta["kind"]
    out = []
    for sid, x, flags in zip(ids, X, meta["flags"]):
        f = FeatureVector(x, meta["s_n"], meta["K"], meta["h_l"], kind, np.asarray(flags, dtype=bool))
        out.append(PipelineResult(sid, features={_kind_key(kind): f}))
    got = set(ids)
    for r in rows:
        if r["sample_id"] not in got:
            out.append(PipelineResult(r["sample_id"], error=StageError(r["sample_id"], "extract",
                                                                        "missing from feature file")))
    return sorted(out, key=lambda r: r.sample_id)


def _kind_key(kind: str) -> str:
    return "patches" if kind.startswith("spherical") or kind == "patches" else "curves"


def cmd_select(args, cfg) -> int:
    out = _out(args)
    rows = io.read_manifest(args.manifest)
    if args.features:
        results = _results_from_features(args.features, rows)
    else:
        results = run_batch(_samples(rows), cfg, (args.descriptor,), args.jobs)
    ok = {r.sample_id: r for r in results if r.ok}
    spec = ExperimentSpec(descriptor=args.descriptor, gallery_expression=args.gallery_expression)
    part = split_gallery([r for r in rows if r["sample_id"] in ok], spec)
    subj = {r["sample_id"]: r["subject"] for r in rows}

    def stack(ids):
        return (np.stack([ok[s].features[args.descriptor].values for s in ids]),
                np.array([subj[s] for s in ids]))

    if not part.gallery or not part.probes:
        raise ProtocolError("selection needs both gallery and probe captures")
    Xg, gl = stack(part.gallery)
    Xp, pl = stack(part.probes)
    f0 = ok[part.gallery[0]].features[args.descriptor]
    ctx = FitnessContext(Xg, Xp, gl, pl, (f0.s_n, f0.K, f0.h_l), cfg.kfa)
    res = nsga2_select(cfg.ga, ctx)
    io.write_mask_json(out / "mask.json", res.Bn, args.descriptor, asdict(cfg.ga), cfg.ga.rng_seed, res.r1)
    io.write_history(out / "history.csv", res.history)
    plotting.plot_history(res.history, out / "history.png")
    print(f"selected {int(res.Bn.sum())}/{res.Bn.size} descriptors, R1 {res.r1:.4f} "
          f"after {res.generations} generations ({res.stop_reason})")
    return _exit_code(len(rows), len(rows) - len(ok))


def _experiment(args, cfg, protocol: str, **extra) -> int:
    out = _out(args)
    rows = io.read_manifest(args.manifest)
    spec = ExperimentSpec(protocol=protocol, descriptor=args.descriptor, mask=args.mask,
                          gallery_expression=args.gallery_expression,
                          seed=args.seed or 0, **extra)
    results = _results_from_features(args.features, rows) if args.features else None
    rep = run_experiment(spec, rows, out, cfg, args.jobs, results)
    for k, v in sorted(rep.summary.items()):
        print(f"{k}: {v}")
    return rep.exit_code


def cmd_match(args, cfg) -> int:
    return _experiment(args, cfg, args.protocol, probe_equals_gallery=args.probe_equals_gallery)


def cmd_experiment(args, cfg) -> int:
    sizes = tuple(int(s) for s in args.gallery_sizes.split(","))
    return _experiment(args, cfg, args.protocol, gallery_sizes=sizes, draws=args.draws,
                       train_mask=args.train_mask)


def cmd_eval_landmarks(args, cfg) -> int:
    out = _out(args)
    rows = io.read_manifest(args.manifest)
    if args.landmarks:
        detected = io.read_landmarks_csv(args.landmarks)
        failed = sum(v is None for v in detected.values())
    else:
        results = run_batch(_samples(rows), cfg, (), args.jobs)
        _write_common(out, results)
        detected = {r.sample_id: r.landmarks for r in results}
        failed = sum(not r.ok for r in results)
    subj = {r["sample_id"]: r["subject"] for r in rows}
    per_subject = {}
    for sid, l in sorted(detected.items()):
        if l is not None and sid in subj:
            per_subject.setdefault(subj[sid], []).append(l)
    try:
        header, row, _, excluded = consistency_table(list(per_subject.values()), args.dataset)
        io.write_table(out / "landmark_consistency.csv", header, [row])
        print("consistency (mm):", ", ".join(f"{h} {v}" for h, v in zip(header[1:], row[1:])))
    except ValueError as exc:
        print(f"consistency skipped: {exc}")
    if args.truth:
        truth = io.read_landmarks_csv(args.truth)
        files = write_precision_report(detected, truth, out)
        print("precision report:", files[0])
    return _exit_code(len(rows), failed)


# ---------------------------------------------------------------- parser

def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", help="key=value configuration file")
    common.add_argument("--manifest", help="CSV: sample_id,path,format,subject,expression,session")
    common.add_argument("--out", default="out", help="output directory")
    common.add_argument("--seed", type=int, default=None)
    common.add_argument("--jobs", type=int, default=1, help="worker processes")
    common.add_argument("--descriptor", choices=KINDS, default="patches")
    common.add_argument("--mask", help="descriptor mask JSON written by 'select'")
    common.add_argument("-v", "--verbose", action="store_true")

    p = argparse.ArgumentParser(prog="nasalbio", description="3D nasal-region recognition toolkit")
    sub = p.add_subparsers(dest="command", required=True)

    s = sub.add_parser("synth", parents=[common], help="generate a synthetic dataset")
    s.add_argument("--subjects", type=int, default=30)
    s.add_argument("--captures", type=int, default=7, help="captures per subject (first is neutral)")
    s.add_argument("--noise", type=float, default=0.05, help="depth noise sigma (mm)")
    s.add_argument("--expression-magnitude", type=float, default=1.0)
    s.add_argument("--max-roll", type=float, default=0.0, help="uniform roll range (degrees)")
    s.add_argument("--format", choices=io.FORMATS, default="ply")
    s.set_defaults(func=cmd_synth)

    s = sub.add_parser("landmark", parents=[common], help="detect landmarks")
    s.set_defaults(func=cmd_landmark)

    s = sub.add_parser("extract", parents=[common], help="compute feature vectors")
    s.set_defaults(func=cmd_extract)

    for name, func, helptext in (("select", cmd_select, "train a descriptor mask"),
                                 ("match", cmd_match, "identification or verification"),
                                 ("experiment", cmd_experiment, "run a full protocol")):
        s = sub.add_parser(name, parents=[common], help=helptext)
        s.add_argument("--features", help="feature file stem written by 'extract'")
        s.add_argument("--gallery-expression", default="neutral")
        s.set_defaults(func=func)
        if name == "match":
            s.add_argument("--protocol", choices=("identification", "verification"),
                           default="identification")
            s.add_argument("--probe-equals-gallery", action="store_true")
        if name == "experiment":
            s.add_argument("--protocol", choices=PROTOCOLS, default="expression_vs_expression")
            s.add_argument("--gallery-sizes", default="1,2,3")
            s.add_argument("--draws", type=int, default=2)
            s.add_argument("--train-mask", action="store_true",
                           help="learn a mask on half of the subjects, test on the rest")

    s = sub.add_parser("eval-landmarks", parents=[common], help="consistency and precision reports")
    s.add_argument("--truth", help="ground-truth landmark CSV")
    s.add_argument("--landmarks", help="reuse a landmark CSV instead of detecting")
    s.add_argument("--dataset", default="dataset", help="row label of the consistency table")
    s.set_defaults(func=cmd_eval_landmarks)
    return p


NEEDS_MANIFEST = {"landmark", "extract", "select", "match", "experiment", "eval-landmarks"}


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    if args.command in NEEDS_MANIFEST and not args.manifest:
        parser.error(f"{args.command} needs --manifest")
    if args.command == "synth" and args.seed is None:
        args.seed = 0
    try:
        cfg = _with_seed(load_config(args.config), args.seed)
        return args.func(args, cfg)
    except (ConfigError, ProtocolError, GeometryError, FileNotFoundError, ValueError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
