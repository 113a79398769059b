"""Recognition protocols over a manifest of captures, with CSV and figure reports."""

from __future__ import annotations

import logging
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np

from . import io, plotting
from .config import Config, dump_config
from .landmarks import LANDMARK_NAMES, LandmarkSet, consistency_metric, precision_curve
from .matching import (ScoreMatrix, kfa_fit, kfa_project, mahalanobis_cosine,
                       rank_metrics, verification_metrics)
from .pipeline import KINDS, PipelineResult, Sample, run_batch
from .selection import FitnessContext, KFAParams, expand_mask, nsga2_select

log = logging.getLogger(__name__)

PROTOCOLS = ("identification", "verification", "expression_vs_expression", "variable_gallery_size")
NEUTRAL = "neutral"


class ProtocolError(ValueError):
    """The manifest cannot satisfy the requested protocol."""


@dataclass(frozen=True)
class ExperimentSpec:
    protocol: str = "identification"
    descriptor: str = "patches"
    gallery_expression: str = NEUTRAL     # "" accepts any expression
    gallery_per_subject: int = 1
    probe_equals_gallery: bool = False
    gallery_sizes: tuple[int, ...] = (1, 2, 3)
    draws: int = 2
    mask: str | None = None
    train_mask: bool = False
    selection_fraction: float = 0.5
    far_target: float = 1e-3
    seed: int = 0

    def __post_init__(self):
        if self.protocol not in PROTOCOLS:
            raise ProtocolError(f"unknown protocol {self.protocol!r}; expected one of {PROTOCOLS}")
        if self.descriptor not in KINDS:
            raise ProtocolError(f"unknown descriptor {self.descriptor!r}; expected one of {KINDS}")
        if self.gallery_per_subject < 1:
            raise ProtocolError("gallery_per_subject must be >= 1")
        if self.mask and self.train_mask:
            raise ProtocolError("give either a mask file or train_mask, not both")
        if not 0 < self.selection_fraction < 1:
            raise ProtocolError("selection_fraction must lie in (0, 1)")


@dataclass(frozen=True)
class Partition:
    gallery: tuple[str, ...]
    probes: tuple[str, ...]

    def check_disjoint(self, allow_same: bool = False) -> None:
        if allow_same:
            return
        both = set(self.gallery) & set(self.probes)
        if both:
            raise ProtocolError(f"captures in both gallery and probe sets: {sorted(both)[:5]}")


def _capture_order(row) -> tuple:
    return (row["session"], row["sample_id"])


def split_gallery(rows, spec: ExperimentSpec) -> Partition:
    """First ``gallery_per_subject`` captures per subject (by session, then id)
    matching the gallery expression form the gallery; every other capture is a probe."""
    by_subject: dict[str, list] = {}
    for r in sorted(rows, key=_capture_order):
        by_subject.setdefault(r["subject"], []).append(r)
    gallery = []
    for subj, caps in sorted(by_subject.items()):
        eligible = [c for c in caps if not spec.gallery_expression
                    or c["expression"] == spec.gallery_expression]
        gallery += [c["sample_id"] for c in eligible[:spec.gallery_per_subject]]
    if spec.probe_equals_gallery:
        return Partition(tuple(gallery), tuple(gallery))
    g = set(gallery)
    probes = [r["sample_id"] for r in sorted(rows, key=lambda r: r["sample_id"]) if r["sample_id"] not in g]
    return Partition(tuple(sorted(g)), tuple(probes))


def validate(rows, spec: ExperimentSpec) -> None:
    """Protocol checks that need only the manifest, run before any computation."""
    if not rows:
        raise ProtocolError("manifest is empty")
    subjects = {r["subject"] for r in rows}
    if len(subjects) < 2:
        raise ProtocolError("at least two subjects are needed")
    if spec.protocol == "variable_gallery_size":
        counts = {}
        for r in rows:
            counts[r["subject"]] = counts.get(r["subject"], 0) + 1
        need = max(spec.gallery_sizes) + 1
        short = sorted(s for s, c in counts.items() if c < need)
        if short:
            raise ProtocolError(f"gallery size {max(spec.gallery_sizes)} needs {need} captures per "
                                f"subject; subjects {short[:5]} have fewer")
        if spec.draws < 1:
            raise ProtocolError("draws must be >= 1")
        return
    part = split_gallery(rows, spec)
    if not part.gallery:
        raise ProtocolError(f"no capture has expression {spec.gallery_expression!r} for the gallery")
    if len({r["subject"] for r in rows if r["sample_id"] in set(part.gallery)}) < 2:
        raise ProtocolError("gallery covers fewer than two subjects")
    if not part.probes:
        raise ProtocolError("no probe captures remain after building the gallery")
    part.check_disjoint(spec.probe_equals_gallery)
    if spec.protocol == "expression_vs_expression" and spec.gallery_expression and \
            not any(r["expression"] != spec.gallery_expression for r in rows):
        raise ProtocolError("expression_vs_expression needs probes with another expression")


def match(Xg, gl, Xp, pl, params: KFAParams = KFAParams()) -> ScoreMatrix:
    model = kfa_fit(Xg, gl, params.k1, params.k2, params.d_p, params.ridge, params.shrinkage)
    return mahalanobis_cosine(model.projected, kfa_project(model, Xp), model.Sigma, gl, pl)


@dataclass
class ExperimentReport:
    summary: dict = field(default_factory=dict)
    files: list = field(default_factory=list)
    failures: list = field(default_factory=list)
    n_samples: int = 0

    @property
    def exit_code(self) -> int:
        if self.n_samples and len(self.failures) >= self.n_samples:
            return 1
        return 2 if self.failures else 0


class _Features:
    """Feature rows of successfully processed captures, addressable by sample id."""

    def __init__(self, results: list[PipelineResult], rows, kind: str, keep=None):
        meta = {r["sample_id"]: r for r in rows}
        ok = [r for r in results if r.ok and kind in r.features]
        self.ids = [r.sample_id for r in ok]
        self.index = {s: i for i, s in enumerate(self.ids)}
        X = np.stack([r.features[kind].values for r in ok]) if ok else np.empty((0, 0))
        self.X = X if keep is None or not len(X) else X[:, keep]
        self.subject = {s: meta[s]["subject"] for s in self.ids}
        self.expression = {s: meta[s]["expression"] for s in self.ids}
        self.layout = (ok[0].features[kind].s_n, ok[0].features[kind].K,
                       ok[0].features[kind].h_l) if ok else None

    def take(self, ids):
        ids = [s for s in ids if s in self.index]
        if not ids:
            return np.empty((0, self.X.shape[1])), np.array([], dtype=object), ids
        rows = [self.index[s] for s in ids]
        return self.X[rows], np.array([self.subject[s] for s in ids]), ids


def _load_samples(rows) -> list[Sample]:
    return [Sample(r["sample_id"], r["path"], r["format"] or None, None, r["subject"],
                   r["expression"], r["session"]) for r in rows]


def _failure_rows(results):
    return [(r.error.sample_id, r.error.stage, r.error.reason) for r in results if not r.ok]


def run_experiment(spec: ExperimentSpec, rows, out_dir, cfg: Config = Config(), jobs: int = 1,
                   results: list[PipelineResult] | None = None) -> ExperimentReport:
    """Validate, process every capture, run the protocol and write the reports.

    ``results`` may carry already computed pipeline outputs for the rows.
    """
    validate(rows, spec)
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    report = ExperimentReport(n_samples=len(rows))

    if results is None:
        results = run_batch(_load_samples(rows), cfg, (spec.descriptor,), jobs)
    report.failures = _failure_rows(results)
    _write(report, out / "failures.csv", io.write_table, ["sample_id", "stage", "reason"], report.failures)
    _write(report, out / "config_echo.txt", lambda p, t: Path(p).write_text(t), dump_config(cfg))
    if len(report.failures) == len(rows):
        report.summary = {"status": "all samples failed"}
        return report

    feats = _Features(results, rows, spec.descriptor)
    s_n, K, h_l = feats.layout
    keep = None
    ok_rows = [r for r in rows if r["sample_id"] in feats.index]
    test_rows = ok_rows
    if spec.mask:
        Bn, rec = io.read_mask_json(spec.mask)
        if rec.get("descriptor") not in (None, spec.descriptor) or Bn.size != K:
            raise ProtocolError(f"mask {spec.mask} is for {rec.get('descriptor')} with K={Bn.size}, "
                                f"features are {spec.descriptor} with K={K}")
        keep = expand_mask(Bn, s_n, h_l, K)
    elif spec.train_mask:
        keep, test_rows = _train_mask(spec, cfg, feats, ok_rows, out, report)
    if keep is not None:
        feats.X = feats.X[:, keep]
        report.summary["selected_descriptors"] = int(keep.sum() // (s_n * 3 * h_l))

    proto = {"identification": _identification, "verification": _verification,
             "expression_vs_expression": _expression_vs_expression,
             "variable_gallery_size": _variable_gallery}[spec.protocol]
    proto(spec, cfg, feats, test_rows, out, report)
    _landmark_reports(results, rows, out, report)
    report.summary.update(protocol=spec.protocol, descriptor=spec.descriptor,
                          samples=len(rows), failures=len(report.failures))
    _write(report, out / "summary.csv", io.write_table, ["key", "value"], sorted(report.summary.items()))
    return report


def _write(report, path, fn, *args):
    fn(path, *args)
    report.files.append(Path(path))


def _figure(report, path, plot, *args):
    plot(*args, path)
    report.files.append(Path(path))


def _echo_partition(report, out, part: Partition, rows, name="partition.csv"):
    meta = {r["sample_id"]: r for r in rows}
    recs = [(s, "gallery", meta[s]["subject"], meta[s]["expression"], meta[s]["session"]) for s in part.gallery]
    recs += [(s, "probe", meta[s]["subject"], meta[s]["expression"], meta[s]["session"]) for s in part.probes]
    _write(report, out / name, io.write_table, ["sample_id", "role", "subject", "expression", "session"], recs)


def _scores(spec, cfg, feats, part: Partition):
    Xg, gl, gids = feats.take(part.gallery)
    Xp, pl, pids = feats.take(part.probes)
    if len(set(gl)) < 2 or not len(Xp):
        raise ProtocolError("too few successfully processed captures to form gallery and probes")
    return match(Xg, gl, Xp, pl, cfg.kfa), gids, pids


def _identification(spec, cfg, feats, rows, out, report):
    part = split_gallery(rows, spec)
    part.check_disjoint(spec.probe_equals_gallery)
    _echo_partition(report, out, part, rows)
    sc, gids, pids = _scores(spec, cfg, feats, part)
    rk = rank_metrics(sc)
    _write(report, out / "scores.csv", io.write_score_matrix, sc.D, gids, pids)
    _write(report, out / "cmc.csv", io.write_cmc, rk.cmc)
    _figure(report, out / "cmc.png", plotting.plot_cmc, {spec.descriptor: rk.cmc})
    report.summary.update(r1=rk.r1, probes=rk.n_probes, probes_excluded=rk.n_excluded,
                          gallery=len(gids))
    return sc


def _verification(spec, cfg, feats, rows, out, report):
    sc = _identification(spec, cfg, feats, rows, out, report)
    vr = verification_metrics(sc, spec.far_target)
    _write(report, out / "roc.csv", io.write_roc, vr.far, vr.tar)
    _figure(report, out / "roc.png", plotting.plot_roc, {spec.descriptor: (vr.far, vr.tar)})
    report.summary.update(eer=vr.eer, tar_at_far=vr.tar_at_far, far_target=vr.far_target)


def _expression_vs_expression(spec, cfg, feats, rows, out, report):
    part = split_gallery(rows, spec)
    part.check_disjoint()
    _echo_partition(report, out, part, rows)
    sc, gids, pids = _scores(spec, cfg, feats, part)
    expr = np.array([feats.expression[s] for s in pids])
    gallery_expr = spec.gallery_expression or NEUTRAL
    groups = [(e, expr == e) for e in sorted(set(expr))]
    groups += [("all-" + gallery_expr, expr == gallery_expr), ("all-non-" + gallery_expr, expr != gallery_expr),
               ("all", np.ones(len(expr), dtype=bool))]
    table, curves = [], {}
    for name, sel in groups:
        if not sel.any():
            continue
        rk = rank_metrics(ScoreMatrix(sc.D[:, sel], sc.gallery_labels, sc.probe_labels[sel]))
        table.append((name, rk.n_probes, rk.r1))
        curves[name] = rk.cmc
        report.summary[f"r1[{name}]"] = rk.r1
    _write(report, out / "expression_r1.csv", io.write_table, ["probe_expression", "probes", "r1"], table)
    _figure(report, out / "cmc.png", plotting.plot_cmc,
           {k: v for k, v in curves.items() if k.startswith("all")})


def _variable_gallery(spec, cfg, feats, rows, out, report):
    rng = np.random.default_rng([spec.seed, 17])
    by_subject: dict[str, list[str]] = {}
    for r in sorted(rows, key=_capture_order):
        by_subject.setdefault(r["subject"], []).append(r["sample_id"])
    table, means, stds = [], [], []
    for size in spec.gallery_sizes:
        r1s = []
        for d in range(spec.draws):
            gallery, probes = [], []
            for subj in sorted(by_subject):
                caps = list(by_subject[subj])
                order = rng.permutation(len(caps))
                if len(caps) <= size:
                    continue
                gallery += [caps[i] for i in order[:size]]
                probes += [caps[i] for i in order[size:]]
            part = Partition(tuple(sorted(gallery)), tuple(sorted(probes)))
            part.check_disjoint()
            _echo_partition(report, out, part, rows, f"partition_size{size}_draw{d}.csv")
            sc, _, _ = _scores(spec, cfg, feats, part)
            r1 = rank_metrics(sc).r1
            r1s.append(r1)
            table.append((size, d, r1))
        means.append(float(np.mean(r1s)))
        stds.append(float(np.std(r1s)))
        report.summary[f"r1[size={size}]"] = means[-1]
    _write(report, out / "gallery_size_r1.csv", io.write_table, ["gallery_size", "draw", "r1"], table)
    _figure(report, out / "gallery_size.png", plotting.plot_gallery_size, spec.gallery_sizes, means, stds)


def _train_mask(spec, cfg, feats, rows, out, report):
    """Learn a mask on a subject subset and return it with the remaining rows.

    Selection and test subjects are disjoint, so the mask never sees test data.
    """
    subjects = sorted({r["subject"] for r in rows})
    rng = np.random.default_rng([spec.seed, 23])
    n_sel = max(2, int(round(spec.selection_fraction * len(subjects))))
    if len(subjects) - n_sel < 2:
        raise ProtocolError("too few subjects to hold out a selection set")
    chosen = set(rng.choice(subjects, n_sel, replace=False).tolist())
    sel_rows = [r for r in rows if r["subject"] in chosen]
    test_rows = [r for r in rows if r["subject"] not in chosen]
    assert not chosen & {r["subject"] for r in test_rows}
    part = split_gallery(sel_rows, ExperimentSpec(gallery_expression=spec.gallery_expression,
                                                   gallery_per_subject=spec.gallery_per_subject))
    Xg, gl, _ = feats.take(part.gallery)
    Xp, pl, _ = feats.take(part.probes)
    s_n, K, h_l = feats.layout
    ctx = FitnessContext(Xg, Xp, gl, pl, (s_n, K, h_l), cfg.kfa)
    ga = nsga2_select(cfg.ga, ctx)
    io.write_mask_json(out / "mask.json", ga.Bn, spec.descriptor, asdict(cfg.ga), cfg.ga.rng_seed, ga.r1)
    report.files.append(out / "mask.json")
    _write(report, out / "ga_history.csv", io.write_history, ga.history)
    _figure(report, out / "ga_history.png", plotting.plot_history, ga.history)
    _write(report, out / "selection_subjects.csv", io.write_table, ["subject", "role"],
           [(s, "selection" if s in chosen else "test") for s in subjects])
    report.summary.update(selection_r1=ga.r1, selection_generations=ga.generations)
    return expand_mask(ga.Bn, s_n, h_l, K), test_rows


# ---------------------------------------------------------------- landmark reports

CONSISTENCY_COLUMNS = ("L1", "L2", "L3", "L5", "L6", "L7")
PRECISION_COLUMNS = ("L3", "L6", "L2", "L7", "L4")
PRECISION_THRESHOLDS = (10.0, 12.0, 15.0, 20.0)


def consistency_table(per_subject, dataset: str = "dataset"):
    """One row in the layout dataset, L1, L2, L3, L5, L6, L7 ("mean ± std" in mm)."""
    stats, excluded = consistency_metric(per_subject)
    cells = [f"{stats[LANDMARK_NAMES.index(n), 0]:.2f} ± {stats[LANDMARK_NAMES.index(n), 1]:.2f}"
             for n in CONSISTENCY_COLUMNS]
    return ["dataset"] + list(CONSISTENCY_COLUMNS), [dataset] + cells, stats, excluded


def precision_table(detected, truth, thresholds=PRECISION_THRESHOLDS):
    """Rows per threshold, columns L3, L6, L2, L7, L4 (percent within the threshold)."""
    acc = precision_curve(detected, truth, thresholds)
    rows = []
    for j, t in enumerate(thresholds):
        rows.append([f"<{t:g}"] + [f"{100 * acc[LANDMARK_NAMES.index(n), j]:.2f}%" for n in PRECISION_COLUMNS])
    return ["threshold_mm"] + list(PRECISION_COLUMNS), rows, acc


def _landmark_reports(results, rows, out, report):
    meta = {r["sample_id"]: r for r in rows}
    if all(r.landmarks is None for r in results):
        return
    lm = [(r.sample_id, r.landmarks, "ok" if r.ok else f"failed:{r.error.stage}")
          for r in results]
    _write(report, out / "landmarks.csv", io.write_landmarks_csv, lm)
    per_subject: dict[str, list[LandmarkSet]] = {}
    for sid, l, _ in lm:
        if l is not None:
            per_subject.setdefault(meta[sid]["subject"], []).append(l)
    try:
        header, row, _, excluded = consistency_table(list(per_subject.values()))
    except ValueError:
        return
    _write(report, out / "landmark_consistency.csv", io.write_table, header, [row])
    report.summary["consistency_excluded_subjects"] = excluded


def write_precision_report(detected: dict, truth: dict, out, names=None,
                           thresholds=np.arange(0.5, 20.01, 0.5)) -> list[Path]:
    """Table 2 style CSV, the full precision curve CSV and its figure."""
    out = Path(out)
    ids = sorted(s for s in detected if detected[s] is not None and truth.get(s) is not None)
    if not ids:
        raise ValueError("no sample has both a detection and a ground truth")
    det = [detected[s] for s in ids]
    tru = [truth[s] for s in ids]
    header, rows, _ = precision_table(det, tru)
    files = [out / "landmark_precision.csv", out / "landmark_precision_curve.csv",
             out / "landmark_precision.png"]
    io.write_table(files[0], header, rows)
    acc = precision_curve(det, tru, thresholds)
    names = names or LANDMARK_NAMES
    sel = [LANDMARK_NAMES.index(n) for n in names]
    io.write_table(files[1], ["threshold_mm"] + list(names),
                   [[float(t)] + [float(acc[i, j]) for i in sel] for j, t in enumerate(thresholds)])
    plotting.plot_precision(thresholds, acc[sel], names, files[2])
    return files
