"""Per-sample chain from a raw cloud to landmarks and feature vectors."""

from __future__ import annotations

import logging
import time
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field

import numpy as np

from .config import Config
from .descriptors import (DescriptorSet, FeatureVector, SubdivisionSpec, build_keypoint_grid,
                          extract_features, nasal_curves, spherical_patches)
from .gabor import gabor_normal_stack
from .geometry import (DepthGrid, PointCloud, crop_nose, estimate_tip, iterative_pca_align,
                       median_filter, resample_to_grid)
from .io import load_point_cloud
from .landmarks import LandmarkSet, detect_landmarks, detect_root_initial

log = logging.getLogger(__name__)

KINDS = ("patches", "curves")


@dataclass(frozen=True)
class Sample:
    sample_id: str
    path: str | None = None
    format: str | None = None
    cloud: PointCloud | None = None
    subject: str = ""
    expression: str = ""
    session: str = ""


@dataclass(frozen=True)
class StageError:
    sample_id: str
    stage: str
    reason: str


@dataclass
class PipelineResult:
    sample_id: str
    landmarks: LandmarkSet | None = None
    features: dict = field(default_factory=dict)      # kind -> FeatureVector
    timings: dict = field(default_factory=dict)       # stage -> seconds
    diagnostics: dict = field(default_factory=dict)
    error: StageError | None = None
    nose: DepthGrid | None = None

    @property
    def ok(self) -> bool:
        return self.error is None


class _Stage:
    def __init__(self, result: PipelineResult, name: str):
        self.result, self.name = result, name

    def __enter__(self):
        self.t0 = time.perf_counter()
        return self

    def __exit__(self, exc_type, exc, tb):
        self.result.timings[self.name] = time.perf_counter() - self.t0
        if exc is not None and isinstance(exc, Exception):
            self.result.error = StageError(self.result.sample_id, self.name,
                                           f"{type(exc).__name__}: {exc}")
            log.warning("%s failed at %s: %s", self.result.sample_id, self.name, exc)
            raise _Abort from exc
        return False


class _Abort(Exception):
    pass


def descriptor_set(kind: str, landmarks: LandmarkSet, nose: DepthGrid, cfg: Config) -> DescriptorSet:
    if kind not in KINDS:
        raise ValueError(f"unknown descriptor kind {kind!r}; expected one of {KINDS}")
    spec = SubdivisionSpec(counts=tuple(cfg.descriptor.subdivisions))
    kp = build_keypoint_grid(landmarks, nose, spec)
    if kind == "patches":
        return spherical_patches(kp, nose, cfg.descriptor.patch_radius)
    return nasal_curves(kp, nose)


def preprocess(cloud: PointCloud, cfg: Config) -> tuple[DepthGrid, dict]:
    g = cfg.geometry
    grid = resample_to_grid(cloud, g.resolution)
    for _ in range(g.median_passes):
        grid = median_filter(grid, (g.median_mm, g.median_mm))
    info = {}
    if g.align:
        al = iterative_pca_align(grid, g.align_max_iter, g.align_tol_deg)
        grid = al.grid
        info.update(align_angle_deg=al.pose.angle_deg, align_converged=al.converged,
                    align_iterations=al.iterations)
    return grid, info


def run_pipeline(sample: Sample, cfg: Config = Config(), kinds=("patches",),
                 keep_surface: bool = False) -> PipelineResult:
    """Run every stage; a failure is recorded on the result instead of raised."""
    res = PipelineResult(sample.sample_id)
    try:
        with _Stage(res, "load"):
            cloud = sample.cloud if sample.cloud is not None else load_point_cloud(sample.path, sample.format)
        with _Stage(res, "preprocess"):
            grid, info = preprocess(cloud, cfg)
            res.diagnostics.update(info)
        with _Stage(res, "crop"):
            tip0 = estimate_tip(grid, cfg.geometry.tip_percentile)
            lc = cfg.landmark
            root0 = detect_root_initial(grid, tip0, lc.gamma_max, lc.beta, lc.num_planes)
            nose = crop_nose(grid, tip0, root0[1], cfg.geometry.crop())
        with _Stage(res, "landmarks"):
            lm = detect_landmarks(nose, tip0, root0, lc)
            res.landmarks = lm.landmarks
            res.diagnostics.update(lm.diagnostics)
        with _Stage(res, "gabor"):
            gc = cfg.gabor
            stack = gabor_normal_stack(nose, gc.s_m, gc.o_m, gc.omega_low, gc.omega_high,
                                       gc.confidence_factor)
        with _Stage(res, "descriptors"):
            for kind in kinds:
                dset = descriptor_set(kind, res.landmarks, nose, cfg)
                res.features[kind] = extract_features(stack, dset, cfg.descriptor.bins(kind))
        if keep_surface:
            res.nose = nose
    except _Abort:
        pass
    return res


def _run_one(args):
    sample, cfg, kinds = args
    return run_pipeline(sample, cfg, kinds)


def run_batch(samples, cfg: Config = Config(), kinds=("patches",), jobs: int = 1) -> list[PipelineResult]:
    """Failure-isolated batch run; results come back ordered by sample id."""
    samples = sorted(samples, key=lambda s: s.sample_id)
    work = [(s, cfg, tuple(kinds)) for s in samples]
    if jobs > 1 and len(work) > 1:
        with ProcessPoolExecutor(max_workers=jobs) as pool:
            results = list(pool.map(_run_one, work, chunksize=max(1, len(work) // (4 * jobs))))
    else:
        results = [_run_one(w) for w in work]
    return results


def feature_matrix(results, kind: str) -> tuple[np.ndarray, list[str]]:
    """Stack the feature vectors of successful results, in input order."""
    rows, ids = [], []
    for r in results:
        if r.ok and kind in r.features:
            rows.append(r.features[kind].values)
            ids.append(r.sample_id)
    if not rows:
        return np.empty((0, 0)), ids
    return np.stack(rows), ids


def layout_of(f: FeatureVector) -> tuple[int, int, int]:
    return f.s_n, f.K, f.h_l
