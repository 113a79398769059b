"""Keypoint grid, spherical patches, nasal curves and histogram features."""

from __future__ import annotations

import logging
from dataclasses import dataclass, field
from itertools import combinations

import numpy as np

from .gabor import GaborNormalStack
from .geometry import DepthGrid
from .landmarks import LANDMARK_NAMES, LandmarkSet

log = logging.getLogger(__name__)

DEFAULT_SEGMENTS = (("L2", "L1"), ("L1", "L7"), ("L3", "L4"), ("L4", "L6"), ("L1", "L4"), ("L4", "L5"))
CURVE_LANDMARKS = ("L1", "L2", "L3", "L5", "L6", "L7")
DEFAULT_CURVE_PAIRS = tuple(combinations(CURVE_LANDMARKS, 2))


@dataclass(frozen=True)
class SubdivisionSpec:
    """Number of equal parts each segment is cut into (1 adds no points)."""

    segments: tuple = DEFAULT_SEGMENTS
    counts: tuple = (3, 3, 3, 3, 3, 3)

    def __post_init__(self):
        if len(self.segments) != len(self.counts):
            raise ValueError("one subdivision count per segment is required")
        if any(int(c) < 1 for c in self.counts):
            raise ValueError("subdivision counts must be >= 1")


@dataclass(frozen=True)
class KeypointGrid:
    points: np.ndarray          # (n, 3)
    ids: tuple[str, ...]
    on_surface: np.ndarray      # (n,) False where the projection hit a hole

    def __len__(self) -> int:
        return len(self.ids)

    def point(self, name: str) -> np.ndarray:
        return self.points[self.ids.index(name)]

    def valid_points(self) -> np.ndarray:
        return self.points[self.on_surface]


def build_keypoint_grid(landmarks: LandmarkSet, surface: DepthGrid,
                        spec: SubdivisionSpec = SubdivisionSpec()) -> KeypointGrid:
    """Landmarks followed by the interior points of each subdivided segment,
    all dropped vertically onto the surface."""
    pts = [getattr(landmarks, n) for n in LANDMARK_NAMES]
    ids = list(LANDMARK_NAMES)
    for (a, b), count in zip(spec.segments, spec.counts):
        pa, pb = getattr(landmarks, a), getattr(landmarks, b)
        for k in range(1, int(count)):
            t = k / count
            pts.append((1 - t) * pa + t * pb)
            ids.append(f"{a}-{b}:{k}")
    pts = np.array(pts, dtype=float)
    z, ok = surface.sample(pts[:, 0], pts[:, 1])
    pts[ok, 2] = z[ok]
    for name in np.array(ids)[~ok]:
        log.warning("keypoint %s falls on an invalid pixel; its descriptor will be empty", name)
    return KeypointGrid(pts, tuple(ids), ok)


@dataclass(frozen=True)
class DescriptorSet:
    kind: str
    regions: tuple              # K arrays of flat pixel indices into the surface grid
    grid_shape: tuple[int, int]
    curves: tuple = ()          # per-descriptor (m, 3) curve samples, nasal curves only

    @property
    def K(self) -> int:
        return len(self.regions)

    @property
    def empty(self) -> np.ndarray:
        return np.array([len(r) == 0 for r in self.regions])


def spherical_patches(kp: KeypointGrid, surface: DepthGrid, radius_mm: float = 11.0) -> DescriptorSet:
    """Valid pixels whose 3D point lies inside a sphere around each keypoint."""
    if radius_mm <= 0:
        raise ValueError("patch radius must be positive")
    iy, ix = np.nonzero(surface.mask)
    flat = np.ravel_multi_index((iy, ix), surface.shape)
    xyz = np.column_stack([surface.x[ix], surface.y[iy], surface.z[iy, ix]])
    regions = []
    for p, ok in zip(kp.points, kp.on_surface):
        if not ok:
            regions.append(np.empty(0, dtype=np.intp))
            continue
        d2 = np.sum((xyz - p) ** 2, axis=1)
        regions.append(flat[d2 <= radius_mm * radius_mm])
    return DescriptorSet("spherical_patches", tuple(regions), surface.shape)


def curve_plane_normal(a1, a2) -> np.ndarray:
    """Unit normal of the vertical plane through ``a1`` and ``a2``."""
    d = np.asarray(a1, dtype=float) - np.asarray(a2, dtype=float)
    n = np.cross([0.0, 0.0, 1.0], d)
    norm = np.linalg.norm(n)
    if norm < 1e-12:
        raise ValueError("curve end points coincide in x/y")
    return n / norm


def _curve_samples(surface: DepthGrid, a1, a2, step: float) -> np.ndarray:
    a1, a2 = np.asarray(a1, dtype=float), np.asarray(a2, dtype=float)
    length = np.hypot(*(a2[:2] - a1[:2]))
    t = np.linspace(0.0, 1.0, max(2, int(np.ceil(length / step)) + 1))
    xy = a1[:2] + np.outer(t, a2[:2] - a1[:2])
    z, ok = surface.sample(xy[:, 0], xy[:, 1])
    return np.column_stack([xy, z])[ok]


def nasal_curves(kp: KeypointGrid, surface: DepthGrid, pairs=DEFAULT_CURVE_PAIRS) -> DescriptorSet:
    """Surface profiles between keypoint pairs; each region is the set of
    pixels the profile passes over."""
    regions, curves = [], []
    step = surface.resolution / 2
    for a, b in pairs:
        p1, p2 = kp.point(a), kp.point(b)
        curve_plane_normal(p1, p2)
        samples = _curve_samples(surface, p1, p2, step)
        iy, ix = surface.nearest_index(samples[:, 0], samples[:, 1])
        flat = np.ravel_multi_index((iy, ix), surface.shape)
        _, first = np.unique(flat, return_index=True)
        flat = flat[np.sort(first)]
        regions.append(flat[surface.mask.ravel()[flat]])
        curves.append(samples)
    return DescriptorSet("nasal_curves", tuple(regions), surface.shape, tuple(curves))


@dataclass(frozen=True)
class FeatureVector:
    values: np.ndarray          # (s_n * 3 * K * h_l,)
    s_n: int
    K: int
    h_l: int
    kind: str = "spherical_patches"
    flags: np.ndarray = field(default=None)   # (s_n, K) True where the histogram is all-zero

    @property
    def strides(self) -> tuple[int, int, int, int]:
        return (3 * self.K * self.h_l, self.K * self.h_l, self.h_l, 1)

    def block(self, scale: int, component: int, descriptor: int) -> np.ndarray:
        start = scale * self.strides[0] + component * self.strides[1] + descriptor * self.h_l
        return self.values[start:start + self.h_l]

    def as_tensor(self) -> np.ndarray:
        return self.values.reshape(self.s_n, 3, self.K, self.h_l)


def histogram_edges(h_l: int) -> np.ndarray:
    return np.linspace(-1.0, 1.0, h_l + 1)


def _histogram(values: np.ndarray, edges: np.ndarray) -> np.ndarray:
    h_l = len(edges) - 1
    idx = np.clip(np.searchsorted(edges, values, side="right") - 1, 0, h_l - 1)
    return np.bincount(idx, minlength=h_l).astype(float)


def extract_features(stack: GaborNormalStack, dset: DescriptorSet, h_l: int) -> FeatureVector:
    """Normalised histograms of the normal components over every region.

    Layout is (scale, component, descriptor, bin), row-major. Pixels flagged
    as low-confidence at a scale are left out; a region with no usable pixel
    yields an all-zero histogram and is flagged.
    """
    if h_l < 2:
        raise ValueError("h_l must be >= 2")
    if dset.grid_shape != stack.valid.shape:
        raise ValueError("descriptor set and normal stack come from different grids")
    s_n, K = stack.n_scales, dset.K
    edges = histogram_edges(h_l)
    out = np.zeros((s_n, 3, K, h_l))
    flags = np.zeros((s_n, K), dtype=bool)
    normals = stack.normals.reshape(s_n, 3, -1)
    confident = stack.confident.reshape(s_n, -1)
    for s in range(s_n):
        for i, region in enumerate(dset.regions):
            pix = region[confident[s, region]] if len(region) else region
            if len(pix) == 0:
                flags[s, i] = True
                continue
            for c in range(3):
                h = _histogram(normals[s, c, pix], edges)
                out[s, c, i] = h / h.sum()
    return FeatureVector(out.ravel(), s_n, K, h_l, dset.kind, flags)
