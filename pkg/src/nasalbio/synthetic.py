"""Parametric synthetic faces with analytically known nasal landmarks.

The surface is the upper envelope of two smooth height functions: a nose
body (a rounded ridge whose cross-section widens towards the tip) and a face
sheet (cheeks, forehead, upper lip and two shallow eye-corner pits). The
crease where the two meet is where the grooves, the root, the subnasale and
the eye corners sit, so every landmark can be solved for with a 1-D root
finder. The nose tip is at the origin.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from scipy.optimize import brentq, minimize_scalar

from .geometry import PointCloud, rotate_xy
from .landmarks import LandmarkSet


@dataclass(frozen=True)
class NoseShape:
    ridge_height: float = 20.0      # tip protrusion above the face sheet
    ridge_width: float = 3.0        # cross-section rounding along the bridge
    alar_spread: float = 8.0        # cross-section rounding at the tip
    root_depth: float = 0.48        # bridge slope from tip towards the root
    tip_curvature: float = 3.0      # rounding of the tip profile
    columella_slope: float = 2.6
    side_slope: float = 2.0
    cheek_curvature: float = 0.004
    forehead_y: float = 33.0
    forehead_rise: float = 8.0
    lip_height: float = 5.0
    lip_y: float = -13.0
    pit_depth: float = 7.0
    pit_radius: float = 8.0
    canthus_drop: float = 8.0
    bumps: tuple = ()               # (x, y, amplitude, sigma) identity details on the body


@dataclass(frozen=True)
class Expression:
    alar_flare: float = 0.0
    bridge_wrinkle: float = 0.0
    subnasale_lift: float = 0.0


@dataclass(frozen=True)
class SyntheticNoseSpec:
    subject_seed: int = 0
    shape: NoseShape | None = None
    expression: Expression = Expression()
    noise_sigma: float = 0.0
    spacing: float = 0.7
    roll: float = 0.0
    sample_seed: int = 0
    extent: tuple[float, float, float, float] = (-45.0, 45.0, -45.0, 65.0)


def random_shape(seed: int) -> NoseShape:
    """Subject-specific shape drawn from fixed ranges."""
    rng = np.random.default_rng([seed, 101])
    u = rng.uniform
    bumps = tuple((u(-8, 8), u(8, 26), u(-0.8, 0.8), u(3.0, 6.0)) for _ in range(5))
    return NoseShape(
        ridge_height=u(18.0, 22.0), ridge_width=u(2.5, 3.5), alar_spread=u(7.0, 9.0),
        root_depth=u(0.42, 0.55), tip_curvature=u(2.5, 3.5), columella_slope=u(2.4, 2.9),
        side_slope=u(1.8, 2.3), cheek_curvature=u(0.003, 0.005), forehead_y=u(30.0, 36.0),
        forehead_rise=u(6.0, 10.0), lip_height=u(4.0, 6.0), lip_y=u(-15.0, -12.0),
        pit_depth=u(6.5, 8.0), pit_radius=u(7.0, 9.0), canthus_drop=u(7.0, 9.0), bumps=bumps)


def random_expression(rng: np.random.Generator, magnitude: float = 1.0) -> Expression:
    return Expression(alar_flare=magnitude * rng.uniform(-0.6, 0.6),
                      bridge_wrinkle=magnitude * rng.uniform(0.0, 0.3),
                      subnasale_lift=magnitude * rng.uniform(-0.8, 0.8))


def _validate(s: NoseShape):
    positive = ("ridge_height", "ridge_width", "alar_spread", "root_depth", "tip_curvature",
                "columella_slope", "side_slope", "pit_radius")
    for name in positive:
        if not getattr(s, name) > 0:
            raise ValueError(f"shape parameter {name} must be positive")
    if s.cheek_curvature < 0 or s.forehead_rise < 0:
        raise ValueError("cheek curvature and forehead rise must be non-negative")


class SyntheticFace:
    """Closed-form surface for one (shape, expression) pair."""

    def __init__(self, shape: NoseShape, expression: Expression = Expression()):
        _validate(shape)
        self.shape = shape
        self.expression = expression
        self._pits = None
        self._pits = self._pit_centres()

    def _rho(self, y):
        s = self.shape
        tip_rho = s.alar_spread + self.expression.alar_flare
        return s.ridge_width + (tip_rho - s.ridge_width) * np.exp(-(y / 12.0) ** 2)

    def _profile(self, y):
        s = self.shape
        t = s.tip_curvature
        k = np.where(y >= 0, s.root_depth, s.columella_slope)
        return -k * (np.sqrt(y * y + t * t) - t)

    def body(self, x, y):
        x, y = np.asarray(x, dtype=float), np.asarray(y, dtype=float)
        s = self.shape
        rho = self._rho(y)
        z = self._profile(y) - s.side_slope * (np.sqrt(x * x + rho * rho) - rho)
        for bx, by, amp, sig in s.bumps:
            z = z + amp * np.exp(-((x - bx) ** 2 + (y - by) ** 2) / (2 * sig * sig))
        w = self.expression.bridge_wrinkle
        if w:
            root = self._root_guess
            z = z + w * np.sin(2 * np.pi * y / 4.0) * np.exp(-((y - root) / 6.0) ** 2 - (x / 8.0) ** 2)
        return z

    def face(self, x, y, pits: bool = True):
        x, y = np.asarray(x, dtype=float), np.asarray(y, dtype=float)
        s = self.shape
        lip_h = s.lip_height + self.expression.subnasale_lift
        lip_y = s.lip_y + 0.5 * self.expression.subnasale_lift
        z = (-s.ridge_height - s.cheek_curvature * x * x
             + 0.5 * s.forehead_rise * (1.0 + np.tanh((y - s.forehead_y) / 8.0))
             + lip_h * np.exp(-((y - lip_y) / 6.0) ** 2 - (x / 12.0) ** 2))
        if pits and self._pits is not None:
            for px, py in self._pits:
                d = np.hypot(x - px, y - py)
                z = z - s.pit_depth * np.maximum(0.0, 1.0 - d / s.pit_radius)
        return z

    def surface(self, x, y):
        return np.maximum(self.body(x, y), self.face(x, y))

    @property
    def _root_guess(self) -> float:
        f = lambda y: float(self._profile(np.float64(y)) - self.face(0.0, y, pits=False))
        return brentq(f, 0.0, 80.0, xtol=1e-12)

    def _crease_x(self, y, pits=True, hi=45.0) -> float:
        f = lambda x: float(self.body(x, y) - self.face(x, y, pits))
        return brentq(f, 0.0, hi, xtol=1e-12)

    def _crease_point(self, y: float, side: int) -> np.ndarray:
        f = lambda x: float(self.body(x, y) - self.face(x, y))
        x = brentq(f, 0.0, 45.0, xtol=1e-12) if side > 0 else brentq(f, -45.0, 0.0, xtol=1e-12)
        return np.array([x, y, float(self.surface(x, y))])

    def _pit_centres(self):
        yc = self._root_guess - self.shape.canthus_drop
        xc = self._crease_x(yc, pits=False)
        return ((xc, yc), (-xc, yc))

    def landmarks(self) -> LandmarkSet:
        """Ground-truth landmarks of the un-rolled surface."""
        mid = lambda y: float(self.body(0.0, y) - self.face(0.0, y))
        y1 = brentq(mid, 0.5, 80.0, xtol=1e-12)
        y5 = brentq(mid, -40.0, -0.5, xtol=1e-12)
        tip = np.array([0.0, 0.0, float(self.surface(0.0, 0.0))])
        pts = {"L3": (self._crease_point(0.0, 1), self._crease_point(0.0, -1))}
        yc, r = self._pits[0][1], self.shape.pit_radius
        eyes = []
        for side in (1, -1):
            # eye corner: deepest point of the crease inside the pit
            opt = minimize_scalar(lambda y: self._crease_point(y, side)[2], bounds=(yc - r, yc + r),
                                  method="bounded", options={"xatol": 1e-9})
            eyes.append(self._crease_point(opt.x, side))
        pts["L2"] = tuple(eyes)
        return LandmarkSet(
            L1=[0.0, y1, float(self.surface(0.0, y1))], L2=pts["L2"][0], L3=pts["L3"][0],
            L4=tip, L5=[0.0, y5, float(self.surface(0.0, y5))], L6=pts["L3"][1], L7=pts["L2"][1],
            provenance="initial")


def generate_synthetic(spec: SyntheticNoseSpec) -> tuple[PointCloud, LandmarkSet]:
    """Sample a jittered-grid cloud and the matching ground-truth landmarks.

    ``spec.roll`` rotates both cloud and landmarks counter-clockwise about the tip.
    """
    shape = spec.shape if spec.shape is not None else random_shape(spec.subject_seed)
    face = SyntheticFace(shape, spec.expression)
    rng = np.random.default_rng([spec.subject_seed, spec.sample_seed, 7])
    x0, x1, y0, y1 = spec.extent
    gx = np.arange(x0, x1 + 1e-9, spec.spacing)
    gy = np.arange(y0, y1 + 1e-9, spec.spacing)
    X, Y = np.meshgrid(gx, gy)
    X = X + rng.uniform(-0.3, 0.3, X.shape) * spec.spacing
    Y = Y + rng.uniform(-0.3, 0.3, Y.shape) * spec.spacing
    # scans have a rounded outline; keep the ellipse inscribed in the extent
    cx, cy, ax, ay = (x0 + x1) / 2, (y0 + y1) / 2, (x1 - x0) / 2, (y1 - y0) / 2
    inside = ((X - cx) / ax) ** 2 + ((Y - cy) / ay) ** 2 <= 1.0
    X, Y = X[inside], Y[inside]
    Z = face.surface(X, Y)
    if spec.noise_sigma > 0:
        Z = Z + rng.normal(0.0, spec.noise_sigma, Z.shape)
    pts = np.column_stack([X, Y, Z])
    truth = face.landmarks()
    if spec.roll:
        pts = rotate_xy(pts, spec.roll)
        truth = truth.roll_rotated(spec.roll, (0.0, 0.0))
    return PointCloud(pts), truth


@dataclass(frozen=True)
class SignalNoiseSet:
    gallery: np.ndarray
    gallery_labels: np.ndarray
    probes: np.ndarray
    probe_labels: np.ndarray
    heldout: np.ndarray
    heldout_labels: np.ndarray
    informative: np.ndarray     # (K,) bool
    layout: tuple[int, int, int]


def signal_noise_features(K: int = 30, n_informative: int = 15, n_subjects: int = 40,
                          n_gallery: int = 2, n_probe: int = 3, n_heldout: int = 3,
                          s_n: int = 1, h_l: int = 4, signal: float = 1.0, noise: float = 1.0,
                          seed: int = 0) -> SignalNoiseSet:
    """Feature vectors in the (scale, component, descriptor, bin) layout where
    only the first ``n_informative`` descriptors depend on the subject.

    Each informative block is a subject prototype plus independent noise, so
    every informative descriptor is weakly identifying on its own and their
    evidence adds up. Noise blocks are drawn from one shared distribution.
    """
    rng = np.random.default_rng([seed, 31])
    informative = np.zeros(K, dtype=bool)
    informative[:n_informative] = True
    proto = rng.normal(0.0, signal, (n_subjects, s_n, 3, K, h_l))

    def draw(per_subject):
        labels = np.repeat(np.arange(n_subjects), per_subject)
        x = rng.normal(0.0, noise, (len(labels), s_n, 3, K, h_l))
        x[:, :, :, informative] += proto[labels][:, :, :, informative]
        return x.reshape(len(labels), -1) + 2.0 * signal, labels

    g, gl = draw(n_gallery)
    p, pl = draw(n_probe)
    h, hl = draw(n_heldout)
    return SignalNoiseSet(g, gl, p, pl, h, hl, informative, (s_n, K, h_l))
