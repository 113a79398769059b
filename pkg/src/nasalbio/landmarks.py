"""Seven-point nasal landmarking.

Landmark names follow the usual anatomical order: L1 nasal root, L2 left eye
corner, L3 left alar groove, L4 nose tip, L5 subnasale, L6 right alar groove,
L7 right eye corner. "Left" is the subject's left, which sits at +x.
"""

from __future__ import annotations

import logging
import math
from dataclasses import dataclass, field
from itertools import product

import numpy as np
from numba import njit

from .geometry import (DegenerateError, DepthGrid, GeometryError, PlanarCurve,
                       plane_intersect, roll_rotate, rotate_xy)

log = logging.getLogger(__name__)

LANDMARK_NAMES = ("L1", "L2", "L3", "L4", "L5", "L6", "L7")


class LandmarkError(RuntimeError):
    """Landmarking failed for one sample."""


class InvalidAlphaError(ValueError):
    """The rotated curve is no longer a single-valued function."""


@dataclass(frozen=True)
class LandmarkSet:
    L1: np.ndarray
    L2: np.ndarray
    L3: np.ndarray
    L4: np.ndarray
    L5: np.ndarray
    L6: np.ndarray
    L7: np.ndarray
    provenance: str = "refined"
    theta: float = 0.0

    def __post_init__(self):
        for name in LANDMARK_NAMES:
            object.__setattr__(self, name, np.asarray(getattr(self, name), dtype=float).reshape(3))

    @classmethod
    def from_array(cls, arr, provenance: str = "refined", theta: float = 0.0) -> "LandmarkSet":
        arr = np.asarray(arr, dtype=float).reshape(7, 3)
        return cls(*arr, provenance=provenance, theta=theta)

    def as_array(self) -> np.ndarray:
        return np.vstack([getattr(self, n) for n in LANDMARK_NAMES])

    def translated(self, offset) -> "LandmarkSet":
        return LandmarkSet.from_array(self.as_array() + np.asarray(offset, dtype=float),
                                      self.provenance, self.theta)

    def roll_rotated(self, angle: float, pivot) -> "LandmarkSet":
        """Rotate counter-clockwise in x/y about ``pivot`` (z unchanged)."""
        return LandmarkSet.from_array(rotate_xy(self.as_array(), angle, pivot),
                                      self.provenance, self.theta + angle)

    def ordering_ok(self) -> bool:
        arr = self.as_array()
        tip_top = np.all(arr[3, 2] >= np.delete(arr, 3, axis=0)[:, 2] - 1e-9)
        vertical = self.L1[1] > self.L4[1] > self.L5[1]
        lateral = self.L3[0] > self.L4[0] > self.L6[0] and self.L2[0] > self.L1[0] > self.L7[0]
        return bool(tip_top and vertical and lateral)


# ---------------------------------------------------------------- minima

@dataclass(frozen=True)
class MinimaResult:
    MIN: np.ndarray
    indices: np.ndarray
    rotation_used: float
    shortfall: bool


def rotate_curve(P: np.ndarray, alpha: float) -> np.ndarray:
    """Rotate curve samples by ``alpha`` about the first sample."""
    d = P - P[0]
    c, s = math.cos(alpha), math.sin(alpha)
    return np.column_stack([d[:, 0] * c - d[:, 1] * s, d[:, 0] * s + d[:, 1] * c])


def single_valued_prefix(P: np.ndarray, alpha: float) -> int:
    """Length of the longest leading run of samples that stays single-valued after rotation."""
    if len(P) < 2:
        return len(P)
    dx = np.diff(rotate_curve(P, alpha)[:, 0])
    sign = np.sign(dx[0])
    bad = np.flatnonzero(np.sign(dx) != sign) if sign != 0 else np.array([0])
    return len(P) if len(bad) == 0 else int(bad[0]) + 1


def minima_detector(curve: PlanarCurve | np.ndarray, n: int, alpha: float) -> MinimaResult:
    """The ``n`` lowest local minima of the curve rotated by ``alpha``.

    Minima are located on the rotated samples and reported at the matching
    samples of the original curve. Plateaus report their first sample; equal
    rotated heights are ordered by abscissa.
    """
    if n < 1:
        raise ValueError("n must be >= 1")
    P = curve.P if isinstance(curve, PlanarCurve) else np.asarray(curve, dtype=float)
    R = rotate_curve(P, alpha)
    dx = np.diff(R[:, 0])
    if not (np.all(dx > 0) or np.all(dx < 0)):
        raise InvalidAlphaError(f"curve is not single-valued after rotating by {alpha:.4f} rad")
    sign = np.sign(np.diff(R[:, 1]))
    nz = np.flatnonzero(sign)
    s = sign[nz]
    turn = (s[:-1] < 0) & (s[1:] > 0)
    idx = nz[:-1][turn] + 1
    order = np.lexsort((idx, R[idx, 1]))
    idx = idx[order][:n]
    return MinimaResult(P[idx].copy(), idx, float(alpha), len(idx) < n)


def fold_minima(P: np.ndarray, n: int, alpha: float) -> np.ndarray:
    """Indices of the ``n`` lowest minima on the single-valued leading part of
    the rotated curve.

    The curve is cut where its rotated abscissa turns back. When the heights
    rise across that fold the last kept sample is a minimum of the full curve
    (a sharp crease), so it is counted too.
    """
    P = np.asarray(P, dtype=float)
    m = single_valued_prefix(P, alpha)
    if m < 2:
        return np.empty(0, dtype=int)
    idx = list(minima_detector(P[:m], n, alpha).indices)
    R = rotate_curve(P[:m + 1], alpha)
    if 2 <= m < len(P) and R[m, 1] > R[m - 1, 1] and R[m - 1, 1] < R[m - 2, 1]:
        idx.append(m - 1)
    idx = np.array(idx, dtype=int)
    return idx[np.lexsort((idx, R[idx, 1]))][:n]


# ---------------------------------------------------------------- config

@dataclass(frozen=True)
class LandmarkConfig:
    gamma_max: float = math.pi / 3
    num_planes: int = 31
    beta: float = 0.0
    phi: float = math.pi / 3
    zeta: float = -math.pi / 4
    eta: float = math.pi / 4
    roi_mm: float = 5.0
    strip_half_width: float = 22.0
    sigma_thresh: float = 3.0
    alar_r0: float = 30.0
    alar_a: tuple[float, float] = (4.0, 0.75)
    eye_r0: float = 45.0
    eye_a: tuple[float, float] = (4.0, 0.75)
    eye_depth_band: float = 0.25
    candidates_per_row: int = 3


# ---------------------------------------------------------------- root and tip

def _upper_profile(grid: DepthGrid, anchor, normal) -> PlanarCurve:
    """Profile from ``anchor`` upwards (the half with negative cut abscissa)."""
    curve = plane_intersect(grid, anchor, normal)
    keep = curve.P[:, 0] <= 1e-9
    if keep.sum() < 2:
        raise DegenerateError("upper profile has fewer than 2 samples")
    return curve.segment(keep, flip=True)


def _lower_profile(grid: DepthGrid, anchor, normal) -> PlanarCurve:
    curve = plane_intersect(grid, anchor, normal)
    keep = curve.P[:, 0] >= -1e-9
    if keep.sum() < 2:
        raise DegenerateError("lower profile has fewer than 2 samples")
    return curve.segment(keep)


def root_candidates(nose: DepthGrid, tip0, gamma_max: float = math.pi / 3,
                    beta: float = 0.0, num_planes: int = 31) -> list[np.ndarray | None]:
    """Lowest minimum of the upper profile for each cutting-plane angle."""
    gammas = np.linspace(-gamma_max, gamma_max, num_planes) if num_planes > 1 else np.zeros(1)
    out: list[np.ndarray | None] = []
    for g in gammas:
        try:
            curve = _upper_profile(nose, tip0, (math.cos(g), math.sin(g)))
            res = minima_detector(curve, 1, beta)
        except (GeometryError, InvalidAlphaError):
            out.append(None)
            continue
        out.append(curve.to_3d(res.MIN[:, 0], res.MIN[:, 1])[0] if len(res.indices) else None)
    return out


def detect_root_initial(nose: DepthGrid, tip0, gamma_max: float = math.pi / 3,
                        beta: float = 0.0, num_planes: int = 31) -> np.ndarray:
    """Initial nasal root: the highest of the per-plane profile minima."""
    found = [p for p in root_candidates(nose, tip0, gamma_max, beta, num_planes) if p is not None]
    if not found:
        raise LandmarkError("no cutting plane produced a root candidate")
    found = np.array(found)
    return found[np.argmax(found[:, 2])]


@njit(cache=True)
def _bilinear(z, mask, x0, y0, inv_res, x, y):
    ny, nx = z.shape
    fx = (x - x0) * inv_res
    fy = (y - y0) * inv_res
    if fx < 0.0 or fy < 0.0 or fx > nx - 1 or fy > ny - 1:
        return np.nan
    ix = min(int(fx), nx - 2)
    iy = min(int(fy), ny - 2)
    if not (mask[iy, ix] and mask[iy, ix + 1] and mask[iy + 1, ix] and mask[iy + 1, ix + 1]):
        return np.nan
    tx = fx - ix
    ty = fy - iy
    return ((1 - ty) * ((1 - tx) * z[iy, ix] + tx * z[iy, ix + 1])
            + ty * ((1 - tx) * z[iy + 1, ix] + tx * z[iy + 1, ix + 1]))


@njit(cache=True)
def _pair_error(z, mask, x0, y0, res, tx, ty, rx, ry, ncols, bound):
    """Worst row asymmetry of the strip between tip and root; inf if abandoned."""
    dx = rx - tx
    dy = ry - ty
    length = math.sqrt(dx * dx + dy * dy)
    if length < res:
        return np.inf, 0
    ex = dy / length
    ey = -dx / length
    ux = dx / length
    uy = dy / length
    inv = 1.0 / res
    nrows = int(length * inv + 1e-9) + 1
    worst = 0.0
    overlap = 0
    for m in range(nrows):
        yy = m * res
        cx = tx + yy * ux
        cy = ty + yy * uy
        row = 0.0
        for q in range(1, ncols + 1):
            xx = q * res
            zl = _bilinear(z, mask, x0, y0, inv, cx + xx * ex, cy + xx * ey)
            if math.isnan(zl):
                continue
            zr = _bilinear(z, mask, x0, y0, inv, cx - xx * ex, cy - xx * ey)
            if math.isnan(zr):
                continue
            row += abs(zl - zr)
            overlap += 1
        if row > worst:
            worst = row
            if worst > bound:
                return np.inf, overlap
    if overlap == 0:
        return np.inf, 0
    return worst, overlap


@njit(cache=True)
def _best_pair(z, mask, x0, y0, res, tips, roots, ncols, start):
    """Exhaustive min-max search with exact pruning; ties go to the lowest pair index."""
    nt = tips.shape[0]
    nr = roots.shape[0]
    best = np.inf
    best_k = -1
    best_overlap = 0
    si, sj = start // nr, start % nr
    e, ov = _pair_error(z, mask, x0, y0, res, tips[si, 0], tips[si, 1],
                        roots[sj, 0], roots[sj, 1], ncols, np.inf)
    if e < np.inf:
        best, best_k, best_overlap = e, start, ov
    for k in range(nt * nr):
        if k == start:
            continue
        i = k // nr
        j = k % nr
        e, ov = _pair_error(z, mask, x0, y0, res, tips[i, 0], tips[i, 1],
                            roots[j, 0], roots[j, 1], ncols, best)
        if e < best or (e == best and e < np.inf and k < best_k):
            best, best_k, best_overlap = e, k, ov
    return best_k, best, best_overlap


def roll_angle(tip, root) -> float:
    """Signed roll of the tip-to-root axis from vertical (counter-clockwise positive)."""
    dx, dy = root[0] - tip[0], root[1] - tip[1]
    return math.atan2(-dx, dy)


def _roi_pixels(grid: DepthGrid, center, half: float) -> np.ndarray:
    sel = (np.abs(grid.Nx - center[0]) <= half + 1e-9) & (np.abs(grid.Ny - center[1]) <= half + 1e-9)
    sel &= grid.mask
    iy, ix = np.nonzero(sel)
    return np.column_stack([grid.x[ix], grid.y[iy]])


@dataclass(frozen=True)
class TipRootResult:
    L1: np.ndarray
    L4: np.ndarray
    theta: float
    error: float
    overlap: int
    L1_opt: np.ndarray
    L4_opt: np.ndarray


def refine_tip_root(nose: DepthGrid, L1_0, L4_0, roi_mm: float = 5.0,
                    strip_half_width: float = 22.0) -> TipRootResult:
    """Choose the root/tip candidate pair whose symmetry axis has the smallest
    worst-row asymmetry, then read the tip and root off the symmetry profile."""
    half = roi_mm / 2
    tips = _roi_pixels(nose, L4_0, half)
    roots = _roi_pixels(nose, L1_0, half)
    if len(tips) == 0 or len(roots) == 0:
        raise LandmarkError("tip or root RoI has no valid pixel")
    res = nose.resolution
    ncols = int(round(strip_half_width / res))
    ti = int(np.argmin(np.sum((tips - np.asarray(L4_0)[:2]) ** 2, axis=1)))
    rj = int(np.argmin(np.sum((roots - np.asarray(L1_0)[:2]) ** 2, axis=1)))
    z = np.ascontiguousarray(np.nan_to_num(nose.z))
    mask = np.ascontiguousarray(nose.mask)
    k, err, overlap = _best_pair(z, mask, float(nose.x[0]), float(nose.y[0]), res,
                                 tips, roots, ncols, ti * len(roots) + rj)
    if k < 0:
        raise LandmarkError("every tip/root candidate pair had an empty strip")
    t_opt = tips[k // len(roots)]
    r_opt = roots[k % len(roots)]
    theta = roll_angle(t_opt, r_opt)
    normal = (math.cos(theta), math.sin(theta))
    anchor = np.array([t_opt[0], t_opt[1], 0.0])
    curve = plane_intersect(nose, anchor, normal)
    s_root = -math.hypot(r_opt[0] - t_opt[0], r_opt[1] - t_opt[1])
    below = curve.P[:, 0] >= s_root
    if not below.any():
        raise LandmarkError("symmetry profile has no samples below the root candidate")
    i_tip = np.flatnonzero(below)[np.argmax(curve.P[below, 1])]
    L4 = curve.point(i_tip)
    up = curve.segment(curve.P[:, 0] <= curve.P[i_tip, 0], flip=True)
    L1 = None
    try:
        found = minima_detector(up, 1, 0.0)
        if len(found.indices):
            L1 = up.point(found.indices[0])
    except InvalidAlphaError:
        pass
    if L1 is None:
        j = int(np.argmin(np.abs(curve.P[:, 0] - s_root)))
        L1 = curve.point(j)
    return TipRootResult(L1, L4, theta, float(err), int(overlap),
                         np.array([r_opt[0], r_opt[1], 0.0]), np.array([t_opt[0], t_opt[1], 0.0]))


def detect_subnasale(nose: DepthGrid, L4, theta_opt: float, phi: float = math.pi / 3) -> np.ndarray:
    """Lowest minimum of the symmetry profile below the tip, rotated by ``phi``.

    The profile is cut where the rotated samples stop being single-valued
    (on the upper lip, at or past the subnasale).
    """
    try:
        curve = _lower_profile(nose, L4, (math.cos(theta_opt), math.sin(theta_opt)))
    except GeometryError as exc:
        raise LandmarkError(f"subnasale profile unusable: {exc}") from exc
    found = fold_minima(curve.P, 1, phi)
    if not len(found):
        raise LandmarkError("no minimum below the tip")
    return curve.point(found[0])


# ---------------------------------------------------------------- alae and eye corners

def polar_roi(grid: DepthGrid, center, r0: float, a_upper: float, a_lower: float) -> np.ndarray:
    """Two-lobed polar region ``r <= r0 |cos t|^a`` around ``center``.

    The exponent is ``a_upper`` above the horizontal through the centre and
    ``a_lower`` below it.
    """
    if r0 <= 0:
        raise ValueError("r0 must be positive")
    dx = grid.Nx - center[0]
    dy = grid.Ny - center[1]
    r = np.hypot(dx, dy)
    t = np.mod(np.arctan2(dy, dx), 2 * np.pi)
    a = np.where(t < np.pi, a_upper, a_lower)
    return (r <= r0 * np.abs(np.cos(t)) ** a) & grid.mask


def _row_candidates(grid: DepthGrid, roi: np.ndarray, split_x: float, zeta: float, eta: float,
                    n: int) -> dict[int, tuple[np.ndarray, np.ndarray]]:
    """Per RoI row, up to ``n`` minima on each half-curve (left at +x, right at -x)."""
    out = {}
    for i in np.flatnonzero(roi.any(axis=1)):
        cols = np.flatnonzero(roi[i])
        xs, zs = grid.x[cols], grid.z[i, cols]
        y = grid.y[i]
        halves = []
        for side, angle in ((xs > split_x, eta), (xs < split_x, zeta)):
            # walk outwards from the split column and stop at the first fold
            P = np.column_stack([xs[side], zs[side]])
            if angle == zeta:
                P = P[::-1]
            found = fold_minima(P, n, angle)
            if not len(found):
                break
            MIN = P[found]
            halves.append(np.column_stack([MIN[:, 0], np.full(len(MIN), y), MIN[:, 1]]))
        if len(halves) == 2:
            out[int(i)] = (halves[0], halves[1])
    return out


def _pick_pair(left: np.ndarray, right: np.ndarray, ref) -> tuple[np.ndarray, np.ndarray]:
    best = None
    for a, b in product(range(len(left)), range(len(right))):
        gap = abs(np.linalg.norm(left[a] - ref) - np.linalg.norm(right[b] - ref))
        if best is None or gap < best[0]:
            best = (gap, a, b)
    return left[best[1]], right[best[2]]


def remove_outliers(left: np.ndarray, right: np.ndarray, sigma: float) -> np.ndarray:
    """Indices of the rows kept by the consecutive-distance spread test.

    While either side's consecutive 3D distances have a standard deviation
    above ``sigma``, the row contributing the largest adjacent distance on
    the worse side is dropped from both sides.
    """
    keep = np.arange(len(left))
    while len(keep) >= 3:
        spreads, sums = [], []
        for pts in (left[keep], right[keep]):
            d = np.linalg.norm(np.diff(pts, axis=0), axis=1)
            spreads.append(d.std())
            adj = np.zeros(len(pts))
            adj[:-1] += d
            adj[1:] += d
            sums.append(adj)
        side = int(np.argmax(spreads))
        if spreads[side] <= sigma:
            break
        keep = np.delete(keep, int(np.argmax(sums[side])))
    return keep


@dataclass
class LateralResult:
    L2: np.ndarray
    L3: np.ndarray
    L6: np.ndarray
    L7: np.ndarray
    alar_rows: int = 0
    alar_inliers: int = 0
    eye_rows: int = 0
    eye_inliers: int = 0


def _paired_rows(grid, roi, split_x, ref, cfg):
    rows = _row_candidates(grid, roi, split_x, cfg.zeta, cfg.eta, cfg.candidates_per_row)
    if len(rows) < 2:
        raise LandmarkError("fewer than 2 usable RoI rows")
    pairs = [_pick_pair(l, r, ref) for l, r in (rows[i] for i in sorted(rows))]
    left = np.array([p[0] for p in pairs])
    right = np.array([p[1] for p in pairs])
    keep = remove_outliers(left, right, cfg.sigma_thresh)
    if len(keep) < 2:
        raise LandmarkError("fewer than 2 inlier rows after outlier removal")
    return left[keep], right[keep], len(pairs)


def detect_alar_and_eyes(nose: DepthGrid, L1, L4, cfg: LandmarkConfig = LandmarkConfig()) -> LateralResult:
    """Alar grooves and eye corners on a roll-corrected nose."""
    L1, L4 = np.asarray(L1, dtype=float), np.asarray(L4, dtype=float)
    roi = polar_roi(nose, L4, cfg.alar_r0, *cfg.alar_a)
    left, right, n_alar = _paired_rows(nose, roi, L4[0], L4, cfg)
    i = int(np.argmin(np.abs(left[:, 1] - L4[1])))
    L3, L6 = left[i], right[i]

    roi = polar_roi(nose, L1, cfg.eye_r0, *cfg.eye_a)
    eleft, eright, n_eye = _paired_rows(nose, roi, L1[0], L1, cfg)
    depth = 0.5 * (eleft[:, 2] + eright[:, 2])
    band = np.flatnonzero(depth <= depth.min() + cfg.eye_depth_band)
    gaps = np.abs(np.linalg.norm(eleft[band] - L4, axis=1) - np.linalg.norm(eright[band] - L4, axis=1))
    j = band[int(np.argmin(gaps))]
    return LateralResult(eleft[j], L3, L6, eright[j], n_alar, len(left), n_eye, len(eleft))


# ---------------------------------------------------------------- full detector

@dataclass
class LandmarkResult:
    landmarks: LandmarkSet
    initial_root: np.ndarray
    initial_tip: np.ndarray
    diagnostics: dict = field(default_factory=dict)


def _on_surface(grid: DepthGrid, p) -> np.ndarray:
    z, ok = grid.sample(p[0], p[1])
    return np.array([p[0], p[1], float(z)]) if ok else np.asarray(p, dtype=float)


def detect_landmarks(nose: DepthGrid, tip0, root0=None, cfg: LandmarkConfig = LandmarkConfig()) -> LandmarkResult:
    """Run the whole landmarking chain on a cropped, pose-normalised nose."""
    tip0 = np.asarray(tip0, dtype=float)
    if root0 is None:
        root0 = detect_root_initial(nose, tip0, cfg.gamma_max, cfg.beta, cfg.num_planes)
    tr = refine_tip_root(nose, root0, tip0, cfg.roi_mm, cfg.strip_half_width)
    L5 = detect_subnasale(nose, tr.L4, tr.theta, cfg.phi)

    try:
        corrected = roll_rotate(nose, -tr.theta, tr.L4)
    except GeometryError as exc:
        raise LandmarkError(f"roll correction failed: {exc}") from exc
    L1c = rotate_xy(tr.L1, -tr.theta, tr.L4[:2])
    lat = detect_alar_and_eyes(corrected, L1c, tr.L4, cfg)
    back = {k: _on_surface(nose, rotate_xy(getattr(lat, k), tr.theta, tr.L4[:2]))
            for k in ("L2", "L3", "L6", "L7")}
    lms = LandmarkSet(tr.L1, back["L2"], back["L3"], tr.L4, L5, back["L6"], back["L7"],
                      provenance="refined", theta=tr.theta)
    diag = {"symmetry_error": tr.error, "strip_overlap": tr.overlap,
            "alar_rows": lat.alar_rows, "alar_inliers": lat.alar_inliers,
            "eye_rows": lat.eye_rows, "eye_inliers": lat.eye_inliers}
    return LandmarkResult(lms, np.asarray(root0, dtype=float), tip0, diag)


# ---------------------------------------------------------------- evaluation

def consistency_metric(per_subject: list[list[LandmarkSet]]) -> tuple[np.ndarray, int]:
    """Tip-centred repeatability per landmark.

    Returns a (7, 2) array of dataset mean and standard deviation of the
    per-subject mean deviation from that subject's mean landmark position,
    plus the number of subjects excluded for having fewer than 2 captures.
    """
    values, excluded = [], 0
    for captures in per_subject:
        if len(captures) < 2:
            excluded += 1
            continue
        arr = np.stack([c.as_array() - c.L4 for c in captures])
        dev = np.linalg.norm(arr - arr.mean(axis=0), axis=2)
        values.append(dev.mean(axis=0))
    if not values:
        raise ValueError("no subject has 2 or more captures")
    values = np.array(values)
    return np.column_stack([values.mean(axis=0), values.std(axis=0)]), excluded


def precision_curve(detected: list[LandmarkSet], truth: list[LandmarkSet], thresholds_mm) -> np.ndarray:
    """Fraction of samples within each threshold, shape (7, len(thresholds))."""
    if len(detected) != len(truth):
        raise ValueError("detected and ground-truth lists differ in length")
    if not detected:
        raise ValueError("no samples")
    err = np.linalg.norm(np.stack([d.as_array() for d in detected])
                         - np.stack([t.as_array() for t in truth]), axis=2)
    thr = np.asarray(thresholds_mm, dtype=float)
    return (err[:, :, None] < thr[None, None, :]).mean(axis=0)
