"""Surface primitives shared by every stage.

Point clouds are resampled onto a uniform height field (``DepthGrid``), which
is the representation every downstream operation works on. Coordinates are in
millimetres: ``x`` grows to the viewer's right, ``y`` grows upwards and ``z``
points out of the face towards the sensor.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import NamedTuple

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view
from scipy import ndimage
from scipy.interpolate import LinearNDInterpolator
from scipy.spatial import QhullError


class GeometryError(ValueError):
    """Raised when a surface operation cannot produce a meaningful result."""


class EmptyInputError(GeometryError):
    pass


class DegenerateError(GeometryError):
    pass


def _readonly(a: np.ndarray) -> np.ndarray:
    a = np.array(a, copy=True)
    a.setflags(write=False)
    return a


@dataclass(frozen=True)
class PointCloud:
    points: np.ndarray
    valid: np.ndarray | None = None

    def __post_init__(self):
        pts = np.asarray(self.points, dtype=float)
        if pts.ndim != 2 or pts.shape[1] != 3:
            raise GeometryError(f"points must be (n, 3), got {pts.shape}")
        valid = (np.ones(len(pts), dtype=bool) if self.valid is None
                 else np.asarray(self.valid, dtype=bool))
        if valid.shape != (len(pts),):
            raise GeometryError("validity flags must match the point count")
        if not np.all(np.isfinite(pts[valid])):
            raise GeometryError("valid points must have finite coordinates")
        object.__setattr__(self, "points", _readonly(pts))
        object.__setattr__(self, "valid", _readonly(valid))

    def __len__(self) -> int:
        return len(self.points)

    @property
    def valid_points(self) -> np.ndarray:
        return self.points[self.valid]

    def transformed(self, rotation: np.ndarray, translation=(0.0, 0.0, 0.0)) -> "PointCloud":
        pts = self.points @ np.asarray(rotation).T + np.asarray(translation)
        pts[~self.valid] = self.points[~self.valid]
        return PointCloud(pts, self.valid)


@dataclass(frozen=True)
class DepthGrid:
    """Uniform height field.

    ``z[i, j]`` is the depth at ``(x[j], y[i])``; rows follow increasing ``y``.
    Invalid pixels carry ``nan`` in ``z`` and ``False`` in ``mask``.
    """

    x: np.ndarray
    y: np.ndarray
    z: np.ndarray
    mask: np.ndarray

    def __post_init__(self):
        x = np.asarray(self.x, dtype=float)
        y = np.asarray(self.y, dtype=float)
        z = np.array(self.z, dtype=float)
        mask = np.asarray(self.mask, dtype=bool)
        if z.shape != (len(y), len(x)) or mask.shape != z.shape:
            raise GeometryError("z and mask must have shape (len(y), len(x))")
        if len(x) < 2 or len(y) < 2:
            raise GeometryError("a depth grid needs at least 2x2 pixels")
        dx, dy = np.diff(x), np.diff(y)
        if np.any(dx <= 0) or np.any(dy <= 0):
            raise GeometryError("coordinate maps must be strictly increasing")
        res = dx[0]
        if not (np.allclose(dx, res, rtol=0, atol=1e-6 * res)
                and np.allclose(dy, res, rtol=0, atol=1e-6 * res)):
            raise GeometryError("grid spacing must be uniform and equal in x and y")
        mask = mask & np.isfinite(z)
        z[~mask] = np.nan
        object.__setattr__(self, "x", _readonly(x))
        object.__setattr__(self, "y", _readonly(y))
        object.__setattr__(self, "z", _readonly(z))
        object.__setattr__(self, "mask", _readonly(mask))

    @classmethod
    def from_origin(cls, x0: float, y0: float, resolution: float, z, mask=None) -> "DepthGrid":
        z = np.asarray(z, dtype=float)
        ny, nx = z.shape
        x = x0 + resolution * np.arange(nx)
        y = y0 + resolution * np.arange(ny)
        if mask is None:
            mask = np.isfinite(z)
        return cls(x, y, z, mask)

    @property
    def resolution(self) -> float:
        return float(self.x[1] - self.x[0])

    @property
    def shape(self) -> tuple[int, int]:
        return self.z.shape

    @property
    def Nx(self) -> np.ndarray:
        return np.broadcast_to(self.x[None, :], self.shape)

    @property
    def Ny(self) -> np.ndarray:
        return np.broadcast_to(self.y[:, None], self.shape)

    @property
    def Nz(self) -> np.ndarray:
        return self.z

    @property
    def n_valid(self) -> int:
        return int(self.mask.sum())

    def points(self) -> np.ndarray:
        """Valid pixels as an (n, 3) array."""
        iy, ix = np.nonzero(self.mask)
        return np.column_stack([self.x[ix], self.y[iy], self.z[iy, ix]])

    def with_depth(self, z, mask=None) -> "DepthGrid":
        return DepthGrid(self.x, self.y, z, self.mask if mask is None else mask)

    def translated(self, dx=0.0, dy=0.0, dz=0.0) -> "DepthGrid":
        return DepthGrid(self.x + dx, self.y + dy, self.z + dz, self.mask)

    def contains(self, xq, yq) -> np.ndarray:
        xq, yq = np.asarray(xq), np.asarray(yq)
        return ((xq >= self.x[0]) & (xq <= self.x[-1])
                & (yq >= self.y[0]) & (yq <= self.y[-1]))

    def nearest_index(self, xq, yq) -> tuple[np.ndarray, np.ndarray]:
        res = self.resolution
        ix = np.clip(np.rint((np.asarray(xq) - self.x[0]) / res), 0, len(self.x) - 1)
        iy = np.clip(np.rint((np.asarray(yq) - self.y[0]) / res), 0, len(self.y) - 1)
        return iy.astype(int), ix.astype(int)

    def sample(self, xq, yq, values: np.ndarray | None = None) -> tuple[np.ndarray, np.ndarray]:
        """Bilinear interpolation of ``values`` (default ``z``).

        A sample is valid only when all four surrounding pixels are valid;
        invalid samples come back as ``nan``.
        """
        vals = self.z if values is None else np.asarray(values, dtype=float)
        xq = np.asarray(xq, dtype=float)
        yq = np.asarray(yq, dtype=float)
        res = self.resolution
        ny, nx = self.shape
        fx = (xq - self.x[0]) / res
        fy = (yq - self.y[0]) / res
        inside = (fx >= 0) & (fy >= 0) & (fx <= nx - 1) & (fy <= ny - 1)
        fx = np.where(inside, fx, 0.0)
        fy = np.where(inside, fy, 0.0)
        ix = np.minimum(np.floor(fx).astype(int), nx - 2)
        iy = np.minimum(np.floor(fy).astype(int), ny - 2)
        tx = fx - ix
        ty = fy - iy
        m = self.mask
        ok = inside & m[iy, ix] & m[iy, ix + 1] & m[iy + 1, ix] & m[iy + 1, ix + 1]
        v00 = vals[iy, ix]
        v01 = vals[iy, ix + 1]
        v10 = vals[iy + 1, ix]
        v11 = vals[iy + 1, ix + 1]
        out = ((1 - ty) * ((1 - tx) * v00 + tx * v01)
               + ty * ((1 - tx) * v10 + tx * v11))
        out = np.where(ok, out, np.nan)
        return out, ok

    def subgrid(self, mask: np.ndarray) -> "DepthGrid":
        """Restrict to ``mask`` and trim to its bounding box."""
        mask = np.asarray(mask, dtype=bool) & self.mask
        rows = np.flatnonzero(mask.any(axis=1))
        cols = np.flatnonzero(mask.any(axis=0))
        if len(rows) < 2 or len(cols) < 2:
            raise DegenerateError("sub-grid would have fewer than 2x2 pixels")
        r = slice(rows[0], rows[-1] + 1)
        c = slice(cols[0], cols[-1] + 1)
        return DepthGrid(self.x[c], self.y[r], self.z[r, c], mask[r, c])


@dataclass(frozen=True)
class RigidPose:
    """Maps a point ``p`` to ``rotation @ p + translation``."""

    rotation: np.ndarray
    translation: np.ndarray

    def __post_init__(self):
        r = np.asarray(self.rotation, dtype=float)
        t = np.asarray(self.translation, dtype=float).reshape(3)
        if r.shape != (3, 3):
            raise GeometryError("rotation must be 3x3")
        if abs(np.linalg.det(r) - 1.0) > 1e-6 or not np.allclose(r.T @ r, np.eye(3), atol=1e-6):
            raise GeometryError("rotation must be orthonormal with determinant +1")
        object.__setattr__(self, "rotation", _readonly(r))
        object.__setattr__(self, "translation", _readonly(t))

    @classmethod
    def identity(cls) -> "RigidPose":
        return cls(np.eye(3), np.zeros(3))

    @classmethod
    def about_point(cls, rotation, center) -> "RigidPose":
        rotation = np.asarray(rotation, dtype=float)
        center = np.asarray(center, dtype=float)
        return cls(rotation, center - rotation @ center)

    def apply(self, points) -> np.ndarray:
        return np.asarray(points, dtype=float) @ self.rotation.T + self.translation

    def compose(self, first: "RigidPose") -> "RigidPose":
        """The pose that applies ``first`` and then ``self``."""
        return RigidPose(self.rotation @ first.rotation,
                         self.rotation @ first.translation + self.translation)

    def inverse(self) -> "RigidPose":
        rt = self.rotation.T
        return RigidPose(rt, -rt @ self.translation)

    @property
    def angle_deg(self) -> float:
        c = (np.trace(self.rotation) - 1.0) / 2.0
        return math.degrees(math.acos(min(1.0, max(-1.0, c))))


def rotation_x(angle: float) -> np.ndarray:
    c, s = math.cos(angle), math.sin(angle)
    return np.array([[1, 0, 0], [0, c, -s], [0, s, c]], dtype=float)


def rotation_y(angle: float) -> np.ndarray:
    c, s = math.cos(angle), math.sin(angle)
    return np.array([[c, 0, s], [0, 1, 0], [-s, 0, c]], dtype=float)


def rotation_z(angle: float) -> np.ndarray:
    c, s = math.cos(angle), math.sin(angle)
    return np.array([[c, -s, 0], [s, c, 0], [0, 0, 1]], dtype=float)


def rotate_xy(points, angle: float, pivot=(0.0, 0.0)) -> np.ndarray:
    """Counter-clockwise rotation of the x/y columns about ``pivot``."""
    pts = np.array(points, dtype=float)
    c, s = math.cos(angle), math.sin(angle)
    dx = pts[..., 0] - pivot[0]
    dy = pts[..., 1] - pivot[1]
    pts[..., 0] = pivot[0] + c * dx - s * dy
    pts[..., 1] = pivot[1] + s * dx + c * dy
    return pts


@dataclass(frozen=True)
class PlanarCurve:
    """A surface profile: ``P[:, 0]`` is the signed distance along
    ``direction`` from ``origin3d`` and ``P[:, 1]`` the surface depth."""

    P: np.ndarray
    origin3d: np.ndarray
    direction: np.ndarray = np.array([0.0, -1.0])

    def __post_init__(self):
        P = np.asarray(self.P, dtype=float)
        if P.ndim != 2 or P.shape[1] != 2 or len(P) < 2:
            raise DegenerateError("a curve needs at least 2 samples")
        if np.any(np.diff(P[:, 0]) <= 0):
            raise GeometryError("curve abscissa must be strictly increasing")
        object.__setattr__(self, "P", _readonly(P))
        object.__setattr__(self, "origin3d", _readonly(np.asarray(self.origin3d, dtype=float)))
        d = np.asarray(self.direction, dtype=float)
        object.__setattr__(self, "direction", _readonly(d / np.linalg.norm(d)))

    def __len__(self) -> int:
        return len(self.P)

    def to_3d(self, abscissa=None, height=None) -> np.ndarray:
        """Lift curve coordinates back into 3D."""
        s = self.P[:, 0] if abscissa is None else np.atleast_1d(np.asarray(abscissa, dtype=float))
        h = self.P[:, 1] if height is None else np.atleast_1d(np.asarray(height, dtype=float))
        xy = self.origin3d[:2] + np.multiply.outer(s, self.direction)
        return np.column_stack([xy, h])

    def point(self, index: int) -> np.ndarray:
        return self.to_3d(self.P[index, 0], self.P[index, 1])[0]

    def segment(self, keep: np.ndarray, flip: bool = False) -> "PlanarCurve":
        """Sub-curve of the samples in ``keep``; ``flip`` reverses the direction."""
        P = self.P[keep]
        if not flip:
            return PlanarCurve(P, self.origin3d, self.direction)
        return PlanarCurve(np.column_stack([-P[::-1, 0], P[::-1, 1]]),
                           self.origin3d, -self.direction)


def in_plane_direction(normal_xy) -> np.ndarray:
    """Direction of travel inside the vertical plane with normal ``normal_xy``.

    For a normal along +x the curve runs downwards (-y), matching image-row order.
    """
    n = np.asarray(normal_xy, dtype=float)
    norm = np.linalg.norm(n)
    if norm == 0:
        raise GeometryError("plane normal must be nonzero")
    n = n / norm
    return np.array([n[1], -n[0]])


def plane_intersect(grid: DepthGrid, anchor, normal_xy, step: float | None = None) -> PlanarCurve:
    """Profile of the surface cut by the vertical plane through ``anchor``."""
    d = in_plane_direction(normal_xy)
    a = np.asarray(anchor, dtype=float)
    step = grid.resolution if step is None else step
    corners = np.array([[grid.x[0], grid.y[0]], [grid.x[-1], grid.y[0]],
                        [grid.x[0], grid.y[-1]], [grid.x[-1], grid.y[-1]]])
    proj = (corners - a[:2]) @ d
    k = np.arange(math.floor(proj.min() / step), math.ceil(proj.max() / step) + 1)
    s = k * step
    h, ok = grid.sample(a[0] + s * d[0], a[1] + s * d[1])
    if ok.sum() < 2:
        raise DegenerateError("plane cut has fewer than 2 valid samples")
    return PlanarCurve(np.column_stack([s[ok], h[ok]]), a, d)


def odd_window(length_mm: float, resolution: float) -> int:
    if length_mm <= 0:
        raise GeometryError("mask size must be positive")
    n = math.ceil(length_mm / resolution - 1e-9)
    return n if n % 2 == 1 else n + 1


def median_filter(grid: DepthGrid, mask_mm=(2.5, 2.5)) -> DepthGrid:
    """Median of the valid neighbours inside a ``mask_mm`` window.

    Only valid pixels are replaced; holes stay holes.
    """
    wx = odd_window(mask_mm[0], grid.resolution)
    wy = odd_window(mask_mm[1], grid.resolution)
    ny, nx = grid.shape
    if wx > nx or wy > ny:
        raise GeometryError(f"median window {wy}x{wx} px exceeds grid {ny}x{nx}")
    padded = np.pad(grid.z, ((wy // 2, wy // 2), (wx // 2, wx // 2)), constant_values=np.nan)
    windows = sliding_window_view(padded, (wy, wx))
    iy, ix = np.nonzero(grid.mask)
    out = np.full(grid.shape, np.nan)
    out[iy, ix] = np.nanmedian(windows[iy, ix].reshape(len(iy), -1), axis=1)
    return grid.with_depth(out)


def resample_to_grid(cloud: PointCloud, resolution_mm: float = 0.5, bounds=None) -> DepthGrid:
    """Piecewise-linear (Delaunay) interpolation of z over (x, y).

    Pixels outside the convex hull of the cloud are invalid. ``bounds`` is an
    optional ``(xmin, xmax, ymin, ymax)`` box; by default the cloud extent is
    snapped outwards to multiples of the resolution.
    """
    if resolution_mm <= 0:
        raise GeometryError("resolution must be positive")
    pts = cloud.valid_points
    if len(pts) < 3:
        raise EmptyInputError("need at least 3 valid points to triangulate")
    xy = pts[:, :2]
    centred = xy - xy.mean(axis=0)
    sv = np.linalg.svd(centred, compute_uv=False)
    if sv[1] <= 1e-9 * max(sv[0], 1e-300):
        raise DegenerateError("points are collinear in x/y; cannot triangulate")
    res = resolution_mm
    if bounds is None:
        bounds = (xy[:, 0].min(), xy[:, 0].max(), xy[:, 1].min(), xy[:, 1].max())
    # snap outwards; values already on a multiple stay put
    x0 = math.floor(bounds[0] / res + 1e-9) * res
    x1 = math.ceil(bounds[1] / res - 1e-9) * res
    y0 = math.floor(bounds[2] / res + 1e-9) * res
    y1 = math.ceil(bounds[3] / res - 1e-9) * res
    x = x0 + res * np.arange(int(round((x1 - x0) / res)) + 1)
    y = y0 + res * np.arange(int(round((y1 - y0) / res)) + 1)
    try:
        interp = LinearNDInterpolator(xy, pts[:, 2], fill_value=np.nan)
    except QhullError as exc:
        raise DegenerateError(f"triangulation failed: {exc}") from exc
    X, Y = np.meshgrid(x, y)
    z = interp(X, Y)
    return DepthGrid(x, y, z, np.isfinite(z))


class Alignment(NamedTuple):
    grid: DepthGrid
    pose: RigidPose
    converged: bool
    iterations: int


def lattice_triangles(grid: DepthGrid) -> np.ndarray:
    """Two triangles per grid cell whose four corners are valid, as indices
    into ``grid.points()``."""
    m = grid.mask
    idx = np.full(m.shape, -1)
    idx[m] = np.arange(int(m.sum()))
    q = m[:-1, :-1] & m[:-1, 1:] & m[1:, :-1] & m[1:, 1:]
    a, b = idx[:-1, :-1][q], idx[:-1, 1:][q]
    c, d = idx[1:, :-1][q], idx[1:, 1:][q]
    return np.concatenate([np.stack([a, b, d], axis=1), np.stack([a, d, c], axis=1)])


def _mesh_frame(pts: np.ndarray, tris: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """Principal frame of a triangulated height field.

    Moments are integrated over the x/y projection of each triangle (the
    density a uniform re-gridding in the current frame would give), using the
    edge-midpoint rule, which is exact for quadratics on a linear triangle.
    """
    v = pts[tris]
    e1 = v[:, 1, :2] - v[:, 0, :2]
    e2 = v[:, 2, :2] - v[:, 0, :2]
    area = 0.5 * np.abs(e1[:, 0] * e2[:, 1] - e1[:, 1] * e2[:, 0])
    mid = 0.5 * (v + v[:, [1, 2, 0]])
    total = area.sum()
    if total <= 0:
        raise DegenerateError("surface has no area to align")
    c = np.einsum("m,mkj->j", area, mid) / (3 * total)
    d = mid - c
    cov = np.einsum("m,mki,mkj->ij", area, d, d) / (3 * total)
    _, vecs = np.linalg.eigh(cov)
    z_axis, y_axis = vecs[:, 0], vecs[:, 2]
    # sign choices: y stays close to the current up direction; z is the side
    # the nose protrudes towards (positive third moment)
    if y_axis[1] < 0:
        y_axis = -y_axis
    if np.einsum("m,mk->", area, (d @ z_axis) ** 3) < 0:
        z_axis = -z_axis
    x_axis = np.cross(y_axis, z_axis)
    return np.vstack([x_axis, y_axis, z_axis]), c


def iterative_pca_align(grid: DepthGrid, max_iter: int = 10, tol_deg: float = 0.1) -> Alignment:
    """Rotate the surface onto its principal axes until the update is below ``tol_deg``.

    Least variance maps to +z, greatest to +y. Every iteration recomputes the
    axes of the surface under the composite pose, weighting it as a uniform
    grid in the current frame would; the moments are integrated exactly over
    the grid's cell triangulation instead of summed over re-gridded pixels,
    which keeps boundary pixelisation out of the axes. The grid is resampled
    once under the final pose. Without convergence the pose with the
    smallest pending update is returned.
    """
    if max_iter < 1:
        raise GeometryError("max_iter must be >= 1")
    pts = grid.points()
    tris = lattice_triangles(grid)
    if len(tris) == 0:
        raise DegenerateError("grid has no fully valid cell")
    total = RigidPose.identity()
    best, best_angle = total, np.inf
    converged = False
    it = 0
    for it in range(1, max_iter + 1):
        step = RigidPose.about_point(*_mesh_frame(total.apply(pts), tris))
        total = step.compose(total)
        if step.angle_deg < best_angle:
            best, best_angle = total, step.angle_deg
        if step.angle_deg < tol_deg:
            converged = True
            break
    out = grid if best.angle_deg == 0.0 else resample_to_grid(PointCloud(best.apply(pts)), grid.resolution)
    return Alignment(out, best, converged, it)


def estimate_tip(grid: DepthGrid, percentile: float = 98.0) -> np.ndarray:
    """Coarse nose tip: centroid of the high-depth blob around the deepest-forward pixel."""
    if grid.n_valid == 0:
        raise EmptyInputError("grid has no valid pixels")
    z = np.where(grid.mask, grid.z, -np.inf)
    iy, ix = np.unravel_index(np.argmax(z), z.shape)
    level = np.percentile(grid.z[grid.mask], percentile)
    labels, _ = ndimage.label(z >= level)
    blob = labels == labels[iy, ix]
    by, bx = np.nonzero(blob)
    cx, cy = grid.x[bx].mean(), grid.y[by].mean()
    cz, ok = grid.sample(cx, cy)
    if not ok:
        cx, cy, cz = grid.x[ix], grid.y[iy], grid.z[iy, ix]
    return np.array([cx, cy, float(cz)])


@dataclass(frozen=True)
class CropConfig:
    vertical_radius: float = 40.0
    upper_margin: float = 15.0
    lower_radius: float = 25.0
    default_root_offset: float = 40.0
    max_removed_fraction: float = 0.95


def crop_nose(grid: DepthGrid, tip_estimate, root_y: float | None = None,
              config: CropConfig = CropConfig()) -> DepthGrid:
    """Keep the pixels inside the three-cylinder nose volume.

    A vertical cylinder (axis along y) of ``vertical_radius`` around the tip,
    and two horizontal cylinders (axes along x) through the tip: the upper
    one reaches ``upper_margin`` above the root estimate, the lower one has
    ``lower_radius``.
    """
    tip = np.asarray(tip_estimate, dtype=float)
    if not (grid.x[0] <= tip[0] <= grid.x[-1] and grid.y[0] <= tip[1] <= grid.y[-1]):
        raise GeometryError("tip estimate lies outside the grid")
    if root_y is None:
        root_y = tip[1] + config.default_root_offset
    upper = max(root_y - tip[1], 0.0) + config.upper_margin
    X, Y, Z = grid.Nx, grid.Ny, grid.z
    dz = np.where(grid.mask, Z - tip[2], np.inf)
    keep = (X - tip[0]) ** 2 + dz ** 2 <= config.vertical_radius ** 2
    dy = Y - tip[1]
    r_h = np.where(dy >= 0, upper, config.lower_radius)
    keep &= dy ** 2 + dz ** 2 <= r_h ** 2
    keep &= grid.mask
    if keep.sum() < (1.0 - config.max_removed_fraction) * grid.n_valid:
        raise DegenerateError("nose crop removed more than "
                              f"{config.max_removed_fraction:.0%} of the valid pixels")
    return grid.subgrid(keep)


def roll_rotate(grid: DepthGrid, angle: float, pivot) -> DepthGrid:
    """Resample the surface rotated counter-clockwise by ``angle`` about ``pivot``.

    The output lattice is aligned so the pivot falls on a pixel centre.
    """
    pivot = np.asarray(pivot, dtype=float)
    res = grid.resolution
    pts = grid.points()
    moved = rotate_xy(pts, angle, pivot[:2])
    lo = np.floor((moved[:, :2].min(axis=0) - pivot[:2]) / res) * res + pivot[:2]
    hi = np.ceil((moved[:, :2].max(axis=0) - pivot[:2]) / res) * res + pivot[:2]
    x = lo[0] + res * np.arange(int(round((hi[0] - lo[0]) / res)) + 1)
    y = lo[1] + res * np.arange(int(round((hi[1] - lo[1]) / res)) + 1)
    X, Y = np.meshgrid(x, y)
    src = rotate_xy(np.stack([X, Y], axis=-1), -angle, pivot[:2])
    z, ok = grid.sample(src[..., 0], src[..., 1])
    return DepthGrid(x, y, z, ok)
