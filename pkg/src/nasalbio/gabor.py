"""Multi-scale Gabor magnitude maps and their surface normals.

Filters are built directly in the frequency domain following the
Manjunath-Ma design: centre frequencies are spaced geometrically between the
lower and upper bound and the radial/angular bandwidths are chosen so that
neighbouring filters touch at half peak. Normalised frequency 1 is the
Nyquist frequency (0.5 cycles per pixel).
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from functools import lru_cache

import numpy as np
from scipy import ndimage

from .geometry import DepthGrid

LN2 = math.log(2.0)


@dataclass(frozen=True)
class BankDesign:
    """Closed-form parameters of the bank, in cycles per pixel."""

    centers: np.ndarray     # (s_m,)
    sigma_u: np.ndarray     # (s_m,) radial std of each scale
    sigma_v: np.ndarray     # (s_m,) angular std of each scale
    orientations: np.ndarray  # (o_m,)
    ratio: float


def design_bank(s_m: int, o_m: int, omega_low: float, omega_high: float) -> BankDesign:
    if s_m < 1 or o_m < 1:
        raise ValueError("scale and orientation counts must be >= 1")
    if not 0 < omega_low < omega_high <= 1:
        raise ValueError("need 0 < omega_low < omega_high <= 1")
    ul, uh = omega_low / 2.0, omega_high / 2.0
    a = (uh / ul) ** (1.0 / (s_m - 1)) if s_m > 1 else uh / ul
    su = (a - 1.0) * uh / ((a + 1.0) * math.sqrt(2 * LN2))
    sv = (math.tan(math.pi / (2 * o_m)) * (uh - 2 * LN2 * su ** 2 / uh)
          / math.sqrt(2 * LN2 - (2 * LN2) ** 2 * su ** 2 / uh ** 2))
    centers = ul * a ** np.arange(s_m) if s_m > 1 else np.array([uh])
    scale = centers / uh
    return BankDesign(centers, su * scale, sv * scale, np.arange(o_m) * math.pi / o_m, float(a))


@dataclass(frozen=True)
class GaborBank:
    filters: np.ndarray     # (s_m, o_m, ny, nx) real frequency responses
    design: BankDesign
    omega_low: float
    omega_high: float

    @property
    def grid_dims(self) -> tuple[int, int]:
        return self.filters.shape[2:]

    @property
    def s_m(self) -> int:
        return self.filters.shape[0]

    @property
    def o_m(self) -> int:
        return self.filters.shape[1]

    def envelope_radius(self) -> np.ndarray:
        """Spatial standard deviation (pixels) of each scale's widest lobe."""
        d = self.design
        return 1.0 / (2 * np.pi * np.minimum(d.sigma_u, d.sigma_v))

    def spatial_kernels(self) -> np.ndarray:
        """Complex impulse responses, centred on the origin pixel (wrap-around)."""
        return np.fft.ifft2(self.filters, axes=(-2, -1))


@lru_cache(maxsize=32)
def _cached_bank(dims, s_m, o_m, omega_low, omega_high):
    return _make_bank(dims, s_m, o_m, omega_low, omega_high)


def _make_bank(dims, s_m, o_m, omega_low, omega_high) -> GaborBank:
    ny, nx = dims
    d = design_bank(s_m, o_m, omega_low, omega_high)
    v = np.fft.fftfreq(ny)[:, None]
    u = np.fft.fftfreq(nx)[None, :]
    filters = np.empty((s_m, o_m, ny, nx))
    for s in range(s_m):
        for o, th in enumerate(d.orientations):
            ur = u * math.cos(th) + v * math.sin(th)
            vr = -u * math.sin(th) + v * math.cos(th)
            g = np.exp(-0.5 * ((ur - d.centers[s]) ** 2 / d.sigma_u[s] ** 2
                               + vr ** 2 / d.sigma_v[s] ** 2))
            g[0, 0] = 0.0
            filters[s, o] = g
    filters.setflags(write=False)
    return GaborBank(filters, d, omega_low, omega_high)


def build_bank(dims, s_m: int = 4, o_m: int = 4, omega_low: float = 0.05,
               omega_high: float = 0.7) -> GaborBank:
    dims = (int(dims[0]), int(dims[1]))
    if dims[0] < 2 or dims[1] < 2:
        raise ValueError("bank dimensions must be at least 2x2")
    return _cached_bank(dims, int(s_m), int(o_m), float(omega_low), float(omega_high))


def prepare_depth(z: np.ndarray, mask: np.ndarray) -> np.ndarray:
    """Subtract the valid-region mean and zero-fill invalid pixels."""
    out = np.zeros(z.shape)
    if mask.any():
        out[mask] = z[mask] - z[mask].mean()
    return out


def filter_responses(z: np.ndarray, bank: GaborBank) -> np.ndarray:
    """Complex responses, shape (s_m, o_m, ny, nx)."""
    if z.shape != bank.grid_dims:
        raise ValueError(f"depth map {z.shape} does not match bank {bank.grid_dims}")
    spec = np.fft.fft2(z)
    return np.fft.ifft2(spec[None, None] * bank.filters, axes=(-2, -1))


def filter_scale_max(z: np.ndarray, bank: GaborBank) -> np.ndarray:
    """Per-scale maximum over orientations of the response modulus, (s_m, ny, nx)."""
    return np.abs(filter_responses(z, bank)).max(axis=1)


def scale_normals(x: np.ndarray, y: np.ndarray, ngm: np.ndarray) -> np.ndarray:
    """Unit normals of the graphs ``(x, y, ngm[s])``; returns (s, 3, ny, nx).

    Central differences in physical units, one-sided at the border.
    """
    ngm = np.asarray(ngm, dtype=float)
    squeeze = ngm.ndim == 2
    if squeeze:
        ngm = ngm[None]
    out = np.empty((ngm.shape[0], 3) + ngm.shape[1:])
    for s, m in enumerate(ngm):
        gy, gx = np.gradient(m, y, x)
        norm = np.sqrt(gx * gx + gy * gy + 1.0)
        out[s, 0] = -gx / norm
        out[s, 1] = -gy / norm
        out[s, 2] = 1.0 / norm
    return out[0] if squeeze else out


@dataclass(frozen=True)
class GaborNormalStack:
    ngm: np.ndarray         # (s_m, ny, nx)
    normals: np.ndarray     # (s_m, 3, ny, nx)
    valid: np.ndarray       # (ny, nx) surface validity
    confident: np.ndarray   # (s_m, ny, nx) pixels far enough from holes and borders

    @property
    def n_scales(self) -> int:
        return self.ngm.shape[0]


def confidence_masks(mask: np.ndarray, radii_px) -> np.ndarray:
    """Valid pixels farther than each radius from any invalid pixel or the border."""
    padded = np.pad(mask, 1, constant_values=False)
    dist = ndimage.distance_transform_edt(padded)[1:-1, 1:-1]
    return np.stack([mask & (dist > r) for r in radii_px])


def gabor_normal_stack(grid: DepthGrid, s_m: int = 4, o_m: int = 4, omega_low: float = 0.05,
                       omega_high: float = 0.7, confidence_factor: float = 1.0) -> GaborNormalStack:
    bank = build_bank(grid.shape, s_m, o_m, omega_low, omega_high)
    ngm = filter_scale_max(prepare_depth(grid.z, grid.mask), bank)
    normals = scale_normals(grid.x, grid.y, ngm)
    confident = confidence_masks(grid.mask, confidence_factor * bank.envelope_radius())
    return GaborNormalStack(ngm, normals, grid.mask.copy(), confident)
