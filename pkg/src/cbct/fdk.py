"""FDK filtered backprojection with Parker weighting for short scans.

The ramp filter uses the closed-form spatial Ram-Lak taps periodized onto
the padded circle: tap 0 is 1/4, even taps vanish, and odd tap m is
-1/(P^2 sin^2(pi m / P)) for padding length P.  The periodized taps sum to
exactly zero, so a flat row filters to zero; for |m| << P they agree with
the textbook -1/(pi^2 m^2) sequence.  Rows are padded by edge replication
before the circular convolution.
"""

from __future__ import annotations

import enum
import math
from dataclasses import dataclass

import numpy as np
from numba import njit, prange

from .errors import NotShortScan, ParamError, ShapeError
from .geometry import ConeBeamGeometry, ScanKind, fan_angle, magnification
from .projector import ProjectionSet, Volume, _full_restriction, _check_proj


class FilterKind(enum.Enum):
    RAMLAK = "ramlak"
    HANN = "hann"


@dataclass(frozen=True)
class FilterSpec:
    kind: FilterKind = FilterKind.RAMLAK
    padded_len: int = 0  # 0: choose smallest power of two >= 2*det_cols

    def resolve_len(self, det_cols: int) -> int:
        if self.padded_len:
            if self.padded_len < 2 * det_cols:
                raise ParamError(f"padded_len {self.padded_len} < 2*det_cols {2 * det_cols}")
            return self.padded_len
        return 1 << (2 * det_cols - 1).bit_length()


def ramlak_taps(padded_len: int) -> np.ndarray:
    """Periodized Ram-Lak tap sequence on the circle of length padded_len."""
    p = padded_len
    m = np.arange(p)
    taps = np.zeros(p, dtype=np.float64)
    taps[0] = 0.25
    odd = (m % 2) == 1
    taps[odd] = -1.0 / (p * np.sin(np.pi * m[odd] / p)) ** 2
    return taps


def ramp_filter(projs: ProjectionSet, spec: FilterSpec) -> ProjectionSet:
    """Convolve every detector row with the ramp kernel along the column axis."""
    n_views, n_rows, n_cols = projs.data.shape
    p = spec.resolve_len(n_cols)
    taps = ramlak_taps(p)
    h = np.fft.rfft(taps)
    if spec.kind is FilterKind.HANN:
        f = np.arange(h.size) / (h.size - 1)
        h = h * 0.5 * (1.0 + np.cos(np.pi * f))

    rows = projs.data.reshape(-1, n_cols)
    padded = np.empty((rows.shape[0], p), dtype=np.float64)
    padded[:, :n_cols] = rows
    # replicate edges around the circle so flat rows stay flat (zero response)
    right = (p - n_cols) // 2
    padded[:, n_cols:n_cols + right] = rows[:, -1:]
    padded[:, n_cols + right:] = rows[:, :1]
    out = np.fft.irfft(np.fft.rfft(padded, axis=1) * h, n=p, axis=1)[:, :n_cols]
    return ProjectionSet(out.reshape(n_views, n_rows, n_cols).astype(projs.data.dtype),
                         projs.angles_deg)


def parker_weight(beta, gamma, half_fan: float) -> np.ndarray:
    """Parker's weight for a ray at scan angle beta with fan coordinate gamma.

    Over the arc [0, pi + 2*half_fan] a ray (beta, gamma) and its conjugate
    (beta + pi - 2*gamma, -gamma) are both measured near the arc ends; the
    sin^2-feathered weights of the two copies sum to one, and rays measured
    once keep weight one.  All angles in radians.
    """
    beta = np.asarray(beta, dtype=np.float64)
    gamma = np.asarray(gamma, dtype=np.float64)
    eps = 1e-12
    up = 2.0 * (half_fan + gamma)  # end of the ramp-up region
    dn = math.pi + 2.0 * gamma  # start of the ramp-down region
    with np.errstate(divide="ignore", invalid="ignore"):
        wu = np.sin(0.25 * math.pi * beta / np.maximum(half_fan + gamma, eps)) ** 2
        wd = np.cos(0.25 * math.pi * (beta - dn) / np.maximum(half_fan - gamma, eps)) ** 2
    w = np.ones(np.broadcast(beta, gamma).shape, dtype=np.float64)
    w = np.where(beta < up, wu, w)
    w = np.where(beta > dn, wd, w)
    return np.clip(w, 0.0, 1.0)


def parker_weights(geom: ConeBeamGeometry) -> np.ndarray:
    """Short-scan redundancy weight grid, one entry per (view, column)."""
    if geom.scan_kind is not ScanKind.SHORT:
        raise NotShortScan("Parker weights are defined for short scans only")
    half_fan = math.radians(fan_angle(geom).value_deg) / 2.0
    beta = np.deg2rad(geom.angles_deg - geom.angles_deg[0])[:, None]
    gamma = np.arctan2(geom.detector_u_mm(), geom.source_detector_dist_mm)[None, :]
    return parker_weight(beta, gamma, half_fan)


@njit(cache=True, parallel=True, fastmath=False)
def _fdk_bp_kernel(filt, sin_b, cos_b, sod, du, dv, vs, scale, out):
    n_views, n_rows, n_cols = filt.shape
    nz, ny, nx = out.shape
    cx = (nx - 1) / 2.0
    cy = (ny - 1) / 2.0
    cz = (nz - 1) / 2.0
    rc = (n_rows - 1) / 2.0
    cc = (n_cols - 1) / 2.0
    for iz in prange(nz):
        z = (iz - cz) * vs
        for iy in range(ny):
            yy = (iy - cy) * vs
            for ix in range(nx):
                xx = (ix - cx) * vs
                acc = 0.0
                for iv in range(n_views):
                    sb = sin_b[iv]
                    cb = cos_b[iv]
                    dist = sod - xx * sb + yy * cb
                    ratio = sod / dist
                    fc = (xx * cb + yy * sb) * ratio / du + cc
                    fr = z * ratio / dv + rc
                    ic = int(math.floor(fc))
                    ir = int(math.floor(fr))
                    wc = fc - ic
                    wr = fr - ir
                    val = 0.0
                    if 0 <= ir < n_rows and 0 <= ic < n_cols:
                        val += filt[iv, ir, ic] * (1.0 - wr) * (1.0 - wc)
                    if 0 <= ir < n_rows and 0 <= ic + 1 < n_cols:
                        val += filt[iv, ir, ic + 1] * (1.0 - wr) * wc
                    if 0 <= ir + 1 < n_rows and 0 <= ic < n_cols:
                        val += filt[iv, ir + 1, ic] * wr * (1.0 - wc)
                    if 0 <= ir + 1 < n_rows and 0 <= ic + 1 < n_cols:
                        val += filt[iv, ir + 1, ic + 1] * wr * wc
                    acc += val * ratio * ratio
                out[iz, iy, ix] = acc * scale


def fdk_reconstruct(projs: ProjectionSet, geom: ConeBeamGeometry,
                    spec: FilterSpec | None = None) -> Volume:
    """Cosine weight, Parker weight (short scans), ramp filter, backproject."""
    _check_proj(projs, geom, _full_restriction(geom))
    if spec is None:
        spec = FilterSpec()
    sod = geom.source_object_dist_mm
    mag = magnification(geom)
    du = geom.pixel_pitch_mm / mag  # detector pitch rescaled to the isocenter plane
    u = geom.detector_u_mm()[None, :] / mag
    v = geom.detector_v_mm()[:, None] / mag
    cosw = sod / np.sqrt(sod * sod + u * u + v * v)

    weighted = projs.data.astype(np.float64) * cosw[None, :, :]
    if geom.scan_kind is ScanKind.SHORT:
        weighted *= parker_weights(geom)[:, None, :]
        redundancy = 1.0
    else:
        redundancy = 0.5

    filtered = ramp_filter(ProjectionSet(weighted, projs.angles_deg), spec).data / du

    ang = geom.angles_rad
    if ang.size > 1:
        spread = ang[-1] - ang[0]
        dbeta = spread / (ang.size - 1)
    else:
        dbeta = 2.0 * math.pi
    scale = dbeta * redundancy

    nx, ny, nz = geom.vol_dims
    out = np.zeros((nz, ny, nx), dtype=np.float64)
    _fdk_bp_kernel(np.ascontiguousarray(filtered), np.sin(ang), np.cos(ang),
                   sod, du, du, geom.voxel_size_mm, scale, out)
    return Volume(out.astype(projs.data.dtype), geom.voxel_size_mm)
