"""Cone-beam acquisition geometry and view-angle generation.

Conventions (fixed for the whole toolkit):

* The source rotates counter-clockwise about the volume z-axis; at angle 0
  the source sits on the -y axis, so its position at angle ``b`` (radians)
  is ``(SOD*sin b, -SOD*cos b, 0)``.
* The detector is flat, centred on the source-origin ray, at distance SDD
  from the source.  Column axis ``u = (cos b, sin b, 0)``, row axis
  ``v = (0, 0, 1)``.
* Angles are stored in degrees and converted to radians once, here.
"""

from __future__ import annotations

import enum
import math
from dataclasses import dataclass, field

import numpy as np

from .errors import EmptyScan, ParamError


class ScanKind(enum.Enum):
    FULL = "full"
    SHORT = "short"


@dataclass(frozen=True)
class FanAngle:
    """Full fan opening in the axial plane, degrees."""

    value_deg: float

    def __post_init__(self):
        if not 0.0 < self.value_deg < 90.0:
            raise ParamError(f"fan angle must lie in (0, 90) deg, got {self.value_deg}")


@dataclass(frozen=True)
class ConeBeamGeometry:
    """Complete description of one circular cone-beam acquisition."""

    source_object_dist_mm: float
    source_detector_dist_mm: float
    det_rows: int
    det_cols: int
    pixel_pitch_mm: float
    vol_dims: tuple[int, int, int]  # (nx, ny, nz)
    voxel_size_mm: float
    angles_deg: np.ndarray
    scan_kind: ScanKind

    def __post_init__(self):
        object.__setattr__(self, "angles_deg",
                           np.ascontiguousarray(self.angles_deg, dtype=np.float64))
        self.angles_deg.flags.writeable = False
        object.__setattr__(self, "vol_dims", tuple(int(n) for n in self.vol_dims))
        self._validate()

    def _validate(self):
        if not self.source_detector_dist_mm > self.source_object_dist_mm > 0:
            raise ParamError("require SDD > SOD > 0, got "
                             f"SDD={self.source_detector_dist_mm}, SOD={self.source_object_dist_mm}")
        if self.det_rows < 1 or self.det_cols < 1:
            raise ParamError("detector must have at least one row and one column")
        if len(self.vol_dims) != 3 or any(n < 1 for n in self.vol_dims):
            raise ParamError(f"bad volume dims {self.vol_dims}")
        if self.voxel_size_mm <= 0 or self.pixel_pitch_mm <= 0:
            raise ParamError("voxel size and pixel pitch must be positive")
        ang = self.angles_deg
        if ang.ndim != 1 or ang.size < 1:
            raise EmptyScan("angle list must hold at least one view")
        if ang.size > 1:
            if np.any(np.diff(ang) <= 0):
                raise ParamError("angles must be strictly increasing")
            arc = _nominal_arc_deg(ang)
            if self.scan_kind is ScanKind.FULL:
                if ang[-1] - ang[0] >= 360.0:
                    raise ParamError("full scan angles must span less than 360 deg")
            else:
                want = 180.0 + fan_angle(self).value_deg
                if abs(arc - want) > 1e-9:
                    raise ParamError(f"short scan must cover 180 deg + fan angle "
                                     f"({want:.9f} deg), angle list covers {arc:.9f} deg")
        _check_fov(self)

    # -- derived quantities ------------------------------------------------

    @property
    def n_views(self) -> int:
        return int(self.angles_deg.size)

    @property
    def angles_rad(self) -> np.ndarray:
        return np.deg2rad(self.angles_deg)

    def detector_u_mm(self) -> np.ndarray:
        """Physical column coordinates of pixel centres, centred on the axis."""
        c = np.arange(self.det_cols, dtype=np.float64)
        return (c - (self.det_cols - 1) / 2.0) * self.pixel_pitch_mm

    def detector_v_mm(self) -> np.ndarray:
        """Physical row coordinates of pixel centres."""
        r = np.arange(self.det_rows, dtype=np.float64)
        return (r - (self.det_rows - 1) / 2.0) * self.pixel_pitch_mm

    def to_dict(self) -> dict:
        return {
            "sod_mm": self.source_object_dist_mm,
            "sdd_mm": self.source_detector_dist_mm,
            "det_rows": self.det_rows,
            "det_cols": self.det_cols,
            "pixel_pitch_mm": self.pixel_pitch_mm,
            "vol_dims": list(self.vol_dims),
            "voxel_size_mm": self.voxel_size_mm,
            "angles_deg": [float(a) for a in self.angles_deg],
            "scan_kind": self.scan_kind.value,
        }

    @classmethod
    def from_dict(cls, d: dict) -> "ConeBeamGeometry":
        return cls(
            source_object_dist_mm=float(d["sod_mm"]),
            source_detector_dist_mm=float(d["sdd_mm"]),
            det_rows=int(d["det_rows"]),
            det_cols=int(d["det_cols"]),
            pixel_pitch_mm=float(d["pixel_pitch_mm"]),
            vol_dims=tuple(d["vol_dims"]),
            voxel_size_mm=float(d["voxel_size_mm"]),
            angles_deg=np.asarray(d["angles_deg"], dtype=np.float64),
            scan_kind=ScanKind(d["scan_kind"]),
        )


def fan_angle(geom: ConeBeamGeometry) -> FanAngle:
    """Full fan opening: 2*atan(half detector width / SDD)."""
    half_width = geom.det_cols * geom.pixel_pitch_mm / 2.0
    return FanAngle(math.degrees(2.0 * math.atan2(half_width, geom.source_detector_dist_mm)))


def make_angles(scan_kind: ScanKind, fan: FanAngle | None, n_views: int) -> np.ndarray:
    """Equispaced view angles in degrees, endpoint excluded.

    Full scan covers [0, 360); short scan covers [0, 180 + fan).
    """
    if n_views < 1:
        raise EmptyScan(f"n_views must be >= 1, got {n_views}")
    if scan_kind is ScanKind.FULL:
        span = 360.0
    else:
        if fan is None:
            raise ParamError("short scan needs a fan angle")
        span = 180.0 + fan.value_deg
    return np.arange(n_views, dtype=np.float64) * (span / n_views)


def magnification(geom: ConeBeamGeometry) -> float:
    return geom.source_detector_dist_mm / geom.source_object_dist_mm


def source_position(geom: ConeBeamGeometry, angle_rad: float) -> np.ndarray:
    sod = geom.source_object_dist_mm
    return np.array([sod * math.sin(angle_rad), -sod * math.cos(angle_rad), 0.0])


def _nominal_arc_deg(angles: np.ndarray) -> float:
    """Covered arc of an equispaced endpoint-excluded list: last-first+spacing."""
    spread = angles[-1] - angles[0]
    return spread + spread / (angles.size - 1)


def _check_fov(geom: ConeBeamGeometry):
    """Every corner of the volume must project inside the detector at every angle."""
    nx, ny, nz = geom.vol_dims
    hx = nx * geom.voxel_size_mm / 2.0
    hy = ny * geom.voxel_size_mm / 2.0
    hz = nz * geom.voxel_size_mm / 2.0
    corners = np.array([[sx * hx, sy * hy, sz * hz]
                        for sx in (-1, 1) for sy in (-1, 1) for sz in (-1, 1)])
    sod = geom.source_object_dist_mm
    sdd = geom.source_detector_dist_mm
    u_lim = geom.det_cols * geom.pixel_pitch_mm / 2.0
    v_lim = geom.det_rows * geom.pixel_pitch_mm / 2.0
    for b in geom.angles_rad:
        w_hat = np.array([-math.sin(b), math.cos(b), 0.0])  # central ray direction
        u_hat = np.array([math.cos(b), math.sin(b), 0.0])
        dist = sod + corners @ w_hat  # distance from source along the central ray
        if np.any(dist <= 0):
            raise ParamError("volume extends behind the source")
        u = (corners @ u_hat) * sdd / dist
        v = corners[:, 2] * sdd / dist
        if np.any(np.abs(u) > u_lim) or np.any(np.abs(v) > v_lim):
            raise ParamError("volume does not fit inside the scanned field of view "
                             f"(corner projects outside the detector at {math.degrees(b):.2f} deg)")
