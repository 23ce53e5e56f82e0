"""Synthetic-scan generation: parametric phantoms with carved pores,
polychromatic photon-count projection, and variance-scaled Gaussian noise.

Counts follow Beer-Lambert per spectral bin; the noise model perturbs ideal
counts W by sqrt(W) * sigma * N(0,1), which matches the variance-to-mean
behaviour of photon counting.  All randomness comes from seeded Philox
(64-bit counter-based) generators so scans are bit-reproducible.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from .errors import ParamError, SpecError
from .geometry import ConeBeamGeometry
from .projector import ProjectionSet, Volume, forward_project

COUNT_FLOOR_FRACTION = 1e-6  # clamp counts at this fraction of I0 before the log


# ---------------------------------------------------------------------------
# phantom description
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class Sphere:
    center_mm: tuple[float, float, float]
    radius_mm: float
    mu: float

    def contains(self, x, y, z):
        cx, cy, cz = self.center_mm
        return (x - cx) ** 2 + (y - cy) ** 2 + (z - cz) ** 2 <= self.radius_mm ** 2

    def contains_sphere(self, center, radius):
        cx, cy, cz = self.center_mm
        d = math.dist(center, (cx, cy, cz))
        return d + radius < self.radius_mm


@dataclass(frozen=True)
class Cylinder:
    """Axis-aligned with z."""

    center_mm: tuple[float, float, float]
    radius_mm: float
    height_mm: float
    mu: float

    def contains(self, x, y, z):
        cx, cy, cz = self.center_mm
        radial = (x - cx) ** 2 + (y - cy) ** 2 <= self.radius_mm ** 2
        return radial & (np.abs(z - cz) <= self.height_mm / 2.0)

    def contains_sphere(self, center, radius):
        cx, cy, cz = self.center_mm
        d = math.hypot(center[0] - cx, center[1] - cy)
        return (d + radius < self.radius_mm
                and abs(center[2] - cz) + radius < self.height_mm / 2.0)


@dataclass(frozen=True)
class Box:
    center_mm: tuple[float, float, float]
    size_mm: tuple[float, float, float]
    mu: float

    def contains(self, x, y, z):
        cx, cy, cz = self.center_mm
        sx, sy, sz = self.size_mm
        return ((np.abs(x - cx) <= sx / 2.0) & (np.abs(y - cy) <= sy / 2.0)
                & (np.abs(z - cz) <= sz / 2.0))

    def contains_sphere(self, center, radius):
        cx, cy, cz = self.center_mm
        sx, sy, sz = self.size_mm
        return (abs(center[0] - cx) + radius < sx / 2.0
                and abs(center[1] - cy) + radius < sy / 2.0
                and abs(center[2] - cz) + radius < sz / 2.0)


Solid = Sphere | Cylinder | Box


@dataclass(frozen=True)
class Pore:
    center_mm: tuple[float, float, float]
    diameter_mm: float


@dataclass(frozen=True)
class PhantomSpec:
    """Body solids painted in order (later wins), then pores carved to mu=0."""

    body: tuple[Solid, ...]
    pores: tuple[Pore, ...] = ()
    rng_seed: int = 0

    def __post_init__(self):
        object.__setattr__(self, "body", tuple(self.body))
        object.__setattr__(self, "pores", tuple(self.pores))
        for pore in self.pores:
            if pore.diameter_mm <= 0:
                raise SpecError(f"pore diameter must be positive, got {pore.diameter_mm}")
            r = pore.diameter_mm / 2.0
            if not any(s.contains_sphere(pore.center_mm, r) for s in self.body):
                raise SpecError(f"pore at {pore.center_mm} is not strictly inside the body")
        for i in range(len(self.pores)):
            for j in range(i + 1, len(self.pores)):
                a, b = self.pores[i], self.pores[j]
                if math.dist(a.center_mm, b.center_mm) < (a.diameter_mm + b.diameter_mm) / 2.0:
                    raise SpecError(f"pores {i} and {j} overlap")


@dataclass(frozen=True)
class GroundTruthPore:
    """One carved pore: center in (x, y, z) voxel coordinates, true diameter in mm."""

    center_vox: tuple[float, float, float]
    diameter_mm: float


def _voxel_axes(dims, voxel_size):
    nx, ny, nz = dims
    ax = (np.arange(nx) - (nx - 1) / 2.0) * voxel_size
    ay = (np.arange(ny) - (ny - 1) / 2.0) * voxel_size
    az = (np.arange(nz) - (nz - 1) / 2.0) * voxel_size
    return ax, ay, az


def build_phantom(spec: PhantomSpec, dims: tuple[int, int, int],
                  voxel_size: float) -> tuple[Volume, list[GroundTruthPore]]:
    """Voxelize the spec on the centred grid; returns the volume and pore list."""
    nx, ny, nz = dims
    ax, ay, az = _voxel_axes(dims, voxel_size)
    X = ax[None, None, :]
    Y = ay[None, :, None]
    Z = az[:, None, None]
    data = np.zeros((nz, ny, nx), dtype=np.float64)
    for solid in spec.body:
        mask = solid.contains(X, Y, Z)
        data[mask] = solid.mu
    defects = []
    for pore in spec.pores:
        sphere = Sphere(pore.center_mm, pore.diameter_mm / 2.0, 0.0)
        data[sphere.contains(X, Y, Z)] = 0.0
        center_vox = tuple(c / voxel_size + (n - 1) / 2.0
                           for c, n in zip(pore.center_mm, (nx, ny, nz)))
        defects.append(GroundTruthPore(center_vox, pore.diameter_mm))
    return Volume(data, voxel_size), defects


def random_pores(body: tuple[Solid, ...], n_pores: int,
                 diameter_range_mm: tuple[float, float], seed: int,
                 separation_mm: float = 0.0, max_tries: int = 100000) -> tuple[Pore, ...]:
    """Seeded rejection sampling of non-overlapping pores inside the body.

    Each pore keeps at least one pore radius of material between itself and
    the body wall; `separation_mm` adds a minimum surface-to-surface gap
    between pores so detected components stay distinct.
    """
    if n_pores < 1:
        return ()
    lo, hi = diameter_range_mm
    if not 0 < lo <= hi:
        raise ParamError(f"bad diameter range {diameter_range_mm}")
    bounds = _body_bounds(body)
    rng = np.random.Generator(np.random.Philox(seed))
    pores: list[Pore] = []
    for _ in range(max_tries):
        if len(pores) == n_pores:
            break
        d = rng.uniform(lo, hi)
        r = d / 2.0
        c = tuple(rng.uniform(lo_b, hi_b) for lo_b, hi_b in bounds)
        # one pore radius of wall clearance: center at least 2r inside
        if not any(s.contains_sphere(c, 2.0 * r) for s in body):
            continue
        ok = all(math.dist(c, p.center_mm) >= r + p.diameter_mm / 2.0 + separation_mm
                 for p in pores)
        if ok:
            pores.append(Pore(c, d))
    if len(pores) < n_pores:
        raise SpecError(f"could only place {len(pores)} of {n_pores} pores")
    return tuple(pores)


def _body_bounds(body):
    los = [math.inf] * 3
    his = [-math.inf] * 3
    for s in body:
        c = s.center_mm
        if isinstance(s, Sphere):
            ext = (s.radius_mm,) * 3
        elif isinstance(s, Cylinder):
            ext = (s.radius_mm, s.radius_mm, s.height_mm / 2.0)
        else:
            ext = tuple(v / 2.0 for v in s.size_mm)
        for k in range(3):
            los[k] = min(los[k], c[k] - ext[k])
            his[k] = max(his[k], c[k] + ext[k])
    if not all(math.isfinite(v) for v in los + his):
        raise SpecError("cannot place pores in an empty body")
    return list(zip(los, his))


# ---------------------------------------------------------------------------
# spectrum and photon counts
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class Spectrum:
    """Discrete source spectrum: (weight, attenuation multiplier) per bin.

    Multipliers scale the reference attenuation map; they must decrease with
    bin index (higher-energy bins attenuate less), which is what produces
    beam hardening for multi-bin spectra.
    """

    bins: tuple[tuple[float, float], ...]

    def __post_init__(self):
        object.__setattr__(self, "bins", tuple((float(w), float(s)) for w, s in self.bins))
        if not self.bins:
            raise ParamError("spectrum needs at least one bin")
        weights = [w for w, _ in self.bins]
        scales = [s for _, s in self.bins]
        if any(w < 0 for w in weights):
            raise ParamError("bin weights must be nonnegative")
        if abs(sum(weights) - 1.0) > 1e-12:
            raise ParamError(f"bin weights must sum to 1, got {sum(weights)}")
        if any(s <= 0 for s in scales):
            raise ParamError("attenuation multipliers must be positive")
        for a, b in zip(scales, scales[1:]):
            if b >= a:
                raise ParamError("attenuation multipliers must strictly decrease")

    @classmethod
    def mono(cls) -> "Spectrum":
        return cls(((1.0, 1.0),))

    @property
    def is_mono(self) -> bool:
        return len(self.bins) == 1 and self.bins[0][1] == 1.0


DEFAULT_BH_SPECTRUM = Spectrum(((0.3, 2.0), (0.4, 1.0), (0.3, 0.4)))


@dataclass
class PhotonCounts:
    """Detected intensity per pixel, same layout as a ProjectionSet."""

    data: np.ndarray
    i0: float
    angles_deg: np.ndarray


def project_counts(phantom: Volume, geom: ConeBeamGeometry, spectrum: Spectrum,
                   i0: float) -> PhotonCounts:
    """Ideal (noiseless) counts: I0 * sum_b w_b * exp(-s_b * path)."""
    if i0 <= 0:
        raise ParamError(f"I0 must be positive, got {i0}")
    path = forward_project(phantom, geom).data
    counts = np.zeros_like(path)
    for w, s in spectrum.bins:
        counts += w * np.exp(-s * path)
    return PhotonCounts(counts * i0, i0, geom.angles_deg)


def add_noise(counts: PhotonCounts, sigma: float, seed: int) -> PhotonCounts:
    """W + sqrt(W) * sigma * N(0,1), clamped below at the count floor."""
    if sigma < 0:
        raise ParamError(f"noise level must be >= 0, got {sigma}")
    if sigma == 0.0:
        return PhotonCounts(counts.data.copy(), counts.i0, counts.angles_deg)
    rng = np.random.Generator(np.random.Philox(seed))
    noisy = counts.data + np.sqrt(counts.data) * sigma * rng.standard_normal(counts.data.shape)
    floor = COUNT_FLOOR_FRACTION * counts.i0
    return PhotonCounts(np.maximum(noisy, floor), counts.i0, counts.angles_deg)


def log_normalize(counts: PhotonCounts) -> ProjectionSet:
    """Line integrals y = -ln(max(W, floor) / I0)."""
    floor = COUNT_FLOOR_FRACTION * counts.i0
    y = -np.log(np.maximum(counts.data, floor) / counts.i0)
    return ProjectionSet(y, counts.angles_deg)


# ---------------------------------------------------------------------------
# full scans
# ---------------------------------------------------------------------------

@dataclass
class SimulatedScan:
    projections: ProjectionSet
    phantom: Volume
    defects: list[GroundTruthPore]


def simulate_scan(spec: PhantomSpec, geom: ConeBeamGeometry, spectrum: Spectrum,
                  sigma: float, i0: float, seed: int) -> SimulatedScan:
    """Phantom -> counts -> noise -> log-normalized projections."""
    phantom, defects = build_phantom(spec, geom.vol_dims, geom.voxel_size_mm)
    counts = add_noise(project_counts(phantom, geom, spectrum, i0), sigma, seed)
    return SimulatedScan(log_normalize(counts), phantom, defects)


@dataclass
class ScanPair:
    """Degraded input scan and its clean dense reference of the same phantom."""

    input_projs: ProjectionSet
    reference_projs: ProjectionSet
    phantom: Volume
    defects: list[GroundTruthPore]


def simulate_pair(spec: PhantomSpec, input_geom: ConeBeamGeometry,
                  reference_geom: ConeBeamGeometry, spectrum: Spectrum,
                  sigma: float, i0: float, seed: int) -> ScanPair:
    """Input scan (sparse/noisy/polychromatic) plus noiseless monochromatic
    dense reference of the same phantom."""
    phantom, defects = build_phantom(spec, input_geom.vol_dims, input_geom.voxel_size_mm)
    noisy = add_noise(project_counts(phantom, input_geom, spectrum, i0), sigma, seed)
    clean = project_counts(phantom, reference_geom, Spectrum.mono(), i0)
    return ScanPair(log_normalize(noisy), log_normalize(clean), phantom, defects)
