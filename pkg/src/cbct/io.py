"""File formats and run configuration.

Volumes and projection sets are stored as raw little-endian payloads with a
strict JSON sidecar header (`<file>` + `<file>.json`); prior checkpoints are
a single binary with an embedded JSON header followed by the raw tensors in
declaration order.  All writes go through a temp file plus rename.
"""

from __future__ import annotations

import hashlib
import json
import os
import tempfile
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .errors import FormatError
from .fdk import FilterKind, FilterSpec
from .geometry import ConeBeamGeometry, ScanKind, fan_angle, make_angles
from .pnp import PnPConfig
from .projector import ProjectionSet, Volume
from .simulator import (Box, Cylinder, GroundTruthPore, PhantomSpec, Pore,
                        Sphere, Spectrum, DEFAULT_BH_SPECTRUM, random_pores)
from .training import EpochLog, TrainConfig
from .unet import PriorArchitecture, PriorParams, tensor_shapes

_DTYPES = {"f32le": np.dtype("<f4"), "f64le": np.dtype("<f8")}
_CHECKPOINT_MAGIC = b"CBPR"


def _dtype_name(arr: np.ndarray) -> str:
    if arr.dtype == np.float32:
        return "f32le"
    if arr.dtype == np.float64:
        return "f64le"
    raise FormatError(f"unsupported dtype {arr.dtype}")


def atomic_write_bytes(path: Path | str, payload: bytes):
    path = Path(path)
    fd, tmp = tempfile.mkstemp(dir=path.parent, prefix=path.name + ".tmp")
    try:
        with os.fdopen(fd, "wb") as f:
            f.write(payload)
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise


def atomic_write_json(path: Path | str, obj):
    atomic_write_bytes(path, (json.dumps(obj, indent=2, sort_keys=True) + "\n").encode())


def _load_header(path: Path, required: set[str]) -> dict:
    header_path = Path(str(path) + ".json")
    if not header_path.exists():
        raise FormatError(f"missing sidecar header {header_path}")
    try:
        header = json.loads(header_path.read_text())
    except json.JSONDecodeError as e:
        raise FormatError(f"unparseable header {header_path}: {e}") from e
    unknown = set(header) - required
    if unknown:
        raise FormatError(f"unknown header keys {sorted(unknown)} in {header_path}")
    missing = required - set(header)
    if missing:
        raise FormatError(f"missing header keys {sorted(missing)} in {header_path}")
    return header


def _check_payload(path: Path, n_values: int, dtype: np.dtype) -> np.ndarray:
    expected = n_values * dtype.itemsize
    actual = path.stat().st_size
    if actual != expected:
        raise FormatError(f"{path}: payload holds {actual} bytes, expected {expected}")
    return np.fromfile(path, dtype=dtype)


# ---------------------------------------------------------------------------
# volume / projection files
# ---------------------------------------------------------------------------

def write_volume(path: Path | str, vol: Volume):
    path = Path(path)
    header = {
        "dims": list(vol.dims),  # (nx, ny, nz)
        "voxel_size_mm": vol.voxel_size_mm,
        "dtype": _dtype_name(vol.data),
        "order": "zyx",
    }
    atomic_write_bytes(path, np.ascontiguousarray(vol.data).astype(
        vol.data.dtype.newbyteorder("<")).tobytes())
    atomic_write_json(Path(str(path) + ".json"), header)


def read_volume(path: Path | str) -> Volume:
    path = Path(path)
    header = _load_header(path, {"dims", "voxel_size_mm", "dtype", "order"})
    if header["order"] != "zyx":
        raise FormatError(f"unsupported layout {header['order']!r}")
    if header["dtype"] not in _DTYPES:
        raise FormatError(f"unknown dtype {header['dtype']!r}")
    nx, ny, nz = (int(v) for v in header["dims"])
    data = _check_payload(path, nx * ny * nz, _DTYPES[header["dtype"]])
    return Volume(data.reshape(nz, ny, nx).astype(data.dtype.newbyteorder("=")),
                  float(header["voxel_size_mm"]))


def write_projections(path: Path | str, projs: ProjectionSet, geom: ConeBeamGeometry):
    path = Path(path)
    header = {
        "n_views": projs.n_views,
        "det_rows": projs.det_rows,
        "det_cols": projs.det_cols,
        "angles_deg": [float(a) for a in projs.angles_deg],
        "geometry": geom.to_dict(),
        "dtype": _dtype_name(projs.data),
        "scan_kind": geom.scan_kind.value,
    }
    atomic_write_bytes(path, np.ascontiguousarray(projs.data).astype(
        projs.data.dtype.newbyteorder("<")).tobytes())
    atomic_write_json(Path(str(path) + ".json"), header)


def read_projections(path: Path | str) -> tuple[ProjectionSet, ConeBeamGeometry]:
    path = Path(path)
    header = _load_header(path, {"n_views", "det_rows", "det_cols", "angles_deg",
                                 "geometry", "dtype", "scan_kind"})
    if header["dtype"] not in _DTYPES:
        raise FormatError(f"unknown dtype {header['dtype']!r}")
    n_views = int(header["n_views"])
    rows = int(header["det_rows"])
    cols = int(header["det_cols"])
    angles = np.asarray(header["angles_deg"], dtype=np.float64)
    if angles.size != n_views:
        raise FormatError(f"{path}: {angles.size} angles for {n_views} views")
    data = _check_payload(path, n_views * rows * cols, _DTYPES[header["dtype"]])
    geom = ConeBeamGeometry.from_dict(header["geometry"])
    return (ProjectionSet(data.reshape(n_views, rows, cols)
                          .astype(data.dtype.newbyteorder("=")), angles), geom)


# ---------------------------------------------------------------------------
# prior checkpoints and training logs
# ---------------------------------------------------------------------------

def save_prior(path: Path | str, params: PriorParams, meta: dict | None = None):
    """Versioned checkpoint: magic, header length, JSON header, raw tensors."""
    arch = params.arch
    dtype = next(iter(params.tensors.values())).dtype
    header = {
        "schema_version": 1,
        "levels": arch.levels,
        "base_features": arch.base_features,
        "half_width": arch.half_width,
        "dtype": "f32le" if dtype == np.float32 else "f64le",
        "tensors": [[name, list(t.shape)] for name, t in params.tensors.items()],
    }
    header.update(meta or {})
    blob = json.dumps(header, sort_keys=True).encode()
    parts = [_CHECKPOINT_MAGIC, len(blob).to_bytes(4, "little"), blob]
    for t in params.tensors.values():
        parts.append(np.ascontiguousarray(t).astype(t.dtype.newbyteorder("<")).tobytes())
    atomic_write_bytes(path, b"".join(parts))


def load_prior(path: Path | str) -> tuple[PriorParams, dict]:
    raw = Path(path).read_bytes()
    if raw[:4] != _CHECKPOINT_MAGIC:
        raise FormatError(f"{path}: not a prior checkpoint")
    n = int.from_bytes(raw[4:8], "little")
    header = json.loads(raw[8:8 + n].decode())
    if header.get("schema_version") != 1:
        raise FormatError(f"{path}: unsupported checkpoint version")
    arch = PriorArchitecture(header["levels"], header["base_features"], header["half_width"])
    dtype = _DTYPES[header["dtype"]]
    expected = tensor_shapes(arch)
    tensors = {}
    off = 8 + n
    for name, shape in header["tensors"]:
        shape = tuple(shape)
        if name not in expected or expected[name] != shape:
            raise FormatError(f"{path}: unexpected tensor {name} {shape}")
        count = int(np.prod(shape))
        nbytes = count * dtype.itemsize
        chunk = raw[off:off + nbytes]
        if len(chunk) != nbytes:
            raise FormatError(f"{path}: payload truncated at tensor {name}")
        tensors[name] = np.frombuffer(chunk, dtype=dtype).reshape(shape) \
            .astype(dtype.newbyteorder("="))
        off += nbytes
    if off != len(raw):
        raise FormatError(f"{path}: {len(raw) - off} trailing bytes")
    if list(tensors) != list(expected):
        raise FormatError(f"{path}: tensors out of declaration order")
    meta = {k: v for k, v in header.items()
            if k not in {"schema_version", "levels", "base_features", "half_width",
                         "dtype", "tensors"}}
    return PriorParams(arch, tensors), meta


def write_train_log(path: Path | str, log: list[EpochLog]):
    lines = ["epoch,train_loss,val_nrmse,lr"]
    lines += [f"{e.epoch},{e.train_loss:.10g},{e.val_nrmse:.10g},{e.lr:.10g}" for e in log]
    atomic_write_bytes(path, ("\n".join(lines) + "\n").encode())


# ---------------------------------------------------------------------------
# ground truth and reports
# ---------------------------------------------------------------------------

def write_ground_truth(path: Path | str, pores: list[GroundTruthPore], voxel_size_mm: float):
    atomic_write_json(path, {
        "schema_version": 1,
        "voxel_size_mm": voxel_size_mm,
        "pores": [{"center_vox": list(p.center_vox), "diameter_mm": p.diameter_mm}
                  for p in pores],
    })


def read_ground_truth(path: Path | str) -> tuple[list[GroundTruthPore], float]:
    doc = json.loads(Path(path).read_text())
    if doc.get("schema_version") != 1:
        raise FormatError(f"{path}: unsupported ground-truth version")
    pores = [GroundTruthPore(tuple(p["center_vox"]), float(p["diameter_mm"]))
             for p in doc["pores"]]
    return pores, float(doc["voxel_size_mm"])


def write_slice_pgm(path: Path | str, vol: Volume, z: int):
    """16-bit min-max windowed PGM of one axial slice, window in a sidecar."""
    nz = vol.data.shape[0]
    if not 0 <= z < nz:
        raise FormatError(f"slice {z} outside volume with {nz} slices")
    img = vol.data[z]
    lo, hi = float(img.min()), float(img.max())
    scale = 65535.0 / (hi - lo) if hi > lo else 0.0
    pix = np.round((img - lo) * scale).astype(">u2")  # PGM 16-bit is big-endian
    header = f"P5\n{img.shape[1]} {img.shape[0]}\n65535\n".encode()
    atomic_write_bytes(path, header + pix.tobytes())
    atomic_write_json(Path(str(path) + ".json"),
                      {"z": z, "window_lo": lo, "window_hi": hi})


def sha256_file(path: Path | str) -> str:
    h = hashlib.sha256()
    h.update(Path(path).read_bytes())
    return h.hexdigest()


def write_manifest(path: Path | str, resolved_config: dict, artifacts: dict[str, Path | str]):
    atomic_write_json(path, {
        "schema_version": 1,
        "config": resolved_config,
        "artifacts": {name: {"path": str(p), "sha256": sha256_file(p)}
                      for name, p in sorted(artifacts.items())},
    })


# ---------------------------------------------------------------------------
# run configuration
# ---------------------------------------------------------------------------

_SOLID_KINDS = {"sphere", "cylinder", "box"}


@dataclass
class RunConfig:
    """Validated configuration document with all defaults resolved."""

    geometry: dict
    phantom: dict
    spectrum: dict
    noise: dict
    fdk: dict
    pnp: dict
    prior: dict
    training: dict

    def to_dict(self) -> dict:
        return {k: getattr(self, k) for k in
                ("geometry", "phantom", "spectrum", "noise", "fdk", "pnp",
                 "prior", "training")}


_DEFAULTS = {
    "geometry": {
        "sod_mm": 50.0, "sdd_mm": 100.0,
        "det_rows": 64, "det_cols": 64, "pixel_pitch_mm": 0.75,
        "vol_dims": [64, 64, 64], "voxel_size_mm": 0.2,
        "input_views": 36, "input_scan": "short",
        "reference_views": 360, "reference_scan": "full",
    },
    "phantom": {"body": [], "pores": [], "random_pores": None, "seed": 0},
    "spectrum": {"bins": [list(b) for b in DEFAULT_BH_SPECTRUM.bins]},
    "noise": {"sigma": 1.0, "seed": 0, "i0": 1e5},
    "fdk": {"window": "ramlak", "padded_len": 0},
    "pnp": {"iterations": 3, "cg_steps": 10, "beta_grid": None,
            "half_rows": 4, "selection_cg_steps": 5},
    "prior": {"levels": 2, "base_features": 8, "half_width": 2},
    "training": {"epochs": 200, "lr": 1e-3, "patience": 10, "factor": 2.0,
                 "patch": [5, 256, 256], "stride": None, "split": 0.8,
                 "batch": 16, "seed": 0, "precision": "f64"},
}


def load_run_config(source: dict | str | Path) -> RunConfig:
    if not isinstance(source, dict):
        try:
            source = json.loads(Path(source).read_text())
        except json.JSONDecodeError as e:
            raise FormatError(f"unparseable config: {e}") from e
    unknown = set(source) - set(_DEFAULTS)
    if unknown:
        raise FormatError(f"unknown config sections {sorted(unknown)}")
    resolved = {}
    for section, defaults in _DEFAULTS.items():
        given = source.get(section, {})
        if not isinstance(given, dict):
            raise FormatError(f"config section {section!r} must be an object")
        bad = set(given) - set(defaults)
        if bad:
            raise FormatError(f"unknown keys {sorted(bad)} in config section {section!r}")
        merged = dict(defaults)
        merged.update(given)
        resolved[section] = merged
    return RunConfig(**resolved)


def _scan_kind(name: str) -> ScanKind:
    try:
        return ScanKind(name)
    except ValueError:
        raise FormatError(f"scan kind must be 'full' or 'short', got {name!r}") from None


def _build_geometry(g: dict, n_views: int, kind: ScanKind) -> ConeBeamGeometry:
    probe = ConeBeamGeometry(
        g["sod_mm"], g["sdd_mm"], g["det_rows"], g["det_cols"], g["pixel_pitch_mm"],
        tuple(g["vol_dims"]), g["voxel_size_mm"], np.array([0.0]), ScanKind.FULL)
    angles = make_angles(kind, fan_angle(probe), n_views)
    return ConeBeamGeometry(
        g["sod_mm"], g["sdd_mm"], g["det_rows"], g["det_cols"], g["pixel_pitch_mm"],
        tuple(g["vol_dims"]), g["voxel_size_mm"], angles, kind)


def input_geometry(cfg: RunConfig) -> ConeBeamGeometry:
    g = cfg.geometry
    return _build_geometry(g, int(g["input_views"]), _scan_kind(g["input_scan"]))


def reference_geometry(cfg: RunConfig) -> ConeBeamGeometry:
    g = cfg.geometry
    return _build_geometry(g, int(g["reference_views"]), _scan_kind(g["reference_scan"]))


def _parse_solid(d: dict):
    kind = d.get("kind")
    if kind not in _SOLID_KINDS:
        raise FormatError(f"solid kind must be one of {sorted(_SOLID_KINDS)}, got {kind!r}")
    center = tuple(float(v) for v in d["center_mm"])
    mu = float(d["mu"])
    if kind == "sphere":
        return Sphere(center, float(d["radius_mm"]), mu)
    if kind == "cylinder":
        return Cylinder(center, float(d["radius_mm"]), float(d["height_mm"]), mu)
    return Box(center, tuple(float(v) for v in d["size_mm"]), mu)


def phantom_spec(cfg: RunConfig) -> PhantomSpec:
    p = cfg.phantom
    body = tuple(_parse_solid(s) for s in p["body"])
    pores = tuple(Pore(tuple(float(v) for v in q["center_mm"]), float(q["diameter_mm"]))
                  for q in p["pores"])
    rp = p["random_pores"]
    if rp is not None:
        sep = float(rp.get("separation_mm", 2.0 * cfg.geometry["voxel_size_mm"]))
        pores = pores + random_pores(
            body, int(rp["count"]),
            (float(rp["diameter_min_mm"]), float(rp["diameter_max_mm"])),
            int(rp.get("seed", p["seed"])), separation_mm=sep)
    return PhantomSpec(body=body, pores=pores, rng_seed=int(p["seed"]))


def spectrum(cfg: RunConfig) -> Spectrum:
    return Spectrum(tuple((float(w), float(s)) for w, s in cfg.spectrum["bins"]))


def filter_spec(cfg: RunConfig) -> FilterSpec:
    try:
        kind = FilterKind(cfg.fdk["window"])
    except ValueError:
        raise FormatError(f"unknown FDK window {cfg.fdk['window']!r}") from None
    return FilterSpec(kind, int(cfg.fdk["padded_len"]))


def pnp_config(cfg: RunConfig) -> PnPConfig:
    p = cfg.pnp
    kwargs = dict(iterations=int(p["iterations"]), cg_steps=int(p["cg_steps"]),
                  selection_cg_steps=int(p["selection_cg_steps"]),
                  half_rows=int(p["half_rows"]))
    if p["beta_grid"] is not None:
        kwargs["beta_grid"] = tuple(float(b) for b in p["beta_grid"])
    return PnPConfig(**kwargs)


def prior_architecture(cfg: RunConfig) -> PriorArchitecture:
    p = cfg.prior
    return PriorArchitecture(int(p["levels"]), int(p["base_features"]),
                             int(p["half_width"]))


def train_config(cfg: RunConfig) -> TrainConfig:
    t = cfg.training
    return TrainConfig(
        epochs=int(t["epochs"]), lr=float(t["lr"]),
        plateau_patience=int(t["patience"]), plateau_factor=float(t["factor"]),
        patch_shape=tuple(int(v) for v in t["patch"]),
        stride=None if t["stride"] is None else int(t["stride"]),
        split=float(t["split"]), batch_size=int(t["batch"]), seed=int(t["seed"]),
        precision=str(t["precision"]))
