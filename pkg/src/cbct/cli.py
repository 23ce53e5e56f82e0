"""Command-line surface: simulate, fdk, pnp, train-prior, eval, detect,
slice-dump.  Exit codes: 0 success, 2 usage, 3 data/format error, 4 numeric
failure (non-finite values encountered)."""

from __future__ import annotations

import argparse
import json
import math
import sys
from pathlib import Path

from . import io as cio
from .analysis import (RegionSpec, Window2D, cnr, detect_defects, line_profile,
                       nrmse, snr, ssim)
from .errors import CbctError, FormatError, NumericError
from .fdk import FilterKind, FilterSpec, fdk_reconstruct
from .pnp import PnPConfig, pnp_reconstruct
from .simulator import simulate_pair
from .training import build_dataset, train_prior
from .unet import PriorArchitecture


def _manifest_path(primary_output: Path, override: str | None) -> Path:
    return Path(override) if override else primary_output.parent / "run_manifest.json"


def cmd_simulate(args) -> int:
    cfg = cio.load_run_config(args.config)
    out = Path(args.out_dir)
    out.mkdir(parents=True, exist_ok=True)
    geom_in = cio.input_geometry(cfg)
    geom_ref = cio.reference_geometry(cfg)
    pair = simulate_pair(cio.phantom_spec(cfg), geom_in, geom_ref, cio.spectrum(cfg),
                         float(cfg.noise["sigma"]), float(cfg.noise["i0"]),
                         int(cfg.noise["seed"]))
    artifacts = {}
    cio.write_projections(out / "input_projections.raw", pair.input_projs, geom_in)
    cio.write_projections(out / "reference_projections.raw", pair.reference_projs, geom_ref)
    cio.write_volume(out / "phantom.raw", pair.phantom)
    cio.write_ground_truth(out / "ground_truth.json", pair.defects,
                           geom_in.voxel_size_mm)
    for name in ("input_projections.raw", "input_projections.raw.json",
                 "reference_projections.raw", "reference_projections.raw.json",
                 "phantom.raw", "phantom.raw.json", "ground_truth.json"):
        artifacts[name] = out / name
    cio.write_manifest(_manifest_path(out / "x", args.manifest), cfg.to_dict(), artifacts)
    return 0


def cmd_fdk(args) -> int:
    projs, geom = cio.read_projections(args.proj)
    spec = FilterSpec(FilterKind(args.window), args.padded_len)
    rec = fdk_reconstruct(projs, geom, spec)
    out = Path(args.out)
    cio.write_volume(out, rec)
    cio.write_manifest(_manifest_path(out, args.manifest),
                       {"fdk": {"window": args.window, "padded_len": args.padded_len},
                        "proj": str(args.proj)},
                       {out.name: out, out.name + ".json": Path(str(out) + ".json")})
    return 0


def cmd_pnp(args) -> int:
    projs, geom = cio.read_projections(args.proj)
    prior, meta = cio.load_prior(args.prior)
    if args.config:
        cfg = cio.load_run_config(args.config)
        pnp_cfg = cio.pnp_config(cfg)
        filt = cio.filter_spec(cfg)
    else:
        pnp_cfg = PnPConfig()
        filt = FilterSpec()
    rec, trace = pnp_reconstruct(projs, geom, prior, pnp_cfg, filt)
    out = Path(args.out)
    cio.write_volume(out, rec)
    cio.atomic_write_json(args.trace, trace.to_dict())
    cio.write_manifest(_manifest_path(out, args.manifest),
                       {"pnp": {"iterations": pnp_cfg.iterations,
                                "cg_steps": pnp_cfg.cg_steps,
                                "beta_grid": list(pnp_cfg.beta_grid),
                                "selection_cg_steps": pnp_cfg.selection_cg_steps,
                                "half_rows": pnp_cfg.half_rows},
                        "proj": str(args.proj), "prior": str(args.prior),
                        "prior_meta": meta},
                       {out.name: out, Path(args.trace).name: Path(args.trace)})
    return 0


def cmd_train_prior(args) -> int:
    cfg = cio.load_run_config(args.config)
    tcfg = cio.train_config(cfg)
    arch = cio.prior_architecture(cfg)
    pair_list = json.loads(Path(args.pairs).read_text())
    if not isinstance(pair_list, list) or not pair_list:
        raise FormatError(f"{args.pairs}: expected a non-empty list of volume pairs")
    pairs = [(cio.read_volume(p["input"]), cio.read_volume(p["target"]))
             for p in pair_list]
    dataset = build_dataset(pairs, tcfg.patch_shape, tcfg.stride, tcfg.seed, tcfg.split)
    params, log = train_prior(dataset, tcfg, arch)
    best = min(log, key=lambda e: e.val_nrmse)
    out = Path(args.out)
    cio.save_prior(out, params, {"seed": tcfg.seed, "best_epoch": best.epoch,
                                 "best_val_nrmse": best.val_nrmse})
    cio.write_train_log(args.log, log)
    cio.write_manifest(_manifest_path(out, args.manifest),
                       {"training": cfg.training, "prior": cfg.prior,
                        "pairs": pair_list},
                       {out.name: out, Path(args.log).name: Path(args.log)})
    return 0


def _json_safe(v):
    if isinstance(v, float) and math.isinf(v):
        return "inf"
    return v


def cmd_eval(args) -> int:
    recon = cio.read_volume(args.recon)
    ref = cio.read_volume(args.ref)
    report = {"schema_version": 1,
              "nrmse": nrmse(recon, ref),
              "ssim": ssim(recon, ref)}
    if args.regions:
        doc = json.loads(Path(args.regions).read_text())
        region = RegionSpec(int(doc["slice_lo"]), int(doc["slice_hi"]),
                            Window2D(**doc["background"]), Window2D(**doc["material"]))
        report["snr_db"] = _json_safe(snr(recon, region))
        report["cnr"] = _json_safe(cnr(recon, region))
    if args.profile:
        z, row = (int(v) for v in args.profile.split(","))
        prof = line_profile(recon, z, row)
        lines = ["index,value"] + [f"{i},{v:.10g}" for i, v in enumerate(prof)]
        cio.atomic_write_bytes(args.profile_out, ("\n".join(lines) + "\n").encode())
    out = Path(args.report)
    cio.atomic_write_json(out, report)
    cio.write_manifest(_manifest_path(out, args.manifest),
                       {"recon": str(args.recon), "ref": str(args.ref)},
                       {out.name: out})
    return 0


def cmd_detect(args) -> int:
    recon = cio.read_volume(args.recon)
    pores, vs = cio.read_ground_truth(args.truth)
    edges = [float(v) for v in args.bins.split(",")] if args.bins else None
    report = detect_defects(recon, pores, edges)
    out = Path(args.report)
    cio.atomic_write_json(out, report.to_dict())
    artifacts = {out.name: out}
    if args.csv:
        lines = ["bin_lo_mm,bin_hi_mm,recall,precision,n_gt,n_det"]
        for b in report.bins:
            rec = "" if b.recall is None else f"{b.recall:.6g}"
            prec = "" if b.precision is None else f"{b.precision:.6g}"
            lines.append(f"{b.lo_mm:.6g},{b.hi_mm:.6g},{rec},{prec},{b.n_gt},{b.n_detected}")
        cio.atomic_write_bytes(args.csv, ("\n".join(lines) + "\n").encode())
        artifacts[Path(args.csv).name] = Path(args.csv)
    cio.write_manifest(_manifest_path(out, args.manifest),
                       {"recon": str(args.recon), "truth": str(args.truth)}, artifacts)
    return 0


def cmd_slice_dump(args) -> int:
    vol = cio.read_volume(args.vol)
    cio.write_slice_pgm(args.out, vol, args.z)
    return 0


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="cbct",
                                description="Cone-beam CT simulation, reconstruction "
                                            "and defect-detection toolkit")
    p.add_argument("--threads", type=int, default=0,
                   help="cap worker threads (1 guarantees bit-exact reruns)")
    sub = p.add_subparsers(dest="command", required=True)

    s = sub.add_parser("simulate", help="generate a paired input/reference scan")
    s.add_argument("--config", required=True)
    s.add_argument("--out-dir", required=True)
    s.add_argument("--manifest")
    s.set_defaults(func=cmd_simulate)

    s = sub.add_parser("fdk", help="FDK reconstruction")
    s.add_argument("--proj", required=True)
    s.add_argument("--out", required=True)
    s.add_argument("--window", default="ramlak", choices=[k.value for k in FilterKind])
    s.add_argument("--padded-len", type=int, default=0)
    s.add_argument("--manifest")
    s.set_defaults(func=cmd_fdk)

    s = sub.add_parser("pnp", help="plug-and-play reconstruction")
    s.add_argument("--proj", required=True)
    s.add_argument("--prior", required=True)
    s.add_argument("--out", required=True)
    s.add_argument("--trace", required=True)
    s.add_argument("--config")
    s.add_argument("--manifest")
    s.set_defaults(func=cmd_pnp)

    s = sub.add_parser("train-prior", help="train the artifact-reduction prior")
    s.add_argument("--pairs", required=True,
                   help="JSON list of {input, target} volume paths")
    s.add_argument("--config", required=True)
    s.add_argument("--out", required=True)
    s.add_argument("--log", required=True)
    s.add_argument("--manifest")
    s.set_defaults(func=cmd_train_prior)

    s = sub.add_parser("eval", help="image quality metrics")
    s.add_argument("--recon", required=True)
    s.add_argument("--ref", required=True)
    s.add_argument("--report", required=True)
    s.add_argument("--regions", help="JSON region spec for SNR/CNR")
    s.add_argument("--profile", help="'z,row' line profile to extract")
    s.add_argument("--profile-out", default="profile.csv")
    s.add_argument("--manifest")
    s.set_defaults(func=cmd_eval)

    s = sub.add_parser("detect", help="Otsu segmentation and recall/precision")
    s.add_argument("--recon", required=True)
    s.add_argument("--truth", required=True)
    s.add_argument("--report", required=True)
    s.add_argument("--csv")
    s.add_argument("--bins", help="comma-separated diameter bin edges in mm")
    s.add_argument("--manifest")
    s.set_defaults(func=cmd_detect)

    s = sub.add_parser("slice-dump", help="export one slice as 16-bit PGM")
    s.add_argument("--vol", required=True)
    s.add_argument("--z", type=int, required=True)
    s.add_argument("--out", required=True)
    s.set_defaults(func=cmd_slice_dump)
    return p


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    if args.threads:
        import numba
        numba.set_num_threads(args.threads)
    try:
        return args.func(args)
    except NumericError as e:
        print(f"numeric failure: {e}", file=sys.stderr)
        return 4
    except (CbctError, FileNotFoundError, KeyError, ValueError) as e:
        print(f"error: {e}", file=sys.stderr)
        return 3


if __name__ == "__main__":
    sys.exit(main())
