"""Plug-and-play reconstruction: alternate the learned artifact-reduction
prior with a conjugate-gradient data-fit step, selecting the quadratic
coupling weight beta per iteration on the center slab.

Each outer iteration runs z_k = D(x_{k-1}), picks beta_k by a grid search
that solves the center-rows subproblem for every candidate and keeps the
largest beta whose normalized data residual is within 5% of the best, then
minimizes 0.5*||Ax - y||^2 + beta/2*||x - z_k||^2 with warm-started CG on
the normal equations.
"""

from __future__ import annotations

import time
from dataclasses import dataclass, field

import numpy as np
import psutil

from .errors import ParamError, ShapeError
from .fdk import FilterSpec, fdk_reconstruct
from .geometry import ConeBeamGeometry
from .projector import (CenterRestriction, ProjectionSet, Volume, back_project,
                        back_project_center, extract_center_rows,
                        extract_center_slab, forward_project,
                        forward_project_center, restrict_center)
from .unet import PriorParams, denoise_volume

SELECTION_TOLERANCE = 0.05  # accept betas within (1 + tol) of the best residual
CG_STOP_RESIDUAL = 1e-12


@dataclass(frozen=True)
class PnPConfig:
    iterations: int = 3
    cg_steps: int = 10
    beta_grid: tuple[float, ...] = tuple(2.0 ** (1 - i) for i in range(15))
    selection_cg_steps: int = 5
    half_rows: int = 4

    def __post_init__(self):
        object.__setattr__(self, "beta_grid", tuple(float(b) for b in self.beta_grid))
        if self.iterations < 1:
            raise ParamError(f"iterations must be >= 1, got {self.iterations}")
        if self.cg_steps < 1 or self.selection_cg_steps < 1:
            raise ParamError("CG step counts must be >= 1")
        if not self.beta_grid:
            raise ParamError("beta grid must not be empty")
        if any(b <= 0 for b in self.beta_grid):
            raise ParamError("beta grid values must be positive")
        for a, b in zip(self.beta_grid, self.beta_grid[1:]):
            if b >= a:
                raise ParamError("beta grid must be strictly decreasing")


@dataclass
class CgInfo:
    residual_norms: list[float]  # normal-equation residual, one entry per iterate
    objectives: list[float]  # 0.5*||Ax-y||^2 + beta/2*||x-z||^2 per iterate


@dataclass
class IterationTrace:
    beta: float
    selection_residuals: list[tuple[float, float]]  # (beta, normalized residual)
    objective_before: float
    objective_after: float
    cg_residual_norms: list[float]
    wall_time_s: float  # cumulative since the start of the reconstruction
    peak_rss_bytes: int  # running peak


@dataclass
class PnPTrace:
    iterations: list[IterationTrace] = field(default_factory=list)
    denoiser_calls: int = 0
    selections: int = 0
    total_cg_steps: int = 0

    def to_dict(self) -> dict:
        return {
            "schema_version": 1,
            "denoiser_calls": self.denoiser_calls,
            "selections": self.selections,
            "total_cg_steps": self.total_cg_steps,
            "iterations": [
                {
                    "beta": it.beta,
                    "selection_residuals": [[b, r] for b, r in it.selection_residuals],
                    "objective_before": it.objective_before,
                    "objective_after": it.objective_after,
                    "cg_residual_norms": it.cg_residual_norms,
                    "wall_time_s": it.wall_time_s,
                    "peak_rss_bytes": it.peak_rss_bytes,
                }
                for it in self.iterations
            ],
        }


def _cg_normal(apply_a, apply_at, beta, z, y, x0, n_steps):
    """CG on (A^T A + beta I) x = A^T y + beta z, warm-started at x0.

    Tracks A x incrementally so the quadratic objective at every iterate
    comes for free.  No early exit unless the residual is below 1e-12.
    """
    x = x0.copy()
    ax = apply_a(x)
    b = apply_at(y) + beta * z
    r = b - (apply_at(ax) + beta * x)
    p = r.copy()
    rs = float(np.vdot(r, r))

    def objective():
        return 0.5 * float(np.sum((ax - y) ** 2)) + 0.5 * beta * float(np.sum((x - z) ** 2))

    info = CgInfo([np.sqrt(rs)], [objective()])
    for _ in range(n_steps):
        if info.residual_norms[-1] < CG_STOP_RESIDUAL:
            break
        ap = apply_a(p)
        q = apply_at(ap) + beta * p
        alpha = rs / float(np.vdot(p, q))
        x += alpha * p
        ax += alpha * ap
        r -= alpha * q
        rs_new = float(np.vdot(r, r))
        p = r + (rs_new / rs) * p
        rs = rs_new
        info.residual_norms.append(np.sqrt(rs))
        info.objectives.append(objective())
    return x, info


def _full_ops(geom: ConeBeamGeometry):
    def apply_a(arr):
        return forward_project(Volume(arr, geom.voxel_size_mm), geom).data

    def apply_at(arr):
        return back_project(ProjectionSet(arr, geom.angles_deg), geom).data

    return apply_a, apply_at


def _center_ops(geom: ConeBeamGeometry, restriction: CenterRestriction):
    def apply_a(arr):
        return forward_project_center(Volume(arr, geom.voxel_size_mm), geom, restriction).data

    def apply_at(arr):
        return back_project_center(ProjectionSet(arr, geom.angles_deg), geom, restriction).data

    return apply_a, apply_at


def cg_solve(geom: ConeBeamGeometry, beta: float, z: Volume, y: ProjectionSet,
             x0: Volume, n_steps: int) -> Volume:
    """Data-fit subproblem solve; see :func:`cg_solve_traced`."""
    return cg_solve_traced(geom, beta, z, y, x0, n_steps)[0]


def cg_solve_traced(geom: ConeBeamGeometry, beta: float, z: Volume,
                    y: ProjectionSet, x0: Volume, n_steps: int) -> tuple[Volume, CgInfo]:
    if beta <= 0:
        raise ParamError(f"beta must be positive, got {beta}")
    if n_steps < 1:
        raise ParamError(f"n_steps must be >= 1, got {n_steps}")
    if z.data.shape != x0.data.shape:
        raise ShapeError(f"anchor shape {z.data.shape} != start shape {x0.data.shape}")
    apply_a, apply_at = _full_ops(geom)
    apply_a(x0.data)  # shape check against the geometry before iterating
    x, info = _cg_normal(apply_a, apply_at, beta, z.data.astype(np.float64),
                         y.data.astype(np.float64), x0.data.astype(np.float64), n_steps)
    return Volume(x, geom.voxel_size_mm), info


def regularization_selection(z: Volume, geom: ConeBeamGeometry,
                             restriction: CenterRestriction, y_c: ProjectionSet,
                             grid: tuple[float, ...], n_sel: int):
    """Grid search on the center slab; returns (beta, [(beta, residual)]).

    For each candidate the restricted subproblem is solved with a few CG
    steps warm-started at the denoised slab, and the candidate kept is the
    largest beta whose normalized data residual lies within 5% of the best.
    """
    if not grid:
        raise ParamError("beta grid must not be empty")
    apply_a, apply_at = _center_ops(geom, restriction)
    z_slab = extract_center_slab(z, restriction).data.astype(np.float64)
    yc = y_c.data.astype(np.float64)
    norm_yc = float(np.linalg.norm(yc))
    residuals = []
    for beta in grid:
        x_b, _ = _cg_normal(apply_a, apply_at, beta, z_slab, yc, z_slab, n_sel)
        r = float(np.linalg.norm(apply_a(x_b) - yc))
        residuals.append((float(beta), r / norm_yc if norm_yc > 0 else r))
    best = min(r for _, r in residuals)
    for beta, r in residuals:  # grid is sorted largest beta first
        if r <= (1.0 + SELECTION_TOLERANCE) * best:
            return beta, residuals
    raise AssertionError("unreachable: best residual is in the list")


def pnp_reconstruct(y: ProjectionSet, geom: ConeBeamGeometry, prior: PriorParams,
                    config: PnPConfig | None = None,
                    filter_spec: FilterSpec | None = None) -> tuple[Volume, PnPTrace]:
    """Run the full algorithm from the FDK initializer; returns (x_K, trace)."""
    if config is None:
        config = PnPConfig()
    proc = psutil.Process()
    t_start = time.perf_counter()
    peak_rss = proc.memory_info().rss

    x = fdk_reconstruct(y, geom, filter_spec)
    restriction = restrict_center(geom, config.half_rows)
    y_c = extract_center_rows(y, restriction)

    trace = PnPTrace()
    for _ in range(config.iterations):
        z = denoise_volume(prior, x)
        trace.denoiser_calls += 1
        beta, residuals = regularization_selection(
            z, geom, restriction, y_c, config.beta_grid, config.selection_cg_steps)
        trace.selections += 1
        x, info = cg_solve_traced(geom, beta, z, y, x, config.cg_steps)
        trace.total_cg_steps += len(info.residual_norms) - 1
        peak_rss = max(peak_rss, proc.memory_info().rss)
        trace.iterations.append(IterationTrace(
            beta=beta,
            selection_residuals=residuals,
            objective_before=info.objectives[0],
            objective_after=info.objectives[-1],
            cg_residual_norms=info.residual_norms,
            wall_time_s=time.perf_counter() - t_start,
            peak_rss_bytes=peak_rss,
        ))
    return x, trace
