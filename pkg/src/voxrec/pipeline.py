"""Config-driven pipeline: phantom/volume -> segmentation -> alignment ->
surface extraction -> registration -> metrics report.

Config parsing is strict (unknown keys are errors) and every effective
parameter, including derived defaults and seeds, is echoed into the report
so a run can be reproduced bit-for-bit.
"""

from __future__ import annotations

import json
import time
from dataclasses import dataclass, field
from pathlib import Path
from typing import Optional

import numpy as np

from . import fileio
from .metrics import SurfaceMetrics, VoxelMetrics
from .registration import (
    IcpConfig,
    RansacConfig,
    RegistrationConfig,
    mesh_to_pointcloud,
    register_clouds,
)
from .report import MetricsReport
from .segmentation import GmmConfig, RegionGrowConfig, SegmentationConfig, segment
from .surface import laplacian_smooth, marching_cubes
from .volume import (
    BinaryMask,
    GridGeometry,
    ScalarVolume,
    foreground_fraction,
    make_shell_mask,
    make_shell_phantom,
    make_sphere_mask,
    make_sphere_phantom,
    voxelize_mesh,
)
from .voxel_align import (
    apply_rigid_to_mask,
    compose,
    euler_xyz_deg,
    kabsch_umeyama,
    pca_landmarks,
    RigidTransform,
)


class PipelineStageError(RuntimeError):
    """A pipeline stage failed; carries the stage name for diagnostics."""

    def __init__(self, stage: str, cause: BaseException):
        super().__init__(f"stage '{stage}' failed: {cause}")
        self.stage = stage
        self.cause = cause


class ConfigError(ValueError):
    """Invalid pipeline configuration."""


def _check_keys(obj: dict, allowed: set, context: str) -> None:
    if not isinstance(obj, dict):
        raise ConfigError(f"{context} must be a JSON object")
    unknown = set(obj) - allowed
    if unknown:
        raise ConfigError(f"unknown keys in {context}: {sorted(unknown)}")


@dataclass(frozen=True)
class PhantomSpec:
    kind: str
    dims: tuple
    spacing_mm: tuple
    origin_mm: tuple = (0.0, 0.0, 0.0)
    radius_mm: Optional[float] = None
    outer_radius_mm: Optional[float] = None
    wall_mm: Optional[float] = None
    fg_mean: float = 1000.0
    bg_mean: float = 0.0
    noise_sigma: float = 0.0
    seed: int = 0

    @classmethod
    def from_dict(cls, obj: dict, context: str) -> "PhantomSpec":
        _check_keys(
            obj,
            {
                "kind", "dims", "spacing_mm", "origin_mm", "radius_mm",
                "outer_radius_mm", "wall_mm", "fg_mean", "bg_mean",
                "noise_sigma", "seed",
            },
            context,
        )
        kind = obj.get("kind")
        if kind not in ("sphere", "shell"):
            raise ConfigError(f"{context}.kind must be 'sphere' or 'shell', got {kind!r}")
        if "dims" not in obj or "spacing_mm" not in obj:
            raise ConfigError(f"{context} requires dims and spacing_mm")
        if kind == "sphere" and obj.get("radius_mm") is None:
            raise ConfigError(f"{context}: sphere phantoms require radius_mm")
        if kind == "shell" and (
            obj.get("outer_radius_mm") is None or obj.get("wall_mm") is None
        ):
            raise ConfigError(f"{context}: shell phantoms require outer_radius_mm and wall_mm")
        return cls(
            kind=kind,
            dims=tuple(obj["dims"]),
            spacing_mm=tuple(obj["spacing_mm"]),
            origin_mm=tuple(obj.get("origin_mm", (0.0, 0.0, 0.0))),
            radius_mm=obj.get("radius_mm"),
            outer_radius_mm=obj.get("outer_radius_mm"),
            wall_mm=obj.get("wall_mm"),
            fg_mean=float(obj.get("fg_mean", 1000.0)),
            bg_mean=float(obj.get("bg_mean", 0.0)),
            noise_sigma=float(obj.get("noise_sigma", 0.0)),
            seed=int(obj.get("seed", 0)),
        )

    def geometry(self) -> GridGeometry:
        return GridGeometry(self.dims, self.spacing_mm, self.origin_mm)

    def ground_truth_mask(self) -> BinaryMask:
        if self.kind == "sphere":
            return make_sphere_mask(self.radius_mm, self.geometry())
        return make_shell_mask(self.outer_radius_mm, self.wall_mm, self.geometry())

    def render(self) -> ScalarVolume:
        if self.kind == "sphere":
            return make_sphere_phantom(
                self.radius_mm, self.geometry(), self.fg_mean, self.bg_mean,
                self.noise_sigma, self.seed,
            )
        return make_shell_phantom(
            self.outer_radius_mm, self.wall_mm, self.geometry(), self.fg_mean,
            self.bg_mean, self.noise_sigma, self.seed,
        )

    def echo(self) -> dict:
        out = {
            "kind": self.kind,
            "dims": list(self.dims),
            "spacing_mm": list(self.spacing_mm),
            "origin_mm": list(self.origin_mm),
            "fg_mean": self.fg_mean,
            "bg_mean": self.bg_mean,
            "noise_sigma": self.noise_sigma,
            "seed": self.seed,
        }
        if self.kind == "sphere":
            out["radius_mm"] = self.radius_mm
        else:
            out["outer_radius_mm"] = self.outer_radius_mm
            out["wall_mm"] = self.wall_mm
        return out


@dataclass(frozen=True)
class PipelineConfig:
    reference_mesh: Optional[str] = None
    reference_phantom: Optional[PhantomSpec] = None
    input_volume: Optional[str] = None
    input_phantom: Optional[PhantomSpec] = None
    coarse_rotation_deg: tuple = (0.0, 0.0, 0.0)
    coarse_translation_mm: tuple = (0.0, 0.0, 0.0)
    segmentation: SegmentationConfig = field(default_factory=SegmentationConfig)
    registration: RegistrationConfig = field(default_factory=RegistrationConfig)
    smoothing_enabled: bool = False
    smoothing_lambda: float = 0.5
    smoothing_iterations: int = 10
    report_path: Optional[str] = None
    report_format: str = "json"
    dump_intermediates: Optional[str] = None
    geometry_label: str = "unnamed"

    def __post_init__(self):
        if (self.reference_mesh is None) == (self.reference_phantom is None):
            raise ConfigError("exactly one of reference.mesh / reference.phantom is required")
        if (self.input_volume is None) == (self.input_phantom is None):
            raise ConfigError("exactly one of input.volume / input.phantom is required")
        if self.report_format not in ("json", "csv"):
            raise ConfigError(f"report format must be json or csv, got {self.report_format!r}")


def _parse_segmentation(obj: dict) -> SegmentationConfig:
    _check_keys(obj, {"method", "gmm", "rg"}, "segmentation")
    gmm_obj = obj.get("gmm", {})
    _check_keys(
        gmm_obj, {"n_components", "max_iters", "tol", "seed", "max_samples"},
        "segmentation.gmm",
    )
    rg_obj = obj.get("rg", {})
    _check_keys(rg_obj, {"seeds", "tolerance", "connectivity"}, "segmentation.rg")
    return SegmentationConfig(
        method=obj.get("method", "otsu"),
        gmm=GmmConfig(
            n_components=int(gmm_obj.get("n_components", 2)),
            max_iters=int(gmm_obj.get("max_iters", 200)),
            tol=float(gmm_obj.get("tol", 1e-6)),
            seed=int(gmm_obj.get("seed", 0)),
            max_samples=int(gmm_obj.get("max_samples", 1_000_000)),
        ),
        rg=RegionGrowConfig(
            seeds=tuple(tuple(s) for s in rg_obj.get("seeds", ())),
            tolerance=float(rg_obj.get("tolerance", 0.0)),
            connectivity=int(rg_obj.get("connectivity", 6)),
        ),
    )


def _parse_registration(obj: dict) -> RegistrationConfig:
    _check_keys(
        obj, {"downsample_voxel", "normal_k", "fpfh_radius", "ransac", "icp"},
        "registration",
    )
    ransac_obj = obj.get("ransac", {})
    _check_keys(
        ransac_obj,
        {
            "n_sample_points", "max_iterations", "confidence",
            "distance_threshold", "edge_length_ratio", "seed",
        },
        "registration.ransac",
    )
    icp_obj = obj.get("icp", {})
    _check_keys(
        icp_obj, {"max_correspondence", "max_iterations", "rel_change_tol"},
        "registration.icp",
    )
    return RegistrationConfig(
        downsample_voxel=float(obj.get("downsample_voxel", 1.0)),
        normal_k=int(obj.get("normal_k", 30)),
        fpfh_radius=obj.get("fpfh_radius"),
        ransac=RansacConfig(
            n_sample_points=int(ransac_obj.get("n_sample_points", 3)),
            max_iterations=int(ransac_obj.get("max_iterations", 100_000)),
            confidence=float(ransac_obj.get("confidence", 0.999)),
            distance_threshold=ransac_obj.get("distance_threshold"),
            edge_length_ratio=float(ransac_obj.get("edge_length_ratio", 0.9)),
            seed=int(ransac_obj.get("seed", 0)),
        ),
        icp=IcpConfig(
            max_correspondence=icp_obj.get("max_correspondence"),
            max_iterations=int(icp_obj.get("max_iterations", 50)),
            rel_change_tol=float(icp_obj.get("rel_change_tol", 1e-6)),
        ),
    )


def load_config(path_or_dict, seed_override: Optional[int] = None) -> PipelineConfig:
    """Parse a pipeline config from a JSON file or an equivalent dict.

    ``seed_override`` replaces every seed in the config (phantom noise, GMM
    subsampling, RANSAC).
    """
    if isinstance(path_or_dict, dict):
        obj = path_or_dict
    else:
        try:
            obj = json.loads(Path(path_or_dict).read_text(encoding="utf-8"))
        except (OSError, json.JSONDecodeError) as exc:
            raise ConfigError(f"cannot parse config {path_or_dict}: {exc}") from exc
    _check_keys(
        obj,
        {
            "reference", "input", "coarse_align", "segmentation",
            "registration", "smoothing", "outputs", "label",
        },
        "config",
    )
    ref = obj.get("reference", {})
    _check_keys(ref, {"mesh", "phantom"}, "reference")
    inp = obj.get("input", {})
    _check_keys(inp, {"volume", "phantom"}, "input")
    coarse = obj.get("coarse_align", {})
    _check_keys(coarse, {"rotation_deg", "translation_mm"}, "coarse_align")
    smoothing = obj.get("smoothing", {})
    _check_keys(smoothing, {"enabled", "lambda", "iterations"}, "smoothing")
    outputs = obj.get("outputs", {})
    _check_keys(outputs, {"report", "format", "dump_intermediates"}, "outputs")

    ref_phantom = (
        PhantomSpec.from_dict(ref["phantom"], "reference.phantom")
        if "phantom" in ref
        else None
    )
    input_phantom = (
        PhantomSpec.from_dict(inp["phantom"], "input.phantom") if "phantom" in inp else None
    )
    seg = _parse_segmentation(obj.get("segmentation", {}))
    reg = _parse_registration(obj.get("registration", {}))
    if seed_override is not None:
        if ref_phantom is not None:
            ref_phantom = PhantomSpec.from_dict(
                {**ref_phantom.echo(), "seed": seed_override}, "reference.phantom"
            )
        if input_phantom is not None:
            input_phantom = PhantomSpec.from_dict(
                {**input_phantom.echo(), "seed": seed_override}, "input.phantom"
            )
        seg = SegmentationConfig(
            method=seg.method,
            gmm=GmmConfig(
                n_components=seg.gmm.n_components,
                max_iters=seg.gmm.max_iters,
                tol=seg.gmm.tol,
                seed=seed_override,
                max_samples=seg.gmm.max_samples,
            ),
            rg=seg.rg,
        )
        reg = RegistrationConfig(
            downsample_voxel=reg.downsample_voxel,
            normal_k=reg.normal_k,
            fpfh_radius=reg.fpfh_radius,
            ransac=RansacConfig(
                n_sample_points=reg.ransac.n_sample_points,
                max_iterations=reg.ransac.max_iterations,
                confidence=reg.ransac.confidence,
                distance_threshold=reg.ransac.distance_threshold,
                edge_length_ratio=reg.ransac.edge_length_ratio,
                seed=seed_override,
            ),
            icp=reg.icp,
        )
    return PipelineConfig(
        reference_mesh=ref.get("mesh"),
        reference_phantom=ref_phantom,
        input_volume=inp.get("volume"),
        input_phantom=input_phantom,
        coarse_rotation_deg=tuple(coarse.get("rotation_deg", (0.0, 0.0, 0.0))),
        coarse_translation_mm=tuple(coarse.get("translation_mm", (0.0, 0.0, 0.0))),
        segmentation=seg,
        registration=reg,
        smoothing_enabled=bool(smoothing.get("enabled", False)),
        smoothing_lambda=float(smoothing.get("lambda", 0.5)),
        smoothing_iterations=int(smoothing.get("iterations", 10)),
        report_path=outputs.get("report"),
        report_format=outputs.get("format", "json"),
        dump_intermediates=outputs.get("dump_intermediates"),
        geometry_label=obj.get("label", "unnamed"),
    )


def _config_echo(config: PipelineConfig) -> dict:
    seg = config.segmentation
    return {
        "label": config.geometry_label,
        "reference": (
            {"mesh": config.reference_mesh}
            if config.reference_mesh is not None
            else {"phantom": config.reference_phantom.echo()}
        ),
        "input": (
            {"volume": config.input_volume}
            if config.input_volume is not None
            else {"phantom": config.input_phantom.echo()}
        ),
        "coarse_align": {
            "rotation_deg": list(config.coarse_rotation_deg),
            "translation_mm": list(config.coarse_translation_mm),
            "pivot": "grid_center",
        },
        "segmentation": {
            "method": seg.method,
            "gmm": {
                "n_components": seg.gmm.n_components,
                "max_iters": seg.gmm.max_iters,
                "tol": seg.gmm.tol,
                "seed": seg.gmm.seed,
                "max_samples": seg.gmm.max_samples,
            },
            "rg": {
                "seeds": [list(s) for s in seg.rg.seeds],
                "tolerance": seg.rg.tolerance,
                "connectivity": seg.rg.connectivity,
            },
        },
        "registration": config.registration.effective_dict(),
        "smoothing": {
            "enabled": config.smoothing_enabled,
            "lambda": config.smoothing_lambda,
            "iterations": config.smoothing_iterations,
        },
        "alignment_pivot": "landmark_centroid",
    }


def coarse_transform_about_grid_center(
    geometry: GridGeometry, rotation_deg, translation_mm
) -> RigidTransform:
    """Euler rotation about the grid center followed by a translation."""
    rot = euler_xyz_deg(rotation_deg)
    center = geometry.world_center()
    shift_to = RigidTransform(np.eye(3), -center)
    shift_back = RigidTransform(np.eye(3), center + np.asarray(translation_mm, dtype=np.float64))
    return compose(shift_back, compose(rot, shift_to))


def run_pipeline(config: PipelineConfig) -> MetricsReport:
    """Execute the full reconstruction-evaluation workflow for one config.

    Any stage failure raises PipelineStageError naming the stage; the report
    file is only written after every stage has succeeded.
    """
    timing: dict = {}
    dump_dir = Path(config.dump_intermediates) if config.dump_intermediates else None
    if dump_dir is not None:
        dump_dir.mkdir(parents=True, exist_ok=True)

    def run_stage(name, fn):
        t0 = time.perf_counter()
        try:
            out = fn()
        except PipelineStageError:
            raise
        except Exception as exc:
            raise PipelineStageError(name, exc) from exc
        timing[name] = (time.perf_counter() - t0) * 1000.0
        return out

    def load_input():
        if config.input_phantom is not None:
            return config.input_phantom.render()
        vol = fileio.read_volume(config.input_volume)
        if not isinstance(vol, ScalarVolume):
            raise ValueError(f"input {config.input_volume} is a mask, expected a scalar volume")
        return vol

    input_volume = run_stage("load_input", load_input)
    grid = input_volume.geometry

    def load_reference():
        if config.reference_phantom is not None:
            if config.reference_phantom.geometry() != grid:
                raise ValueError(
                    "reference phantom geometry must match the input volume grid"
                )
            return config.reference_phantom.ground_truth_mask()
        mesh = fileio.read_mesh(config.reference_mesh)
        return voxelize_mesh(mesh, grid)

    ref_mask = run_stage("load_reference", load_reference)
    ref_fraction = foreground_fraction(ref_mask)

    seg_details: dict = {}

    def do_segment():
        mask, details = segment(input_volume, config.segmentation)
        seg_details.update(details)
        return mask

    recon_mask = run_stage("segment", do_segment)

    def do_coarse():
        if all(v == 0 for v in config.coarse_rotation_deg) and all(
            v == 0 for v in config.coarse_translation_mm
        ):
            return recon_mask
        t = coarse_transform_about_grid_center(
            grid, config.coarse_rotation_deg, config.coarse_translation_mm
        )
        return apply_rigid_to_mask(recon_mask, t, grid)

    recon_coarse = run_stage("coarse_align", do_coarse)

    fine_info: dict = {}

    def do_fine_align():
        lm_src = pca_landmarks(recon_coarse)
        lm_dst = pca_landmarks(ref_mask)
        t = kabsch_umeyama(lm_src, lm_dst)
        fine_info["isotropic_src"] = lm_src.isotropic
        fine_info["isotropic_dst"] = lm_dst.isotropic
        fine_info["rotation"] = t.rotation.tolist()
        fine_info["translation_mm"] = t.translation.tolist()
        return apply_rigid_to_mask(recon_coarse, t, grid)

    recon_aligned = run_stage("fine_align", do_fine_align)

    voxel_metrics = run_stage(
        "voxel_metrics", lambda: VoxelMetrics.from_masks(recon_aligned, ref_mask)
    )

    def extract(mask):
        mesh = marching_cubes(mask)
        if config.smoothing_enabled:
            mesh = laplacian_smooth(mesh, config.smoothing_lambda, config.smoothing_iterations)
        return mesh

    ref_mesh = run_stage("extract_reference", lambda: extract(ref_mask))
    recon_mesh = run_stage("extract_recon", lambda: extract(recon_aligned))

    reg_out: dict = {}

    def do_register():
        src = mesh_to_pointcloud(recon_mesh)
        dst = mesh_to_pointcloud(ref_mesh)
        icp, ransac = register_clouds(src, dst, config.registration)
        reg_out["src"] = src
        reg_out["dst"] = dst
        reg_out["icp"] = icp
        reg_out["ransac"] = ransac
        return icp

    icp_result = run_stage("register", do_register)

    surface_metrics = run_stage(
        "surface_metrics",
        lambda: SurfaceMetrics.from_clouds(
            reg_out["src"].transformed(icp_result.transform), reg_out["dst"]
        ),
    )

    report = MetricsReport(
        geometry_label=config.geometry_label,
        segmenter=config.segmentation.method,
        config_echo={**_config_echo(config), "segmentation_details": seg_details,
                     "fine_alignment": fine_info},
        foreground_fraction_reference=ref_fraction,
        voxel=voxel_metrics,
        surface=surface_metrics,
        registration={
            "ransac": {
                "fitness": reg_out["ransac"].fitness,
                "inlier_rmse": reg_out["ransac"].inlier_rmse,
                "iterations_used": reg_out["ransac"].iterations_used,
                "converged": reg_out["ransac"].converged,
            },
            "icp": {
                "fitness": icp_result.fitness,
                "inlier_rmse": icp_result.inlier_rmse,
                "iterations_used": icp_result.iterations_used,
                "converged": icp_result.converged,
            },
        },
        timing_ms=timing,
    )

    if dump_dir is not None:
        fileio.write_volume(ref_mask, dump_dir / "reference_mask.json")
        fileio.write_volume(recon_mask, dump_dir / "segmented_mask.json")
        fileio.write_volume(recon_aligned, dump_dir / "aligned_mask.json")
        fileio.write_mesh(ref_mesh, dump_dir / "reference_mesh.stl")
        fileio.write_mesh(recon_mesh, dump_dir / "recon_mesh.stl")

    if config.report_path is not None:
        fileio.write_report(report, config.report_path, config.report_format)
    return report
