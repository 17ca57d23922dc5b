"""Command-line interface: the pipeline runner plus one subcommand per stage.

Every subcommand reads and writes the package's file formats, exits 0 on
success and prints a one-line ``error: <context>: <message>`` to stderr
otherwise.
"""

from __future__ import annotations

import argparse
import json
import sys
from pathlib import Path

import numpy as np

from . import fileio
from .metrics import SurfaceMetrics, VoxelMetrics
from .pipeline import (
    ConfigError,
    PhantomSpec,
    PipelineStageError,
    coarse_transform_about_grid_center,
    load_config,
    run_pipeline,
)
from .registration import RegistrationConfig, RansacConfig, IcpConfig, mesh_to_pointcloud, register_clouds
from .report import MetricsReport
from .segmentation import (
    GmmConfig,
    RegionGrowConfig,
    SegmentationConfig,
    segment,
)
from .surface import laplacian_smooth, marching_cubes
from .volume import BinaryMask, GridGeometry, ScalarVolume, foreground_fraction, voxelize_mesh
from .voxel_align import apply_rigid_to_mask, kabsch_umeyama, pca_landmarks, RigidTransform


def _triplet(text: str, cast=float):
    parts = text.split(",")
    if len(parts) != 3:
        raise argparse.ArgumentTypeError(f"expected 3 comma-separated values, got {text!r}")
    return tuple(cast(p) for p in parts)


def _seed_list(text: str):
    seeds = []
    for block in text.split(";"):
        block = block.strip()
        if block:
            seeds.append(_triplet(block, int))
    return seeds


def _geometry_from_args(args) -> GridGeometry:
    if args.like:
        vol = fileio.read_volume(args.like)
        return vol.geometry
    if args.dims is None or args.spacing is None:
        raise ValueError("provide either --like <volume.json> or both --dims and --spacing")
    return GridGeometry(args.dims, args.spacing, args.origin)


def cmd_run(args) -> int:
    config = load_config(args.config, seed_override=args.seed)
    if args.out is not None:
        config = type(config)(**{**config.__dict__, "report_path": args.out})
    if args.format is not None:
        config = type(config)(**{**config.__dict__, "report_format": args.format})
    if args.dump_intermediates is not None:
        config = type(config)(**{**config.__dict__, "dump_intermediates": args.dump_intermediates})
    report = run_pipeline(config)
    metrics = report.to_json_obj()["metrics"]
    print(json.dumps({"report": config.report_path, "metrics": metrics}, sort_keys=True))
    return 0


def cmd_phantom(args) -> int:
    spec = {
        "kind": args.kind,
        "dims": list(args.dims),
        "spacing_mm": list(args.spacing),
        "origin_mm": list(args.origin),
        "fg_mean": args.fg_mean,
        "bg_mean": args.bg_mean,
        "noise_sigma": args.noise_sigma,
        "seed": args.seed,
    }
    if args.kind == "sphere":
        if args.radius is None:
            raise ValueError("--radius is required for sphere phantoms")
        spec["radius_mm"] = args.radius
    else:
        if args.outer_radius is None or args.wall is None:
            raise ValueError("--outer-radius and --wall are required for shell phantoms")
        spec["outer_radius_mm"] = args.outer_radius
        spec["wall_mm"] = args.wall
    phantom = PhantomSpec.from_dict(spec, "phantom")
    fileio.write_volume(phantom.render(), args.out)
    if args.mask_out:
        fileio.write_volume(phantom.ground_truth_mask(), args.mask_out)
    print(f"wrote {args.out}")
    return 0


def cmd_segment(args) -> int:
    vol = fileio.read_volume(args.volume)
    if not isinstance(vol, ScalarVolume):
        raise ValueError(f"{args.volume} holds a mask; segmentation needs a scalar volume")
    config = SegmentationConfig(
        method=args.method,
        gmm=GmmConfig(seed=args.gmm_seed, max_samples=args.gmm_max_samples),
        rg=RegionGrowConfig(
            seeds=tuple(args.seeds or ()),
            tolerance=args.tolerance,
            connectivity=args.connectivity,
        ),
    )
    mask, details = segment(vol, config)
    fileio.write_volume(mask, args.out)
    print(json.dumps({"out": str(args.out), **details}, sort_keys=True))
    return 0


def cmd_voxelize(args) -> int:
    mesh = fileio.read_mesh(args.mesh)
    geometry = _geometry_from_args(args)
    mask = voxelize_mesh(mesh, geometry)
    fileio.write_volume(mask, args.out)
    print(
        json.dumps(
            {"out": str(args.out), "foreground_fraction": foreground_fraction(mask)},
            sort_keys=True,
        )
    )
    return 0


def cmd_align(args) -> int:
    moving = fileio.read_volume(args.moving)
    fixed = fileio.read_volume(args.fixed)
    if not isinstance(moving, BinaryMask) or not isinstance(fixed, BinaryMask):
        raise ValueError("align expects two binary masks")
    mask = moving
    if any(v != 0 for v in args.coarse_rotation) or any(v != 0 for v in args.coarse_translation):
        t = coarse_transform_about_grid_center(
            moving.geometry, args.coarse_rotation, args.coarse_translation
        )
        mask = apply_rigid_to_mask(mask, t, moving.geometry)
    t_fine = kabsch_umeyama(pca_landmarks(mask), pca_landmarks(fixed))
    aligned = apply_rigid_to_mask(mask, t_fine, fixed.geometry)
    fileio.write_volume(aligned, args.out)
    if args.transform_out:
        Path(args.transform_out).write_text(
            json.dumps(
                {
                    "rotation": t_fine.rotation.tolist(),
                    "translation_mm": t_fine.translation.tolist(),
                },
                indent=2,
            )
            + "\n",
            encoding="utf-8",
        )
    print(f"wrote {args.out}")
    return 0


def cmd_extract(args) -> int:
    vol = fileio.read_volume(args.volume)
    iso = args.iso
    mesh = marching_cubes(vol, iso)
    if args.smooth_iterations > 0:
        mesh = laplacian_smooth(mesh, args.smooth_lambda, args.smooth_iterations)
    fileio.write_mesh(mesh, args.out)
    print(
        json.dumps(
            {"out": str(args.out), "vertices": mesh.n_vertices, "triangles": mesh.n_triangles},
            sort_keys=True,
        )
    )
    return 0


def cmd_register(args) -> int:
    src = mesh_to_pointcloud(fileio.read_mesh(args.source))
    dst = mesh_to_pointcloud(fileio.read_mesh(args.target))
    config = RegistrationConfig(
        downsample_voxel=args.downsample_voxel,
        normal_k=args.normal_k,
        fpfh_radius=args.fpfh_radius,
        ransac=RansacConfig(seed=args.seed, max_iterations=args.ransac_iterations),
        icp=IcpConfig(max_correspondence=args.max_correspondence),
    )
    icp, ransac = register_clouds(src, dst, config)
    out = {
        "rotation": icp.transform.rotation.tolist(),
        "translation_mm": icp.transform.translation.tolist(),
        "fitness": icp.fitness,
        "inlier_rmse": icp.inlier_rmse,
        "ransac_fitness": ransac.fitness,
        "iterations_used": icp.iterations_used,
        "converged": icp.converged,
    }
    if args.out:
        Path(args.out).write_text(json.dumps(out, indent=2, sort_keys=True) + "\n", encoding="utf-8")
    print(json.dumps(out, sort_keys=True))
    return 0


def cmd_evaluate(args) -> int:
    pred = fileio.read_volume(args.pred)
    ref = fileio.read_volume(args.ref)
    if not isinstance(pred, BinaryMask) or not isinstance(ref, BinaryMask):
        raise ValueError("evaluate expects two binary masks")
    voxel = VoxelMetrics.from_masks(pred, ref)
    if args.pred_mesh and args.ref_mesh:
        src = mesh_to_pointcloud(fileio.read_mesh(args.pred_mesh))
        dst = mesh_to_pointcloud(fileio.read_mesh(args.ref_mesh))
        surface = SurfaceMetrics.from_clouds(src, dst)
    else:
        surface = SurfaceMetrics(
            chamfer_sq_mm2=0.0, chamfer_mm=0.0, ahd_mm=0.0, rmse_mm=0.0
        )
    report = MetricsReport(
        geometry_label=args.label,
        segmenter=args.segmenter,
        config_echo={"pred": str(args.pred), "ref": str(args.ref)},
        foreground_fraction_reference=foreground_fraction(ref),
        voxel=voxel,
        surface=surface,
        registration={},
    )
    if args.out:
        fileio.write_report(report, args.out, args.format)
    print(json.dumps(report.to_json_obj()["metrics"], sort_keys=True))
    return 0


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="voxrec",
        description="Voxel-grid reconstruction pipeline and accuracy metrics",
    )
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("run", help="run the full pipeline from a JSON config")
    p.add_argument("--config", required=True)
    p.add_argument("--out", help="override the report path from the config")
    p.add_argument("--format", choices=("json", "csv"))
    p.add_argument("--dump-intermediates", metavar="DIR")
    p.add_argument("--seed", type=int, help="override every seed in the config")
    p.set_defaults(func=cmd_run)

    p = sub.add_parser("phantom", help="generate a synthetic phantom volume")
    p.add_argument("--kind", choices=("sphere", "shell"), required=True)
    p.add_argument("--radius", type=float)
    p.add_argument("--outer-radius", type=float)
    p.add_argument("--wall", type=float)
    p.add_argument("--dims", type=lambda s: _triplet(s, int), required=True)
    p.add_argument("--spacing", type=_triplet, required=True)
    p.add_argument("--origin", type=_triplet, default=(0.0, 0.0, 0.0))
    p.add_argument("--fg-mean", type=float, default=1000.0)
    p.add_argument("--bg-mean", type=float, default=0.0)
    p.add_argument("--noise-sigma", type=float, default=0.0)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--out", required=True)
    p.add_argument("--mask-out", help="also write the ground-truth mask")
    p.set_defaults(func=cmd_phantom)

    p = sub.add_parser("segment", help="segment a scalar volume into a mask")
    p.add_argument("--volume", required=True)
    p.add_argument("--method", choices=("otsu", "gmm", "region_growing"), default="otsu")
    p.add_argument("--seeds", type=_seed_list, help='e.g. "10,12,14;20,20,20"')
    p.add_argument("--tolerance", type=float, default=0.0)
    p.add_argument("--connectivity", type=int, choices=(6, 26), default=6)
    p.add_argument("--gmm-seed", type=int, default=0)
    p.add_argument("--gmm-max-samples", type=int, default=1_000_000)
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_segment)

    p = sub.add_parser("voxelize", help="rasterize a watertight mesh onto a grid")
    p.add_argument("--mesh", required=True)
    p.add_argument("--like", help="copy the grid of this volume header")
    p.add_argument("--dims", type=lambda s: _triplet(s, int))
    p.add_argument("--spacing", type=_triplet)
    p.add_argument("--origin", type=_triplet, default=(0.0, 0.0, 0.0))
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_voxelize)

    p = sub.add_parser("align", help="PCA landmarks + rigid fit of moving onto fixed")
    p.add_argument("--moving", required=True)
    p.add_argument("--fixed", required=True)
    p.add_argument("--coarse-rotation", type=_triplet, default=(0.0, 0.0, 0.0))
    p.add_argument("--coarse-translation", type=_triplet, default=(0.0, 0.0, 0.0))
    p.add_argument("--out", required=True)
    p.add_argument("--transform-out")
    p.set_defaults(func=cmd_align)

    p = sub.add_parser("extract", help="marching-cubes isosurface of a volume or mask")
    p.add_argument("--volume", required=True)
    p.add_argument("--iso", type=float, help="iso level (defaults to 0.5 for masks)")
    p.add_argument("--smooth-lambda", type=float, default=0.5)
    p.add_argument("--smooth-iterations", type=int, default=0)
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_extract)

    p = sub.add_parser("register", help="coarse+fine registration of two meshes")
    p.add_argument("--source", required=True)
    p.add_argument("--target", required=True)
    p.add_argument("--downsample-voxel", type=float, default=1.0)
    p.add_argument("--normal-k", type=int, default=30)
    p.add_argument("--fpfh-radius", type=float)
    p.add_argument("--max-correspondence", type=float)
    p.add_argument("--ransac-iterations", type=int, default=100_000)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--out")
    p.set_defaults(func=cmd_register)

    p = sub.add_parser("evaluate", help="voxel (and optional surface) metrics of two masks")
    p.add_argument("--pred", required=True)
    p.add_argument("--ref", required=True)
    p.add_argument("--pred-mesh")
    p.add_argument("--ref-mesh")
    p.add_argument("--label", default="unnamed")
    p.add_argument("--segmenter", default="unknown")
    p.add_argument("--out")
    p.add_argument("--format", choices=("json", "csv"), default="json")
    p.set_defaults(func=cmd_evaluate)
    return parser


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        return args.func(args)
    except PipelineStageError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1
    except (ConfigError, fileio.FormatError, ValueError, OSError) as exc:
        print(f"error: {args.command}: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
