"""Per-run metrics record shared by the pipeline and the file writers."""

from __future__ import annotations

from dataclasses import dataclass, field

from .metrics import SurfaceMetrics, VoxelMetrics


@dataclass(frozen=True)
class MetricsReport:
    """Everything measured in one pipeline run.

    ``config_echo`` holds every effective parameter including derived
    defaults and seeds, so the run is reproducible from the report alone;
    ``timing_ms`` is the only part excluded from byte-for-byte determinism.
    """

    geometry_label: str
    segmenter: str
    config_echo: dict
    foreground_fraction_reference: float
    voxel: VoxelMetrics
    surface: SurfaceMetrics
    registration: dict
    timing_ms: dict = field(default_factory=dict)

    def to_json_obj(self) -> dict:
        return {
            "geometry": self.geometry_label,
            "segmenter": self.segmenter,
            "config_echo": self.config_echo,
            "foreground_fraction": self.foreground_fraction_reference,
            "metrics": {
                "sensitivity": self.voxel.sensitivity,
                "specificity": self.voxel.specificity,
                "precision": self.voxel.precision,
                "dice": self.voxel.dice,
                "jaccard": self.voxel.jaccard,
                "volume_similarity": self.voxel.volume_similarity,
                "chamfer_sq_mm2": self.surface.chamfer_sq_mm2,
                "chamfer_mm": self.surface.chamfer_mm,
                "ahd_mm": self.surface.ahd_mm,
                "rmse_mm": self.surface.rmse_mm,
            },
            "registration": self.registration,
            "timing_ms": self.timing_ms,
        }

    def to_csv_row(self) -> dict:
        reg = self.registration
        return {
            "geometry": self.geometry_label,
            "segmenter": self.segmenter,
            "foreground_fraction": self.foreground_fraction_reference,
            "sensitivity": self.voxel.sensitivity,
            "specificity": self.voxel.specificity,
            "precision": self.voxel.precision,
            "dice": self.voxel.dice,
            "jaccard": self.voxel.jaccard,
            "volume_similarity": self.voxel.volume_similarity,
            "chamfer_sq_mm2": self.surface.chamfer_sq_mm2,
            "chamfer_mm": self.surface.chamfer_mm,
            "ahd_mm": self.surface.ahd_mm,
            "rmse_mm": self.surface.rmse_mm,
            "ransac_fitness": reg.get("ransac", {}).get("fitness"),
            "ransac_inlier_rmse": reg.get("ransac", {}).get("inlier_rmse"),
            "ransac_iterations": reg.get("ransac", {}).get("iterations_used"),
            "icp_fitness": reg.get("icp", {}).get("fitness"),
            "icp_inlier_rmse": reg.get("icp", {}).get("inlier_rmse"),
            "icp_iterations": reg.get("icp", {}).get("iterations_used"),
            "icp_converged": reg.get("icp", {}).get("converged"),
        }
