"""voxrec: 3D reconstruction pipeline evaluation on synthetic phantoms.

Segmentation of scalar voxel grids, rigid voxel-grid alignment, isosurface
extraction, two-stage point-cloud registration and voxel/surface accuracy
metrics, tied together by a config-driven pipeline runner.
"""

from .kernels import USING_COMPILED

__version__ = "0.1.0"

__all__ = ["USING_COMPILED", "__version__"]
