from .geometry import (
    box_corners,
    boxes_overlap,
    normalize_angle,
    project_points,
    resample_polyline,
)

__all__ = ["box_corners", "boxes_overlap", "normalize_angle", "project_points", "resample_polyline"]
