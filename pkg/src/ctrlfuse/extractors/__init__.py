from .geometry import (BoxTrack, CameraModel, LidarScan, MapElement, Scene, backproject_depth,
                       encode_inverse_depth, fill_holes, hdmap_rasterize, lidar_depth_frames,
                       lidar_project, project_points)
from .image import (bilateral_blur, blur_video, canny_edges, depth_normalize, edge_video,
                    sample_blur_params, sample_canny_thresholds, seg_recolor, to_gray)

__all__ = [
    "BoxTrack", "CameraModel", "LidarScan", "MapElement", "Scene", "backproject_depth",
    "encode_inverse_depth", "fill_holes", "hdmap_rasterize", "lidar_depth_frames", "lidar_project",
    "project_points", "bilateral_blur", "blur_video", "canny_edges", "depth_normalize", "edge_video",
    "sample_blur_params", "sample_canny_thresholds", "seg_recolor", "to_gray",
]
