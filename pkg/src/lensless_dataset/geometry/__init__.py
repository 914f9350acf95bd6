"""Registration chain: distortion calibration, homographies, warping."""
from .distortion import (
    DistortionModel,
    calibrate_distortion,
    distort,
    distort_image,
    distort_normalized,
    project_points,
    undistort_image,
    undistort_points,
)
from .grid import CirclesGridSpec, detect_grid, fit_grid_homography, generate_grid_points, render_grid
from .homography import (
    Homography,
    PhotometricResult,
    SingularHomographyError,
    apply_homography,
    estimate_homography_dlt,
    ransac_homography,
    refine_homography_photometric,
    reprojection_errors,
    warp,
)
