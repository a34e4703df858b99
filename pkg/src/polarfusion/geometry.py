"""Front-view camera image -> BEV-Cartesian -> BEV-Polar.

Axis convention: vehicle X forward, Y left, Z up; the camera sits at
(0, 0, h) looking along +X, pitched down by ``pitch`` degrees. Image u grows
rightward and v downward, pixel centres at integer coordinates.
"""
from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .interp import spline_sample


class GeometryError(ValueError):
    pass


def vehicle_to_camera_rotation(pitch_deg: float) -> np.ndarray:
    """Rows are the camera right, down and optical axes expressed in vehicle coordinates."""
    p = np.deg2rad(pitch_deg)
    right = [0.0, -1.0, 0.0]
    down = [-np.sin(p), 0.0, -np.cos(p)]
    forward = [np.cos(p), 0.0, -np.sin(p)]
    return np.array([right, down, forward])


@dataclass(frozen=True)
class CameraModel:
    intrinsics: np.ndarray
    height: float
    pitch: float
    homography: np.ndarray = field(repr=False)

    @property
    def rotation(self) -> np.ndarray:
        return vehicle_to_camera_rotation(self.pitch)

    @property
    def center(self) -> np.ndarray:
        return np.array([0.0, 0.0, self.height])

    def project(self, points) -> np.ndarray:
        """Full pinhole projection of vehicle-frame points (..., 3) to pixels (..., 2) as (u, v)."""
        pts = np.asarray(points, dtype=np.float64)
        cam = (pts - self.center) @ self.rotation.T
        uvw = cam @ self.intrinsics.T
        return uvw[..., :2] / uvw[..., 2:3]

    def ground_to_pixel(self, x, y):
        x, y = np.asarray(x, dtype=np.float64), np.asarray(y, dtype=np.float64)
        e = self.homography
        w = e[2, 0] * x + e[2, 1] * y + e[2, 2]
        u = (e[0, 0] * x + e[0, 1] * y + e[0, 2]) / w
        v = (e[1, 0] * x + e[1, 1] * y + e[1, 2]) / w
        return u, v, w

    def pixel_to_ground(self, u, v):
        inv = np.linalg.inv(self.homography)
        u, v = np.asarray(u, dtype=np.float64), np.asarray(v, dtype=np.float64)
        w = inv[2, 0] * u + inv[2, 1] * v + inv[2, 2]
        return (inv[0, 0] * u + inv[0, 1] * v + inv[0, 2]) / w, (inv[1, 0] * u + inv[1, 1] * v + inv[1, 2]) / w


def build_camera_model(intrinsics, height: float, pitch: float) -> CameraModel:
    """Ground-plane homography ``K [r1 r2 t]`` mapping (x, y, 1) on Z=0 to image pixels."""
    k = np.asarray(intrinsics, dtype=np.float64)
    if k.shape != (3, 3):
        raise GeometryError("intrinsics must be 3x3")
    if abs(np.linalg.det(k)) < 1e-12:
        raise GeometryError("intrinsic matrix is singular")
    if k[0, 0] <= 0 or k[1, 1] <= 0:
        raise GeometryError("focal lengths must be positive")
    if not height > 0:
        raise GeometryError(f"camera height must be positive, got {height}")
    rot = vehicle_to_camera_rotation(pitch)
    t = -rot @ np.array([0.0, 0.0, height])
    e = k @ np.column_stack([rot[:, 0], rot[:, 1], t])
    if abs(np.linalg.det(e)) < 1e-12:
        raise GeometryError("ground-plane homography is degenerate")
    return CameraModel(k.copy(), float(height), float(pitch), e)


@dataclass(frozen=True)
class BevGridSpec:
    """Ground window [xmin, xmax, ymin, ymax] rasterised to nrows x ncols.

    Top row is xmax (far), bottom row xmin (near); left column is ymax.
    """

    xmin: float = 5.0
    xmax: float = 50.0
    ymin: float = -22.0
    ymax: float = 22.0
    nrows: int = 216
    ncols: int = 250

    def __post_init__(self):
        if not (self.xmax > self.xmin >= 0 and self.ymax > self.ymin):
            raise GeometryError(f"invalid BEV window {self.eta}")
        if self.nrows < 2 or self.ncols < 2:
            raise GeometryError("BEV raster needs at least 2 x 2 pixels")

    @classmethod
    def from_eta(cls, eta, output) -> "BevGridSpec":
        return cls(*[float(v) for v in eta], int(output[0]), int(output[1]))

    @property
    def eta(self) -> tuple:
        return (self.xmin, self.xmax, self.ymin, self.ymax)

    @property
    def row_step(self) -> float:
        return (self.xmax - self.xmin) / (self.nrows - 1)

    @property
    def col_step(self) -> float:
        return (self.ymax - self.ymin) / (self.ncols - 1)

    def pixel_to_ground(self, row, col):
        return self.xmax - np.asarray(row) * self.row_step, self.ymax - np.asarray(col) * self.col_step

    def ground_to_pixel(self, x, y):
        return (self.xmax - np.asarray(x)) / self.row_step, (self.ymax - np.asarray(y)) / self.col_step


@dataclass(frozen=True)
class PolarGridSpec:
    """Range x azimuth raster. Bin i covers [i, i+1) * range_resolution; bin j is
    centred on (j + 0.5 - azimuth_center) * azimuth_resolution degrees."""

    n_range: int = 512
    n_azimuth: int = 256
    range_resolution: float = 50.0 / 512
    azimuth_resolution: float = 180.0 / 256
    azimuth_center: float = 128.0

    def __post_init__(self):
        if self.n_range < 1 or self.n_azimuth < 1:
            raise GeometryError("polar grid needs positive bin counts")
        if self.range_resolution <= 0 or self.azimuth_resolution <= 0:
            raise GeometryError("polar resolutions must be positive")

    @classmethod
    def camera_default(cls) -> "PolarGridSpec":
        return cls()

    @classmethod
    def detection_grid(cls, n_range=128, n_azimuth=224, range_resolution=0.8, azimuth_resolution=0.8):
        return cls(n_range, n_azimuth, range_resolution, azimuth_resolution, n_azimuth / 2)

    @property
    def max_range(self) -> float:
        return self.n_range * self.range_resolution

    @property
    def azimuth_span(self) -> float:
        return self.n_azimuth * self.azimuth_resolution

    def bin_to_polar(self, i, j):
        r = (np.asarray(i) + 0.5) * self.range_resolution
        theta = (np.asarray(j) + 0.5 - self.azimuth_center) * self.azimuth_resolution
        return r, theta

    def polar_to_cell(self, r, theta):
        """Integer cell (i, j) containing the polar point (may be out of range)."""
        i = np.floor(np.asarray(r) / self.range_resolution).astype(int)
        j = np.floor(np.asarray(theta) / self.azimuth_resolution + self.azimuth_center).astype(int)
        return i, j

    def contains_cell(self, i, j):
        i, j = np.asarray(i), np.asarray(j)
        return (i >= 0) & (i < self.n_range) & (j >= 0) & (j < self.n_azimuth)

    def range_bin_to_row(self, i):
        """Raster row of range bin ``i`` (near ranges at the bottom)."""
        return self.n_range - 1 - np.asarray(i)

    def scaled(self, range_factor: int, azimuth_bins: int) -> "PolarGridSpec":
        """Same extent with ``range_factor`` times finer range bins and ``azimuth_bins`` columns."""
        span = self.azimuth_span
        return PolarGridSpec(
            self.n_range * range_factor,
            azimuth_bins,
            self.range_resolution / range_factor,
            span / azimuth_bins,
            self.azimuth_center * azimuth_bins / self.n_azimuth,
        )


@dataclass
class RgbImage:
    """H x W x 3 float samples in [0, 1] with a coverage mask (False = no source data)."""

    pixels: np.ndarray
    mask: np.ndarray | None = None

    def __post_init__(self):
        self.pixels = np.asarray(self.pixels)
        if self.pixels.dtype == np.uint8:
            self.pixels = self.pixels.astype(np.float32) / 255.0
        if self.pixels.ndim != 3 or self.pixels.shape[2] != 3:
            raise ValueError(f"RGB image must be H x W x 3, got {self.pixels.shape}")
        if self.mask is None:
            self.mask = np.ones(self.pixels.shape[:2], dtype=bool)
        self.mask = np.asarray(self.mask, dtype=bool)

    @property
    def shape(self):
        return self.pixels.shape


def cartesian_to_polar_indices(x, y):
    """Return (theta in degrees within (-180, 180], r >= 0)."""
    x, y = np.asarray(x, dtype=np.float64), np.asarray(y, dtype=np.float64)
    if np.any((x == 0) & (y == 0)):
        raise GeometryError("azimuth is undefined at the origin")
    theta = np.degrees(np.arctan2(y, x))
    theta = np.where(theta <= -180.0, theta + 360.0, theta)
    return theta, np.hypot(x, y)


def polar_to_pixel(theta, r):
    """Return (theta_pixel, r_pixel) = (r sin theta, r cos theta) with theta in degrees."""
    t = np.deg2rad(np.asarray(theta, dtype=np.float64))
    r = np.asarray(r, dtype=np.float64)
    return r * np.sin(t), r * np.cos(t)


def image_to_bev_cartesian(img: RgbImage, model: CameraModel, grid: BevGridSpec, order: int = 1) -> RgbImage:
    """Inverse-warp the camera image onto the ground window."""
    rows, cols = np.mgrid[0:grid.nrows, 0:grid.ncols]
    x, y = grid.pixel_to_ground(rows, cols)
    u, v, w = model.ground_to_pixel(x, y)
    if np.any(w <= 0):
        raise GeometryError("part of the BEV window lies behind the camera")
    h, wd = img.pixels.shape[:2]
    inside = (u >= 0) & (u <= wd - 1) & (v >= 0) & (v <= h - 1)
    src_mask = spline_sample(img.mask.astype(np.float64), (v, u), order=1) > 0.999
    valid = inside & src_mask
    out = np.zeros((grid.nrows, grid.ncols, 3), dtype=np.float32)
    for c in range(3):
        out[..., c] = spline_sample(img.pixels[..., c], (v, u), order=order)
    out[~valid] = 0
    return RgbImage(np.clip(out, 0, 1), valid)


def bev_cartesian_to_polar(bev: RgbImage, grid: BevGridSpec, polar: PolarGridSpec, order: int = 3) -> RgbImage:
    """Resample a BEV-Cartesian image onto the polar raster, one channel at a time."""
    if bev.pixels.shape[:2] != (grid.nrows, grid.ncols):
        raise GeometryError(f"BEV image {bev.pixels.shape[:2]} does not match grid {grid.nrows}x{grid.ncols}")
    rows, cols = np.mgrid[0:polar.n_range, 0:polar.n_azimuth]
    r, theta = polar.bin_to_polar(polar.n_range - 1 - rows, cols)
    x_src, y_src = polar_to_pixel(theta, r)[::-1]
    src_row, src_col = grid.ground_to_pixel(x_src, y_src)
    inside = (src_row >= 0) & (src_row <= grid.nrows - 1) & (src_col >= 0) & (src_col <= grid.ncols - 1)
    src_mask = spline_sample(bev.mask.astype(np.float64), (src_row, src_col), order=1) > 0.999
    valid = inside & src_mask
    if not valid.any():
        raise GeometryError("polar grid and BEV window do not overlap")
    out = np.zeros((polar.n_range, polar.n_azimuth, 3), dtype=np.float32)
    for c in range(3):
        out[..., c] = spline_sample(bev.pixels[..., c], (src_row, src_col), order=order)
    out[~valid] = 0
    return RgbImage(np.clip(out, 0, 1), valid)


def camera_to_polar(img: RgbImage, model: CameraModel, grid: BevGridSpec, polar: PolarGridSpec) -> RgbImage:
    """Both pipeline steps: perspective warp, then polar resampling."""
    return bev_cartesian_to_polar(image_to_bev_cartesian(img, model, grid), grid, polar)


def polar_image_to_tensor(img: RgbImage) -> np.ndarray:
    """3 x n_range x n_azimuth array with range bin 0 first (the raster is stored near-at-bottom)."""
    return np.ascontiguousarray(img.pixels[::-1].transpose(2, 0, 1)).astype(np.float32)


def bev_image_to_tensor(img: RgbImage) -> np.ndarray:
    """3 x nrows x ncols with the near edge first, mirroring :func:`polar_image_to_tensor`."""
    return np.ascontiguousarray(img.pixels[::-1].transpose(2, 0, 1)).astype(np.float32)
