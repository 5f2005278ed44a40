"""Ground-truth heatmap and offset rendering at output (strided) resolution.

Each lesion contributes one Gaussian kernel per keypoint role; per-role maps
combine kernels with an element-wise maximum, so values stay in [0, 1] and
the exact keypoint cell is always 1. Offset planes store the sub-cell
fraction lost by the stride, written only at ground-truth cells (and never
for the center role).
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from .geometry import ExtremePoints, Point2

# Fixed channel orders; serialization and grouping both rely on them.
KEYPOINT_CHANNELS = ("top", "left", "bottom", "right", "center")
EXTREME_ROLES = ("top", "left", "bottom", "right")
OFFSET_CHANNELS = (
    "top_dx", "top_dy",
    "left_dx", "left_dy",
    "bottom_dx", "bottom_dy",
    "right_dx", "right_dy",
)

# largest float32 strictly below 1: offsets are targets in [0, 1)
_MAX_OFFSET = float(np.nextafter(np.float32(1.0), np.float32(0.0)))

Cell = tuple[int, int]  # (row, col) on the output grid


@dataclass
class HeatmapBundle:
    """Five keypoint maps plus eight offset planes at output resolution.

    ``keypoint_maps`` has shape (5, H, W) in KEYPOINT_CHANNELS order and
    ``offset_maps`` shape (8, H, W) in OFFSET_CHANNELS order, both float32.
    ``input_size`` is (width, height) in input pixels.
    """

    keypoint_maps: np.ndarray
    offset_maps: np.ndarray
    stride: int
    input_size: tuple[int, int]

    def __post_init__(self) -> None:
        kp, off = self.keypoint_maps, self.offset_maps
        if kp.ndim != 3 or kp.shape[0] != len(KEYPOINT_CHANNELS):
            raise ValueError(f"keypoint_maps must be (5, H, W), got {kp.shape}")
        if off.shape != (len(OFFSET_CHANNELS),) + kp.shape[1:]:
            raise ValueError(
                f"offset_maps must be (8, {kp.shape[1]}, {kp.shape[2]}), got {off.shape}"
            )
        if kp.dtype != np.float32 or off.dtype != np.float32:
            raise ValueError("heatmap planes must be float32")
        if self.stride < 1:
            raise ValueError(f"stride must be >= 1, got {self.stride}")

    @property
    def grid_shape(self) -> tuple[int, int]:
        return self.keypoint_maps.shape[1:]

    def keypoint_map(self, role: str) -> np.ndarray:
        return self.keypoint_maps[KEYPOINT_CHANNELS.index(role)]

    @classmethod
    def zeros(
        cls, out_h: int, out_w: int, stride: int, input_size: tuple[int, int]
    ) -> HeatmapBundle:
        return cls(
            keypoint_maps=np.zeros((5, out_h, out_w), dtype=np.float32),
            offset_maps=np.zeros((8, out_h, out_w), dtype=np.float32),
            stride=stride,
            input_size=input_size,
        )


@dataclass
class TargetBundle:
    """Rendered training targets plus the bookkeeping the losses need.

    ``gt_cells`` maps each extreme role to one (cell, (dx, dy)) entry per
    annotation, in annotation order. Offsets are stored after float32
    rounding so they match the planes bit for bit.
    """

    bundle: HeatmapBundle
    n_objects: int
    gt_cells: dict[str, list[tuple[Cell, tuple[float, float]]]] = field(
        default_factory=dict
    )


def gaussian_radius(
    box_width: float, box_height: float, min_overlap: float = 0.3
) -> int:
    """Kernel radius in output cells for a box of the given cell dimensions.

    The radius is the largest r such that the box translated diagonally by
    (r, r) still overlaps the original with IoU >= ``min_overlap``; solving
    (1 + o) * (w - r) * (h - r) >= 2 * o * w * h for the smaller root of the
    quadratic gives the closed form. The result is floored to an integer and
    never smaller than 1.
    """
    if box_width <= 0.0 or box_height <= 0.0:
        raise ValueError(
            f"box dimensions must be positive, got {box_width} x {box_height}"
        )
    if not 0.0 < min_overlap < 1.0:
        raise ValueError(f"min_overlap must be in (0, 1), got {min_overlap}")
    kappa = (1.0 - min_overlap) / (1.0 + min_overlap)
    b = box_width + box_height
    c = box_width * box_height * kappa
    r = (b - math.sqrt(b * b - 4.0 * c)) / 2.0
    return max(1, int(math.floor(r)))


def gaussian_kernel(radius: int, sigma_divisor: float = 3.0) -> np.ndarray:
    """(2r+1)^2 kernel exp(-d^2 / (2 sigma^2)) with sigma = r / divisor."""
    sigma = radius / sigma_divisor
    ax = np.arange(-radius, radius + 1, dtype=np.float64)
    d2 = ax[None, :] ** 2 + ax[:, None] ** 2
    return np.exp(-d2 / (2.0 * sigma * sigma))


def draw_gaussian(
    heatmap: np.ndarray,
    cell: Cell,
    radius: int,
    peak: float = 1.0,
    sigma_divisor: float = 3.0,
) -> None:
    """Max-combine a Gaussian kernel into ``heatmap`` in place.

    The kernel is clipped at grid borders. With peak = 1 the center cell
    becomes exactly 1.0.
    """
    row, col = cell
    h, w = heatmap.shape
    kernel = (gaussian_kernel(radius, sigma_divisor) * peak).astype(np.float32)

    top = min(row, radius)
    bottom = min(h - row, radius + 1)
    left = min(col, radius)
    right = min(w - col, radius + 1)

    view = heatmap[row - top : row + bottom, col - left : col + right]
    kview = kernel[radius - top : radius + bottom, radius - left : radius + right]
    np.maximum(view, kview, out=view)


def offset_target(p: Point2, stride: int) -> tuple[float, float]:
    """Componentwise fractional part of p / stride, each in [0, 1)."""
    if stride < 1:
        raise ValueError(f"stride must be >= 1, got {stride}")
    qx = p.x / stride
    qy = p.y / stride
    return (qx - math.floor(qx), qy - math.floor(qy))


def keypoint_cell(p: Point2, stride: int) -> Cell:
    """Output-grid cell floor(p / stride) as (row, col)."""
    return (int(math.floor(p.y / stride)), int(math.floor(p.x / stride)))


def render_targets(
    annotations: list[ExtremePoints],
    out_h: int,
    out_w: int,
    stride: int,
    min_overlap: float = 0.3,
    sigma_divisor: float = 3.0,
    input_size: tuple[int, int] | None = None,
) -> TargetBundle:
    """Render multi-peak Gaussian targets for a set of lesion keypoints.

    Every keypoint, divided by the stride, must land inside the output grid;
    a violation raises ValueError naming the offending annotation. Rendering
    is order-independent (element-wise max is commutative). If two
    annotations share a ground-truth cell for the same role, the later
    annotation's offsets win at that cell.

    ``input_size`` records the source image dimensions in the bundle;
    it defaults to (out_w * stride, out_h * stride).
    """
    if input_size is None:
        input_size = (out_w * stride, out_h * stride)
    bundle = HeatmapBundle.zeros(out_h, out_w, stride, input_size)
    gt_cells: dict[str, list[tuple[Cell, tuple[float, float]]]] = {
        role: [] for role in EXTREME_ROLES
    }

    for index, ann in enumerate(annotations):
        for role, p in zip(KEYPOINT_CHANNELS, ann.points()):
            row, col = keypoint_cell(p, stride)
            if not (0 <= row < out_h and 0 <= col < out_w):
                raise ValueError(
                    f"annotation {index}: {role} keypoint ({p.x}, {p.y}) falls "
                    f"outside the {out_w}x{out_h} output grid at stride {stride}"
                )

        box_w = (ann.right.x - ann.left.x) / stride
        box_h = (ann.bottom.y - ann.top.y) / stride
        radius = gaussian_radius(box_w, box_h, min_overlap)

        for role_idx, (role, p) in enumerate(zip(KEYPOINT_CHANNELS, ann.points())):
            cell = keypoint_cell(p, stride)
            draw_gaussian(
                bundle.keypoint_maps[role_idx], cell, radius,
                sigma_divisor=sigma_divisor,
            )
            if role == "center":
                continue  # no offset prediction for the center point
            dx, dy = offset_target(p, stride)
            dx32 = min(float(np.float32(dx)), _MAX_OFFSET)
            dy32 = min(float(np.float32(dy)), _MAX_OFFSET)
            row, col = cell
            bundle.offset_maps[2 * role_idx][row, col] = dx32
            bundle.offset_maps[2 * role_idx + 1][row, col] = dy32
            gt_cells[role].append((cell, (dx32, dy32)))

    return TargetBundle(bundle=bundle, n_objects=len(annotations), gt_cells=gt_cells)
