"""Geometric grouping: heatmap bundle in, scored candidate detections out.

Three steps: per-role local-peak extraction, brute-force association of one
peak per extreme role validated by the center-map response at the
quadruple's geometric center, and sub-cell refinement from the offset
planes. Enumeration is vectorized over (top, bottom) x (left, right) pair
blocks; the detection score is computed as

    (s_top + s_bottom) + (s_left + s_right) + 2 * s_center

with exactly that float64 association, so results are bit-reproducible and
independent of how the work is partitioned across workers.
"""

from __future__ import annotations

from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass
from typing import Literal, Mapping, Sequence

import numpy as np

from .geometry import BBox, ExtremePoints, Point2, bbox_from_extremes
from .targets import EXTREME_ROLES, HeatmapBundle

Cell = tuple[int, int]


@dataclass(frozen=True, slots=True)
class Peak:
    """One retained local maximum of a keypoint map."""

    cell: Cell  # (row, col)
    score: float
    role: str


@dataclass(frozen=True, slots=True)
class GroupingConfig:
    """Thresholds and caps for the grouping pipeline.

    ``tau_e``/``tau_c`` are strict lower bounds on extreme / center scores,
    ``k1`` caps peaks kept per map, ``k2`` caps retained combinations, and
    ``kernel`` is the odd window size for peak suppression. ``center_interp``
    selects how the center map is sampled at fractional coordinates.
    """

    tau_e: float = 0.1
    tau_c: float = 0.1
    k1: int = 40
    k2: int = 100
    kernel: int = 3
    center_interp: Literal["nearest", "bilinear"] = "nearest"

    def __post_init__(self) -> None:
        if not 0.0 <= self.tau_e <= 1.0 or not 0.0 <= self.tau_c <= 1.0:
            raise ValueError("thresholds must lie in [0, 1]")
        if self.k1 < 1 or self.k2 < 1:
            raise ValueError("k1 and k2 must be >= 1")
        if self.kernel < 1 or self.kernel % 2 == 0:
            raise ValueError(f"kernel must be odd and >= 1, got {self.kernel}")
        if self.center_interp not in ("nearest", "bilinear"):
            raise ValueError(f"unknown center_interp {self.center_interp!r}")


@dataclass(frozen=True, slots=True)
class Detection:
    """One grouped quadruple with its combination score.

    From :func:`enumerate_quadruples` the coordinates are output-grid cells;
    after :func:`refine_with_offsets` they are input pixels. ``bbox`` is the
    tight (unpadded) box of the extremes. ``source`` records test-time
    augmentation provenance.
    """

    extremes: ExtremePoints
    score: float
    bbox: BBox
    source: Literal["original", "flipped"] = "original"


def sort_key(det: Detection):
    """Total order: score desc, then geometry, then source.

    Deterministic regardless of list order, which makes pooled and
    partitioned pipelines reproduce sequential output exactly.
    """
    e = det.extremes
    return (
        -det.score,
        det.bbox.x1, det.bbox.y1, det.bbox.x2, det.bbox.y2,
        det.source,
        e.top.x, e.top.y, e.left.x, e.left.y,
        e.bottom.x, e.bottom.y, e.right.x, e.right.y,
    )


def _window_max(grid: np.ndarray, kernel: int) -> np.ndarray:
    """Max of the kernel x kernel neighborhood, borders use in-bounds cells."""
    pad = kernel // 2
    h, w = grid.shape
    padded = np.full((h + 2 * pad, w + 2 * pad), -np.inf, dtype=grid.dtype)
    padded[pad : pad + h, pad : pad + w] = grid
    out = np.full_like(grid, -np.inf)
    for di in range(kernel):
        for dj in range(kernel):
            np.maximum(out, padded[di : di + h, dj : dj + w], out=out)
    return out


def extract_peaks(
    heatmap: np.ndarray, cfg: GroupingConfig, role: str
) -> list[Peak]:
    """Local peaks of one map: neighborhood-max cells scoring above tau_e.

    A cell qualifies when it equals the maximum of its window (plateau cells
    all qualify) and its score strictly exceeds the threshold. Results are
    ordered by score descending, ties by row then column ascending, and
    truncated to ``k1``.
    """
    win = _window_max(heatmap, cfg.kernel)
    mask = (heatmap == win) & (heatmap > cfg.tau_e)
    rows, cols = np.nonzero(mask)
    if rows.size == 0:
        return []
    scores = heatmap[rows, cols].astype(np.float64)
    order = np.lexsort((cols, rows, -scores))[: cfg.k1]
    return [
        Peak(cell=(int(rows[i]), int(cols[i])), score=float(scores[i]), role=role)
        for i in order
    ]


def _center_scores_nearest(
    center_map: np.ndarray, crow: np.ndarray, ccol: np.ndarray
) -> np.ndarray:
    """Sample at the nearest cell, rounding halves up per component."""
    r = np.floor(crow + 0.5).astype(np.intp)
    c = np.floor(ccol + 0.5).astype(np.intp)
    np.clip(r, 0, center_map.shape[0] - 1, out=r)
    np.clip(c, 0, center_map.shape[1] - 1, out=c)
    return center_map[r[:, None], c[None, :]].astype(np.float64)


def _center_scores_bilinear(
    center_map: np.ndarray, crow: np.ndarray, ccol: np.ndarray
) -> np.ndarray:
    """Bilinear interpolation of the center map at fractional coordinates."""
    h, w = center_map.shape
    r0 = np.clip(np.floor(crow).astype(np.intp), 0, h - 1)
    c0 = np.clip(np.floor(ccol).astype(np.intp), 0, w - 1)
    r1 = np.minimum(r0 + 1, h - 1)
    c1 = np.minimum(c0 + 1, w - 1)
    fr = (crow - r0)[:, None]
    fc = (ccol - c0)[None, :]
    m = center_map.astype(np.float64)
    top = m[r0[:, None], c0[None, :]] * (1 - fc) + m[r0[:, None], c1[None, :]] * fc
    bot = m[r1[:, None], c0[None, :]] * (1 - fc) + m[r1[:, None], c1[None, :]] * fc
    return top * (1 - fr) + bot * fr


@dataclass
class _PairBlock:
    """Candidate arrays for one (top, bottom) x (left, right) block."""

    scores: np.ndarray
    cells: np.ndarray  # (n, 8) int: t_row, t_col, l_row, l_col, b_row, b_col, r_row, r_col
    centers_x: np.ndarray
    centers_y: np.ndarray


def _enumerate_block(
    t_rows, t_cols, t_scores, b_rows, b_cols, b_scores,
    l_rows, l_cols, l_scores, r_rows, r_cols, r_scores,
    center_map, cfg,
) -> _PairBlock | None:
    """Vectorized enumeration over one block of (t, b) pairs.

    Center row depends only on the (t, b) pair and center column only on
    (l, r), so the O(n^4) loop reduces to one gather over the outer product
    of valid pair lists.
    """
    ti, bi = np.nonzero(t_rows[:, None] <= b_rows[None, :])
    li, ri = np.nonzero(l_cols[:, None] <= r_cols[None, :])
    if ti.size == 0 or li.size == 0:
        return None

    crow = (t_rows[ti] + b_rows[bi]) * 0.5
    ccol = (l_cols[li] + r_cols[ri]) * 0.5
    if cfg.center_interp == "nearest":
        cscores = _center_scores_nearest(center_map, crow, ccol)
    else:
        cscores = _center_scores_bilinear(center_map, crow, ccol)

    s_tb = t_scores[ti] + b_scores[bi]
    s_lr = l_scores[li] + r_scores[ri]
    total = (s_tb[:, None] + s_lr[None, :]) + 2.0 * cscores

    keep_tb, keep_lr = np.nonzero(cscores > cfg.tau_c)
    if keep_tb.size == 0:
        return None

    scores = total[keep_tb, keep_lr]
    if scores.size > cfg.k2:
        # block-local prune; ties at the cut are kept so the cross-block
        # merge still sees every candidate the global top-k2 could select
        cut = np.partition(scores, scores.size - cfg.k2)[scores.size - cfg.k2]
        local = scores >= cut
        scores = scores[local]
        keep_tb, keep_lr = keep_tb[local], keep_lr[local]

    tk, bk = ti[keep_tb], bi[keep_tb]
    lk, rk = li[keep_lr], ri[keep_lr]
    cells = np.column_stack(
        (
            t_rows[tk], t_cols[tk], l_rows[lk], l_cols[lk],
            b_rows[bk], b_cols[bk], r_rows[rk], r_cols[rk],
        )
    ).astype(np.int64)
    return _PairBlock(
        scores=scores,
        cells=cells,
        centers_x=ccol[keep_lr],
        centers_y=crow[keep_tb],
    )


def _select_top_k2(blocks: list[_PairBlock], k2: int) -> _PairBlock | None:
    """Deterministic top-k2 across blocks: score desc, then cells ascending."""
    blocks = [b for b in blocks if b is not None]
    if not blocks:
        return None
    scores = np.concatenate([b.scores for b in blocks])
    cells = np.concatenate([b.cells for b in blocks])
    cx = np.concatenate([b.centers_x for b in blocks])
    cy = np.concatenate([b.centers_y for b in blocks])

    if scores.size > k2:
        # prune on score alone first, keeping everything tied at the cut
        cut = np.partition(scores, scores.size - k2)[scores.size - k2]
        keep = scores >= cut
        scores, cells, cx, cy = scores[keep], cells[keep], cx[keep], cy[keep]

    order = np.lexsort(
        (
            cells[:, 7], cells[:, 6], cells[:, 5], cells[:, 4],
            cells[:, 3], cells[:, 2], cells[:, 1], cells[:, 0],
            -scores,
        )
    )[:k2]
    return _PairBlock(scores[order], cells[order], cx[order], cy[order])


def enumerate_quadruples(
    peaks_by_role: Mapping[str, Sequence[Peak]],
    center_map: np.ndarray,
    cfg: GroupingConfig,
    workers: int = 1,
) -> list[Detection]:
    """Associate one peak per extreme role into scored detections.

    A quadruple is kept when its ordering is geometrically coherent
    (top row <= bottom row, left column <= right column) and the center map
    responds strictly above ``tau_c`` at the quadruple's geometric center.
    The top ``k2`` combinations by score survive, ties broken on the cell
    tuple. Coordinates in the result are output-grid cells.

    ``workers`` > 1 partitions the (top, bottom) pair space; the merged
    result is bit-identical to the sequential one.
    """
    arrays = {}
    for role in EXTREME_ROLES:
        plist = peaks_by_role.get(role, [])
        arrays[role] = (
            np.array([p.cell[0] for p in plist], dtype=np.float64),
            np.array([p.cell[1] for p in plist], dtype=np.float64),
            np.array([p.score for p in plist], dtype=np.float64),
        )
    if any(arrays[role][0].size == 0 for role in EXTREME_ROLES):
        return []

    t_rows, t_cols, t_scores = arrays["top"]
    l_rows, l_cols, l_scores = arrays["left"]
    b_rows, b_cols, b_scores = arrays["bottom"]
    r_rows, r_cols, r_scores = arrays["right"]

    n_chunks = max(1, min(workers, t_rows.size))
    chunk_bounds = np.linspace(0, t_rows.size, n_chunks + 1).astype(int)

    def run_chunk(lo: int, hi: int) -> _PairBlock | None:
        return _enumerate_block(
            t_rows[lo:hi], t_cols[lo:hi], t_scores[lo:hi],
            b_rows, b_cols, b_scores,
            l_rows, l_cols, l_scores,
            r_rows, r_cols, r_scores,
            center_map, cfg,
        )

    if n_chunks == 1:
        blocks = [run_chunk(0, t_rows.size)]
    else:
        with ThreadPoolExecutor(max_workers=n_chunks) as pool:
            futures = [
                pool.submit(run_chunk, int(lo), int(hi))
                for lo, hi in zip(chunk_bounds[:-1], chunk_bounds[1:])
                if hi > lo
            ]
            blocks = [f.result() for f in futures]

    top = _select_top_k2(blocks, cfg.k2)
    if top is None:
        return []

    detections = []
    for i in range(top.scores.size):
        trow, tcol, lrow, lcol, brow, bcol, rrow, rcol = (
            float(v) for v in top.cells[i]
        )
        extremes = ExtremePoints(
            top=Point2(tcol, trow),
            left=Point2(lcol, lrow),
            bottom=Point2(bcol, brow),
            right=Point2(rcol, rrow),
            center=Point2(float(top.centers_x[i]), float(top.centers_y[i])),
        )
        detections.append(
            Detection(
                extremes=extremes,
                score=float(top.scores[i]),
                bbox=bbox_from_extremes(extremes),
            )
        )
    return detections


def refine_with_offsets(
    detections: Sequence[Detection], offset_maps: np.ndarray, stride: int
) -> list[Detection]:
    """Map grid-cell detections to input pixels using the offset planes.

    Each extreme coordinate becomes stride * (cell + offset-at-cell); the
    center is recomputed from the refined extremes (the center role has no
    offsets) and the box regenerated.
    """
    refined = []
    for det in detections:
        e = det.extremes
        points = {}
        for role_idx, role in enumerate(EXTREME_ROLES):
            p = getattr(e, role)
            row, col = int(p.y), int(p.x)
            dx = float(offset_maps[2 * role_idx][row, col])
            dy = float(offset_maps[2 * role_idx + 1][row, col])
            points[role] = Point2(stride * (col + dx), stride * (row + dy))
        center = Point2(
            (points["left"].x + points["right"].x) / 2.0,
            (points["top"].y + points["bottom"].y) / 2.0,
        )
        extremes = ExtremePoints(
            top=points["top"], left=points["left"],
            bottom=points["bottom"], right=points["right"],
            center=center,
        )
        refined.append(
            Detection(
                extremes=extremes,
                score=det.score,
                bbox=bbox_from_extremes(extremes),
                source=det.source,
            )
        )
    return refined


def detect(
    bundle: HeatmapBundle, cfg: GroupingConfig = GroupingConfig(), workers: int = 1
) -> list[Detection]:
    """Full grouping pipeline for one heatmap bundle.

    Extracts peaks per extreme role, enumerates center-validated quadruples,
    and refines coordinates to input pixels. Output is ordered by score
    descending with deterministic tie-breaking.
    """
    peaks = {
        role: extract_peaks(bundle.keypoint_map(role), cfg, role)
        for role in EXTREME_ROLES
    }
    candidates = enumerate_quadruples(
        peaks, bundle.keypoint_map("center"), cfg, workers=workers
    )
    return refine_with_offsets(candidates, bundle.offset_maps, bundle.stride)
