"""FAST-9 corner detection and BRIEF-256 binary descriptors."""

from __future__ import annotations

from dataclasses import dataclass, replace

import numpy as np

# Bresenham circle of radius 3 as (dy, dx), clockwise from the top.
CIRCLE = np.array(
    [
        (-3, 0), (-3, 1), (-2, 2), (-1, 3),
        (0, 3), (1, 3), (2, 2), (3, 1),
        (3, 0), (3, -1), (2, -2), (1, -3),
        (0, -3), (-1, -3), (-2, -2), (-3, -1),
    ],
    dtype=np.int64,
)
ARC_LENGTH = 9
N_BITS = 256
PATCH_SIZE = 48
BORDER = PATCH_SIZE // 2
SMOOTH_SIZE = 9


@dataclass(frozen=True)
class Keypoints:
    """A set of keypoints stored column-wise.

    Attributes:
        xy: ``(n, 2)`` integer pixel locations as (x, y).
        score: ``(n,)`` FAST corner response.
        descriptors: ``(n, 256)`` uint8 bit array (0/1), or None before
            description.
    """

    xy: np.ndarray
    score: np.ndarray
    descriptors: np.ndarray | None = None

    def __len__(self) -> int:
        return len(self.xy)

    def real(self) -> np.ndarray:
        """Descriptors as float vectors in {0, 1}^256."""
        if self.descriptors is None:
            raise ValueError("keypoints have no descriptors")
        return self.descriptors.astype(np.float64)

    def take(self, idx) -> Keypoints:
        desc = None if self.descriptors is None else self.descriptors[idx]
        return Keypoints(self.xy[idx], self.score[idx], desc)

    @staticmethod
    def empty() -> Keypoints:
        return Keypoints(
            np.zeros((0, 2), dtype=np.int64),
            np.zeros(0, dtype=np.int64),
            np.zeros((0, N_BITS), dtype=np.uint8),
        )


def hamming(a: np.ndarray, b: np.ndarray) -> int:
    return int(np.count_nonzero(np.asarray(a) != np.asarray(b)))


def _max_arc_min(ring: np.ndarray) -> np.ndarray:
    """Largest minimum over all circular runs of ARC_LENGTH entries (axis 0)."""
    m2 = np.minimum(ring, np.roll(ring, -1, axis=0))
    m4 = np.minimum(m2, np.roll(m2, -2, axis=0))
    m8 = np.minimum(m4, np.roll(m4, -4, axis=0))
    m9 = np.minimum(m8, np.roll(ring, -8, axis=0))
    return m9.max(axis=0)


def segment_scores(img: np.ndarray, rows: np.ndarray, cols: np.ndarray) -> np.ndarray:
    """FAST-9 score at the given pixels.

    The score is the largest integer threshold ``t`` for which 9 contiguous
    circle pixels are all ``> center + t`` or all ``< center - t``. Pixels
    that are not corners for any positive threshold get a score below 1.
    """
    center = img[rows, cols].astype(np.int16)
    ring = np.stack([img[rows + dy, cols + dx] for dy, dx in CIRCLE]).astype(np.int16)
    ring -= center
    best = np.maximum(_max_arc_min(ring), _max_arc_min(-ring))
    return best.astype(np.int64) - 1


def _check_size(img: np.ndarray, margin: int) -> None:
    h, w = img.shape
    if h < 2 * margin + 1 or w < 2 * margin + 1:
        raise ValueError(f"image {w}x{h} too small for border margin {margin}")


def fast_corners(
    img: np.ndarray, threshold: int, margin: int = BORDER
) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    """All FAST-9 corners before non-maximum suppression.

    Returns:
        ``(rows, cols, scores)`` in raster order.
    """
    if threshold <= 0:
        raise ValueError("FAST threshold must be positive")
    img = np.asarray(img, dtype=np.uint8)
    margin = max(int(margin), 3)
    _check_size(img, margin)
    h, w = img.shape
    inner = img[margin : h - margin, margin : w - margin].astype(np.int16)

    # a 9-arc always covers at least two of the four compass pixels
    bright = np.zeros(inner.shape, dtype=np.int8)
    dark = np.zeros(inner.shape, dtype=np.int8)
    for dy, dx in CIRCLE[::4]:
        ring = img[margin + dy : h - margin + dy, margin + dx : w - margin + dx].astype(np.int16)
        bright += ring > inner + threshold
        dark += ring < inner - threshold
    rows, cols = np.nonzero((bright >= 2) | (dark >= 2))
    rows += margin
    cols += margin
    scores = segment_scores(img, rows, cols)
    keep = scores >= threshold
    return rows[keep], cols[keep], scores[keep]


def non_max_suppression(
    rows: np.ndarray,
    cols: np.ndarray,
    scores: np.ndarray,
    shape: tuple[int, int],
    limit: int | None = None,
) -> np.ndarray:
    """Greedy 3x3 suppression; returns kept indices ordered by score.

    Candidates are visited by descending score, ties in raster order. A kept
    corner suppresses its 8 neighbours; suppressed corners suppress nothing,
    so plateaus of equal score thin out to a lattice instead of vanishing.
    """
    order = np.lexsort((cols, rows, -scores))
    blocked = np.zeros((shape[0] + 2, shape[1] + 2), dtype=bool)
    kept = []
    for idx in order:
        r = rows[idx] + 1
        c = cols[idx] + 1
        if blocked[r, c]:
            continue
        kept.append(idx)
        if limit is not None and len(kept) >= limit:
            break
        blocked[r - 1 : r + 2, c - 1 : c + 2] = True
    return np.asarray(kept, dtype=np.int64)


def detect_fast(
    img: np.ndarray,
    threshold: int = 20,
    max_keypoints: int | None = None,
    margin: int = BORDER,
) -> Keypoints:
    """Detect FAST-9 corners with 3x3 non-maximum suppression.

    Keypoints closer than ``margin`` pixels to the border are never
    reported, so BRIEF patches around them fit inside the image. Results are
    sorted by score descending and truncated to ``max_keypoints``.
    """
    img = np.asarray(img, dtype=np.uint8)
    rows, cols, scores = fast_corners(img, threshold, margin)
    kept = non_max_suppression(rows, cols, scores, img.shape, max_keypoints)
    xy = np.stack([cols[kept], rows[kept]], axis=1).reshape(-1, 2).astype(np.int64)
    return Keypoints(xy, scores[kept].astype(np.int64))


def brief_pattern(
    seed: int, n_bits: int = N_BITS, patch_size: int = PATCH_SIZE
) -> np.ndarray:
    """Sample BRIEF test pairs as ``(n_bits, 4)`` offsets ``(dy1, dx1, dy2, dx2)``.

    Offsets are drawn from an isotropic Gaussian with sigma = patch_size / 5,
    rounded and clipped to the patch. Degenerate pairs (identical points) are
    redrawn.
    """
    rng = np.random.default_rng(seed)
    sigma = patch_size / 5.0
    half = patch_size // 2 - 1
    pairs = np.zeros((0, 4), dtype=np.int64)
    while len(pairs) < n_bits:
        draw = np.clip(np.rint(rng.normal(0.0, sigma, size=(n_bits, 4))), -half, half)
        draw = draw.astype(np.int64)
        distinct = np.any(draw[:, :2] != draw[:, 2:], axis=1)
        pairs = np.concatenate([pairs, draw[distinct]])
    return pairs[:n_bits]


def box_sums(img: np.ndarray, size: int = SMOOTH_SIZE) -> np.ndarray:
    """Integer sums over a ``size`` x ``size`` box, edge-replicated borders."""
    pad = size // 2
    padded = np.pad(np.asarray(img, dtype=np.int64), pad, mode="edge")
    ii = np.zeros((padded.shape[0] + 1, padded.shape[1] + 1), dtype=np.int64)
    ii[1:, 1:] = padded.cumsum(0).cumsum(1)
    return ii[size:, size:] - ii[:-size, size:] - ii[size:, :-size] + ii[:-size, :-size]


def describe_brief(
    img: np.ndarray,
    kps: Keypoints,
    pattern_seed: int,
    pattern: np.ndarray | None = None,
) -> Keypoints:
    """Compute 256-bit BRIEF descriptors on a 9x9 box-smoothed image.

    Bit b is 1 iff the smoothed intensity at the first test point is strictly
    less than at the second; ties give 0.

    Raises:
        ValueError: a keypoint lies within the patch border.
    """
    img = np.asarray(img, dtype=np.uint8)
    if pattern is None:
        pattern = brief_pattern(pattern_seed)
    h, w = img.shape
    x = kps.xy[:, 0]
    y = kps.xy[:, 1]
    if len(kps) and (
        x.min() < BORDER or y.min() < BORDER or x.max() > w - 1 - BORDER or y.max() > h - 1 - BORDER
    ):
        raise ValueError(f"keypoint within {BORDER}px of the image border")
    smooth = box_sums(img)
    a = smooth[y[:, None] + pattern[None, :, 0], x[:, None] + pattern[None, :, 1]]
    b = smooth[y[:, None] + pattern[None, :, 2], x[:, None] + pattern[None, :, 3]]
    desc = (a < b).astype(np.uint8).reshape(len(kps), pattern.shape[0])
    return replace(kps, descriptors=desc)


def detect_and_describe(
    img: np.ndarray,
    threshold: int,
    max_keypoints: int | None,
    pattern: np.ndarray,
) -> Keypoints:
    kps = detect_fast(img, threshold, max_keypoints)
    return describe_brief(img, kps, 0, pattern=pattern)
