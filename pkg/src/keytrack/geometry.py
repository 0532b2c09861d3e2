"""Homography algebra, normalized DLT, RANSAC hypotheses and inlier sets.

Homographies are ``(3, 3)`` float arrays mapping template pixel coordinates
to frame pixel coordinates, normalized so that ``m[2, 2] == 1`` whenever that
entry is nonzero.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import TYPE_CHECKING

import numpy as np

if TYPE_CHECKING:
    from .model import CorrespondenceSet

DEGENERATE_W = 1e-12
DEDUP_TOL = 1e-6


class DegenerateHomography(ValueError):
    """A mapping sends a point to infinity or a sample is degenerate."""


@dataclass(frozen=True)
class InlierSet:
    """Inlier correspondences of one homography.

    Attributes:
        pairs: ``(n, 2)`` int array of (template index, frame index), at most
            one row per template index, ordered by template index.
        tau: distance threshold in pixels.
    """

    pairs: np.ndarray
    tau: float

    def __len__(self) -> int:
        return len(self.pairs)


def normalize(m: np.ndarray) -> np.ndarray:
    m = np.asarray(m, dtype=np.float64)
    if m[2, 2] != 0.0:
        return m / m[2, 2]
    return m.copy()


def translation(tx: float, ty: float) -> np.ndarray:
    return np.array([[1.0, 0.0, tx], [0.0, 1.0, ty], [0.0, 0.0, 1.0]])


def project(m: np.ndarray, pts: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """Apply ``m`` (or a stack of them) to ``(n, 2)`` points.

    Returns the dehomogenized points and the homogeneous third coordinate.
    Points with ``|w| <= 1e-12`` come back as inf.
    """
    pts = np.asarray(pts, dtype=np.float64)
    hom = np.concatenate([pts, np.ones((len(pts), 1))], axis=1)
    out = hom @ np.swapaxes(np.asarray(m, dtype=np.float64), -1, -2)
    w = out[..., 2]
    bad = np.abs(w) <= DEGENERATE_W
    safe = np.where(bad, 1.0, w)
    xy = out[..., :2] / safe[..., None]
    xy[bad] = np.inf
    return xy, w


def apply(m: np.ndarray, p) -> np.ndarray:
    """Projective action of ``m`` on a single 2-D point.

    Raises:
        DegenerateHomography: the point maps to infinity.
    """
    x, y = p
    out = np.asarray(m, dtype=np.float64) @ np.array([x, y, 1.0])
    if abs(out[2]) <= DEGENERATE_W:
        raise DegenerateHomography(f"point {p} maps to infinity")
    return out[:2] / out[2]


def _hartley(pts: np.ndarray) -> np.ndarray:
    """Similarity transforms (batched) moving points to zero mean, mean norm sqrt(2)."""
    centroid = pts.mean(axis=-2)
    dist = np.linalg.norm(pts - centroid[..., None, :], axis=-1).mean(axis=-1)
    scale = np.sqrt(2.0) / np.where(dist > 0, dist, 1.0)
    t = np.zeros(pts.shape[:-2] + (3, 3))
    t[..., 0, 0] = scale
    t[..., 1, 1] = scale
    t[..., 0, 2] = -scale * centroid[..., 0]
    t[..., 1, 2] = -scale * centroid[..., 1]
    t[..., 2, 2] = 1.0
    return t


def _apply_affine(t: np.ndarray, pts: np.ndarray) -> np.ndarray:
    return pts @ np.swapaxes(t[..., :2, :2], -1, -2) + t[..., None, :2, 2]


def dlt_batch(src: np.ndarray, dst: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """Normalized DLT on a batch of point sets.

    Args:
        src, dst: ``(b, n, 2)`` arrays with ``n >= 4``.

    Returns:
        ``(h, ok)``: ``(b, 3, 3)`` normalized homographies and a boolean mask
        of non-degenerate estimates.
    """
    src = np.asarray(src, dtype=np.float64)
    dst = np.asarray(dst, dtype=np.float64)
    b, n, _ = src.shape
    if n < 4:
        raise ValueError("DLT needs at least 4 correspondences")
    ts = _hartley(src)
    td = _hartley(dst)
    s = _apply_affine(ts, src)
    d = _apply_affine(td, dst)
    x, y = s[..., 0], s[..., 1]
    u, v = d[..., 0], d[..., 1]
    zero = np.zeros_like(x)
    one = np.ones_like(x)
    rows_u = np.stack([-x, -y, -one, zero, zero, zero, u * x, u * y, u], axis=-1)
    rows_v = np.stack([zero, zero, zero, -x, -y, -one, v * x, v * y, v], axis=-1)
    a = np.concatenate([rows_u, rows_v], axis=1)
    _, sv, vt = np.linalg.svd(a)
    hn = vt[:, -1, :].reshape(b, 3, 3)
    h = np.linalg.inv(td) @ hn @ ts
    # the 2n x 9 system must have a one-dimensional null space
    ok = sv[:, 7] > 1e-8 * sv[:, 0]
    det = np.linalg.det(h)
    scale = np.abs(h).max(axis=(1, 2))
    ok &= np.abs(det) > 1e-12 * np.where(scale > 0, scale, 1.0) ** 3
    corner = h[:, 2, 2]
    h = h / np.where(corner == 0.0, 1.0, corner)[:, None, None]
    ok &= np.all(np.isfinite(h), axis=(1, 2))
    return h, ok


def estimate_dlt(src, dst) -> np.ndarray:
    """Estimate a homography from >= 4 point correspondences.

    Raises:
        DegenerateHomography: the configuration does not determine a unique
            non-singular homography.
    """
    src = np.asarray(src, dtype=np.float64)
    dst = np.asarray(dst, dtype=np.float64)
    if src.shape != dst.shape or src.ndim != 2 or src.shape[1] != 2:
        raise ValueError("expected two (n, 2) point arrays of equal shape")
    if len(src) < 4:
        raise ValueError("DLT needs at least 4 correspondences")
    h, ok = dlt_batch(src[None], dst[None])
    if not ok[0]:
        raise DegenerateHomography("degenerate point configuration")
    return h[0]


def _orientation_ok(src: np.ndarray, dst: np.ndarray) -> np.ndarray:
    """Reject 4-point samples whose triangles are collinear or flip orientation."""
    ok = np.ones(src.shape[0], dtype=bool)
    for a, b, c in ((0, 1, 2), (0, 1, 3), (0, 2, 3), (1, 2, 3)):
        s = _cross(src[:, a], src[:, b], src[:, c])
        d = _cross(dst[:, a], dst[:, b], dst[:, c])
        ok &= (np.abs(s) > 1e-9) & (s * d > 0)
    return ok


def _cross(p, q, r):
    return (q[:, 0] - p[:, 0]) * (r[:, 1] - p[:, 1]) - (q[:, 1] - p[:, 1]) * (r[:, 0] - p[:, 0])


def inlier_masks(corr: CorrespondenceSet, hyps: np.ndarray, tau: float) -> np.ndarray:
    """Inlier membership of every candidate pair under each hypothesis.

    Args:
        corr: candidate pairs.
        hyps: ``(h, 3, 3)`` stack of homographies.
        tau: strict distance threshold in pixels.

    Returns:
        ``(h, n_pairs)`` boolean mask; for each template index at most one
        pair is set, the one with the smallest reprojection distance (ties
        go to the lower frame index).
    """
    hyps = np.asarray(hyps, dtype=np.float64).reshape(-1, 3, 3)
    n_pairs = corr.n_pairs
    if n_pairs == 0 or len(hyps) == 0:
        return np.zeros((len(hyps), n_pairs), dtype=bool)
    pi, pj = corr.pairs_i, corr.pairs_j
    src = corr.template_xy[pi]
    dst = corr.frame_xy[pj]
    xy, _ = project(hyps, src)
    with np.errstate(invalid="ignore"):
        dist = np.linalg.norm(xy - dst[None], axis=-1)
    passing = dist < tau
    starts = corr.group_starts
    if len(starts) == n_pairs:
        return passing
    key = np.where(passing, dist, np.inf)
    best = np.minimum.reduceat(key, starts, axis=1)
    group = corr.pair_group
    is_min = passing & (key == best[:, group])
    big = np.iinfo(np.int64).max
    jmask = np.where(is_min, pj[None, :], big)
    best_j = np.minimum.reduceat(jmask, starts, axis=1)
    return is_min & (pj[None, :] == best_j[:, group])


def inlier_set(corr: CorrespondenceSet, y: np.ndarray, tau: float) -> InlierSet:
    mask = inlier_masks(corr, y, tau)[0] if corr.n_pairs else np.zeros(0, dtype=bool)
    pairs = np.stack([corr.pairs_i[mask], corr.pairs_j[mask]], axis=1).reshape(-1, 2)
    return InlierSet(pairs.astype(np.int64), float(tau))


def inlier_counts(corr: CorrespondenceSet, hyps: np.ndarray, tau: float) -> np.ndarray:
    return inlier_masks(corr, hyps, tau).sum(axis=1)


def delta_loss(corr: CorrespondenceSet, y_true: np.ndarray, y: np.ndarray, tau: float) -> int:
    """Structured loss: absolute difference of the two inlier-set sizes."""
    counts = inlier_counts(corr, np.stack([y_true, y]), tau)
    return int(abs(int(counts[0]) - int(counts[1])))


def same_homography(a: np.ndarray, b: np.ndarray, tol: float = DEDUP_TOL) -> bool:
    return bool(np.linalg.norm(normalize(a) - normalize(b)) < tol)


def dedupe(hyps: np.ndarray, tol: float = DEDUP_TOL) -> np.ndarray:
    """Drop homographies within Frobenius distance ``tol`` of an earlier one."""
    hyps = np.asarray(hyps, dtype=np.float64).reshape(-1, 3, 3)
    corner = hyps[:, 2, 2]
    flat = (hyps / np.where(corner == 0.0, 1.0, corner)[:, None, None]).reshape(-1, 9)
    close = np.linalg.norm(flat[:, None, :] - flat[None, :, :], axis=-1) < tol
    keep = np.zeros(len(flat), dtype=bool)
    for i in range(len(flat)):
        keep[i] = not np.any(close[i, :i] & keep[:i])
    return flat[keep].reshape(-1, 3, 3)


def ransac_hypotheses(
    corr: CorrespondenceSet, iters: int = 100, tau: float = 5.0, seed: int = 0
) -> tuple[np.ndarray, np.ndarray]:
    """Generate homography hypotheses from random minimal samples.

    Each iteration draws 4 distinct template indices, pairs each with its
    best-scoring candidate, and fits a homography with the normalized DLT.
    Degenerate fits are discarded and near-duplicates removed.

    Returns:
        ``(hyps, counts)``: ``(h, 3, 3)`` hypotheses in draw order and their
        inlier counts under ``tau``. Both are empty when fewer than 4 template
        indices have a candidate.
    """
    best = corr.best_pairs()
    if len(best) < 4 or iters <= 0:
        return np.zeros((0, 3, 3)), np.zeros(0, dtype=np.int64)
    rng = np.random.default_rng(seed)
    n = len(best)
    picks = np.stack([rng.choice(n, size=4, replace=False) for _ in range(iters)])
    sel = best[picks]
    src = corr.template_xy[corr.pairs_i[sel]].astype(np.float64)
    dst = corr.frame_xy[corr.pairs_j[sel]].astype(np.float64)
    good = _orientation_ok(src, dst)
    if not np.any(good):
        return np.zeros((0, 3, 3)), np.zeros(0, dtype=np.int64)
    h, ok = dlt_batch(src[good], dst[good])
    hyps = dedupe(h[ok])
    return hyps, inlier_counts(corr, hyps, tau)
