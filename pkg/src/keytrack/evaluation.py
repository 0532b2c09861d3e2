"""Corner-discrepancy scoring, success rates and the result file formats."""

from __future__ import annotations

import csv
import math
from dataclasses import dataclass
from typing import Iterable, Sequence

import numpy as np

SUCCESS_THRESHOLD = 10.0
RESULT_FIELDS = ["frame", "outcome"] + [f"h{i}" for i in range(9)] + ["inliers", "score", "ms"]


class ResultFormatError(ValueError):
    """Malformed result or ground-truth file, or mismatched lengths."""


def template_bounds(shape) -> tuple[float, float, float, float]:
    """Pixel-centre bounding rectangle ``(x0, y0, x1, y1)`` of an image shape."""
    h, w = shape[:2]
    return 0.0, 0.0, float(w - 1), float(h - 1)


def square_corners(bounds) -> np.ndarray:
    """The corners (+-1, +-1) sent affinely onto ``bounds``, as ``(4, 2)``."""
    x0, y0, x1, y1 = bounds
    c = np.array([[-1.0, -1.0], [1.0, -1.0], [1.0, 1.0], [-1.0, 1.0]])
    return np.column_stack([x0 + (c[:, 0] + 1) * 0.5 * (x1 - x0), y0 + (c[:, 1] + 1) * 0.5 * (y1 - y0)])


def _map(h: np.ndarray, pts: np.ndarray) -> np.ndarray | None:
    q = np.column_stack([pts, np.ones(len(pts))]) @ np.asarray(h, dtype=np.float64).T
    if not np.all(np.isfinite(q)) or np.any(np.abs(q[:, 2]) <= 1e-12):
        return None
    return q[:, :2] / q[:, 2:3]


def score_S(y, y_star, bounds) -> float:
    """Mean frame-pixel distance between the corners mapped by ``y`` and ``y_star``.

    A corner sent to infinity by either homography gives ``inf``.
    """
    if y is None or y_star is None:
        return math.inf
    corners = square_corners(bounds)
    a, b = _map(y, corners), _map(y_star, corners)
    if a is None or b is None:
        return math.inf
    return float(np.mean(np.linalg.norm(a - b, axis=1)))


def success_metrics(scores: Sequence[float | None]) -> tuple[float, np.ndarray]:
    """Average success rate and the running count of false frames.

    ``None`` marks a Lost frame, which counts as false, as does any
    ``S >= 10``.

    Raises:
        ValueError: empty sequence.
    """
    if len(scores) == 0:
        raise ValueError("success rate of an empty sequence is undefined")
    ok = np.array([s is not None and s < SUCCESS_THRESHOLD for s in scores], dtype=bool)
    return float(ok.mean()), np.cumsum(~ok)


@dataclass
class ResultRow:
    frame: int
    detected: bool
    homography: np.ndarray | None
    inliers: int
    score: float
    ms: float | None


def write_ground_truth(path, homographies) -> None:
    hs = np.asarray(homographies, dtype=np.float64).reshape(-1, 9)
    with open(path, "w") as fh:
        for k, h in enumerate(hs, start=1):
            fh.write(f"{k} " + " ".join(repr(float(x)) for x in h) + "\n")


def read_ground_truth(path) -> np.ndarray:
    rows = []
    with open(path) as fh:
        for n, line in enumerate(fh, start=1):
            if not line.strip():
                continue
            parts = line.split()
            if len(parts) != 10:
                raise ResultFormatError(f"{path}:{n}: expected 10 fields, got {len(parts)}")
            try:
                rows.append([float(x) for x in parts[1:]])
            except ValueError as exc:
                raise ResultFormatError(f"{path}:{n}: {exc}") from None
    return np.array(rows, dtype=np.float64).reshape(-1, 3, 3)


def write_results(path, rows: Iterable[ResultRow]) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(RESULT_FIELDS)
        for r in rows:
            h = [repr(float(x)) for x in r.homography.ravel()] if r.homography is not None else [""] * 9
            ms = "" if r.ms is None else f"{r.ms:.3f}"
            w.writerow([r.frame, "detected" if r.detected else "lost", *h, r.inliers, repr(float(r.score)), ms])


def read_results(path) -> list[ResultRow]:
    rows = []
    with open(path, newline="") as fh:
        reader = csv.DictReader(fh)
        if reader.fieldnames is None or any(f not in reader.fieldnames for f in RESULT_FIELDS):
            raise ResultFormatError(f"{path}: missing result columns")
        for n, rec in enumerate(reader, start=2):
            try:
                detected = {"detected": True, "lost": False}[rec["outcome"]]
                h = np.array([float(rec[f"h{i}"]) for i in range(9)]).reshape(3, 3) if detected else None
                rows.append(
                    ResultRow(
                        int(rec["frame"]),
                        detected,
                        h,
                        int(rec["inliers"]),
                        float(rec["score"]),
                        float(rec["ms"]) if rec["ms"] else None,
                    )
                )
            except (KeyError, ValueError, TypeError) as exc:
                raise ResultFormatError(f"{path}:{n}: bad row ({exc})") from None
    return rows


def evaluate(rows: Sequence[ResultRow], ground_truth: np.ndarray, bounds) -> tuple[list[float | None], float, np.ndarray]:
    """Per-frame S (None when Lost), success rate and accumulated false counts."""
    if len(rows) != len(ground_truth):
        raise ResultFormatError(f"{len(rows)} result rows but {len(ground_truth)} ground-truth frames")
    scores = [score_S(r.homography, g, bounds) if r.detected else None for r, g in zip(rows, ground_truth)]
    rate, acc = success_metrics(scores)
    return scores, rate, acc


def write_metrics(path, scores, accumulated) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["frame", "S", "success", "accumulated_false"])
        for k, (s, a) in enumerate(zip(scores, accumulated), start=1):
            ok = s is not None and s < SUCCESS_THRESHOLD
            w.writerow([k, "" if s is None else repr(float(s)), int(ok), int(a)])
