"""Per-keypoint linear models, correspondences, joint features and prediction."""

from __future__ import annotations

from dataclasses import dataclass, field, replace
from functools import cached_property

import numpy as np

from . import geometry
from .metric import MetricMap

D_F = 256


@dataclass(frozen=True)
class ModelBank:
    """K task models stored as a common part plus per-task deviations.

    ``w0`` has shape ``(n_slots, d_f)``; ``v`` has shape
    ``(K, n_slots, d_f)``. Task k's stacked model is ``w0 + v[k]``; block i is
    the linear model of template keypoint i. ``version`` increases with every
    update so stale violation terms can be detected.
    """

    w0: np.ndarray
    v: np.ndarray
    version: int = 0

    @property
    def K(self) -> int:
        return self.v.shape[0]

    @property
    def n_slots(self) -> int:
        return self.w0.shape[0]

    @property
    def d_f(self) -> int:
        return self.w0.shape[1]

    def w(self, k: int) -> np.ndarray:
        """Task ``k`` (0-based) weights as ``(n_slots, d_f)`` blocks."""
        return self.w0 + self.v[k]

    def all_w(self) -> np.ndarray:
        return self.w0[None] + self.v

    def last(self) -> np.ndarray:
        """The prediction model, task K."""
        return self.w(self.K - 1)

    @classmethod
    def from_tasks(cls, w: np.ndarray, lambda1: float, version: int = 0) -> ModelBank:
        """Split task weights into common and task-specific parts.

        Solves ``w^k = w0 + v^k`` together with ``w0 = (lambda1 / K) sum v^k``,
        which gives ``w0 = lambda1 * sum_k w^k / (K (1 + lambda1))``.
        """
        w = np.asarray(w, dtype=np.float64)
        K = w.shape[0]
        w0 = lambda1 * w.sum(axis=0) / (K * (1.0 + lambda1))
        return cls(w0, w - w0[None], version)

    @classmethod
    def initial(cls, template_desc: np.ndarray, K: int, lambda1: float) -> ModelBank:
        """Every task starts from the unit-normalized template descriptors."""
        q = np.asarray(template_desc, dtype=np.float64)
        norms = np.linalg.norm(q, axis=1, keepdims=True)
        w = q / np.where(norms > 0, norms, 1.0)
        return cls.from_tasks(np.repeat(w[None], K, axis=0), lambda1)


@dataclass(frozen=True, eq=False)
class CorrespondenceSet:
    """Scored hypothetical correspondences between template and frame.

    Candidate pairs are stored flat: ``pairs_i``/``pairs_j``/``scores`` are
    grouped by template index (ascending) and sorted by score descending
    within a group, at most ``top_n`` per template index.
    """

    template_xy: np.ndarray
    template_desc: np.ndarray
    frame_xy: np.ndarray
    frame_desc: np.ndarray
    pairs_i: np.ndarray
    pairs_j: np.ndarray
    scores: np.ndarray
    top_n: int = 1
    score_matrix: np.ndarray | None = field(default=None, repr=False)

    @property
    def n_pairs(self) -> int:
        return len(self.pairs_i)

    @cached_property
    def group_starts(self) -> np.ndarray:
        if self.n_pairs == 0:
            return np.zeros(0, dtype=np.int64)
        change = np.flatnonzero(np.diff(self.pairs_i)) + 1
        return np.concatenate([[0], change]).astype(np.int64)

    @cached_property
    def pair_group(self) -> np.ndarray:
        marks = np.zeros(self.n_pairs, dtype=np.int64)
        marks[self.group_starts[1:]] = 1
        return np.cumsum(marks)

    def best_pairs(self) -> np.ndarray:
        """Index of the top-scoring pair of every template index with candidates."""
        return self.group_starts

    @classmethod
    def from_pairs(
        cls,
        template_xy,
        template_desc,
        frame_xy,
        frame_desc,
        pairs_i,
        pairs_j,
        scores,
        top_n: int = 1,
    ) -> CorrespondenceSet:
        """Build from arbitrary pair lists, sorting into the canonical layout."""
        pairs_i = np.asarray(pairs_i, dtype=np.int64)
        pairs_j = np.asarray(pairs_j, dtype=np.int64)
        scores = np.asarray(scores, dtype=np.float64)
        order = np.lexsort((pairs_j, -scores, pairs_i))
        return cls(
            np.asarray(template_xy, dtype=np.float64),
            np.asarray(template_desc),
            np.asarray(frame_xy, dtype=np.float64),
            np.asarray(frame_desc),
            pairs_i[order],
            pairs_j[order],
            scores[order],
            top_n,
        )


@dataclass(frozen=True)
class JointFeature:
    """Stacked joint feature: block i holds f(d_j) of slot i's inlier or zeros."""

    blocks: np.ndarray

    @property
    def phi(self) -> np.ndarray:
        return self.blocks.reshape(-1)


def score_correspondences(
    template_xy: np.ndarray,
    template_desc: np.ndarray,
    frame_xy: np.ndarray,
    frame_desc: np.ndarray,
    w: np.ndarray,
    fmap: MetricMap,
    top_n: int = 1,
) -> CorrespondenceSet:
    """Score all template/frame pairs and keep the best ``top_n`` per template.

    ``s_ij = <w_i, f(d_j)>``; ties go to the lower frame index.
    """
    w = np.asarray(w, dtype=np.float64)
    n_t = len(template_xy)
    if w.shape != (n_t, fmap.dim):
        raise ValueError(f"model blocks {w.shape} do not match {n_t} slots x {fmap.dim}")
    frame_desc = np.asarray(frame_desc)
    if frame_desc.ndim != 2 or (len(frame_desc) and frame_desc.shape[1] != fmap.dim):
        raise ValueError("frame descriptor dimension does not match the feature map")
    n_f = len(frame_desc)
    feats = fmap.apply(frame_desc.reshape(n_f, fmap.dim))
    s = w @ feats.T
    top = min(top_n, n_f)
    order = np.argsort(-s, axis=1, kind="stable")[:, :top]
    pairs_i = np.repeat(np.arange(n_t), top)
    pairs_j = order.reshape(-1)
    scores = np.take_along_axis(s, order, axis=1).reshape(-1)
    return CorrespondenceSet(
        np.asarray(template_xy, dtype=np.float64),
        np.asarray(template_desc),
        np.asarray(frame_xy, dtype=np.float64),
        frame_desc,
        pairs_i.astype(np.int64),
        pairs_j.astype(np.int64),
        scores,
        top_n,
        score_matrix=s,
    )


def pair_scores(corr: CorrespondenceSet, w: np.ndarray, fmap: MetricMap) -> np.ndarray:
    """``<w_i, f(d_j)>`` for every candidate pair under model ``w``."""
    if corr.n_pairs == 0:
        return np.zeros(0)
    feats = fmap.apply(corr.frame_desc[corr.pairs_j])
    return np.einsum("pd,pd->p", np.asarray(w)[corr.pairs_i], feats)


def joint_feature(
    corr: CorrespondenceSet, y: np.ndarray, tau: float, fmap: MetricMap
) -> JointFeature:
    inl = geometry.inlier_set(corr, y, tau)
    blocks = np.zeros((len(corr.template_xy), fmap.dim))
    if len(inl):
        blocks[inl.pairs[:, 0]] = fmap.apply(corr.frame_desc[inl.pairs[:, 1]])
    return JointFeature(blocks)


def compatibility(
    w_k: np.ndarray, corr: CorrespondenceSet, y: np.ndarray, tau: float, fmap: MetricMap
) -> float:
    """Total model score of the inliers of ``y``: ``<w^k, Phi(C, y)>``."""
    phi = joint_feature(corr, y, tau, fmap)
    return float(np.vdot(np.asarray(w_k).reshape(-1), phi.phi))


@dataclass(frozen=True)
class Prediction:
    homography: np.ndarray
    score: float
    inliers: int
    index: int


def hypothesis_scores(
    w: np.ndarray, corr: CorrespondenceSet, hyps: np.ndarray, tau: float, fmap: MetricMap
) -> tuple[np.ndarray, np.ndarray]:
    """Compatibility and inlier count of every hypothesis in one pass."""
    masks = geometry.inlier_masks(corr, hyps, tau)
    s = pair_scores(corr, w, fmap)
    return masks.astype(np.float64) @ s, masks.sum(axis=1)


def predict(
    bank: ModelBank, corr: CorrespondenceSet, hyps: np.ndarray, tau: float, fmap: MetricMap
) -> Prediction | None:
    """Pick the hypothesis maximizing compatibility under the last task model.

    Ties prefer more inliers, then the earlier hypothesis. Returns None
    (detection failure) when there are no hypotheses.
    """
    hyps = np.asarray(hyps, dtype=np.float64).reshape(-1, 3, 3)
    if len(hyps) == 0:
        return None
    scores, counts = hypothesis_scores(bank.last(), corr, hyps, tau, fmap)
    order = np.lexsort((np.arange(len(hyps)), -counts, -scores))
    best = int(order[0])
    return Prediction(hyps[best].copy(), float(scores[best]), int(counts[best]), best)


def bump(bank: ModelBank, **changes) -> ModelBank:
    return replace(bank, version=bank.version + 1, **changes)
