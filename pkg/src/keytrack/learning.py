"""Training samples and the violation terms of the joint objective.

A :class:`TrainingSample` freezes everything about a tracked frame that does
not depend on the models: candidate pairs, the inlier masks of the predicted
homography and of every competing hypothesis, the structured loss of each
competitor, and the hard negatives of every inlier slot. Evaluating the
hinge terms for given task weights and feature map then reduces to a few
gathers and dot products.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from functools import cached_property

import numpy as np

from . import geometry
from .model import CorrespondenceSet

TASK_RULES = ("suffix", "all")


@dataclass(frozen=True)
class HyperParams:
    """Objective weights. ``rho1``/``rho2`` are always derived from ``lambda1``."""

    lambda1: float = 1.0
    lambda2: float = 1.0
    nu1: float = 1.0
    nu2: float = 1.0
    tau: float = 5.0
    K: int = 5

    def __post_init__(self):
        for name in ("lambda1", "lambda2", "nu1", "nu2", "tau"):
            if not getattr(self, name) > 0:
                raise ValueError(f"{name} must be positive")
        if int(self.K) < 1:
            raise ValueError("K must be at least 1")

    @property
    def rho1(self) -> float:
        return self.lambda1 / (self.lambda1 + 1)

    @property
    def rho2(self) -> float:
        return self.lambda1**2 / (self.lambda1 + 1)

    def step_size(self, t: int) -> float:
        """``eta = 1 / (rho1 t + rho2 t)``; exact for rational ``lambda1``."""
        if t < 1:
            raise ValueError("frame counter must be >= 1")
        return 1 / (self.rho1 * t + self.rho2 * t)


@dataclass(frozen=True, eq=False)
class TrainingSample:
    """One tracked frame ``(C_t, y_t)`` compiled for fast hinge evaluation.

    Attributes:
        desc: ``(r, d)`` 0/1 float descriptors of every frame keypoint the
            sample references.
        pair_slot, pair_row: template index and ``desc`` row of each
            candidate pair.
        true_pairs: candidate-pair indices of the inliers of ``y_t``.
        hyp_masks: ``(h, n_pairs)`` inlier masks of the competing hypotheses.
        hyp_delta: structured loss of each competitor against ``y_t``.
        neg_rows: ``(n_inliers, n_neg)`` ``desc`` rows of the hard negatives
            of each inlier slot, ``-1`` padded.
    """

    desc: np.ndarray
    pair_slot: np.ndarray
    pair_row: np.ndarray
    true_pairs: np.ndarray
    hyp_masks: np.ndarray
    hyp_delta: np.ndarray
    neg_rows: np.ndarray
    homography: np.ndarray
    hyps: np.ndarray
    frame: int = 0

    @property
    def true_slots(self) -> np.ndarray:
        return self.pair_slot[self.true_pairs]

    @property
    def true_rows(self) -> np.ndarray:
        return self.pair_row[self.true_pairs]

    @cached_property
    def true_mask(self) -> np.ndarray:
        mask = np.zeros(len(self.pair_slot), dtype=bool)
        mask[self.true_pairs] = True
        return mask

    @cached_property
    def hyp_diff(self) -> np.ndarray:
        """Competitor mask minus the true mask; identical sets give an exact zero row."""
        return self.hyp_masks.astype(np.float64) - self.true_mask

    @cached_property
    def pos_desc(self) -> np.ndarray:
        """Descriptor of every candidate pair, ``(n_pairs, d)``."""
        return self.desc[self.pair_row]

    @cached_property
    def neg_valid(self) -> np.ndarray:
        return self.neg_rows >= 0

    @cached_property
    def neg_desc(self) -> np.ndarray:
        """Hard-negative descriptors ``(n_inliers, n_neg, d)``, zeros where padded."""
        return np.where(self.neg_valid[..., None], self.desc[np.maximum(self.neg_rows, 0)], 0.0)

    @classmethod
    def build(
        cls,
        corr: CorrespondenceSet,
        y_t: np.ndarray,
        hyps: np.ndarray,
        tau: float,
        n_neg: int = 10,
        frame: int = 0,
        frame_scores: np.ndarray | None = None,
    ) -> TrainingSample:
        """Compile a sample from correspondences, prediction and hypotheses.

        Competitors within Frobenius distance 1e-6 of ``y_t`` are dropped.
        Negatives for inlier slot i are the ``n_neg`` highest-scoring frame
        keypoints other than its match, skipping any within ``tau`` of the
        predicted location of template keypoint i (those may be the same
        physical point). ``frame_scores`` defaults to ``corr.score_matrix``.
        """
        y_t = geometry.normalize(y_t)
        hyps = np.asarray(hyps, dtype=np.float64).reshape(-1, 3, 3)
        keep = np.array([not geometry.same_homography(h, y_t) for h in hyps], dtype=bool)
        hyps = hyps[keep] if len(hyps) else hyps
        masks = geometry.inlier_masks(corr, np.concatenate([y_t[None], hyps]), tau)
        true_mask, hyp_masks = masks[0], masks[1:]
        n_true = int(true_mask.sum())
        hyp_delta = np.abs(n_true - hyp_masks.sum(axis=1)).astype(np.float64)
        true_pairs = np.flatnonzero(true_mask)

        scores = corr.score_matrix if frame_scores is None else frame_scores
        slots = corr.pairs_i[true_pairs]
        matches = corr.pairs_j[true_pairs]
        n_frame = len(corr.frame_xy)
        neg = np.full((len(true_pairs), n_neg), -1, dtype=np.int64)
        if len(true_pairs) and n_neg > 0 and n_frame > 1:
            if scores is None:
                raise ValueError("hard negatives need the full frame score matrix")
            pred, _ = geometry.project(y_t, corr.template_xy[slots])
            near = (
                np.linalg.norm(corr.frame_xy[None, :, :] - pred[:, None, :], axis=-1) < tau
            )
            s = np.where(near, -np.inf, scores[slots])
            s[np.arange(len(slots)), matches] = -np.inf
            order = np.argsort(-s, axis=1, kind="stable")[:, :n_neg]
            valid = np.isfinite(np.take_along_axis(s, order, axis=1))
            neg[:, : order.shape[1]] = np.where(valid, order, -1)

        # compact the referenced frame descriptors
        used = np.unique(np.concatenate([corr.pairs_j, neg[neg >= 0]]))
        remap = np.full(max(n_frame, 1), -1, dtype=np.int64)
        remap[used] = np.arange(len(used))
        neg_rows = np.where(neg >= 0, remap[np.maximum(neg, 0)], -1)
        return cls(
            desc=np.asarray(corr.frame_desc[used], dtype=np.float64).reshape(len(used), -1),
            pair_slot=corr.pairs_i.copy(),
            pair_row=remap[corr.pairs_j] if corr.n_pairs else np.zeros(0, dtype=np.int64),
            true_pairs=true_pairs.astype(np.int64),
            hyp_masks=hyp_masks,
            hyp_delta=hyp_delta,
            neg_rows=neg_rows,
            homography=y_t,
            hyps=hyps,
            frame=frame,
        )


@dataclass(frozen=True)
class TrainingWindow:
    """The most recent predicted samples, oldest first, at most ``K`` long."""

    samples: tuple[TrainingSample, ...] = ()
    K: int = 5

    def __len__(self) -> int:
        return len(self.samples)

    def append(self, sample: TrainingSample) -> TrainingWindow:
        return TrainingWindow((self.samples + (sample,))[-self.K :], self.K)

    def task_samples(self, k: int, rule: str = "suffix") -> list[int]:
        """Window indices consumed by task ``k`` (0-based).

        ``suffix``: the window is right-aligned to slots 0..K-1 (newest in
        slot K-1) and task k sees the samples in slots >= k, so the
        prediction task always sees the newest frame. ``all``: every task
        sees the whole window.
        """
        n = len(self.samples)
        if rule == "all":
            return list(range(n))
        if rule != "suffix":
            raise ValueError(f"unknown task rule {rule!r}")
        offset = self.K - n
        return [p for p in range(n) if offset + p >= k]

    def sample_tasks(self, p: int, rule: str = "suffix") -> np.ndarray:
        """Tasks (0-based) that consume window sample ``p``; inverse of :meth:`task_samples`."""
        if rule == "all":
            return np.arange(self.K)
        if rule != "suffix":
            raise ValueError(f"unknown task rule {rule!r}")
        return np.arange(min(self.K - len(self.samples) + p, self.K - 1) + 1)


@dataclass
class SampleScores:
    """Raw model scores of one sample for the tasks that consume it.

    ``pair[t, p]`` scores candidate pair p and ``neg[t, a, b]`` the b-th hard
    negative of inlier a, both under task ``tasks[t]``. Scores are linear in
    the feature map, which makes line searches along M cheap.
    """

    tasks: np.ndarray
    pair: np.ndarray
    neg: np.ndarray

    def step(self, direction: SampleScores, s: float) -> SampleScores:
        return SampleScores(self.tasks, self.pair - s * direction.pair, self.neg - s * direction.neg)


@dataclass
class SampleTerms:
    alpha: float
    alpha_arg: int  # competitor index, -1 when none
    beta: np.ndarray  # per inlier slot
    beta_arg: np.ndarray  # column into neg_rows, -1 when no negatives


@dataclass
class ViolationTerms:
    """Hinge values for every (task, sample) and their argmaxes.

    ``per_task[k]`` maps window index to :class:`SampleTerms`; ``J_task[k]``
    is ``nu1 * sum(alpha) + nu2 * sum(beta)`` over the samples of task k.
    """

    per_task: list[dict[int, SampleTerms]]
    J_task: np.ndarray
    nu1: float = 1.0
    nu2: float = 1.0
    version: int = -1
    scores: list[SampleScores] = field(default_factory=list, repr=False)
    M: np.ndarray | None = field(default=None, repr=False)

    @property
    def J(self) -> float:
        return float(self.J_task.sum())

    def counts(self) -> tuple[int, int]:
        a = sum(st.alpha > 0 for terms in self.per_task for st in terms.values())
        b = sum(int(np.count_nonzero(st.beta > 0)) for terms in self.per_task for st in terms.values())
        return a, b


def mapped_weights(W: np.ndarray, M: np.ndarray | None) -> np.ndarray:
    """Rows ``M w_i`` so that ``<w_i, M^T d> = <M w_i, d>``; ``M=None`` is the identity."""
    W = np.asarray(W, dtype=np.float64)
    return W if M is None else W @ M.T


def compute_scores(U: np.ndarray, window: TrainingWindow, rule: str = "suffix") -> list[SampleScores]:
    """Pair and hard-negative scores of every window sample under mapped weights ``U``."""
    out = []
    by_slot = np.asarray(U).transpose(1, 0, 2)  # (n_slots, K, d)
    for p, s in enumerate(window.samples):
        tasks = window.sample_tasks(p, rule)
        Us = by_slot[:, tasks] if len(tasks) < by_slot.shape[1] else by_slot
        pair = np.matmul(Us[s.pair_slot], s.pos_desc[:, :, None])[:, :, 0].T
        if s.neg_desc.shape[1]:
            neg = np.matmul(s.neg_desc, Us[s.true_slots].transpose(0, 2, 1)).transpose(2, 0, 1)
        else:
            neg = np.zeros((len(tasks), len(s.true_pairs), 0))
        out.append(SampleScores(tasks, pair, neg))
    return out


def terms_from_scores(
    scores: list[SampleScores],
    window: TrainingWindow,
    hyper: HyperParams,
    K: int,
    version: int = -1,
    M: np.ndarray | None = None,
) -> ViolationTerms:
    per_task: list[dict[int, SampleTerms]] = [{} for _ in range(K)]
    J = np.zeros(K)
    for p, (s, sc) in enumerate(zip(window.samples, scores)):
        T = len(sc.tasks)
        rows = np.arange(T)
        if len(s.hyp_delta):
            vals = s.hyp_delta[None, :] + sc.pair @ s.hyp_diff.T
            arg = np.argmax(vals, axis=1)
            alpha = np.maximum(vals[rows, arg], 0.0)
        else:
            arg = np.full(T, -1)
            alpha = np.zeros(T)
        n_inl = len(s.true_pairs)
        if n_inl and sc.neg.shape[2]:
            pos = sc.pair[:, s.true_pairs]
            viol = np.where(s.neg_valid[None], 1.0 - pos[:, :, None] + sc.neg, -np.inf)
            barg = np.argmax(viol, axis=2)
            bval = np.take_along_axis(viol, barg[:, :, None], axis=2)[:, :, 0]
            has = np.isfinite(bval)
            beta = np.where(has, np.maximum(bval, 0.0), 0.0)
            barg = np.where(has, barg, -1)
        else:
            beta = np.zeros((T, n_inl))
            barg = np.full((T, n_inl), -1)
        for t, k in enumerate(sc.tasks):
            per_task[k][p] = SampleTerms(float(alpha[t]), int(arg[t]), beta[t], barg[t])
            J[k] += hyper.nu1 * alpha[t] + hyper.nu2 * beta[t].sum()
    return ViolationTerms(per_task, J, hyper.nu1, hyper.nu2, version, scores, M)


def evaluate_terms(
    W: np.ndarray,
    M: np.ndarray | None,
    window: TrainingWindow,
    hyper: HyperParams,
    rule: str = "suffix",
    version: int = -1,
) -> ViolationTerms:
    """Hinge terms of all tasks over the window.

    Args:
        W: ``(K, n_slots, d)`` task weights.
        M: feature map matrix, or None for the identity.
    """
    scores = compute_scores(mapped_weights(W, M), window, rule)
    return terms_from_scores(scores, window, hyper, len(W), version, M)


def descriptor_residuals(terms: ViolationTerms, window: TrainingWindow, shape) -> np.ndarray:
    """Per-task sums of signed raw descriptors over the active hinge terms.

    ``R[k, i]`` collects ``coef * d`` for every active term touching slot i of
    task k, so ``dJ_k/dw^k = R[k] @ M`` and ``dJ/dM = sum_k R[k]^T W[k]``.
    Pairs shared by the true and the competing inlier sets cancel.
    """
    R = np.zeros(shape)
    nu1, nu2 = terms.nu1, terms.nu2
    for k, task_terms in enumerate(terms.per_task):
        Rk = R[k]
        for p, st in task_terms.items():
            s = window.samples[p]
            if st.alpha > 0:
                alt = s.hyp_masks[st.alpha_arg]
                gain = np.flatnonzero(alt & ~s.true_mask)
                loss = np.flatnonzero(s.true_mask & ~alt)
                # slots are unique within each inlier set
                Rk[s.pair_slot[gain]] += nu1 * s.pos_desc[gain]
                Rk[s.pair_slot[loss]] -= nu1 * s.pos_desc[loss]
            act = np.flatnonzero(st.beta > 0)
            if len(act):
                diff = s.neg_desc[act, st.beta_arg[act]] - s.pos_desc[s.true_pairs[act]]
                Rk[s.true_slots[act]] += nu2 * diff
    return R


def task_gradient(R_k: np.ndarray, M: np.ndarray | None) -> np.ndarray:
    """Subgradient blocks of task k's J: block i is ``M^T R_k[i]``."""
    return R_k if M is None else R_k @ M


def metric_gradient(W: np.ndarray, R: np.ndarray) -> np.ndarray:
    """Gradient of ``sum_k J_k`` with respect to ``M``.

    Each active term contributes ``coef * d w_i^T`` because
    ``<w_i, M^T d> = d^T M w_i``.
    """
    d = W.shape[-1]
    R = R.reshape(-1, d)
    rows = np.flatnonzero(np.any(R != 0, axis=1))
    return R[rows].T @ np.asarray(W, dtype=np.float64).reshape(-1, d)[rows]
