"""Learned linear feature map, doublet hinges and the l2,1-regularized M-step."""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np


@dataclass(frozen=True)
class MetricMap:
    """Linear feature map ``f(d) = M^T d``.

    ``epsilon`` floors row norms when building the l2,1 reweighting diagonal.
    """

    M: np.ndarray
    epsilon: float = 1e-8

    def __post_init__(self):
        m = np.asarray(self.M, dtype=np.float64)
        if m.ndim != 2 or m.shape[0] != m.shape[1]:
            raise ValueError(f"feature map must be square, got {m.shape}")
        if not np.all(np.isfinite(m)):
            raise ValueError("feature map has non-finite entries")
        object.__setattr__(self, "M", m)

    @classmethod
    def identity(cls, dim: int = 256, epsilon: float = 1e-8) -> MetricMap:
        return cls(np.eye(dim), epsilon)

    @property
    def dim(self) -> int:
        return self.M.shape[0]

    def apply(self, d: np.ndarray) -> np.ndarray:
        """Map descriptors stored as rows: ``d @ M`` (row form of ``M^T d``)."""
        d = np.asarray(d, dtype=np.float64)
        if d.shape[-1] != self.dim:
            raise ValueError(f"descriptor length {d.shape[-1]} != map dimension {self.dim}")
        return d @ self.M


def map_feature(fmap: MetricMap, d: np.ndarray) -> np.ndarray:
    return fmap.apply(d)


def doublet_distance(w_i: np.ndarray, fmap: MetricMap, d_j: np.ndarray, d_j2: np.ndarray) -> float:
    """Margin of a doublet for slot model ``w_i``: ``<w_i, f(d_j) - f(d_j2)>``."""
    diff = fmap.apply(np.asarray(d_j, dtype=np.float64) - np.asarray(d_j2, dtype=np.float64))
    return float(np.dot(w_i, diff))


@dataclass(frozen=True)
class BetaTerm:
    value: float
    argmax: int | None


def beta_term(w_i: np.ndarray, fmap: MetricMap, positive: np.ndarray, negatives) -> BetaTerm:
    """Hinge on the most violating negative: ``[max_j' 1 - D(d_j, d_j')]_+``.

    The argmax is reported even when the hinge is inactive. An empty negative
    list contributes nothing.
    """
    negatives = np.asarray(negatives, dtype=np.float64).reshape(-1, fmap.dim)
    if len(negatives) == 0:
        return BetaTerm(0.0, None)
    pos = float(np.dot(w_i, fmap.apply(positive)))
    neg = fmap.apply(negatives) @ np.asarray(w_i, dtype=np.float64)
    viol = 1.0 - (pos - neg)
    best = int(np.argmax(viol))
    return BetaTerm(max(0.0, float(viol[best])), best)


def row_norms(M: np.ndarray) -> np.ndarray:
    return np.sqrt(np.sum(np.asarray(M, dtype=np.float64) ** 2, axis=1))


def l21_norm(M: np.ndarray) -> float:
    """Sum of the Euclidean norms of the rows of ``M``."""
    return float(row_norms(M).sum())


def reweight_diagonal(M: np.ndarray, epsilon: float = 1e-8) -> np.ndarray:
    """Diagonal of ``D`` with ``D_ii = 1 / (2 max(||M^i||, epsilon))``, as a vector."""
    return 0.5 / np.maximum(row_norms(M), epsilon)


@dataclass
class MStepInfo:
    objectives: list[float] = field(default_factory=list)
    accepted: int = 0
    aborted: bool = False
    terms: object = field(default=None, repr=False)


def m_objective(
    M: np.ndarray, W: np.ndarray, window, hyper, task_rule: str = "suffix", D: np.ndarray | None = None
) -> float:
    """M-step objective ``||M||_{2,1} + (1/lambda2) sum_k J_k`` by direct evaluation.

    With a reweighting diagonal ``D`` the regularizer is ``Tr(M^T D M)``
    instead, the form whose gradient the solver follows.
    """
    from .learning import evaluate_terms

    M = np.asarray(M, dtype=np.float64)
    reg = l21_norm(M) if D is None else float(np.sum(np.asarray(D)[:, None] * M * M))
    return reg + evaluate_terms(W, M, window, hyper, task_rule).J / hyper.lambda2


def m_gradient(
    M: np.ndarray, W: np.ndarray, window, hyper, task_rule: str = "suffix", epsilon: float = 1e-8
) -> np.ndarray:
    """Gradient ``2 D M + (1/lambda2) dJ/dM`` with ``D`` rebuilt from ``M``."""
    from .learning import evaluate_terms

    terms = evaluate_terms(W, M, window, hyper, task_rule)
    return _gradient(M, W, terms, window, hyper, epsilon)


def _gradient(M, W, terms, window, hyper, epsilon):
    from .learning import descriptor_residuals, metric_gradient

    d = reweight_diagonal(M, epsilon)
    R = descriptor_residuals(terms, window, W.shape)
    return 2.0 * d[:, None] * M + metric_gradient(W, R) / hyper.lambda2


def solve_M_step(
    fmap: MetricMap,
    window,
    bank,
    hyper,
    inner_iters: int = 3,
    step: float = 1e-3,
    max_halvings: int = 10,
    task_rule: str = "suffix",
) -> tuple[MetricMap, MStepInfo]:
    """Update the feature map with the reweighted l2,1 scheme.

    Each inner iteration rebuilds ``D`` from the current ``M`` and takes a
    gradient step on ``Tr(M^T D M) + (1/lambda2) sum_k J_k``, whose gradient
    matches that of ``||M||_{2,1} + (1/lambda2) sum_k J_k`` away from the
    epsilon floor. A step is accepted only if it does not increase the
    latter; otherwise the step is halved, at most ``max_halvings`` times.
    A non-finite objective aborts and returns the input map unchanged.
    """
    from .learning import compute_scores, mapped_weights, terms_from_scores

    if len(window) == 0:
        raise ValueError("M-step needs a nonempty training window")
    info = MStepInfo()
    W = bank.all_w()
    K = bank.K
    M = fmap.M
    scores = compute_scores(mapped_weights(W, M), window, task_rule)
    terms = terms_from_scores(scores, window, hyper, K, M=M)
    obj = l21_norm(M) + terms.J / hyper.lambda2
    if not np.isfinite(obj):
        info.aborted = True
        return fmap, info
    info.objectives.append(obj)
    for _ in range(inner_iters):
        grad = _gradient(M, W, terms, window, hyper, fmap.epsilon)
        # scores are linear in M, so trial points reuse the direction's scores
        direction = compute_scores(mapped_weights(W, grad), window, task_rule)
        s = step
        accepted = False
        for _ in range(max_halvings + 1):
            M_try = M - s * grad
            sc_try = [a.step(b, s) for a, b in zip(scores, direction)]
            terms_try = terms_from_scores(sc_try, window, hyper, K, M=M_try)
            obj_try = l21_norm(M_try) + terms_try.J / hyper.lambda2
            if not np.isfinite(obj_try):
                info.aborted = True
                return fmap, info
            if obj_try <= obj:
                M, scores, terms, obj = M_try, sc_try, terms_try, obj_try
                accepted = True
                break
            s *= 0.5
        if not accepted:
            break
        info.accepted += 1
        info.objectives.append(obj)
    info.terms = terms
    return MetricMap(M, fmap.epsilon), info
