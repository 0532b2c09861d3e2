"""Online alternating solver for the multi-task structured objective.

One learning step alternates a synchronous sweep over the K task models,
recovery of the common model, and an M-step on the feature map, until the
full objective stops decreasing.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass, field

import numpy as np

from . import geometry
from .learning import (
    HyperParams,
    TrainingSample,
    TrainingWindow,
    ViolationTerms,
    descriptor_residuals,
    evaluate_terms,
    task_gradient,
)
from .metric import MetricMap, l21_norm, solve_M_step
from .model import CorrespondenceSet, ModelBank, compatibility

log = logging.getLogger(__name__)

__all__ = [
    "HyperParams",
    "TrainingSample",
    "TrainingWindow",
    "ViolationTerms",
    "LearnDiagnostics",
    "alpha_term",
    "objective",
    "subgradient_w",
    "update_task",
    "sweep",
    "recover_common",
    "learn_step",
]


class StaleTermsError(RuntimeError):
    """Violation terms were computed against a different model bank."""


def alpha_term(
    w_k: np.ndarray,
    corr: CorrespondenceSet,
    y_t: np.ndarray,
    hyps: np.ndarray,
    hyper: HyperParams,
    fmap: MetricMap,
) -> tuple[float, np.ndarray | None]:
    """Structured hinge ``[max_{y != y_t} Delta(y_t, y) - dF(y)]_+`` by direct evaluation.

    Hypotheses within Frobenius distance 1e-6 of ``y_t`` are skipped. Returns
    the hinge value and the maximizing hypothesis (None if there is none).
    """
    tau = hyper.tau
    f_true = compatibility(w_k, corr, y_t, tau, fmap)
    n_true = len(geometry.inlier_set(corr, y_t, tau))
    best_val, best_y = -np.inf, None
    for y in np.asarray(hyps, dtype=np.float64).reshape(-1, 3, 3):
        if geometry.same_homography(y, y_t):
            continue
        delta = abs(n_true - len(geometry.inlier_set(corr, y, tau)))
        val = delta - (f_true - compatibility(w_k, corr, y, tau, fmap))
        if val > best_val:
            best_val, best_y = val, y
    if best_y is None:
        return 0.0, None
    return max(0.0, float(best_val)), best_y


def objective(bank: ModelBank, fmap: MetricMap, terms: ViolationTerms, hyper: HyperParams) -> float:
    """Full unconstrained objective with the hinge terms in ``terms``."""
    reg = 0.5 * float(np.sum(bank.w0**2))
    reg += hyper.lambda1 / (2.0 * bank.K) * float(np.sum(bank.v**2))
    return reg + hyper.lambda2 * l21_norm(fmap.M) + terms.J


def subgradient_w(
    k: int,
    bank: ModelBank,
    window: TrainingWindow,
    terms: ViolationTerms,
    fmap: MetricMap | None = None,
    hyper: HyperParams | None = None,
) -> np.ndarray:
    """Stacked subgradient of task k's J with respect to ``w^k``.

    Raises:
        StaleTermsError: ``terms`` were evaluated against another bank version.
    """
    if terms.version != bank.version:
        raise StaleTermsError(
            f"terms computed for bank version {terms.version}, bank is at {bank.version}"
        )
    M = terms.M if fmap is None else fmap.M
    R = descriptor_residuals(_single(terms, k), window, (1, bank.n_slots, bank.d_f))
    return task_gradient(R[0], M).reshape(-1)


def _single(terms: ViolationTerms, k: int) -> ViolationTerms:
    return ViolationTerms([terms.per_task[k]], terms.J_task[k : k + 1], terms.nu1, terms.nu2, terms.version)


def task_subgradients(bank: ModelBank, window: TrainingWindow, terms: ViolationTerms, M) -> np.ndarray:
    """All K subgradients at once, shaped like ``bank.all_w()``."""
    if terms.version != bank.version:
        raise StaleTermsError(
            f"terms computed for bank version {terms.version}, bank is at {bank.version}"
        )
    R = descriptor_residuals(terms, window, (bank.K, bank.n_slots, bank.d_f))
    return R if M is None else R @ M


def update_task(
    k: int,
    W: np.ndarray,
    grad: np.ndarray,
    t: int,
    hyper: HyperParams,
    w_bar: np.ndarray | None = None,
) -> np.ndarray:
    """One gradient step on task k.

    ``w^k <- (1 - 1/t) w^k + eta rho2 w_bar - eta grad`` with
    ``eta = 1 / (rho1 t + rho2 t)``. ``w_bar`` defaults to the mean of the
    pre-update task weights ``W``.
    """
    if t < 1:
        raise ValueError("frame counter must be >= 1")
    W = np.asarray(W, dtype=np.float64)
    if w_bar is None:
        w_bar = W.mean(axis=0)
    eta = hyper.step_size(t)
    grad = np.asarray(grad, dtype=np.float64).reshape(W[k].shape)
    return (1.0 - 1.0 / t) * W[k] + eta * hyper.rho2 * w_bar - eta * grad


def recover_common(W: np.ndarray | ModelBank, hyper: HyperParams, version: int | None = None) -> ModelBank:
    """Rebuild ``w0`` and ``v^k`` from task weights.

    ``w0 = lambda1 sum_k w^k / (K (1 + lambda1))`` is the solution of
    ``w0 = (lambda1 / K) sum_k v^k`` with ``v^k = w^k - w0``.
    """
    if isinstance(W, ModelBank):
        version = W.version if version is None else version
        W = W.all_w()
    return ModelBank.from_tasks(W, hyper.lambda1, 0 if version is None else version)


def sweep(bank: ModelBank, grads, t: int, hyper: HyperParams) -> ModelBank:
    """Synchronous update of all tasks; every task reads the same pre-update mean."""
    W = bank.all_w()
    w_bar = W.mean(axis=0)
    new = np.stack([update_task(k, W, grads[k], t, hyper, w_bar) for k in range(bank.K)])
    return recover_common(new, hyper, bank.version + 1)


@dataclass
class LearnDiagnostics:
    outer_iters: int = 0
    objectives: list[float] = field(default_factory=list)
    J: float = 0.0
    alpha_count: int = 0
    beta_count: int = 0
    skipped: bool = False
    metric_steps: int = 0

    @property
    def objective_start(self) -> float:
        return self.objectives[0] if self.objectives else float("nan")

    @property
    def objective_end(self) -> float:
        return self.objectives[-1] if self.objectives else float("nan")


def _matrix(fmap: MetricMap) -> np.ndarray | None:
    """``None`` for an exact identity map, which skips the mapping products."""
    M = fmap.M
    return None if np.array_equal(M, np.eye(len(M))) else M


def learn_step(
    bank: ModelBank,
    fmap: MetricMap,
    window: TrainingWindow,
    hyper: HyperParams,
    t: int,
    *,
    learn_metric: bool = True,
    max_outer: int = 10,
    tol: float = 1e-4,
    task_rule: str = "suffix",
    metric_iters: int = 3,
    metric_step: float = 1e-3,
) -> tuple[ModelBank, MetricMap, LearnDiagnostics]:
    """Alternate task sweeps and M-steps on the training window.

    An outer iteration that increases the objective is rejected and ends the
    loop, so the recorded objective sequence never increases. Iteration also
    stops once the relative decrease falls below ``tol`` or no hinge term is
    active any more. A non-finite objective rolls everything back and marks
    the step as skipped.
    """
    if len(window) == 0:
        raise ValueError("learning needs a nonempty training window")
    diag = LearnDiagnostics()
    terms = evaluate_terms(bank.all_w(), _matrix(fmap), window, hyper, task_rule, bank.version)
    obj = objective(bank, fmap, terms, hyper)
    if not np.isfinite(obj):
        diag.skipped = True
        return bank, fmap, diag
    diag.objectives.append(obj)
    start_bank, start_fmap = bank, fmap

    for _ in range(max_outer):
        grads = task_subgradients(bank, window, terms, _matrix(fmap))
        new_bank = sweep(bank, grads, t, hyper)
        new_fmap = fmap
        new_terms = None
        if learn_metric:
            new_fmap, info = solve_M_step(
                fmap, window, new_bank, hyper, metric_iters, metric_step, task_rule=task_rule
            )
            if info.aborted:
                log.warning("frame %d: M-step aborted on a non-finite objective", t)
            else:
                new_terms = info.terms
                new_terms.version = new_bank.version
            diag.metric_steps += info.accepted
        if new_terms is None:
            new_terms = evaluate_terms(
                new_bank.all_w(), _matrix(new_fmap), window, hyper, task_rule, new_bank.version
            )
        new_obj = objective(new_bank, new_fmap, new_terms, hyper)
        if not np.isfinite(new_obj):
            log.warning("frame %d: non-finite objective, learning skipped", t)
            diag.skipped = True
            diag.objectives = diag.objectives[:1]
            diag.outer_iters = 0
            return start_bank, start_fmap, diag
        if new_obj > obj:
            break
        diag.outer_iters += 1
        rel = (obj - new_obj) / max(abs(obj), 1e-12)
        bank, fmap, terms, obj = new_bank, new_fmap, new_terms, new_obj
        diag.objectives.append(obj)
        # without active hinges further passes would only repeat the decay
        if rel < tol or terms.J == 0.0:
            break

    diag.J = terms.J
    diag.alpha_count, diag.beta_count = terms.counts()
    return bank, fmap, diag
