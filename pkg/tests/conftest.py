import numpy as np
import pytest

from keytrack.model import CorrespondenceSet


def random_homography(rng, center=(50.0, 50.0), spread=0.15, persp=1e-4):
    """Well-conditioned homography: near-identity linear part, shift, mild perspective."""
    a = np.eye(2) + rng.uniform(-spread, spread, size=(2, 2))
    h = np.eye(3)
    h[:2, :2] = a
    h[:2, 2] = rng.uniform(-10, 10, size=2) + np.asarray(center) - a @ np.asarray(center)
    h[2, :2] = rng.uniform(-persp, persp, size=2)
    return h


def push(h, pts):
    q = np.column_stack([pts, np.ones(len(pts))]) @ h.T
    return q[:, :2] / q[:, 2:3]


def random_corr(rng, n_t=8, n_f=10, top_n=2, d=6, y=None, inlier_frac=0.6):
    """Small correspondence set; some candidates sit on ``y``'s projections."""
    txy = rng.uniform(0, 100, size=(n_t, 2))
    fxy = rng.uniform(0, 100, size=(n_f, 2))
    if y is not None:
        k = min(n_t, n_f)
        hit = rng.random(k) < inlier_frac
        fxy[:k][hit] = push(y, txy[:k][hit]) + rng.normal(0, 1.5, size=(hit.sum(), 2))
    tdesc = rng.integers(0, 2, size=(n_t, d)).astype(np.uint8)
    fdesc = rng.integers(0, 2, size=(n_f, d)).astype(np.uint8)
    pi, pj, sc = [], [], []
    for i in range(n_t):
        js = rng.choice(n_f, size=min(top_n, n_f), replace=False)
        if y is not None and i < n_f and i not in js and rng.random() < 0.7:
            js[0] = i
        for j in js:
            pi.append(i)
            pj.append(j)
            sc.append(rng.normal())
    return CorrespondenceSet.from_pairs(txy, tdesc, fxy, fdesc, pi, pj, sc, top_n)


@pytest.fixture
def rng():
    return np.random.default_rng(12345)


def random_sample(rng, n_slots=6, d=8, n_frame=9, n_hyp=4, n_neg=3, frame=0):
    """A training sample built directly from random masks, no geometry involved."""
    from keytrack.learning import TrainingSample

    desc = rng.integers(0, 2, size=(n_frame, d)).astype(np.float64)
    pair_slot, pair_row = [], []
    for i in range(n_slots):
        for j in rng.choice(n_frame, size=int(rng.integers(1, 3)), replace=False):
            pair_slot.append(i)
            pair_row.append(int(j))
    pair_slot = np.array(pair_slot)
    pair_row = np.array(pair_row)
    n_pairs = len(pair_slot)

    def one_per_slot(p):
        mask = np.zeros(n_pairs, dtype=bool)
        for i in range(n_slots):
            idx = np.flatnonzero(pair_slot == i)
            if rng.random() < p:
                mask[rng.choice(idx)] = True
        return mask

    true_mask = one_per_slot(0.7)
    true_pairs = np.flatnonzero(true_mask)
    hyp_masks = np.stack([one_per_slot(0.5) for _ in range(n_hyp)]) if n_hyp else np.zeros((0, n_pairs), bool)
    hyp_delta = np.abs(true_mask.sum() - hyp_masks.sum(axis=1)).astype(np.float64)
    neg = np.full((len(true_pairs), n_neg), -1, dtype=np.int64)
    for a, p in enumerate(true_pairs):
        others = np.setdiff1d(np.arange(n_frame), [pair_row[p]])
        k = int(rng.integers(1, n_neg + 1)) if n_neg else 0
        neg[a, :k] = rng.choice(others, size=k, replace=False)
    return TrainingSample(
        desc=desc,
        pair_slot=pair_slot,
        pair_row=pair_row,
        true_pairs=true_pairs,
        hyp_masks=hyp_masks,
        hyp_delta=hyp_delta,
        neg_rows=neg,
        homography=np.eye(3),
        hyps=np.repeat(np.eye(3)[None], n_hyp, axis=0),
        frame=frame,
    )


def random_window(rng, K=3, n_samples=None, **kw):
    from keytrack.learning import TrainingWindow

    n = K if n_samples is None else n_samples
    win = TrainingWindow((), K)
    for t in range(n):
        win = win.append(random_sample(rng, frame=t + 1, **kw))
    return win


def _kink_gap(vals):
    """Distance of ``[max(vals)]_+`` from its nearest non-differentiable point."""
    v = sorted(vals, reverse=True)
    gap = abs(v[0])
    if len(v) > 1:
        gap = min(gap, v[0] - v[1]) if v[0] > 0 else gap
    return gap


def brute_terms(W, M, window, hyper, rule="suffix", with_gap=False):
    """Hinge values per (task, sample) by explicit loops over hypotheses and negatives."""
    K = len(W)
    alpha, beta = {}, {}
    gaps = [np.inf]
    J = np.zeros(K)
    for k in range(K):
        for p in window.task_samples(k, rule):
            s = window.samples[p]

            def score(pair):
                return float(W[k][s.pair_slot[pair]] @ (M.T @ s.desc[s.pair_row[pair]]))

            f_true = sum(score(q) for q in s.true_pairs)
            vals = [
                s.hyp_delta[h] - (f_true - sum(score(q) for q in np.flatnonzero(s.hyp_masks[h])))
                for h in range(len(s.hyp_masks))
            ]
            a = max(0.0, max(vals)) if vals else 0.0
            if vals:
                gaps.append(_kink_gap(vals))
            bs = []
            for r, q in enumerate(s.true_pairs):
                i = s.pair_slot[q]
                pos = float(W[k][i] @ (M.T @ s.desc[s.pair_row[q]]))
                negs = [float(W[k][i] @ (M.T @ s.desc[n])) for n in s.neg_rows[r] if n >= 0]
                bs.append(max(0.0, max(1.0 - pos + x for x in negs)) if negs else 0.0)
                if negs:
                    gaps.append(_kink_gap([1.0 - pos + x for x in negs]))
            alpha[k, p], beta[k, p] = a, np.array(bs)
            J[k] += hyper.nu1 * a + hyper.nu2 * sum(bs)
    if with_gap:
        return alpha, beta, J, min(gaps)
    return alpha, beta, J
