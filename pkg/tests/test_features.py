import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from keytrack.features import (
    BORDER,
    CIRCLE,
    N_BITS,
    Keypoints,
    brief_pattern,
    describe_brief,
    detect_fast,
    fast_corners,
    hamming,
    non_max_suppression,
)


def naive_fast(img, threshold, margin):
    """Per-pixel 16-way segment test: every start, every arc of 9."""
    img = img.astype(int)
    h, w = img.shape
    found = {}
    for r in range(margin, h - margin):
        for c in range(margin, w - margin):
            center = img[r, c]
            ring = [img[r + dy, c + dx] for dy, dx in CIRCLE]
            best = -1
            for start in range(16):
                arc = [ring[(start + k) % 16] - center for k in range(9)]
                best = max(best, min(arc) - 1, min(-a for a in arc) - 1)
            if best >= threshold:
                found[(r, c)] = best
    return found


def square_image():
    img = np.zeros((64, 64), dtype=np.uint8)
    img[30:34, 30:34] = 255
    return img


def test_uniform_image_has_no_corners():
    assert len(detect_fast(np.full((64, 64), 90, dtype=np.uint8), 20)) == 0


def test_square_corners_found():
    kps = detect_fast(square_image(), 20)
    true = np.array([(30, 30), (33, 30), (30, 33), (33, 33)])
    # every square pixel ties at the top score; allow one pixel per axis
    d = np.abs(kps.xy[:, None, :] - true[None]).max(axis=-1)
    assert len(kps) == 4
    assert sorted(d.argmin(axis=1).tolist()) == [0, 1, 2, 3]
    assert np.all(d.min(axis=1) <= 1)


def test_square_corners_truncated_to_top_two():
    full = detect_fast(square_image(), 20)
    two = detect_fast(square_image(), 20, max_keypoints=2)
    assert len(two) == 2
    assert np.array_equal(two.xy, full.xy[:2])
    assert np.all(two.score >= full.score[2:].max(initial=0))


@pytest.mark.parametrize("seed", range(6))
def test_fast_matches_naive_segment_test(seed):
    rng = np.random.default_rng(seed)
    img = rng.integers(0, 256, size=(64, 64)).astype(np.uint8)
    if seed % 2:
        img = (img // 64 * 64).astype(np.uint8)
    rows, cols, scores = fast_corners(img, 25, margin=3)
    got = {(int(r), int(c)): int(s) for r, c, s in zip(rows, cols, scores)}
    assert got == naive_fast(img, 25, 3)


def test_nms_keeps_local_maxima_and_sorts():
    rng = np.random.default_rng(1)
    img = rng.integers(0, 256, size=(80, 80)).astype(np.uint8)
    rows, cols, scores = fast_corners(img, 20)
    kept = non_max_suppression(rows, cols, scores, img.shape)
    ks = scores[kept]
    assert np.all(np.diff(ks) <= 0)
    # no two kept corners are 8-neighbours
    pts = np.stack([rows[kept], cols[kept]], axis=1)
    cheb = np.abs(pts[:, None] - pts[None]).max(axis=-1)
    np.fill_diagonal(cheb, 99)
    assert cheb.min() > 1
    # every dropped candidate touches a kept corner with at least its score
    kept_at = {(int(r), int(c)): int(s) for r, c, s in zip(rows[kept], cols[kept], scores[kept])}
    dropped = np.setdiff1d(np.arange(len(rows)), kept)
    for idx in dropped:
        r, c, s = int(rows[idx]), int(cols[idx]), int(scores[idx])
        near = [kept_at.get((r + dr, c + dc), -1) for dr in (-1, 0, 1) for dc in (-1, 0, 1)]
        assert max(near) >= s


def test_detector_border_and_errors():
    rng = np.random.default_rng(2)
    img = rng.integers(0, 256, size=(100, 90)).astype(np.uint8)
    kps = detect_fast(img, 10)
    assert len(kps) > 0
    assert kps.xy[:, 0].min() >= BORDER and kps.xy[:, 0].max() < 90 - BORDER
    assert kps.xy[:, 1].min() >= BORDER and kps.xy[:, 1].max() < 100 - BORDER
    with pytest.raises(ValueError):
        detect_fast(img, 0)
    with pytest.raises(ValueError):
        detect_fast(np.zeros((48, 100), dtype=np.uint8), 20)


def test_pattern_shape_and_support():
    p = brief_pattern(7)
    assert p.shape == (N_BITS, 4)
    assert np.abs(p).max() <= BORDER - 1
    assert np.all(np.any(p[:, :2] != p[:, 2:], axis=1))
    assert np.array_equal(p, brief_pattern(7))
    assert not np.array_equal(p, brief_pattern(8))


def centre_keypoints(n=5, size=64):
    xy = np.array([[BORDER + k, BORDER + (2 * k) % (size - 2 * BORDER)] for k in range(n)])
    return Keypoints(xy, np.zeros(n, dtype=np.int64))


def test_constant_image_gives_zero_descriptors():
    out = describe_brief(np.full((64, 64), 77, dtype=np.uint8), centre_keypoints(), 42)
    assert out.descriptors.shape == (5, N_BITS)
    assert not out.descriptors.any()


def test_descriptor_determinism():
    rng = np.random.default_rng(5)
    img = rng.integers(0, 256, size=(64, 64)).astype(np.uint8)
    a = describe_brief(img, centre_keypoints(), 42).descriptors
    b = describe_brief(img, centre_keypoints(), 42).descriptors
    assert a.tobytes() == b.tobytes()


def naive_box(img, r, c):
    h, w = img.shape
    total = 0
    for dr in range(-4, 5):
        for dc in range(-4, 5):
            total += int(img[min(max(r + dr, 0), h - 1), min(max(c + dc, 0), w - 1)])
    return total


def naive_brief(img, x, y, pattern):
    return np.array(
        [int(naive_box(img, y + a, x + b) < naive_box(img, y + c, x + d)) for a, b, c, d in pattern],
        dtype=np.uint8,
    )


def test_descriptor_matches_naive_box_filter():
    rng = np.random.default_rng(9)
    img = rng.integers(0, 256, size=(64, 64)).astype(np.uint8)
    kps = centre_keypoints(3)
    pattern = brief_pattern(42)
    got = describe_brief(img, kps, 42).descriptors
    for row, (x, y) in zip(got, kps.xy):
        assert np.array_equal(row, naive_brief(img, x, y, pattern))


def test_inverted_image_gives_complement():
    rng = np.random.default_rng(11)
    img = rng.integers(0, 256, size=(64, 64)).astype(np.uint8)
    kps = centre_keypoints()
    a = describe_brief(img, kps, 3).descriptors
    b = describe_brief(255 - img, kps, 3).descriptors
    pattern = brief_pattern(3)
    for x, y in kps.xy:
        for a1, b1, a2, b2 in pattern:
            assert naive_box(img, y + a1, x + b1) != naive_box(img, y + a2, x + b2)
    assert np.array_equal(a, 1 - b)


def test_border_keypoint_rejected():
    img = np.zeros((64, 64), dtype=np.uint8)
    kps = Keypoints(np.array([[BORDER - 1, 32]]), np.zeros(1, dtype=np.int64))
    with pytest.raises(ValueError):
        describe_brief(img, kps, 0)


@settings(max_examples=50, deadline=None)
@given(st.integers(0, 2**32 - 1))
def test_hamming_equals_squared_euclidean(seed):
    rng = np.random.default_rng(seed)
    a, b = rng.integers(0, 2, size=(2, N_BITS)).astype(np.uint8)
    ra, rb = a.astype(float), b.astype(float)
    assert set(np.unique(ra)) <= {0.0, 1.0}
    assert hamming(a, b) == int(np.sum((ra - rb) ** 2))
