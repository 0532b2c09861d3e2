import dataclasses
import hashlib
import struct

import numpy as np
import pytest

from keytrack.evaluation import score_S, template_bounds
from keytrack.learning import HyperParams
from keytrack.synth import SynthSpec, make_template, render_sequence
from keytrack.tracker import (
    SNAPSHOT_MAGIC,
    InitializationError,
    SnapshotError,
    Tracker,
    TrackerConfig,
)


def checkerboard(size=128, board=64, cell=16):
    """Two-tone board inset on mid-gray; bare X-junctions never fire FAST-9."""
    img = np.full((size, size), 128, np.uint8)
    o = (size - board) // 2
    yy, xx = np.mgrid[:board, :board]
    img[o : o + board, o : o + board] = np.where(((yy // cell) + (xx // cell)) % 2 == 0, 30, 220)
    return img


@pytest.fixture(scope="module")
def easy20():
    tpl = make_template(0)
    return tpl, list(render_sequence(tpl, SynthSpec.easy(seed=0, length=20)))


def run(tracker, frames, bounds):
    out = []
    for img, h in frames:
        r = tracker.process(img)
        out.append(score_S(r.homography, h, bounds) if r.detected else None)
    return out


def test_config_validation():
    with pytest.raises(ValueError):
        TrackerConfig(variant="SVM")
    with pytest.raises(ValueError):
        TrackerConfig(variant="SMM", hyper=HyperParams(K=1))
    with pytest.raises(ValueError):
        TrackerConfig(top_n=0)
    assert TrackerConfig(variant="SSVM").K == 1
    assert TrackerConfig(variant="SMT").K == 5 and not TrackerConfig(variant="SMT").learn_metric
    assert TrackerConfig(variant="SML").learn_metric
    cfg = TrackerConfig(variant="SML", seed=4, hyper=HyperParams(lambda2=0.25))
    assert TrackerConfig.from_dict(cfg.to_dict()) == cfg


def test_blank_template_fails_with_count():
    with pytest.raises(InitializationError, match="0 keypoints"):
        Tracker.init(np.full((64, 64), 128, np.uint8), TrackerConfig())


def test_checkerboard_template_initializes():
    tr = Tracker.init(checkerboard(), TrackerConfig())
    assert len(tr.template) >= 8
    assert tr.t == 0 and len(tr.window) == 0
    assert np.array_equal(tr.fmap.M, np.eye(256))
    assert tr.bank.K == 5 and tr.bank.n_slots == len(tr.template)


def test_init_is_deterministic():
    tpl = make_template(3)
    a = Tracker.init(tpl, TrackerConfig(seed=9))
    b = Tracker.init(tpl, TrackerConfig(seed=9))
    assert a.snapshot() == b.snapshot()


def test_self_tracking_recovers_identity():
    tpl = make_template(1)
    tr = Tracker.init(tpl, TrackerConfig())
    r = tr.process(tpl)
    assert r.detected
    assert score_S(r.homography, np.eye(3), template_bounds(tpl.shape)) < 1.0


def test_black_frame_is_lost_and_leaves_state_untouched(easy20):
    tpl, frames = easy20
    tr = Tracker.init(tpl, TrackerConfig())
    for img, _ in frames[:3]:
        tr.process(img)
    bank, fmap, window = tr.bank, tr.fmap, tr.window
    w = bank.all_w().copy()
    r = tr.process(np.zeros_like(frames[0][0]))
    assert not r.detected and r.homography is None
    assert tr.t == 4
    assert tr.bank is bank and tr.fmap is fmap and tr.window is window
    assert np.array_equal(tr.bank.all_w(), w)


def test_lost_on_unrelated_frame_keeps_models():
    tpl = make_template(0)
    tr = Tracker.init(tpl, TrackerConfig(min_inliers=10_000))
    snap = tr.snapshot()
    r = tr.process(make_template(5))
    assert not r.detected
    restored = Tracker.restore(snap, tr.config)
    assert np.array_equal(restored.bank.all_w(), tr.bank.all_w())
    assert len(tr.window) == 0


def test_non_grayscale_frame_rejected():
    tr = Tracker.init(make_template(0), TrackerConfig())
    with pytest.raises(ValueError):
        tr.process(np.zeros((10, 10, 3), np.uint8))


@pytest.mark.parametrize("variant", ["SSVM", "SML", "SMT", "SMM"])
def test_twenty_frame_sequence(easy20, variant):
    tpl, frames = easy20
    tr = Tracker.init(tpl, TrackerConfig(variant=variant))
    S = []
    for img, h in frames:
        r = tr.process(img)
        S.append(score_S(r.homography, h, template_bounds(tpl.shape)) if r.detected else None)
        assert len(tr.window) <= tr.config.K
    assert sum(s is not None and s < 10 for s in S) >= 18
    identity = np.array_equal(tr.fmap.M, np.eye(256))
    assert identity == (variant in ("SSVM", "SMT"))
    assert tr.bank.K == (1 if variant in ("SSVM", "SML") else 5)


def test_full_run_is_deterministic(easy20):
    tpl, frames = easy20
    cfg = TrackerConfig(seed=2)
    a, b = Tracker.init(tpl, cfg), Tracker.init(tpl, cfg)
    for img, _ in frames[:8]:
        ra, rb = a.process(img), b.process(img)
        assert ra.detected == rb.detected
        assert ra.homography is None or ra.homography.tobytes() == rb.homography.tobytes()
    assert a.snapshot() == b.snapshot()


def test_snapshot_round_trip_same_frame(easy20):
    tpl, frames = easy20
    tr = Tracker.init(tpl, TrackerConfig())
    for img, _ in frames[:4]:
        tr.process(img)
    copy = Tracker.restore(tr.snapshot(), tr.config)
    assert copy.snapshot() == tr.snapshot()
    ra, rb = tr.process(frames[4][0]), copy.process(frames[4][0])
    assert ra.homography.tobytes() == rb.homography.tobytes()
    assert ra.score == rb.score and ra.inliers == rb.inliers


def test_resume_after_frame_ten_matches_uninterrupted(easy20):
    tpl, frames = easy20
    b = template_bounds(tpl.shape)
    cfg = TrackerConfig(seed=1)
    full = run(Tracker.init(tpl, cfg), frames, b)
    tr = Tracker.init(tpl, cfg)
    head = run(tr, frames[:10], b)
    tail = run(Tracker.restore(tr.snapshot(), cfg), frames[10:], b)
    assert head + tail == full


def test_snapshot_corruption_detected():
    tr = Tracker.init(make_template(0), TrackerConfig())
    data = tr.snapshot()
    with pytest.raises(SnapshotError):
        Tracker.restore(data[:-10], tr.config)
    with pytest.raises(SnapshotError):
        Tracker.restore(data[:5], tr.config)
    flipped = bytearray(data)
    flipped[len(data) // 2] ^= 0xFF
    with pytest.raises(SnapshotError, match="checksum"):
        Tracker.restore(bytes(flipped), tr.config)
    # a well-formed snapshot from a future format version
    body = bytearray(data[:-32])
    struct.pack_into("<I", body, len(SNAPSHOT_MAGIC), 99)
    future = bytes(body) + hashlib.sha256(bytes(body)).digest()
    with pytest.raises(SnapshotError, match="version"):
        Tracker.restore(future, tr.config)
    with pytest.raises(SnapshotError):
        Tracker.restore(data, dataclasses.replace(tr.config, variant="SSVM"))
