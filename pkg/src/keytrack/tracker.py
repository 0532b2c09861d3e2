"""Per-frame tracking pipeline and resumable model snapshots."""

from __future__ import annotations

import hashlib
import io
import json
import struct
import time
from dataclasses import asdict, dataclass, field, replace

import numpy as np

from . import features, geometry
from .features import Keypoints
from .learning import HyperParams, TrainingSample, TrainingWindow
from .metric import MetricMap
from .model import ModelBank, predict, score_correspondences
from .optimizer import LearnDiagnostics, learn_step

VARIANTS = ("SSVM", "SML", "SMT", "SMM")
SNAPSHOT_MAGIC = b"KTSNAP\x00\x01"
SNAPSHOT_VERSION = 1


class InitializationError(ValueError):
    """The template yields too few keypoints."""


class SnapshotError(ValueError):
    """A snapshot is truncated, corrupted, or from an incompatible version."""


@dataclass(frozen=True)
class TrackerConfig:
    """Tracker settings.

    ``variant`` gates the learning components: SSVM (one task, fixed
    feature map), SML (one task, learned map), SMT (K tasks, fixed map) and
    SMM (K tasks, learned map).
    """

    variant: str = "SMM"
    hyper: HyperParams = field(default_factory=HyperParams)
    fast_threshold: int = 20
    template_keypoints: int = 100
    max_keypoints: int = 300
    min_template_keypoints: int = 8
    top_n: int = 1
    ransac_iters: int = 100
    seed: int = 0
    learn_enabled: bool = True
    learn_stride: int = 1
    n_neg: int = 10
    max_outer: int = 10
    outer_tol: float = 1e-4
    metric_iters: int = 3
    metric_step: float = 1e-3
    task_rule: str = "suffix"
    min_inliers: int = 4
    refine_output: bool = True
    record_timing: bool = True

    def __post_init__(self):
        if self.variant not in VARIANTS:
            raise ValueError(f"variant must be one of {VARIANTS}, got {self.variant!r}")
        if self.variant in ("SMT", "SMM") and self.hyper.K < 2:
            raise ValueError(f"variant {self.variant} needs K > 1")
        if self.task_rule not in ("suffix", "all"):
            raise ValueError(f"unknown task rule {self.task_rule!r}")
        for name in ("fast_threshold", "template_keypoints", "max_keypoints", "top_n", "learn_stride"):
            if getattr(self, name) < 1:
                raise ValueError(f"{name} must be positive")
        if self.ransac_iters < 0 or self.n_neg < 0:
            raise ValueError("ransac_iters and n_neg must be non-negative")

    @property
    def K(self) -> int:
        return 1 if self.variant in ("SSVM", "SML") else self.hyper.K

    @property
    def learn_metric(self) -> bool:
        return self.variant in ("SML", "SMM")

    @property
    def effective_hyper(self) -> HyperParams:
        return replace(self.hyper, K=self.K)

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, data: dict) -> TrackerConfig:
        data = dict(data)
        hyper = data.pop("hyper", {})
        if isinstance(hyper, dict):
            hyper = HyperParams(**hyper)
        return cls(hyper=hyper, **data)


@dataclass
class FrameResult:
    frame: int
    detected: bool
    homography: np.ndarray | None
    inliers: int
    score: float
    ms: float
    learn: LearnDiagnostics | None = None


class Tracker:
    """Tracker state: fixed template keypoints, models, feature map and window."""

    def __init__(
        self,
        template: Keypoints,
        bank: ModelBank,
        fmap: MetricMap,
        window: TrainingWindow,
        config: TrackerConfig,
        t: int = 0,
        pattern_seed: int | None = None,
    ):
        self.template = template
        self.bank = bank
        self.fmap = fmap
        self.window = window
        self.config = config
        self.t = t
        self.pattern_seed = config.seed if pattern_seed is None else pattern_seed
        self.pattern = features.brief_pattern(self.pattern_seed)

    @classmethod
    def init(cls, template_img: np.ndarray, config: TrackerConfig) -> Tracker:
        """Detect and describe template keypoints and build the initial models.

        Raises:
            InitializationError: fewer than ``config.min_template_keypoints``
                keypoints were found.
        """
        pattern = features.brief_pattern(config.seed)
        kps = features.detect_and_describe(
            template_img, config.fast_threshold, config.template_keypoints, pattern
        )
        if len(kps) < config.min_template_keypoints:
            raise InitializationError(
                f"template yields {len(kps)} keypoints, need at least {config.min_template_keypoints}"
            )
        hyper = config.effective_hyper
        bank = ModelBank.initial(kps.descriptors, hyper.K, hyper.lambda1)
        return cls(kps, bank, MetricMap.identity(features.N_BITS), TrainingWindow((), hyper.K), config)

    def ransac_seed(self, t: int) -> int:
        return (self.config.seed * 1_000_003 + t) & 0x7FFFFFFF

    def process(self, frame: np.ndarray) -> FrameResult:
        """Track one frame; learns from it when the prediction succeeds."""
        start = time.perf_counter()
        cfg = self.config
        hyper = cfg.effective_hyper
        frame = np.asarray(frame, dtype=np.uint8)
        if frame.ndim != 2:
            raise ValueError("frames must be 2-D grayscale arrays")
        self.t += 1
        t = self.t

        kps = features.detect_and_describe(frame, cfg.fast_threshold, cfg.max_keypoints, self.pattern)
        if len(kps) == 0:
            return FrameResult(t, False, None, 0, 0.0, _ms(start))
        corr = score_correspondences(
            self.template.xy,
            self.template.descriptors,
            kps.xy,
            kps.descriptors,
            self.bank.last(),
            self.fmap,
            cfg.top_n,
        )
        hyps, _ = geometry.ransac_hypotheses(corr, cfg.ransac_iters, hyper.tau, self.ransac_seed(t))
        pred = predict(self.bank, corr, hyps, hyper.tau, self.fmap)
        if pred is None or pred.inliers < cfg.min_inliers:
            inl = 0 if pred is None else pred.inliers
            score = 0.0 if pred is None else pred.score
            return FrameResult(t, False, None, inl, score, _ms(start))

        sample = TrainingSample.build(corr, pred.homography, hyps, hyper.tau, cfg.n_neg, frame=t)
        self.window = self.window.append(sample)
        diag = None
        if cfg.learn_enabled and t % cfg.learn_stride == 0:
            self.bank, self.fmap, diag = learn_step(
                self.bank,
                self.fmap,
                self.window,
                hyper,
                t,
                learn_metric=cfg.learn_metric,
                max_outer=cfg.max_outer,
                tol=cfg.outer_tol,
                task_rule=cfg.task_rule,
                metric_iters=cfg.metric_iters,
                metric_step=cfg.metric_step,
            )
        out = self._refine(corr, pred.homography) if cfg.refine_output else pred.homography
        return FrameResult(t, True, out, pred.inliers, pred.score, _ms(start), diag)

    def _refine(self, corr, y: np.ndarray) -> np.ndarray:
        """Least-squares re-estimate of ``y`` over its own inlier set.

        Only the reported homography is refined; the structured decision and
        the training sample keep the selected hypothesis.
        """
        inl = geometry.inlier_set(corr, y, self.config.hyper.tau).pairs
        if len(inl) < 4:
            return y
        try:
            return geometry.estimate_dlt(corr.template_xy[inl[:, 0]], corr.frame_xy[inl[:, 1]])
        except geometry.DegenerateHomography:
            return y

    # snapshots

    def snapshot(self) -> bytes:
        """Serialize the full tracking state.

        Layout: magic, u32 version, u32 header length, JSON header, raw
        little-endian arrays, SHA-256 of everything before it.
        """
        arrays: dict[str, np.ndarray] = {
            "template_xy": self.template.xy,
            "template_score": self.template.score,
            "template_desc": self.template.descriptors,
            "w0": self.bank.w0,
            "v": self.bank.v,
            "M": self.fmap.M,
        }
        sample_meta = []
        for n, s in enumerate(self.window.samples):
            for name in _SAMPLE_ARRAYS:
                arrays[f"s{n}.{name}"] = getattr(s, name)
            sample_meta.append({"frame": s.frame})
        header = {
            "version": SNAPSHOT_VERSION,
            "t": self.t,
            "K": self.bank.K,
            "n_slots": self.bank.n_slots,
            "d_f": self.bank.d_f,
            "bank_version": self.bank.version,
            "epsilon": self.fmap.epsilon,
            "pattern_seed": self.pattern_seed,
            "window_K": self.window.K,
            "samples": sample_meta,
            "arrays": [],
        }
        blob = io.BytesIO()
        for name, arr in arrays.items():
            arr = np.ascontiguousarray(arr)
            dtype = arr.dtype.newbyteorder("<") if arr.dtype.byteorder == ">" else arr.dtype
            data = arr.astype(dtype, copy=False).tobytes()
            header["arrays"].append(
                {"name": name, "dtype": dtype.str, "shape": list(arr.shape), "nbytes": len(data)}
            )
            blob.write(data)
        head = json.dumps(header, sort_keys=True, separators=(",", ":")).encode()
        body = SNAPSHOT_MAGIC + struct.pack("<II", SNAPSHOT_VERSION, len(head)) + head + blob.getvalue()
        return body + hashlib.sha256(body).digest()

    @classmethod
    def restore(cls, data: bytes, config: TrackerConfig) -> Tracker:
        """Rebuild a tracker from :meth:`snapshot` bytes.

        Raises:
            SnapshotError: bad magic, checksum or version, or a model shape
                that does not match ``config``.
        """
        if len(data) < len(SNAPSHOT_MAGIC) + 8 + 32 or not data.startswith(SNAPSHOT_MAGIC):
            raise SnapshotError("not a tracker snapshot")
        body, digest = data[:-32], data[-32:]
        if hashlib.sha256(body).digest() != digest:
            raise SnapshotError("snapshot checksum mismatch")
        pos = len(SNAPSHOT_MAGIC)
        version, head_len = struct.unpack_from("<II", body, pos)
        if version != SNAPSHOT_VERSION:
            raise SnapshotError(f"snapshot version {version}, expected {SNAPSHOT_VERSION}")
        pos += 8
        header = json.loads(body[pos : pos + head_len])
        pos += head_len
        arrays = {}
        for spec in header["arrays"]:
            raw = body[pos : pos + spec["nbytes"]]
            arrays[spec["name"]] = np.frombuffer(raw, dtype=np.dtype(spec["dtype"])).reshape(spec["shape"]).copy()
            pos += spec["nbytes"]
        if header["K"] != config.K:
            raise SnapshotError(f"snapshot has K={header['K']}, config expects {config.K}")

        template = Keypoints(arrays["template_xy"], arrays["template_score"], arrays["template_desc"])
        bank = ModelBank(arrays["w0"], arrays["v"], header["bank_version"])
        fmap = MetricMap(arrays["M"], header["epsilon"])
        samples = []
        for n, meta in enumerate(header["samples"]):
            fields = {name: arrays[f"s{n}.{name}"] for name in _SAMPLE_ARRAYS}
            samples.append(TrainingSample(frame=meta["frame"], **fields))
        window = TrainingWindow(tuple(samples), header["window_K"])
        return cls(template, bank, fmap, window, config, header["t"], header["pattern_seed"])


_SAMPLE_ARRAYS = (
    "desc",
    "pair_slot",
    "pair_row",
    "true_pairs",
    "hyp_masks",
    "hyp_delta",
    "neg_rows",
    "homography",
    "hyps",
)


def _ms(start: float) -> float:
    return (time.perf_counter() - start) * 1000.0


def init(template_img: np.ndarray, config: TrackerConfig) -> Tracker:
    return Tracker.init(template_img, config)


def process_frame(state: Tracker, frame: np.ndarray) -> tuple[FrameResult, Tracker]:
    return state.process(frame), state


def snapshot(state: Tracker) -> bytes:
    return state.snapshot()


def restore(data: bytes, config: TrackerConfig) -> Tracker:
    return Tracker.restore(data, config)
