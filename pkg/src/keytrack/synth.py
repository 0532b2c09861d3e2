"""Synthetic planar sequences with exact ground-truth homographies.

The template is warped into each frame by a homography whose parameters
follow a clipped random walk, composited over a static background, then
degraded by a global gain, Gaussian blur and additive noise.
"""

from __future__ import annotations

import math
from dataclasses import asdict, dataclass, fields
from pathlib import Path

import numpy as np
from scipy import ndimage

from .imaging import save_pgm


class GenerationError(RuntimeError):
    """Motion draws kept violating the visibility constraint."""


@dataclass(frozen=True)
class SynthSpec:
    """Sequence settings.

    Each ``*_step`` is the per-frame standard deviation of a random-walk
    increment and each ``*_range`` the symmetric clip on the walk.
    Rotation is in degrees, scale is log2 relative to the template,
    translation is in pixels relative to the frame centre and skew is the
    projective row coefficient in 1/pixel. ``rotation_sweep`` adds a
    sinusoid of that amplitude and period ``sweep_period`` frames to the
    rotation walk before clipping.
    """

    length: int = 100
    width: int = 320
    height: int = 240
    rotation_step: float = 1.0
    rotation_range: float = 15.0
    rotation_sweep: float = 0.0
    sweep_period: int = 300
    scale_step: float = 0.01
    scale_range: float = 0.2
    translation_step: float = 2.0
    translation_range: float = 30.0
    skew_step: float = 2e-5
    skew_range: float = 2e-4
    noise_sigma: float = 2.0
    blur_radius: float = 0.0
    gain_step: float = 0.0
    gain_range: tuple[float, float] = (1.0, 1.0)
    clutter_count: int = 0
    min_visible: float = 0.6
    seed: int = 0

    def __post_init__(self):
        if self.length < 0 or self.width < 16 or self.height < 16:
            raise ValueError("length must be >= 0 and frames at least 16x16")
        if self.rotation_sweep < 0 or self.sweep_period < 1:
            raise ValueError("rotation_sweep must be >= 0 and sweep_period >= 1")
        for f in fields(self):
            if f.name.endswith(("_step", "_range")) and f.name != "gain_range":
                if getattr(self, f.name) < 0:
                    raise ValueError(f"{f.name} must be non-negative")
        lo, hi = self.gain_range
        if not 0 < lo <= hi:
            raise ValueError("gain_range must satisfy 0 < low <= high")
        if self.noise_sigma < 0 or self.blur_radius < 0 or self.clutter_count < 0:
            raise ValueError("noise, blur and clutter must be non-negative")
        object.__setattr__(self, "gain_range", (float(lo), float(hi)))

    def to_dict(self) -> dict:
        d = asdict(self)
        d["gain_range"] = list(self.gain_range)
        return d

    @classmethod
    def from_dict(cls, data: dict) -> SynthSpec:
        data = dict(data)
        if "gain_range" in data:
            data["gain_range"] = tuple(data["gain_range"])
        return cls(**data)

    @classmethod
    def easy(cls, seed: int = 0, length: int = 200) -> SynthSpec:
        return cls(length=length, seed=seed)

    @classmethod
    def stress(cls, seed: int = 0, length: int = 300) -> SynthSpec:
        return cls(
            length=length,
            rotation_step=1.0,
            rotation_range=45.0,
            rotation_sweep=40.0,
            sweep_period=100,
            scale_step=0.015,
            scale_range=0.3,
            translation_step=3.0,
            translation_range=40.0,
            noise_sigma=3.0,
            blur_radius=0.5,
            gain_step=0.03,
            gain_range=(0.6, 1.4),
            clutter_count=20,
            seed=seed,
        )


@dataclass(frozen=True)
class MotionState:
    rotation: float = 0.0
    log_scale: float = 0.0
    tx: float = 0.0
    ty: float = 0.0
    skew_x: float = 0.0
    skew_y: float = 0.0
    gain: float = 1.0


def make_template(seed: int = 0, width: int = 160, height: int = 120) -> np.ndarray:
    """Textured template: overlapping random rectangles and disks on a gradient."""
    rng = np.random.default_rng(seed)
    yy, xx = np.mgrid[0:height, 0:width].astype(np.float64)
    img = 90.0 + 40.0 * xx / width + 20.0 * yy / height
    for _ in range(70):
        v = rng.uniform(0, 255)
        if rng.random() < 0.6:
            x0, y0 = rng.integers(0, width - 4), rng.integers(0, height - 4)
            w, h = rng.integers(4, max(5, width // 4)), rng.integers(4, max(5, height // 4))
            img[y0 : y0 + h, x0 : x0 + w] = v
        else:
            cx, cy, r = rng.uniform(0, width), rng.uniform(0, height), rng.uniform(3, 12)
            img[(xx - cx) ** 2 + (yy - cy) ** 2 <= r * r] = v
    return np.clip(np.rint(img), 0, 255).astype(np.uint8)


def motion_homography(state: MotionState, template_shape, frame_shape) -> np.ndarray:
    """Template-to-frame homography for one motion state.

    The template centre is rotated and scaled about itself, skewed, then
    placed at the frame centre plus the translation.
    """
    th, tw = template_shape
    fh, fw = frame_shape
    ct = np.array([[1, 0, -(tw - 1) / 2.0], [0, 1, -(th - 1) / 2.0], [0, 0, 1]])
    a = math.radians(state.rotation)
    s = 2.0**state.log_scale
    rs = np.array([[s * math.cos(a), -s * math.sin(a), 0], [s * math.sin(a), s * math.cos(a), 0], [0, 0, 1]])
    sk = np.array([[1, 0, 0], [0, 1, 0], [state.skew_x, state.skew_y, 1]])
    cf = np.array([[1, 0, (fw - 1) / 2.0 + state.tx], [0, 1, (fh - 1) / 2.0 + state.ty], [0, 0, 1]])
    h = cf @ sk @ rs @ ct
    return h / h[2, 2]


def visible_fraction(h: np.ndarray, template_shape, frame_shape, grid: int = 21) -> float:
    """Fraction of a template grid that lands inside the frame; 0 if any corner flips."""
    th, tw = template_shape
    fh, fw = frame_shape
    u, v = np.meshgrid(np.linspace(0, tw - 1, grid), np.linspace(0, th - 1, grid))
    pts = np.stack([u.ravel(), v.ravel(), np.ones(u.size)])
    q = h @ pts
    if np.any(q[2] <= 1e-9):
        return 0.0
    x, y = q[0] / q[2], q[1] / q[2]
    inside = (x >= 0) & (x <= fw - 1) & (y >= 0) & (y <= fh - 1)
    return float(inside.mean())


def motion_path(template_shape, spec: SynthSpec, rng: np.random.Generator | None = None) -> list[MotionState]:
    """Per-frame motion states of a sequence.

    Raises:
        GenerationError: ten consecutive draws failed the visibility check.
    """
    if rng is None:
        rng = np.random.default_rng(np.random.SeedSequence(spec.seed).spawn(2)[0])
    frame_shape = (spec.height, spec.width)
    lo, hi = spec.gain_range
    state = MotionState(gain=float(np.clip(1.0, lo, hi)))
    walk = 0.0
    steps = np.array(
        [
            spec.rotation_step,
            spec.scale_step,
            spec.translation_step,
            spec.translation_step,
            spec.skew_step,
            spec.skew_step,
            spec.gain_step,
        ]
    )
    out = []
    for k in range(spec.length):
        for _ in range(10):
            inc = rng.normal(size=7) * steps
            walk_try = _clip(walk + inc[0], spec.rotation_range)
            sweep = spec.rotation_sweep * math.sin(2.0 * math.pi * (k + 1) / spec.sweep_period)
            cand = MotionState(
                rotation=_clip(walk_try + sweep, spec.rotation_range),
                log_scale=_clip(state.log_scale + inc[1], spec.scale_range),
                tx=_clip(state.tx + inc[2], spec.translation_range),
                ty=_clip(state.ty + inc[3], spec.translation_range),
                skew_x=_clip(state.skew_x + inc[4], spec.skew_range),
                skew_y=_clip(state.skew_y + inc[5], spec.skew_range),
                gain=float(np.clip(state.gain + inc[6], lo, hi)),
            )
            h = motion_homography(cand, template_shape, frame_shape)
            if visible_fraction(h, template_shape, frame_shape) >= spec.min_visible:
                break
        else:
            raise GenerationError(f"frame {k + 1}: no admissible motion after 10 draws")
        state, walk = cand, walk_try
        out.append(state)
    return out


def _clip(x: float, r: float) -> float:
    return float(min(max(x, -r), r))


def make_background(spec: SynthSpec, rng: np.random.Generator) -> np.ndarray:
    """Static background: a smooth low-contrast field plus clutter patches."""
    h, w = spec.height, spec.width
    base = ndimage.gaussian_filter(rng.normal(size=(h, w)), 12.0)
    base = 110.0 + 25.0 * base / max(np.abs(base).max(), 1e-12)
    for _ in range(spec.clutter_count):
        ph, pw = rng.integers(6, 24, size=2)
        y0, x0 = rng.integers(0, h - ph), rng.integers(0, w - pw)
        cells = rng.uniform(0, 255, size=(ph // 3 + 1, pw // 3 + 1))
        base[y0 : y0 + ph, x0 : x0 + pw] = np.repeat(np.repeat(cells, 3, 0), 3, 1)[:ph, :pw]
    return base


def warp_bilinear(template: np.ndarray, h: np.ndarray, frame_shape) -> tuple[np.ndarray, np.ndarray]:
    """Inverse-map every frame pixel into the template and sample bilinearly.

    Returns the warped intensities and the mask of pixels whose preimage lies
    inside the template.
    """
    fh, fw = frame_shape
    th, tw = template.shape
    yy, xx = np.mgrid[0:fh, 0:fw].astype(np.float64)
    inv = np.linalg.inv(h)
    q = inv @ np.stack([xx.ravel(), yy.ravel(), np.ones(xx.size)])
    with np.errstate(divide="ignore", invalid="ignore"):
        u = (q[0] / q[2]).reshape(fh, fw)
        v = (q[1] / q[2]).reshape(fh, fw)
    mask = (q[2].reshape(fh, fw) > 0) & (u >= 0) & (u <= tw - 1) & (v >= 0) & (v <= th - 1)
    u = np.where(mask, u, 0.0)
    v = np.where(mask, v, 0.0)
    x0 = np.minimum(np.floor(u).astype(np.int64), tw - 2)
    y0 = np.minimum(np.floor(v).astype(np.int64), th - 2)
    ax, ay = u - x0, v - y0
    t = template.astype(np.float64)
    out = (
        (1 - ay) * ((1 - ax) * t[y0, x0] + ax * t[y0, x0 + 1])
        + ay * ((1 - ax) * t[y0 + 1, x0] + ax * t[y0 + 1, x0 + 1])
    )
    return np.where(mask, out, 0.0), mask


def render_sequence(template: np.ndarray, spec: SynthSpec):
    """Yield ``(frame, homography)`` for every frame, deterministically per seed."""
    template = np.asarray(template, dtype=np.uint8)
    motion_ss, render_ss = np.random.SeedSequence(spec.seed).spawn(2)
    path = motion_path(template.shape, spec, np.random.default_rng(motion_ss))
    rng = np.random.default_rng(render_ss)
    background = make_background(spec, rng)
    shape = (spec.height, spec.width)
    for state in path:
        h = motion_homography(state, template.shape, shape)
        warped, mask = warp_bilinear(template, h, shape)
        img = np.where(mask, warped, background) * state.gain
        if spec.blur_radius > 0:
            img = ndimage.gaussian_filter(img, spec.blur_radius)
        if spec.noise_sigma > 0:
            img = img + rng.normal(scale=spec.noise_sigma, size=shape)
        yield np.clip(np.rint(img), 0, 255).astype(np.uint8), h


def generate_sequence(template: np.ndarray, spec: SynthSpec, out_dir) -> np.ndarray:
    """Write ``frame_000001.pgm``... and ``groundtruth.txt`` to ``out_dir``.

    Returns the ``(length, 3, 3)`` ground-truth homographies.
    """
    from .evaluation import write_ground_truth

    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    gts = []
    for k, (frame, h) in enumerate(render_sequence(template, spec), start=1):
        save_pgm(out / f"frame_{k:06d}.pgm", frame)
        gts.append(h)
    gts = np.array(gts).reshape(-1, 3, 3)
    write_ground_truth(out / "groundtruth.txt", gts)
    return gts
