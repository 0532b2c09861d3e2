"""Command-line entry points: track, synth, eval, ablate."""

from __future__ import annotations

import argparse
import csv
import dataclasses
import json
import logging
import sys
from pathlib import Path

import numpy as np

from . import evaluation
from .imaging import ImageFormatError, load_image, save_pgm
from .learning import HyperParams
from .synth import GenerationError, SynthSpec, generate_sequence, make_template
from .tracker import VARIANTS, FrameResult, InitializationError, Tracker, TrackerConfig

EXIT_OK = 0
EXIT_CONFIG = 2
EXIT_IO = 3
EXIT_RUNTIME = 4

FRAME_SUFFIXES = (".pgm", ".png")
DIAG_FIELDS = [
    "frame",
    "outer_iters",
    "objective_start",
    "objective_end",
    "J",
    "alpha_count",
    "beta_count",
    "metric_steps",
    "skipped",
]

log = logging.getLogger("keytrack")


class ConfigError(ValueError):
    pass


# config plumbing


def _flag(name: str) -> str:
    return "--" + name.replace("_", "-")


def _add_dataclass_flags(parser: argparse.ArgumentParser, cls, defaults, skip=()) -> None:
    for f in dataclasses.fields(cls):
        if f.name in skip:
            continue
        default = getattr(defaults, f.name)
        help_text = f"default: {default}"
        if isinstance(default, bool):
            parser.add_argument(_flag(f.name), dest=f.name, default=None, action=argparse.BooleanOptionalAction, help=help_text)
        elif isinstance(default, tuple):
            parser.add_argument(_flag(f.name), dest=f.name, default=None, type=float, nargs=len(default), help=help_text)
        else:
            parser.add_argument(_flag(f.name), dest=f.name, default=None, type=type(default), help=help_text)


def _overrides(args, cls, skip=()) -> dict:
    out = {}
    for f in dataclasses.fields(cls):
        if f.name in skip:
            continue
        v = getattr(args, f.name, None)
        if v is not None:
            out[f.name] = tuple(v) if isinstance(v, list) else v
    return out


def load_config(path) -> dict:
    if path is None:
        return {}
    try:
        with open(path) as fh:
            data = json.load(fh)
    except json.JSONDecodeError as exc:
        raise ConfigError(f"{path}: invalid JSON ({exc})") from None
    if not isinstance(data, dict) or not set(data) <= {"tracker", "synth"}:
        raise ConfigError(f"{path}: expected an object with 'tracker' and/or 'synth' sections")
    return data


def build_tracker_config(args, file_cfg: dict) -> TrackerConfig:
    """File values first, then flags; flags win."""
    base = dict(file_cfg.get("tracker", {}))
    hyper = dict(base.pop("hyper", {}))
    hyper.update(_overrides(args, HyperParams))
    base.update(_overrides(args, TrackerConfig, skip=("hyper",)))
    try:
        return TrackerConfig(hyper=HyperParams(**hyper), **base)
    except (TypeError, ValueError) as exc:
        raise ConfigError(f"tracker config: {exc}") from None


def build_synth_spec(args, file_cfg: dict) -> SynthSpec:
    preset = getattr(args, "preset", None) or "default"
    base = {
        "default": SynthSpec(),
        "easy": SynthSpec.easy(),
        "stress": SynthSpec.stress(),
    }[preset].to_dict()
    base.update(file_cfg.get("synth", {}))
    base.update(_overrides(args, SynthSpec))
    try:
        return SynthSpec.from_dict(base)
    except (TypeError, ValueError) as exc:
        raise ConfigError(f"synth config: {exc}") from None


def echo_config(out_dir: Path, command: str, tracker: TrackerConfig | None = None, synth: SynthSpec | None = None) -> None:
    data: dict = {}
    if tracker is not None:
        data["tracker"] = tracker.to_dict()
    if synth is not None:
        data["synth"] = synth.to_dict()
    with open(out_dir / "config.json", "w") as fh:
        json.dump(data, fh, indent=2, sort_keys=True)
        fh.write("\n")
    log.info("%s: config written to %s", command, out_dir / "config.json")


# shared helpers


def list_frames(seq_dir) -> list[Path]:
    d = Path(seq_dir)
    if not d.is_dir():
        raise FileNotFoundError(f"sequence directory not found: {d}")
    # synth drops its template next to the frames
    frames = sorted(p for p in d.iterdir() if p.suffix.lower() in FRAME_SUFFIXES and p.stem != "template")
    if not frames:
        raise FileNotFoundError(f"no .pgm or .png frames in {d}")
    return frames


def run_tracker(template: np.ndarray, frames: list[Path], config: TrackerConfig) -> tuple[Tracker, list[FrameResult]]:
    tracker = Tracker.init(template, config)
    results = [tracker.process(load_image(p)) for p in frames]
    return tracker, results


def _rows(results, record_timing: bool):
    for r in results:
        yield evaluation.ResultRow(r.frame, r.detected, r.homography, r.inliers, r.score, r.ms if record_timing else None)


def write_diagnostics(path, results) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(DIAG_FIELDS)
        for r in results:
            d = r.learn
            if d is None:
                w.writerow([r.frame, 0, "", "", "", 0, 0, 0, 0])
                continue
            w.writerow(
                [
                    r.frame,
                    d.outer_iters,
                    repr(d.objective_start),
                    repr(d.objective_end),
                    repr(d.J),
                    d.alpha_count,
                    d.beta_count,
                    d.metric_steps,
                    int(d.skipped),
                ]
            )


def _bounds(args) -> tuple[float, float, float, float]:
    if args.bounds is not None:
        return tuple(args.bounds)
    if args.template is None:
        raise ConfigError("eval needs --template or --bounds")
    return evaluation.template_bounds(load_image(args.template).shape)


# commands


def cmd_track(args) -> int:
    file_cfg = load_config(args.config)
    config = build_tracker_config(args, file_cfg)
    frames = list_frames(args.sequence)
    template = load_image(args.template)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    echo_config(out, "track", tracker=config)
    tracker, results = run_tracker(template, frames, config)
    evaluation.write_results(out / "results.csv", _rows(results, config.record_timing))
    write_diagnostics(out / "diagnostics.csv", results)
    (out / "model.snap").write_bytes(tracker.snapshot())
    n_det = sum(r.detected for r in results)
    print(f"frames={len(results)} detected={n_det} out={out}")
    return EXIT_OK


def cmd_synth(args) -> int:
    spec = build_synth_spec(args, load_config(args.config))
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    if args.template is not None:
        template = load_image(args.template)
    else:
        template = make_template(spec.seed)
        save_pgm(out / "template.pgm", template)
    echo_config(out, "synth", synth=spec)
    gts = generate_sequence(template, spec, out)
    print(f"frames={len(gts)} out={out}")
    return EXIT_OK


def cmd_eval(args) -> int:
    rows = evaluation.read_results(args.results)
    gt = evaluation.read_ground_truth(args.ground_truth)
    scores, rate, acc = evaluation.evaluate(rows, gt, _bounds(args))
    if args.out is not None:
        evaluation.write_metrics(args.out, scores, acc)
    print(f"success_rate={rate:.6f} false_frames={int(acc[-1])}")
    return EXIT_OK


def cmd_ablate(args) -> int:
    file_cfg = load_config(args.config)
    base = build_tracker_config(args, file_cfg)
    frames = list_frames(args.sequence)
    template = load_image(args.template)
    gt_path = Path(args.ground_truth) if args.ground_truth else Path(args.sequence) / "groundtruth.txt"
    gt = evaluation.read_ground_truth(gt_path)
    bounds = evaluation.template_bounds(template.shape)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    echo_config(out, "ablate", tracker=base)
    table = []
    for variant in VARIANTS:
        config = dataclasses.replace(base, variant=variant)
        _, results = run_tracker(template, frames, config)
        rows = list(_rows(results, config.record_timing))
        evaluation.write_results(out / f"results_{variant}.csv", rows)
        _, rate, acc = evaluation.evaluate(rows, gt, bounds)
        table.append((variant, rate, int(acc[-1]), len(rows)))
    with open(out / "ablation.csv", "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["variant", "success_rate", "false_frames", "frames"])
        for variant, rate, n_false, n in table:
            w.writerow([variant, f"{rate:.6f}", n_false, n])
    print(f"{'variant':<8}{'success_rate':>14}{'false_frames':>14}")
    for variant, rate, n_false, _ in table:
        print(f"{variant:<8}{rate:>14.4f}{n_false:>14d}")
    return EXIT_OK


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="keytrack", description=__doc__)
    parser.add_argument("-v", "--verbose", action="store_true", help="log progress to stderr")
    sub = parser.add_subparsers(dest="command", required=True)

    defaults = TrackerConfig()

    def tracker_flags(p):
        p.add_argument("--config", help="JSON config file; flags override its values")
        _add_dataclass_flags(p, TrackerConfig, defaults, skip=("hyper",))
        _add_dataclass_flags(p, HyperParams, defaults.hyper)

    p = sub.add_parser("track", help="track a template through a frame sequence")
    p.add_argument("--template", required=True)
    p.add_argument("--sequence", required=True, help="directory of .pgm/.png frames, read in name order; template.* is skipped")
    p.add_argument("--out", required=True)
    tracker_flags(p)
    p.set_defaults(func=cmd_track)

    p = sub.add_parser("synth", help="render a synthetic sequence with ground truth")
    p.add_argument("--template", help="template image; a random texture is generated when omitted")
    p.add_argument("--out", required=True)
    p.add_argument("--config", help="JSON config file; flags override its values")
    p.add_argument("--preset", choices=("default", "easy", "stress"), default=None)
    _add_dataclass_flags(p, SynthSpec, SynthSpec())
    p.set_defaults(func=cmd_synth)

    p = sub.add_parser("eval", help="score tracking results against ground truth")
    p.add_argument("--results", required=True)
    p.add_argument("--ground-truth", required=True)
    p.add_argument("--template", help="template image, used for its bounds")
    p.add_argument("--bounds", type=float, nargs=4, metavar=("X0", "Y0", "X1", "Y1"))
    p.add_argument("--out", help="per-frame metrics CSV")
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("ablate", help="compare SSVM, SML, SMT and SMM on one sequence")
    p.add_argument("--template", required=True)
    p.add_argument("--sequence", required=True)
    p.add_argument("--ground-truth", help="defaults to <sequence>/groundtruth.txt")
    p.add_argument("--out", required=True)
    tracker_flags(p)
    p.set_defaults(func=cmd_ablate)
    return parser


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(name)s: %(message)s")
    try:
        return args.func(args)
    except ConfigError as exc:
        print(f"keytrack: config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except (OSError, ImageFormatError, evaluation.ResultFormatError) as exc:
        print(f"keytrack: I/O error: {exc}", file=sys.stderr)
        return EXIT_IO
    except (InitializationError, GenerationError, ValueError, RuntimeError) as exc:
        print(f"keytrack: runtime error: {exc}", file=sys.stderr)
        return EXIT_RUNTIME


if __name__ == "__main__":
    sys.exit(main())
