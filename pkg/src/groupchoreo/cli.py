"""Command-line entry point: ``groupchoreo {synth-data,train,generate,evaluate,plot}``.

Exit codes: 0 success, 2 usage error, 3 file input/output error, 4 model error.
"""
from __future__ import annotations

import argparse
import csv
import logging
import os
import sys
from pathlib import Path

import numpy as np

from .errors import (
    CorruptCheckpoint,
    GroupChoreoError,
    IoFailure,
    MissingEncoder,
    NonFiniteLoss,
    TooManyDancers,
    UntrainedModel,
    VersionMismatch,
)

EXIT_OK, EXIT_USAGE, EXIT_IO, EXIT_MODEL = 0, 2, 3, 4
CONFIG_ENV = "GCD_CONFIG"
_MODEL_ERRORS = (CorruptCheckpoint, VersionMismatch, UntrainedModel, MissingEncoder, TooManyDancers, NonFiniteLoss)

log = logging.getLogger("groupchoreo")


def _positive_int(text: str) -> int:
    value = int(text)
    if value < 1:
        raise argparse.ArgumentTypeError(f"expected a positive integer, got {text}")
    return value


def _nonneg_int(text: str) -> int:
    value = int(text)
    if value < 0:
        raise argparse.ArgumentTypeError(f"expected a nonnegative integer, got {text}")
    return value


def _positive_float(text: str) -> float:
    value = float(text)
    if not value > 0:
        raise argparse.ArgumentTypeError(f"expected a positive number, got {text}")
    return value


def _seed(text: str) -> int:
    value = int(text)
    if not 0 <= value < 2**64:
        raise argparse.ArgumentTypeError("seed must be an unsigned 64-bit integer")
    return value


# ---------------------------------------------------------------------------
# subcommands


def cmd_synth_data(args) -> int:
    from .synth import SynthDatasetSpec, build_dataset

    spec = SynthDatasetSpec(
        n_sequences=args.n,
        n_dancers_range=(args.min_dancers, args.max_dancers),
        bpm_range=(args.min_bpm, args.max_bpm),
        duration_s=args.duration,
        consistency_range=(args.min_consistency, args.max_consistency),
        seed=args.seed,
    )
    manifest = build_dataset(spec, args.out, binary_motion=not args.json_motion)
    print(f"wrote {len(manifest)} pairs to {args.out}")
    return EXIT_OK


def cmd_train(args) -> int:
    from .training import TrainConfig, load_train_config, train, train_config_from

    overrides = {}
    for key in ("iterations", "learning_rate", "batch_size", "lr_schedule", "seed", "model", "checkpoint_every"):
        value = getattr(args, key)
        if value is not None:
            overrides[key] = str(value)
    if args.crop_frames is not None:
        overrides["T"] = str(args.crop_frames)
    if args.diffusion_steps is not None:
        overrides["M"] = str(args.diffusion_steps)
    for flag, key in (("no_geo", "use_geo"), ("no_nce", "use_nce"), ("no_group_attention", "use_group_attention")):
        if getattr(args, flag):
            overrides[key] = "false"
    config_path = args.config or os.environ.get(CONFIG_ENV)
    try:
        cfg = load_train_config(config_path, overrides) if config_path else train_config_from(overrides, TrainConfig())
    except ValueError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    ckpt, history = train(args.data, cfg, args.out, resume=args.resume)
    last = history[-1] if history else None
    summary = f"final total={last['total']:.4f}" if last else "no iterations run"
    print(f"checkpoint {ckpt}; {summary}")
    return EXIT_OK


def _load_checkpoint(path):
    from .training import load_model

    if not Path(path).exists():
        raise IoFailure(f"checkpoint {path} does not exist")
    model, _, meta = load_model(path, return_state=True)
    return model, meta


def cmd_generate(args) -> int:
    from .longform import generate_long
    from .motion import save_motion
    from .sampling import sample_batch
    from .synth import generate_music_track, load_audio

    if args.music is None and args.synthetic_bpm is None:
        print("error: give --music or --synthetic-bpm", file=sys.stderr)
        return EXIT_USAGE
    model, meta = _load_checkpoint(args.checkpoint)
    if args.music is not None:
        audio = load_audio(args.music)
        if args.duration is not None:
            audio = audio.crop(0, int(round(args.duration * audio.fps)))
    else:
        audio = generate_music_track(args.synthetic_bpm, args.duration or 5.0, seed=args.seed % 2**32)
    window = args.window or int(meta.get("train_config", {}).get("T", 150))
    window += window % 2
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    suffix = ".json" if args.json else ".gcdm"
    for i in range(args.samples):
        seed = args.seed + i
        if audio.n_frames > window:
            group = generate_long(model, audio, args.dancers, window, args.sampler, args.ddim_steps, args.gamma, seed)
        else:
            group = sample_batch(model, audio, args.dancers, audio.n_frames, args.sampler, args.ddim_steps,
                                 args.gamma, seeds=[seed])[0]
        path = save_motion(group, out / f"sample_{i:03d}{suffix}")
        print(f"wrote {path} ({group.n_dancers} dancers, {group.n_frames} frames)")
    return EXIT_OK


def _motion_files(directory) -> list[Path]:
    d = Path(directory)
    if not d.is_dir():
        raise IoFailure(f"{d} is not a directory")
    files = sorted(p for p in d.iterdir() if p.suffix in (".gcdm", ".json") and p.name not in ("manifest.json", "dataset_spec.json") and not p.name.startswith("audio_"))
    if not files:
        raise IoFailure(f"no motion containers in {d}")
    return files


def _read_motion(path):
    from .motion import load_motion

    try:
        return load_motion(path)
    except (GroupChoreoError, ValueError, KeyError) as exc:
        if isinstance(exc, IoFailure):
            raise
        raise IoFailure(f"cannot read motion {path}: {exc}") from exc


def _audio_files(path, n: int) -> list[Path]:
    p = Path(path)
    if p.is_file():
        return [p] * n
    if p.is_dir():
        files = sorted(p.glob("audio_*.json")) or sorted(p.glob("*.json"))
        if len(files) < n:
            raise IoFailure(f"{p} holds {len(files)} audio files for {n} motions")
        return files[:n]
    raise IoFailure(f"audio path {p} does not exist")


def cmd_evaluate(args) -> int:
    from .metrics import evaluate
    from .synth import extract_music_beats, load_audio

    generated = [_read_motion(p) for p in _motion_files(args.generated)]
    reference = [_read_motion(p) for p in _motion_files(args.reference)]
    beats = None
    if args.audio is not None:
        beats = [extract_music_beats(load_audio(p)) for p in _audio_files(args.audio, len(generated))]
    report = evaluate(generated, reference, beats, window_frames=args.window)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    try:
        report.write(out / "report.json", out / "motion_change.csv")
    except OSError as exc:
        raise IoFailure(str(exc)) from exc
    print(report.summary_line())
    return EXIT_OK


def cmd_plot(args) -> int:
    from .metrics import kinetic_velocity, motion_change_curve
    from .motion import default_skeleton, forward_kinematics
    from .synth import extract_music_beats, load_audio

    group = _read_motion(args.motion)
    audio = load_audio(args.audio)
    skel = default_skeleton()
    vel = np.stack([kinetic_velocity(forward_kinematics(d.data, skel), group.fps) for d in group.dancers])
    beats = extract_music_beats(audio)
    curve = motion_change_curve(group, args.window, skel) if group.n_frames > args.window else np.zeros(0)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    beat_set = set(beats)
    try:
        with open(out / "kinetic_velocity.csv", "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(["frame", "time_s", "is_beat", *[f"dancer_{i}" for i in range(group.n_dancers)]])
            for t in range(group.n_frames):
                w.writerow([t, t / group.fps, int(t in beat_set), *vel[:, t]])
        with open(out / "beats.csv", "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(["beat_frame", "time_s"])
            w.writerows((b, b / audio.fps) for b in beats)
        with open(out / "motion_change.csv", "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(["frame", "motion_change"])
            w.writerows(enumerate(curve))
        if not args.no_images:
            _write_figures(out, vel, beats, curve, group.fps)
    except OSError as exc:
        raise IoFailure(str(exc)) from exc
    print(f"wrote plots for {group.n_dancers} dancers to {out}")
    return EXIT_OK


def _write_figures(out: Path, vel, beats, curve, fps: float) -> None:
    import matplotlib

    matplotlib.use("Agg")
    import matplotlib.pyplot as plt

    t = np.arange(vel.shape[1]) / fps
    fig, ax = plt.subplots(figsize=(10, 3))
    for i, v in enumerate(vel):
        ax.plot(t, v, label=f"dancer {i}")
    for b in beats:
        ax.axvline(b / fps, color="gray", linestyle="--", linewidth=0.6)
    ax.set_xlabel("time (s)")
    ax.set_ylabel("kinetic velocity (m/s)")
    ax.legend(loc="upper right", fontsize="small")
    fig.tight_layout()
    fig.savefig(out / "kinetic_velocity.png", dpi=100)
    plt.close(fig)

    fig, ax = plt.subplots(figsize=(10, 3))
    ax.plot(np.arange(len(curve)) / fps, curve)
    ax.set_xlabel("time (s)")
    ax.set_ylabel("motion change")
    fig.tight_layout()
    fig.savefig(out / "motion_change.png", dpi=100)
    plt.close(fig)


# ---------------------------------------------------------------------------
# parser


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="groupchoreo",
        description="Music-driven group choreography with contrastive diffusion. "
        f"Exit codes: 0 ok, 2 usage, 3 io, 4 model. ${CONFIG_ENV} names a default training config file.",
        formatter_class=argparse.RawDescriptionHelpFormatter,
    )
    parser.add_argument("-v", "--verbose", action="store_true", help="log progress to stderr (switch)")
    sub = parser.add_subparsers(dest="command", required=True, metavar="COMMAND")

    p = sub.add_parser("synth-data", help="write a synthetic paired music/dance dataset")
    p.add_argument("--out", required=True, help="output directory (path)")
    p.add_argument("--n", type=_nonneg_int, default=500, help="number of music/dance pairs (count, default 500)")
    p.add_argument("--seed", type=_seed, default=0, help="random seed (unsigned 64-bit integer, default 0)")
    p.add_argument("--duration", type=_positive_float, default=5.0, help="length of each pair (seconds, default 5)")
    p.add_argument("--min-dancers", type=_positive_int, default=2, help="fewest dancers per group (count, default 2)")
    p.add_argument("--max-dancers", type=_positive_int, default=4, help="most dancers per group (count, default 4)")
    p.add_argument("--min-bpm", type=_positive_float, default=90.0, help="slowest tempo (beats per minute, default 90)")
    p.add_argument("--max-bpm", type=_positive_float, default=150.0, help="fastest tempo (beats per minute, default 150)")
    p.add_argument("--min-consistency", type=float, default=0.7, help="lowest shared-move weight (fraction in [0, 1], default 0.7)")
    p.add_argument("--max-consistency", type=float, default=1.0, help="highest shared-move weight (fraction in [0, 1], default 1.0)")
    p.add_argument("--json-motion", action="store_true", help="write motion as JSON instead of the binary container (switch)")
    p.set_defaults(func=cmd_synth_data)

    p = sub.add_parser("train", help="train the denoiser and contrastive encoder")
    p.add_argument("--data", required=True, help="dataset manifest.json (path)")
    p.add_argument("--out", required=True, help="output directory for checkpoint and loss history (path)")
    p.add_argument("--config", help=f"key = value config file (path; default ${CONFIG_ENV}); flags override it")
    p.add_argument("--iterations", type=_nonneg_int, help="optimizer steps (count, default 2000)")
    p.add_argument("--learning-rate", type=_positive_float, help="Adam step size (unitless, default 5e-4)")
    p.add_argument("--batch-size", type=_positive_int, help="groups per batch (count, default 8)")
    p.add_argument("--lr-schedule", choices=("constant", "cosine"),
                   help="step size over the run (constant or cosine decay to 0, default constant)")
    p.add_argument("--crop-frames", type=_positive_int, help="training crop length (frames at 30 fps, default 60)")
    p.add_argument("--diffusion-steps", type=_positive_int, help="noise steps M (count, default from model size)")
    p.add_argument("--model", choices=("toy", "full"), help="network size preset (toy or full, default toy)")
    p.add_argument("--checkpoint-every", type=_nonneg_int, help="iterations between checkpoints (count, default 500)")
    p.add_argument("--seed", type=_seed, help="random seed (unsigned 64-bit integer, default 0)")
    p.add_argument("--resume", help="checkpoint to continue from (path)")
    p.add_argument("--no-geo", action="store_true", help="zero the joint position, velocity and foot losses (switch)")
    p.add_argument("--no-nce", action="store_true", help="zero the contrastive loss (switch)")
    p.add_argument("--no-group-attention", action="store_true", help="drop the group attention blocks (switch)")
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("generate", help="sample group dances for a music track")
    p.add_argument("--checkpoint", required=True, help="trained checkpoint (path)")
    p.add_argument("--out", required=True, help="output directory for motion containers (path)")
    p.add_argument("--music", help="audio feature JSON (path)")
    p.add_argument("--synthetic-bpm", type=_positive_float, help="synthesize a track at this tempo instead (beats per minute)")
    p.add_argument("--duration", type=_positive_float, help="length to generate (seconds; default: whole track, or 5 for synthetic)")
    p.add_argument("--dancers", type=_positive_int, default=3, help="dancers in the group (count, default 3)")
    p.add_argument("--gamma", type=float, default=0.0, help="guidance weight, >0 favours consistency, <0 diversity (unitless, default 0)")
    p.add_argument("--sampler", choices=("ddim", "ddpm"), default="ddim", help="reverse sampler (ddim or ddpm, default ddim)")
    p.add_argument("--ddim-steps", type=_positive_int, default=50, help="DDIM sampling steps (count, default 50)")
    p.add_argument("--window", type=_positive_int, help="long-form window (frames; default: training crop length)")
    p.add_argument("--samples", type=_positive_int, default=1, help="samples to write, seeds seed..seed+samples-1 (count, default 1)")
    p.add_argument("--seed", type=_seed, default=0, help="random seed (unsigned 64-bit integer, default 0)")
    p.add_argument("--json", action="store_true", help="write JSON containers instead of binary (switch)")
    p.set_defaults(func=cmd_generate)

    p = sub.add_parser("evaluate", help="score generated groups against reference groups")
    p.add_argument("--generated", required=True, help="directory of generated motion containers (path)")
    p.add_argument("--reference", required=True, help="directory of reference motion containers (path)")
    p.add_argument("--audio", help="audio JSON file, or directory of audio_*.json matched in sorted order (path); omit to skip beat alignment")
    p.add_argument("--window", type=_positive_int, default=30, help="motion-change window (frames, default 30)")
    p.add_argument("--out", required=True, help="output directory for report.json and motion_change.csv (path)")
    p.set_defaults(func=cmd_evaluate)

    p = sub.add_parser("plot", help="write kinetic-velocity and motion-change curves")
    p.add_argument("--motion", required=True, help="motion container (path)")
    p.add_argument("--audio", required=True, help="audio feature JSON (path)")
    p.add_argument("--window", type=_positive_int, default=30, help="motion-change window (frames, default 30)")
    p.add_argument("--out", required=True, help="output directory for CSV and PNG files (path)")
    p.add_argument("--no-images", action="store_true", help="write CSV files only (switch)")
    p.set_defaults(func=cmd_plot)

    # the top-level help also spells out every subcommand's flags
    parser.epilog = "\n".join(
        f"--- {name} ---\n{sp.format_help()}" for name, sp in sub.choices.items()
    )
    return parser


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(levelname)s %(message)s")
    try:
        return args.func(args)
    except IoFailure as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_IO
    except _MODEL_ERRORS as exc:
        print(f"model error: {exc}", file=sys.stderr)
        return EXIT_MODEL
    except OSError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_IO
    except (GroupChoreoError, ValueError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_USAGE


if __name__ == "__main__":
    sys.exit(main())
