import sys
import csv
import json
import logging
import argparse
from pathlib import Path
from typing import List, Optional

import torch
from dotenv import load_dotenv

from checkpoint import load_model, save_checkpoint
from config import PRESETS, CliConfig, load_config, preset_config, worker_threads
from denoiser import sample
from errors import ArgumentError, RhythmError
from gradcheck import SUITES, run_suites
from motion_model import load_motion, save_motion, synth_periodic_motion, synth_white_noise
from periodicity import analysis_report, analyze_motion, autocorrelation_fft, autocorrelation_naive, \
    detect_period, mean_signal
from ps_mamba import benchmark_forward
from training import rhythm_recovery, toy_dataset, train_toy, write_loss_curve

logger = logging.getLogger("cli")

EXIT_OK = 0
EXIT_CHECK_FAILED = 1
EXIT_BAD_INPUT = 2


# ---------------------------
# Helpers: files and config
# ---------------------------

def _ensure_parent(path: Path) -> Path:
    path.parent.mkdir(parents=True, exist_ok=True)
    return path


def _write_json(path: Path, data: dict):
    with _ensure_parent(path).open("w", encoding="utf-8") as f:
        json.dump(data, f, ensure_ascii=False, indent=2)


def _write_rows(path: Optional[Path], header: List[str], rows) -> None:
    """csv to a file, or to stdout when no path is given."""
    if path is None:
        writer = csv.writer(sys.stdout, lineterminator="\n")
        writer.writerow(header)
        writer.writerows(rows)
        return
    with _ensure_parent(path).open("w", encoding="utf-8", newline="") as f:
        writer = csv.writer(f)
        writer.writerow(header)
        writer.writerows(rows)


def _load_cli_config(args) -> CliConfig:
    cfg = preset_config(args.preset)
    if args.config:
        cfg = load_config(args.config, base=cfg)
    if args.seed is not None:
        cfg.seed = args.seed
    return cfg


def _parse_lengths(text: str) -> List[int]:
    try:
        lengths = [int(v) for v in text.split(",") if v.strip()]
    except ValueError:
        raise ArgumentError(f"--lengths must be comma-separated integers, got {text!r}")
    if not lengths or min(lengths) < 2:
        raise ArgumentError("--lengths needs at least one length >= 2")
    return lengths


# ---------------------------
# Subcommands
# ---------------------------

def cmd_analyze(args, cfg: CliConfig) -> int:
    seq = load_motion(args.input)
    kf, track = analyze_motion(seq, cfg.saliency, cfg.periodicity, args.segments)
    whole = detect_period(seq, cfg.periodicity)
    report = analysis_report(kf, track, whole)
    _write_json(Path(args.out), report)
    if args.phase_csv:
        rows = [[i, repr(float(p)), repr(float(s)), repr(float(c))]
                for i, (p, (s, c)) in enumerate(zip(track.phi, track.Phi))]
        _write_rows(Path(args.phase_csv), ["frame", "phi", "sin", "cos"], rows)
    periodic = sum(r.periodic for r in track.reports)
    logger.info("%s: %d keyframes, %d/%d phase segments periodic, sequence T=%d (%s)",
                seq.name, len(kf.keyframes), periodic, len(track.reports), whole.T,
                "periodic" if whole.periodic else "non-periodic")
    return EXIT_OK


def cmd_synth(args, cfg: CliConfig) -> int:
    seed = cfg.seed
    if args.white_noise:
        seq = synth_white_noise(args.length, args.dims, args.amp, seed, fps=args.fps)
    else:
        seq = synth_periodic_motion(args.length, args.dims, args.period, args.amp, args.noise, seed,
                                    phase_spread=args.phase_spread, fps=args.fps)
    save_motion(seq, args.out)
    logger.info("wrote %s (%dx%d)", args.out, seq.length, seq.dims)
    return EXIT_OK


def cmd_train(args, cfg: CliConfig) -> int:
    if args.steps is not None:
        cfg.train.train_steps = args.steps
    cfg.train.__post_init__()
    dataset = toy_dataset(args.dataset_size, args.length, cfg.model.d_motion, seed=cfg.seed)
    result = train_toy(dataset, cfg, seed=cfg.seed)
    save_checkpoint(result.checkpoint, args.out)
    if args.loss_csv:
        write_loss_curve(result.losses, _ensure_parent(Path(args.loss_csv)))
    logger.info("trained %d steps, final loss %.5f", len(result.losses), result.losses[-1])
    return EXIT_OK


def cmd_sample(args, cfg: CliConfig) -> int:
    model, ckpt_cfg = load_model(args.checkpoint)
    diffusion = ckpt_cfg.diffusion
    if args.sample_steps is not None:
        diffusion.sample_steps = args.sample_steps
    if args.guidance is not None:
        diffusion.guidance_scale = args.guidance
    diffusion.__post_init__()
    seqs = sample(args.text_class, args.length, diffusion, model, seed=cfg.seed, num_samples=args.num,
                  saliency_cfg=ckpt_cfg.saliency, periodicity_cfg=ckpt_cfg.periodicity)
    out = Path(args.out)
    _ensure_parent(out)
    if len(seqs) == 1:
        save_motion(seqs[0], out)
    else:
        for i, seq in enumerate(seqs):
            save_motion(seq, out.with_name(f"{out.stem}_{i:03d}{out.suffix}"))
    logger.info("wrote %d sample(s) for class %s", len(seqs), args.text_class)
    return EXIT_OK


def cmd_evaluate(args, cfg: CliConfig) -> int:
    model, ckpt_cfg = load_model(args.checkpoint)
    if args.sample_steps is not None:
        ckpt_cfg.diffusion.sample_steps = args.sample_steps
    ckpt_cfg.diffusion.__post_init__()
    result = rhythm_recovery(model, ckpt_cfg, num_samples=args.num, L=args.length, seed=cfg.seed,
                             tolerance=args.tolerance)
    _write_rows(Path(args.out) if args.out else None, ["class", "period", "hit_rate", "median_detected"],
                result.rows())
    logger.info("rhythm recovery %s (medians %s)", "passed" if result.passed else "FAILED",
                "disjoint" if result.medians_disjoint else "overlapping")
    return EXIT_OK if result.passed else EXIT_CHECK_FAILED


def cmd_gradcheck(args, cfg: CliConfig) -> int:
    reports = run_suites(args.module, seed=cfg.seed)
    for r in reports:
        print(f"{r.module},{r.max_error:.3e},{'ok' if r.passed else 'FAILED'}")
    return EXIT_OK if all(r.passed for r in reports) else EXIT_CHECK_FAILED


def cmd_bench(args, cfg: CliConfig) -> int:
    rows = benchmark_forward(_parse_lengths(args.lengths), d_model=args.dims, d_inner=2 * args.dims,
                             d_state=cfg.model.d_state, repeats=args.repeats, seed=cfg.seed)
    _write_rows(None, ["L", "median_seconds"], [[L, f"{t:.6f}"] for L, t in rows])
    return EXIT_OK


def cmd_acf(args, cfg: CliConfig) -> int:
    seq = load_motion(args.input)
    x = mean_signal(seq.frames)
    acf = autocorrelation_naive(x) if args.naive else autocorrelation_fft(x)
    if acf.zero_power:
        logger.warning("%s has zero power; ACF is all zeros", seq.name)
    _write_rows(Path(args.out) if args.out else None, ["lag", "r"],
                [[tau, repr(float(r))] for tau, r in enumerate(acf.r)])
    return EXIT_OK


# ---------------------------
# Main
# ---------------------------

def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="cli.py", description="Periodicity-saliency motion toolkit")
    parser.add_argument("--preset", choices=list(PRESETS), default="default",
                        help="base settings that --config and flags override")
    parser.add_argument("--config", help="JSON config file over the preset; flags override it")
    parser.add_argument("--seed", type=int, default=None)
    parser.add_argument("--verbose", "-v", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("analyze", help="keyframe + periodicity report for a motion file")
    p.add_argument("input")
    p.add_argument("--segments", type=int, default=None)
    p.add_argument("--out", default="report.json")
    p.add_argument("--phase-csv", default=None)
    p.set_defaults(func=cmd_analyze)

    p = sub.add_parser("synth", help="write a synthetic motion file")
    p.add_argument("out")
    p.add_argument("--length", type=int, default=128)
    p.add_argument("--dims", type=int, default=1)
    p.add_argument("--period", type=float, default=16)
    p.add_argument("--amp", type=float, default=1.0)
    p.add_argument("--noise", type=float, default=0.0)
    p.add_argument("--phase-spread", type=float, default=1.0)
    p.add_argument("--fps", type=float, default=20.0)
    p.add_argument("--white-noise", action="store_true")
    p.set_defaults(func=cmd_synth)

    p = sub.add_parser("train", help="train the toy denoiser")
    p.add_argument("--out", default="checkpoints/toy")
    p.add_argument("--steps", type=int, default=None)
    p.add_argument("--dataset-size", type=int, default=256)
    p.add_argument("--length", type=int, default=64)
    p.add_argument("--loss-csv", default=None)
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("sample", help="sample motions from a checkpoint")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--class", dest="text_class", type=int, default=0)
    p.add_argument("--length", type=int, default=64)
    p.add_argument("--num", type=int, default=1)
    p.add_argument("--sample-steps", type=int, default=None)
    p.add_argument("--guidance", type=float, default=None)
    p.add_argument("--out", default="sample.csv")
    p.set_defaults(func=cmd_sample)

    p = sub.add_parser("evaluate", help="rhythm recovery of a toy checkpoint: detected period per sampled class")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--num", type=int, default=50)
    p.add_argument("--length", type=int, default=64)
    p.add_argument("--sample-steps", type=int, default=None)
    p.add_argument("--tolerance", type=int, default=2)
    p.add_argument("--out", default=None)
    p.set_defaults(func=cmd_evaluate)

    p = sub.add_parser("gradcheck", help="finite-difference gradient suites")
    p.add_argument("--module", choices=["all"] + list(SUITES), default="all")
    p.set_defaults(func=cmd_gradcheck)

    p = sub.add_parser("bench", help="PS-Mamba forward wall time per length")
    p.add_argument("--lengths", default="128,256,512,1024")
    p.add_argument("--dims", type=int, default=64)
    p.add_argument("--repeats", type=int, default=10)
    p.set_defaults(func=cmd_bench)

    p = sub.add_parser("acf", help="dump the autocorrelation of a motion file's mean signal")
    p.add_argument("input")
    mode = p.add_mutually_exclusive_group(required=True)
    mode.add_argument("--naive", action="store_true")
    mode.add_argument("--fft", action="store_true")
    p.add_argument("--out", default=None)
    p.set_defaults(func=cmd_acf)
    return parser


def main(argv: Optional[List[str]] = None) -> int:
    # Load environment variables (RHYTHM_SSM_THREADS) from .env if present
    load_dotenv()
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.DEBUG if args.verbose else logging.INFO,
                        format="%(levelname)s %(name)s: %(message)s", stream=sys.stderr)
    try:
        threads = worker_threads()
        if threads:
            torch.set_num_threads(threads)
        cfg = _load_cli_config(args)
        return args.func(args, cfg)
    except (RhythmError, OSError) as e:
        logger.error("%s", e)
        return EXIT_BAD_INPUT


if __name__ == "__main__":
    sys.exit(main())
