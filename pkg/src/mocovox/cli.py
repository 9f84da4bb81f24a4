"""Command-line entry point: synth, train, eval, plot-scores, sweep-queue.

Exit codes: 0 ok, 2 configuration/format error, 3 I/O error, 4 numeric divergence.
"""

from __future__ import annotations

import argparse
import logging
import sys
from dataclasses import replace
from pathlib import Path

from . import evaluation as ev
from . import synthdata as sd
from . import trainer as tr
from .errors import ConfigError, DataIOError, MocoVoxError

log = logging.getLogger("mocovox")


def _style(args) -> sd.CorpusStyle:
    snr = None
    if args.noise_snr.lower() != "none":
        try:
            lo, hi = (float(x) for x in args.noise_snr.split(","))
        except ValueError:
            raise ConfigError(f"--noise-snr expects 'lo,hi' or 'none', got {args.noise_snr!r}") from None
        snr = (lo, hi)
    return sd.CorpusStyle(args.vowel_spread, args.channel_db, snr)


def cmd_synth(args) -> int:
    out = Path(args.out)
    manifest = sd.build_corpus(args.speakers, args.utts, out, args.seed, duration=args.duration,
                               style=_style(args))
    trials = sd.build_trials(manifest.split("test"), args.trials, args.seed)
    sd.write_trials(out / sd.TRIALS_NAME, trials)
    print(out / sd.MANIFEST_NAME)
    return 0


def _load_cfg(args) -> tr.TrainConfig:
    cfg = tr.load_config(args.config) if args.config else tr.TrainConfig()
    if args.seed is not None:
        cfg = replace(cfg, seed=args.seed)
    if getattr(args, "max_steps", None) is not None:
        cfg = replace(cfg, max_steps=args.max_steps)
    return cfg


def _progress(step, total, met):
    if step % 50 == 0 or step == total:
        log.info("step %d/%d loss=%.4f pos_logit=%.3f queue=%d", step, total, met.loss,
                 met.pos_logit_mean, met.queue_filled)


def cmd_train(args) -> int:
    cfg = _load_cfg(args)
    manifest = sd.Manifest.read(args.data)
    result = tr.train(cfg, manifest, args.out, progress=_progress)
    print(result.checkpoint_path)
    return 0


def _trials_path(args) -> Path:
    return Path(args.trials) if args.trials else Path(args.data) / sd.TRIALS_NAME


def cmd_eval(args) -> int:
    ckpt = tr.load_checkpoint(args.checkpoint)
    manifest = sd.Manifest.read(args.data)
    trials = sd.read_trials(_trials_path(args))
    seed = ev.EVAL_SEED if args.seed is None else args.seed
    result, _ = ev.evaluate(ckpt.theta_q, manifest, trials, ckpt.cfg.features, out_dir=args.out,
                            n_seg=args.segments, seed=seed)
    print(result.summary())
    if args.out:
        _write_text(Path(args.out) / "eer.txt", result.summary() + "\n")
    return 0


def cmd_plot_scores(args) -> int:
    records = ev.read_scores(args.scores)
    if not records:
        raise ConfigError(f"{args.scores} contains no scores")
    ev.write_histogram(args.out, ev.score_histogram(records, args.bins))
    return 0


def _parse_sizes(text: str):
    try:
        sizes = [int(s) for s in text.split(",") if s.strip()]
    except ValueError:
        raise ConfigError(f"--sizes expects comma-separated integers, got {text!r}") from None
    if not sizes or any(s < 1 for s in sizes):
        raise ConfigError(f"--sizes must list positive queue sizes, got {text!r}")
    return sizes


def cmd_sweep_queue(args) -> int:
    cfg = _load_cfg(args)
    sizes = _parse_sizes(args.sizes)
    bad = [s for s in sizes if s % cfg.batch_size]
    if bad:
        raise ConfigError(f"queue sizes {bad} are not multiples of batch size {cfg.batch_size}")
    manifest = sd.Manifest.read(args.data)
    trials = sd.read_trials(_trials_path(args))
    waves = tr.load_waves(manifest)
    out = Path(args.out)
    rows = ["queue_size,eer\n"]
    for size in sizes:
        run_cfg = replace(cfg, queue_size=size)
        result = tr.train(run_cfg, manifest, out / f"queue_{size}", waves=waves, progress=_progress)
        eer, _ = ev.evaluate(result.state.theta_q, manifest, trials, run_cfg.features,
                             out_dir=out / f"queue_{size}", waves=waves)
        log.info("queue_size=%d %s", size, eer.summary())
        rows.append(f"{size},{eer.eer!r}\n")
    _write_text(out / "sweep.csv", "".join(rows))
    print(out / "sweep.csv")
    return 0


def _write_text(path: Path, text: str) -> None:
    try:
        path.parent.mkdir(parents=True, exist_ok=True)
        path.write_text(text, encoding="utf-8")
    except OSError as exc:
        raise DataIOError(f"cannot write {path}: {exc}") from exc


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="mocovox", description=__doc__.splitlines()[0])
    p.add_argument("-v", "--verbose", action="store_true", help="log training progress")
    sub = p.add_subparsers(dest="command", required=True)

    s = sub.add_parser("synth", help="generate a synthetic speaker corpus and trial list")
    s.add_argument("--speakers", type=int, required=True)
    s.add_argument("--utts", type=int, required=True)
    s.add_argument("--out", required=True)
    s.add_argument("--seed", type=int, default=0)
    s.add_argument("--trials", type=int, default=500)
    s.add_argument("--duration", type=float, default=sd.DEFAULT_DURATION)
    style = sd.CorpusStyle()
    s.add_argument("--vowel-spread", type=float, default=style.vowel_spread)
    s.add_argument("--channel-db", type=float, default=style.channel_db)
    s.add_argument("--noise-snr", default=",".join(map(str, style.noise_snr_db)),
                   help="per-utterance background noise SNR range 'lo,hi' in dB, or 'none'")
    s.set_defaults(func=cmd_synth)

    t = sub.add_parser("train", help="train query/key encoders")
    t.add_argument("--config")
    t.add_argument("--data", required=True)
    t.add_argument("--out", required=True)
    t.add_argument("--seed", type=int)
    t.add_argument("--max-steps", type=int)
    t.set_defaults(func=cmd_train)

    e = sub.add_parser("eval", help="score verification trials and report the EER")
    e.add_argument("--checkpoint", required=True)
    e.add_argument("--data", required=True)
    e.add_argument("--trials")
    e.add_argument("--out")
    e.add_argument("--seed", type=int)
    e.add_argument("--segments", type=int, default=ev.N_SEGMENTS)
    e.set_defaults(func=cmd_eval)

    h = sub.add_parser("plot-scores", help="export a positive/negative score histogram as CSV")
    h.add_argument("--scores", required=True)
    h.add_argument("--out", required=True)
    h.add_argument("--bins", type=int, default=50)
    h.add_argument("--seed", type=int, help="accepted for interface uniformity; unused")
    h.set_defaults(func=cmd_plot_scores)

    q = sub.add_parser("sweep-queue", help="train and evaluate one model per queue size")
    q.add_argument("--config")
    q.add_argument("--data", required=True)
    q.add_argument("--sizes", required=True)
    q.add_argument("--out", required=True)
    q.add_argument("--trials")
    q.add_argument("--seed", type=int)
    q.add_argument("--max-steps", type=int)
    q.set_defaults(func=cmd_sweep_queue)
    return p


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(message)s")
    try:
        return args.func(args)
    except MocoVoxError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return exc.exit_code


if __name__ == "__main__":
    sys.exit(main())
