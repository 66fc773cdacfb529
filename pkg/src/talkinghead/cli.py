"""Command-line entry point: ``talkinghead <subcommand> [options]``."""

from __future__ import annotations

import argparse
import logging
import sys
from pathlib import Path

from . import pipeline
from .numerics import TrainingDivergence

log = logging.getLogger("talkinghead")


def _common(p: argparse.ArgumentParser) -> None:
    p.add_argument("--config", help="key = value config file with [section] headers")
    p.add_argument("--set", action="append", default=[], metavar="SECTION.KEY=VALUE",
                   help="override a config value (repeatable; wins over --config)")
    p.add_argument("--seed", type=int, help="global seed (same as --set run.seed=N)")
    p.add_argument("-v", "--verbose", action="store_true")


def build_parser() -> argparse.ArgumentParser:
    ap = argparse.ArgumentParser(prog="talkinghead", description=__doc__)
    sub = ap.add_subparsers(dest="command", required=True)
    for name, helptext in (("gen-data", "write the seeded synthetic dataset"),
                           ("train-proxies", "train the sync and emotion-classifier proxies"),
                           ("train-a2m", "train the audio-to-landmark VAE"),
                           ("train-ldm", "train the landmark deformation model"),
                           ("train-nerf", "train the head and torso radiance fields"),
                           ("train-all", "run every training stage in order")):
        _common(sub.add_parser(name, help=helptext))

    p = sub.add_parser("infer", help="render frames for an audio file")
    _common(p)
    p.add_argument("--audio", required=True)
    p.add_argument("--emotion", required=True)
    p.add_argument("--out")
    p.add_argument("--poses", help="source pose trace (POS1); default: seeded synthetic trace")
    p.add_argument("--reference", help="dataset clip to score against")
    p.add_argument("--no-ldm", action="store_true", help="drive rendering with neutral landmarks")

    p = sub.add_parser("idle-sample", help="build an idle-state pose tensor")
    _common(p)
    p.add_argument("--poses", required=True)
    p.add_argument("--audio", required=True)
    p.add_argument("--gap", type=int, required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--len-min", type=int)
    p.add_argument("--len-max", type=int)

    p = sub.add_parser("eval", help="compare generated clips with references")
    _common(p)
    p.add_argument("generated")
    p.add_argument("reference")
    p.add_argument("--out", help="also write report.tsv and summary.txt here")
    return ap


def _config(args) -> pipeline.PipelineConfig:
    overrides = list(args.set)
    if args.seed is not None:
        overrides.append(f"run.seed={args.seed}")
    return pipeline.load_config(args.config, overrides)


def run(args) -> int:
    cfg = _config(args)
    cmd = args.command
    if cmd == "gen-data":
        names = pipeline.run_gen_data(cfg)
        print(f"wrote {len(names)} clips to {cfg.dataset_dir}")
    elif cmd == "train-proxies":
        pipeline.run_train_proxies(cfg)
    elif cmd == "train-a2m":
        pipeline.run_train_a2m(cfg)
    elif cmd == "train-ldm":
        pipeline.run_train_ldm(cfg)
    elif cmd == "train-nerf":
        pipeline.run_train_nerf(cfg)
    elif cmd == "train-all":
        pipeline.run_train_all(cfg)
    elif cmd == "infer":
        res = pipeline.run_infer(cfg, args.audio, args.emotion, args.out, args.no_ldm,
                                 args.poses, args.reference)
        print(f"wrote {len(res.frames)} frames to {res.out_dir / 'frames'}")
        if res.report is not None:
            sys.stdout.write(res.report.to_keyvalue())
    elif cmd == "idle-sample":
        seed = cfg.run.seed
        out = pipeline.run_idle_sample(args.poses, args.audio, args.out, args.gap, seed,
                                       args.len_min, args.len_max, cfg)
        print(f"wrote {out.frames} poses to {args.out}")
    elif cmd == "eval":
        _, tsv, summary = pipeline.run_eval(cfg, args.generated, args.reference)
        sys.stdout.write(tsv)
        sys.stdout.write(summary)
        if args.out:
            d = Path(args.out)
            d.mkdir(parents=True, exist_ok=True)
            (d / "report.tsv").write_text(tsv)
            (d / "summary.txt").write_text(summary)
    return pipeline.EXIT_OK


def main(argv: list[str] | None = None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.DEBUG if args.verbose else logging.INFO,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        return run(args)
    except pipeline.ConfigError as exc:
        log.error("config error: %s", exc)
        return pipeline.EXIT_CONFIG
    except TrainingDivergence as exc:
        log.error("training diverged: %s", exc)
        return pipeline.EXIT_DIVERGENCE
    except (pipeline.DataError, FileNotFoundError, ValueError) as exc:
        log.error("data error: %s", exc)
        return pipeline.EXIT_DATA


if __name__ == "__main__":
    sys.exit(main())
