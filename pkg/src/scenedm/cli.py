"""Command line entry point: gen-data, train, sample, score, eval, ablate.

Exit codes: 0 success, 1 usage error, 2 validation error, 3 numeric failure.
Failures print one JSON object on stderr.
"""
from __future__ import annotations

import argparse
import json
import logging
import math
import sys
from dataclasses import replace
from pathlib import Path

from . import checkpoint as ckpt
from . import config as rc
from .data import FormatError, GenSpec, RolloutRecord, gen_data, read_rollouts, read_scenarios, write_plot_csv, write_rollouts, write_scenarios
from .pipeline import VARIANTS, evaluate_sets, run_variants, sample_scenes, table_csv
from .sampler import SamplerConfig
from .scoring import filter_rollouts, score_rollouts
from .scene import to_scene_frame
from .tensor import NonFiniteError, ShapeError
from .training import load_model, train

EXIT_OK, EXIT_USAGE, EXIT_VALIDATION, EXIT_NUMERIC = 0, 1, 2, 3


class UsageError(Exception):
    pass


class HashMismatch(ValueError):
    pass


class Parser(argparse.ArgumentParser):
    def error(self, message):
        raise UsageError(message)


def _common(p: argparse.ArgumentParser, out_help: str) -> None:
    p.add_argument("--seed", type=int, default=None, help="overrides the config seed")
    p.add_argument("--config", type=Path, default=None, help="run config JSON")
    p.add_argument("--out", type=Path, required=True, help=out_help)


def build_parser() -> Parser:
    ap = Parser(prog="scenedm", description="Consistent-diffusion scene generation toolkit")
    ap.add_argument("-v", "--verbose", action="store_true")
    sub = ap.add_subparsers(dest="command", parser_class=Parser)

    p = sub.add_parser("gen-data", help="write a synthetic scenario file")
    _common(p, "scenario JSONL to write")
    p.add_argument("--n-scenes", type=int, default=None)

    p = sub.add_parser("train", help="train a model on a scenario file")
    _common(p, "output directory for model.ckpt and loss.csv")
    p.add_argument("--data", type=Path, required=True)
    p.add_argument("--steps", type=int, default=None)

    p = sub.add_parser("sample", help="draw rollouts for every scene")
    _common(p, "rollout JSONL to write")
    p.add_argument("--checkpoint", type=Path, required=True)
    p.add_argument("--data", type=Path, required=True)
    p.add_argument("--rollouts", "-M", type=int, default=None, dest="M")
    p.add_argument("--guidance", choices=("noise", "state", "off"), default=None)
    p.add_argument("--stride", type=int, default=None)
    p.add_argument("--plot-csv", type=Path, default=None)

    p = sub.add_parser("score", help="score rollouts and optionally keep the best")
    _common(p, "annotated rollout JSONL to write")
    p.add_argument("--rollouts", type=Path, required=True)
    p.add_argument("--data", type=Path, required=True)
    p.add_argument("--keep", type=int, default=None)
    p.add_argument("--oversample", type=float, default=None,
                   help="score only the first ceil(keep*F) rollouts of each scene before keeping the best")

    p = sub.add_parser("eval", help="compute the metric report")
    _common(p, "report JSON to write (a CSV row is written alongside)")
    p.add_argument("--rollouts", type=Path, required=True)
    p.add_argument("--data", type=Path, required=True)
    p.add_argument("--checkpoint", type=Path, default=None, help="verify the rollout checkpoint hash against this file")
    p.add_argument("--force", action="store_true", help="evaluate despite hash mismatches")

    p = sub.add_parser("ablate", help="run the ablation grid and write a table")
    _common(p, "table CSV to write")
    p.add_argument("--data", type=Path, required=True)
    p.add_argument("--eval-scenes", type=int, default=20, help="held out from the end of the data file")
    p.add_argument("--steps", type=int, default=None)
    p.add_argument("--oversample", type=float, default=3.0)
    return ap


def _config(args) -> rc.RunConfig:
    cfg = rc.load(args.config)
    if args.seed is not None:
        cfg = cfg.with_seed(args.seed)
    return cfg


def cmd_gen_data(args, cfg: rc.RunConfig) -> None:
    spec = cfg.data
    if args.n_scenes is not None:
        spec = GenSpec(**{**spec.to_dict(), "n_scenes": args.n_scenes})
    write_scenarios(args.out, gen_data(spec))


def cmd_train(args, cfg: rc.RunConfig) -> None:
    scenes = read_scenarios(args.data)
    tcfg = cfg.train if args.steps is None else replace(cfg.train, steps=args.steps)
    s = cfg.schedule
    train(scenes, cfg.denoiser, tcfg, out_dir=args.out, sched_kind=s.kind, beta_range=s.beta_range)
    rc.save(args.out / "config.json", cfg)


def cmd_sample(args, cfg: rc.RunConfig) -> None:
    scenes = read_scenarios(args.data)
    model, sched, norm, meta = load_model(args.checkpoint)
    scfg = cfg.sampler
    over = {k: v for k, v in (("M", args.M), ("guidance", args.guidance), ("stride", args.stride)) if v is not None}
    scfg = SamplerConfig(**{**vars(scfg), **over, "K": sched.K})
    rsets = sample_scenes(model, sched, norm, scenes, scfg)
    chash, khash = cfg.config_hash(), ckpt.file_hash(args.checkpoint)
    records = [RolloutRecord(rs, chash, khash, cfg.seed, sc.dt) for rs, sc in zip(rsets, scenes)]
    write_rollouts(args.out, records)
    if args.plot_csv is not None:
        write_plot_csv(args.plot_csv, records)


def _aligned(records: list[RolloutRecord], scenes) -> list:
    by_id = {sc.scene_id: sc for sc in scenes}
    out = []
    for r in records:
        sc = by_id.get(r.rollouts.scene_id)
        if sc is None:
            raise FormatError(f"rollouts reference unknown scene {r.rollouts.scene_id!r}")
        out.append(to_scene_frame(sc))
    return out


def cmd_score(args, cfg: rc.RunConfig) -> None:
    records = read_rollouts(args.rollouts)
    scenes = _aligned(records, read_scenarios(args.data))
    keep = args.keep if args.keep is not None else cfg.scoring.keep
    oversample = args.oversample
    for r, sc in zip(records, scenes):
        rs = r.rollouts
        if keep is not None and oversample is not None:
            pool = int(math.ceil(keep * oversample))
            if pool > rs.M:
                raise ValueError(f"scene {rs.scene_id}: need {pool} rollouts for keep={keep} x{oversample}, file has {rs.M}")
            rs = rs.subset(list(range(pool)))
        rs.scores = score_rollouts(rs, sc, cfg.scoring.counting)
        if keep is not None:
            rs = filter_rollouts(rs, keep)
        r.rollouts = rs
    write_rollouts(args.out, records)


def cmd_eval(args, cfg: rc.RunConfig) -> None:
    records = read_rollouts(args.rollouts)
    scenes = _aligned(records, read_scenarios(args.data))
    if not args.force:
        want_cfg = cfg.config_hash()
        want_ckpt = ckpt.file_hash(args.checkpoint) if args.checkpoint is not None else None
        for r in records:
            if r.config_hash != want_cfg:
                raise HashMismatch(f"scene {r.rollouts.scene_id}: config hash {r.config_hash} != {want_cfg}")
            if want_ckpt is not None and r.checkpoint_hash != want_ckpt:
                raise HashMismatch(f"scene {r.rollouts.scene_id}: checkpoint hash {r.checkpoint_hash} != {want_ckpt}")
    report = evaluate_sets([r.rollouts for r in records], scenes, cfg.metrics.alpha)
    args.out.write_text(report.to_json() + "\n")
    csv_path = args.out.with_suffix(".csv")
    csv_path.write_text(",".join(report.CSV_FIELDS) + "\n" + report.csv_row() + "\n")


def cmd_ablate(args, cfg: rc.RunConfig) -> None:
    scenes = read_scenarios(args.data)
    n_eval = args.eval_scenes
    if not 1 <= n_eval < len(scenes):
        raise ValueError(f"--eval-scenes must be in [1, {len(scenes) - 1}]")
    tcfg = cfg.train if args.steps is None else replace(cfg.train, steps=args.steps)
    rows = run_variants(
        VARIANTS, scenes[:-n_eval], scenes[-n_eval:], cfg.denoiser, tcfg, cfg.sampler,
        cfg.schedule.kind, cfg.schedule.beta_range, args.oversample, cfg.train.lam, cfg.metrics.alpha, cfg.scoring.counting,
        on_row=lambda r: logging.getLogger(__name__).info("%s", r.as_list()),
    )
    text = table_csv(rows)
    args.out.write_text(text)
    sys.stdout.write(text)


COMMANDS = {
    "gen-data": cmd_gen_data,
    "train": cmd_train,
    "sample": cmd_sample,
    "score": cmd_score,
    "eval": cmd_eval,
    "ablate": cmd_ablate,
}


def _fail(code: int, kind: str, command: str | None, detail: str) -> int:
    sys.stderr.write(json.dumps({"error": kind, "exit": code, "command": command, "detail": " ".join(str(detail).split())}) + "\n")
    return code


def main(argv: list[str] | None = None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except UsageError as e:
        return _fail(EXIT_USAGE, "usage", None, str(e))
    if args.command is None:
        return _fail(EXIT_USAGE, "usage", None, "a subcommand is required: " + ", ".join(COMMANDS))
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(message)s")
    try:
        cfg = _config(args)
        COMMANDS[args.command](args, cfg)
    except NonFiniteError as e:
        return _fail(EXIT_NUMERIC, "non_finite", args.command, str(e))
    except HashMismatch as e:
        return _fail(EXIT_VALIDATION, "hash_mismatch", args.command, str(e))
    except (rc.ConfigError, FormatError, ckpt.CheckpointError, ShapeError, ValueError, KeyError) as e:
        return _fail(EXIT_VALIDATION, "validation", args.command, str(e))
    except OSError as e:
        return _fail(EXIT_VALIDATION, "io", args.command, f"{e.strerror}: {e.filename}")
    return EXIT_OK


if __name__ == "__main__":
    sys.exit(main())
