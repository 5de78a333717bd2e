"""``dttnet`` command line: train, separate, evaluate, inspect, mixgen.

Exit codes: 0 success, 2 config error, 3 data error, 4 numerical failure.
Logs go to stderr; machine-readable results go to files.
"""
from __future__ import annotations

import argparse
import json
import logging
import shutil
import sys
from pathlib import Path

import numpy as np
import torch

from . import checkpoint, manifest
from .config import ConfigError, RunConfig, dump_config, load_config
from .data import (
    DataError,
    PatternBank,
    PatternSampler,
    Placement,
    load_pattern_bank,
    load_trackset,
    overlay_patterns,
)
from .metrics import MetricError, SdrReport, score_track
from .model import IdentityModel, build, parameter_count, parameter_table, separate
from .spectral import AudioError, read_wav, write_wav
from .training import NumericalError, fit

log = logging.getLogger("dttnet")

EXIT_CONFIG, EXIT_DATA, EXIT_NUMERIC = 2, 3, 4


def _write_effective(cfg: RunConfig, directory: Path):
    directory.mkdir(parents=True, exist_ok=True)
    (directory / "effective-config.ini").write_text(dump_config(cfg))


def _ratio(text: str) -> tuple[int, ...]:
    try:
        return tuple(int(x) for x in text.split(","))
    except ValueError:
        raise ConfigError(f"bad pattern_ratio {text!r}") from None


def _load_bank(cfg: RunConfig, path) -> PatternBank:
    return load_pattern_bank(path, cfg.seed, _ratio(cfg.data.pattern_ratio), cfg.model.sample_rate)


def _patterns_for(bank: PatternBank, spec: str | None) -> list[str]:
    if not spec or spec == "all":
        return bank.names()
    names = [p.strip() for p in spec.split(",")]
    missing = [p for p in names if p not in bank.patterns]
    if missing:
        raise DataError(f"unknown patterns {missing}; bank has {bank.names()}")
    return names


# --- subcommands --------------------------------------------------------------


def cmd_inspect(args, cfg: RunConfig) -> int:
    model = build(cfg.model, cfg.seed)
    rows = parameter_table(model)
    width = max(len(n) for n, _, _ in rows)
    lines = [f"{'layer':<{width}}  {'shape':<22} {'params':>10}"]
    for name, shape, count in rows:
        lines.append(f"{name:<{width}}  {str(list(shape)):<22} {count:>10}")
    total = sum(c for _, _, c in rows)
    assert total == parameter_count(model)
    lines.append(f"{'total':<{width}}  {'':<22} {total:>10}")
    lines.append(f"total_millions={total / 1e6:.3f}")
    text = "\n".join(lines) + "\n"
    sys.stdout.write(text)
    if args.output:
        out = Path(args.output)
        out.parent.mkdir(parents=True, exist_ok=True)
        out.write_text(text)
        _write_effective(cfg, out.parent)
    return 0


def _load_model(spec: str, cfg: RunConfig):
    if spec == "identity":
        return IdentityModel(cfg.model)
    return checkpoint.load(spec).model


def cmd_separate(args, cfg: RunConfig) -> int:
    model = _load_model(args.model, cfg)
    mix = read_wav(args.input, model.cfg.sample_rate)
    est = separate(mix, model, overlap=args.overlap, chunk_seconds=cfg.train.chunk_seconds)
    out = Path(args.output)
    out.parent.mkdir(parents=True, exist_ok=True)
    write_wav(out, est)
    _write_effective(cfg, out.parent)
    log.info("wrote %s (%.2f s)", out, est.seconds)
    return 0


def cmd_evaluate(args, cfg: RunConfig) -> int:
    model = _load_model(args.model, cfg)
    mcfg = model.cfg
    tracks = load_trackset(args.data, args.split, mcfg.sample_rate)
    patterns, bank = [], None
    if args.patterns:
        bank = _load_bank(cfg, args.patterns)
        patterns = _patterns_for(bank, args.pattern)
    target = mcfg.source
    report = SdrReport()
    for t in tracks:
        if target not in t.stems:
            raise DataError(f"{t.name}: no {target!r} stem")
        mix = t.mixture
        if patterns:
            mix, _ = overlay_patterns(
                mix, bank, patterns, cfg.seed, t.name, args.pattern_split,
                zero_fraction=cfg.data.zero_fraction, gain=cfg.data.pattern_gain,
            )
        est = separate(mix, model, overlap=args.overlap, chunk_seconds=cfg.train.chunk_seconds)
        report.tracks.append(score_track(t.name, t.stems[target].samples, est.samples, mcfg.sample_rate))
        log.info("%s done", t.name)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    with open(out / "report.jsonl", "w") as fh:
        for rec in report.records():
            fh.write(json.dumps(rec, sort_keys=True) + "\n")
        fh.write(json.dumps({
            "aggregate": True,
            "usdr": report.usdr,
            "csdr": report.csdr,
            "csdr_track_median": report.csdr_track_median,
            "tracks": len(report.tracks),
            "patterns": patterns,
        }, sort_keys=True) + "\n")
    summary = report.summary()
    (out / "summary.txt").write_text(summary + "\n")
    sys.stderr.write(summary + "\n")
    _write_effective(cfg, out)
    return 0


def cmd_mixgen(args, cfg: RunConfig) -> int:
    data = Path(args.data)
    split_dir = data / args.split if (data / args.split).is_dir() else data
    tracks = load_trackset(data, args.split, cfg.model.sample_rate)
    bank = _load_bank(cfg, args.patterns)
    patterns = _patterns_for(bank, args.pattern)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    entries = {f"bank.{k}": v for k, v in bank.manifest().items()}
    entries.update({"seed": cfg.seed, "overlay.split": args.pattern_split, "overlay.patterns": patterns})
    for t in tracks:
        dst = out / t.name
        dst.mkdir(exist_ok=True)
        for f in sorted((split_dir / t.name).glob("*.wav")):
            if f.name != "mixture.wav":
                shutil.copyfile(f, dst / f.name)
        mix, placements = overlay_patterns(
            t.mixture, bank, patterns, cfg.seed, t.name, args.pattern_split,
            zero_fraction=cfg.data.zero_fraction, gain=cfg.data.pattern_gain,
        )
        if placements:
            write_wav(dst / "mixture.wav", mix)
        else:
            shutil.copyfile(split_dir / t.name / "mixture.wav", dst / "mixture.wav")
        entries[f"track.{t.name}.placements"] = len(placements)
        for i, p in enumerate(placements):
            entries[f"track.{t.name}.placement.{i}"] = p.as_list()
    manifest.write(out / "manifest.txt", entries)
    _write_effective(cfg, out)
    log.info("wrote %d tracks to %s", len(tracks), out)
    return 0


def read_mixgen_placements(path, track: str) -> list[Placement]:
    entries = manifest.read(path)
    count = int(entries.get(f"track.{track}.placements", 0))
    return [Placement.from_list(entries[f"track.{track}.placement.{i}"]) for i in range(count)]


def cmd_train(args, cfg: RunConfig) -> int:
    data = args.data or cfg.data.data_dir
    if not data:
        raise ConfigError("no dataset: pass --data or set data.data_dir")
    tcfg = cfg.train if args.mode is None else _with_mode(cfg, args.mode)
    train = load_trackset(data, cfg.data.train_split, cfg.model.sample_rate)
    valid = load_trackset(data, cfg.data.valid_split, cfg.model.sample_rate)
    sampler = None
    if tcfg.mode != "base":
        pdir = args.patterns or cfg.data.patterns_dir
        if not pdir:
            raise ConfigError(f"mode {tcfg.mode} needs --patterns")
        sampler = PatternSampler(_load_bank(cfg, pdir), tcfg.mode, cfg.data.vocal_chops)
    if args.init:
        model = checkpoint.load(args.init, cfg.model).model
    else:
        model = build(cfg.model, cfg.seed)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    final = RunConfig(cfg.seed, cfg.model, tcfg, cfg.data)
    _write_effective(final, out)
    torch.manual_seed(cfg.seed)
    with open(out / "train.log", "a") as fh:
        def on_epoch(line):
            fh.write(line + "\n")
            fh.flush()
        ck = fit(tcfg, model, train, valid, out, sampler, args.resume, on_epoch)
    if sampler is not None:
        manifest.write(out / "pattern-draws.txt", {
            "mode": tcfg.mode,
            "draws": len(sampler.audit),
            **{f"draws.{p}": len(sampler.draws_for(p)) for p in sampler.bank.names()},
        })
    log.info("best epoch %s, valid uSDR %s", ck.epoch, ck.best_usdr)
    return 0


def _with_mode(cfg: RunConfig, mode: str):
    from dataclasses import replace

    return replace(cfg.train, mode=mode)


# --- entry point --------------------------------------------------------------


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="dttnet", description=__doc__.splitlines()[0])
    p.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="command", required=True)

    def common(sp):
        sp.add_argument("--config", help="INI config file")
        sp.add_argument("--set", action="append", default=[], metavar="SECTION.KEY=VALUE")
        sp.add_argument("--seed", type=int)

    sp = sub.add_parser("inspect", help="per-layer parameter table")
    common(sp)
    sp.add_argument("--output", help="also write the table to this file")
    sp.set_defaults(func=cmd_inspect)

    sp = sub.add_parser("separate", help="separate one WAV file")
    common(sp)
    sp.add_argument("--model", required=True, help="checkpoint path, or 'identity'")
    sp.add_argument("--input", required=True)
    sp.add_argument("--output", required=True)
    sp.add_argument("--overlap", type=float, default=0.5)
    sp.set_defaults(func=cmd_separate)

    sp = sub.add_parser("evaluate", help="uSDR / cSDR report on a dataset split")
    common(sp)
    sp.add_argument("--model", required=True, help="checkpoint path, or 'identity'")
    sp.add_argument("--data", required=True)
    sp.add_argument("--split", default="test")
    sp.add_argument("--patterns", help="pattern bank directory to overlay")
    sp.add_argument("--pattern", default="all", help="pattern name(s), comma separated, or 'all'")
    sp.add_argument("--pattern-split", default="test", choices=["train", "valid", "test"])
    sp.add_argument("--overlap", type=float, default=0.5)
    sp.add_argument("--out", required=True)
    sp.set_defaults(func=cmd_evaluate)

    sp = sub.add_parser("mixgen", help="write pattern-overlaid evaluation mixtures")
    common(sp)
    sp.add_argument("--patterns", required=True)
    sp.add_argument("--data", required=True)
    sp.add_argument("--split", default="test")
    sp.add_argument("--pattern", default="all")
    sp.add_argument("--pattern-split", default="test", choices=["train", "valid", "test"])
    sp.add_argument("--out", required=True)
    sp.set_defaults(func=cmd_mixgen)

    sp = sub.add_parser("train", help="train or fine-tune a model")
    common(sp)
    sp.add_argument("--data")
    sp.add_argument("--patterns")
    sp.add_argument("--mode", choices=["base", "vc", "nvc"])
    sp.add_argument("--resume", help="snapshot written by a previous run (last.snapshot)")
    sp.add_argument("--init", help="checkpoint to start from (fine-tuning)")
    sp.add_argument("--out", default="runs/latest")
    sp.set_defaults(func=cmd_train)
    return p


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(
        stream=sys.stderr,
        level=logging.DEBUG if args.verbose else logging.INFO,
        format="%(levelname)s %(name)s: %(message)s",
    )
    try:
        overrides = list(args.set)
        if args.seed is not None:
            overrides.append(f"run.seed={args.seed}")
        cfg = load_config(args.config, overrides)
        return args.func(args, cfg)
    except ConfigError as e:
        log.error("config error: %s", e)
        return EXIT_CONFIG
    except (DataError, AudioError, MetricError, checkpoint.CheckpointError, FileNotFoundError) as e:
        log.error("data error: %s", e)
        return EXIT_DATA
    except NumericalError as e:
        log.error("numerical failure: %s", e)
        return EXIT_NUMERIC


if __name__ == "__main__":
    sys.exit(main())
