"""Command-line entry point: ``python -m avforecast <verb> [--config f.json] [--a.b value ...]``.

Verbs: gen-data, train, sample, eval, report. Exit codes: 0 success,
1 usage/config error, 2 runtime failure.
"""

from __future__ import annotations

import argparse
import csv
import json
import os
import shutil
import sys
import time
import types
import typing
from dataclasses import asdict, dataclass, field, fields, is_dataclass
from pathlib import Path

import numpy as np

from . import evalkit, m3so, trainer
from .avfeat import StftConfig
from .net import NetConfig, AVPredictor

OUT_ROOT_ENV = "AVF_OUT_ROOT"
VERBS = ("gen-data", "train", "sample", "eval", "report")


class ConfigError(ValueError):
    """Bad configuration; the message names the offending key path."""


class UsageError(Exception):
    pass


@dataclass(frozen=True)
class DataConfig:
    m3so: m3so.M3soConfig = field(default_factory=m3so.M3soConfig)
    counts: dict = field(default_factory=lambda: {"train": 500, "val": 50, "test": 100})
    log_scale: bool = False


@dataclass(frozen=True)
class EvalConfig:
    k: int = 10
    k_values: tuple[int, ...] = (1, 5, 10, 20, 50, 100)
    diversity_clips: int = 4
    n_clips: int = 100
    horizons: tuple[int, ...] = (6, 10, 15, 20)
    seed: int = 0
    mismatch_probe: bool = False
    split: str = "test"


@dataclass(frozen=True)
class PathConfig:
    data_dir: str | None = None
    checkpoint: str | None = None
    eval_report: str | None = None
    out_root: str | None = None
    run_dir: str | None = None


@dataclass(frozen=True)
class RunConfig:
    seed: int = 0
    data: DataConfig = field(default_factory=DataConfig)
    net: NetConfig = field(default_factory=NetConfig)
    train: trainer.TrainConfig = field(default_factory=trainer.TrainConfig)
    eval: EvalConfig = field(default_factory=EvalConfig)
    paths: PathConfig = field(default_factory=PathConfig)

    def to_dict(self) -> dict:
        return asdict(self)


# ---------------------------------------------------------------------------
# typed construction from nested dicts

def _type_ok(value, tp) -> tuple[bool, object]:
    """Check ``value`` against annotation ``tp``; returns (ok, coerced)."""
    origin = typing.get_origin(tp)
    if origin in (typing.Union, types.UnionType):
        for arm in typing.get_args(tp):
            ok, v = _type_ok(value, arm)
            if ok:
                return True, v
        return False, value
    if tp is type(None):
        return value is None, value
    if tp is bool:
        return isinstance(value, bool), value
    if tp is int:
        return isinstance(value, int) and not isinstance(value, bool), value
    if tp is float:
        ok = isinstance(value, (int, float)) and not isinstance(value, bool)
        return ok, float(value) if ok else value
    if tp is str:
        return isinstance(value, str), value
    if origin is tuple or tp is tuple:
        if not isinstance(value, (list, tuple)):
            return False, value
        args = typing.get_args(tp)
        elem = args[0] if args else typing.Any
        out = []
        for v in value:
            ok, c = _type_ok(v, elem) if elem is not typing.Any else (True, v)
            if not ok:
                return False, value
            out.append(c)
        return True, tuple(out)
    if tp is dict or origin is dict:
        return isinstance(value, dict), value
    return True, value


def build(cls, data: dict, path: str = ""):
    """Instantiate dataclass ``cls`` from a (partial) nested dict."""
    if not isinstance(data, dict):
        raise ConfigError(f"{path or '<root>'}: expected an object, got {type(data).__name__}")
    hints = typing.get_type_hints(cls)
    known = {f.name for f in fields(cls)}
    for k in data:
        if k not in known:
            raise ConfigError(f"unknown config key '{path + k}'")
    kw = {}
    for f in fields(cls):
        if f.name not in data:
            continue
        tp, v, key = hints[f.name], data[f.name], path + f.name
        if is_dataclass(tp):
            kw[f.name] = build(tp, v, key + ".")
            continue
        ok, coerced = _type_ok(v, tp)
        if not ok:
            raise ConfigError(f"config key '{key}': expected {tp}, got {v!r}")
        kw[f.name] = coerced
    try:
        return cls(**kw)
    except (TypeError, ValueError) as e:
        raise ConfigError(f"{path.rstrip('.') or '<root>'}: {e}") from None


def _set_dotted(tree: dict, key: str, value) -> None:
    parts = key.split(".")
    node = tree
    for p in parts[:-1]:
        nxt = node.setdefault(p, {})
        if not isinstance(nxt, dict):
            raise ConfigError(f"config key '{key}': '{p}' is not a section")
        node = nxt
    node[parts[-1]] = value


def _check_path(key: str) -> None:
    cls = RunConfig
    parts = key.split(".")
    for i, p in enumerate(parts):
        hints = typing.get_type_hints(cls)
        if p not in hints:
            raise ConfigError(f"unknown config key '{key}'")
        tp = hints[p]
        if i < len(parts) - 1:
            if not is_dataclass(tp):
                if tp is dict:  # free-form mapping (split counts)
                    return
                raise ConfigError(f"unknown config key '{key}'")
            cls = tp


def _parse_value(text: str):
    try:
        return json.loads(text)
    except json.JSONDecodeError:
        return text


def parse_config(path=None, overrides: list[tuple[str, str]] | dict | None = None) -> RunConfig:
    """Load a JSON config file (optional) and apply dotted-path overrides.

    Override values are parsed as JSON when possible (so ``0.001``,
    ``true``, ``[1,2]`` work), otherwise taken as strings.
    """
    tree: dict = {}
    if path is not None:
        p = Path(path)
        if not p.exists():
            raise ConfigError(f"config file {p} does not exist")
        try:
            tree = json.loads(p.read_text())
        except json.JSONDecodeError as e:
            raise ConfigError(f"config file {p} is not valid JSON ({e})") from None
        if not isinstance(tree, dict):
            raise ConfigError(f"config file {p}: top level must be an object")
        tree.get("data", {}).get("m3so", {}).pop("origin", None)
    items = overrides.items() if isinstance(overrides, dict) else (overrides or [])
    for key, raw in items:
        _check_path(key)
        _set_dotted(tree, key, _parse_value(raw) if isinstance(raw, str) else raw)
    return build(RunConfig, tree)


def config_from_json(text: str) -> RunConfig:
    return build(RunConfig, json.loads(text))


# ---------------------------------------------------------------------------
# run directories

def make_run_dir(cfg: RunConfig, verb: str) -> Path:
    if cfg.paths.run_dir:
        d = Path(cfg.paths.run_dir)
        if d.exists() and any(d.iterdir()):
            raise UsageError(f"run directory {d} already exists and is not empty")
    else:
        root = Path(cfg.paths.out_root or os.environ.get(OUT_ROOT_ENV, "runs"))
        stamp = time.strftime("%Y%m%d-%H%M%S")
        d = root / f"{stamp}_seed{cfg.seed}_{verb}"
        n = 1
        while d.exists():
            d = root / f"{stamp}_seed{cfg.seed}_{verb}_{n}"
            n += 1
    d.mkdir(parents=True, exist_ok=True)
    (d / "config.json").write_text(json.dumps(cfg.to_dict(), indent=1))
    return d


def _stft(cfg: RunConfig) -> StftConfig:
    mc = cfg.data.m3so
    return StftConfig(audio_rate=mc.audio_rate, fps=mc.fps, log_scale=cfg.data.log_scale)


def _load(cfg: RunConfig, split: str, num_frames: int | None = None):
    if not cfg.paths.data_dir:
        raise UsageError("paths.data_dir is required for this verb")
    d = Path(cfg.paths.data_dir)
    if not (d / split / "manifest.json").exists():
        raise FileNotFoundError(f"dataset split '{split}' not found under {d}")
    videos, audios, manifest = m3so.load_split(d, split)
    T = num_frames or videos.shape[1]
    frames, blocks = trainer.prepare_clips(videos, audios, T, _stft(cfg))
    return frames, blocks, manifest


def _need_checkpoint(cfg: RunConfig) -> Path:
    if not cfg.paths.checkpoint:
        raise UsageError("paths.checkpoint is required for this verb")
    p = Path(cfg.paths.checkpoint)
    if not p.exists():
        raise FileNotFoundError(f"checkpoint {p} does not exist")
    return p


# ---------------------------------------------------------------------------
# verbs

def cmd_gen_data(cfg: RunConfig, run_dir: Path) -> None:
    out = Path(cfg.paths.data_dir) if cfg.paths.data_dir else run_dir / "data"
    m3so.generate_dataset(cfg.data.m3so, dict(cfg.data.counts), out)
    (run_dir / "data_location.txt").write_text(str(out.resolve()) + "\n")


def cmd_train(cfg: RunConfig, run_dir: Path) -> None:
    tc = cfg.train
    frames, blocks, _ = _load(cfg, "train", tc.total)
    val = None
    if tc.val_every and (Path(cfg.paths.data_dir) / "val" / "manifest.json").exists():
        vf, vb, _ = _load(cfg, "val", tc.total)
        val = (vf, vb)
    net_cfg = cfg.net
    if net_cfg.frame_size != frames.shape[-1]:
        raise UsageError(f"net.frame_size={net_cfg.frame_size} but the dataset frames are {frames.shape[-1]} px")
    model = AVPredictor(net_cfg, seed=cfg.seed)
    t = trainer.Trainer(model, tc, (frames, blocks), val, out_dir=run_dir, init_seed=cfg.seed)
    t.fit()


def _rollouts(cfg: RunConfig, k: int):
    model, _, meta = trainer.load_model(_need_checkpoint(cfg))
    tc = trainer.TrainConfig(**meta["train"]) if "train" in meta else cfg.train
    frames, blocks, manifest = _load(cfg, cfg.eval.split, tc.total)
    n = min(cfg.eval.n_clips, len(frames))
    return model, tc, frames[:n], blocks[:n], manifest


def cmd_sample(cfg: RunConfig, run_dir: Path) -> None:
    model, tc, frames, blocks, manifest = _rollouts(cfg, cfg.eval.k)
    roll = evalkit.sample_rollouts(model, frames, blocks, tc.seen, cfg.eval.k, cfg.eval.seed, tc.total)
    sdir = Path(cfg.paths.data_dir) / cfg.eval.split
    for i in range(len(frames)):
        cdir = run_dir / "samples" / f"clip_{i:05d}"
        trainer.dump_frames(cdir / "context", frames[i, :tc.seen])
        for k in range(cfg.eval.k):
            trainer.dump_frames(cdir / f"rollout_{k:03d}", roll[i, k])
        shutil.copyfile(sdir / manifest["clips"][i]["audio"], cdir / "audio.wav")


def cmd_eval(cfg: RunConfig, run_dir: Path) -> None:
    model, tc, frames, blocks, manifest = _rollouts(cfg, cfg.eval.k)
    ec = cfg.eval
    report, best = evalkit.evaluate(model, frames, blocks, tc.seen, ec.k, ec.seed, tc.total)
    if ec.k_values and ec.diversity_clips:
        nd = min(ec.diversity_clips, len(frames))
        kmax = max(ec.k_values)
        roll = evalkit.sample_rollouts(model, frames[:nd], blocks[:nd], tc.seen, kmax, ec.seed, tc.total)
        curves = [evalkit.diversity_curves(roll[i], frames[i, tc.seen:tc.total], ec.k_values) for i in range(nd)]
        report.inter_ssim = {k: float(np.mean([c[0][k] for c in curves])) for k in ec.k_values}
        report.intra_ssim = {k: float(np.mean([c[1][k] for c in curves])) for k in ec.k_values if k >= 2}
    boxes = [e.get("block_box") for e in manifest["clips"][:len(frames)]]
    if all(b is not None for b in boxes) and boxes:
        bs = cfg.data.m3so.block_size
        report.block_iou = float(np.mean([evalkit.iou(evalkit.locate_block(best[i, -1], bs), evalkit.BoxRegion(*b))
                                          for i, b in enumerate(boxes)]))
    ctx = evalkit.seq_contexts(frames, blocks, best, tc.seen, model.cfg.history, model.cfg.lookahead)
    if ctx:
        report.fooling_rate = evalkit.fooling_rate(evalkit.seq_discriminator(model), ctx)
    report.write(run_dir)
    if ec.mismatch_probe and len(frames) >= 2:
        mm = evalkit.av_mismatch_probe(model, frames, blocks, tc.seen, ec.k, ec.seed, length=tc.total)
        mm.write(run_dir / "av_mismatch")
    trainer.dump_frames(run_dir / "best_rollout_clip0", best[0])


def cmd_report(cfg: RunConfig, run_dir: Path) -> None:
    if not cfg.paths.eval_report:
        raise UsageError("paths.eval_report is required (an eval_report.json or its run directory)")
    p = Path(cfg.paths.eval_report)
    if p.is_dir():
        p = p / "eval_report.json"
    if not p.exists():
        raise FileNotFoundError(f"eval report {p} does not exist")
    rep = evalkit.EvalReport.from_json(p.read_text())
    write_report(rep, cfg.eval.horizons, run_dir)


def write_report(rep: evalkit.EvalReport, horizons, out_dir: Path) -> None:
    """Markdown + CSV tables of per-frame SSIM/PSNR at 1-based horizons."""
    first = rep.seen + 1
    hs = [h for h in horizons if first <= h < first + len(rep.ssim)]
    rows = [("model", *[rep.ssim[h - first] for h in hs], *[rep.psnr[h - first] for h in hs])]
    if rep.baseline_ssim:
        rows.append(("copy-last", *[rep.baseline_ssim[h - first] for h in hs],
                     *[rep.baseline_psnr[h - first] for h in hs]))
    header = ["method", *[f"ssim@{h}" for h in hs], *[f"psnr@{h}" for h in hs]]
    with open(out_dir / "report.csv", "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(header)
        w.writerows(rows)
    lines = ["| " + " | ".join(header) + " |", "|" + "---|" * len(header)]
    for r in rows:
        lines.append("| " + " | ".join([r[0], *[f"{v:.4f}" for v in r[1:]]]) + " |")
    extra = []
    if rep.block_iou is not None:
        extra.append(f"- block IoU (final frame): {rep.block_iou:.4f}")
    if rep.fooling_rate is not None:
        extra.append(f"- discriminator fooling rate: {rep.fooling_rate:.4f}")
    if rep.inter_ssim:
        extra.append("- inter-SSIM by K: " + ", ".join(f"{k}: {v:.4f}" for k, v in rep.inter_ssim.items()))
    if rep.intra_ssim:
        extra.append("- intra-SSIM by K: " + ", ".join(f"{k}: {v:.4f}" for k, v in rep.intra_ssim.items()))
    text = "# Evaluation report\n\nBest-of-K per-frame scores (frame numbers are 1-based).\n\n" + "\n".join(lines)
    if extra:
        text += "\n\n" + "\n".join(extra)
    (out_dir / "report.md").write_text(text + "\n")


COMMANDS = {"gen-data": cmd_gen_data, "train": cmd_train, "sample": cmd_sample, "eval": cmd_eval,
            "report": cmd_report}


# ---------------------------------------------------------------------------
# argv handling

def split_overrides(extra: list[str]) -> list[tuple[str, str]]:
    out, i = [], 0
    while i < len(extra):
        tok = extra[i]
        if not tok.startswith("--") or len(tok) <= 2:
            raise UsageError(f"unexpected argument {tok!r}")
        key = tok[2:]
        if "=" in key:
            key, val = key.split("=", 1)
            i += 1
        else:
            if i + 1 >= len(extra):
                raise UsageError(f"flag {tok} needs a value")
            val = extra[i + 1]
            i += 2
        out.append((key, val))
    return out


def main(argv: list[str] | None = None) -> int:
    ap = argparse.ArgumentParser(prog="avforecast", description=__doc__.splitlines()[0],
                                 epilog="Any config key can be overridden as --section.key value.")
    ap.add_argument("verb", choices=VERBS)
    ap.add_argument("--config", help="JSON run config")
    try:
        args, extra = ap.parse_known_args(argv)
    except SystemExit as e:
        return 0 if e.code == 0 else 1
    try:
        cfg = parse_config(args.config, split_overrides(extra))
    except (ConfigError, UsageError) as e:
        print(f"error: {e}", file=sys.stderr)
        return 1
    try:
        run_dir = make_run_dir(cfg, args.verb)
    except UsageError as e:
        print(f"error: {e}", file=sys.stderr)
        return 1
    try:
        COMMANDS[args.verb](cfg, run_dir)
    except UsageError as e:
        shutil.rmtree(run_dir, ignore_errors=True)
        print(f"error: {e}", file=sys.stderr)
        return 1
    except Exception as e:  # runtime failure: report and clean up
        shutil.rmtree(run_dir, ignore_errors=True)
        print(f"error: {type(e).__name__}: {e}", file=sys.stderr)
        return 2
    print(run_dir)
    return 0
