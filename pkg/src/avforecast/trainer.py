"""Joint discriminator/generator training with a stepped adversarial
weight, optional Bernoulli teacher forcing, CSV logging and checkpoints."""

from __future__ import annotations

import csv
import json
import math
from dataclasses import asdict, dataclass, fields
from pathlib import Path
from typing import Callable

import numpy as np
import torch

from . import diffcore as dc
from . import evalkit
from .avfeat import StftConfig, frame_spectrograms
from .diffcore import AdamState, NonFiniteError, ShapeError
from .net import NetConfig, AVPredictor
from .objective import (LossBreakdown, adversarial_scores, discriminator_loss, generator_adv_term,
                        generator_objective, judged_steps, kl_diag_gauss, mismatch_indices, recon_loss,
                        total_losses)

LOG_COLUMNS = ("epoch", "step", "recon", "kl", "adv_g", "total_g", "total_d")


@dataclass(frozen=True)
class TrainConfig:
    lr: float = 2e-3
    beta: float = 1e-4
    gamma0: float = 1e-4
    gamma_step_epochs: int = 300
    gamma_factor: float = 10.0
    epochs: int = 600
    batch_size: int = 16
    seen: int = 5
    total: int = 20
    teacher_forcing: str = "off"  # "off" | "bernoulli"
    tf_p: float = 0.5
    tf_warmup: int = 100
    clip_norm: float = 5.0
    seed: int = 0
    val_every: int = 0  # epochs between validations; 0 disables
    val_k: int = 10
    val_clips: int = 32
    sample_every: int = 0

    def __post_init__(self):
        self.validate()

    def validate(self) -> None:
        if not 0 < self.seen < self.total:
            raise ValueError(f"need 0 < seen < total, got seen={self.seen}, total={self.total}")
        if self.lr < 0:
            raise ValueError("lr must be non-negative")
        if not 0.0 <= self.tf_p <= 1.0:
            raise ValueError(f"tf_p must lie in [0, 1], got {self.tf_p}")
        if self.teacher_forcing not in ("off", "bernoulli"):
            raise ValueError(f"teacher_forcing must be 'off' or 'bernoulli', got {self.teacher_forcing!r}")
        if self.batch_size < 2:
            raise ValueError("batch_size must be >= 2 (real-data terms pair clips within a batch)")
        if self.epochs < 0 or self.gamma_step_epochs <= 0:
            raise ValueError("epochs must be >= 0 and gamma_step_epochs > 0")


def gamma_schedule(epoch: int, cfg: TrainConfig) -> float:
    if epoch < 0:
        raise ValueError("epoch must be non-negative")
    return cfg.gamma0 * cfg.gamma_factor ** (epoch // cfg.gamma_step_epochs)


def teacher_gate(epoch: int, rng: np.random.Generator, cfg: TrainConfig) -> bool:
    """True means ground-truth frames feed the prediction network."""
    if cfg.teacher_forcing == "off" or epoch < cfg.tf_warmup:
        return True
    return bool(rng.random() < cfg.tf_p)


def step_rng(seed: int, epoch: int, step: int) -> np.random.Generator:
    return np.random.default_rng([seed, epoch, step])


def _torch_gen(rng: np.random.Generator) -> torch.Generator:
    return torch.Generator().manual_seed(int(rng.integers(2 ** 62)))


def prepare_clips(videos, audios, num_frames: int, stft: StftConfig = StftConfig()) -> tuple[np.ndarray, np.ndarray]:
    """uint8 videos + waveforms -> float frames in [0, 1] and STFT blocks."""
    videos = np.asarray(videos)
    frames = videos[:, :num_frames].astype(np.float64)
    if videos.dtype == np.uint8:
        frames /= 255.0
    s = stft.samples_per_frame
    blocks = np.stack([frame_spectrograms(a[: num_frames * s], num_frames, stft).blocks for a in audios])
    return frames, blocks


@dataclass
class StepStates:
    gen: AdamState
    disc: AdamState

    @classmethod
    def fresh(cls, model: AVPredictor) -> "StepStates":
        return cls(AdamState.for_params(model.generator_params()), AdamState.for_params(model.discriminator_params()))


def _copy_adam(st: AdamState) -> AdamState:
    return AdamState({k: v.clone() for k, v in st.m.items()}, {k: v.clone() for k, v in st.v.items()},
                     st.step, st.beta1, st.beta2, st.eps)


def _check(name: str, t: torch.Tensor) -> None:
    if not torch.isfinite(t).all():
        raise NonFiniteError(f"{name} loss is non-finite ({float(t.detach())})")


def train_step(model: AVPredictor, frames, blocks, states: StepStates, cfg: TrainConfig, epoch: int,
               step: int = 0) -> LossBreakdown:
    # per-op finiteness checks are redundant here: both losses are checked
    with dc.finite_checks(False):
        return _train_step(model, frames, blocks, states, cfg, epoch, step)


def _train_step(model: AVPredictor, frames, blocks, states: StepStates, cfg: TrainConfig, epoch: int,
                step: int) -> LossBreakdown:
    """One discriminator update on detached fakes, then one generator update.

    On a non-finite loss every parameter, buffer and optimizer state is
    restored and :class:`NonFiniteError` is raised.
    """
    frames = torch.as_tensor(frames, dtype=dc.DTYPE)
    blocks = torch.as_tensor(blocks, dtype=dc.DTYPE)
    T, F_ = cfg.total, cfg.seen
    if frames.dim() != 4 or frames.shape[1] < T:
        raise ShapeError(f"train_step: frames {tuple(frames.shape)} need (N, >={T}, H, W)")
    if blocks.shape[:2] != frames.shape[:2]:
        raise ShapeError(f"train_step: audio {tuple(blocks.shape[:2])} not aligned with frames {tuple(frames.shape[:2])}")
    frames, blocks = frames[:, :T], blocks[:, :T]
    N = frames.shape[0]
    if N < 2:
        raise ShapeError("train_step needs at least two clips per batch")
    c = model.cfg
    rng = step_rng(cfg.seed, epoch, step)
    gamma = gamma_schedule(epoch, cfg)
    use_truth = teacher_gate(epoch, rng, cfg)
    noise = torch.randn(N, T, c.z_dim, generator=_torch_gen(rng), dtype=dc.DTYPE)
    mismatch = mismatch_indices(judged_steps(T, F_, c.history, c.lookahead), T, c.history, c.lookahead, N, rng)

    snapshot = model.params.arrays()
    saved = (_copy_adam(states.gen), _copy_adam(states.disc))
    try:
        res = model.rollout(frames, blocks, F_, mode="train", noise=noise, feed_generated=not use_truth)
        fake = res.frames

        d_params = model.discriminator_params()
        d_loss = discriminator_loss(adversarial_scores(model, frames, blocks, fake.detach(), F_, mismatch))
        _check("discriminator", d_loss)
        grads = dc.backward(d_loss, d_params)
        dc.clip_grad_norm(grads, cfg.clip_norm)
        dc.adam_update(d_params, grads, states.disc, cfg.lr)

        g_params = model.generator_params()
        s = adversarial_scores(model, frames, blocks, fake, F_, mismatch, fake_only=True)
        adv_g = generator_adv_term(s.std_fake, s.md_fake, s.aa_fake)
        rec = recon_loss(fake, frames[:, F_:])
        post = type(res.priors[0])(torch.stack([p.mu for p in res.posteriors], 1),
                                   torch.stack([p.log_var for p in res.posteriors], 1))
        prior = type(post)(torch.stack([p.mu for p in res.priors], 1), torch.stack([p.log_var for p in res.priors], 1))
        kl = kl_diag_gauss(post, prior) * post.mu.shape[1]  # sum over steps, mean over batch
        total_g = generator_objective(rec, kl, adv_g, cfg.beta, gamma)
        _check("generator", total_g)
        grads = dc.backward(total_g, g_params)
        dc.clip_grad_norm(grads, cfg.clip_norm)
        dc.adam_update(g_params, grads, states.gen, cfg.lr)
    except NonFiniteError:
        model.params.load_arrays(snapshot)
        states.gen, states.disc = saved
        raise
    return total_losses({"recon": rec, "kl": kl, "adv_g": adv_g, "total_d": d_loss}, cfg.beta, gamma)


def params_finite(model: AVPredictor) -> bool:
    return all(bool(torch.isfinite(t).all()) for t in model.params.entries.values())


def write_pgm(path, frame) -> None:
    """8-bit binary PGM of a [0, 1] frame."""
    a = np.clip(np.round(np.asarray(frame) * 255.0), 0, 255).astype(np.uint8)
    with open(path, "wb") as fh:
        fh.write(f"P5\n{a.shape[1]} {a.shape[0]}\n255\n".encode("ascii"))
        fh.write(a.tobytes())


def read_pgm(path) -> np.ndarray:
    data = Path(path).read_bytes()
    parts = data.split(maxsplit=4)
    if parts[0] != b"P5":
        raise ValueError(f"{path}: not a binary PGM")
    w, h = int(parts[1]), int(parts[2])
    return np.frombuffer(parts[4][: w * h], dtype=np.uint8).reshape(h, w)


def dump_frames(out_dir, frames, prefix: str = "frame") -> list[Path]:
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    paths = []
    for i, f in enumerate(np.asarray(frames)):
        p = out / f"{prefix}_{i:03d}.pgm"
        write_pgm(p, f)
        paths.append(p)
    return paths


def save_training_checkpoint(path, model: AVPredictor, states: StepStates, meta: dict) -> None:
    dc.save_checkpoint(path, model.params.arrays(), {"gen": states.gen, "disc": states.disc}, meta)


def load_model(path) -> tuple[AVPredictor, StepStates | None, dict]:
    """Rebuild a model (and optimizer states, if stored) from a checkpoint."""
    ck = dc.load_checkpoint(path)
    meta = ck.meta
    if "net" not in meta:
        raise dc.CheckpointError(f"{path}: checkpoint lacks a network config")
    model = AVPredictor(NetConfig(**meta["net"]), seed=meta.get("init_seed", 0))
    model.params.load_arrays(ck.tensors)
    states = None
    if isinstance(ck.adam, dict) and {"gen", "disc"} <= set(ck.adam):
        states = StepStates(ck.adam["gen"], ck.adam["disc"])
    return model, states, meta


class Trainer:
    """Epoch loop over a fixed in-memory training set.

    Per-step randomness derives from (seed, epoch, step), so resuming from
    an epoch-boundary checkpoint reproduces an uninterrupted run exactly.
    """

    def __init__(self, model: AVPredictor, cfg: TrainConfig, train: tuple, val: tuple | None = None,
                 out_dir=None, init_seed: int = 0):
        self.model = model
        self.cfg = cfg
        self.frames = np.asarray(train[0], dtype=np.float64)
        self.blocks = np.asarray(train[1], dtype=np.float64)
        if len(self.frames) < 2:
            raise ValueError("training set needs at least two clips")
        self.val = val
        self.out = Path(out_dir) if out_dir is not None else None
        self.states = StepStates.fresh(model)
        self.epoch = 0
        self.global_step = 0
        self.best_val = -math.inf
        self.init_seed = init_seed
        self.history: list[tuple[int, int, LossBreakdown]] = []
        if self.out is not None:
            self.out.mkdir(parents=True, exist_ok=True)

    # -- persistence ------------------------------------------------------

    def meta(self) -> dict:
        return {"epoch": self.epoch, "global_step": self.global_step, "best_val": self.best_val,
                "train": asdict(self.cfg), "net": self.model.cfg.to_dict(), "init_seed": self.init_seed}

    def save(self, path) -> None:
        save_training_checkpoint(path, self.model, self.states, self.meta())

    def restore(self, path) -> None:
        ck = dc.load_checkpoint(path)
        self.model.params.load_arrays(ck.tensors)
        if not (isinstance(ck.adam, dict) and {"gen", "disc"} <= set(ck.adam)):
            raise dc.CheckpointError(f"{path}: no optimizer state to resume from")
        self.states = StepStates(ck.adam["gen"], ck.adam["disc"])
        self.epoch = int(ck.meta["epoch"])
        self.global_step = int(ck.meta["global_step"])
        self.best_val = float(ck.meta.get("best_val", -math.inf))

    # -- loop -------------------------------------------------------------

    def batches(self, epoch: int) -> list[np.ndarray]:
        n, b = len(self.frames), min(self.cfg.batch_size, len(self.frames))
        order = np.random.default_rng([self.cfg.seed, epoch, 2 ** 31]).permutation(n)
        out = [order[i:i + b] for i in range(0, n, b)]
        if len(out) > 1 and len(out[-1]) < 2:
            tail = out.pop()
            out[-1] = np.concatenate([out[-1], tail])
        return out

    def run_epoch(self) -> list[LossBreakdown]:
        epoch = self.epoch
        rows = []
        for step, idx in enumerate(self.batches(epoch)):
            lb = train_step(self.model, self.frames[idx], self.blocks[idx], self.states, self.cfg, epoch, step)
            rows.append(lb)
            self.history.append((epoch, step, lb))
            self._log(epoch, step, lb)
            self.global_step += 1
        if not params_finite(self.model):
            raise NonFiniteError(f"non-finite parameters after epoch {epoch}")
        self.epoch += 1
        return rows

    def _log(self, epoch: int, step: int, lb: LossBreakdown) -> None:
        if self.out is None:
            return
        path = self.out / "train_log.csv"
        new = not path.exists()
        with open(path, "a", newline="") as fh:
            w = csv.writer(fh)
            if new:
                w.writerow(LOG_COLUMNS)
            w.writerow([epoch, step, *(repr(v) for v in lb.row())])

    def validate(self) -> float:
        vf, vb = self.val
        n = min(self.cfg.val_clips, len(vf))
        rep, best = evalkit.evaluate(self.model, vf[:n], vb[:n], self.cfg.seen, self.cfg.val_k,
                                     seed=self.cfg.seed, length=self.cfg.total)
        score = float(np.mean(rep.ssim))
        if self.out is not None and self.cfg.sample_every and self.epoch % self.cfg.sample_every == 0:
            dump_frames(self.out / "samples" / f"epoch_{self.epoch:04d}", best[0])
        return score

    def fit(self, epochs: int | None = None, callback: Callable | None = None) -> list[tuple[int, int, LossBreakdown]]:
        """Train until ``epochs`` total epochs (default ``cfg.epochs``) have run."""
        target = self.cfg.epochs if epochs is None else epochs
        while self.epoch < target:
            self.run_epoch()
            if self.val is not None and self.cfg.val_every and self.epoch % self.cfg.val_every == 0:
                score = self.validate()
                if score > self.best_val:
                    self.best_val = score
                    if self.out is not None:
                        self.save(self.out / "best.ckpt")
            if self.out is not None:
                self.save(self.out / "last.ckpt")
            if callback is not None:
                callback(self)
        if self.out is not None:
            (self.out / "train_summary.json").write_text(json.dumps(self.meta(), indent=1))
        return self.history


def config_fields(cls) -> set[str]:
    return {f.name for f in fields(cls)}
