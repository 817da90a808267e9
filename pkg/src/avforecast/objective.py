"""Losses: reconstruction + KL (variational bound), the six-term multimodal
discriminator loss, and the combined generator objective."""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np
import torch

from . import diffcore as dc
from .diffcore import NonFiniteError, ShapeError
from .net import LatentGaussian, AVPredictor

LOG_CLAMP = 1e-7
TERMS = ("std_real", "std_fake", "md_real", "aa_real", "md_fake", "aa_fake")


def clamped_log(p: torch.Tensor) -> torch.Tensor:
    return torch.log(p.clamp(LOG_CLAMP, 1.0 - LOG_CLAMP))


def kl_diag_gauss(post: LatentGaussian, prior: LatentGaussian) -> torch.Tensor:
    """KL(post || prior) for diagonal Gaussians: summed over the last axis,
    averaged over any leading batch axes."""
    if post.mu.shape != prior.mu.shape or post.log_var.shape != prior.log_var.shape:
        raise ShapeError(f"KL: posterior {tuple(post.mu.shape)} vs prior {tuple(prior.mu.shape)}")
    diff = post.mu - prior.mu
    kl = 0.5 * (prior.log_var - post.log_var
                + (torch.exp(post.log_var) + diff * diff) * torch.exp(-prior.log_var) - 1.0)
    kl = kl.sum(-1)
    return kl.mean() if kl.dim() else kl


def recon_loss(pred: torch.Tensor, target: torch.Tensor) -> torch.Tensor:
    """Squared pixel error summed over (time, H, W), averaged over batch."""
    if pred.shape != target.shape:
        raise ShapeError(f"recon_loss: prediction {tuple(pred.shape)} vs target {tuple(target.shape)}")
    d = dc.sub(pred, target)
    per = (d * d).reshape(pred.shape[0], -1).sum(-1)
    return per.mean()


@dataclass
class DiscScores:
    """Discriminator probabilities, each (N, n_t) over the judged steps."""
    std_real: torch.Tensor
    std_fake: torch.Tensor
    md_real: torch.Tensor
    aa_real: torch.Tensor
    md_fake: torch.Tensor
    aa_fake: torch.Tensor


def _per_sample(x: torch.Tensor) -> torch.Tensor:
    return x.reshape(x.shape[0], -1).sum(-1) if x.dim() > 1 else x


def discriminator_loss(scores: DiscScores | dict) -> torch.Tensor:
    """Negated six-term log-likelihood: summed over steps, mean over batch."""
    if isinstance(scores, dict):
        missing = [t for t in TERMS if scores.get(t) is None]
        if missing:
            raise ValueError(f"discriminator_loss: missing input groups {missing}")
        scores = DiscScores(**{t: scores[t] for t in TERMS})
    for t in TERMS:
        if getattr(scores, t) is None:
            raise ValueError(f"discriminator_loss: missing input group {t!r}")
    s = scores
    total = (clamped_log(s.std_real) + clamped_log(1 - s.std_fake)
             + clamped_log(s.md_real) + clamped_log(1 - s.aa_real)
             + clamped_log(1 - s.md_fake) + clamped_log(1 - s.aa_fake))
    return -_per_sample(total).mean()


def generator_adv_term(std_fake: torch.Tensor, md_fake: torch.Tensor, aa_fake: torch.Tensor) -> torch.Tensor:
    """Fake-frame part of the discriminator loss; the generator maximizes it."""
    total = clamped_log(1 - std_fake) + clamped_log(1 - md_fake) + clamped_log(1 - aa_fake)
    return -_per_sample(total).mean()


def generator_objective(recon, kl, adv_g, beta: float, gamma: float):
    return recon + beta * kl - gamma * adv_g


@dataclass
class LossBreakdown:
    recon: float
    kl: float
    adv_g: float
    total_g: float
    total_d: float
    beta: float
    gamma: float

    def row(self) -> list[float]:
        return [self.recon, self.kl, self.adv_g, self.total_g, self.total_d]


def total_losses(parts: dict, beta: float = 1e-4, gamma: float = 1e-4) -> LossBreakdown:
    """Assemble a breakdown from ``recon``, ``kl``, ``adv_g`` and ``total_d``."""
    vals = {}
    for name in ("recon", "kl", "adv_g", "total_d"):
        v = parts.get(name, 0.0)
        v = float(v.detach()) if torch.is_tensor(v) else float(v)
        if not math.isfinite(v):
            raise NonFiniteError(f"loss term {name!r} is non-finite ({v})")
        vals[name] = v
    total_g = float(generator_objective(vals["recon"], vals["kl"], vals["adv_g"], beta, gamma))
    return LossBreakdown(vals["recon"], vals["kl"], vals["adv_g"], total_g, vals["total_d"], beta, gamma)


# ---------------------------------------------------------------------------
# assembling discriminator inputs

def judged_steps(T: int, seen: int, history: int, lookahead: int) -> list[int]:
    """0-based generated indices whose full neighbourhood exists."""
    return [j for j in range(seen, T) if j - history >= 0 and j + lookahead - 1 <= T - 1]


def mismatch_indices(steps: list[int], T: int, history: int, lookahead: int, n: int, rng) -> np.ndarray:
    """For each clip and judged step ``t`` draw ``t' != t`` with a full window."""
    valid = np.array([j for j in range(T) if j - history >= 0 and j + lookahead - 1 <= T - 1])
    if len(valid) < 2:
        raise ValueError("sequence too short to draw mismatched audio windows")
    out = np.empty((n, len(steps)), dtype=np.int64)
    for b in range(n):
        for i, j in enumerate(steps):
            choices = valid[valid != j]
            out[b, i] = choices[rng.integers(len(choices))]
    return out


def adversarial_scores(model: AVPredictor, frames: torch.Tensor, blocks: torch.Tensor, fake: torch.Tensor,
                       seen: int, mismatch: np.ndarray, partner_shift: int = 1, fake_only: bool = False) -> DiscScores:
    """Score every judged step of a batch.

    ``frames``/``blocks`` hold the real clips (N, T, ...); ``fake`` the
    generated frames for indices ``seen..T-1``. Real-data terms use the clip
    ``partner_shift`` positions along the batch; ``fake_only`` skips them
    (their fields are then None).
    """
    c = model.cfg
    R, k = c.history, c.lookahead
    N, T = frames.shape[:2]
    steps = judged_steps(T, seen, R, k)
    if not steps:
        raise ValueError("no generated step has a complete discriminator neighbourhood")
    J = torch.tensor(steps)
    Jp = torch.as_tensor(mismatch)  # (N, nj)
    offs = torch.arange(-R, k)
    centre = R

    real_f = model.disc_frame_features(frames)  # (N, T, Ff)
    aud_f = model.disc_audio_features(blocks)  # (N, T, Fa)
    fake_f = model.disc_frame_features(fake[:, [j - seen for j in steps]])  # (N, nj, Ff)
    part_f = None if fake_only else real_f.roll(partner_shift, dims=0)
    part_a = None if fake_only else aud_f.roll(partner_shift, dims=0)

    win = J[:, None] + offs[None, :]  # (nj, L)
    win_mm = Jp[:, :, None] + offs[None, None, :]  # (N, nj, L)
    bidx = torch.arange(N)[:, None, None]

    def with_centre(feats, centre_feats):
        seq = feats[:, win]  # (N, nj, L, Ff)
        return torch.cat([seq[:, :, :centre], centre_feats.unsqueeze(2), seq[:, :, centre + 1:]], dim=2)

    fake_seq = with_centre(real_f, fake_f)
    frames_in = [fake_seq, fake_seq]
    audio_in = [aud_f[:, win], aud_f[bidx, win_mm]]
    if not fake_only:
        part_seq = part_f[:, win]
        frames_in = [part_seq, part_seq] + frames_in
        audio_in = [part_a[:, win], part_a[bidx, win_mm]] + audio_in
    frames_in = torch.cat(frames_in, dim=0)
    audio_in = torch.cat(audio_in, dim=0)
    L = len(offs)
    probs = model.judge(frames_in.reshape(-1, L, frames_in.shape[-1]), audio_in.reshape(-1, L, audio_in.shape[-1]))
    probs = probs.view(-1, N, len(steps))
    md_fake, aa_fake = probs[-2], probs[-1]

    fs = c.frame_size
    gen_idx = [j - seen for j in steps]
    std_fake = model.discriminate_std(fake[:, gen_idx].reshape(-1, fs, fs)).view(N, len(steps))
    if fake_only:
        return DiscScores(None, std_fake, None, None, md_fake, aa_fake)
    part_frames = frames.roll(partner_shift, dims=0)[:, steps]
    std_real = model.discriminate_std(part_frames.reshape(-1, fs, fs)).view(N, len(steps))
    return DiscScores(std_real, std_fake, probs[0], probs[1], md_fake, aa_fake)
