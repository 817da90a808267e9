"""Frame metrics and inference-time protocols: SSIM/PSNR, best-of-K
selection, diversity curves, obstacle localization, fooling rate and the
audio-visual mismatch probe."""

from __future__ import annotations

import csv
import json
from dataclasses import asdict, dataclass, field
from itertools import combinations
from pathlib import Path
from typing import Callable, Sequence

import numpy as np
import torch
from scipy import ndimage

from . import diffcore as dc

SSIM_K1, SSIM_K2, SSIM_WIN, SSIM_SIGMA = 0.01, 0.03, 11, 1.5
PSNR_CAP = 100.0


# ---------------------------------------------------------------------------
# SSIM / PSNR

def _gauss_band(n: int) -> np.ndarray:
    g = np.exp(-0.5 * ((np.arange(SSIM_WIN) - SSIM_WIN // 2) / SSIM_SIGMA) ** 2)
    g /= g.sum()
    out = np.zeros((n - SSIM_WIN + 1, n))
    for i in range(out.shape[0]):
        out[i, i:i + SSIM_WIN] = g
    return out


def ssim_batch(a, b) -> np.ndarray:
    """Mean SSIM over valid 11x11 Gaussian windows for (..., H, W) pairs."""
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    if a.shape != b.shape:
        raise ValueError(f"ssim: shapes {a.shape} and {b.shape} differ")
    H, W = a.shape[-2:]
    if H < SSIM_WIN or W < SSIM_WIN:
        raise ValueError(f"ssim needs frames of at least {SSIM_WIN}x{SSIM_WIN}")
    gr, gc = _gauss_band(H), _gauss_band(W).T

    def filt(x):
        return gr @ x @ gc

    c1, c2 = SSIM_K1 ** 2, SSIM_K2 ** 2
    mu_a, mu_b = filt(a), filt(b)
    saa = filt(a * a) - mu_a * mu_a
    sbb = filt(b * b) - mu_b * mu_b
    sab = filt(a * b) - mu_a * mu_b
    num = (2 * mu_a * mu_b + c1) * (2 * sab + c2)
    den = (mu_a * mu_a + mu_b * mu_b + c1) * (saa + sbb + c2)
    return np.clip((num / den).mean(axis=(-2, -1)), -1.0, 1.0)


def ssim(a, b) -> float:
    return float(ssim_batch(a, b))


def psnr_batch(a, b) -> np.ndarray:
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    if a.shape != b.shape:
        raise ValueError(f"psnr: shapes {a.shape} and {b.shape} differ")
    mse = ((a - b) ** 2).mean(axis=(-2, -1))
    with np.errstate(divide="ignore"):
        val = 10.0 * np.log10(1.0 / np.maximum(mse, 1e-300))
    return np.where(mse < 1e-10, PSNR_CAP, np.clip(val, 0.0, PSNR_CAP))


def psnr(a, b) -> float:
    return float(psnr_batch(a, b))


# ---------------------------------------------------------------------------
# best-of-K and diversity

def best_of_k(rollouts, truth) -> tuple[int, np.ndarray, np.ndarray]:
    """Pick the rollout with the highest mean frame SSIM (lowest index on
    ties). ``rollouts`` is (K, L, H, W). Returns (index, ssim curve, psnr curve)."""
    rollouts = np.asarray(rollouts)
    if rollouts.ndim != 4 or len(rollouts) == 0:
        raise ValueError("best_of_k needs a nonempty (K, L, H, W) rollout array")
    curves = ssim_batch(rollouts, np.broadcast_to(truth, rollouts.shape))
    idx = int(np.argmax(curves.mean(axis=1)))
    return idx, curves[idx], psnr_batch(rollouts[idx], truth)


def pairwise_ssim(rollouts) -> np.ndarray:
    """(K, K) matrix of mean frame-wise SSIM between rollouts."""
    rollouts = np.asarray(rollouts)
    K = len(rollouts)
    out = np.eye(K)
    if K < 2:
        return out
    ii, jj = np.triu_indices(K, 1)
    vals = np.empty(len(ii))
    chunk = 512
    for s in range(0, len(ii), chunk):
        vals[s:s + chunk] = ssim_batch(rollouts[ii[s:s + chunk]], rollouts[jj[s:s + chunk]]).mean(axis=1)
    out[ii, jj] = vals
    out[jj, ii] = vals
    return out


def diversity_curves(rollouts, truth, k_values: Sequence[int]) -> tuple[dict[int, float], dict[int, float]]:
    """Inter-SSIM (best-of-K vs truth) and intra-SSIM (mean pairwise) over
    nested prefixes ``rollouts[:K]``. Intra is omitted for K < 2."""
    rollouts = np.asarray(rollouts)
    if list(k_values) != sorted(k_values):
        raise ValueError("k_values must be ascending")
    if max(k_values) > len(rollouts):
        raise ValueError(f"need {max(k_values)} rollouts, have {len(rollouts)}")
    scores = ssim_batch(rollouts, np.broadcast_to(truth, rollouts.shape)).mean(axis=1)
    pw = pairwise_ssim(rollouts[: max(k_values)])
    inter, intra = {}, {}
    for K in k_values:
        inter[K] = float(scores[:K].max())
        if K >= 2:
            iu = np.triu_indices(K, 1)
            intra[K] = float(pw[:K, :K][iu].mean())
    return inter, intra


def intra_ssim_bruteforce(rollouts) -> float:
    vals = [ssim_batch(a, b).mean() for a, b in combinations(np.asarray(rollouts), 2)]
    return float(np.mean(vals))


# ---------------------------------------------------------------------------
# obstacle localization

@dataclass(frozen=True)
class BoxRegion:
    x: int
    y: int
    w: int
    h: int

    def __post_init__(self):
        if self.w <= 0 or self.h <= 0:
            raise ValueError("box width and height must be positive")


@dataclass(frozen=True)
class BlockDetection:
    box: BoxRegion
    score: float

    @property
    def zero_score(self) -> bool:
        return self.score <= 1e-9


def iou(a: BoxRegion | BlockDetection | None, b: BoxRegion | BlockDetection | None) -> float:
    if isinstance(a, BlockDetection):
        a = None if a.zero_score else a.box
    if isinstance(b, BlockDetection):
        b = None if b.zero_score else b.box
    if a is None or b is None:
        return 0.0
    ix = max(0, min(a.x + a.w, b.x + b.w) - max(a.x, b.x))
    iy = max(0, min(a.y + a.h, b.y + b.h) - max(a.y, b.y))
    inter = ix * iy
    return inter / (a.w * a.h + b.w * b.h - inter)


def _window_sums(frame: np.ndarray, size: int) -> np.ndarray:
    c = np.pad(frame, ((1, 0), (1, 0))).cumsum(0).cumsum(1)
    return c[size:, size:] - c[:-size, size:] - c[size:, :-size] + c[:-size, :-size]


def _digit_mask(frame: np.ndarray, size: int) -> np.ndarray:
    """Dilated mask of the brightest connected blob that is not a filled
    ``size`` x ``size`` square."""
    peak = frame.max()
    if peak <= 0:
        return np.zeros(frame.shape, dtype=bool)
    labels, n = ndimage.label(frame > 0.5 * peak, structure=np.ones((3, 3)))
    best, best_mass = None, 0.0
    for lab, sl in enumerate(ndimage.find_objects(labels), start=1):
        comp = labels[sl] == lab
        squareish = comp.shape == (size, size) and comp.mean() > 0.9
        mass = float(frame[labels == lab].sum())
        if not squareish and mass > best_mass:
            best, best_mass = lab, mass
    if best is None:
        return np.zeros(frame.shape, dtype=bool)
    return ndimage.binary_dilation(labels == best, iterations=1)


def locate_block(frame, block_size: int) -> BlockDetection:
    """Matched filter: the ``block_size``-square window with the largest
    intensity sum once the digit blob is masked out."""
    frame = np.asarray(frame, dtype=np.float64)
    H, W = frame.shape
    if H < block_size or W < block_size:
        raise ValueError(f"frame {H}x{W} is smaller than the block ({block_size})")
    masked = np.where(_digit_mask(frame, block_size), 0.0, frame)
    sums = _window_sums(masked, block_size)
    if sums.max() <= 1e-9:
        sums = _window_sums(frame, block_size)
    y, x = np.unravel_index(int(np.argmax(sums)), sums.shape)
    return BlockDetection(BoxRegion(int(x), int(y), block_size, block_size), float(sums[y, x]))


def random_box_iou(truth: BoxRegion, frame_size: int, rng, n: int = 1) -> float:
    """Mean IoU of ``n`` uniformly placed boxes of the truth's size."""
    xs = rng.integers(0, frame_size - truth.w + 1, size=n)
    ys = rng.integers(0, frame_size - truth.h + 1, size=n)
    return float(np.mean([iou(BoxRegion(int(x), int(y), truth.w, truth.h), truth) for x, y in zip(xs, ys)]))


# ---------------------------------------------------------------------------
# fooling rate

def fooling_rate(discriminator: Callable, inputs: Sequence) -> float:
    """Fraction of ``inputs`` the discriminator scores above 0.5."""
    if len(inputs) == 0:
        raise ValueError("fooling_rate needs at least one input")
    scores = []
    for item in inputs:
        s = discriminator(*item) if isinstance(item, tuple) else discriminator(item)
        s = s.detach().numpy() if torch.is_tensor(s) else np.asarray(s, dtype=float)
        scores.append(np.atleast_1d(s))
    scores = np.concatenate(scores)
    return float((scores > 0.5).mean())


def seq_discriminator(model) -> Callable:
    """Adapter: (centre, audio_blocks, neighbourhood) arrays -> probabilities."""
    def score(centre, audio_blocks, neighbourhood):
        with torch.no_grad():
            return model.discriminate_seq(torch.as_tensor(centre), torch.as_tensor(audio_blocks),
                                          torch.as_tensor(neighbourhood))
    return score


def seq_contexts(frames, blocks, generated, seen: int, history: int, lookahead: int = 1) -> list[tuple]:
    """Discriminator inputs for each generated step with a full context.

    ``frames``/``blocks`` are (N, T, ...) real clips; ``generated`` the
    (N, T-F, H, W) frames for indices ``seen..T-1``.
    """
    frames = np.asarray(frames)
    blocks = np.asarray(blocks)
    generated = np.asarray(generated)
    T = frames.shape[1]
    out = []
    for j in range(seen, T):
        if j - history < 0 or j + lookahead - 1 > T - 1:
            continue
        neigh = np.concatenate([frames[:, j - history:j], frames[:, j + 1:j + lookahead]], axis=1)
        out.append((generated[:, j - seen], blocks[:, j - history:j + lookahead], neigh))
    return out


# ---------------------------------------------------------------------------
# rollouts and reports

def noise_for(seed: int, k: int, n: int, T: int, z_dim: int) -> torch.Tensor:
    """Standard-normal noise of rollout ``k``; independent of how many
    rollouts are drawn, so sample sets are nested."""
    g = torch.Generator().manual_seed(int(np.random.SeedSequence([seed, k]).generate_state(1)[0]))
    return torch.randn(n, T, z_dim, generator=g, dtype=dc.DTYPE)


def sample_rollouts(model, frames, blocks, seen: int, K: int, seed: int = 0, length: int | None = None,
                    chunk: int = 256) -> np.ndarray:
    """K inference rollouts per clip: (N, K, T-F, H, W)."""
    frames = torch.as_tensor(np.asarray(frames), dtype=dc.DTYPE)
    blocks = torch.as_tensor(np.asarray(blocks), dtype=dc.DTYPE)
    N = frames.shape[0]
    T = length or blocks.shape[1]
    z = model.cfg.z_dim
    noise = torch.stack([noise_for(seed, k, N, T, z) for k in range(K)], dim=1)  # (N, K, T, z)
    seen_rep = frames[:, :seen].unsqueeze(1).expand(N, K, seen, *frames.shape[2:])
    seen_rep = seen_rep.reshape(N * K, seen, *frames.shape[2:])
    blocks_rep = blocks[:, :T].unsqueeze(1).expand(N, K, *blocks[:, :T].shape[1:]).reshape(N * K, T, *blocks.shape[2:])
    noise = noise.reshape(N * K, T, z)
    outs = []
    with torch.no_grad():
        for s in range(0, N * K, chunk):
            r = model.rollout(seen_rep[s:s + chunk], blocks_rep[s:s + chunk], seen, mode="infer",
                              noise=noise[s:s + chunk], length=T)
            outs.append(r.frames.numpy())
    fs = frames.shape[-1]
    return np.concatenate(outs).reshape(N, K, T - seen, fs, fs)


@dataclass
class EvalReport:
    ssim: list[float]
    psnr: list[float]
    chosen: list[int]
    inter_ssim: dict = field(default_factory=dict)
    intra_ssim: dict = field(default_factory=dict)
    block_iou: float | None = None
    fooling_rate: float | None = None
    baseline_ssim: list[float] | None = None
    baseline_psnr: list[float] | None = None
    seen: int = 0

    def to_json(self) -> str:
        d = asdict(self)
        d["inter_ssim"] = {str(k): v for k, v in self.inter_ssim.items()}
        d["intra_ssim"] = {str(k): v for k, v in self.intra_ssim.items()}
        return json.dumps(d, indent=1)

    @classmethod
    def from_json(cls, text: str) -> "EvalReport":
        d = json.loads(text)
        d["inter_ssim"] = {int(k): v for k, v in d.get("inter_ssim", {}).items()}
        d["intra_ssim"] = {int(k): v for k, v in d.get("intra_ssim", {}).items()}
        return cls(**d)

    def write(self, out_dir) -> None:
        out = Path(out_dir)
        out.mkdir(parents=True, exist_ok=True)
        (out / "eval_report.json").write_text(self.to_json())
        with open(out / "per_frame.csv", "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(["frame", "ssim", "psnr", "baseline_ssim", "baseline_psnr"])
            for i, (s, p) in enumerate(zip(self.ssim, self.psnr)):
                bs = self.baseline_ssim[i] if self.baseline_ssim else ""
                bp = self.baseline_psnr[i] if self.baseline_psnr else ""
                w.writerow([self.seen + i + 1, s, p, bs, bp])
        if self.inter_ssim:
            with open(out / "diversity.csv", "w", newline="") as fh:
                w = csv.writer(fh)
                w.writerow(["K", "inter_ssim", "intra_ssim"])
                for k, v in self.inter_ssim.items():
                    w.writerow([k, v, self.intra_ssim.get(k, "")])


def copy_last_baseline(frames, seen: int, T: int) -> tuple[np.ndarray, np.ndarray]:
    """Per-frame SSIM/PSNR curves of repeating the last seen frame."""
    frames = np.asarray(frames)
    truth = frames[:, seen:T]
    rep = np.broadcast_to(frames[:, seen - 1:seen], truth.shape)
    return ssim_batch(rep, truth).mean(axis=0), psnr_batch(rep, truth).mean(axis=0)


def evaluate(model, frames, blocks, seen: int, K: int, seed: int = 0, length: int | None = None,
             rollouts: np.ndarray | None = None) -> tuple[EvalReport, np.ndarray]:
    """Best-of-K SSIM/PSNR curves averaged over clips. Returns the report
    and the chosen rollout per clip (N, T-F, H, W)."""
    frames = np.asarray(frames)
    T = length or np.asarray(blocks).shape[1]
    if rollouts is None:
        rollouts = sample_rollouts(model, frames, blocks, seen, K, seed, T)
    truth = frames[:, seen:T]
    ss, ps, chosen, best = [], [], [], []
    for n in range(len(frames)):
        idx, s, p = best_of_k(rollouts[n], truth[n])
        ss.append(s)
        ps.append(p)
        chosen.append(idx)
        best.append(rollouts[n, idx])
    bs, bp = copy_last_baseline(frames, seen, T)
    report = EvalReport(np.mean(ss, axis=0).tolist(), np.mean(ps, axis=0).tolist(), chosen,
                        baseline_ssim=bs.tolist(), baseline_psnr=bp.tolist(), seen=seen)
    return report, np.stack(best)


def av_mismatch_probe(model, frames, blocks, seen: int, K: int, seed: int = 0, pairing: Sequence[int] | None = None,
                      length: int | None = None) -> EvalReport:
    """Evaluate clip ``i``'s visual context with audio from clip
    ``pairing[i]`` (default ``i + 1`` cyclically) against clip ``i``'s truth."""
    frames = np.asarray(frames)
    blocks = np.asarray(blocks)
    n = len(frames)
    if n < 2:
        raise ValueError("the mismatch probe needs at least two clips")
    if pairing is None:
        pairing = [(i + 1) % n for i in range(n)]
    report, _ = evaluate(model, frames, blocks[list(pairing)], seen, K, seed, length)
    return report
