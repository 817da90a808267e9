"""Per-frame STFT blocks and sinusoidal position codes."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from scipy.signal import get_window


@dataclass(frozen=True)
class StftConfig:
    window: int = 256
    hop: int = 64
    nfft: int = 256
    audio_rate: int = 8000
    fps: int = 10
    log_scale: bool = False

    @property
    def samples_per_frame(self) -> int:
        return self.audio_rate // self.fps

    @property
    def block_shape(self) -> tuple[int, int]:
        s = max(self.samples_per_frame, self.window)
        return self.nfft // 2, (s - self.window) // self.hop + 1


@dataclass
class SpectrogramSeq:
    blocks: np.ndarray  # (T, d_HA, d_WA)
    params: StftConfig

    def __len__(self) -> int:
        return len(self.blocks)


def hann(window: int) -> np.ndarray:
    return get_window("hann", window, fftbins=True)


def _columns(wave: np.ndarray, window: int, hop: int) -> np.ndarray:
    n = (len(wave) - window) // hop + 1
    idx = np.arange(window)[None, :] + hop * np.arange(n)[:, None]
    return wave[idx]


def stft(wave, window: int = 256, hop: int = 64, nfft: int = 256) -> np.ndarray:
    """Hann-windowed magnitude STFT, shape (nfft // 2, num_hops).

    One-sided, Nyquist bin dropped; frames shorter than ``nfft`` are
    zero-padded.
    """
    wave = np.asarray(wave, dtype=np.float64)
    if wave.ndim != 1:
        raise ValueError(f"stft expects a 1-d waveform, got shape {wave.shape}")
    if len(wave) < window:
        raise ValueError(f"waveform of {len(wave)} samples is shorter than the window ({window})")
    if nfft < window:
        raise ValueError(f"nfft ({nfft}) must be >= window ({window})")
    cols = _columns(wave, window, hop) * hann(window)
    spec = np.abs(np.fft.rfft(cols, n=nfft, axis=-1))[:, : nfft // 2]
    return spec.T


def frame_spectrograms(audio, num_frames: int, cfg: StftConfig = StftConfig()) -> SpectrogramSeq:
    """Split ``audio`` into ``num_frames`` equal segments and STFT each."""
    audio = np.asarray(audio, dtype=np.float64)
    s = cfg.samples_per_frame
    if len(audio) != num_frames * s:
        raise ValueError(f"audio has {len(audio)} samples, expected {num_frames} x {s} = {num_frames * s}")
    seg = audio.reshape(num_frames, s)
    if s < cfg.window:
        seg = np.pad(seg, ((0, 0), (0, cfg.window - s)))
    blocks = np.stack([stft(x, cfg.window, cfg.hop, cfg.nfft) for x in seg]) if num_frames else np.zeros((0, *cfg.block_shape))
    if cfg.log_scale:
        blocks = np.log1p(blocks)
    return SpectrogramSeq(blocks, cfg)


def position_encode(pos: int, d: int) -> np.ndarray:
    if d % 2:
        raise ValueError(f"position code dimension must be even, got {d}")
    if pos < 0:
        raise ValueError("position must be non-negative")
    return position_table(pos + 1, d)[pos]


def position_table(length: int, d: int) -> np.ndarray:
    """Rows are codes for positions 0..length-1: sin on even, cos on odd entries."""
    if d % 2:
        raise ValueError(f"position code dimension must be even, got {d}")
    pos = np.arange(length, dtype=np.float64)[:, None]
    rate = 10000.0 ** (np.arange(0, d, 2, dtype=np.float64) / d)
    table = np.empty((length, d))
    table[:, 0::2] = np.sin(pos / rate)
    table[:, 1::2] = np.cos(pos / rate)
    return table


def dump_block_csv(block: np.ndarray, path) -> None:
    np.savetxt(path, block, delimiter=",", fmt="%.8g")
