"""Procedural M3SO / M3SO-NB clips: a digit bouncing in a box with a
position-modulated tone, and an optional obstacle that appears mid-clip.

Frame indices are 0-based throughout. Image coordinates put (0, 0) at the
top-left pixel; the tone amplitude decays with distance from the lower-left
corner of the box.
"""

from __future__ import annotations

import json
import math
import struct
import wave
from dataclasses import asdict, dataclass, field, replace
from pathlib import Path

import numpy as np
from scipy import ndimage

MAGIC = b"M3SO"
VERSION = 1
SPLIT_OFFSETS = {"train": 0, "val": 1_000_000, "test": 2_000_000}
MIN_BOUNCE_ANGLE = math.radians(10.0)


@dataclass(frozen=True)
class M3soConfig:
    box_size: int = 48
    sprite_size: int = 16
    frames_per_clip: int = 20
    seen_frames: int = 5
    fps: int = 10
    speed: float = 2.0
    digit_class: int | None = None  # None: drawn per clip
    sprite_source: str = "procedural"  # or "idx"
    idx_images: str | None = None
    idx_labels: str | None = None
    block_enabled: bool = False
    block_frame: int = 41  # 0-based; the 42nd frame
    block_size: int = 8
    audio_rate: int = 8000
    tone_base: float = 440.0
    wall_freq: float = 880.0
    block_freq: float = 1320.0
    a_max: float = 0.9
    d0: float | None = None  # default box_size / 2
    max_turn_deg: float = 30.0
    seed: int = 0

    @classmethod
    def m3so(cls, **kw) -> "M3soConfig":
        """Obstacle variant: 30 seen frames, block at the 42nd frame."""
        base = dict(frames_per_clip=70, seen_frames=30, block_enabled=True, block_frame=41)
        base.update(kw)
        return cls(**base)

    @property
    def samples_per_frame(self) -> int:
        return self.audio_rate // self.fps

    @property
    def origin_scale(self) -> float:
        return self.box_size / 2 if self.d0 is None else self.d0

    def validate(self) -> None:
        if self.sprite_size + 2 >= self.box_size:
            raise ValueError(f"sprite ({self.sprite_size}px) does not fit box ({self.box_size}px) with margin")
        if self.audio_rate % self.fps:
            raise ValueError("audio_rate must be a multiple of fps")
        if not 0 < self.seen_frames < self.frames_per_clip:
            raise ValueError("need 0 < seen_frames < frames_per_clip")
        if self.digit_class is not None and not 0 <= self.digit_class <= 9:
            raise ValueError(f"digit_class must be in 0..9, got {self.digit_class}")
        if self.sprite_source not in ("procedural", "idx"):
            raise ValueError(f"unknown sprite_source {self.sprite_source!r}")
        if self.speed <= 0:
            raise ValueError("speed must be positive")
        if self.block_enabled:
            if self.block_frame <= self.seen_frames - 1:
                raise ValueError("block_frame must fall in the unseen part of the clip")
            if self.block_size >= self.box_size:
                raise ValueError("block does not fit in the box")

    def carrier_freq(self, digit: int) -> float:
        # snapped to a multiple of fps so every frame segment holds whole cycles
        f = self.tone_base * 2.0 ** (digit / 12.0)
        return round(f / self.fps) * self.fps


@dataclass
class Trajectory:
    positions: np.ndarray  # (T, 2) top-left (x, y), float pixels
    velocities: np.ndarray  # (T, 2) velocity leaving each frame
    events: list[tuple[int, str]] = field(default_factory=list)
    block_box: tuple[int, int, int, int] | None = None
    block_frame: int | None = None

    def __len__(self) -> int:
        return len(self.positions)

    def event_kinds(self, t: int) -> set[str]:
        return {k for f, k in self.events if f == t}


@dataclass
class Clip:
    video: np.ndarray  # (T, H, W) in [0, 1]
    audio: np.ndarray  # (T * S,) in [-1, 1]
    events: list[tuple[int, str]]
    block_box: tuple[int, int, int, int] | None
    digit: int
    seed: int
    trajectory: Trajectory | None = None


# ---------------------------------------------------------------------------
# sprites

_FONT = {
    0: ["01110", "10001", "10011", "10101", "11001", "10001", "01110"],
    1: ["00100", "01100", "00100", "00100", "00100", "00100", "01110"],
    2: ["01110", "10001", "00001", "00010", "00100", "01000", "11111"],
    3: ["11111", "00010", "00100", "00010", "00001", "10001", "01110"],
    4: ["00010", "00110", "01010", "10010", "11111", "00010", "00010"],
    5: ["11111", "10000", "11110", "00001", "00001", "10001", "01110"],
    6: ["00110", "01000", "10000", "11110", "10001", "10001", "01110"],
    7: ["11111", "00001", "00010", "00100", "01000", "01000", "01000"],
    8: ["01110", "10001", "10001", "01110", "10001", "10001", "01110"],
    9: ["01110", "10001", "10001", "01111", "00001", "00010", "01100"],
}


def digit_glyph(digit: int, size: int = 16) -> np.ndarray:
    """Anti-aliased ``size`` x ``size`` glyph with a zero border of >= 1px."""
    bits = np.array([[c == "1" for c in row] for row in _FONT[digit]], dtype=float)
    inner = size - 2
    up = np.kron(bits, np.ones((3, 3)))  # 21 x 15
    zoom = inner / max(up.shape)
    glyph = ndimage.zoom(ndimage.gaussian_filter(up, 0.6), zoom, order=1)
    glyph = np.clip(glyph / glyph.max(), 0.0, 1.0)
    out = np.zeros((size, size))
    h, w = glyph.shape
    r, c = (size - h) // 2, (size - w) // 2
    out[r:r + h, c:c + w] = glyph
    out[0, :] = out[-1, :] = out[:, 0] = out[:, -1] = 0.0
    return out


def load_idx(path) -> np.ndarray:
    """Read an IDX file (MNIST format) into an ndarray."""
    data = Path(path).read_bytes()
    zero, dtype_code, ndim = struct.unpack(">HBB", data[:4])
    if zero != 0 or dtype_code != 0x08:
        raise ValueError(f"{path}: not an unsigned-byte IDX file")
    dims = struct.unpack(">" + "I" * ndim, data[4:4 + 4 * ndim])
    arr = np.frombuffer(data, dtype=np.uint8, offset=4 + 4 * ndim)
    if arr.size != int(np.prod(dims)):
        raise ValueError(f"{path}: payload size does not match header dims {dims}")
    return arr.reshape(dims)


def idx_sprite(images: np.ndarray, labels: np.ndarray, digit: int, size: int, rng) -> np.ndarray:
    pool = np.flatnonzero(labels == digit)
    if not len(pool):
        raise ValueError(f"no IDX images with label {digit}")
    img = images[rng.choice(pool)].astype(float) / 255.0
    sprite = np.clip(ndimage.zoom(img, (size - 2) / img.shape[0], order=1), 0.0, 1.0)
    out = np.zeros((size, size))
    h, w = sprite.shape
    out[1:1 + h, 1:1 + w] = sprite[: size - 2, : size - 2]
    return out


# ---------------------------------------------------------------------------
# motion

def _rotate(v: np.ndarray, ang: float) -> np.ndarray:
    c, s = math.cos(ang), math.sin(ang)
    return np.array([c * v[0] - s * v[1], s * v[0] + c * v[1]])


def _bounce(v: np.ndarray, normals: list[np.ndarray], rng, max_turn: float) -> np.ndarray:
    """Reflect off every surface normal, then turn by a random angle while
    keeping the direction pointing away from each surface."""
    for n in normals:
        v = v - 2 * np.dot(v, n) * n
    speed = float(np.hypot(*v))
    turned = _rotate(v, rng.uniform(-max_turn, max_turn))
    if all(np.dot(turned, n) >= speed * math.sin(MIN_BOUNCE_ANGLE) for n in normals):
        return turned
    return v


def _block_hit(p, v, tau, rect):
    """Earliest entry time of point ``p`` moving at ``v`` into the open
    rectangle ``rect`` = (x0, y0, x1, y1), or None."""
    t_in, t_out, axis = -math.inf, math.inf, None
    for k in range(2):
        lo, hi = rect[k], rect[k + 2]
        if v[k] == 0:
            if not lo < p[k] < hi:
                return None
            continue
        a, b = (lo - p[k]) / v[k], (hi - p[k]) / v[k]
        a, b = min(a, b), max(a, b)
        if a > t_in:
            t_in, axis = a, k
        t_out = min(t_out, b)
    if axis is None or t_in >= t_out or t_in < -1e-9 or t_in > tau:
        return None
    return max(t_in, 0.0), axis


def advance(p, v, cfg: M3soConfig, rng, block: tuple[int, int, int, int] | None = None):
    """Move one frame interval. Returns (position, velocity, event kinds)."""
    p = np.array(p, dtype=float)
    v = np.array(v, dtype=float)
    hi = cfg.box_size - cfg.sprite_size
    s = cfg.sprite_size
    max_turn = math.radians(cfg.max_turn_deg)
    kinds: list[str] = []
    tau = 1.0
    rect = None
    if block is not None:
        bx, by, bw, bh = block
        rect = (bx - s, by - s, bx + bw, by + bh)
    for _ in range(16):
        best_t, hit = math.inf, None
        for k in range(2):
            if v[k] > 0:
                t = (hi - p[k]) / v[k]
                wall = (k, hi, -1.0)
            elif v[k] < 0:
                t = -p[k] / v[k]
                wall = (k, 0.0, 1.0)
            else:
                continue
            t = max(t, 0.0)
            if t <= tau and t < best_t - 1e-12:
                best_t, hit = t, [("wall",) + wall]
            elif t <= tau and abs(t - best_t) <= 1e-12:
                hit.append(("wall",) + wall)
        if rect is not None:
            bh_ = _block_hit(p, v, tau, rect)
            if bh_ is not None and bh_[0] <= best_t:
                t, k = bh_
                face = rect[k] if v[k] > 0 else rect[k + 2]
                sign = -1.0 if v[k] > 0 else 1.0
                hit = [("block", k, face, sign)]
                best_t = t
        if hit is None:
            p = p + v * tau
            break
        p = p + v * best_t
        normals = []
        for kind, k, coord, sign in hit:
            p[k] = coord
            n = np.zeros(2)
            n[k] = sign
            normals.append(n)
            kinds.append(kind)
        v = _bounce(v, normals, rng, max_turn)
        tau -= best_t
    np.clip(p, 0.0, hi, out=p)
    return p, v, kinds


def _place_block(p, cfg: M3soConfig, rng) -> tuple[int, int, int, int]:
    b, s = cfg.block_size, cfg.sprite_size
    cands = [
        (bx, by)
        for by in range(cfg.box_size - b + 1)
        for bx in range(cfg.box_size - b + 1)
        if not (bx - s < p[0] < bx + b and by - s < p[1] < by + b)
    ]
    bx, by = cands[rng.integers(len(cands))]
    return int(bx), int(by), b, b


def synth_trajectory(cfg: M3soConfig, rng) -> Trajectory:
    cfg.validate()
    T = cfg.frames_per_clip
    hi = cfg.box_size - cfg.sprite_size
    pos = np.zeros((T, 2))
    vel = np.zeros((T, 2))
    p = rng.uniform(0.0, hi, size=2)
    ang = rng.uniform(0.0, 2 * math.pi)
    v = cfg.speed * np.array([math.cos(ang), math.sin(ang)])
    events: list[tuple[int, str]] = []
    block = None
    for t in range(T):
        if t > 0:
            p, v, kinds = advance(p, v, cfg, rng, block)
            events.extend((t, k) for k in kinds)
        if cfg.block_enabled and t == cfg.block_frame:
            block = _place_block(p, cfg, rng)
        pos[t], vel[t] = p, v
    return Trajectory(pos, vel, events, block, cfg.block_frame if block is not None else None)


# ---------------------------------------------------------------------------
# rendering and audio

def render_frames(traj: Trajectory, sprite: np.ndarray, box_size: int) -> np.ndarray:
    T = len(traj)
    s = sprite.shape[0]
    video = np.zeros((T, box_size, box_size))
    for t in range(T):
        x, y = (int(math.floor(c + 0.5)) for c in traj.positions[t])
        if not (0 <= x <= box_size - s and 0 <= y <= box_size - s):
            raise ValueError(f"frame {t}: sprite position ({x}, {y}) outside the box")
        frame = video[t]
        if traj.block_box is not None and t >= traj.block_frame:
            bx, by, bw, bh = traj.block_box
            frame[by:by + bh, bx:bx + bw] = 1.0
        patch = frame[y:y + s, x:x + s]
        patch[...] = sprite + (1.0 - sprite) * patch
    return video


def amplitude(d, cfg: M3soConfig):
    return cfg.a_max * cfg.origin_scale / (cfg.origin_scale + d)


def origin_distance(traj: Trajectory, cfg: M3soConfig) -> np.ndarray:
    """Distance of the sprite centre from the box's lower-left corner."""
    c = traj.positions + cfg.sprite_size / 2.0
    return np.hypot(c[:, 0], cfg.box_size - c[:, 1])


def frame_frequencies(traj: Trajectory, cfg: M3soConfig, digit: int) -> np.ndarray:
    fc = cfg.carrier_freq(digit)
    freqs = np.full(len(traj), fc)
    for t, kind in traj.events:
        if kind == "block":
            freqs[t] = cfg.block_freq
        elif freqs[t] != cfg.block_freq:
            freqs[t] = cfg.wall_freq
    return freqs


def synth_audio(traj: Trajectory, cfg: M3soConfig, digit: int) -> np.ndarray:
    """Tone at the digit's carrier; an event frame's whole segment switches
    to the wall or block tone. Amplitude is held per frame."""
    S = cfg.samples_per_frame
    n = np.arange(S) / cfg.audio_rate
    amp = amplitude(origin_distance(traj, cfg), cfg)
    freqs = frame_frequencies(traj, cfg, digit)
    segs = amp[:, None] * np.sin(2 * np.pi * freqs[:, None] * n[None, :])
    return segs.reshape(-1)


def generate_clip(cfg: M3soConfig, seed: int, idx_data=None) -> Clip:
    rng = np.random.default_rng(seed)
    digit = int(rng.integers(10)) if cfg.digit_class is None else cfg.digit_class
    if cfg.sprite_source == "idx":
        if idx_data is None:
            idx_data = (load_idx(cfg.idx_images), load_idx(cfg.idx_labels))
        sprite = idx_sprite(*idx_data, digit, cfg.sprite_size, rng)
    else:
        sprite = digit_glyph(digit, cfg.sprite_size)
    traj = synth_trajectory(cfg, rng)
    video = render_frames(traj, sprite, cfg.box_size)
    audio = synth_audio(traj, cfg, digit)
    return Clip(video, audio, list(traj.events), traj.block_box, digit, seed, traj)


# ---------------------------------------------------------------------------
# files

def write_clip(path, clip: Clip, audio_rate: int) -> None:
    """Video container plus a 16-bit PCM WAV next to it."""
    path = Path(path)
    T, H, W = clip.video.shape
    frames = np.round(np.clip(clip.video, 0, 1) * 255).astype(np.uint8)
    with open(path, "wb") as fh:
        fh.write(MAGIC + bytes([VERSION]) + struct.pack("<III", T, H, W))
        fh.write(frames.tobytes())
    pcm = np.round(np.clip(clip.audio, -1, 1) * 32767).astype("<i2")
    with wave.open(str(path.with_suffix(".wav")), "wb") as w:
        w.setnchannels(1)
        w.setsampwidth(2)
        w.setframerate(audio_rate)
        w.writeframes(pcm.tobytes())


def read_video(path) -> np.ndarray:
    data = Path(path).read_bytes()
    if data[:4] != MAGIC:
        raise ValueError(f"{path}: bad magic")
    if data[4] != VERSION:
        raise ValueError(f"{path}: unsupported version {data[4]}")
    T, H, W = struct.unpack("<III", data[5:17])
    if len(data) != 17 + T * H * W:
        raise ValueError(f"{path}: payload length does not match dims {T}x{H}x{W}")
    return np.frombuffer(data, dtype=np.uint8, offset=17).reshape(T, H, W) / 255.0


def read_wav(path) -> tuple[np.ndarray, int]:
    with wave.open(str(path), "rb") as w:
        if w.getsampwidth() != 2 or w.getnchannels() != 1:
            raise ValueError(f"{path}: expected mono 16-bit PCM")
        rate = w.getframerate()
        pcm = np.frombuffer(w.readframes(w.getnframes()), dtype="<i2")
    return pcm / 32767.0, rate


def _config_dict(cfg: M3soConfig) -> dict:
    d = asdict(cfg)
    d["origin"] = "lower-left"
    return d


def generate_dataset(cfg: M3soConfig, counts: dict[str, int], out_dir) -> dict:
    """Write ``<out_dir>/<split>/clip_XXXXX.{m3so,wav}`` and one
    ``manifest.json`` per split. Clip ``i`` of a split uses seed
    ``cfg.seed + offset(split) + i``."""
    cfg.validate()
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    marker = out / ".incomplete"
    marker.write_text("generation in progress\n")
    written: list[Path] = []
    idx_data = None
    if cfg.sprite_source == "idx":
        idx_data = (load_idx(cfg.idx_images), load_idx(cfg.idx_labels))
    manifests = {}
    try:
        for split, n in counts.items():
            if split not in SPLIT_OFFSETS:
                raise ValueError(f"unknown split {split!r}")
            sdir = out / split
            sdir.mkdir(exist_ok=True)
            entries = []
            for i in range(n):
                seed = cfg.seed + SPLIT_OFFSETS[split] + i
                clip = generate_clip(cfg, seed, idx_data)
                name = f"clip_{i:05d}"
                written += [sdir / f"{name}.m3so", sdir / f"{name}.wav"]
                write_clip(sdir / f"{name}.m3so", clip, cfg.audio_rate)
                entries.append({
                    "file": f"{name}.m3so",
                    "audio": f"{name}.wav",
                    "seed": seed,
                    "digit": clip.digit,
                    "block_box": list(clip.block_box) if clip.block_box else None,
                    "events": [[t, k] for t, k in clip.events],
                })
            manifest = {"split": split, "master_seed": cfg.seed, "config": _config_dict(cfg), "clips": entries}
            mpath = sdir / "manifest.json"
            written.append(mpath)
            mpath.write_text(json.dumps(manifest, indent=1))
            manifests[split] = manifest
    except BaseException:
        for f in written:
            f.unlink(missing_ok=True)
        marker.unlink(missing_ok=True)
        raise
    marker.unlink()
    return manifests


def load_split(data_dir, split: str):
    """Returns (videos (N, T, H, W), audios (N, T*S), manifest)."""
    sdir = Path(data_dir) / split
    mpath = sdir / "manifest.json"
    if not mpath.exists():
        raise FileNotFoundError(f"no manifest at {mpath}")
    manifest = json.loads(mpath.read_text())
    videos, audios = [], []
    for e in manifest["clips"]:
        videos.append(read_video(sdir / e["file"]))
        audios.append(read_wav(sdir / e["audio"])[0])
    return np.stack(videos), np.stack(audios), manifest


def config_from_dict(d: dict) -> M3soConfig:
    d = {k: v for k, v in d.items() if k != "origin"}
    return M3soConfig(**d)


def with_overrides(cfg: M3soConfig, **kw) -> M3soConfig:
    return replace(cfg, **kw)
