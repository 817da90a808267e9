import json
import math

import numpy as np
import pytest
from hypothesis import given, strategies as st

from avforecast import m3so
from avforecast.avfeat import frame_spectrograms
from avforecast.m3so import M3soConfig

NB = M3soConfig(frames_per_clip=30)
BLOCK = M3soConfig(frames_per_clip=30, seen_frames=5, block_enabled=True, block_frame=10)


def test_reflection_sign_at_right_wall():
    cfg = M3soConfig(max_turn_deg=30.0)
    hi = cfg.box_size - cfg.sprite_size
    p, v, kinds = m3so.advance([hi - 1.0, 10.0], [2.0, 0.0], cfg, np.random.default_rng(0))
    assert v[0] < 0 and kinds == ["wall"]
    assert math.hypot(*v) == pytest.approx(2.0, rel=1e-12)


def test_bounce_never_grazes():
    cfg = M3soConfig()
    rng = np.random.default_rng(0)
    hi = cfg.box_size - cfg.sprite_size
    for _ in range(200):
        _, v, _ = m3so.advance([hi - 0.5, 10.0], [2.0, 0.3], cfg, rng)
        assert -v[0] >= 2.0 * math.sin(m3so.MIN_BOUNCE_ANGLE) - 1e-12


def test_corner_hit_reflects_both_axes():
    cfg = M3soConfig()
    hi = cfg.box_size - cfg.sprite_size
    _, v, kinds = m3so.advance([hi - 1.0, hi - 1.0], [math.sqrt(2), math.sqrt(2)], cfg, np.random.default_rng(1))
    assert v[0] < 0 and v[1] < 0 and kinds.count("wall") == 2


@given(st.integers(0, 10 ** 6))
def test_trajectory_invariants(seed):
    cfg = BLOCK
    traj = m3so.synth_trajectory(cfg, np.random.default_rng(seed))
    hi = cfg.box_size - cfg.sprite_size
    assert np.all(traj.positions >= 0) and np.all(traj.positions <= hi)
    np.testing.assert_allclose(np.hypot(*traj.velocities.T), cfg.speed, rtol=1e-9)
    ev = {t for t, _ in traj.events}
    # rectilinear between events: constant displacement on event-free stretches
    for t in range(2, len(traj)):
        if t not in ev and t - 1 not in ev:
            d2 = traj.positions[t] - 2 * traj.positions[t - 1] + traj.positions[t - 2]
            assert np.abs(d2).max() < 1e-9
    # the block never covers the sprite when it appears, nor afterwards
    bx, by, b, _ = traj.block_box
    s = cfg.sprite_size
    for t in range(cfg.block_frame, len(traj)):
        x, y = traj.positions[t]
        overlap = min(x + s, bx + b) - max(x, bx), min(y + s, by + b) - max(y, by)
        assert min(overlap) <= 1e-9


def test_no_block_means_only_wall_events():
    for seed in range(30):
        traj = m3so.synth_trajectory(NB, np.random.default_rng(seed))
        assert traj.block_box is None
        assert {k for _, k in traj.events} <= {"wall"}


def test_block_events_occur():
    kinds = set()
    cfg = M3soConfig(frames_per_clip=80, block_enabled=True, block_frame=6, block_size=14)
    for seed in range(40):
        kinds |= {k for _, k in m3so.synth_trajectory(cfg, np.random.default_rng(seed)).events}
    assert "block" in kinds


def test_determinism():
    a, b = m3so.generate_clip(BLOCK, 7), m3so.generate_clip(BLOCK, 7)
    assert np.array_equal(a.video, b.video) and np.array_equal(a.audio, b.audio) and a.events == b.events


def test_render_empty_trajectory():
    traj = m3so.Trajectory(np.zeros((0, 2)), np.zeros((0, 2)))
    assert m3so.render_frames(traj, m3so.digit_glyph(3), 48).shape == (0, 48, 48)


def test_render_rejects_out_of_bounds():
    traj = m3so.Trajectory(np.array([[40.0, 0.0]]), np.zeros((1, 2)))
    with pytest.raises(ValueError, match="outside"):
        m3so.render_frames(traj, m3so.digit_glyph(3), 48)


def test_block_pixels_and_mass():
    clip = m3so.generate_clip(BLOCK, 3)
    sprite = m3so.digit_glyph(clip.digit)
    bx, by, b, _ = clip.block_box
    before, at = clip.video[BLOCK.block_frame - 1], clip.video[BLOCK.block_frame]
    assert np.isclose(before.sum(), sprite.sum())
    assert np.all(at[by:by + b, bx:bx + b] == 1.0)
    # direct rasterization oracle: sprite mass + block mass when disjoint
    assert at.sum() == pytest.approx(sprite.sum() + b * b, rel=1e-12)
    assert (at == 1.0).sum() >= b * b


def test_glyph_has_zero_border_and_distinct_digits():
    gs = [m3so.digit_glyph(d) for d in range(10)]
    for g in gs:
        assert g.shape == (16, 16) and g.max() <= 1.0 and g.min() >= 0.0
        assert g[0].sum() == g[-1].sum() == g[:, 0].sum() == g[:, -1].sum() == 0
    assert len({g.tobytes() for g in gs}) == 10


def test_amplitude_endpoint():
    assert m3so.amplitude(0.0, NB) == pytest.approx(NB.a_max)


def test_audio_length_and_range():
    clip = m3so.generate_clip(NB, 11)
    assert clip.audio.shape == (NB.frames_per_clip * NB.samples_per_frame,)
    assert np.abs(clip.audio).max() <= 1.0


def test_event_free_clip_constant_peak():
    cfg = M3soConfig(frames_per_clip=8)
    for seed in range(200):
        clip = m3so.generate_clip(cfg, seed)
        if not clip.events:
            break
    else:
        pytest.skip("no event-free clip found")
    blocks = frame_spectrograms(clip.audio, cfg.frames_per_clip).blocks
    peaks = blocks.max(axis=2).argmax(axis=1)
    assert len(set(peaks.tolist())) == 1
    assert peaks[0] == round(NB.carrier_freq(clip.digit) * 256 / NB.audio_rate)


def test_wall_event_frame_switches_tone():
    S = NB.samples_per_frame
    for seed in range(100):
        clip = m3so.generate_clip(NB, seed)
        walls = [t for t, k in clip.events if k == "wall"]
        if walls:
            t = walls[0]
            seg = clip.audio[t * S:t * S + 256]
            spec = np.abs(np.fft.rfft(seg * np.hanning(256)))
            assert spec.argmax() * NB.audio_rate / 256 == pytest.approx(NB.wall_freq, abs=NB.audio_rate / 256)
            return
    pytest.fail("no wall event in 100 clips")


def test_carrier_snap_whole_cycles():
    for d in range(10):
        f = NB.carrier_freq(d)
        assert abs(f - 440 * 2 ** (d / 12)) <= 5
        assert (f * NB.samples_per_frame / NB.audio_rate) == int(f * NB.samples_per_frame / NB.audio_rate)


def test_amplitude_monotone_in_distance():
    S = NB.samples_per_frame
    for seed in range(10):
        clip = m3so.generate_clip(NB, seed)
        d = m3so.origin_distance(clip.trajectory, NB)
        ev = {t for t, _ in clip.events}
        free = [t for t in range(NB.frames_per_clip) if t not in ev]
        rms = {t: np.sqrt(np.mean(clip.audio[t * S:(t + 1) * S] ** 2)) for t in free}
        for a in free:
            for b in free:
                if d[a] < d[b] - 1e-9:
                    assert rms[a] > rms[b]


def test_config_validation():
    with pytest.raises(ValueError, match="fit"):
        M3soConfig(box_size=17).validate()
    with pytest.raises(ValueError, match="block_frame"):
        M3soConfig(block_enabled=True, block_frame=2, seen_frames=5).validate()
    with pytest.raises(ValueError, match="digit_class"):
        M3soConfig(digit_class=12).validate()


def test_m3so_preset():
    cfg = M3soConfig.m3so()
    assert (cfg.frames_per_clip, cfg.seen_frames, cfg.block_frame, cfg.block_enabled) == (70, 30, 41, True)


def test_generate_dataset_layout_and_determinism(tmp_path):
    cfg = M3soConfig(frames_per_clip=12, seed=5)
    man = m3so.generate_dataset(cfg, {"train": 2, "val": 1, "test": 1}, tmp_path / "a")
    m3so.generate_dataset(cfg, {"train": 2, "val": 1, "test": 1}, tmp_path / "b")
    files = sorted((tmp_path / "a").rglob("*.m3so"))
    assert len(files) == 4 and sum(len(m["clips"]) for m in man.values()) == 4
    assert not (tmp_path / "a" / ".incomplete").exists()
    for f in files:
        other = tmp_path / "b" / f.relative_to(tmp_path / "a")
        assert f.read_bytes() == other.read_bytes()
    mj = json.loads((tmp_path / "a" / "val" / "manifest.json").read_text())
    assert mj["clips"][0]["seed"] == 5 + m3so.SPLIT_OFFSETS["val"]
    assert mj["config"]["origin"] == "lower-left"
    assert all(c["block_box"] is None for m in man.values() for c in m["clips"])


def test_clip_file_roundtrip(tmp_path):
    cfg = M3soConfig(frames_per_clip=8)
    m3so.generate_dataset(cfg, {"train": 2}, tmp_path)
    videos, audios, man = m3so.load_split(tmp_path, "train")
    clip = m3so.generate_clip(cfg, man["clips"][1]["seed"])
    assert videos.shape == (2, 8, 48, 48)
    assert np.array_equal(videos[1], np.round(clip.video * 255) / 255.0)
    assert np.abs(audios[1] - clip.audio).max() < 1.0 / 32767 + 1e-12
    raw = (tmp_path / "train" / "clip_00000.m3so").read_bytes()
    assert raw[:4] == b"M3SO"


def test_generate_dataset_failure_cleans_up(tmp_path):
    cfg = M3soConfig(frames_per_clip=8)
    with pytest.raises(ValueError, match="split"):
        m3so.generate_dataset(cfg, {"train": 1, "bogus": 1}, tmp_path)
    assert not list(tmp_path.rglob("*.m3so")) and not (tmp_path / ".incomplete").exists()


def test_idx_sprites(tmp_path):
    import struct
    imgs = np.zeros((3, 28, 28), dtype=np.uint8)
    imgs[:, 8:20, 10:18] = 255
    labels = np.array([1, 7, 1], dtype=np.uint8)
    (tmp_path / "i.idx").write_bytes(struct.pack(">IIII", 2051, 3, 28, 28) + imgs.tobytes())
    (tmp_path / "l.idx").write_bytes(struct.pack(">II", 2049, 3) + labels.tobytes())
    cfg = M3soConfig(frames_per_clip=6, sprite_source="idx", digit_class=7,
                     idx_images=str(tmp_path / "i.idx"), idx_labels=str(tmp_path / "l.idx"))
    clip = m3so.generate_clip(cfg, 0)
    assert clip.digit == 7 and clip.video.max() > 0.5
