import json

import numpy as np
import pytest
import torch
from hypothesis import given, strategies as st
from hypothesis.extra.numpy import arrays

from avforecast import evalkit as ek, m3so
from avforecast.evalkit import BlockDetection, BoxRegion, iou
from avforecast.net import AVPredictor

from conftest import random_batch, tiny_cfg

frames16 = arrays(np.float64, (16, 16), elements=st.floats(0, 1))


def ssim_bruteforce(a, b):
    """Loop over every 11x11 window with an explicit Gaussian weight."""
    g = np.exp(-0.5 * ((np.arange(11) - 5) / 1.5) ** 2)
    w = np.outer(g, g) / np.outer(g, g).sum()
    c1, c2 = 0.01 ** 2, 0.03 ** 2
    vals = []
    for i in range(a.shape[0] - 10):
        for j in range(a.shape[1] - 10):
            pa, pb = a[i:i + 11, j:j + 11], b[i:i + 11, j:j + 11]
            ma, mb = (w * pa).sum(), (w * pb).sum()
            va, vb = (w * (pa - ma) ** 2).sum(), (w * (pb - mb) ** 2).sum()
            cov = (w * (pa - ma) * (pb - mb)).sum()
            vals.append((2 * ma * mb + c1) * (2 * cov + c2) / ((ma ** 2 + mb ** 2 + c1) * (va + vb + c2)))
    return float(np.mean(vals))


@given(frames16)
def test_ssim_self_is_one(x):
    assert ek.ssim(x, x) == pytest.approx(1.0, abs=1e-12)


@given(frames16, frames16)
def test_ssim_symmetric_bounded_and_bruteforce(a, b):
    s = ek.ssim(a, b)
    assert abs(s - ek.ssim(b, a)) <= 1e-12
    assert -1.0 <= s <= 1.0
    assert s == pytest.approx(ssim_bruteforce(a, b), abs=1e-9)


def test_ssim_constant_floor():
    c1 = 0.01 ** 2
    assert ek.ssim(np.zeros((16, 16)), np.ones((16, 16))) == pytest.approx(c1 / (1 + c1), rel=1e-9)


def test_ssim_rejects():
    with pytest.raises(ValueError, match="differ"):
        ek.ssim(np.zeros((16, 16)), np.zeros((16, 17)))
    with pytest.raises(ValueError, match="11"):
        ek.ssim(np.zeros((8, 8)), np.zeros((8, 8)))


def test_psnr_examples():
    a = np.zeros((10, 10))
    assert ek.psnr(a, a + 0.1) == pytest.approx(20.0, abs=1e-9)
    assert ek.psnr(a, a) == 100.0
    with pytest.raises(ValueError):
        ek.psnr(a, np.zeros((10, 9)))


@given(frames16, frames16)
def test_psnr_bruteforce_and_range(a, b):
    mse = 0.0
    for i in range(16):
        for j in range(16):
            mse += (a[i, j] - b[i, j]) ** 2
    mse /= 256
    expect = 100.0 if mse < 1e-10 else min(100.0, max(0.0, 10 * np.log10(1 / mse)))
    p = ek.psnr(a, b)
    assert p >= 0 and abs(p - expect) <= 1e-9


def test_best_of_k_examples():
    truth = np.random.default_rng(0).random((3, 16, 16))
    one = truth[None] * 0.5
    assert ek.best_of_k(one, truth)[0] == 0
    r = np.random.default_rng(1).random((4, 3, 16, 16))
    r[2] = r[3] = truth
    idx, curve, pcurve = ek.best_of_k(r, truth)
    assert idx == 2 and np.allclose(curve, 1.0) and np.all(pcurve == 100.0)
    each = [ek.ssim_batch(x, truth).mean() for x in r]
    assert curve.mean() >= max(each) - 1e-15
    with pytest.raises(ValueError):
        ek.best_of_k(np.zeros((0, 3, 16, 16)), truth)


def test_diversity_identical_rollouts():
    x = np.random.default_rng(0).random((2, 16, 16))
    inter, intra = ek.diversity_curves(np.stack([x] * 5), x * 0.3, [1, 2, 5])
    assert set(intra) == {2, 5} and all(v == pytest.approx(1.0) for v in intra.values())
    assert inter[1] == inter[5]


@given(st.integers(0, 2 ** 31))
def test_inter_nondecreasing_and_intra_bruteforce(seed):
    r = np.random.default_rng(seed).random((6, 2, 16, 16))
    truth = np.random.default_rng(seed + 1).random((2, 16, 16))
    inter, intra = ek.diversity_curves(r, truth, [1, 2, 3, 6])
    vals = [inter[k] for k in (1, 2, 3, 6)]
    assert vals == sorted(vals)
    assert intra[3] == pytest.approx(ek.intra_ssim_bruteforce(r[:3]), abs=1e-12)
    pw = [ek.ssim_batch(r[i], r[j]).mean() for i, j in ((0, 1), (0, 2), (1, 2))]
    assert intra[3] == pytest.approx(np.mean(pw), abs=1e-12)


def test_diversity_rejects():
    r = np.zeros((3, 1, 16, 16))
    with pytest.raises(ValueError, match="ascending"):
        ek.diversity_curves(r, r[0], [3, 1])
    with pytest.raises(ValueError, match="rollouts"):
        ek.diversity_curves(r, r[0], [1, 5])


def test_iou_cases():
    a = BoxRegion(2, 3, 4, 4)
    assert iou(a, a) == 1.0
    assert iou(a, BoxRegion(10, 10, 4, 4)) == 0.0
    assert iou(a, BoxRegion(4, 3, 4, 4)) == pytest.approx(8 / 24)
    assert iou(BlockDetection(a, 0.0), a) == 0.0 and iou(None, a) == 0.0
    with pytest.raises(ValueError):
        BoxRegion(0, 0, 0, 3)


@given(st.integers(0, 20), st.integers(0, 20), st.integers(1, 10), st.integers(1, 10),
       st.integers(0, 20), st.integers(0, 20), st.integers(1, 10), st.integers(1, 10))
def test_iou_bounds_and_symmetry(x1, y1, w1, h1, x2, y2, w2, h2):
    a, b = BoxRegion(x1, y1, w1, h1), BoxRegion(x2, y2, w2, h2)
    v = iou(a, b)
    assert 0.0 <= v <= 1.0 and v == iou(b, a)


def test_locate_block_on_ground_truth_frames():
    cfg = m3so.M3soConfig(frames_per_clip=20, seen_frames=5, block_enabled=True, block_frame=10)
    for seed in range(10):
        clip = m3so.generate_clip(cfg, seed)
        bx, by, b, _ = clip.block_box
        det = ek.locate_block(clip.video[-1], cfg.block_size)
        assert iou(det, BoxRegion(bx, by, b, b)) == 1.0


def test_locate_block_black_and_small():
    det = ek.locate_block(np.zeros((32, 32)), 8)
    assert det.zero_score and iou(det, BoxRegion(0, 0, 8, 8)) == 0.0
    with pytest.raises(ValueError, match="smaller"):
        ek.locate_block(np.zeros((6, 6)), 8)


def test_random_box_baseline_is_low():
    v = ek.random_box_iou(BoxRegion(10, 10, 8, 8), 48, np.random.default_rng(0), n=500)
    assert 0.0 < v < 0.1


def test_fooling_rate_constants():
    xs = [np.zeros(3), np.zeros(2)]
    assert ek.fooling_rate(lambda x: np.zeros(len(x)), xs) == 0.0
    assert ek.fooling_rate(lambda x: np.ones(len(x)), xs) == 1.0
    assert ek.fooling_rate(lambda a, b: np.array([0.9, 0.1]), [(1, 2)]) == 0.5
    with pytest.raises(ValueError):
        ek.fooling_rate(lambda x: x, [])


def test_seq_contexts_feed_discriminator(tiny_model):
    c = tiny_model.cfg
    frames, blocks, _ = random_batch(c, 2, 7)
    gen = np.random.default_rng(0).random((2, 4, 16, 16))
    ctx = ek.seq_contexts(frames.numpy(), blocks.numpy(), gen, 3, c.history, c.lookahead)
    assert len(ctx) == 4
    rate = ek.fooling_rate(ek.seq_discriminator(tiny_model), ctx)
    assert 0.0 <= rate <= 1.0


def test_noise_is_nested():
    a = ek.noise_for(5, 3, 2, 6, 4)
    assert torch.equal(a, ek.noise_for(5, 3, 2, 6, 4)) and not torch.equal(a, ek.noise_for(5, 4, 2, 6, 4))


def test_sample_rollouts_nested_and_order_invariant(tiny_model):
    frames, blocks, _ = random_batch(tiny_model.cfg, 3, 6)
    r5 = ek.sample_rollouts(tiny_model, frames, blocks, 2, 5, seed=1, chunk=4)
    r3 = ek.sample_rollouts(tiny_model, frames, blocks, 2, 3, seed=1)
    assert r5.shape == (3, 5, 4, 16, 16)
    np.testing.assert_allclose(r5[:, :3], r3, rtol=0, atol=1e-12)
    rep, best = ek.evaluate(tiny_model, frames.numpy(), blocks.numpy(), 2, 5, rollouts=r5)
    perm = [2, 0, 1]
    rep_p, _ = ek.evaluate(tiny_model, frames.numpy()[perm], blocks.numpy()[perm], 2, 5, rollouts=r5[perm])
    np.testing.assert_allclose(rep.ssim, rep_p.ssim, rtol=1e-12)
    assert best.shape == (3, 4, 16, 16) and len(rep.ssim) == 4


def test_mismatch_probe_control_equals_evaluation(tiny_model):
    frames, blocks, _ = random_batch(tiny_model.cfg, 3, 6)
    f, b = frames.numpy(), blocks.numpy()
    control = ek.av_mismatch_probe(tiny_model, f, b, 2, 3, pairing=[0, 1, 2])
    standard, _ = ek.evaluate(tiny_model, f, b, 2, 3)
    assert control.ssim == standard.ssim and control.chosen == standard.chosen
    probe = ek.av_mismatch_probe(tiny_model, f, b, 2, 3)
    assert len(probe.ssim) == len(standard.ssim) and type(probe) is type(standard)
    with pytest.raises(ValueError, match="two"):
        ek.av_mismatch_probe(tiny_model, f[:1], b[:1], 2, 3)


def test_report_roundtrip(tmp_path):
    rep = ek.EvalReport([0.5, 0.4], [20.0, 18.0], [1, 0], {1: 0.3, 2: 0.4}, {2: 0.9}, 0.25, 0.6,
                        [0.45, 0.3], [19.0, 16.0], seen=5)
    assert ek.EvalReport.from_json(rep.to_json()) == rep
    rep.write(tmp_path)
    lines = (tmp_path / "per_frame.csv").read_text().splitlines()
    assert lines[1].startswith("6,0.5")
    assert (tmp_path / "diversity.csv").read_text().splitlines()[1] == "1,0.3,"
    assert json.loads((tmp_path / "eval_report.json").read_text())["block_iou"] == 0.25


def test_copy_last_baseline_perfect_for_static_clips():
    f = np.tile(np.random.default_rng(0).random((2, 1, 16, 16)), (1, 6, 1, 1))
    s, p = ek.copy_last_baseline(f, 3, 6)
    assert np.allclose(s, 1.0) and np.all(p == 100.0)
