import csv
import json

import numpy as np
import pytest
import torch

from avforecast import diffcore as dc
from avforecast.diffcore import CheckpointError, NonFiniteError
from avforecast.net import AVPredictor
from avforecast.trainer import (StepStates, TrainConfig, Trainer, gamma_schedule, load_model, prepare_clips,
                                 read_pgm, step_rng, teacher_gate, train_step, write_pgm)

from conftest import tiny_cfg

T_, F_ = 8, 3


def toy_set(n, seed=0, T=T_):
    """Squares sliding across a 16x16 frame; audio blocks encode position."""
    r = np.random.default_rng(seed)
    frames = np.zeros((n, T, 16, 16))
    blocks = np.zeros((n, T, 8, 3))
    for i in range(n):
        x, y = r.integers(0, 12, 2)
        vx, vy = r.choice([-1, 1], 2)
        for t in range(T):
            frames[i, t, y:y + 4, x:x + 4] = 1.0
            blocks[i, t, x // 2, 0] = blocks[i, t, y // 2, 1] = 1.0
            if not 0 <= x + vx <= 12:
                vx = -vx
            if not 0 <= y + vy <= 12:
                vy = -vy
            x, y = x + vx, y + vy
    return frames, blocks


def tcfg(**kw):
    base = dict(seen=F_, total=T_, batch_size=4, lr=2e-3)
    base.update(kw)
    return TrainConfig(**base)


def test_gamma_schedule_steps():
    cfg = TrainConfig()
    assert [gamma_schedule(e, cfg) for e in (0, 299, 300, 599, 600)] == pytest.approx([1e-4, 1e-4, 1e-3, 1e-3, 1e-2])
    with pytest.raises(ValueError):
        gamma_schedule(-1, cfg)


def test_teacher_gate():
    rng = np.random.default_rng(0)
    assert all(teacher_gate(500, rng, TrainConfig()) for _ in range(20))
    b = TrainConfig(teacher_forcing="bernoulli", tf_p=0.3, tf_warmup=10)
    assert all(teacher_gate(9, rng, b) for _ in range(20))
    draws = [teacher_gate(10, rng, b) for _ in range(4000)]
    assert np.mean(draws) == pytest.approx(0.3, abs=0.03)


@pytest.mark.parametrize("kw", [dict(seen=5, total=5), dict(lr=-1.0), dict(tf_p=1.5), dict(batch_size=1),
                                dict(teacher_forcing="always")])
def test_config_rejects(kw):
    with pytest.raises(ValueError):
        TrainConfig(**kw)


def test_step_rng_is_keyed():
    a, b, c = step_rng(0, 1, 2).random(), step_rng(0, 1, 2).random(), step_rng(0, 2, 1).random()
    assert a == b and a != c


def test_zero_lr_leaves_params():
    m = AVPredictor(tiny_cfg(), seed=0)
    f, b = toy_set(4)
    before = {k: v.clone() for k, v in m.params.trainable().items()}
    train_step(m, f, b, StepStates.fresh(m), tcfg(lr=0.0), 0)
    for k, v in m.params.trainable().items():
        assert torch.equal(v, before[k]), k


def test_step_determinism_and_separate_states():
    f, b = toy_set(4)
    out = []
    for _ in range(2):
        m = AVPredictor(tiny_cfg(), seed=0)
        st = StepStates.fresh(m)
        lb = [train_step(m, f, b, st, tcfg(), 0, s) for s in range(2)]
        out.append((lb, m.params.arrays(), st))
    assert [x.row() for x in out[0][0]] == [x.row() for x in out[1][0]]
    for k, v in out[0][1].items():
        assert np.array_equal(v, out[1][1][k]), k
    st = out[0][2]
    assert set(st.gen.m).isdisjoint(st.disc.m) and st.gen.step == st.disc.step == 2
    assert all(k.startswith(("dstd.", "dseq.")) for k in st.disc.m)


def test_nonfinite_loss_restores_everything():
    m = AVPredictor(tiny_cfg(), seed=0)
    f, b = toy_set(4)
    st = StepStates.fresh(m)
    train_step(m, f, b, st, tcfg(), 0)
    params = {k: v.copy() for k, v in m.params.arrays().items()}
    moments = {k: v.clone() for k, v in st.disc.m.items()}
    f = f.copy()
    f[:, -1] = np.nan
    with pytest.raises(NonFiniteError):
        train_step(m, f, b, st, tcfg(), 0, 1)
    for k, v in m.params.arrays().items():
        assert np.array_equal(v, params[k], equal_nan=True), k
    assert st.gen.step == st.disc.step == 1
    assert all(torch.equal(v, moments[k]) for k, v in st.disc.m.items())


def test_training_reduces_reconstruction():
    m = AVPredictor(tiny_cfg(), seed=0)
    tr = Trainer(m, tcfg(batch_size=5, lr=3e-3), toy_set(20))
    first = np.mean([lb.recon for lb in tr.run_epoch()])
    for _ in range(49):
        last = tr.run_epoch()
    assert tr.global_step == 200
    assert np.mean([lb.recon for lb in last]) <= 0.7 * first


def test_batches_cover_training_set():
    tr = Trainer(AVPredictor(tiny_cfg(), seed=0), tcfg(batch_size=4), toy_set(9))
    bs = tr.batches(0)
    assert sorted(np.concatenate(bs).tolist()) == list(range(9))
    assert min(len(x) for x in bs) >= 2
    assert [x.tolist() for x in bs] == [x.tolist() for x in tr.batches(0)]
    assert [x.tolist() for x in bs] != [x.tolist() for x in tr.batches(1)]


def test_checkpoint_roundtrip_and_resume(tmp_path):
    data = toy_set(8)
    full = Trainer(AVPredictor(tiny_cfg(), seed=0), tcfg(), data, out_dir=tmp_path / "full")
    full.fit(3)

    part = Trainer(AVPredictor(tiny_cfg(), seed=0), tcfg(), data, out_dir=tmp_path / "part")
    part.fit(1)
    resumed = Trainer(AVPredictor(tiny_cfg(), seed=9), tcfg(), data, out_dir=tmp_path / "part")
    resumed.restore(tmp_path / "part" / "last.ckpt")
    assert resumed.epoch == 1 and resumed.global_step == 2
    resumed.fit(3)
    for k, v in full.model.params.arrays().items():
        assert np.array_equal(v, resumed.model.params.arrays()[k]), k
    assert [lb.row() for _, _, lb in full.history[2:]] == [lb.row() for _, _, lb in resumed.history]

    model, states, meta = load_model(tmp_path / "full" / "last.ckpt")
    assert meta["epoch"] == 3 and states.gen.step == 6
    for k, v in model.params.arrays().items():
        assert np.array_equal(v, full.model.params.arrays()[k]), k

    rows = list(csv.reader(open(tmp_path / "full" / "train_log.csv")))
    assert rows[0] == ["epoch", "step", "recon", "kl", "adv_g", "total_g", "total_d"] and len(rows) == 7
    assert json.loads((tmp_path / "full" / "train_summary.json").read_text())["global_step"] == 6


def test_identical_runs_identical_checkpoints(tmp_path):
    data = toy_set(6)
    for name in ("a", "b"):
        Trainer(AVPredictor(tiny_cfg(), seed=0), tcfg(), data, out_dir=tmp_path / name).fit(1)
    assert (tmp_path / "a" / "last.ckpt").read_bytes() == (tmp_path / "b" / "last.ckpt").read_bytes()


def test_truncated_checkpoint_rejected(tmp_path):
    tr = Trainer(AVPredictor(tiny_cfg(), seed=0), tcfg(), toy_set(4))
    tr.save(tmp_path / "x.ckpt")
    raw = (tmp_path / "x.ckpt").read_bytes()
    (tmp_path / "y.ckpt").write_bytes(raw[: len(raw) // 2])
    with pytest.raises(CheckpointError):
        load_model(tmp_path / "y.ckpt")
    with pytest.raises(CheckpointError):
        tr.restore(tmp_path / "y.ckpt")


def test_resume_needs_optimizer_state(tmp_path):
    m = AVPredictor(tiny_cfg(), seed=0)
    dc.save_checkpoint(tmp_path / "w.ckpt", m.params.arrays(), None, {"net": m.cfg.to_dict()})
    tr = Trainer(m, tcfg(), toy_set(4))
    with pytest.raises(CheckpointError, match="optimizer"):
        tr.restore(tmp_path / "w.ckpt")


def test_validation_writes_best(tmp_path):
    data, val = toy_set(4), toy_set(3, seed=1)
    tr = Trainer(AVPredictor(tiny_cfg(), seed=0), tcfg(val_every=1, val_k=2, sample_every=1), data, val=val,
                 out_dir=tmp_path)
    tr.fit(1)
    assert (tmp_path / "best.ckpt").exists() and np.isfinite(tr.best_val)
    assert len(list((tmp_path / "samples" / "epoch_0001").glob("*.pgm"))) == T_ - F_


def test_pgm_roundtrip(tmp_path):
    f = np.linspace(0, 1, 48 * 48).reshape(48, 48)
    write_pgm(tmp_path / "a.pgm", f)
    assert np.array_equal(read_pgm(tmp_path / "a.pgm"), np.round(f * 255).astype(np.uint8))


def test_prepare_clips_scales_uint8_only():
    v = np.full((2, 6, 48, 48), 255, dtype=np.uint8)
    a = np.zeros((2, 6 * 800))
    f8, blocks = prepare_clips(v, a, 5)
    ff, _ = prepare_clips(v.astype(np.float64) / 255.0, a, 5)
    assert f8.shape == (2, 5, 48, 48) and f8.max() == 1.0 and np.array_equal(f8, ff)
    assert blocks.shape[:2] == (2, 5)
