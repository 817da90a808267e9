import json

import numpy as np
import pytest

from avforecast import toyrun
from avforecast.toyrun import ToyConfig


def test_config_key_tracks_config_and_kind():
    a = ToyConfig()
    assert toyrun.config_key(a, "trend") == toyrun.config_key(ToyConfig(), "trend")
    assert toyrun.config_key(a, "trend") != toyrun.config_key(a, "block")
    assert toyrun.config_key(a, "trend") != toyrun.config_key(ToyConfig(lr=1e-3), "trend")


def test_make_split_matches_stored_quantization():
    cfg = ToyConfig(total=8, seen=3).m3so(False)
    frames, blocks, clips = toyrun.make_split(cfg, "test", 2)
    assert frames.shape == (2, 8, 32, 32) and len(clips) == 2
    assert np.allclose(frames[0, 0] * 255, np.round(frames[0, 0] * 255))
    again, _, _ = toyrun.make_split(cfg, "test", 2)
    assert np.array_equal(frames, again)


def test_stale_trend_eval_is_redone_without_training(tmp_path, monkeypatch):
    cfg = ToyConfig()
    d = tmp_path / f"trend_{toyrun.config_key(cfg, 'trend')}"
    d.mkdir()
    old = {"epochs": 7, "train_seconds": 100.0, "wall_seconds": 130.0, "checkpoint": str(d / "best.ckpt"),
           "intra_ssim": {"5": 0.9}}
    (d / "results.json").write_text(json.dumps(old))
    monkeypatch.setattr(toyrun, "trend_run", lambda *a, **k: pytest.fail("retrained"))
    monkeypatch.setattr(toyrun, "trend_eval", lambda c, ckpt: {"eval_version": toyrun.EVAL_VERSION,
                                                               "eval_seconds": 20.0, "intra_ssim": {"2": 0.95}})
    res = toyrun.cached("trend", cfg, tmp_path, log=lambda m: None)
    assert res["epochs"] == 7 and res["intra_ssim"] == {"2": 0.95}
    assert res["wall_seconds"] == 150.0
    assert json.loads((d / "results.json").read_text())["eval_version"] == toyrun.EVAL_VERSION
    # now current: returned as is
    monkeypatch.setattr(toyrun, "trend_eval", lambda *a: pytest.fail("re-evaluated"))
    assert toyrun.cached("trend", cfg, tmp_path)["wall_seconds"] == 150.0
