import itertools

import numpy as np
import pytest

import fdtr as fd


def tiny_config(root, seed=11):
    cfg = fd.RunConfig()
    cfg.seed = seed
    for s in [
        "scene.canvas=64", "detector.input_size=64", "detector.hidden=16", "detector.queries=6",
        "detector.enc_layers=1", "detector.dec_layers=1", "detector.heads=2", "detector.points=2",
        "detector.ffn=32", "foundation.image_size=32", "foundation.dim=16", "foundation.depth=1",
        "foundation.heads=2", "train.epochs=1", "train.batch=2", "pretrain.epochs=1", "pretrain.batch=4",
    ]:
        cfg.set(s)
    cfg.n_images = 6
    cfg.data_dir = str(root / "train")
    cfg.val_dir = str(root / "val")
    cfg.out_dir = str(root / "run")
    return cfg


def test_box_iou_and_corners():
    a = fd.Box.from_corners(0.0, 0.0, 0.5, 0.5)
    assert a == fd.Box(0.25, 0.25, 0.5, 0.5)
    assert fd.box_iou(a, a) == 1.0
    assert fd.box_iou(a, fd.Box.from_corners(0.5, 0.5, 1.0, 1.0)) == 0.0


def test_hungarian_matches_brute_force():
    rng = np.random.default_rng(3)
    for _ in range(20):
        cost = rng.uniform(-1, 1, size=(4, 5))
        pairs, total = fd.hungarian_match(cost)
        best = min(sum(cost[r, c] for r, c in enumerate(p)) for p in itertools.permutations(range(5), 4))
        assert len(pairs) == 4
        assert total == pytest.approx(best, abs=1e-12)


def test_ap_of_perfect_detection():
    g = fd.GroundTruth([fd.Box.from_corners(0.1, 0.1, 0.5, 0.5)], [0])
    r = fd.compute_ap([[fd.Detection(g.boxes[0], 0, 0.9)]], [g])
    assert r.ap == 1.0
    assert fd.EvalReport.csv_header == "ap,ap50,ap75,aps,apm,apl,loc,cls,bg,fn"
    with pytest.raises(fd.ContractError):
        fd.compute_ap([[], []], [g])


def test_config_rejects_unknown_keys():
    cfg = fd.RunConfig()
    with pytest.raises(fd.ContractError):
        cfg.set("detector.nonsense=1")
    with pytest.raises(fd.IoError):
        fd.load_config("/nonexistent/config.ini")


def test_gen_pretrain_train_eval(tmp_path):
    cfg = tiny_config(tmp_path)
    cfg.resolve()
    fd.gen(cfg, cfg.data_dir)
    fd.gen(cfg, cfg.val_dir, val=True)
    with pytest.raises(fd.ContractError):
        fd.gen(cfg, cfg.data_dir)
    res = fd.pretrain(cfg, str(tmp_path / "f.ckpt"))
    assert res["steps"] > 0

    cfg.foundations = [str(tmp_path / "f.ckpt")]
    cfg.set("detector.image_queries=5")
    cfg.set("detector.fuse_patches=true")
    cfg.resolve()
    out = fd.train(cfg)
    assert out["evaluated"]
    assert out["foundation_hash_before"] == out["foundation_hash_after"]
    assert all(np.isfinite(out["step_losses"]))

    cfg.checkpoint = str(tmp_path / "run" / "detector.ckpt")
    cfg.data_dir = cfg.val_dir
    cfg.out_dir = str(tmp_path / "eval")
    a = fd.evaluate(cfg)
    b = fd.evaluate(cfg)
    assert a.as_dict() == b.as_dict()
    assert 0.0 <= a.ap <= 1.0
