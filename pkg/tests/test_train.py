import hashlib
import json
import math

import numpy as np
import pytest
import torch
from hypothesis import given, strategies as st

from picodet.augment import AugmentConfig, augment, hflip, resize
from picodet.config import resolve_config
from picodet.schedule import EmaState, cosine_lr, ema_update, lr_at
from picodet.trainer import Trainer, TrainingDiverged, param_groups, train


def tiny_cfg(**train):
    t = {"lr0": 0.01, "scale_lr_by_batch": False, "iterations": 1, "batch_size": 2, "input_sizes": [64],
         "eval_size": 64, "warmup_iters": 0, "augment": False, "ema_decay": 0.9}
    t.update(train)
    return resolve_config({
        "model": {"num_classes": 3, "width_multiplier": 0.25, "channel_ratios": None, "neck_out_channels": 16,
                  "num_levels": 3},
        "train": t,
        "data": {"synthetic": {"num_images": 2, "image_size": 64, "seed": 0}},
    })


# -- schedule ----------------------------------------------------------------

class TestSchedule:
    def test_endpoints(self):
        assert cosine_lr(0, 100, 0.4) == 0.4
        assert cosine_lr(100, 100, 0.4) == pytest.approx(0.0, abs=1e-15)
        assert cosine_lr(50, 100, 0.4) == pytest.approx(0.2)

    def test_out_of_range(self):
        with pytest.raises(ValueError):
            cosine_lr(101, 100, 0.1)

    def test_warmup(self):
        assert lr_at(0, 1000, 1.0, 100, 0.1) == pytest.approx(0.1)
        assert lr_at(50, 1000, 1.0, 100, 0.1) == pytest.approx(0.55 * cosine_lr(50, 1000, 1.0))
        assert lr_at(100, 1000, 1.0, 100, 0.1) == cosine_lr(100, 1000, 1.0)

    @given(st.integers(1, 500), st.floats(1e-4, 1.0))
    def test_monotone_after_warmup(self, total, lr0):
        lrs = [lr_at(s, total, lr0) for s in range(total + 1)]
        assert all(a >= b for a, b in zip(lrs, lrs[1:]))


class TestEma:
    def test_formula(self):
        st_ = EmaState.from_weights({"w": torch.ones(3)}, decay=0.9)
        ema_update(st_, {"w": torch.zeros(3)})
        assert torch.allclose(st_.shadow["w"], torch.full((3,), 0.9))

    def test_forget_step_resets(self):
        st_ = EmaState.from_weights({"w": torch.ones(1)}, decay=0.9, forget_step=3)
        for v in (0.0, 0.0, 5.0):
            ema_update(st_, {"w": torch.tensor([v])})
        assert st_.shadow["w"].item() == 5.0
        ema_update(st_, {"w": torch.tensor([0.0])})
        assert st_.shadow["w"].item() == pytest.approx(4.5)

    def test_no_forget_is_plain_ema(self):
        a = EmaState.from_weights({"w": torch.ones(1)}, decay=0.8, forget_step=None)
        for _ in range(20):
            ema_update(a, {"w": torch.zeros(1)})
        assert a.shadow["w"].item() == pytest.approx(0.8 ** 20)

    def test_geometric_convergence(self):
        st_ = EmaState.from_weights({"w": torch.full((2,), 3.0, dtype=torch.float64)}, decay=0.95)
        w = {"w": torch.full((2,), 1.0, dtype=torch.float64)}
        for k in range(1, 30):
            ema_update(st_, w)
            assert (st_.shadow["w"] - 1).abs().max().item() == pytest.approx(2 * 0.95 ** k)

    def test_integer_buffers_copied(self):
        st_ = EmaState.from_weights({"n": torch.tensor(0)}, decay=0.9)
        ema_update(st_, {"n": torch.tensor(7)})
        assert st_.shadow["n"].item() == 7

    def test_shape_mismatch(self):
        st_ = EmaState.from_weights({"w": torch.ones(3)})
        with pytest.raises(ValueError, match="shape"):
            ema_update(st_, {"w": torch.ones(4)})


# -- augmentation ------------------------------------------------------------

def sample_image(seed=0, h=40, w=60):
    r = np.random.default_rng(seed)
    return r.integers(0, 256, (h, w, 3), dtype=np.uint8), np.array([[5.0, 5.0, 25.0, 30.0], [30, 10, 58, 38]]), \
        np.array([0, 2])


class TestAugment:
    def test_identity_path(self):
        img, boxes, labels = sample_image(h=32, w=32)
        cfg = AugmentConfig(flip_prob=0.0, crop_prob=0.0, input_sizes=(32,))
        out, b, l = augment(img, boxes, labels, np.random.default_rng(0), cfg)
        assert np.array_equal(out, img) and np.array_equal(b, boxes) and np.array_equal(l, labels)

    def test_flip(self):
        img, boxes, _ = sample_image()
        out, b = hflip(img, boxes)
        assert np.array_equal(b[:, 0], 60 - boxes[:, 2]) and np.array_equal(b[:, 2], 60 - boxes[:, 0])
        assert np.array_equal(out[:, 0], img[:, -1])

    def test_resize_scales_boxes(self):
        img, boxes, _ = sample_image()
        out, b = resize(img, boxes, 120)
        assert out.shape == (120, 120, 3)
        assert np.allclose(b, boxes * [2, 3, 2, 3])

    def test_golden(self):
        img, boxes, labels = sample_image(seed=3)
        cfg = AugmentConfig(flip_prob=0.5, crop_prob=1.0, input_sizes=(48, 64))
        out, b, l = augment(img, boxes, labels, np.random.default_rng(11), cfg)
        digest = hashlib.sha256(out.tobytes() + np.round(b, 6).tobytes() + l.tobytes()).hexdigest()
        assert (out.shape, digest[:16]) == (GOLDEN_SHAPE, GOLDEN_DIGEST)

    @given(st.integers(0, 10_000))
    def test_boxes_stay_inside(self, seed):
        img, boxes, labels = sample_image(seed % 7)
        cfg = AugmentConfig(flip_prob=0.5, crop_prob=1.0, input_sizes=(32, 48))
        out, b, l = augment(img, boxes, labels, np.random.default_rng(seed), cfg)
        h, w = out.shape[:2]
        assert len(b) == len(l)
        assert (b[:, 0] >= 0).all() and (b[:, 2] <= w).all() and (b[:, 1] >= 0).all() and (b[:, 3] <= h).all()
        assert ((b[:, 2] > b[:, 0]) & (b[:, 3] > b[:, 1])).all()
        assert set(l) <= {0, 2}

    def test_crop_skipped_when_impossible(self):
        img, boxes, labels = sample_image()
        # no crop can keep a box this large, so every retry fails
        cfg = AugmentConfig(flip_prob=0.0, crop_prob=1.0, max_crop_retries=3, min_box_size=1000, input_sizes=(60,))
        out, b, l = augment(img, boxes, labels, np.random.default_rng(0), cfg)
        assert out.shape == (60, 60, 3) and len(b) == 2 and l.tolist() == [0, 2]


# frozen from the first run of this implementation
GOLDEN_SHAPE = (48, 48, 3)
GOLDEN_DIGEST = "8f7b7e948d2ca26b"


# -- training loop -----------------------------------------------------------

def test_weight_decay_groups():
    m = torch.nn.Sequential(torch.nn.Conv2d(3, 4, 3), torch.nn.BatchNorm2d(4))
    g = param_groups(m, 1e-4)
    assert [p.ndim for p in g[0]["params"]] == [4] and g[1]["weight_decay"] == 0.0


def test_one_iteration_smoke(tmp_path):
    tr = Trainer(tiny_cfg(), tmp_path)
    rec = tr.train_step()
    assert math.isfinite(rec["loss_total"]) and rec["num_pos"] > 0
    for n, p in tr.model.named_parameters():
        assert p.grad is None or torch.isfinite(p.grad).all(), n


def test_run_writes_artifacts(tmp_path):
    res = train(tiny_cfg(iterations=3), tmp_path)
    lines = [json.loads(l) for l in res.metrics_path.read_text().splitlines()]
    assert [l["step"] for l in lines] == [1, 2, 3]
    assert {"lr", "loss_vfl", "loss_giou", "loss_dfl", "mAP50"} <= set(lines[-1])
    assert res.checkpoint_path.exists() and (tmp_path / "last.ckpt").exists()


def test_resume_matches_uninterrupted(tmp_path):
    full = train(tiny_cfg(iterations=4, augment=True), tmp_path / "full")
    part = Trainer(tiny_cfg(iterations=4, augment=True), tmp_path / "part")
    for _ in range(2):
        part.train_step()
    part.save()
    resumed = train(tiny_cfg(iterations=4, augment=True), tmp_path / "resumed", resume=tmp_path / "part/last.ckpt")
    a = [json.loads(l) for l in full.metrics_path.read_text().splitlines()][2:]
    b = [json.loads(l) for l in resumed.metrics_path.read_text().splitlines()]
    for x, y in zip(a, b):
        assert x["step"] == y["step"]
        assert x["loss_total"] == pytest.approx(y["loss_total"], rel=1e-5)


def test_nan_dump(tmp_path):
    tr = Trainer(tiny_cfg(), tmp_path)
    with torch.no_grad():
        for p in tr.model.head.parameters():
            p.fill_(float("nan"))
    with pytest.raises(TrainingDiverged):
        tr.train_step()
    dump = json.loads((tmp_path / "nan_dump.json").read_text())
    assert dump["step"] == 0 and len(dump["image_ids"]) == 2


def test_eval_uses_ema(tmp_path):
    tr = Trainer(tiny_cfg(), tmp_path)
    tr.train_step()
    m = tr.eval_model()
    assert m is not tr.model
    k = "head.preds.0.weight" if "head.preds.0.weight" in tr.ema.shadow else next(iter(tr.ema.shadow))
    assert torch.equal(m.state_dict()[k], tr.ema.shadow[k])
