"""Training loop: SGD + warmup/cosine LR, Cycle-EMA, per-iteration assignment."""
from __future__ import annotations

import copy
import json
import logging
import math
from dataclasses import dataclass
from pathlib import Path

import numpy as np
import torch

from .assignment import AssignmentResult, assign
from .augment import AugmentConfig, augment
from .checkpoint import load_into, read_checkpoint, save_checkpoint
from .config import ExperimentConfig
from .data import DatasetIndex, InMemoryDataset, SynthSpec, generate_synthetic, load_coco_json
from .evaluate import MapResult, evaluate_map
from .inference import predict, to_tensor
from .losses import DistributionSpec, detection_loss, dfl_expectation
from .models.detector import PicoDet
from .schedule import EmaState, ema_update, lr_at

logger = logging.getLogger(__name__)


class TrainingDiverged(RuntimeError):
    pass


@dataclass
class TrainResult:
    metrics_path: Path
    checkpoint_path: Path
    final_step: int
    eval: MapResult | None


def build_dataset(cfg: ExperimentConfig, workdir, split: str = "train") -> DatasetIndex:
    """Resolve ``cfg.data`` to an index: a COCO-JSON path or a synthetic spec."""
    path = cfg.data.train if split == "train" else (cfg.data.val or cfg.data.train)
    if path:
        return load_coco_json(path, out_of_bounds=cfg.data.out_of_bounds)
    syn = cfg.data.synthetic
    if syn is None:
        raise ValueError("config has neither data.train nor data.synthetic")
    spec = SynthSpec(num_images=syn.num_images, image_size=syn.image_size, min_shapes=syn.min_shapes,
                     max_shapes=syn.max_shapes, seed=syn.seed)
    return generate_synthetic(spec, Path(workdir) / "synthetic")


def param_groups(model: torch.nn.Module, weight_decay: float) -> list[dict]:
    """Weight decay on conv/linear kernels only; norm parameters and biases are exempt."""
    decay, no_decay = [], []
    for p in model.parameters():
        (decay if p.ndim > 1 else no_decay).append(p)
    return [{"params": decay, "weight_decay": weight_decay}, {"params": no_decay, "weight_decay": 0.0}]


def model_state(model: torch.nn.Module) -> dict[str, torch.Tensor]:
    return dict(model.state_dict())


def batch_loss(model: PicoDet, x: torch.Tensor, targets, assigner_cfg, loss_cfg, spec: DistributionSpec):
    """Forward, assign every image on detached predictions, then the composite loss."""
    outs = model(x)
    cls, reg = model.flatten(outs)
    centers, strides, levels = model.anchors(outs)
    with torch.no_grad():
        scores = cls.detach().sigmoid().double().numpy()
        dist = dfl_expectation(reg.detach().double().softmax(-1), spec).numpy()
        s = strides[:, None]
        pred_boxes = np.concatenate([centers - dist[..., :2] * s, centers + dist[..., 2:] * s], axis=-1)
    results = [assign(assigner_cfg, scores[b], pred_boxes[b], centers, strides, levels, boxes, labels)
               for b, (boxes, labels) in enumerate(targets)]
    batch = x.shape[0]
    c = torch.from_numpy(np.tile(centers, (batch, 1)))
    st = torch.from_numpy(np.tile(strides, batch))
    return detection_loss(cls.reshape(-1, cls.shape[-1]), reg.reshape(-1, 4, spec.reg_max + 1), c, st,
                          AssignmentResult.concat(results), loss_cfg, spec)


class Trainer:
    """Single-process trainer.

    Batch order and augmentation draws derive from ``(seed, epoch)`` and
    ``(seed, step)`` so a resumed run follows the same path as an
    uninterrupted one.
    """

    def __init__(self, cfg: ExperimentConfig, out_dir, dataset: InMemoryDataset | None = None,
                 eval_dataset: InMemoryDataset | None = None, model: PicoDet | None = None):
        self.cfg = cfg
        self.tc = cfg.train
        self.out_dir = Path(out_dir)
        self.out_dir.mkdir(parents=True, exist_ok=True)
        torch.manual_seed(self.tc.seed)
        torch.set_num_threads(self.tc.num_threads)
        torch.use_deterministic_algorithms(True)
        self.dataset = dataset or InMemoryDataset(build_dataset(cfg, self.out_dir))
        if len(self.dataset) == 0:
            raise ValueError("training dataset is empty")
        self.eval_dataset = eval_dataset or self.dataset
        self.model = model or PicoDet(cfg.model.detector_config())
        self.loss_cfg = cfg.loss.loss_config()
        self.assigner_cfg = cfg.assigner.assigner_config(cfg.loss)
        self.spec = DistributionSpec(cfg.model.reg_max)
        self.optimizer = torch.optim.SGD(param_groups(self.model, self.tc.weight_decay), lr=self.tc.effective_lr,
                                         momentum=self.tc.momentum)
        self.steps_per_epoch = math.ceil(len(self.dataset) / self.tc.batch_size)
        self.total_steps = self.tc.iterations or self.tc.epochs * self.steps_per_epoch
        forget = self.tc.ema_forget_step or 2 * self.steps_per_epoch
        self.ema = EmaState.from_weights(model_state(self.model), self.tc.ema_decay, forget) if self.tc.ema else None
        aug = self.tc.augment
        self.aug_cfg = AugmentConfig(flip_prob=self.tc.flip_prob if aug else 0.0,
                                     crop_prob=self.tc.crop_prob if aug else 0.0,
                                     input_sizes=tuple(self.tc.input_sizes))
        self.step = 0
        self.metrics_path = self.out_dir / "metrics.jsonl"

    # -- data ---------------------------------------------------------------

    def batch_indices(self, step: int) -> np.ndarray:
        epoch, pos = divmod(step, self.steps_per_epoch)
        perm = np.random.default_rng([self.tc.seed, epoch]).permutation(len(self.dataset))
        bs = self.tc.batch_size
        return perm[pos * bs:(pos + 1) * bs]

    def make_batch(self, step: int):
        rng = np.random.default_rng([self.tc.seed, 1_000_003, step])
        sizes = self.aug_cfg.input_sizes
        size = int(sizes[int(rng.integers(len(sizes)))])
        images, targets, ids = [], [], []
        for i in self.batch_indices(step):
            img, boxes, labels, image_id = self.dataset[int(i)]
            img, boxes, labels = augment(img, boxes, labels, rng, self.aug_cfg, size=size)
            images.append(img)
            targets.append((boxes, labels))
            ids.append(image_id)
        return to_tensor(images), targets, ids

    # -- one iteration ------------------------------------------------------

    def compute_loss(self, x: torch.Tensor, targets):
        return batch_loss(self.model, x, targets, self.assigner_cfg, self.loss_cfg, self.spec)

    def train_step(self) -> dict:
        step = self.step
        lr = lr_at(step, self.total_steps, self.tc.effective_lr, self.tc.warmup_iters, self.tc.warmup_ratio)
        for g in self.optimizer.param_groups:
            g["lr"] = lr
        x, targets, ids = self.make_batch(step)
        self.model.train()
        out = self.compute_loss(x, targets)
        if not torch.isfinite(out.total):
            self._dump_nan(step, ids, targets, out)
        self.optimizer.zero_grad(set_to_none=True)
        out.total.backward()
        if self.tc.grad_clip:
            torch.nn.utils.clip_grad_norm_(self.model.parameters(), self.tc.grad_clip)
        self.optimizer.step()
        if self.ema is not None:
            ema_update(self.ema, model_state(self.model))
        self.step += 1
        return {"step": self.step, "epoch": step // self.steps_per_epoch, "lr": lr,
                "loss_total": float(out.total.detach()), "loss_vfl": float(out.vfl.detach()),
                "loss_giou": float(out.giou.detach()),
                "loss_dfl": float(out.dfl.detach()), "num_pos": out.num_pos}

    def _dump_nan(self, step, ids, targets, out):
        path = self.out_dir / "nan_dump.json"
        path.write_text(json.dumps({
            "step": step, "image_ids": [int(i) for i in ids],
            "boxes": [b.tolist() for b, _ in targets], "labels": [l.tolist() for _, l in targets],
            "loss": {k: float(getattr(out, k).detach()) for k in ("total", "vfl", "giou", "dfl")},
            "num_pos": out.num_pos}, indent=2))
        raise TrainingDiverged(f"non-finite loss at step {step}; batch dumped to {path}")

    # -- evaluation / checkpoints --------------------------------------------

    def eval_model(self) -> PicoDet:
        if self.ema is None:
            return self.model
        m = copy.deepcopy(self.model)
        m.load_state_dict(self.ema.shadow)
        return m

    def evaluate(self) -> MapResult:
        model = self.eval_model()
        ds = self.eval_dataset
        dets = predict(model, ds.images, self.tc.eval_size, self.tc.batch_size)
        records = [d.to_json(info.id) for info, per in zip(ds.index.images, dets) for d in per]
        return evaluate_map(records, ds.index)

    def save(self, path=None) -> Path:
        path = Path(path or self.out_dir / "last.ckpt")
        state = {f"model.{k}": v for k, v in model_state(self.model).items()}
        if self.ema is not None:
            state.update({f"ema.{k}": v for k, v in self.ema.shadow.items()})
        for i, p in enumerate(self.optimizer.param_groups[0]["params"] + self.optimizer.param_groups[1]["params"]):
            buf = self.optimizer.state.get(p, {}).get("momentum_buffer")
            if buf is not None:
                state[f"optim.{i}"] = buf
        save_checkpoint(path, state, {"step": self.step, "ema_step": self.ema.step if self.ema else 0,
                                      "config": self.cfg.to_dict()})
        return path

    def resume(self, path) -> None:
        state, meta = read_checkpoint(path)
        load_into(self.model, {k[6:]: v for k, v in state.items() if k.startswith("model.")})
        if self.ema is not None:
            shadow = {k[4:]: v for k, v in state.items() if k.startswith("ema.")}
            if shadow.keys() == self.ema.shadow.keys():
                self.ema.shadow = shadow
                self.ema.step = int(meta.get("ema_step", 0))
        params = self.optimizer.param_groups[0]["params"] + self.optimizer.param_groups[1]["params"]
        for i, p in enumerate(params):
            if f"optim.{i}" in state:
                self.optimizer.state[p]["momentum_buffer"] = state[f"optim.{i}"].clone()
        self.step = int(meta["step"])

    def save_final(self) -> Path:
        path = self.out_dir / "model_final.ckpt"
        save_checkpoint(path, model_state(self.eval_model()), {"step": self.step, "config": self.cfg.to_dict()})
        return path

    def run(self) -> TrainResult:
        tc = self.tc
        mode = "a" if self.step else "w"
        result = None
        with open(self.metrics_path, mode) as log:
            while self.step < self.total_steps:
                rec = self.train_step()
                last = self.step == self.total_steps
                if (tc.eval_interval and self.step % tc.eval_interval == 0) or last:
                    result = self.evaluate()
                    rec["mAP"] = result.map
                    rec["mAP50"] = result.map50
                    logger.info("step %d: mAP %.4f mAP50 %.4f", self.step, result.map, result.map50)
                if self.step % tc.log_interval == 0 or "mAP" in rec:
                    log.write(json.dumps(rec) + "\n")
                    log.flush()
                if tc.checkpoint_interval and self.step % tc.checkpoint_interval == 0:
                    self.save()
        self.save()
        ckpt = self.save_final()
        return TrainResult(self.metrics_path, ckpt, self.step, result)


def train(cfg: ExperimentConfig, out_dir, dataset: InMemoryDataset | None = None, resume=None, **kwargs) -> TrainResult:
    trainer = Trainer(cfg, out_dir, dataset, **kwargs)
    if resume:
        trainer.resume(resume)
    return trainer.run()
