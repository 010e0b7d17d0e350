"""Declarative experiment config (YAML) with defaults and strict validation.

A minimal file resolves to PicoDet-S settings. Unknown keys are rejected
with their dotted path. See ``docs/config.md`` for the schema.
"""
from __future__ import annotations

import logging
from pathlib import Path
from typing import Literal, Optional

import yaml
from pydantic import BaseModel, ConfigDict, Field, ValidationError, field_validator, model_validator

from .assignment import AssignerConfig
from .losses import LossConfig
from .models.detector import DetectorConfig

logger = logging.getLogger(__name__)

RATIO_CHOICES = (0.5, 0.675, 0.75, 0.875, 1.0)
RATIO_CHOICES_ALT = (0.5, 0.625, 0.75, 0.875, 1.0)
# Smallest child of the ratio space; lands on the published PicoDet-S size.
PICODET_S_RATIOS = (0.5,) * 13


class ConfigError(ValueError):
    pass


class _Strict(BaseModel):
    model_config = ConfigDict(extra="forbid", validate_assignment=True)


class ModelSection(_Strict):
    num_classes: int = Field(80, ge=1)
    backbone: Literal["esnet", "shufflenetv2"] = "esnet"
    width_multiplier: float = Field(0.75, gt=0)
    stage_base_channels: list[int] = [128, 256, 512]
    stage_block_counts: list[int] = [3, 7, 3]
    channel_ratios: Optional[list[float]] = list(PICODET_S_RATIOS)
    activation: Literal["hswish", "leakyrelu", "relu"] = "hswish"
    neck_out_channels: Optional[int] = 96
    num_csp_blocks: int = Field(1, ge=1)
    neck_kernel: int = 5
    num_levels: int = Field(4, ge=1)
    dp_count: int = Field(2, ge=1)
    reg_max: int = Field(7, ge=1)
    coupled_head: bool = True
    share_head: bool = False
    score_threshold: float = Field(0.025, ge=0, le=1)
    nms_iou: float = Field(0.6, gt=0, le=1)
    max_detections: int = Field(100, ge=1)

    @field_validator("neck_out_channels")
    @classmethod
    def _div8(cls, v):
        if v is not None and v % 8:
            raise ValueError("must be divisible by 8")
        return v

    @model_validator(mode="after")
    def _ratios_len(self):
        if self.backbone == "esnet" and self.channel_ratios is not None:
            if len(self.channel_ratios) != sum(self.stage_block_counts):
                raise ValueError(f"channel_ratios needs {sum(self.stage_block_counts)} entries "
                                 f"(one per block), got {len(self.channel_ratios)}")
        return self

    def detector_config(self) -> DetectorConfig:
        d = self.model_dump()
        ratios = d.pop("channel_ratios")
        return DetectorConfig(channel_ratios=tuple(ratios) if ratios is not None and self.backbone == "esnet" else None,
                              stage_base_channels=tuple(d.pop("stage_base_channels")),
                              stage_block_counts=tuple(d.pop("stage_block_counts")), **d)


class LossSection(_Strict):
    cls_loss: Literal["vfl", "qfl"] = "vfl"
    vfl_alpha: float = Field(0.75, ge=0)
    vfl_gamma: float = Field(2.0, ge=0)
    qfl_beta: float = Field(2.0, ge=0)
    giou_weight: float = Field(2.0, ge=0)
    dfl_weight: float = Field(0.25, ge=0)
    eps: float = Field(1e-9, gt=0)

    def loss_config(self) -> LossConfig:
        return LossConfig(**self.model_dump())


class AssignerSection(_Strict):
    mode: Literal["atss", "simota_original", "simota_modified"] = "simota_modified"
    top_n: int = Field(10, ge=1)
    cost_lambda: float = Field(6.0, gt=0)
    center_radius: float = Field(2.5, gt=0)
    atss_topk: int = Field(9, ge=1)
    atss_anchor_scale: float = Field(5.0, gt=0)

    def assigner_config(self, loss: LossSection) -> AssignerConfig:
        return AssignerConfig(vfl_alpha=loss.vfl_alpha, vfl_gamma=loss.vfl_gamma, **self.model_dump())


class TrainSection(_Strict):
    lr0: float = Field(0.1, gt=0)
    scale_lr_by_batch: bool = True
    reference_batch: int = Field(640, ge=1)
    momentum: float = Field(0.9, ge=0, lt=1)
    weight_decay: float = Field(4e-5, ge=0)
    iterations: Optional[int] = Field(None, ge=1)
    epochs: int = Field(300, ge=1)
    batch_size: int = Field(8, ge=1)
    input_sizes: list[int] = [352, 384, 416, 448, 480]
    eval_size: int = Field(416, ge=32)
    warmup_iters: int = Field(500, ge=0)
    warmup_ratio: float = Field(0.1, gt=0, le=1)
    ema: bool = True
    ema_decay: float = Field(0.9998, gt=0, lt=1)
    ema_forget_step: Optional[int] = Field(None, ge=1)
    grad_clip: Optional[float] = Field(None, gt=0)
    augment: bool = True
    flip_prob: float = Field(0.5, ge=0, le=1)
    crop_prob: float = Field(0.5, ge=0, le=1)
    eval_interval: int = Field(0, ge=0)  # iterations; 0 = only at the end
    log_interval: int = Field(1, ge=1)
    checkpoint_interval: int = Field(0, ge=0)
    seed: int = 0
    num_threads: int = Field(1, ge=1)

    @property
    def effective_lr(self) -> float:
        return self.lr0 * self.batch_size / self.reference_batch if self.scale_lr_by_batch else self.lr0


class SyntheticSection(_Strict):
    num_images: int = Field(50, ge=1)
    image_size: int = Field(256, ge=32)
    min_shapes: int = Field(1, ge=1)
    max_shapes: int = Field(3, ge=1)
    seed: int = 0


class DataSection(_Strict):
    train: Optional[str] = None  # COCO-JSON path
    val: Optional[str] = None
    synthetic: Optional[SyntheticSection] = None
    out_of_bounds: Literal["reject", "clip"] = "reject"


class NasSection(_Strict):
    ratio_choices: list[float] = list(RATIO_CHOICES)
    supernet_steps: int = Field(200, ge=1)
    candidates_per_step: int = Field(8, ge=2)
    grad_clip_norm: float = Field(35.0, gt=0)
    population: int = Field(24, ge=4)
    generations: int = Field(10, ge=1)
    mutation_prob: float = Field(0.1, ge=0, le=1)
    crossover_prob: float = Field(0.5, ge=0, le=1)
    eval_subset_size: int = Field(16, ge=1)
    max_flops: Optional[float] = Field(None, gt=0)  # MFLOPs
    budget_fraction: float = Field(0.9, gt=0)
    input_size: int = Field(128, ge=32)
    bn_recalibration_batches: int = Field(2, ge=0)
    genotype: Optional[list[float]] = None  # exported best genotype


class ExperimentConfig(_Strict):
    model: ModelSection = Field(default_factory=ModelSection)
    loss: LossSection = Field(default_factory=LossSection)
    assigner: AssignerSection = Field(default_factory=AssignerSection)
    train: TrainSection = Field(default_factory=TrainSection)
    data: DataSection = Field(default_factory=DataSection)
    nas: NasSection = Field(default_factory=NasSection)

    def to_dict(self) -> dict:
        return self.model_dump(mode="json")


def _format_errors(err: ValidationError, source: str) -> str:
    lines = []
    for e in err.errors():
        path = ".".join(str(p) for p in e["loc"]) or "<root>"
        msg = "unknown key" if e["type"] == "extra_forbidden" else e["msg"]
        lines.append(f"{source}: {path}: {msg}")
    return "\n".join(lines)


def resolve_config(raw: dict | None, source: str = "<config>") -> ExperimentConfig:
    if raw is None:
        raw = {}
    if not isinstance(raw, dict):
        raise ConfigError(f"{source}: top level must be a mapping")
    try:
        cfg = ExperimentConfig.model_validate(raw)
    except ValidationError as e:
        raise ConfigError(_format_errors(e, source)) from None
    logger.info("resolved config from %s:\n%s", source, yaml.safe_dump(cfg.to_dict(), sort_keys=False))
    return cfg


def load_config(path) -> ExperimentConfig:
    path = Path(path)
    try:
        raw = yaml.safe_load(path.read_text())
    except yaml.YAMLError as e:
        raise ConfigError(f"{path}: invalid YAML ({e})") from None
    except OSError as e:
        raise ConfigError(f"{path}: {e.strerror}") from None
    return resolve_config(raw, str(path))


def dump_config(cfg: ExperimentConfig, path) -> None:
    Path(path).write_text(yaml.safe_dump(cfg.to_dict(), sort_keys=False))
