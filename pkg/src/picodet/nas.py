"""One-shot channel-ratio search: weight-sharing supernet and evolutionary search."""
from __future__ import annotations

import copy
import json
import logging
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable, Protocol, Sequence

import numpy as np
import torch
import torch.nn as nn

from .augment import resize
from .checkpoint import save_checkpoint
from .config import ExperimentConfig
from .data import InMemoryDataset, SynthSpec, generate_synthetic
from .evaluate import evaluate_map
from .flops import profile
from .inference import predict, to_tensor
from .models.detector import PicoDet
from .schedule import lr_at
from .trainer import Trainer, TrainingDiverged

logger = logging.getLogger(__name__)

Genotype = tuple[float, ...]


class InfeasibleBudget(RuntimeError):
    """No genotype in the search space satisfies the compute budget."""


@dataclass(frozen=True)
class SearchBudget:
    max_flops: float  # MFLOPs
    population: int = 24
    generations: int = 10
    mutation_prob: float = 0.1
    crossover_prob: float = 0.5
    eval_subset_size: int = 16
    tournament_size: int = 3
    max_retries: int = 2000

    def __post_init__(self):
        if self.max_flops <= 0:
            raise ValueError("max_flops must be positive")
        if self.population < 4:
            raise ValueError("population must be >= 4")


# -- supernet views ----------------------------------------------------------

def build_supernet(cfg: ExperimentConfig) -> PicoDet:
    """Full-width detector; children are realized by slicing its block widths."""
    if cfg.model.backbone != "esnet":
        raise ValueError("channel search needs the esnet backbone")
    dc = cfg.model.detector_config()
    dc.channel_ratios = None
    return PicoDet(dc)


def num_genes(supernet: PicoDet) -> int:
    return len(supernet.backbone.blocks)


def apply_genotype(supernet: PicoDet, genotype: Sequence[float] | None) -> PicoDet:
    """Switch the supernet to the child ``genotype`` in place and return it.

    Block output widths stay fixed; only the prunable inner widths shrink to
    ``round_to_8(ratio * stage_channels)``. Weights are shared slices.
    """
    if genotype is not None and len(genotype) != num_genes(supernet):
        raise ValueError(f"genotype has {len(genotype)} genes, supernet has {num_genes(supernet)} blocks")
    supernet.backbone.set_ratios(None if genotype is None else list(genotype))
    return supernet


def sandwich_sample(rng: np.random.Generator, length: int, choices: Sequence[float],
                    count: int = 8) -> list[Genotype]:
    """Largest child, smallest child and ``count - 2`` uniform random children."""
    hi, lo = float(max(choices)), float(min(choices))
    out = [(hi,) * length, (lo,) * length]
    for _ in range(count - 2):
        out.append(tuple(float(choices[i]) for i in rng.integers(len(choices), size=length)))
    return out


class SupernetTrainer(Trainer):
    """Sandwich-rule supernet training: eight children share one optimizer step."""

    def __init__(self, cfg: ExperimentConfig, out_dir, dataset: InMemoryDataset | None = None):
        tc = cfg.train.model_copy(update={"iterations": cfg.nas.supernet_steps, "ema": False})
        cfg = cfg.model_copy(update={"train": tc})
        torch.manual_seed(tc.seed)  # supernet init must not depend on prior RNG use
        super().__init__(cfg, out_dir, dataset, model=build_supernet(cfg))
        self.choices = tuple(cfg.nas.ratio_choices)
        self.max_norm = cfg.nas.grad_clip_norm
        self.metrics_path = self.out_dir / "supernet_metrics.jsonl"

    def train_step(self) -> dict:
        step = self.step
        lr = lr_at(step, self.total_steps, self.tc.effective_lr, self.tc.warmup_iters, self.tc.warmup_ratio)
        for g in self.optimizer.param_groups:
            g["lr"] = lr
        x, targets, ids = self.make_batch(step)
        rng = np.random.default_rng([self.tc.seed, 2_000_003, step])
        genotypes = sandwich_sample(rng, num_genes(self.model), self.choices, self.cfg.nas.candidates_per_step)
        losses = supernet_train_step(self.model, self.optimizer, x, targets, genotypes, self.max_norm,
                                     lambda m: self.compute_loss(x, targets), ids=ids)
        self.step += 1
        return {"step": self.step, "epoch": step // self.steps_per_epoch, "lr": lr,
                "losses": losses["losses"], "grad_norm": losses["grad_norm"]}

    def evaluate(self):
        return None

    def run(self):
        tc = self.tc
        with open(self.metrics_path, "a" if self.step else "w") as log:
            while self.step < self.total_steps:
                rec = self.train_step()
                if self.step % tc.log_interval == 0:
                    log.write(json.dumps(rec) + "\n")
                if tc.checkpoint_interval and self.step % tc.checkpoint_interval == 0:
                    self.save()
        apply_genotype(self.model, None)
        path = self.out_dir / "supernet.ckpt"
        save_checkpoint(path, dict(self.model.state_dict()), {"step": self.step, "config": self.cfg.to_dict()})
        return path


def supernet_train_step(supernet: PicoDet, optimizer, x, targets, genotypes: Sequence[Genotype], max_norm: float,
                        loss_fn: Callable, ids=None) -> dict:
    """Accumulate gradients of every candidate on one batch, clip, step once.

    ``loss_fn(model)`` returns a loss breakdown for the currently active
    child. Any non-finite candidate loss aborts before the update.
    """
    supernet.train()
    optimizer.zero_grad(set_to_none=True)
    losses = []
    try:
        for g in genotypes:
            apply_genotype(supernet, g)
            out = loss_fn(supernet)
            if not torch.isfinite(out.total):
                raise TrainingDiverged(f"non-finite loss for candidate {list(g)} (images {ids})")
            out.total.backward()
            losses.append(float(out.total.detach()))
    finally:
        apply_genotype(supernet, None)
    norm = float(nn.utils.clip_grad_norm_(supernet.parameters(), max_norm))
    optimizer.step()
    return {"losses": losses, "grad_norm": norm}


# -- cost and fitness --------------------------------------------------------

class CostEstimator(Protocol):
    def __call__(self, genotype: Genotype) -> float: ...


class FlopsEstimator:
    """MFLOPs of a child at ``input_size``, measured by tracing and cached.

    Any callable mapping a genotype to a cost (e.g. a device latency table)
    can stand in for this class in :func:`evolve`.
    """

    def __init__(self, supernet: PicoDet, input_size: int):
        self.supernet = supernet
        self.input_size = input_size
        self._cache: dict[Genotype, object] = {}

    def profile(self, genotype: Genotype):
        key = tuple(float(v) for v in genotype)
        if key not in self._cache:
            apply_genotype(self.supernet, key)
            try:
                self._cache[key] = profile(self.supernet, self.input_size)
            finally:
                apply_genotype(self.supernet, None)
        return self._cache[key]

    def __call__(self, genotype: Genotype) -> float:
        return self.profile(genotype).mflops

    def params(self, genotype: Genotype) -> int:
        return self.profile(genotype).params


def estimate_flops(supernet: PicoDet, genotype: Genotype, input_size: int) -> float:
    return FlopsEstimator(supernet, input_size)(genotype)


def recalibrate_bn(model: nn.Module, batches: Sequence[torch.Tensor]) -> None:
    """Re-estimate batch-norm statistics for the active child (cumulative average)."""
    if not batches:
        return
    bns = [m for m in model.modules() if isinstance(m, nn.modules.batchnorm._BatchNorm)]
    saved = [m.momentum for m in bns]
    for m in bns:
        m.reset_running_stats()
        m.momentum = None
    model.train()
    with torch.no_grad():
        for x in batches:
            model(x)
    for m, mom in zip(bns, saved):
        m.momentum = mom
    model.eval()


class ChildEvaluator:
    """Fitness = mAP@0.5 of a weight-shared child on a fixed validation subset.

    Works on a private copy of the supernet so batch-norm recalibration never
    touches the trained weights.
    """

    def __init__(self, supernet: PicoDet, val: InMemoryDataset, input_size: int,
                 calib_batches: Sequence[torch.Tensor] = (), batch_size: int = 8):
        self.model = copy.deepcopy(supernet)
        self.base_state = copy.deepcopy(self.model.state_dict())
        self.val = val
        self.input_size = input_size
        self.calib_batches = list(calib_batches)
        self.batch_size = batch_size

    def __call__(self, genotype: Genotype) -> float:
        m = self.model
        if self.calib_batches:
            m.load_state_dict(self.base_state)
        apply_genotype(m, genotype)
        try:
            recalibrate_bn(m, self.calib_batches)
            dets = predict(m, self.val.images, self.input_size, self.batch_size)
        finally:
            apply_genotype(m, None)
        records = [d.to_json(info.id) for info, per in zip(self.val.index.images, dets) for d in per]
        return evaluate_map(records, self.val.index).map50


# -- search ------------------------------------------------------------------

@dataclass
class SearchResult:
    best: Genotype
    fitness: float
    flops: float
    log: list[dict] = field(default_factory=list)

    @property
    def num_evaluations(self) -> int:
        return len(self.log)


class _CachedFitness:
    def __init__(self, fitness_fn, cost_fn, log, generation_ref):
        self.fitness_fn = fitness_fn
        self.cost_fn = cost_fn
        self.cache: dict[Genotype, float] = {}
        self.log = log
        self.gen = generation_ref

    def __call__(self, g: Genotype) -> float:
        if g not in self.cache:
            self.cache[g] = float(self.fitness_fn(g))
            self.log.append({"generation": self.gen[0], "genotype": list(g), "flops": self.cost_fn(g),
                             "fitness": self.cache[g]})
        return self.cache[g]


def _random_genotype(rng, length, choices) -> Genotype:
    return tuple(float(choices[i]) for i in rng.integers(len(choices), size=length))


def check_feasible(cost_fn, length, choices, budget):
    smallest = (float(min(choices)),) * length
    if cost_fn(smallest) > budget.max_flops:
        raise InfeasibleBudget(f"budget {budget.max_flops:.2f} MFLOPs is below the smallest child "
                               f"({cost_fn(smallest):.2f} MFLOPs)")


def _rank_key(fit, cost_fn):
    return lambda g: (-fit(g), cost_fn(g), g)


def evolve(fitness_fn: Callable[[Genotype], float], cost_fn: CostEstimator, length: int,
           choices: Sequence[float], budget: SearchBudget, rng: np.random.Generator) -> SearchResult:
    """Elitist genetic search over per-block ratios under ``cost <= max_flops``.

    Tournament selection, single-point crossover and per-gene mutation to a
    different choice; offspring over budget or already evaluated are
    discarded and redrawn. Each distinct genotype
    is evaluated once; the log records every evaluation in order.
    """
    choices = [float(c) for c in choices]
    check_feasible(cost_fn, length, choices, budget)
    log: list[dict] = []
    gen = [0]
    fit = _CachedFitness(fitness_fn, cost_fn, log, gen)
    feasible = lambda g: cost_fn(g) <= budget.max_flops  # noqa: E731

    population: list[Genotype] = []
    retries = 0
    while len(population) < budget.population:
        g = _random_genotype(rng, length, choices)
        if feasible(g):
            population.append(g)
        else:
            retries += 1
            if retries > budget.max_retries:
                if not population:
                    # check_feasible guarantees the smallest child fits
                    population.append((min(choices),) * length)
                break
    for g in population:
        fit(g)
    key = _rank_key(fit, cost_fn)
    population = sorted(set(population), key=key)

    def tournament() -> Genotype:
        picks = rng.integers(len(population), size=min(budget.tournament_size, len(population)))
        return min((population[i] for i in picks), key=key)

    for generation in range(1, budget.generations + 1):
        gen[0] = generation
        offspring: list[Genotype] = []
        retries = 0
        while len(offspring) < budget.population and retries <= budget.max_retries:
            a = tournament()
            if rng.random() < budget.crossover_prob:
                b = tournament()
                cut = int(rng.integers(1, length)) if length > 1 else 0
                child = list(a[:cut] + b[cut:])
            else:
                child = list(a)
            for i in range(length):
                if rng.random() < budget.mutation_prob:
                    others = [c for c in choices if c != child[i]]
                    child[i] = others[int(rng.integers(len(others)))]
            child = tuple(child)
            # only unseen feasible genotypes spend an evaluation
            if feasible(child) and child not in fit.cache and child not in offspring:
                offspring.append(child)
            else:
                retries += 1
        for g in offspring:
            fit(g)
        population = sorted(set(population) | set(offspring), key=key)[: budget.population]
        logger.info("generation %d: best fitness %.4f", generation, fit(population[0]))
    best = population[0]
    return SearchResult(best, fit(best), cost_fn(best), log)


def random_search(fitness_fn: Callable[[Genotype], float], cost_fn: CostEstimator, length: int,
                  choices: Sequence[float], budget: SearchBudget, rng: np.random.Generator,
                  num_evaluations: int) -> SearchResult:
    """Baseline: best of ``num_evaluations`` distinct feasible random genotypes."""
    choices = [float(c) for c in choices]
    check_feasible(cost_fn, length, choices, budget)
    log: list[dict] = []
    fit = _CachedFitness(fitness_fn, cost_fn, log, [0])
    retries = 0
    while len(fit.cache) < num_evaluations and retries <= budget.max_retries * 10:
        g = _random_genotype(rng, length, choices)
        if g in fit.cache or cost_fn(g) > budget.max_flops:
            retries += 1
            continue
        fit(g)
    best = min(fit.cache, key=_rank_key(fit, cost_fn))
    return SearchResult(best, fit(best), cost_fn(best), log)


# -- end-to-end helpers ------------------------------------------------------

def validation_subset(cfg: ExperimentConfig, workdir) -> InMemoryDataset:
    """A held-out synthetic set (seed offset by one) sized ``nas.eval_subset_size``."""
    syn = cfg.data.synthetic
    if syn is None:
        raise ValueError("search needs data.synthetic or an explicit validation set")
    spec = SynthSpec(num_images=cfg.nas.eval_subset_size, image_size=syn.image_size, min_shapes=syn.min_shapes,
                     max_shapes=syn.max_shapes, seed=syn.seed + 1)
    return InMemoryDataset(generate_synthetic(spec, Path(workdir) / "val_subset"))


def calibration_batches(dataset: InMemoryDataset, n: int, size: int, batch_size: int = 8) -> list[torch.Tensor]:
    out = []
    for b in range(n):
        imgs = dataset.images[b * batch_size:(b + 1) * batch_size]
        if not imgs:
            break
        out.append(to_tensor([resize(im, np.zeros((0, 4)), size)[0] for im in imgs]))
    return out


def budget_from_config(cfg: ExperimentConfig, estimator: FlopsEstimator, length: int,
                       max_flops: float | None = None) -> SearchBudget:
    """Explicit MFLOPs budget, else ``budget_fraction`` of the full supernet."""
    nas = cfg.nas
    limit = max_flops or nas.max_flops
    if limit is None:
        limit = nas.budget_fraction * estimator((float(max(nas.ratio_choices)),) * length)
    return SearchBudget(limit, nas.population, nas.generations, nas.mutation_prob, nas.crossover_prob,
                        nas.eval_subset_size)


def write_search_log(path, log: Sequence[dict]) -> None:
    with open(path, "w") as fh:
        for rec in log:
            fh.write(json.dumps(rec) + "\n")


def genotype_config(cfg: ExperimentConfig, genotype: Genotype) -> ExperimentConfig:
    """The experiment config for training the searched child from scratch."""
    model = cfg.model.model_copy(update={"channel_ratios": list(genotype)})
    nas = cfg.nas.model_copy(update={"genotype": list(genotype)})
    return ExperimentConfig.model_validate({**cfg.to_dict(), "model": model.model_dump(), "nas": nas.model_dump()})
