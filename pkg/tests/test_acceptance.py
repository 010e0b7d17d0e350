"""Acceptance criteria, one test per criterion.

Each test records a ``PASS``/``FAIL`` line (printed immediately and again
in the pytest terminal summary) and then asserts the criterion at its
stated tolerance. Criteria 7, 9 and 10 are long experiments marked ``slow``.
"""
import json
import re
import time
from importlib.resources import files

import numpy as np
import pytest
import torch

from picodet import nas
from picodet.assignment import AssignerConfig, center_prior_candidates, simota_assign, simota_cost
from picodet.checkpoint import read_checkpoint, load_into
from picodet.cli import main as cli_main
from picodet.config import load_config, resolve_config
from picodet.data import InMemoryDataset
from picodet.evaluate import evaluate_map
from picodet.flops import count_params, profile
from picodet.geometry import box_iou_matrix
from picodet.models.csppan import CSPPAN, NeckConfig
from picodet.models.esnet import ESNet, EsNetConfig
from picodet.trainer import Trainer, build_dataset, train

from helpers import gradient_suite, oracle_simota, random_simota_instance

RESULTS: list[str] = []
CONFIGS = files("picodet") / "configs"


def report(num: int, name: str, ok: bool, detail: str) -> None:
    line = f"{'PASS' if ok else 'FAIL'} criterion {num:>2} ({name}): {detail}"
    RESULTS.append(line)
    print(line, flush=True)
    assert ok, line


def within(value, target, tol):
    return abs(value - target) <= tol * target


# -- 1-3: architecture budgets -------------------------------------------------

def test_criterion_01_picodet_s_budget(capsys):
    parsed = {}
    for size in (320, 416):
        assert cli_main(["flops", "--input-size", str(size)]) == 0
        out = capsys.readouterr().out
        m = re.search(r"params ([\d.]+)M\s+FLOPs ([\d.]+)G", out)
        parsed[size] = (float(m.group(1)), float(m.group(2)))
    params, g320 = parsed[320]
    g416 = parsed[416][1]
    ok = within(params, 0.99, 0.15) and within(g320, 0.73, 0.20) and within(g416, 1.24, 0.20)
    with capsys.disabled():
        report(1, "PicoDet-S budget", ok,
               f"params {params:.3f}M (0.99 +-15%), FLOPs {g320:.3f}G@320 (0.73 +-20%), {g416:.3f}G@416 (1.24 +-20%)")


def test_criterion_02_esnet_classifier_flops():
    net = ESNet(EsNetConfig(width_multiplier=1.0, per_block_ratios=[1.0] * 13, num_classes=1000))
    mmacs = profile(net, 224).mmacs
    report(2, "ESNet-1x classifier", within(mmacs, 197, 0.15),
           f"{mmacs:.1f} M multiply-adds at 224 (197 +-15%; multiply-add convention)")


def test_criterion_03_fourth_scale_params():
    four = count_params(CSPPAN([96, 192, 384], NeckConfig(96, num_extra_levels=1)))
    three = count_params(CSPPAN([96, 192, 384], NeckConfig(96, num_extra_levels=0)))
    added = four - three
    report(3, "fourth neck scale", 0 < added < 50_000, f"+{added} parameters at 96 channels (< 50000)")


# -- 4-6: numerical oracles ----------------------------------------------------

def test_criterion_04_loss_gradients():
    worst = gradient_suite(np.random.default_rng(2024), n=100)
    ok = max(worst.values()) <= 1e-3
    report(4, "loss gradients", ok, ", ".join(f"{k} {v:.1e}" for k, v in worst.items()) + " (max rel err <= 1e-3)")


def test_criterion_05_simota_oracle():
    rng = np.random.default_rng(5)
    cfg = AssignerConfig(mode="simota_modified")
    mismatches = 0
    for _ in range(1000):
        scores, pboxes, centers, strides, gboxes, glabels = random_simota_instance(rng)
        res = simota_assign(scores, pboxes, (centers, strides), (gboxes, glabels), cfg)
        if len(gboxes) == 0:
            mismatches += int(res.num_positive != 0)
            continue
        cand = center_prior_candidates((centers, strides), (gboxes, glabels), cfg)
        cost = simota_cost(scores, pboxes, (gboxes, glabels), cand, cfg).dense(len(centers))
        expect = oracle_simota(cost, cand, box_iou_matrix(pboxes, gboxes), cfg.top_n)
        mismatches += int(not np.array_equal(res.matched_gt, expect))
    report(5, "SimOTA oracle", mismatches == 0, f"{1000 - mismatches}/1000 instances identical")


def test_criterion_06_map_evaluator():
    from test_evaluate import index, rec
    gt = index([[(0, 0, 10, 10), (20, 20, 30, 30)]], [[0, 0]])
    preds = [rec(1, (0, 0, 10, 10), 0.9), rec(1, (60, 60, 70, 70), 0.8), rec(1, (20, 20, 30, 32), 0.7)]
    ap_hi, ap_lo = (51 + 50 * 2 / 3) / 101, 51 / 101
    hand = evaluate_map(preds, gt)
    err = max(abs(hand.map50 - ap_hi), abs(hand.map - (7 * ap_hi + 3 * ap_lo) / 10))
    perfect = evaluate_map([rec(1, (0, 0, 10, 10), 1.0), rec(1, (20, 20, 30, 30), 1.0)], gt)
    empty = evaluate_map([], gt)
    ok = err <= 1e-6 and perfect.map == 1.0 and perfect.map50 == 1.0 and empty.map == 0.0
    report(6, "mAP evaluator", ok, f"hand fixture err {err:.1e}, perfect {perfect.map:.3f}, empty {empty.map:.3f}")


# -- 8: ablation surface ---------------------------------------------------------

BASE = {
    "model": {"num_classes": 3, "width_multiplier": 0.5, "channel_ratios": None, "neck_out_channels": 16,
              "num_levels": 4},
    "train": {"lr0": 0.01, "scale_lr_by_batch": False, "iterations": 1, "batch_size": 2, "input_sizes": [64],
              "eval_size": 64, "warmup_iters": 0, "augment": False},
    "data": {"synthetic": {"num_images": 2, "image_size": 64, "seed": 0}},
}


def _variant(section, **kw):
    raw = json.loads(json.dumps(BASE))
    raw.setdefault(section, {}).update(kw)
    return resolve_config(raw)


def _shapes(model):
    return {k: tuple(v.shape) for k, v in model.state_dict().items()}


def _changed(a, b):
    sa, sb = _shapes(a), _shapes(b)
    return {k for k in sa.keys() | sb.keys() if sa.get(k) != sb.get(k)}


def _acts(model):
    return {type(m).__name__ for m in model.modules() if isinstance(m, (torch.nn.Hardswish, torch.nn.LeakyReLU))}


# (label, config variant, predicate over (base trainer, variant trainer))
ABLATIONS = [
    ("3-scale neck", ("model", {"num_levels": 3}),
     lambda a, b: _changed(a.model, b.model) and len(b.model.strides) == 3
     and all(k.startswith(("neck.extra.", "head.towers.3.", "head.preds.3.")) for k in _changed(a.model, b.model))),
    ("QFL", ("loss", {"cls_loss": "qfl"}),
     lambda a, b: not _changed(a.model, b.model) and b.loss_cfg.cls_loss == "qfl" and a.loss_cfg.cls_loss == "vfl"),
    ("ATSS", ("assigner", {"mode": "atss"}),
     lambda a, b: not _changed(a.model, b.model) and b.assigner_cfg.mode == "atss"),
    ("SimOTA original", ("assigner", {"mode": "simota_original"}),
     lambda a, b: not _changed(a.model, b.model) and b.assigner_cfg.mode == "simota_original"),
    ("ShuffleNetV2 backbone", ("model", {"backbone": "shufflenetv2"}),
     lambda a, b: all(k.startswith(("backbone.", "neck.reduce.")) for k in _changed(a.model, b.model))
     and type(a.model.backbone) is not type(b.model.backbone)),
    ("LeakyReLU", ("model", {"activation": "leakyrelu"}),
     lambda a, b: not _changed(a.model, b.model) and _acts(a.model) == {"Hardswish"}
     and _acts(b.model) == {"LeakyReLU"}),
]


def test_criterion_08_ablation_surface(tmp_path):
    t0 = time.time()
    base = Trainer(resolve_config(BASE), tmp_path / "base")
    base_rec = base.train_step()
    failures = []
    for label, (section, kw), check in ABLATIONS:
        tr = Trainer(_variant(section, **kw), tmp_path / label.replace(" ", "_"))
        rec = tr.train_step()
        if not (np.isfinite(rec["loss_total"]) and check(base, tr)):
            failures.append(label)
    ok = not failures and np.isfinite(base_rec["loss_total"]) and time.time() - t0 < 300
    report(8, "ablation surface", ok,
           f"{len(ABLATIONS) - len(failures)}/{len(ABLATIONS)} toggles build, train one step and change only their "
           f"sub-module ({time.time() - t0:.0f}s){'; failed: ' + ', '.join(failures) if failures else ''}")


# -- 7 and 10: overfit convergence and determinism ---------------------------------

@pytest.fixture(scope="module")
def overfit_runs(tmp_path_factory):
    cfg = load_config(CONFIGS / "overfit_tiny.yml")
    runs = []
    for name in ("a", "b"):
        t0 = time.time()
        res = train(cfg, tmp_path_factory.mktemp(f"overfit_{name}"))
        runs.append((res, time.time() - t0))
    return runs


def _metrics(path):
    return [json.loads(l) for l in path.read_text().splitlines()]


@pytest.mark.slow
def test_criterion_07_overfit(overfit_runs):
    res, secs = overfit_runs[0]
    recs = _metrics(res.metrics_path)
    evals = [(r["step"], r["mAP50"]) for r in recs if "mAP50" in r]
    first = next((s for s, m in evals if m >= 0.8), None)
    blocks = np.array([r["loss_total"] for r in recs[:50]]).reshape(5, 10).mean(1)
    early_drop = bool(np.all(np.diff(blocks) < 0))
    ok = first is not None and first <= 2000 and secs <= 1800 and early_drop
    report(7, "overfit convergence", ok,
           f"train mAP@0.5 {res.eval.map50:.3f} at step {res.final_step} (>= 0.8 first at step {first}), "
           f"{secs:.0f}s; 10-step loss means over first 50 iters {np.round(blocks, 2).tolist()}")


# -- 9 and 10: toy channel search ------------------------------------------------

def _nas_seed(seed, workdir):
    cfg = load_config(CONFIGS / "nas_toy.yml")
    cfg.train.seed = seed
    t0 = time.time()
    ckpt = nas.SupernetTrainer(cfg, workdir).run()
    supernet = nas.build_supernet(cfg)
    length = nas.num_genes(supernet)
    estimator = nas.FlopsEstimator(supernet, cfg.nas.input_size)
    budget = nas.budget_from_config(cfg, estimator, length)
    state, _ = read_checkpoint(ckpt)
    load_into(supernet, state)
    calib = nas.calibration_batches(InMemoryDataset(build_dataset(cfg, workdir)), cfg.nas.bn_recalibration_batches,
                                    cfg.nas.input_size)
    evaluator = nas.ChildEvaluator(supernet, nas.validation_subset(cfg, workdir), cfg.nas.input_size, calib)
    evo = nas.evolve(evaluator, estimator, length, cfg.nas.ratio_choices, budget, np.random.default_rng(seed))
    rnd = nas.random_search(evaluator, estimator, length, cfg.nas.ratio_choices, budget,
                            np.random.default_rng([seed, 7]), evo.num_evaluations)
    nas.write_search_log(workdir / "search_log.jsonl", evo.log)
    return {"evo": evo, "rnd": rnd, "budget": budget.max_flops, "length": length, "secs": time.time() - t0,
            "dir": workdir}


@pytest.fixture(scope="module")
def nas_runs(tmp_path_factory):
    runs = {s: _nas_seed(s, tmp_path_factory.mktemp(f"nas_{s}")) for s in (0, 1, 2)}
    runs["repeat"] = _nas_seed(0, tmp_path_factory.mktemp("nas_0_repeat"))
    return runs


@pytest.mark.slow
def test_criterion_09_nas_sanity(nas_runs):
    parts, ok, total = [], True, 0.0
    for s in (0, 1, 2):
        r = nas_runs[s]
        evo, rnd = r["evo"], r["rnd"]
        seed_ok = (r["length"] == 4 and evo.flops <= r["budget"] and evo.fitness >= rnd.fitness
                   and rnd.num_evaluations == evo.num_evaluations)
        ok &= seed_ok
        total += r["secs"]
        parts.append(f"seed {s}: EA {evo.fitness:.3f} vs random {rnd.fitness:.3f} "
                     f"({evo.num_evaluations} evals, {evo.flops:.1f}/{r['budget']:.1f} MFLOPs)")
    ok &= total <= 1800
    report(9, "NAS sanity", ok, "; ".join(parts) + f"; {total:.0f}s")


@pytest.mark.slow
def test_criterion_10_determinism(overfit_runs, nas_runs):
    (a, _), (b, _) = overfit_runs
    same_overfit = a.metrics_path.read_bytes() == b.metrics_path.read_bytes()
    x, y = nas_runs[0]["dir"], nas_runs["repeat"]["dir"]
    same_nas = all((x / f).read_bytes() == (y / f).read_bytes()
                   for f in ("supernet_metrics.jsonl", "search_log.jsonl"))
    report(10, "determinism", same_overfit and same_nas,
           f"overfit metrics identical: {same_overfit}; supernet + search logs identical: {same_nas}")
