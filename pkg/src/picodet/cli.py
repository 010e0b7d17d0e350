"""``picodet`` command line: train, eval, infer, supernet-train, search, flops.

Exit codes: 0 success, 1 other failure, 2 config error, 3 checkpoint error,
4 infeasible search budget. ``PICODET_LOG`` sets the log level (default INFO).
"""
from __future__ import annotations

import argparse
import json
import logging
import os
import sys
from pathlib import Path

import numpy as np
from PIL import Image, ImageDraw

from .checkpoint import CheckpointError, load_into, read_checkpoint
from .config import ConfigError, ExperimentConfig, dump_config, load_config, resolve_config
from .data import DatasetError, InMemoryDataset, load_coco_json
from .evaluate import evaluate_map
from .postprocess import read_jsonl, write_jsonl

logger = logging.getLogger("picodet")

EXIT_OK, EXIT_OTHER, EXIT_CONFIG, EXIT_CHECKPOINT, EXIT_INFEASIBLE = 0, 1, 2, 3, 4
IMAGE_SUFFIXES = {".png", ".jpg", ".jpeg", ".bmp"}


def _config(args) -> ExperimentConfig:
    cfg = load_config(args.config) if getattr(args, "config", None) else resolve_config({})
    seed = getattr(args, "seed", None)
    if seed is not None:
        cfg.train.seed = seed
    return cfg


def _model_from_checkpoint(path, cfg: ExperimentConfig | None):
    from .models.detector import PicoDet
    state, meta = read_checkpoint(path)
    if cfg is None:
        if "config" not in meta:
            raise CheckpointError(f"{path}: no embedded config; pass --config")
        cfg = resolve_config(meta["config"], f"{path}:meta.config")
    model = PicoDet(cfg.model.detector_config())
    load_into(model, state)
    return model, cfg


def cmd_train(args) -> int:
    from .trainer import train
    cfg = _config(args)
    if args.iterations:
        cfg.train.iterations = args.iterations
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    dump_config(cfg, out / "config.yml")
    res = train(cfg, out, resume=args.resume)
    summary = f"trained {res.final_step} steps; checkpoint {res.checkpoint_path}"
    if res.eval is not None:
        summary += f"; mAP {res.eval.map:.3f} mAP50 {res.eval.map50:.3f}"
    print(summary)
    return EXIT_OK


def cmd_eval(args) -> int:
    index = load_coco_json(args.data)
    if args.predictions:
        records = read_jsonl(args.predictions)
    else:
        if not args.checkpoint:
            raise ConfigError("eval needs --checkpoint or --predictions")
        from .inference import predict
        cfg = load_config(args.config) if args.config else None
        model, cfg = _model_from_checkpoint(args.checkpoint, cfg)
        ds = InMemoryDataset(index)
        dets = predict(model, ds.images, args.size or cfg.train.eval_size)
        records = [d.to_json(info.id) for info, per in zip(index.images, dets) for d in per]
    result = evaluate_map(records, index)
    out = Path(args.out) if args.out else Path(args.checkpoint or args.predictions).with_suffix(".eval.json")
    out.write_text(json.dumps(result.to_dict(), indent=2))
    print(f"mAP(0.5:0.95) {result.map:.3f}  mAP(0.5) {result.map50:.3f}")
    return EXIT_OK


def _draw(image: np.ndarray, dets, path: Path) -> None:
    im = Image.fromarray(image)
    draw = ImageDraw.Draw(im)
    for d in dets:
        draw.rectangle(list(d.box), outline=(255, 0, 0))
        draw.text((d.box[0] + 2, d.box[1] + 2), f"{d.class_id}:{d.score:.2f}", fill=(255, 255, 0))
    im.save(path)


def cmd_infer(args) -> int:
    from .inference import head_config, predict
    cfg = load_config(args.config) if args.config else None
    model, cfg = _model_from_checkpoint(args.checkpoint, cfg)
    files = sorted(p for p in Path(args.images).iterdir() if p.suffix.lower() in IMAGE_SUFFIXES)
    images = []
    for p in files:
        with Image.open(p) as im:
            images.append(np.asarray(im.convert("RGB")))
    overrides = {} if args.score_threshold is None else {"score_threshold": args.score_threshold}
    dets = predict(model, images, args.size or cfg.train.eval_size, cfg=head_config(model, **overrides)) if images else []
    out = Path(args.out)
    out.parent.mkdir(parents=True, exist_ok=True)
    n = write_jsonl(out, [(p.name, d) for p, d in zip(files, dets)])
    if args.draw:
        draw_dir = Path(args.draw)
        draw_dir.mkdir(parents=True, exist_ok=True)
        for p, im, d in zip(files, images, dets):
            _draw(im, d, draw_dir / p.name)
    print(f"{n} detections on {len(files)} images -> {out}")
    return EXIT_OK


def cmd_supernet_train(args) -> int:
    from .nas import SupernetTrainer
    cfg = _config(args)
    if args.steps:
        cfg.nas.supernet_steps = args.steps
    path = SupernetTrainer(cfg, args.out).run()
    print(f"supernet trained {cfg.nas.supernet_steps} steps -> {path}")
    return EXIT_OK


def cmd_search(args) -> int:
    from . import nas
    cfg = _config(args)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    supernet = nas.build_supernet(cfg)
    length = nas.num_genes(supernet)
    estimator = nas.FlopsEstimator(supernet, cfg.nas.input_size)
    budget = nas.budget_from_config(cfg, estimator, length, args.budget_flops)
    nas.check_feasible(estimator, length, cfg.nas.ratio_choices, budget)
    ckpt = Path(args.supernet) if args.supernet else out / "supernet.ckpt"
    if not ckpt.exists():
        raise CheckpointError(f"{ckpt}: supernet checkpoint not found (run supernet-train first)")
    state, _ = read_checkpoint(ckpt)
    load_into(supernet, state)
    val = nas.validation_subset(cfg, out)
    calib = nas.calibration_batches(InMemoryDataset(_train_index(cfg, out)), cfg.nas.bn_recalibration_batches,
                                    cfg.nas.input_size)
    evaluator = nas.ChildEvaluator(supernet, val, cfg.nas.input_size, calib)
    rng = np.random.default_rng(cfg.train.seed)
    res = nas.evolve(evaluator, estimator, length, cfg.nas.ratio_choices, budget, rng)
    nas.write_search_log(out / "search_log.jsonl", res.log)
    dump_config(nas.genotype_config(cfg, res.best), out / "best_genotype.yml")
    print(f"best genotype {list(res.best)} fitness {res.fitness:.3f} at {res.flops:.1f} MFLOPs "
          f"(budget {budget.max_flops:.1f})")
    return EXIT_OK


def _train_index(cfg, out):
    from .trainer import build_dataset
    return build_dataset(cfg, out)


def cmd_flops(args) -> int:
    from .flops import profile
    from .models.detector import PicoDet
    cfg = _config(args)
    prof = profile(PicoDet(cfg.model.detector_config()), args.input_size)
    print(f"params {prof.params / 1e6:.3f}M  FLOPs {prof.gflops:.3f}G  (MACs {prof.macs / 1e9:.3f}G) "
          f"at {args.input_size}x{args.input_size}")
    return EXIT_OK


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="picodet", description=__doc__.splitlines()[0])
    sub = p.add_subparsers(dest="command", required=True)

    t = sub.add_parser("train", help="train a detector")
    t.add_argument("--config")
    t.add_argument("--out", required=True)
    t.add_argument("--seed", type=int)
    t.add_argument("--resume")
    t.add_argument("--iterations", type=int, help="override train.iterations")
    t.set_defaults(func=cmd_train)

    e = sub.add_parser("eval", help="COCO mAP of a checkpoint or a detections file")
    e.add_argument("--config")
    e.add_argument("--checkpoint")
    e.add_argument("--predictions", help="Detection JSON lines instead of running a model")
    e.add_argument("--data", required=True, help="COCO-JSON annotations")
    e.add_argument("--size", type=int)
    e.add_argument("--out", help="per-class AP JSON")
    e.set_defaults(func=cmd_eval)

    i = sub.add_parser("infer", help="detect objects in a directory of images")
    i.add_argument("--config")
    i.add_argument("--checkpoint", required=True)
    i.add_argument("--images", required=True)
    i.add_argument("--out", required=True)
    i.add_argument("--size", type=int)
    i.add_argument("--score-threshold", type=float)
    i.add_argument("--draw", help="directory for annotated images")
    i.set_defaults(func=cmd_infer)

    s = sub.add_parser("supernet-train", help="sandwich-rule supernet training")
    s.add_argument("--config")
    s.add_argument("--out", required=True)
    s.add_argument("--seed", type=int)
    s.add_argument("--steps", type=int, help="override nas.supernet_steps")
    s.set_defaults(func=cmd_supernet_train)

    r = sub.add_parser("search", help="evolutionary channel search on a trained supernet")
    r.add_argument("--config")
    r.add_argument("--out", required=True)
    r.add_argument("--budget-flops", type=float, help="MFLOPs ceiling (default: nas.budget_fraction of full)")
    r.add_argument("--supernet", help="supernet checkpoint (default: OUT/supernet.ckpt)")
    r.add_argument("--seed", type=int)
    r.set_defaults(func=cmd_search)

    f = sub.add_parser("flops", help="parameter and FLOP count of the configured model")
    f.add_argument("--config")
    f.add_argument("--input-size", type=int, default=320)
    f.set_defaults(func=cmd_flops)
    return p


def main(argv=None) -> int:
    logging.basicConfig(level=os.environ.get("PICODET_LOG", "INFO").upper(),
                        format="%(levelname)s %(name)s: %(message)s")
    args = build_parser().parse_args(argv)
    from .nas import InfeasibleBudget
    try:
        return args.func(args)
    except ConfigError as e:
        print(f"config error: {e}", file=sys.stderr)
        return EXIT_CONFIG
    except CheckpointError as e:
        print(f"checkpoint error: {e}", file=sys.stderr)
        return EXIT_CHECKPOINT
    except InfeasibleBudget as e:
        print(f"search infeasible: {e}", file=sys.stderr)
        return EXIT_INFEASIBLE
    except (DatasetError, ValueError, OSError, RuntimeError) as e:
        print(f"error: {e}", file=sys.stderr)
        return EXIT_OTHER


if __name__ == "__main__":
    sys.exit(main())
