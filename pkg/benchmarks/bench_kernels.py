"""Compiled vs pure-Python kernel timings, plus one training step for scale.

Usage: python benchmarks/bench_kernels.py [--repeat N]
"""
import argparse
import time

import numpy as np

from picodet import kernels


def random_boxes(rng, n, size=320.0):
    xy = rng.uniform(0, size, (n, 2))
    return np.concatenate([xy, xy + rng.uniform(2, size / 3, (n, 2))], axis=1)


def timeit(fn, repeat):
    fn()
    best = float("inf")
    for _ in range(repeat):
        t0 = time.perf_counter()
        fn()
        best = min(best, time.perf_counter() - t0)
    return best


def cases(rng):
    a, b = random_boxes(rng, 2000), random_boxes(rng, 20)
    boxes = random_boxes(rng, 1000)
    scores = rng.uniform(0, 1, 1000)
    labels = rng.integers(0, 80, 1000)
    cost = rng.uniform(0, 10, (2000, 20))
    cand = (rng.random((2000, 20)) < 0.1).astype(np.uint8)
    ks = rng.integers(1, 10, 20)
    ious = rng.uniform(0, 1, (100, 20))
    thr = np.linspace(0.5, 0.95, 10)
    return {
        "box_iou_matrix 2000x20": lambda k: k.box_iou_matrix(a, b),
        "box_giou_matrix 2000x20": lambda k: k.box_giou_matrix(a, b),
        "batched_nms 1000 boxes": lambda k: k.batched_nms(boxes, scores, labels, 0.6, 100),
        "simota_select 2000x20": lambda k: k.simota_select(cost, cand, ks),
        "coco_match 100x20": lambda k: k.coco_match(ious, thr),
    }


def train_step_time(repeat):
    import tempfile

    from picodet.config import resolve_config
    from picodet.trainer import Trainer

    cfg = resolve_config({
        "model": {"num_classes": 3, "width_multiplier": 0.25, "channel_ratios": None, "neck_out_channels": 48},
        "train": {"iterations": repeat + 1, "batch_size": 8, "input_sizes": [128], "eval_size": 128,
                  "augment": False, "warmup_iters": 0},
        "data": {"synthetic": {"num_images": 16, "image_size": 128}},
    })
    with tempfile.TemporaryDirectory() as d:
        tr = Trainer(cfg, d)
        return timeit(tr.train_step, repeat)


def main():
    p = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    p.add_argument("--repeat", type=int, default=5)
    args = p.parse_args()
    py = kernels.get_backend("python")
    try:
        cy = kernels.get_backend("cython")
    except ImportError:
        cy = None
    print(f"{'kernel':<28}{'python ms':>12}{'cython ms':>12}{'speedup':>10}")
    for name, fn in cases(np.random.default_rng(0)).items():
        tp = timeit(lambda: fn(py), args.repeat) * 1e3
        tc = timeit(lambda: fn(cy), args.repeat) * 1e3 if cy else float("nan")
        print(f"{name:<28}{tp:>12.3f}{tc:>12.3f}{tp / tc:>10.1f}")
    print(f"\none training step (width 0.25, batch 8, 128 px): {train_step_time(args.repeat) * 1e3:.0f} ms")


if __name__ == "__main__":
    main()
