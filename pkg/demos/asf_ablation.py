"""Ablate the auxiliary supervision on the synthetic benchmark.

Trains the four variants (full, no auxiliary boxes, raw auxiliary boxes,
objectness on the last layer) for one seed and prints their open-world
metrics side by side.  Full-length runs take a few minutes each on a CPU.

    python3 demos/asf_ablation.py --steps 1500 --seed 0
"""

import argparse
import time

import torch

from owdet.benchmark import VARIANTS, TrendSetting, evaluate_variant, train_variant, trend_data

parser = argparse.ArgumentParser()
parser.add_argument("--steps", type=int, default=TrendSetting.steps)
parser.add_argument("--seed", type=int, default=0)
parser.add_argument("--variants", nargs="+", default=list(VARIANTS), choices=VARIANTS)
args = parser.parse_args()
torch.set_num_threads(1)

setting = TrendSetting(steps=args.steps)
data = trend_data(args.seed, setting)
print(f"{len(data[0])} training images, {sum(len(v) for v in data[1].values())} auxiliary boxes, {len(data[2])} test images")

print(f"{'variant':<12}{'mAP':>8}{'U-Recall':>10}{'WI':>8}{'A-OSE':>7}{'sec':>7}")
for variant in args.variants:
    t = time.perf_counter()
    model, cfg = train_variant(args.seed, variant, setting, data)
    r = evaluate_variant(model, cfg, data[2])
    wi = f"{r.WI:.3f}" if r.WI is not None else "-"
    print(f"{variant:<12}{r.mAP_both:>8.3f}{r.U_recall:>10.3f}{wi:>8}{r.A_OSE:>7d}{time.perf_counter() - t:>7.0f}")
