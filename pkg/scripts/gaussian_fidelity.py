"""Train the desk teacher on N(0.8, 0.3^2) latents and report sample statistics."""

import argparse
import json
import time

from moeflow.experiments import sample_stats, train_gaussian_teacher
from moeflow.model import save_model

ap = argparse.ArgumentParser()
ap.add_argument("--steps", type=int, default=2000)
ap.add_argument("--seed", type=int, default=0)
ap.add_argument("--save", help="write the trained teacher checkpoint here")
args = ap.parse_args()

t0 = time.perf_counter()
run = train_gaussian_teacher(args.steps, args.seed)
train_s = time.perf_counter() - t0
stats = sample_stats(run.model, run.encoder)
if args.save:
    save_model(args.save, run.model, "teacher")
print(json.dumps({
    "train_seconds": round(train_s, 1),
    "first_loss": run.losses[0],
    "final_loss_avg100": sum(run.losses[-100:]) / 100,
    "sample_mean": stats["mean"],
    "sample_std": stats["std"],
    "w1": stats["w1"],
}, indent=2))
