"""Pre-train on shapes, fine-tune on edit triplets, report locality and accuracy."""

import argparse
import json

from moeflow.experiments import edit_eval, train_editor

ap = argparse.ArgumentParser()
ap.add_argument("--tasks", nargs="+", default=["recolor"])
ap.add_argument("--pretrain-steps", type=int, default=300)
ap.add_argument("--edit-steps", type=int, default=1500)
ap.add_argument("--seed", type=int, default=0)
args = ap.parse_args()

model, enc = train_editor(tuple(args.tasks), args.pretrain_steps, args.edit_steps, args.seed)
print(json.dumps({task: edit_eval(model, enc, task) for task in args.tasks}, indent=2))
