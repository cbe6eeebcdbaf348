"""Distill a 4-step student from a Gaussian teacher; compare W1 with the truncated teacher."""

import argparse
import json

from moeflow.experiments import desk_encoder, distill_gaussian, train_gaussian_teacher
from moeflow.model import load_model

ap = argparse.ArgumentParser()
ap.add_argument("--teacher", help="teacher checkpoint (trained from scratch when omitted)")
ap.add_argument("--steps", type=int, default=300)
ap.add_argument("--lambda-adv", type=float, default=0.1)
ap.add_argument("--seed", type=int, default=1)
args = ap.parse_args()

if args.teacher:
    teacher, _ = load_model(args.teacher)
else:
    teacher = train_gaussian_teacher().model
res = distill_gaussian(teacher, desk_encoder(teacher.cfg), steps=args.steps, seed=args.seed, lambda_adv=args.lambda_adv)
print(json.dumps({k: v for k, v in res.items() if k not in ("metrics", "student")}, indent=2))
