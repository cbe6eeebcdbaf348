"""Write a toy image corpus (PGM files + JSONL manifest + score sidecars).

Every base image gets ``--dups`` near copies (small brightness/noise jitter),
and a few flat images are mixed in for the bytes-per-pixel filter.
"""

import argparse
import json
from pathlib import Path

import numpy as np

from moeflow.data import ShapeSpec, ToyDataset, to_uint8, write_pgm


def main():
    ap = argparse.ArgumentParser()
    ap.add_argument("--out", default="corpus")
    ap.add_argument("--n", type=int, default=200, help="distinct base images")
    ap.add_argument("--dups", type=int, default=1, help="near copies per base image")
    ap.add_argument("--flat", type=int, default=10, help="constant images appended")
    ap.add_argument("--size", type=int, default=32)
    ap.add_argument("--seed", type=int, default=0)
    args = ap.parse_args()

    out = Path(args.out)
    (out / "img").mkdir(parents=True, exist_ok=True)
    rng = np.random.default_rng(args.seed)
    shapes = ToyDataset("shapes", shape_spec=ShapeSpec(class_regions=False))
    images = []
    for i in range(args.n):
        base = shapes.sample(rng, 1, args.size).latents[0, 0] + 0.15 * rng.standard_normal((args.size, args.size))
        images.append(("base", i, base))
        for _ in range(args.dups):
            copy = base + 0.01 + 0.005 * rng.standard_normal(base.shape)
            images.append(("copy", i, copy))
    for _ in range(args.flat):
        images.append(("flat", -1, np.full((args.size, args.size), rng.uniform(0, 1))))

    order = rng.permutation(len(images))
    with open(out / "manifest.jsonl", "w") as man, open(out / "aesthetic.jsonl", "w") as aes:
        for new_id, k in enumerate(order):
            kind, src, img = images[k]
            name = f"img/{new_id:05d}.pgm"
            write_pgm(out / name, to_uint8(img, -0.5, 1.5))
            man.write(json.dumps({"id": new_id, "path": name, "metadata": {"kind": kind, "source": str(src)}}) + "\n")
            aes.write(json.dumps({"id": new_id, "score": float(rng.uniform(0, 10))}) + "\n")
    print(f"wrote {len(images)} images to {out}")


if __name__ == "__main__":
    main()
