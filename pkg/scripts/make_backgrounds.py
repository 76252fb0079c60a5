"""Regenerate the bundled procedural background textures."""

import argparse
from pathlib import Path

import numpy as np

from lsnet.synthdata import BUNDLED_BACKGROUNDS, procedural_background, save_png


def main():
    ap = argparse.ArgumentParser(description=__doc__)
    ap.add_argument("--out", type=Path, default=BUNDLED_BACKGROUNDS)
    ap.add_argument("--count", type=int, default=8)
    ap.add_argument("--size", type=int, default=192)
    ap.add_argument("--seed", type=int, default=2024)
    args = ap.parse_args()
    args.out.mkdir(parents=True, exist_ok=True)
    rng = np.random.default_rng(args.seed)
    for i in range(args.count):
        save_png(procedural_background(rng, args.size), args.out / f"texture_{i:02d}.png")


if __name__ == "__main__":
    main()
