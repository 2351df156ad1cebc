#!/usr/bin/env python3

"""
Write the synthetic datasets used for smoke runs when no CIFAR-10 download is at hand.
"""

import os
import sys

import numpy as np

# ============================================================
# HARD-CODED PATHS
# ============================================================
SCRIPT_DIR = os.path.dirname(os.path.abspath(__file__))
sys.path.insert(0, os.path.join(SCRIPT_DIR, "run"))
OUTPUT_DIR = os.path.join(SCRIPT_DIR, "fixtures")
SEED = 20240601

from vn_data import synthetic_images, write_cifar_binary, write_raw_tensor  # noqa: E402
from vn_helpers import atomic_write_json  # noqa: E402


# ============================================================
# FIXTURE TABLE
# ============================================================
# name -> (file, image shape, count, format)
FIXTURES = {
    "toy": ("toy_4x4x1.vft", (4, 4, 1), 256, "vft1"),
    "desk": ("desk_8x8x3.vft", (8, 8, 3), 2000, "vft1"),
    "cifar_like": ("cifar_like.bin", (32, 32, 3), 64, "cifar"),
}


def write_fixture(name, rng):
    filename, shape, count, fmt = FIXTURES[name]
    path = os.path.join(OUTPUT_DIR, filename)
    batch = synthetic_images(count, shape, rng)
    if fmt == "cifar":
        labels = rng.integers(0, 10, size=count)
        write_cifar_binary(path, batch, labels)
    else:
        write_raw_tensor(path, batch.pixels.astype(np.float32))
    print(f"   - {filename}: {count} images of {shape[0]}x{shape[1]}x{shape[2]}")
    return {"file": filename, "shape": list(shape), "count": count, "format": fmt}


# ============================================================
# MAIN
# ============================================================
def main():
    os.makedirs(OUTPUT_DIR, exist_ok=True)
    rng = np.random.default_rng(SEED)
    print(f"📂 Writing fixtures to '{OUTPUT_DIR}' (seed={SEED})")
    manifest = {name: write_fixture(name, rng) for name in FIXTURES}
    atomic_write_json(os.path.join(OUTPUT_DIR, "fixture_manifest.json"), {"seed": SEED, "fixtures": manifest})
    print("✅ Done.")


if __name__ == "__main__":
    main()
