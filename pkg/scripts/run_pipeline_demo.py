#!/usr/bin/env python3
"""End-to-end demo: synthesize a dataset, train briefly, evaluate, print CSVs.

A compressed tour of the CLI surface; the overfit script is the one that
actually reaches the quality target.
"""

import subprocess
import sys
import tempfile
from pathlib import Path


def run(*args):
    cmd = [sys.executable, "-m", "triseg.cli", *args]
    print("$", " ".join(str(a) for a in cmd[2:]))
    subprocess.run(cmd, check=True)


def main():
    with tempfile.TemporaryDirectory() as td:
        root = Path(td)
        run("synth", "--seed", "7", "--classes", "3", "--count", "2", "--size", "32", "--out", root / "data")
        run("train", "--data", root / "data", "--steps", "100", "--precision", "f32",
            "--out", root / "run", "--ckpt-every", "0")
        run("eval", "--data", root / "data", "--checkpoint", root / "run" / "model.ckpt",
            "--fallback-synth-embeddings", "--out", root / "metrics.csv")
        print((root / "metrics.csv").read_text())
    return 0


if __name__ == "__main__":
    sys.exit(main())
