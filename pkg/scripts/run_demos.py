#!/usr/bin/env python3
"""Run the bundled continuation scenarios end to end.

Outputs (branch CSV, SVG, VTK snapshots, adaptation log) land in out/<name>/.
The 3D scenario takes several minutes; pass --skip-3d to leave it out.
"""
import argparse
import os
import sys
import time

sys.path.insert(0, os.path.join(os.path.dirname(__file__), "..", "src"))

from anisocont.cli import main as cli_main

CONFIGS = ["ac2d_cos.cfg", "ac2d_wspot.cfg", "ac3d_wspot.cfg"]


def main():
    parser = argparse.ArgumentParser(description=__doc__)
    parser.add_argument("--skip-3d", action="store_true")
    parser.add_argument("--only", choices=[c[:-4] for c in CONFIGS])
    args = parser.parse_args()
    cfg_dir = os.path.join(os.path.dirname(__file__), "..", "configs")
    status = 0
    for name in CONFIGS:
        if args.skip_3d and name.startswith("ac3d"):
            continue
        if args.only and name != args.only + ".cfg":
            continue
        t0 = time.time()
        print(f"=== {name} ===")
        rc = cli_main(["run", os.path.join(cfg_dir, name)])
        print(f"    exit={rc}  ({time.time() - t0:.0f}s)")
        status = status or rc
    return status


if __name__ == "__main__":
    sys.exit(main())
