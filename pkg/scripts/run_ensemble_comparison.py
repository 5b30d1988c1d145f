#!/usr/bin/env python3
"""Ensemble comparison: minimum- vs maximum-correlation filter choices.

Trains the full filter bank on the desk synthetic dataset, evaluates
both ensemble plans under the summed-gradient attack across the epsilon
ladder, and certifies the minimum-correlation members.
"""

import argparse
import os
import sys

from fenet import cli

CONFIG = os.path.join(os.path.dirname(__file__), "desk_config.json")


def main() -> int:
    parser = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    parser.add_argument("--out-dir", default="runs/ensembles")
    args = parser.parse_args()
    common = ["--config", CONFIG, "--out-dir", args.out_dir]
    rc = cli.main(["train", *common, "--tag", "desk"])
    if rc:
        return rc
    for plan in ("mincorr", "maxcorr"):
        rc = cli.main(["ensemble-eval", *common, "--tag", plan,
                       "--set", f'ensemble.plan="{plan}"',
                       "--set", 'attack.bpda="adjoint"'])
        if rc:
            return rc
    return cli.main(["certify", *common, "--tag", "mincorr",
                     "--set", "certify.num_inputs=100"])


if __name__ == "__main__":
    sys.exit(main())
