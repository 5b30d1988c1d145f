#!/usr/bin/env python3
"""Transfer study: attack the unfiltered model, evaluate every sub-model.

Trains one sub-model per filter on the desk synthetic dataset, then
crafts FGSM and PGD adversarial examples against the identity model and
tabulates each target's accuracy across the epsilon ladder.
"""

import argparse
import os
import sys

from fenet import cli

CONFIG = os.path.join(os.path.dirname(__file__), "desk_config.json")


def main() -> int:
    parser = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    parser.add_argument("--out-dir", default="runs/transfer")
    args = parser.parse_args()
    common = ["--config", CONFIG, "--out-dir", args.out_dir]
    rc = cli.main(["train", *common, "--tag", "desk"])
    if rc:
        return rc
    for method in ("fgsm", "pgd"):
        rc = cli.main(["transfer", *common, "--tag", method,
                       "--set", f'attack.method="{method}"'])
        if rc:
            return rc
    return 0


if __name__ == "__main__":
    sys.exit(main())
