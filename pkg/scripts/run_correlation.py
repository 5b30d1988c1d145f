#!/usr/bin/env python3
"""Correlation study: filter sensitivity correlations under bounded noise.

Runs the correlate command on a 32x32 synthetic corpus by default; pass
--data-dir with the CIFAR-10 binary batches to measure natural images
instead (100 test images, noise up to 20/255).
"""

import argparse
import sys

from fenet import cli


def main() -> int:
    parser = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    parser.add_argument("--out-dir", default="runs/correlation")
    parser.add_argument("--data-dir", help="CIFAR-10 directory; synthetic corpus when omitted")
    args = parser.parse_args()
    argv = ["correlate", "--out-dir", args.out_dir]
    if args.data_dir:
        argv += ["--tag", "cifar", "--set", 'dataset.kind="cifar10"', "--data-dir", args.data_dir]
    else:
        argv += [
            "--tag", "synth",
            "--set", "dataset.test_per_class=25",
            "--set", "dataset.size=32",
            "--set", "dataset.test_seed=404",
        ]
    return cli.main(argv)


if __name__ == "__main__":
    sys.exit(main())
