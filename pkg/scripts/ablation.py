"""Train the recognition model with temporal components switched off one at a time.

Prints a CSV: arm, temporal_module, cls_shift, patch_embed_temporal_kernel, final top-1.
"""

import argparse
import csv
import sys

from sidenet.config import load_config
from sidenet.train import train

ARMS = {
    "full": [],
    "no_temporal_module": ["side.temporal_module=none"],
    "no_cls_shift": ["side.cls_shift=false"],
    "no_temporal_module_no_cls_shift": ["side.temporal_module=none", "side.cls_shift=false"],
    "frame_independent": ["side.temporal_module=none", "side.cls_shift=false", "side.patch_embed_temporal_kernel=1"],
    "temporal_attention": ["side.temporal_module=temporal_attention"],
}


def main():
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--set", action="append", default=[], metavar="KEY=VALUE", help="applied to every arm")
    ap.add_argument("--arms", nargs="*", default=list(ARMS), choices=list(ARMS))
    args = ap.parse_args()
    w = csv.writer(sys.stdout, lineterminator="\n")
    w.writerow(["arm", "temporal_module", "cls_shift", "patch_embed_temporal_kernel", "top1"])
    for arm in args.arms:
        cfg = load_config(None, args.set + ARMS[arm])
        final = train(cfg).metrics[-1]
        s = cfg.side
        w.writerow([arm, s.temporal_module, s.cls_shift, s.patch_embed_temporal_kernel, f"{final['top1']:.2f}"])
        sys.stdout.flush()


if __name__ == "__main__":
    main()
