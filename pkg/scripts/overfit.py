"""Overfit the tiny recognition model on the synthetic motion clips.

    python scripts/overfit.py --out runs/overfit [--set side.dim=32 ...]
"""

import argparse
import time

from sidenet.config import load_config
from sidenet.train import train


def main():
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--out", default="runs/overfit")
    ap.add_argument("--set", action="append", default=[], metavar="KEY=VALUE")
    args = ap.parse_args()
    cfg = load_config(None, args.set)
    t0 = time.process_time()
    result = train(cfg, out_dir=args.out)
    shown = result.metrics[:: max(1, len(result.metrics) // 10)]
    if shown[-1] is not result.metrics[-1]:
        shown.append(result.metrics[-1])
    for m in shown:
        print(f"epoch {m['epoch']:>3}  step {m['step']:>4}  loss {m['loss']:.4f}  top1 {m['top1']:5.1f}")
    print(f"cpu {time.process_time() - t0:.1f}s; artifacts in {args.out}")


if __name__ == "__main__":
    main()
