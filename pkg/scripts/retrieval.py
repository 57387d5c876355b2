"""Train text-to-video retrieval on the synthetic caption pairs and print R@k per epoch.

    python scripts/retrieval.py --out runs/retrieval [--set matching=global]
"""

import argparse

from sidenet.config import load_config
from sidenet.train import train

DEFAULTS = ["task=retrieval", "optim.epochs=150", "optim.warmup_epochs=10"]


def main():
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--out", default="runs/retrieval")
    ap.add_argument("--set", action="append", default=[], metavar="KEY=VALUE")
    args = ap.parse_args()
    result = train(load_config(None, DEFAULTS + args.set), out_dir=args.out)
    shown = result.metrics[:: max(1, len(result.metrics) // 15)]
    if shown[-1] is not result.metrics[-1]:
        shown.append(result.metrics[-1])
    for m in shown:
        print(f"epoch {m['epoch']:>3}  step {m['step']:>4}  loss {m['loss']:.4f}  "
              f"R@1 {m['R@1']:5.1f}  R@5 {m['R@5']:5.1f}  R@10 {m['R@10']:5.1f}  MdR {m['MdR']:.1f}")


if __name__ == "__main__":
    main()
