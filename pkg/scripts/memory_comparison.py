"""Training-memory comparison of full fine-tuning, adapters and side-tuning across backbone scales.

Side networks follow the reference proportions (width D/4, depth L/2); adapters
use a 64-wide bottleneck. Writes the comparison CSV (one block per backbone).
"""

import argparse
import sys

from sidenet.memory import StrategyDescriptor, compare_strategies, comparison_csv
from sidenet.side import SideConfig
from sidenet.vit import ViTConfig

SCALES = [  # (layers, dim, heads)
    (2, 32, 2),
    (4, 64, 4),
    (6, 128, 4),
    (12, 256, 8),
    (12, 768, 12),
    (24, 1024, 16),
]


def main():
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--batch", type=int, default=8)
    ap.add_argument("--frames", type=int, default=8)
    ap.add_argument("--image", type=int, default=224)
    ap.add_argument("--patch", type=int, default=16)
    ap.add_argument("--measured", action="store_true", help="run real steps (only sensible for small scales)")
    ap.add_argument("--out", help="CSV path (default stdout)")
    args = ap.parse_args()
    chunks = []
    for L, D, H in SCALES:
        vit = ViTConfig(image_size=args.image, patch_size=args.patch, layers=L, dim=D, heads=H)
        side = SideConfig(layers=max(1, L // 2), dim=D // 4, heads=max(1, H // 2))
        common = dict(backbone=vit, batch=args.batch, frames=args.frames)
        descs = [StrategyDescriptor("full_ft", **common), StrategyDescriptor("adapter", **common),
                 StrategyDescriptor("side_tuning", side=side, **common)]
        text = comparison_csv(compare_strategies(descs, measured=args.measured))
        chunks.append(text if not chunks else text.split("\n", 1)[1])
    out = "".join(chunks)
    if args.out:
        with open(args.out, "w") as fh:
            fh.write(out)
    else:
        sys.stdout.write(out)


if __name__ == "__main__":
    main()
