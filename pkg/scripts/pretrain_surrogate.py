"""Pretrain the narrow residual network on the synthetic source task.

The result replaces large-scale pretrained weights when none are available
locally. Default output is the copy shipped with the package.

    python3 scripts/pretrain_surrogate.py --epochs 30
"""

import argparse
import time
from pathlib import Path

from batterysort.backbone import packaged_weights_path
from batterysort.synthetic import pretrain_surrogate


def main():
    parser = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    parser.add_argument("--out", type=Path, default=packaged_weights_path("resnet-mini"))
    parser.add_argument("--epochs", type=int, default=30)
    parser.add_argument("--pool-size", type=int, default=6000)
    parser.add_argument("--refresh", type=int, default=2000)
    parser.add_argument("--seed", type=int, default=0)
    args = parser.parse_args()
    t0 = time.time()
    path = pretrain_surrogate(args.out, pool_size=args.pool_size, refresh=args.refresh, epochs=args.epochs,
                              seed=args.seed, log=lambda msg: print(msg, flush=True))
    print(f"wrote {path} in {time.time() - t0:.0f}s")


if __name__ == "__main__":
    main()
