"""Write the nine-class surrogate corpus (plus others) as PNG directories and a
matching config file, ready for the ``batterysort`` command line.

    python3 scripts/make_surrogate_corpus.py demo/
    batterysort benchmark --config demo/surrogate.cfg --regimes all
"""

import argparse
from pathlib import Path

from batterysort.synthetic import TARGET_COMBOS, others_pool, render_set, target_class_names, write_corpus

CONFIG = """[dataset]
root = data

[model]
arch = resnet-mini
dropout = 0.20
v_depth = 2

[training]
stage1_epochs = {stage1}
stage2_epochs = {stage2}

[experiment]
n_runs = 10
output_dir = runs
"""


def main():
    parser = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    parser.add_argument("out", type=Path)
    parser.add_argument("--per-class", type=int, default=50)
    parser.add_argument("--others", type=int, default=50)
    parser.add_argument("--seed", type=int, default=11)
    parser.add_argument("--stage1-epochs", type=int, default=30)
    parser.add_argument("--stage2-epochs", type=int, default=10)
    args = parser.parse_args()
    images, labels = render_set(TARGET_COMBOS, args.per_class, args.seed)
    write_corpus(args.out / "data", images, labels, target_class_names(), others=others_pool(args.others, args.seed + 1))
    (args.out / "surrogate.cfg").write_text(CONFIG.format(stage1=args.stage1_epochs, stage2=args.stage2_epochs))
    print(f"{len(images)} images in 9 classes + {args.others} others -> {args.out / 'data'}")


if __name__ == "__main__":
    main()
