"""Run the regime comparison, trainable-layer sweep and dropout sweep on the
in-memory surrogate data and write tables and plots.

    python3 scripts/run_surrogate_protocol.py out/ --runs 10 --studies regimes,layers,dropout
"""

import argparse
import logging
import time
from pathlib import Path

from batterysort.backbone import load_pretrained, packaged_weights_path
from batterysort.experiments import benchmark, sweep_dropout, sweep_trainable_layers
from batterysort.synthetic import target_imageset
from batterysort.training import reduced_schedules


def main():
    parser = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    parser.add_argument("out", type=Path)
    parser.add_argument("--runs", type=int, default=10)
    parser.add_argument("--studies", default="regimes,layers,dropout")
    parser.add_argument("--stage1-epochs", type=int, default=30)
    parser.add_argument("--stage2-epochs", type=int, default=10)
    parser.add_argument("--weights", type=Path, default=packaged_weights_path("resnet-mini"))
    parser.add_argument("--jobs", type=int, default=1)
    parser.add_argument("--resume", action="store_true")
    args = parser.parse_args()
    logging.basicConfig(level=logging.INFO, format="%(asctime)s %(message)s")

    data = target_imageset()
    source = load_pretrained(args.weights)
    kw = dict(n_runs=args.runs, schedules=reduced_schedules(args.stage1_epochs, args.stage2_epochs),
              save_checkpoints=False, resume=args.resume, jobs=args.jobs)
    args.out.mkdir(parents=True, exist_ok=True)
    studies = args.studies.split(",")
    t0 = time.time()
    if "regimes" in studies:
        for name, res in benchmark(data, source, out_dir=args.out, **kw).items():
            print(f"{name:>13}: mean {res.report.mean:.3f} best {res.report.best:.3f} sd {res.report.sd:.3f}")
    if "layers" in studies:
        for depth, res in sweep_trainable_layers(data, source, out_dir=args.out, **kw).items():
            print(f"depth {depth}: mean {res.report.mean:.3f} sd {res.report.sd:.3f}")
    if "dropout" in studies:
        rows = sweep_dropout(data, source, out_dir=args.out, **kw)
        for rate in sorted({r[0] for r in rows}):
            tr = [r[2] for r in rows if r[0] == rate]
            te = [r[3] for r in rows if r[0] == rate]
            print(f"dropout {rate:.1f}: train {sum(tr) / len(tr):.3f} test {sum(te) / len(te):.3f}")
    print(f"done in {time.time() - t0:.0f}s -> {args.out}")


if __name__ == "__main__":
    main()
