"""How far can TPD move the classifier over one target stream?

Trains a GRT source model, runs TPD over each target domain and reports
the mean shift of the logit gap next to the mean distance from the
decision boundary.  The fraction of samples whose gap is smaller than
the shift bounds how many predictions TPD can flip.

    python3 scripts/tpd_headroom.py --seed 0 [--clf-lr 1e-3] [--steps 4]
"""

import argparse
from dataclasses import replace

import numpy as np

from gtta.backbone import extract_features
from gtta.config import ExperimentConfig
from gtta.harness import make_adapter, run_stream, train_source
from gtta.synthdata import default_benchmark


def main():
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--seed", type=int, default=0)
    ap.add_argument("--epochs", type=int, default=None)
    ap.add_argument("--clf-lr", type=float, default=None)
    ap.add_argument("--steps", type=int, default=None, help="TPD steps per batch")
    args = ap.parse_args()

    cfg = ExperimentConfig()
    tpd = cfg.tpd
    if args.clf_lr is not None:
        tpd = replace(tpd, clf_lr=args.clf_lr)
    if args.steps is not None:
        tpd = replace(tpd, steps_per_batch=args.steps)
    train = cfg.train if args.epochs is None else replace(cfg.train, epochs=args.epochs)
    cfg = replace(cfg, tpd=tpd, train=train)

    source, targets = default_benchmark(args.seed)
    model = train_source(cfg, source, args.seed, grt_enabled=True)
    W0 = model.params["backbone/clf_W"].data
    b0 = model.params["backbone/clf_b"].data
    gap = np.array([-1.0, 1.0])
    for ds in targets:
        Z = extract_features(model.params, ds.images, model.cfg)
        adapter = make_adapter("tpd", model, cfg, args.seed)
        probs = run_stream(adapter, Z, cfg.tpd.batch)
        before = (Z @ W0 + b0) @ gap
        after = adapter.state.logits(Z) @ gap
        shift = np.abs(after - before)
        acc0 = 100 * np.mean((before > 0) == ds.labels)
        acc1 = 100 * np.mean(np.argmax(probs, axis=1) == ds.labels)
        print(f"{ds.name:7s} |gap| {np.abs(before).mean():.3f}  shift {shift.mean():.3f}  "
              f"flippable {100 * np.mean(np.abs(before) < shift):4.1f}%  acc {acc0:.1f} -> {acc1:.1f}")


if __name__ == "__main__":
    main()
