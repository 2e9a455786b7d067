"""Desk-scale shape classification: sphere / cube / cylinder / torus.

Defaults are a quick look (10 epochs, 20 + 10 clouds per class). The acceptance
setting is ``--epochs 60 --train 50 --test 25`` and takes about ten minutes.
"""

import argparse
import logging

from clcsca import data as D
from clcsca import model as M
from clcsca import train as T

ap = argparse.ArgumentParser()
ap.add_argument("--epochs", type=int, default=10)
ap.add_argument("--train", type=int, default=20)
ap.add_argument("--test", type=int, default=10)
ap.add_argument("--seed", type=int, default=0)
ap.add_argument("--variant", default="full", choices=("baseline", "clca", "csca", "full"))
args = ap.parse_args()
logging.basicConfig(level=logging.INFO, format="%(message)s")

train, test = D.make_dataset("classification", args.train, args.test, args.seed)
cfg = M.desk_classification().ablate(args.variant)
model = M.Model.create(cfg, T.stream(args.seed, "init"))
result = T.fit(model, train, test, T.classification_training(epochs=args.epochs, seed=args.seed))

print(f"final test OA {result.final['oa']:.3f}, ACC {result.final['acc']:.3f}")
print(f"best test OA {result.best['oa']:.3f} at epoch {result.best_epoch}")
