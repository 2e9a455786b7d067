"""Desk-scale part segmentation on mug / lamp / table stand-ins.

Defaults are a quick look; ``--epochs 60`` with the default data size is the
acceptance setting.
"""

import argparse
import logging

from clcsca import data as D
from clcsca import model as M
from clcsca import train as T

ap = argparse.ArgumentParser()
ap.add_argument("--epochs", type=int, default=10)
ap.add_argument("--train", type=int, default=D.DEFAULT_SPLITS["segmentation"][0])
ap.add_argument("--test", type=int, default=D.DEFAULT_SPLITS["segmentation"][1])
ap.add_argument("--seed", type=int, default=0)
args = ap.parse_args()
logging.basicConfig(level=logging.INFO, format="%(message)s")

train, test = D.make_dataset("segmentation", args.train, args.test, args.seed)
model = M.Model.create(M.desk_segmentation(), T.stream(args.seed, "init"))
result = T.fit(model, train, test, T.segmentation_training(epochs=args.epochs, seed=args.seed))

m = result.final
print(f"instance mIoU {m['instance_miou']:.3f}, class mIoU {m['class_miou']:.3f}, point accuracy {m['point_acc']:.3f}")
for cat, iou in sorted(m["category_iou"].items()):
    print(f"  {cat:<6} {iou:.3f}")
