"""Run the miniature network once and look inside: pyramid levels and attention maps."""

import numpy as np

from clcsca import attention as att
from clcsca import data as D
from clcsca import model as M

cfg = M.miniature("classification", num_classes=4)
model = M.Model.create(cfg, 0)
pc = D.gen_shape("torus", 64, 0.0, np.random.default_rng(1))

print("paths:", [(p.resolution, [l.radius for l in p.layers]) for p in cfg.paths])
plan = M.plan_cloud(pc, cfg)
for i, p in enumerate(plan.paths):
    sizes = [len(np.unique(n)) for n in p.neighbors[0]]
    print(f"path {i}: {len(p.indices)} points, distinct neighbours per ball (layer 1) {min(sizes)}..{max(sizes)}")

with att.capture_attention() as maps:
    logits = model(pc, plan=plan)
print(f"{len(maps)} attention matrices captured; shapes {sorted({m.shape for m in maps})}")
print("every row is a probability distribution:", all(np.allclose(m.sum(axis=1), 1) for m in maps))
print("untrained logits:", np.round(logits.data, 4))

# the same cloud in another order gives the same logits
perm = np.random.default_rng(2).permutation(64)
print("max change under permutation:", float(np.abs(model(pc.take(perm)).data - logits.data).max()))
