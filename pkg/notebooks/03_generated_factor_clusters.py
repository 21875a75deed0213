"""
Do generated factors cluster by object?
=======================================

After a short stage-2 run, every test sample gets its own generated
factors (A0, B0) from the hypernetwork. This projects them to 2-D and
compares between-group and within-group distances for objects and for
defect classes.
"""

import numpy as np

from amoelora.adapters import AdapterConfig
from amoelora.cli import inspect_adapters
from amoelora.metrics import pca2, separation_ratio
from amoelora.model import ModelConfig, TinyTransformer
from amoelora.synthdata import TaskConfig, gen_split
from amoelora.trainpipe import TrainConfig, run_stage

task = TaskConfig(n_domains=3, objects_per_domain=2, defect_classes=4, n_samples=2000, seed=2)
train, test = gen_split(task)
cfg = ModelConfig(vocab_size=task.vocab_size, d_model=32, n_layers=1, n_heads=4, max_seq=32,
                  adapter=AdapterConfig(n_experts=8, rank=4))
m = TinyTransformer(cfg, seed=0)
run_stage(m, train, TrainConfig(stage=1, steps=200))
run_stage(m, train, TrainConfig(stage=2, steps=300))

factors = inspect_adapters(m, test)
print("factor matrix:", factors.shape, "(samples x concatenated A0 and B0 entries)")

xy = pca2(factors)
objects = [s.object_key for s in test]
for key in sorted(set(objects)):
    pts = xy[[o == key for o in objects]]
    print("object %s  centre (%+.3f, %+.3f)  n=%d" % (key, *pts.mean(axis=0), len(pts)))

print("separation by object: %.3f" % separation_ratio(factors, objects))
print("separation by defect: %.3f" % separation_ratio(factors, [s.defect_id for s in test]))

# A shuffled labelling gives a ratio close to 1.
rng = np.random.default_rng(0)
print("shuffled object labels: %.3f" % separation_ratio(factors, rng.permutation(len(objects)) % len(set(objects))))
