"""
Adapter mechanics on a single projection
========================================

Builds one adapter of each variant on a width-8 projection and looks at
what each branch adds: the routed LoRA experts and the conditioned
anomaly branch.
"""

import numpy as np

from amoelora import diffcore as dc
from amoelora.adapters import (AdapterConfig, AmoeLoraAdapter, amoe_forward, anomaly_forward,
                               generalist_forward, route)

rng = np.random.default_rng(0)
d = 8
x = dc.constant(rng.normal(size=(5, d)))   # 5 tokens
o0 = dc.constant(rng.normal(size=(5, d)))  # what the frozen projection produced

# A fresh adapter adds exact zeros: B and W_b start at zero.
full = AmoeLoraAdapter(d, AdapterConfig(n_experts=4, rank=2), rng)
print("fresh adapter changes o0:", not np.array_equal(amoe_forward(full, o0, x).value, o0.value))

# Give every parameter some values so the branches have something to say.
for p in full.named_parameters().values():
    p.value[...] = rng.normal(0.0, 0.3, p.value.shape)

# Router: one softmax row per token over the four experts.
w = route(full.router, x).value
print("router weights (rows sum to 1):")
print(np.round(w, 3))

# Generalist branch: router-weighted sum of the experts' low-rank updates.
o1 = generalist_forward(full, x).value

# Anomaly branch: a hypernetwork turns a conditioning row into the rank-1
# matrix H, which shapes generated factors A0 = W_a H and B0 = H W_b.
c = dc.mean_rows(x)
o2, factors = anomaly_forward(full, x, c)
print("generated A0 shape", factors.A0.shape, "B0 shape", factors.B0.shape)
print("|o1| = %.3f   |o2| = %.3f" % (np.linalg.norm(o1), np.linalg.norm(o2.value)))

# A different conditioning row gives different generated factors.
_, other = anomaly_forward(full, x, dc.constant(rng.normal(size=(1, d))))
print("factor change under new conditioning: %.3f" % np.linalg.norm(other.A0 - factors.A0))

# With the default causal conditioning, token t only sees tokens 0..t.
changed = x.value.copy()
changed[3:] += 5.0
a = amoe_forward(full, o0, x).value
b = amoe_forward(full, o0, dc.constant(changed)).value
print("rows 0-2 unchanged after editing rows 3-4:", np.array_equal(a[:3], b[:3]))

# Doubling alpha doubles everything the adapter adds.
zero = dc.constant(np.zeros((5, d)))
before = amoe_forward(full, zero, x).value
full.alpha *= 2
print("alpha doubling is exact:", np.array_equal(amoe_forward(full, zero, x).value, 2 * before))
