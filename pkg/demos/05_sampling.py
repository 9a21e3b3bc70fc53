#!/usr/bin/env python3
"""Top-k / nucleus / temperature filtering, shown on an explicit distribution."""

import numpy as np

from storyvae.sampling import SamplerConfig, filter_logits

probs = np.array([0.5, 0.3, 0.2])
logits = np.log(probs)
print("base distribution:", probs)

# Nucleus p=0.7 keeps the smallest high-probability prefix reaching 0.7.
cfg = SamplerConfig(top_k=3, top_p=0.7, temperature=1.0)
print("p=0.7 ->", filter_logits(logits, cfg))  # [0.625, 0.375, 0]

# k=1 collapses to the argmax.
print("k=1  ->", filter_logits(logits, SamplerConfig(top_k=1, top_p=1.0, temperature=1.0)))

# Temperature reshapes before any filtering.
for t in (0.5, 1.0, 2.0):
    out = filter_logits(logits, SamplerConfig(top_k=3, top_p=1.0, temperature=t))
    print(f"T={t}: {np.round(out, 4)}")

# Support grows monotonically with p.
rng = np.random.default_rng(0)
wild = rng.standard_normal(10)
for p in (0.3, 0.6, 0.9, 1.0):
    kept = np.flatnonzero(filter_logits(wild, SamplerConfig(top_k=10, top_p=p, temperature=1.0)) > 0)
    print(f"p={p}: support {[int(i) for i in kept]}")
