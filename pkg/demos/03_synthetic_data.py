"""
Synthetic lesion volumes and their sentences
============================================

Each case is a 32^3 volume with one to three Gaussian blobs, each placed in
one of five brain zones, plus a tabular record rendered as a sentence.
"""

import numpy as np

from clip3d.synthdata import generate_cases, preprocess, split_dataset, zone_masks
from clip3d.text import REGIONS, record_to_sentence

cases = generate_cases(80, seed=0)
ds = split_dataset(cases, np.random.default_rng([0, 4]))
print(len(ds.train), "train /", len(ds.test), "test")

for case in cases[:3]:
    print(case.case_id, record_to_sentence(case.record))

# how often each zone carries a lesion
prevalence = {r.value: float(np.mean([r in c.record.label_set for c in cases])) for r in REGIONS}
print("prevalence", {k: round(v, 2) for k, v in prevalence.items()})

# lesion zones are visibly brighter than the rest after z-normalization
masks = zone_masks(32)
c = cases[0]
z = preprocess(c.volume)
for r, m in masks.items():
    tag = "lesion" if r in c.record.label_set else ""
    print(f"{r.value:10s} mean {z[m].mean():+.2f} {tag}")
