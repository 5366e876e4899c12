"""Synthetic weakly labelled utterances: concatenated turns vs full overlap."""

import tempfile
from pathlib import Path

import numpy as np

from tvector.data import DatasetConfig, SpeakerPool, build_dataset, make_concat, make_overlap

rng = np.random.default_rng(1)
pool = SpeakerPool.synthetic(6, 20, rng, sigma=0.3)

turns = make_concat(pool, [0, 4, 2], T=300, rng=rng)
print("concat label", turns.label, "blocks", turns.blocks)
# each block sits near its own speaker's mean
for (spk, lo, hi) in turns.blocks:
    print(f"  speaker {spk}: frames {lo}-{hi}, distance to mean "
          f"{np.linalg.norm(turns.features[lo:hi].mean(0) - pool.means[spk]):.3f}")

mixed = make_overlap(pool, [1, 3], T=300, rng=rng)
target = pool.means[[1, 3]].mean(0)
print("overlap label", mixed.label, "distance to averaged means",
      round(float(np.linalg.norm(mixed.features.mean(0) - target)), 3))

with tempfile.TemporaryDirectory() as tmp:
    train, test = build_dataset(DatasetConfig(n_speakers=6, frames=300, n_train=4, n_test=2), tmp)
    print((Path(tmp) / "train.manifest").read_text())
