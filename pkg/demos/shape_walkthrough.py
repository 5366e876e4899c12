"""Full-width forward pass on a 5 second utterance, printing every stage."""

import time

import numpy as np

from tvector.model import TvectorConfig, TvectorModel

model = TvectorModel(TvectorConfig(n_speakers=254), seed=0)
features = np.random.default_rng(0).normal(size=(500, 20))   # 500 frames at 100 fps

trace = {}
start = time.perf_counter()
scores = model.forward(features, trace=trace)
for stage, shape in trace.items():
    print(f"{stage:16s} {shape}")
print(f"scores in (0, 1): {bool(np.all((scores.data > 0) & (scores.data < 1)))}, "
      f"{time.perf_counter() - start:.2f}s")
print("parameters:", sum(p.data.size for p in model.parameters()))
