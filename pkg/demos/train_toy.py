"""Train a narrow T-vector on overlapped synthetic speech and report EER.

About half a minute on one core. The acceptance suite runs the same task for
longer and on both mixing scenarios.
"""

import time

from tvector.data import DatasetConfig, generate_dataset
from tvector.evaluation import evaluate
from tvector.model import TvectorConfig, TvectorModel
from tvector.train import TrainConfig, train_loop

_, train, test = generate_dataset(DatasetConfig(n_speakers=8, frames=200, n_train=200,
                                                n_test=100, scenario="overlap", seed=0))
model = TvectorModel(TvectorConfig(n_speakers=8, n_features=20, dim=32, heads=4, depth=2,
                                   ffn_width=64, window=20, step=10, seg_tdnn_width=64,
                                   clf_hidden=64), seed=0)
print("untrained mean EER", round(evaluate(model, test).mean_eer, 3))

start = time.perf_counter()


def progress(record):
    if record.epoch % 5 == 0:
        print(f"epoch {record.epoch:2d}  loss {record.mean_loss:.4f}  "
              f"{time.perf_counter() - start:.0f}s")


train_loop(model, train, TrainConfig(batch_size=8, epochs=15, lr_multiplier=10), on_epoch=progress)
print(evaluate(model, test).summary_text())
