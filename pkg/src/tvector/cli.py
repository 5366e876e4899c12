"""Command line: synth, train, eval, ablate, verify.

Configuration is a plain ``key=value`` file (``--config``) overridden by
flags. The effective configuration is echoed to ``<out>/config.echo``.
"""

from __future__ import annotations

import argparse
import dataclasses
import logging
import os
import sys
from contextlib import nullcontext
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .data import DatasetConfig, Manifest, build_dataset
from .evaluation import evaluate
from .model import (
    ARCHITECTURES,
    TvectorConfig,
    checkpoint_bytes,
    checkpoint_from_bytes,
    load_checkpoint,
)
from .train import TrainConfig, train_loop

log = logging.getLogger("tvector")


@dataclass
class RunConfig:
    seed: int = 0
    out: str = "run"
    data: str = ""
    # dataset
    scenario: str = "concat"
    k: int = 8
    features: int = 20
    frames: int = 500
    fps: int = 100
    sigma: float = 0.3
    train: int = 200
    test: int = 100
    # model
    arch: str = "tvector"
    dim: int = 512
    heads: int = 4
    depth: int = 4
    ffn_width: int = 2048
    window: int = 20
    step: int = 10
    seg_width: int = 1500
    clf_hidden: int = 512
    scale_mode: str = "inv_sqrt_dk"
    memory: bool = True
    global_relu: bool = True
    precision: str = "float64"
    # training
    epochs: int = 10
    batch: int = 16
    lr: float = 1e-4
    lr_multiplier: float = 1.0
    clamp: float = 1e-7
    eval_every: int = 0
    record_time: bool = True
    # ablation
    windows: str = "20,25,30"

    def data_dir(self) -> Path:
        return Path(self.data or self.out)

    def dataset_config(self) -> DatasetConfig:
        return DatasetConfig(self.k, self.features, self.frames, self.fps, self.train,
                             self.test, self.scenario, self.sigma, self.seed)

    def model_config(self, **overrides) -> TvectorConfig:
        kwargs = dict(n_speakers=self.k, n_features=self.features, dim=self.dim, heads=self.heads,
                      depth=self.depth, ffn_width=self.ffn_width, window=self.window, step=self.step,
                      seg_tdnn_width=self.seg_width, clf_hidden=self.clf_hidden,
                      scale_mode=self.scale_mode, use_memory=self.memory,
                      global_relu=self.global_relu)
        kwargs.update(overrides)
        return TvectorConfig(**kwargs)

    def train_config(self, **overrides) -> TrainConfig:
        kwargs = dict(batch_size=self.batch, epochs=self.epochs, seed=self.seed, lr=self.lr,
                      lr_multiplier=self.lr_multiplier, eval_every=self.eval_every,
                      clamp=self.clamp, record_time=self.record_time)
        kwargs.update(overrides)
        return TrainConfig(**kwargs)

    @property
    def dtype(self):
        if self.precision not in ("float64", "float32"):
            raise ValueError(f"precision must be float64 or float32, got {self.precision!r}")
        return np.dtype(self.precision)

    def echo(self) -> str:
        return "".join(f"{f.name}={_fmt(getattr(self, f.name))}\n" for f in dataclasses.fields(self))


def _fmt(v) -> str:
    if isinstance(v, bool):
        return "true" if v else "false"
    return str(v)


def _coerce(name: str, raw: str):
    kind = {f.name: f.type for f in dataclasses.fields(RunConfig)}.get(name)
    if kind is None:
        raise ValueError(f"unknown config key {name!r}")
    if kind == "bool":
        if raw.lower() not in ("true", "false", "1", "0", "yes", "no"):
            raise ValueError(f"{name}: expected a boolean, got {raw!r}")
        return raw.lower() in ("true", "1", "yes")
    if kind == "int":
        return int(raw)
    if kind == "float":
        return float(raw)
    return raw


def parse_config_text(text: str) -> dict:
    values = {}
    for n, line in enumerate(text.splitlines(), start=1):
        line = line.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ValueError(f"config line {n}: expected key=value, got {line!r}")
        key, raw = (s.strip() for s in line.split("=", 1))
        values[key] = _coerce(key, raw)
    return values


# flag -> RunConfig key
FLAGS = {
    "seed": "seed", "scenario": "scenario", "k": "k", "window": "window", "step": "step",
    "heads": "heads", "depth": "depth", "dim": "dim", "epochs": "epochs", "batch": "batch",
    "out": "out", "data": "data", "train": "train", "test": "test", "frames": "frames",
    "windows": "windows", "arch": "arch",
}


def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", help="key=value configuration file")
    common.add_argument("--seed", type=int)
    common.add_argument("--scenario", choices=("concat", "overlap"))
    common.add_argument("--k", type=int, help="number of enrolled speakers")
    common.add_argument("--window", type=int, help="frame-level window length M")
    common.add_argument("--step", type=int, help="frame-level window step H")
    common.add_argument("--no-memory", action="store_true", help="disable memories between windows")
    common.add_argument("--heads", type=int)
    common.add_argument("--depth", type=int, help="frame-level encoder blocks L")
    common.add_argument("--dim", type=int, help="model width D")
    common.add_argument("--epochs", type=int)
    common.add_argument("--batch", type=int)
    common.add_argument("--out", help="output directory")
    common.add_argument("--data", help="dataset directory (defaults to --out)")
    common.add_argument("--train", type=int, help="training utterances to synthesise")
    common.add_argument("--test", type=int, help="test utterances to synthesise")
    common.add_argument("--frames", type=int, help="utterance length in frames")
    common.add_argument("--windows", help="comma-separated window sizes for ablate")
    common.add_argument("--arch", choices=sorted(ARCHITECTURES))
    common.add_argument("--set", action="append", default=[], metavar="KEY=VALUE",
                        help="override any config key")
    common.add_argument("-v", "--verbose", action="store_true")

    parser = argparse.ArgumentParser(prog="tvector", description=__doc__.splitlines()[0])
    sub = parser.add_subparsers(dest="command", required=True)
    sub.add_parser("synth", parents=[common], help="synthesise a weakly labelled dataset")
    sub.add_parser("train", parents=[common], help="train a model on <data>/train.manifest")
    sub.add_parser("eval", parents=[common], help="evaluate <out>/checkpoint.tvec on <data>/test.manifest")
    sub.add_parser("ablate", parents=[common], help="memory on/off x window size grid")
    v = sub.add_parser("verify", parents=[common], help="check a checkpoint round-trips bit-exactly")
    v.add_argument("checkpoint", nargs="?")
    return parser


def resolve_config(args: argparse.Namespace) -> RunConfig:
    values = {}
    if args.config:
        values.update(parse_config_text(Path(args.config).read_text(encoding="utf-8")))
    for flag, key in FLAGS.items():
        v = getattr(args, flag, None)
        if v is not None:
            values[key] = v
    if args.no_memory:
        values["memory"] = False
    for item in args.set:
        key, _, raw = item.partition("=")
        values[key.strip()] = _coerce(key.strip(), raw.strip())
    return RunConfig(**values)


def _thread_limit():
    n = os.environ.get("TVEC_THREADS")
    if not n:
        return nullcontext()
    from threadpoolctl import threadpool_limits
    return threadpool_limits(limits=int(n))


def _prepare_out(cfg: RunConfig) -> Path:
    out = Path(cfg.out)
    out.mkdir(parents=True, exist_ok=True)
    (out / "config.echo").write_text(cfg.echo(), encoding="utf-8")
    return out


def cmd_synth(cfg: RunConfig) -> int:
    out = _prepare_out(cfg)
    train, test = build_dataset(cfg.dataset_config(), out)
    print(f"synthesised {cfg.scenario}: K={cfg.k} F={cfg.features} T={cfg.frames} "
          f"train={len(train)} test={len(test)} -> {out}")
    return 0


def _train_one(cfg: RunConfig, out: Path, model_overrides=None, seed=None) -> object:
    seed = cfg.seed if seed is None else seed
    manifest = Manifest.read(cfg.data_dir() / "train.manifest")
    model_cfg = cfg.model_config(**(model_overrides or {}))
    if manifest.n_speakers != model_cfg.n_speakers or manifest.n_features != model_cfg.n_features:
        raise ValueError(f"dataset has K={manifest.n_speakers} F={manifest.n_features}, "
                         f"config has k={model_cfg.n_speakers} features={model_cfg.n_features}")
    model = ARCHITECTURES[cfg.arch](model_cfg, seed=seed, dtype=cfg.dtype)
    tcfg = cfg.train_config(seed=seed, checkpoint_path=str(out / "checkpoint.tvec"))
    result = train_loop(model, manifest.load_all(), tcfg)
    (out / "loss.csv").write_text(result.to_csv(), encoding="utf-8")
    return model


def cmd_train(cfg: RunConfig) -> int:
    out = _prepare_out(cfg)
    _train_one(cfg, out)
    print(f"trained {cfg.epochs} epoch(s); checkpoint at {out / 'checkpoint.tvec'}")
    return 0


def _evaluate_into(model, cfg: RunConfig, out: Path):
    manifest = Manifest.read(cfg.data_dir() / "test.manifest")
    report = evaluate(model, manifest)
    report.write(out)
    return report


def cmd_eval(cfg: RunConfig) -> int:
    out = _prepare_out(cfg)
    model = load_checkpoint(out / "checkpoint.tvec", dtype=cfg.dtype)
    report = _evaluate_into(model, cfg, out)
    print(report.summary_text(), end="")
    return 0


def cmd_ablate(cfg: RunConfig) -> int:
    out = _prepare_out(cfg)
    windows = [int(w) for w in cfg.windows.split(",") if w.strip()]
    rows = ["memory,window,seed,mean_eer,eer_concat,eer_overlap"]
    for memory in (True, False):
        for window in windows:
            cell = out / f"{'with' if memory else 'without'}_memory_w{window}"
            cell.mkdir(exist_ok=True)
            seed = cfg.seed * 1000 + window * 2 + (0 if memory else 1)
            model = _train_one(cfg, cell, dict(use_memory=memory, window=window), seed=seed)
            report = _evaluate_into(model, cfg, cell)
            per = [repr(report.by_scenario[s]) if s in report.by_scenario else ""
                   for s in ("concat", "overlap")]
            rows.append(",".join([("with" if memory else "without"), str(window), str(seed),
                                  repr(report.mean_eer), *per]))
            print(f"memory={'on ' if memory else 'off'} window={window}: "
                  f"mean EER {100 * report.mean_eer:.2f}%")
    (out / "ablation.csv").write_text("\n".join(rows) + "\n", encoding="utf-8")
    return 0


def cmd_verify(cfg: RunConfig, path: str | None) -> int:
    path = Path(path) if path else Path(cfg.out) / "checkpoint.tvec"
    blob = path.read_bytes()
    model = checkpoint_from_bytes(blob)
    if checkpoint_bytes(model) != blob:
        print(f"{path}: re-serialised checkpoint differs", file=sys.stderr)
        return 1
    n = sum(p.data.size for p in model.parameters())
    print(f"{path}: ok ({model.arch}, {n} parameters)")
    return 0


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        cfg = resolve_config(args)
        with _thread_limit():
            if args.command == "verify":
                return cmd_verify(cfg, args.checkpoint)
            return {"synth": cmd_synth, "train": cmd_train, "eval": cmd_eval,
                    "ablate": cmd_ablate}[args.command](cfg)
    except (OSError, ValueError, KeyError, FloatingPointError, RuntimeError) as exc:
        print(f"tvector {args.command}: error: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
