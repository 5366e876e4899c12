"""Weakly labelled multi-speaker utterances: construction, storage, batching.

Utterances mix one to three speakers either back to back (``concat``) or on
top of each other for the whole duration (``overlap``). Only the set of
active speakers is kept as a label.

Feature file layout: two little-endian u32 (T, F), then T*F float32, row-major.
Manifest layout::

    #weakmix v1 K=<int> F=<int> fps=<int> T=<int>
    <id>\t<relative path>\t<concat|overlap>\t<id,id,...>
"""

from __future__ import annotations

import re
import struct
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterator, Sequence

import numpy as np

SCENARIOS = ("concat", "overlap")
MANIFEST_HEADER = re.compile(r"#weakmix v1 K=(\d+) F=(\d+) fps=(\d+) T=(\d+)")


class FeatureFileError(IOError):
    pass


@dataclass
class SpeakerPool:
    """Per-speaker frame sources.

    Synthetic pools hold a diagonal Gaussian per speaker (``means``, ``stds``);
    ingested pools hold a list of feature matrices per speaker (``sources``).
    """

    means: np.ndarray | None = None
    stds: np.ndarray | None = None
    sources: list[list[np.ndarray]] | None = None

    @classmethod
    def synthetic(cls, n_speakers: int, n_features: int, rng: np.random.Generator,
                  sigma: float = 0.3) -> "SpeakerPool":
        means = rng.standard_normal((n_speakers, n_features))
        return cls(means=means, stds=np.full((n_speakers, n_features), float(sigma)))

    @classmethod
    def from_matrices(cls, sources: Sequence[Sequence[np.ndarray]]) -> "SpeakerPool":
        widths = {np.shape(m)[1] for spk in sources for m in spk}
        if len(widths) != 1:
            raise ValueError(f"ingested features disagree on width: {sorted(widths)}")
        return cls(sources=[[np.asarray(m, dtype=np.float64) for m in spk] for spk in sources])

    @classmethod
    def from_files(cls, paths: Sequence[Sequence[str | Path]]) -> "SpeakerPool":
        return cls.from_matrices([[read_features(p) for p in spk] for spk in paths])

    @property
    def n_speakers(self) -> int:
        return len(self.sources) if self.sources is not None else len(self.means)

    @property
    def n_features(self) -> int:
        if self.sources is not None:
            return self.sources[0][0].shape[1]
        return self.means.shape[1]


def sample_speaker_frames(pool: SpeakerPool, speaker: int, n: int,
                          rng: np.random.Generator) -> np.ndarray:
    if not 0 <= speaker < pool.n_speakers:
        raise KeyError(f"unknown speaker {speaker} (pool has {pool.n_speakers})")
    if n < 1:
        raise ValueError(f"need at least one frame, got {n}")
    if pool.sources is None:
        noise = rng.standard_normal((n, pool.n_features))
        return pool.means[speaker] + noise * pool.stds[speaker]
    candidates = [m for m in pool.sources[speaker] if len(m) >= n]
    if not candidates:
        raise ValueError(f"speaker {speaker} has no source of at least {n} frames")
    src = candidates[rng.integers(len(candidates))]
    start = rng.integers(len(src) - n + 1)
    return src[start:start + n].copy()


@dataclass
class WeakUtterance:
    features: np.ndarray
    label: np.ndarray
    scenario: str
    speakers: tuple[int, ...]
    blocks: list[tuple[int, int, int]] = field(default_factory=list)
    utt_id: str = ""

    @property
    def speaker_count(self) -> int:
        return len(self.speakers)


def _check_speakers(pool: SpeakerPool, speakers: Sequence[int]) -> tuple[int, ...]:
    speakers = tuple(int(s) for s in speakers)
    if not 1 <= len(speakers) <= 3:
        raise ValueError(f"need 1 to 3 speakers, got {len(speakers)}")
    if len(set(speakers)) != len(speakers):
        raise ValueError(f"speakers must be distinct, got {speakers}")
    for s in speakers:
        if not 0 <= s < pool.n_speakers:
            raise KeyError(f"unknown speaker {s}")
    return speakers


def _multi_hot(speakers, K: int) -> np.ndarray:
    label = np.zeros(K)
    label[list(speakers)] = 1.0
    return label


def concat_block_lengths(T: int, count: int, rng: np.random.Generator) -> list[int]:
    """Random contiguous block lengths, each at least floor(T / (2 * count))."""
    floor = T // (2 * count)
    if floor < 1:
        raise ValueError(f"T={T} too short for {count} speakers")
    spare = T - count * floor
    cuts = np.sort(rng.integers(0, spare + 1, size=count - 1))
    edges = np.concatenate([[0], cuts, [spare]])
    return [floor + int(d) for d in np.diff(edges)]


def make_concat(pool: SpeakerPool, speakers: Sequence[int], T: int, rng: np.random.Generator,
                lengths: Sequence[int] | None = None) -> WeakUtterance:
    speakers = _check_speakers(pool, speakers)
    if lengths is None:
        lengths = concat_block_lengths(T, len(speakers), rng)
    elif sum(lengths) != T or len(lengths) != len(speakers) or min(lengths) < 1:
        raise ValueError(f"block lengths {list(lengths)} do not tile T={T}")
    parts, blocks, start = [], [], 0
    for spk, n in zip(speakers, lengths):
        parts.append(sample_speaker_frames(pool, spk, n, rng))
        blocks.append((spk, start, start + n))
        start += n
    return WeakUtterance(np.concatenate(parts), _multi_hot(speakers, pool.n_speakers),
                         "concat", speakers, blocks)


def make_overlap(pool: SpeakerPool, speakers: Sequence[int], T: int,
                 rng: np.random.Generator) -> WeakUtterance:
    speakers = _check_speakers(pool, speakers)
    if T < 1:
        raise ValueError(f"T must be positive, got {T}")
    streams = [sample_speaker_frames(pool, s, T, rng) for s in speakers]
    return WeakUtterance(np.mean(streams, axis=0), _multi_hot(speakers, pool.n_speakers),
                         "overlap", speakers, [(s, 0, T) for s in speakers])


MAKERS = {"concat": make_concat, "overlap": make_overlap}


@dataclass(frozen=True)
class DatasetConfig:
    n_speakers: int = 8
    n_features: int = 20
    frames: int = 500
    fps: int = 100
    n_train: int = 200
    n_test: int = 100
    scenario: str = "concat"
    sigma: float = 0.3
    seed: int = 0

    def __post_init__(self):
        if self.scenario not in SCENARIOS:
            raise ValueError(f"scenario must be one of {SCENARIOS}, got {self.scenario!r}")
        if self.n_speakers < 3:
            raise ValueError("need at least 3 speakers to mix up to 3 per utterance")


def generate_utterances(pool: SpeakerPool, n: int, T: int, scenario: str,
                        rng: np.random.Generator, prefix: str = "utt") -> list[WeakUtterance]:
    make = MAKERS[scenario]
    out = []
    for i in range(n):
        count = int(rng.integers(1, 4))
        speakers = sorted(rng.choice(pool.n_speakers, size=count, replace=False).tolist())
        utt = make(pool, rng.permutation(speakers).tolist(), T, rng)
        utt.utt_id = f"{prefix}{i:05d}"
        out.append(utt)
    return out


def generate_dataset(config: DatasetConfig) -> tuple[SpeakerPool, list[WeakUtterance], list[WeakUtterance]]:
    rng = np.random.default_rng(config.seed)
    pool = SpeakerPool.synthetic(config.n_speakers, config.n_features, rng, config.sigma)
    train = generate_utterances(pool, config.n_train, config.frames, config.scenario, rng, "train")
    test = generate_utterances(pool, config.n_test, config.frames, config.scenario, rng, "test")
    return pool, train, test


# ---------------------------------------------------------------------------
# files


def write_features(path, features: np.ndarray) -> None:
    features = np.asarray(features)
    T, F = features.shape
    path = Path(path)
    try:
        path.write_bytes(struct.pack("<II", T, F) + features.astype("<f4").tobytes())
    except OSError as exc:
        raise FeatureFileError(f"cannot write {path}: {exc}") from exc


def read_features(path) -> np.ndarray:
    path = Path(path)
    try:
        blob = path.read_bytes()
    except OSError as exc:
        raise FeatureFileError(f"cannot read {path}: {exc}") from exc
    if len(blob) < 8:
        raise FeatureFileError(f"{path}: truncated header")
    T, F = struct.unpack_from("<II", blob)
    if len(blob) != 8 + 4 * T * F:
        raise FeatureFileError(f"{path}: expected {T}x{F} floats, file has {len(blob) - 8} bytes")
    return np.frombuffer(blob, dtype="<f4", offset=8).reshape(T, F).astype(np.float64)


@dataclass(frozen=True)
class ManifestEntry:
    utt_id: str
    path: str
    scenario: str
    speakers: tuple[int, ...]


@dataclass
class Manifest:
    n_speakers: int
    n_features: int
    fps: int
    frames: int
    entries: list[ManifestEntry]
    root: Path = Path(".")

    def __len__(self) -> int:
        return len(self.entries)

    def to_text(self) -> str:
        lines = [f"#weakmix v1 K={self.n_speakers} F={self.n_features} fps={self.fps} T={self.frames}"]
        for e in self.entries:
            lines.append(f"{e.utt_id}\t{e.path}\t{e.scenario}\t{','.join(map(str, e.speakers))}")
        return "\n".join(lines) + "\n"

    def write(self, path) -> None:
        Path(path).write_text(self.to_text(), encoding="utf-8")

    @classmethod
    def parse(cls, text: str, root=".") -> "Manifest":
        lines = text.splitlines()
        m = MANIFEST_HEADER.fullmatch(lines[0].strip()) if lines else None
        if m is None:
            raise ValueError("manifest is missing the '#weakmix v1' header")
        K, F, fps, T = map(int, m.groups())
        entries = []
        for n, line in enumerate(lines[1:], start=2):
            if not line.strip():
                continue
            fields = line.split("\t")
            if len(fields) != 4 or fields[2] not in SCENARIOS:
                raise ValueError(f"manifest line {n} is malformed: {line!r}")
            speakers = tuple(int(s) for s in fields[3].split(","))
            if any(not 0 <= s < K for s in speakers):
                raise ValueError(f"manifest line {n}: speaker id outside 0..{K - 1}")
            entries.append(ManifestEntry(fields[0], fields[1], fields[2], speakers))
        return cls(K, F, fps, T, entries, Path(root))

    @classmethod
    def read(cls, path) -> "Manifest":
        path = Path(path)
        return cls.parse(path.read_text(encoding="utf-8"), root=path.parent)

    def load(self, index: int) -> WeakUtterance:
        e = self.entries[index]
        try:
            feats = read_features(self.root / e.path)
        except FeatureFileError as exc:
            raise FeatureFileError(f"utterance {e.utt_id}: {exc}") from exc
        if feats.shape != (self.frames, self.n_features):
            raise FeatureFileError(f"utterance {e.utt_id}: shape {feats.shape}, "
                                   f"manifest says ({self.frames}, {self.n_features})")
        return WeakUtterance(feats, _multi_hot(e.speakers, self.n_speakers), e.scenario,
                             e.speakers, utt_id=e.utt_id)

    def load_all(self) -> list[WeakUtterance]:
        return [self.load(i) for i in range(len(self))]


def write_split(utterances: Sequence[WeakUtterance], out_dir, name: str,
                config: DatasetConfig) -> Manifest:
    out_dir = Path(out_dir)
    feat_dir = out_dir / "feats"
    feat_dir.mkdir(parents=True, exist_ok=True)
    entries = []
    for utt in utterances:
        rel = f"feats/{utt.utt_id}.f32"
        write_features(out_dir / rel, utt.features)
        entries.append(ManifestEntry(utt.utt_id, rel, utt.scenario, tuple(utt.speakers)))
    manifest = Manifest(config.n_speakers, config.n_features, config.fps, config.frames,
                        entries, out_dir)
    try:
        manifest.write(out_dir / f"{name}.manifest")
    except OSError as exc:
        raise FeatureFileError(f"cannot write {out_dir / (name + '.manifest')}: {exc}") from exc
    return manifest


def build_dataset(config: DatasetConfig, out_dir) -> tuple[Manifest, Manifest]:
    """Synthesise train and test splits and write them under ``out_dir``."""
    _, train, test = generate_dataset(config)
    return (write_split(train, out_dir, "train", config),
            write_split(test, out_dir, "test", config))


def batch_iterator(source, batch_size: int, shuffle_seed: int | None = None
                   ) -> Iterator[tuple[np.ndarray, np.ndarray]]:
    """Yield (features B x T x F, labels B x K), each utterance once per pass.

    ``source`` is a :class:`Manifest` (files read lazily) or a list of
    :class:`WeakUtterance`. ``shuffle_seed=None`` keeps source order.
    """
    if batch_size < 1:
        raise ValueError("batch_size must be at least 1")
    n = len(source)
    order = np.arange(n) if shuffle_seed is None else np.random.default_rng(shuffle_seed).permutation(n)
    fetch = source.load if isinstance(source, Manifest) else source.__getitem__
    for lo in range(0, n, batch_size):
        utts = [fetch(int(i)) for i in order[lo:lo + batch_size]]
        yield np.stack([u.features for u in utts]), np.stack([u.label for u in utts])
