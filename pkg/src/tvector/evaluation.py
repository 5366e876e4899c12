"""Per-utterance equal error rate and its test-set breakdowns."""

from __future__ import annotations

from dataclasses import dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np

from .data import Manifest, WeakUtterance


def utterance_eer(scores, label) -> float:
    """EER of one utterance's K speaker scores against its multi-hot label.

    A speaker is accepted when its score is >= the threshold. Thresholds
    sweep -inf, every distinct score, +inf; the EER is read where the
    false-negative rate first meets the false-positive rate, interpolating
    linearly between the two sweep points that straddle the crossing.
    """
    scores = np.asarray(scores, dtype=np.float64).ravel()
    label = np.asarray(label).ravel().astype(bool)
    if scores.shape != label.shape:
        raise ValueError(f"{scores.size} scores for {label.size} labels")
    n_pos = int(label.sum())
    n_neg = label.size - n_pos
    if n_pos == 0 or n_neg == 0:
        raise ValueError("EER needs at least one positive and one negative label")

    order = np.argsort(scores, kind="stable")
    s, y = scores[order], label[order]
    # one sweep point per distinct score (everything below it is rejected),
    # preceded by -inf (accept all) and followed by +inf (reject all)
    starts = np.flatnonzero(np.r_[True, s[1:] != s[:-1]])
    rejected_pos = np.r_[0, np.cumsum(y)][starts]
    rejected_neg = np.r_[0, np.cumsum(~y)][starts]
    fnr = np.r_[0.0, rejected_pos / n_pos, 1.0]
    fpr = np.r_[1.0, 1.0 - rejected_neg / n_neg, 0.0]

    diff = fnr - fpr
    j = int(np.argmax(diff >= 0))
    if diff[j] == 0:
        return float(fpr[j])
    d0, d1 = diff[j - 1], diff[j]
    alpha = -d0 / (d1 - d0)
    return float(fpr[j - 1] + alpha * (fpr[j] - fpr[j - 1]))


@dataclass
class UtteranceResult:
    utt_id: str
    speaker_count: int
    scenario: str
    eer: float


@dataclass
class EvalReport:
    records: list[UtteranceResult]
    mean_eer: float = 0.0
    by_count: dict[int, float] = field(default_factory=dict)
    by_scenario: dict[str, float] = field(default_factory=dict)

    @classmethod
    def from_records(cls, records: Sequence[UtteranceResult]) -> "EvalReport":
        records = list(records)
        if not records:
            raise ValueError("no utterances evaluated")

        def group(key):
            out = {}
            for r in records:
                out.setdefault(key(r), []).append(r.eer)
            return {k: float(np.mean(v)) for k, v in sorted(out.items())}

        return cls(records, float(np.mean([r.eer for r in records])),
                   group(lambda r: r.speaker_count), group(lambda r: r.scenario))

    def to_csv(self) -> str:
        rows = ["utt_id,speaker_count,scenario,eer"]
        rows += [f"{r.utt_id},{r.speaker_count},{r.scenario},{r.eer!r}" for r in self.records]
        return "\n".join(rows) + "\n"

    def summary_text(self) -> str:
        lines = [f"utterances: {len(self.records)}",
                 f"mean EER: {100 * self.mean_eer:.2f}%"]
        for count in (1, 2, 3):
            if count in self.by_count:
                n = sum(r.speaker_count == count for r in self.records)
                lines.append(f"  {count} speaker(s): {100 * self.by_count[count]:.2f}%  (n={n})")
        for scenario, value in self.by_scenario.items():
            lines.append(f"  {scenario}: {100 * value:.2f}%")
        return "\n".join(lines) + "\n"

    def summary_kv(self) -> str:
        lines = [f"n_utterances={len(self.records)}", f"mean_eer={self.mean_eer!r}"]
        lines += [f"eer_count_{k}={v!r}" for k, v in self.by_count.items()]
        lines += [f"eer_scenario_{k}={v!r}" for k, v in self.by_scenario.items()]
        return "\n".join(lines) + "\n"

    def write(self, out_dir) -> None:
        out_dir = Path(out_dir)
        (out_dir / "eval.csv").write_text(self.to_csv(), encoding="utf-8")
        (out_dir / "summary.txt").write_text(self.summary_text(), encoding="utf-8")
        (out_dir / "summary.kv").write_text(self.summary_kv(), encoding="utf-8")


def evaluate(model, source, batch_size: int = 32) -> EvalReport:
    """Score every utterance of a manifest or utterance list and aggregate EERs."""
    K = model.config.n_speakers
    if isinstance(source, Manifest):
        if source.n_speakers != K:
            raise ValueError(f"n_speakers mismatch: model K={K}, manifest K={source.n_speakers}")
        if source.n_features != model.config.n_features:
            raise ValueError(f"n_features mismatch: model F={model.config.n_features}, "
                             f"manifest F={source.n_features}")
        fetch = source.load
    else:
        fetch = source.__getitem__
    records = []
    for lo in range(0, len(source), batch_size):
        utts: list[WeakUtterance] = [fetch(i) for i in range(lo, min(lo + batch_size, len(source)))]
        if any(u.label.size != K for u in utts):
            raise ValueError(f"label width differs from model K={K}")
        scores = model.predict(np.stack([u.features for u in utts]))
        for u, s in zip(utts, scores):
            records.append(UtteranceResult(u.utt_id, u.speaker_count, u.scenario,
                                           utterance_eer(s, u.label)))
    return EvalReport.from_records(records)
