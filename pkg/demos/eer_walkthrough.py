"""Per-utterance EER: the K speaker scores are one tiny verification trial."""

from tvector.evaluation import EvalReport, UtteranceResult, utterance_eer

print(utterance_eer([0.9, 0.1, 0.2, 0.3], [1, 0, 0, 0]))   # perfect ranking: 0.0
print(utterance_eer([0.1, 0.9], [1, 0]))                   # inverted: 1.0
print(utterance_eer([0.5, 0.5], [1, 0]))                   # a tie: 0.5
# one impostor above one of the two true speakers
print(utterance_eer([0.8, 0.6, 0.7, 0.1], [1, 1, 0, 0]))

report = EvalReport.from_records([
    UtteranceResult("u1", 1, "concat", 0.0),
    UtteranceResult("u2", 3, "concat", 0.25),
    UtteranceResult("u3", 3, "overlap", 0.5),
])
print(report.summary_text())
