"""Multiple-choice benchmark scoring with per-category accuracy.

Categories form a closed set of four. Two mean definitions are always
reported because they disagree on real fixtures: the macro mean averages
the four category accuracies, the micro mean is total correct over total
answered. Missing predictions score as incorrect and are counted
separately.
"""

from __future__ import annotations

from collections import Counter
from dataclasses import dataclass, field

from .errors import InputFormatError

CATEGORIES = ("consistency", "short", "unexpected", "others")


@dataclass(frozen=True)
class QARecord:
    question_id: str
    category: str
    correct_option: str
    predicted_option: str | None = None

    def __post_init__(self):
        if self.category not in CATEGORIES:
            raise ValueError(f"unknown category {self.category!r}")


@dataclass
class CategoryScores:
    accuracy: dict[str, float]
    counts: dict[str, int]
    correct: dict[str, int]
    macro_mean: float
    micro_mean: float
    missing: int = 0
    total: int = field(init=False)

    def __post_init__(self):
        self.total = sum(self.counts.values())


def score(records: list[QARecord]) -> CategoryScores:
    """Per-category accuracies plus macro and micro means.

    Raises on duplicate question ids. Empty categories score 0 and still
    enter the macro mean.
    """
    seen: set[str] = set()
    counts = {c: 0 for c in CATEGORIES}
    correct = {c: 0 for c in CATEGORIES}
    missing = 0
    for record in records:
        if record.question_id in seen:
            raise InputFormatError(f"duplicate question id {record.question_id!r}")
        seen.add(record.question_id)
        counts[record.category] += 1
        if record.predicted_option is None:
            missing += 1
        elif record.predicted_option == record.correct_option:
            correct[record.category] += 1
    accuracy = {c: (correct[c] / counts[c] if counts[c] else 0.0) for c in CATEGORIES}
    total = sum(counts.values())
    return CategoryScores(
        accuracy=accuracy,
        counts=counts,
        correct=correct,
        macro_mean=sum(accuracy[c] for c in CATEGORIES) / len(CATEGORIES),
        micro_mean=(sum(correct.values()) / total) if total else 0.0,
        missing=missing,
    )


def merge_predictions(answers: list[QARecord], predictions: dict[str, str]) -> list[QARecord]:
    """Attach predictions to answer records by question id.

    Predictions for unknown question ids are rejected; answers without a
    prediction keep ``predicted_option=None`` and later score as wrong.
    """
    known = {a.question_id for a in answers}
    if len(known) != len(answers):
        tally = Counter(a.question_id for a in answers)
        dupes = sorted(qid for qid, n in tally.items() if n > 1)
        raise InputFormatError(f"duplicate question ids in answers: {dupes[:5]}")
    unknown = sorted(set(predictions) - known)
    if unknown:
        raise InputFormatError(f"predictions reference unknown question ids: {unknown[:5]}")
    return [
        QARecord(a.question_id, a.category, a.correct_option, predictions.get(a.question_id))
        for a in answers
    ]
