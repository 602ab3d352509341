import logging
import re
import string
from typing import Mapping, Optional, Sequence

import editdistance
from pydantic import BaseModel, Field

logger = logging.getLogger(__name__)

ANLS_CUTOFF = 0.5
_WHITESPACE = re.compile(r"\s+")


class MetricError(ValueError):
    pass


def normalize_answer(s: str) -> str:
    """Lowercase, collapse whitespace and strip punctuation from both ends."""
    s = _WHITESPACE.sub(" ", s.lower()).strip()
    return s.strip(string.punctuation + " ")


def levenshtein(a: str, b: str) -> int:
    return int(editdistance.eval(a, b))


def anls(pred: str, gold: str) -> float:
    p, g = normalize_answer(pred), normalize_answer(gold)
    if not p and not g:
        return 1.0
    s = 1.0 - levenshtein(p, g) / max(len(p), len(g))
    return s if s >= ANLS_CUTOFF else 0.0


def vqa_accuracy(pred: str, golds: Sequence[str]) -> float:
    """Soft accuracy: leave-one-out over ten annotators, exact-match mean otherwise."""
    if not golds:
        raise MetricError("vqa accuracy needs at least one gold answer")
    if len(golds) > 10:
        raise MetricError(f"vqa accuracy takes at most 10 gold answers, got {len(golds)}")
    p = normalize_answer(pred)
    hits = [normalize_answer(g) == p for g in golds]
    if len(golds) < 10:
        return sum(hits) / len(golds)
    total = sum(hits)
    return sum(min((total - h) / 3.0, 1.0) for h in hits) / 10.0


# --- Reports ---
class ExampleRecord(BaseModel):
    example_id: str
    question: str
    prediction: str
    golds: list[str]
    acc: float
    anls: float
    steps: Optional[list[dict]] = None


class EvalReport(BaseModel):
    split: Optional[str] = None
    count: int
    acc: float
    anls: float
    sparsity: dict[str, float] = Field(default_factory=dict)
    records: list[ExampleRecord]


class EvalItem(BaseModel):
    example_id: str
    question: str
    golds: list[str]


def evaluate(
    predictions: Mapping[str, str],
    dataset: Sequence[EvalItem],
    sparsity: Optional[Mapping[str, float]] = None,
    split: Optional[str] = None,
    steps: Optional[Mapping[str, list[dict]]] = None,
) -> EvalReport:
    records = []
    for item in dataset:
        if item.example_id not in predictions:
            raise MetricError(f"no prediction for example {item.example_id}")
        pred = predictions[item.example_id]
        records.append(
            ExampleRecord(
                example_id=item.example_id,
                question=item.question,
                prediction=pred,
                golds=list(item.golds),
                acc=vqa_accuracy(pred, item.golds),
                anls=max(anls(pred, g) for g in item.golds),
                steps=(steps or {}).get(item.example_id),
            )
        )
    n = len(records)
    acc = sum(r.acc for r in records) / n if n else 0.0
    mean_anls = sum(r.anls for r in records) / n if n else 0.0
    logger.info("[eval] %s: %d examples, acc=%.4f anls=%.4f", split or "dataset", n, acc, mean_anls)
    return EvalReport(split=split, count=n, acc=acc, anls=mean_anls, sparsity=dict(sparsity or {}), records=records)


def format_report_for_display(report: EvalReport) -> str:
    output = f"Evaluation ({report.split or 'dataset'}): {report.count} examples\n"
    output += f"  Acc:  {report.acc:.4f}\n"
    output += f"  ANLS: {report.anls:.4f}\n"
    if report.sparsity:
        output += "Sparsity ratio:\n"
        for graph, sr in report.sparsity.items():
            output += f"  {graph.upper():<5} {sr:.4f}\n"
    return output
