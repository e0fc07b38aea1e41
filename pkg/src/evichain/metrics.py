"""Joint answer / evidence-chain / localization scoring.

An example is localization-correct only when the whole chain is right:
every hop picks the gold candidate image AND covers every gold box on it.
Image choice and box quality are never scored in isolation at the example
level; per-hop flags are carried as diagnostics only.
"""

from __future__ import annotations

import re
import string
from collections import defaultdict
from dataclasses import dataclass, field

from .boxes import BoundingBox, center_inside, iou
from .chains import EvidenceChain, EvidenceHop, ModelOutput, QARecord
from .dataset import CandidateSet
from .errors import EmptyEvaluationError

_ARTICLE_RE = re.compile(r"\b(a|an|the)\b")
_PUNCT_TABLE = str.maketrans("", "", string.punctuation)

# Recorded in report metadata so consumers know what "exact match" means.
NORMALIZATION = "lowercase, strip punctuation, drop articles (a/an/the), collapse whitespace"


@dataclass(frozen=True)
class MatchConfig:
    """Box-match rule: IoU >= threshold (inclusive by default) OR the
    predicted box center falling inside the gold box."""

    iou_threshold: float = 0.3
    center_rule_enabled: bool = True
    threshold_inclusive: bool = True

    def __post_init__(self):
        if not (0.0 < self.iou_threshold <= 1.0):
            raise ValueError(f"iou_threshold must be in (0, 1], got {self.iou_threshold}")

    def to_dict(self) -> dict:
        return {
            "iou_threshold": self.iou_threshold,
            "center_rule_enabled": self.center_rule_enabled,
            "threshold_inclusive": self.threshold_inclusive,
        }


@dataclass(frozen=True)
class ExampleScore:
    """Per-example outcome. ``per_hop`` holds (image_correct, boxes_correct)
    diagnostics aligned with the gold chain; parse failures score all-false
    with an empty ``per_hop``."""

    question_id: str
    em: bool
    chain_correct: bool
    loc_correct: bool
    joint_correct: bool
    per_hop: tuple[tuple[bool, bool], ...] = ()
    parse_failed: bool = False

    def to_dict(self) -> dict:
        return {
            "question_id": self.question_id,
            "em": self.em,
            "chain_correct": self.chain_correct,
            "loc_correct": self.loc_correct,
            "joint_correct": self.joint_correct,
            "per_hop": [list(h) for h in self.per_hop],
            "parse_failed": self.parse_failed,
        }


def example_score_from_dict(d: dict) -> ExampleScore:
    return ExampleScore(
        question_id=d["question_id"],
        em=bool(d["em"]),
        chain_correct=bool(d["chain_correct"]),
        loc_correct=bool(d["loc_correct"]),
        joint_correct=bool(d["joint_correct"]),
        per_hop=tuple((bool(a), bool(b)) for a, b in d.get("per_hop", [])),
        parse_failed=bool(d.get("parse_failed", False)),
    )


@dataclass(frozen=True)
class GroupRates:
    """Metric rates within one breakdown bucket."""

    n: int
    em_rate: float
    chain_acc: float
    loc_acc: float

    def to_dict(self) -> dict:
        return {"n": self.n, "em_rate": self.em_rate,
                "chain_acc": self.chain_acc, "loc_acc": self.loc_acc}


@dataclass(frozen=True)
class Report:
    """Aggregate rates over one evaluation run."""

    em_rate: float
    chain_acc: float
    loc_acc: float
    joint_acc: float
    by_question_type: dict[str, GroupRates]
    by_hop_count: dict[int, GroupRates]
    n_examples: int
    n_failed_parses: int
    config: MatchConfig = field(default_factory=MatchConfig)

    def to_dict(self) -> dict:
        return {
            "config": dict(self.config.to_dict(), answer_normalization=NORMALIZATION),
            "em_rate": self.em_rate,
            "chain_acc": self.chain_acc,
            "loc_acc": self.loc_acc,
            "joint_acc": self.joint_acc,
            "by_question_type": {k: v.to_dict() for k, v in sorted(self.by_question_type.items())},
            "by_hop_count": {str(k): v.to_dict() for k, v in sorted(self.by_hop_count.items())},
            "n_examples": self.n_examples,
            "n_failed_parses": self.n_failed_parses,
        }


def normalize_text(text: str, *, strip_articles: bool = False) -> str:
    """Lowercase, strip punctuation, collapse whitespace; optionally drop
    the articles a/an/the as whole words."""
    text = text.lower().translate(_PUNCT_TABLE)
    if strip_articles:
        text = _ARTICLE_RE.sub(" ", text)
    return " ".join(text.split())


def normalize_answer(text: str) -> str:
    """Answer normalization used by exact match."""
    return normalize_text(text, strip_articles=True)


def exact_match(pred_answer: str, gold_answers) -> bool:
    pred = normalize_answer(pred_answer)
    return any(pred == normalize_answer(g) for g in gold_answers)


def box_match(pred: BoundingBox, gold: BoundingBox, cfg: MatchConfig = MatchConfig()) -> bool:
    """A predicted box matches a gold box under the IoU-or-center rule."""
    overlap = iou(pred, gold)
    if cfg.threshold_inclusive:
        if overlap >= cfg.iou_threshold:
            return True
    elif overlap > cfg.iou_threshold:
        return True
    return cfg.center_rule_enabled and center_inside(pred, gold)


def _greedy_assignment(
    pred_boxes: tuple[BoundingBox, ...], gold_boxes: tuple[BoundingBox, ...]
) -> list[tuple[int, int]]:
    """One-to-one greedy pairing: repeatedly take the globally highest-IoU
    (pred, gold) pair, ties broken by lower pred index then lower gold
    index. Zero-IoU pairs are never paired (they cannot pass box_match:
    the center rule implies positive overlap)."""
    pairs = []
    for pi, pb in enumerate(pred_boxes):
        for gi, gb in enumerate(gold_boxes):
            value = iou(pb, gb)
            if value > 0.0:
                pairs.append((value, pi, gi))
    pairs.sort(key=lambda t: (-t[0], t[1], t[2]))
    used_pred: set[int] = set()
    used_gold: set[int] = set()
    assigned: list[tuple[int, int]] = []
    for _, pi, gi in pairs:
        if pi in used_pred or gi in used_gold:
            continue
        used_pred.add(pi)
        used_gold.add(gi)
        assigned.append((pi, gi))
    return assigned


def hop_localized(
    pred_hop: EvidenceHop,
    gold_image_id: str | None,
    gold_boxes: tuple[BoundingBox, ...],
    cfg: MatchConfig = MatchConfig(),
) -> tuple[bool, bool]:
    """Score one hop.

    Returns (image_correct, boxes_correct). boxes_correct requires the
    image to be correct and every gold box to be covered by its assigned
    predicted box under box_match; extra predicted boxes are allowed.
    """
    image_correct = gold_image_id is not None and pred_hop.image_id == gold_image_id
    if not image_correct or not gold_boxes:
        return image_correct, False
    assigned = _greedy_assignment(pred_hop.boxes, gold_boxes)
    covered = {
        gi for pi, gi in assigned if box_match(pred_hop.boxes[pi], gold_boxes[gi], cfg)
    }
    return True, len(covered) == len(gold_boxes)


def chain_accuracy(pred_chain: EvidenceChain, record: QARecord, candset: CandidateSet) -> bool:
    """Exact ordered agreement between the predicted image sequence and the
    gold chain mapped through the candidate labeling. Unknown labels are a
    miss, not an error."""
    if len(pred_chain.hops) != record.hop_count:
        return False
    if record.hop_count != len(record.gold_chain):
        return False
    for hop, gold in zip(pred_chain.hops, record.gold_chain):
        label = candset.gold_map.get(gold.doc_id)
        if label is None or hop.image_id != label:
            return False
    return True


def score_example(
    record: QARecord,
    candset: CandidateSet,
    output: ModelOutput | None,
    cfg: MatchConfig = MatchConfig(),
) -> ExampleScore:
    """Score one example; ``output=None`` means the response never parsed.

    Parse failures count against every metric rather than being dropped.
    """
    if output is None:
        return ExampleScore(
            question_id=record.question_id,
            em=False, chain_correct=False, loc_correct=False, joint_correct=False,
            per_hop=(), parse_failed=True,
        )
    em = exact_match(output.answer, record.gold_answers)
    chain_ok = chain_accuracy(output.chain, record, candset)
    per_hop: list[tuple[bool, bool]] = []
    for pred_hop, gold in zip(output.chain.hops, record.gold_chain):
        label = candset.gold_map.get(gold.doc_id)
        per_hop.append(hop_localized(pred_hop, label, gold.boxes, cfg))
    loc = chain_ok and bool(per_hop) and all(boxes_ok for _, boxes_ok in per_hop)
    return ExampleScore(
        question_id=record.question_id,
        em=em,
        chain_correct=chain_ok,
        loc_correct=loc,
        joint_correct=loc,
        per_hop=tuple(per_hop),
    )


def _rate(flags) -> float:
    flags = list(flags)
    return sum(flags) / len(flags) if flags else 0.0


def _group(scores: list[ExampleScore]) -> GroupRates:
    return GroupRates(
        n=len(scores),
        em_rate=_rate(s.em for s in scores),
        chain_acc=_rate(s.chain_correct for s in scores),
        loc_acc=_rate(s.loc_correct for s in scores),
    )


def aggregate(
    scores: list[ExampleScore],
    records: list[QARecord],
    cfg: MatchConfig = MatchConfig(),
) -> Report:
    """Aggregate example scores into a Report.

    Rates are computed over ALL scores, parse failures included. Records
    supply the question_type / hop_count breakdown keys; every score must
    have a matching record.
    """
    if not scores:
        raise EmptyEvaluationError("cannot aggregate zero example scores")
    by_id = {r.question_id: r for r in records}
    missing = [s.question_id for s in scores if s.question_id not in by_id]
    if missing:
        raise EmptyEvaluationError(
            f"no record for scored question_id(s): {', '.join(missing[:5])}"
        )
    by_type: dict[str, list[ExampleScore]] = defaultdict(list)
    by_hops: dict[int, list[ExampleScore]] = defaultdict(list)
    for s in scores:
        record = by_id[s.question_id]
        by_type[record.question_type].append(s)
        by_hops[record.hop_count].append(s)
    return Report(
        em_rate=_rate(s.em for s in scores),
        chain_acc=_rate(s.chain_correct for s in scores),
        loc_acc=_rate(s.loc_correct for s in scores),
        joint_acc=_rate(s.joint_correct for s in scores),
        by_question_type={k: _group(v) for k, v in by_type.items()},
        by_hop_count={k: _group(v) for k, v in by_hops.items()},
        n_examples=len(scores),
        n_failed_parses=sum(1 for s in scores if s.parse_failed),
        config=cfg,
    )


def render_summary(report: Report) -> str:
    """Human-readable summary table for a Report."""
    lines = [
        f"examples: {report.n_examples}   failed parses: {report.n_failed_parses}",
        f"EM        {report.em_rate:7.3f}",
        f"Chain-Acc {report.chain_acc:7.3f}",
        f"Loc-Acc   {report.loc_acc:7.3f}",
        f"Joint     {report.joint_acc:7.3f}",
        "",
        f"{'bucket':<24}{'n':>6}{'EM':>9}{'Chain':>9}{'Loc':>9}",
    ]
    for name, group in sorted(report.by_question_type.items()):
        lines.append(
            f"{name:<24}{group.n:>6}{group.em_rate:>9.3f}"
            f"{group.chain_acc:>9.3f}{group.loc_acc:>9.3f}"
        )
    for hops, group in sorted(report.by_hop_count.items()):
        name = f"{hops}-hop"
        lines.append(
            f"{name:<24}{group.n:>6}{group.em_rate:>9.3f}"
            f"{group.chain_acc:>9.3f}{group.loc_acc:>9.3f}"
        )
    return "\n".join(lines) + "\n"
