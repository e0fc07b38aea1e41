"""Map supporting-fact sentences onto rendered page elements.

Each supporting fact must land on a concrete element of its page
snapshot; the element's line rectangles then become the gold evidence
box. A record is all-or-nothing: one unmatched fact rejects the whole
record (no silent partial annotations).
"""

from __future__ import annotations

from collections import Counter
from dataclasses import dataclass, replace
from typing import Mapping, Sequence

from .boxes import BoundingBox, clip_to_frame, union_bounds
from .chains import GoldHop, QARecord
from .errors import MissingSnapshotError
from .metrics import normalize_text

ELEMENT_KINDS = ("paragraph", "list_item", "table_cell", "caption", "infobox_text")


@dataclass(frozen=True)
class RenderedElement:
    """A text-bearing element extracted from a rendered page, with one
    rectangle per laid-out line (raster pixels)."""

    element_id: str
    text: str
    kind: str
    line_rects: tuple[BoundingBox, ...]

    def __post_init__(self):
        object.__setattr__(self, "line_rects", tuple(self.line_rects))


@dataclass(frozen=True)
class MatchResult:
    """Where a sentence landed: the element, how it matched, and the
    box spanning the element's line rects."""

    element_id: str
    method: str  # "exact" | "overlap"
    score: float
    box: BoundingBox


@dataclass(frozen=True)
class AnnotatorConfig:
    min_overlap_score: float = 0.75
    min_token_count: int = 3

    def __post_init__(self):
        if not (0.0 < self.min_overlap_score <= 1.0):
            raise ValueError(
                f"min_overlap_score must be in (0, 1], got {self.min_overlap_score}"
            )


@dataclass(frozen=True)
class SourceQuestion:
    """A record-to-be: everything but the gold boxes."""

    question_id: str
    question: str
    gold_answers: tuple[str, ...]
    question_type: str
    entity_chain_key: str = ""


@dataclass(frozen=True)
class AnnotationRejection:
    """Why a record was dropped, with the offending fact when one exists."""

    question_id: str
    doc_id: str | None
    sentence: str | None
    reason: str  # "no-match" | "box-out-of-frame"


@dataclass(frozen=True)
class AnnotatedRecord:
    """An accepted record plus the per-fact match evidence (one
    MatchResult per supporting fact, in input order)."""

    record: QARecord
    matches: tuple[MatchResult, ...]


def _tokens(text: str) -> list[str]:
    # Matching normalization keeps articles: sentences are compared as
    # written, only case/punctuation/whitespace are canonicalized.
    return normalize_text(text).split()


def _token_f1(a: list[str], b: list[str]) -> float:
    if not a or not b:
        return 0.0
    overlap = sum((Counter(a) & Counter(b)).values())
    if overlap == 0:
        return 0.0
    return 2.0 * overlap / (len(a) + len(b))


def _bigrams(tokens: list[str]) -> Counter:
    grams: Counter = Counter()
    for tok in tokens:
        for i in range(len(tok) - 1):
            grams[tok[i : i + 2]] += 1
    return grams


def _bigram_dice(a: list[str], b: list[str]) -> float:
    grams_a, grams_b = _bigrams(a), _bigrams(b)
    total = sum(grams_a.values()) + sum(grams_b.values())
    if total == 0:
        return 0.0
    return 2.0 * sum((grams_a & grams_b).values()) / total


def text_similarity(a: str, b: str, min_token_count: int = 3) -> float:
    """Similarity in [0, 1] between two pieces of text.

    Token-level F1 over normalized token multisets, combined with a
    character-bigram Dice coefficient so that in-word noise degrades the
    score gracefully; the stronger signal wins. Below ``min_token_count``
    tokens on either side, token overlap is too coarse and the bigram
    score is used alone. Symmetric; 1.0 only for texts with equal token
    multisets or equal bigram multisets.
    """
    ta, tb = _tokens(a), _tokens(b)
    if not ta or not tb:
        return 0.0
    if ta == tb:
        return 1.0
    if len(ta) < min_token_count or len(tb) < min_token_count:
        return _bigram_dice(ta, tb)
    return max(_token_f1(ta, tb), _bigram_dice(ta, tb))


def match_sentence(
    sentence: str,
    elements: Sequence[RenderedElement],
    cfg: AnnotatorConfig = AnnotatorConfig(),
) -> MatchResult | None:
    """Locate the element carrying a sentence.

    Exact containment (normalized verbatim substring) wins and takes the
    first element in document order; otherwise the highest similarity at
    or above ``cfg.min_overlap_score`` wins, ties going to the earlier
    element. A sentence nothing carries is a no-match value, not an
    error. The returned box spans the element's line rects unclipped;
    annotate_record narrows it to the frame.
    """
    normalized = normalize_text(sentence)
    if normalized:
        for element in elements:
            if normalized in normalize_text(element.text):
                return MatchResult(
                    element_id=element.element_id,
                    method="exact",
                    score=1.0,
                    box=union_bounds(element.line_rects),
                )
    best: RenderedElement | None = None
    best_score = 0.0
    for element in elements:
        score = text_similarity(sentence, element.text, cfg.min_token_count)
        if score > best_score:
            best, best_score = element, score
    if best is not None and best_score >= cfg.min_overlap_score:
        return MatchResult(
            element_id=best.element_id,
            method="overlap",
            score=best_score,
            box=union_bounds(best.line_rects),
        )
    return None


def element_box(
    element: RenderedElement, width: float, height: float
) -> BoundingBox | None:
    """The evidence box of an element: the union of its line rects clipped
    to the snapshot frame. None when nothing in-frame remains."""
    if not element.line_rects:
        return None
    return clip_to_frame(union_bounds(element.line_rects), width, height)


def annotate_record(
    source: SourceQuestion,
    snapshots: Mapping[str, "PageSnapshot"],  # noqa: F821 - structural typing
    supporting_facts: Sequence[tuple[str, str]],
    cfg: AnnotatorConfig = AnnotatorConfig(),
) -> AnnotatedRecord | AnnotationRejection:
    """Ground one question's supporting facts into gold evidence boxes.

    Args:
        source: the record minus boxes.
        snapshots: doc_id -> snapshot; anything exposing .elements,
            .width and .height works.
        supporting_facts: (doc_id, sentence) pairs in reasoning order.
        cfg: matching thresholds.

    Returns:
        AnnotatedRecord on success — gold boxes grouped by document in
        first-appearance order, hop_count = number of distinct docs — or
        AnnotationRejection naming the first fact that failed.

    Raises:
        MissingSnapshotError: a fact references a doc with no snapshot.
    """
    if not supporting_facts:
        return AnnotationRejection(source.question_id, None, None, "no-facts")
    for doc_id, _ in supporting_facts:
        if doc_id not in snapshots:
            raise MissingSnapshotError(
                f"{source.question_id}: no snapshot for doc {doc_id!r}"
            )
    boxes_by_doc: dict[str, list[BoundingBox]] = {}
    doc_order: list[str] = []
    matches: list[MatchResult] = []
    for doc_id, sentence in supporting_facts:
        snap = snapshots[doc_id]
        match = match_sentence(sentence, snap.elements, cfg)
        if match is None:
            return AnnotationRejection(source.question_id, doc_id, sentence, "no-match")
        element = next(e for e in snap.elements if e.element_id == match.element_id)
        box = element_box(element, snap.width, snap.height)
        if box is None:
            return AnnotationRejection(
                source.question_id, doc_id, sentence, "box-out-of-frame"
            )
        matches.append(replace(match, box=box))
        if doc_id not in boxes_by_doc:
            boxes_by_doc[doc_id] = []
            doc_order.append(doc_id)
        boxes_by_doc[doc_id].append(box)
    gold_chain = tuple(
        GoldHop(doc_id=doc, boxes=tuple(boxes_by_doc[doc])) for doc in doc_order
    )
    record = QARecord(
        question_id=source.question_id,
        question=source.question,
        gold_answers=tuple(source.gold_answers),
        question_type=source.question_type,
        gold_chain=gold_chain,
        hop_count=len(gold_chain),
        entity_chain_key=source.entity_chain_key or "|".join(doc_order),
    )
    return AnnotatedRecord(record=record, matches=tuple(matches))
