"""Dataset construction: document pools, candidate sets, splits, statistics.

File formats (all line-delimited JSON, UTF-8):

dataset record   {"question_id", "question", "gold_answers", "question_type",
                  "hop_count", "entity_chain_key",
                  "gold_chain": [{"doc_id", "boxes": [[x1,y1,x2,y2], ...]}, ...]}
pool manifest    {"doc_id", "image_path", "width", "height", "group_id"?}
candidate set    {"question_id", "ordered": [{"label", "doc_id"}, ...], "seed", "policy"}
"""

from __future__ import annotations

import json
import random
from collections import Counter, defaultdict
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable, Sequence

from .boxes import BoundingBox
from .chains import QUESTION_TYPES, GoldHop, QARecord
from .errors import (
    EmptyDatasetError,
    GoldMissingError,
    InsufficientPoolError,
    SchemaError,
)

POLICY_GLOBAL = "global-pool"
POLICY_SAME_GROUP = "same-group"
DEFAULT_K = 5


@dataclass(frozen=True)
class CandidateDocument:
    """One page screenshot available as evidence or distractor."""

    doc_id: str
    image_path: str
    width: int
    height: int
    group_id: str | None = None
    source_meta: dict = field(default_factory=dict)


@dataclass
class DocumentPool:
    """All documents a run may draw candidates from, with optional groups
    (e.g. one group per slide deck)."""

    documents: dict[str, CandidateDocument]
    groups: dict[str, tuple[str, ...]] = field(default_factory=dict)

    def __post_init__(self):
        if not self.groups:
            derived: dict[str, list[str]] = defaultdict(list)
            for doc_id, doc in self.documents.items():
                if doc.group_id is not None:
                    derived[doc.group_id].append(doc_id)
            self.groups = {g: tuple(ids) for g, ids in derived.items()}
        else:
            for g, ids in self.groups.items():
                unknown = [d for d in ids if d not in self.documents]
                if unknown:
                    raise ValueError(f"group {g!r} references unknown docs: {unknown}")

    def __len__(self) -> int:
        return len(self.documents)

    def image_paths(self) -> dict[str, str]:
        return {doc_id: doc.image_path for doc_id, doc in self.documents.items()}


@dataclass(frozen=True)
class CandidateSet:
    """The labeled images one question is evaluated against.

    ``ordered`` is the presentation order: position i carries label
    ``img_i``. ``gold_map`` maps each gold doc_id to its label.
    """

    question_id: str
    ordered: tuple[tuple[str, str], ...]
    gold_map: dict[str, str]
    k: int
    seed: int | str | None = None
    policy: str | None = None

    def __post_init__(self):
        object.__setattr__(self, "ordered", tuple(tuple(pair) for pair in self.ordered))
        if len(self.ordered) != self.k:
            raise ValueError(f"expected {self.k} candidates, got {len(self.ordered)}")
        for i, (label, _) in enumerate(self.ordered):
            if label != f"img_{i}":
                raise ValueError(f"position {i} must carry label img_{i}, got {label!r}")
        docs = [doc for _, doc in self.ordered]
        if len(set(docs)) != len(docs):
            raise ValueError("candidate docs must be distinct")
        position = {doc: label for label, doc in self.ordered}
        for doc, label in self.gold_map.items():
            if position.get(doc) != label:
                raise ValueError(f"gold_map entry {doc!r} -> {label!r} disagrees with ordering")

    @property
    def doc_ids(self) -> tuple[str, ...]:
        return tuple(doc for _, doc in self.ordered)

    def label_to_doc(self) -> dict[str, str]:
        return {label: doc for label, doc in self.ordered}


def rank_entities(records: Sequence[QARecord]) -> list[tuple[str, int]]:
    """Evidence documents ranked by how many distinct questions require
    them, ties broken alphabetically."""
    questions_by_doc: dict[str, set[str]] = defaultdict(set)
    for record in records:
        for hop in record.gold_chain:
            questions_by_doc[hop.doc_id].add(record.question_id)
    return sorted(
        ((doc, len(qs)) for doc, qs in questions_by_doc.items()),
        key=lambda item: (-item[1], item[0]),
    )


def build_candidate_set(
    record: QARecord,
    pool: DocumentPool,
    k: int = DEFAULT_K,
    seed: int | str = 0,
    policy: str = POLICY_GLOBAL,
) -> CandidateSet:
    """Assemble the k-image candidate set for one record.

    Gold docs always make it in; the rest are distractors drawn uniformly
    without replacement from the eligible pool (the gold docs' group under
    the same-group policy, the full pool otherwise). The combined list is
    then shuffled, and labels img_0..img_{k-1} follow final positions.
    Identical (record, pool, seed, policy) reproduce the identical set.
    """
    gold_docs = list(record.gold_doc_ids)
    missing = [d for d in gold_docs if d not in pool.documents]
    if missing:
        raise GoldMissingError(
            f"{record.question_id}: gold docs missing from pool: {missing}"
        )
    if k < len(gold_docs):
        raise InsufficientPoolError(
            f"{record.question_id}: k={k} below {len(gold_docs)} gold docs"
        )

    if policy == POLICY_SAME_GROUP:
        group_ids = {pool.documents[d].group_id for d in gold_docs}
        if len(group_ids) != 1 or None in group_ids:
            raise InsufficientPoolError(
                f"{record.question_id}: gold docs do not share one group"
            )
        eligible_source: Iterable[str] = pool.groups.get(group_ids.pop(), ())
    elif policy == POLICY_GLOBAL:
        eligible_source = pool.documents
    else:
        raise ValueError(f"unknown policy {policy!r}")

    eligible = sorted(d for d in eligible_source if d not in gold_docs)
    need = k - len(gold_docs)
    if len(eligible) < need:
        raise InsufficientPoolError(
            f"{record.question_id}: need {need} distractors, pool offers {len(eligible)}"
        )
    rng = random.Random(seed)
    docs = gold_docs + rng.sample(eligible, need)
    rng.shuffle(docs)
    ordered = tuple((f"img_{i}", doc) for i, doc in enumerate(docs))
    gold_map = {doc: f"img_{i}" for i, doc in enumerate(docs) if doc in set(gold_docs)}
    return CandidateSet(
        question_id=record.question_id,
        ordered=ordered,
        gold_map=gold_map,
        k=k,
        seed=seed,
        policy=policy,
    )


def split_entity_chain(
    records: Sequence[QARecord], test_fraction: float, seed: int | str = 0
) -> tuple[list[QARecord], list[QARecord]]:
    """Partition records into (train, test) at the entity_chain_key level.

    All records sharing a key land on the same side, so no evidence chain
    leaks across the split. Keys are assigned by seeded shuffle until the
    test side reaches round(test_fraction * n) records.
    """
    if not 0.0 <= test_fraction <= 1.0:
        raise ValueError(f"test_fraction must be in [0, 1], got {test_fraction}")
    if not records:
        raise EmptyDatasetError("cannot split zero records")
    size_by_key: Counter[str] = Counter(r.entity_chain_key for r in records)
    keys = sorted(size_by_key)
    random.Random(seed).shuffle(keys)
    target = round(test_fraction * len(records))
    test_keys: set[str] = set()
    taken = 0
    for key in keys:
        if taken >= target:
            break
        test_keys.add(key)
        taken += size_by_key[key]
    train = [r for r in records if r.entity_chain_key not in test_keys]
    test = [r for r in records if r.entity_chain_key in test_keys]
    return train, test


@dataclass(frozen=True)
class DatasetStats:
    """Corpus statistics; one value per headline dataset-table row."""

    question_count: int
    avg_question_tokens: float
    avg_answer_tokens: float
    unique_screenshots: int
    total_boxes: int
    avg_boxes: float
    hop_distribution: dict[int, float]
    type_distribution: dict[str, float]

    def to_dict(self) -> dict:
        return {
            "question_count": self.question_count,
            "avg_question_tokens": self.avg_question_tokens,
            "avg_answer_tokens": self.avg_answer_tokens,
            "unique_screenshots": self.unique_screenshots,
            "total_boxes": self.total_boxes,
            "avg_boxes": self.avg_boxes,
            "hop_distribution": {str(k): v for k, v in sorted(self.hop_distribution.items())},
            "type_distribution": dict(sorted(self.type_distribution.items())),
        }


def compute_stats(records: Sequence[QARecord]) -> DatasetStats:
    """Count what the dataset holds. Token lengths are whitespace tokens;
    the answer length uses each record's first gold answer."""
    if not records:
        raise EmptyDatasetError("cannot compute statistics of zero records")
    n = len(records)
    total_boxes = sum(len(hop.boxes) for r in records for hop in r.gold_chain)
    screenshots = {hop.doc_id for r in records for hop in r.gold_chain}
    hop_counter = Counter(r.hop_count for r in records)
    type_counter = Counter(r.question_type for r in records)
    return DatasetStats(
        question_count=n,
        avg_question_tokens=sum(len(r.question.split()) for r in records) / n,
        avg_answer_tokens=sum(len(r.gold_answers[0].split()) for r in records) / n,
        unique_screenshots=len(screenshots),
        total_boxes=total_boxes,
        avg_boxes=total_boxes / n,
        hop_distribution={k: v / n for k, v in hop_counter.items()},
        type_distribution={k: v / n for k, v in type_counter.items()},
    )


# validate_dataset rejection codes
CODE_MISSING_DOC = "missing-document"
CODE_OUT_OF_FRAME = "out-of-frame-box"
CODE_EMPTY_HOP = "empty-hop-boxes"
CODE_ZERO_AREA = "zero-area-box"
CODE_HOP_MISMATCH = "hop-count-mismatch"
CODE_UNKNOWN_TYPE = "unknown-question-type"
CODE_EMPTY_CHAIN = "empty-gold-chain"


def validate_dataset(
    records: Sequence[QARecord], pool: DocumentPool
) -> tuple[list[QARecord], list[tuple[QARecord, tuple[str, ...]]]]:
    """Split records into (accepted, rejected-with-reason-codes).

    Validation is an output, never a crash: a bad record is returned with
    machine-readable codes explaining what disqualified it.
    """
    accepted: list[QARecord] = []
    rejected: list[tuple[QARecord, tuple[str, ...]]] = []
    for record in records:
        codes: list[str] = []
        if not record.gold_chain:
            codes.append(CODE_EMPTY_CHAIN)
        if record.hop_count != len(record.gold_chain):
            codes.append(CODE_HOP_MISMATCH)
        if record.question_type not in QUESTION_TYPES:
            codes.append(CODE_UNKNOWN_TYPE)
        for hop in record.gold_chain:
            if not hop.boxes and CODE_EMPTY_HOP not in codes:
                codes.append(CODE_EMPTY_HOP)
            doc = pool.documents.get(hop.doc_id)
            if doc is None:
                if CODE_MISSING_DOC not in codes:
                    codes.append(CODE_MISSING_DOC)
                continue
            for box in hop.boxes:
                if box.area <= 0.0 and CODE_ZERO_AREA not in codes:
                    codes.append(CODE_ZERO_AREA)
                if not box.within_frame(doc.width, doc.height) and CODE_OUT_OF_FRAME not in codes:
                    codes.append(CODE_OUT_OF_FRAME)
        if codes:
            rejected.append((record, tuple(codes)))
        else:
            accepted.append(record)
    return accepted, rejected


# ---------------------------------------------------------------------------
# line-delimited JSON I/O


def record_to_dict(record: QARecord) -> dict:
    return {
        "question_id": record.question_id,
        "question": record.question,
        "gold_answers": list(record.gold_answers),
        "question_type": record.question_type,
        "hop_count": record.hop_count,
        "entity_chain_key": record.entity_chain_key,
        "gold_chain": [
            {"doc_id": hop.doc_id, "boxes": [[b.x1, b.y1, b.x2, b.y2] for b in hop.boxes]}
            for hop in record.gold_chain
        ],
    }


def record_from_dict(d: dict) -> QARecord:
    try:
        gold_chain = tuple(
            GoldHop(
                doc_id=hop["doc_id"],
                boxes=tuple(BoundingBox(*coords) for coords in hop["boxes"]),
            )
            for hop in d["gold_chain"]
        )
        return QARecord(
            question_id=d["question_id"],
            question=d["question"],
            gold_answers=tuple(d["gold_answers"]),
            question_type=d["question_type"],
            gold_chain=gold_chain,
            hop_count=int(d["hop_count"]),
            entity_chain_key=d["entity_chain_key"],
        )
    except KeyError as exc:
        raise SchemaError(str(exc.args[0]), "missing required field") from exc


def _write_jsonl(path: str | Path, rows: Iterable[dict]) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        for row in rows:
            fh.write(json.dumps(row, ensure_ascii=False) + "\n")


def _read_jsonl(path: str | Path) -> Iterable[tuple[int, dict]]:
    with open(path, "r", encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, start=1):
            line = line.strip()
            if line:
                yield lineno, json.loads(line)


def save_records(records: Sequence[QARecord], path: str | Path) -> None:
    _write_jsonl(path, (record_to_dict(r) for r in records))


def load_records(path: str | Path) -> list[QARecord]:
    return [record_from_dict(d) for _, d in _read_jsonl(path)]


def save_pool(pool: DocumentPool, path: str | Path) -> None:
    rows = []
    for doc in pool.documents.values():
        row = {
            "doc_id": doc.doc_id,
            "image_path": doc.image_path,
            "width": doc.width,
            "height": doc.height,
        }
        if doc.group_id is not None:
            row["group_id"] = doc.group_id
        if doc.source_meta:
            row["source_meta"] = doc.source_meta
        rows.append(row)
    _write_jsonl(path, rows)


def load_pool(path: str | Path) -> DocumentPool:
    documents: dict[str, CandidateDocument] = {}
    for lineno, d in _read_jsonl(path):
        doc = CandidateDocument(
            doc_id=d["doc_id"],
            image_path=d["image_path"],
            width=int(d["width"]),
            height=int(d["height"]),
            group_id=d.get("group_id"),
            source_meta=d.get("source_meta", {}),
        )
        if doc.doc_id in documents:
            raise SchemaError(f"line {lineno}", f"duplicate doc_id {doc.doc_id!r}")
        documents[doc.doc_id] = doc
    return DocumentPool(documents=documents)


def candidate_set_to_dict(candset: CandidateSet) -> dict:
    return {
        "question_id": candset.question_id,
        "ordered": [{"label": label, "doc_id": doc} for label, doc in candset.ordered],
        "seed": candset.seed,
        "policy": candset.policy,
    }


def candidate_set_from_dict(d: dict, record: QARecord) -> CandidateSet:
    """Rebuild a CandidateSet from its stored form; gold_map is derived
    from the record's gold docs and the stored ordering."""
    ordered = tuple((item["label"], item["doc_id"]) for item in d["ordered"])
    position = {doc: label for label, doc in ordered}
    gold_map = {}
    for doc in record.gold_doc_ids:
        if doc not in position:
            raise GoldMissingError(
                f"{record.question_id}: stored candidate set lacks gold doc {doc!r}"
            )
        gold_map[doc] = position[doc]
    return CandidateSet(
        question_id=d["question_id"],
        ordered=ordered,
        gold_map=gold_map,
        k=len(ordered),
        seed=d.get("seed"),
        policy=d.get("policy"),
    )


def save_candidate_sets(candsets: Sequence[CandidateSet], path: str | Path) -> None:
    _write_jsonl(path, (candidate_set_to_dict(c) for c in candsets))


def load_candidate_sets(
    path: str | Path, records: Sequence[QARecord]
) -> dict[str, CandidateSet]:
    by_id = {r.question_id: r for r in records}
    out: dict[str, CandidateSet] = {}
    for lineno, d in _read_jsonl(path):
        qid = d.get("question_id")
        record = by_id.get(qid)
        if record is None:
            continue  # stored set for a question outside this dataset slice
        out[qid] = candidate_set_from_dict(d, record)
    return out
