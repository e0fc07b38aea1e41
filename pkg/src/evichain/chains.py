"""Evidence-chain value types and the JSON wire schema.

A model answers a multi-hop question with a single JSON document:

    {"answer": <string>,
     "chain": [{"hop": <int>, "image_id": "img_<k>",
                "boxes": [[x1, y1, x2, y2], ...],
                "sub_question": <string>}, ...]}

Hops appear in logical reasoning order and are numbered 1..T. The same
document doubles as the training target emitted for fine-tuning.
"""

from __future__ import annotations

import json
import re
from dataclasses import dataclass

from .boxes import BoundingBox
from .errors import BoxError, InvariantError, SchemaError

QUESTION_TYPES = ("bridge_comparison", "comparison", "compositional", "inference")

_IMAGE_ID_RE = re.compile(r"img_\d+")


@dataclass(frozen=True)
class EvidenceHop:
    """One reasoning step: a candidate image, its evidence boxes, and the
    sub-question (or reasoning thought) resolved at this step."""

    hop_index: int
    image_id: str
    boxes: tuple[BoundingBox, ...]
    sub_question: str

    def __post_init__(self):
        if isinstance(self.hop_index, bool) or not isinstance(self.hop_index, int):
            raise InvariantError("hop", "hop index must be an integer")
        if self.hop_index < 1:
            raise InvariantError("hop", f"hop index must be >= 1, got {self.hop_index}")
        if not isinstance(self.image_id, str) or not _IMAGE_ID_RE.fullmatch(self.image_id):
            raise InvariantError(
                "image_id", f"expected a label of the form img_<k>, got {self.image_id!r}"
            )
        object.__setattr__(self, "boxes", tuple(self.boxes))
        if not self.boxes:
            raise InvariantError("boxes", "a hop needs at least one box")
        for b in self.boxes:
            if not isinstance(b, BoundingBox):
                raise InvariantError("boxes", f"expected BoundingBox, got {type(b).__name__}")
        if not isinstance(self.sub_question, str):
            raise InvariantError("sub_question", "sub_question must be a string")


@dataclass(frozen=True)
class EvidenceChain:
    """Ordered hops numbered exactly 1..T."""

    hops: tuple[EvidenceHop, ...]

    def __post_init__(self):
        object.__setattr__(self, "hops", tuple(self.hops))
        if not self.hops:
            raise InvariantError("chain", "a chain needs at least one hop")
        for position, hop in enumerate(self.hops, start=1):
            if hop.hop_index != position:
                raise InvariantError(
                    f"chain[{position - 1}].hop",
                    f"hop indices must run 1..{len(self.hops)} in order, "
                    f"got {hop.hop_index} at position {position}",
                )

    def __len__(self) -> int:
        return len(self.hops)


@dataclass(frozen=True)
class ModelOutput:
    """A parsed model response: final answer plus its evidence chain."""

    answer: str
    chain: EvidenceChain

    def __post_init__(self):
        if not isinstance(self.answer, str) or not self.answer.strip():
            raise InvariantError("answer", "answer must be a non-empty string")


@dataclass(frozen=True)
class GoldHop:
    """Ground-truth evidence for one hop: the source document and its boxes."""

    doc_id: str
    boxes: tuple[BoundingBox, ...]

    def __post_init__(self):
        object.__setattr__(self, "boxes", tuple(self.boxes))


@dataclass(frozen=True)
class QARecord:
    """One dataset example.

    ``gold_chain`` is ordered by reasoning hop. The constructor keeps
    shape checks light so that malformed rows loaded from disk can still
    be REJECTED (not crashed on) by ``dataset.validate_dataset``; the
    pipeline itself only ever builds conforming records.
    """

    question_id: str
    question: str
    gold_answers: tuple[str, ...]
    question_type: str
    gold_chain: tuple[GoldHop, ...]
    hop_count: int
    entity_chain_key: str

    def __post_init__(self):
        object.__setattr__(self, "gold_answers", tuple(self.gold_answers))
        object.__setattr__(self, "gold_chain", tuple(self.gold_chain))
        if not self.gold_answers:
            raise InvariantError("gold_answers", "a record needs at least one gold answer")

    @property
    def gold_doc_ids(self) -> tuple[str, ...]:
        """Distinct gold document ids in hop order."""
        seen: list[str] = []
        for hop in self.gold_chain:
            if hop.doc_id not in seen:
                seen.append(hop.doc_id)
        return tuple(seen)


def _reject_constant(token: str):
    raise SchemaError("", f"non-finite number {token} is not allowed")


def _require(obj: dict, key: str, parent: str):
    if key not in obj:
        path = f"{parent}.{key}" if parent else key
        raise SchemaError(path, "missing required field")
    return obj[key]


def _coord(value, path: str) -> float:
    if isinstance(value, bool) or not isinstance(value, (int, float)):
        raise SchemaError(path, f"coordinate must be a number, got {type(value).__name__}")
    return float(value)


def _parse_box(raw, path: str) -> BoundingBox:
    if not isinstance(raw, list) or len(raw) != 4:
        raise SchemaError(path, "a box must be an array of four numbers")
    coords = [_coord(v, f"{path}[{i}]") for i, v in enumerate(raw)]
    try:
        return BoundingBox(*coords)
    except BoxError as exc:
        raise InvariantError(path, str(exc)) from exc


def _parse_hop(raw, index: int) -> EvidenceHop:
    path = f"chain[{index}]"
    if not isinstance(raw, dict):
        raise SchemaError(path, "a hop must be an object")
    hop_no = _require(raw, "hop", path)
    if isinstance(hop_no, bool) or not isinstance(hop_no, int):
        raise SchemaError(f"{path}.hop", "hop must be an integer")
    if hop_no < 1:
        raise InvariantError(f"{path}.hop", f"hop must be >= 1, got {hop_no}")
    image_id = _require(raw, "image_id", path)
    if not isinstance(image_id, str) or not _IMAGE_ID_RE.fullmatch(image_id):
        raise SchemaError(
            f"{path}.image_id", f"expected a label of the form img_<k>, got {image_id!r}"
        )
    boxes_raw = _require(raw, "boxes", path)
    if not isinstance(boxes_raw, list) or not boxes_raw:
        raise SchemaError(f"{path}.boxes", "boxes must be a non-empty array")
    boxes = tuple(
        _parse_box(b, f"{path}.boxes[{i}]") for i, b in enumerate(boxes_raw)
    )
    sub_question = _require(raw, "sub_question", path)
    if not isinstance(sub_question, str):
        raise SchemaError(f"{path}.sub_question", "sub_question must be a string")
    return EvidenceHop(
        hop_index=hop_no, image_id=image_id, boxes=boxes, sub_question=sub_question
    )


def parse_chain(text: str) -> ModelOutput:
    """Parse and validate a chain document.

    Args:
        text: the JSON document (exactly one object; surrounding prose is
            the extractor's job, not the parser's).

    Returns:
        The validated ModelOutput.

    Raises:
        SchemaError: structural violations (missing field, empty boxes,
            malformed image_id, non-numeric coordinate), with a field path.
        InvariantError: structurally valid but violating a domain
            invariant, e.g. x1 >= x2 or hop indices out of order.
    """
    try:
        doc = json.loads(text, parse_constant=_reject_constant)
    except SchemaError:
        raise
    except (json.JSONDecodeError, RecursionError) as exc:
        raise SchemaError("", f"not valid JSON: {exc}") from exc
    if not isinstance(doc, dict):
        raise SchemaError("", "document root must be an object")

    answer = _require(doc, "answer", "")
    if not isinstance(answer, str):
        raise SchemaError("answer", "answer must be a string")
    if not answer.strip():
        raise InvariantError("answer", "answer must be non-empty after trimming")

    chain_raw = _require(doc, "chain", "")
    if not isinstance(chain_raw, list):
        raise SchemaError("chain", "chain must be an array of hops")
    if not chain_raw:
        raise SchemaError("chain", "chain must contain at least one hop")
    hops = [_parse_hop(h, i) for i, h in enumerate(chain_raw)]
    for i, hop in enumerate(hops):
        if hop.hop_index != i + 1:
            raise InvariantError(
                f"chain[{i}].hop",
                f"hop indices must run 1..{len(hops)} in order, got {hop.hop_index}",
            )
    return ModelOutput(answer=answer, chain=EvidenceChain(tuple(hops)))


def chain_to_dict(output: ModelOutput) -> dict:
    return {
        "answer": output.answer,
        "chain": [
            {
                "hop": hop.hop_index,
                "image_id": hop.image_id,
                "boxes": [[b.x1, b.y1, b.x2, b.y2] for b in hop.boxes],
                "sub_question": hop.sub_question,
            }
            for hop in output.chain.hops
        ],
    }


def emit_chain(output: ModelOutput) -> str:
    """Serialize a ModelOutput to its canonical JSON document.

    Coordinates keep full precision; parse_chain(emit_chain(x)) == x
    bit-exactly.
    """
    return json.dumps(chain_to_dict(output), ensure_ascii=False)
