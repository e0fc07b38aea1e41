"""Spatially consistent augmentation and training-sample emission.

Every raster operation here (crop, resize, translate) is mirrored by the
exact coordinate map applied to evidence boxes, so page content stays
inside its box after augmentation. A transform that would destroy a gold
box (under 70% of it surviving the frame) rejects the augmentation and
the caller falls back to the clean sample.
"""

from __future__ import annotations

import json
import math
import random
from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import Iterable, Mapping, Sequence

from PIL import Image

from .boxes import BoundingBox, clip_to_frame
from .chains import (
    EvidenceChain,
    EvidenceHop,
    ModelOutput,
    QARecord,
    emit_chain,
)
from .dataset import CandidateSet
from .errors import (
    ConfigError,
    LabelInconsistencyError,
    MissingSnapshotError,
    TransformError,
)

DEFAULT_BOX_RETENTION = 0.7

PHASE1_PROMPT = (
    "You are given one document screenshot labeled img_0. Locate the evidence "
    "region for the request below and respond with a single JSON object "
    '{{"answer": "...", "chain": [{{"hop": 1, "image_id": "img_0", '
    '"boxes": [[x1, y1, x2, y2]], "sub_question": "..."}}]}} and nothing else. '
    "Coordinates are pixels in img_0.\n\nRequest: {sub_question}"
)

PHASE2_PROMPT = (
    "You are given {k} document screenshots labeled img_0 through img_{last}. "
    "Answer the question by reasoning over the screenshots hop by hop. Respond "
    'with a single JSON object {{"answer": "...", "chain": [{{"hop": 1, '
    '"image_id": "img_<k>", "boxes": [[x1, y1, x2, y2]], "sub_question": "..."}}, '
    "...]}} and nothing else. List hops in logical order; coordinates are pixels "
    "in the selected image.\n\nQuestion: {question}"
)


@dataclass(frozen=True)
class AffineTransform:
    """Crop, then scale, then translate: x' = (x - crop.x1) * sx + dx.

    ``crop`` is in source coordinates (None = full frame). Scales must be
    positive and finite.
    """

    sx: float
    sy: float
    dx: float = 0.0
    dy: float = 0.0
    crop: BoundingBox | None = None

    def __post_init__(self):
        for name in ("sx", "sy", "dx", "dy"):
            value = getattr(self, name)
            if not isinstance(value, (int, float)) or isinstance(value, bool):
                raise TransformError(f"{name} must be a number")
            if not math.isfinite(value):
                raise TransformError(f"{name} must be finite, got {value!r}")
        if self.sx <= 0 or self.sy <= 0:
            raise TransformError(f"scales must be positive, got sx={self.sx}, sy={self.sy}")

    @property
    def is_identity(self) -> bool:
        return (
            self.sx == 1.0 and self.sy == 1.0
            and self.dx == 0.0 and self.dy == 0.0
            and self.crop is None
        )

    def summary(self) -> dict:
        return {
            "sx": self.sx,
            "sy": self.sy,
            "dx": self.dx,
            "dy": self.dy,
            "crop": list(self.crop.as_tuple()) if self.crop else None,
        }


@dataclass(frozen=True)
class AugmentConfig:
    """Strengths for the random transform, all seeded.

    ``resolutions`` optionally lists longest-side targets; emission picks
    one per sample so training sees multiple input resolutions without
    changing sample counts. All-zero strengths make augmentation a no-op.
    """

    max_crop_fraction: float = 0.08
    max_translate_fraction: float = 0.05
    scale_range: tuple[float, float] = (0.9, 1.1)
    aspect_jitter: float = 0.05
    min_box_retention: float = DEFAULT_BOX_RETENTION
    resolutions: tuple[int, ...] = ()

    def __post_init__(self):
        object.__setattr__(self, "scale_range", tuple(self.scale_range))
        object.__setattr__(self, "resolutions", tuple(self.resolutions))
        lo, hi = self.scale_range
        if not (0.0 < lo <= hi):
            raise ConfigError(f"invalid scale_range {self.scale_range}")
        if not (0.0 <= self.max_crop_fraction < 0.5):
            raise ConfigError(f"invalid max_crop_fraction {self.max_crop_fraction}")
        if self.max_translate_fraction < 0 or self.aspect_jitter < 0:
            raise ConfigError("translate/aspect strengths must be >= 0")
        if not (0.0 < self.min_box_retention <= 1.0):
            raise ConfigError(f"invalid min_box_retention {self.min_box_retention}")
        if any(side < 16 for side in self.resolutions):
            raise ConfigError("resolution targets must be >= 16 px")

    @property
    def is_zero_strength(self) -> bool:
        return (
            self.max_crop_fraction == 0.0
            and self.max_translate_fraction == 0.0
            and self.scale_range == (1.0, 1.0)
            and self.aspect_jitter == 0.0
        )


ZERO_STRENGTH = AugmentConfig(
    max_crop_fraction=0.0,
    max_translate_fraction=0.0,
    scale_range=(1.0, 1.0),
    aspect_jitter=0.0,
)


def output_dims(transform: AffineTransform, src_dims: tuple[int, int]) -> tuple[int, int]:
    """Raster dimensions after crop+scale (translation keeps the canvas)."""
    width, height = src_dims
    if transform.crop is not None:
        width = transform.crop.width
        height = transform.crop.height
    return max(1, round(width * transform.sx)), max(1, round(height * transform.sy))


def transform_box(
    box: BoundingBox,
    transform: AffineTransform,
    src_dims: tuple[int, int],
    dst_dims: tuple[int, int] | None = None,
    min_retention: float = DEFAULT_BOX_RETENTION,
) -> BoundingBox | None:
    """Map a box through a transform, clipping to the destination frame.

    Returns None (dropped) when less than ``min_retention`` of the
    transformed box survives the frame — evidence that mostly left the
    image is not usable as a target.

    Raises:
        TransformError: crop extends outside the source frame.
    """
    src_w, src_h = src_dims
    cx = cy = 0.0
    if transform.crop is not None:
        if not transform.crop.within_frame(src_w, src_h):
            raise TransformError(
                f"crop {transform.crop.as_tuple()} exceeds source frame {src_w}x{src_h}"
            )
        cx, cy = transform.crop.x1, transform.crop.y1
    moved = BoundingBox(
        (box.x1 - cx) * transform.sx + transform.dx,
        (box.y1 - cy) * transform.sy + transform.dy,
        (box.x2 - cx) * transform.sx + transform.dx,
        (box.y2 - cy) * transform.sy + transform.dy,
    )
    dst_w, dst_h = dst_dims if dst_dims is not None else output_dims(transform, src_dims)
    clipped = clip_to_frame(moved, dst_w, dst_h)
    if clipped is None or clipped.area < min_retention * moved.area:
        return None
    return clipped


def apply_transform_image(image: Image.Image, transform: AffineTransform) -> Image.Image:
    """Apply a transform to a raster. Crop bounds are integral pixels;
    translation pastes onto a white canvas of the scaled size."""
    out = image
    if transform.crop is not None:
        c = transform.crop
        out = out.crop((round(c.x1), round(c.y1), round(c.x2), round(c.y2)))
    dst_w, dst_h = output_dims(transform, image.size)
    if out.size != (dst_w, dst_h):
        out = out.resize((dst_w, dst_h), Image.BILINEAR)
    dx, dy = round(transform.dx), round(transform.dy)
    if dx or dy:
        canvas = Image.new(out.mode, (dst_w, dst_h), "white")
        canvas.paste(out, (dx, dy))
        out = canvas
    elif out is image:
        out = image.copy()
    return out


def sample_transform(
    rng: random.Random, src_dims: tuple[int, int], cfg: AugmentConfig
) -> AffineTransform:
    """Draw a random transform within the configured strengths.

    Scales are snapped so that box math and the integer raster resize
    agree exactly; zero strengths yield the identity.
    """
    width, height = src_dims
    max_ix = int(width * cfg.max_crop_fraction)
    max_iy = int(height * cfg.max_crop_fraction)
    left, right = rng.randint(0, max_ix), rng.randint(0, max_ix)
    top, bottom = rng.randint(0, max_iy), rng.randint(0, max_iy)
    crop = None
    crop_w, crop_h = width, height
    if left or right or top or bottom:
        crop = BoundingBox(left, top, width - right, height - bottom)
        crop_w, crop_h = width - left - right, height - top - bottom
    scale = rng.uniform(*cfg.scale_range)
    aspect = rng.uniform(1.0 - cfg.aspect_jitter, 1.0 + cfg.aspect_jitter)
    dst_w = max(1, round(crop_w * scale))
    dst_h = max(1, round(crop_h * scale * aspect))
    sx = dst_w / crop_w
    sy = dst_h / crop_h
    max_dx = int(round(dst_w * cfg.max_translate_fraction))
    max_dy = int(round(dst_h * cfg.max_translate_fraction))
    dx = rng.randint(-max_dx, max_dx) if max_dx else 0
    dy = rng.randint(-max_dy, max_dy) if max_dy else 0
    return AffineTransform(sx=sx, sy=sy, dx=float(dx), dy=float(dy), crop=crop)


def _augment(
    image: Image.Image,
    boxes: Sequence[BoundingBox],
    transform: AffineTransform,
    min_retention: float,
) -> tuple[Image.Image, tuple[BoundingBox, ...]] | None:
    if transform.is_identity:
        return image, tuple(boxes)
    dst = output_dims(transform, image.size)
    moved: list[BoundingBox] = []
    for box in boxes:
        out = transform_box(box, transform, image.size, dst, min_retention)
        if out is None:
            return None
        moved.append(out)
    return apply_transform_image(image, transform), tuple(moved)


def augment_sample(
    image: Image.Image,
    boxes: Sequence[BoundingBox],
    seed: int | str,
    cfg: AugmentConfig = AugmentConfig(),
) -> tuple[Image.Image, tuple[BoundingBox, ...]] | None:
    """Randomly augment an image with its boxes, or reject.

    Returns (image', boxes') with every box mapped consistently, or None
    when any box would be dropped; callers then use the clean sample.
    Identical (image, boxes, seed, cfg) reproduce identical output.
    """
    rng = random.Random(seed)
    transform = sample_transform(rng, image.size, cfg)
    return _augment(image, boxes, transform, cfg.min_box_retention)


def resize_resolution(
    image: Image.Image, boxes: Sequence[BoundingBox], longest_side: int
) -> tuple[Image.Image, tuple[BoundingBox, ...]]:
    """Uniformly rescale so the longest side equals ``longest_side``.

    Box coordinates scale by the pure ratio (so repeated resizes compose
    exactly); the short raster side rounds up, keeping all boxes in frame.
    A target equal to the current longest side is the identity.
    """
    if longest_side < 1:
        raise ConfigError(f"longest_side must be >= 1, got {longest_side}")
    width, height = image.size
    current = max(width, height)
    if current == longest_side:
        return image, tuple(boxes)
    scale = longest_side / current
    if width >= height:
        new_size = (longest_side, max(1, math.ceil(height * scale)))
    else:
        new_size = (max(1, math.ceil(width * scale)), longest_side)
    return image.resize(new_size, Image.BILINEAR), tuple(b.scaled(scale) for b in boxes)


def resize_variants(
    image: Image.Image, boxes: Sequence[BoundingBox], longest_sides: Iterable[int]
) -> list[tuple[Image.Image, tuple[BoundingBox, ...], int]]:
    """One (image, boxes, side) variant per configured longest side."""
    return [(*resize_resolution(image, boxes, side), side) for side in longest_sides]


def permute_candidates(
    candset: CandidateSet, target: EvidenceChain, seed: int | str
) -> tuple[CandidateSet, EvidenceChain]:
    """Reshuffle candidate positions and relabel the target to match.

    Labels follow positions (img_i is always position i), the gold_map is
    rewritten, and the chain's hop ORDER is untouched — only image_id
    labels are translated.
    """
    k = candset.k
    order = list(range(k))
    random.Random(seed).shuffle(order)
    new_ordered = tuple(
        (f"img_{pos}", candset.ordered[order[pos]][1]) for pos in range(k)
    )
    relabel = {candset.ordered[order[pos]][0]: f"img_{pos}" for pos in range(k)}
    new_gold_map = {doc: relabel[label] for doc, label in candset.gold_map.items()}
    new_hops = []
    for hop in target.hops:
        if hop.image_id not in relabel:
            raise LabelInconsistencyError(
                f"target references unknown label {hop.image_id!r}"
            )
        new_hops.append(replace(hop, image_id=relabel[hop.image_id]))
    permuted = CandidateSet(
        question_id=candset.question_id,
        ordered=new_ordered,
        gold_map=new_gold_map,
        k=k,
        seed=candset.seed,
        policy=candset.policy,
    )
    return permuted, EvidenceChain(tuple(new_hops))


@dataclass(frozen=True)
class TrainingSample:
    """One supervised example: prompt, labeled images (by path, never
    inlined), and the serialized chain document as target."""

    phase: int
    prompt_text: str
    image_refs: tuple[tuple[str, str], ...]
    target: str
    provenance: dict = field(default_factory=dict)

    def to_dict(self) -> dict:
        return {
            "phase": self.phase,
            "prompt_text": self.prompt_text,
            "image_refs": [{"label": label, "path": path} for label, path in self.image_refs],
            "target": self.target,
            "provenance": self.provenance,
        }


def training_sample_from_dict(d: dict) -> TrainingSample:
    return TrainingSample(
        phase=int(d["phase"]),
        prompt_text=d["prompt_text"],
        image_refs=tuple((r["label"], r["path"]) for r in d["image_refs"]),
        target=d["target"],
        provenance=d.get("provenance", {}),
    )


def save_training_samples(samples: Sequence[TrainingSample], path: str | Path) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        for sample in samples:
            fh.write(json.dumps(sample.to_dict(), ensure_ascii=False) + "\n")


def load_training_samples(path: str | Path) -> list[TrainingSample]:
    out = []
    with open(path, "r", encoding="utf-8") as fh:
        for line in fh:
            line = line.strip()
            if line:
                out.append(training_sample_from_dict(json.loads(line)))
    return out


def default_sub_question(question: str, hop: int) -> str:
    return f"Hop {hop} evidence for: {question}"


def _augmentation_active(cfg: AugmentConfig | None) -> bool:
    return cfg is not None and (not cfg.is_zero_strength or bool(cfg.resolutions))


def _load_rgb(path: str | Path) -> Image.Image:
    with Image.open(path) as img:
        return img.convert("RGB")


def _pick_resolution(rng: random.Random, cfg: AugmentConfig) -> int | None:
    return rng.choice(cfg.resolutions) if cfg.resolutions else None


def emit_phase1(
    record: QARecord,
    image_paths: Mapping[str, str | Path],
    seed: int | str = 0,
    cfg: AugmentConfig | None = None,
    out_dir: str | Path | None = None,
) -> list[TrainingSample]:
    """Emit one single-image localization sample per gold hop.

    Every sample shows exactly one screenshot labeled img_0 and targets a
    one-hop chain over it. With augmentation enabled, rejected transforms
    fall back to the clean image; derived rasters are written under
    ``out_dir``.
    """
    active = _augmentation_active(cfg)
    if active and out_dir is None:
        raise ConfigError("augmentation requires out_dir for derived images")
    samples: list[TrainingSample] = []
    answer = record.gold_answers[0]
    for position, gold in enumerate(record.gold_chain, start=1):
        if gold.doc_id not in image_paths:
            raise MissingSnapshotError(
                f"{record.question_id}: no image for doc {gold.doc_id!r}"
            )
        src_path = str(image_paths[gold.doc_id])
        boxes: tuple[BoundingBox, ...] = tuple(gold.boxes)
        ref_path = src_path
        transform_note: dict | str = "clean"
        resolution = None
        if active:
            rng = random.Random(f"{seed}:{record.question_id}:p1:{position}")
            image = _load_rgb(src_path)
            transform = sample_transform(rng, image.size, cfg)
            result = _augment(image, boxes, transform, cfg.min_box_retention)
            if result is None:
                result = image, boxes
                transform_note = "clean-fallback"
            else:
                transform_note = (
                    "clean" if transform.is_identity else transform.summary()
                )
            image, boxes = result
            resolution = _pick_resolution(rng, cfg)
            if resolution is not None:
                image, boxes = resize_resolution(image, boxes, resolution)
            out_path = Path(out_dir) / f"{record.question_id}_p1_h{position}.png"
            image.save(out_path)
            ref_path = str(out_path)
        sub_question = default_sub_question(record.question, position)
        target = emit_chain(
            ModelOutput(
                answer=answer,
                chain=EvidenceChain(
                    (EvidenceHop(1, "img_0", boxes, sub_question),)
                ),
            )
        )
        samples.append(
            TrainingSample(
                phase=1,
                prompt_text=PHASE1_PROMPT.format(sub_question=sub_question),
                image_refs=(("img_0", ref_path),),
                target=target,
                provenance={
                    "question_id": record.question_id,
                    "source_hop": position,
                    "source_doc": gold.doc_id,
                    "seed": str(seed),
                    "transform": transform_note,
                    "resolution": resolution,
                },
            )
        )
    return samples


def emit_phase2(
    record: QARecord,
    candset: CandidateSet,
    image_paths: Mapping[str, str | Path],
    seed: int | str = 0,
    cfg: AugmentConfig | None = None,
    out_dir: str | Path | None = None,
) -> TrainingSample:
    """Emit the full-chain sample: all k candidates, gold chain target.

    Candidate images may be independently augmented; if any GOLD image's
    transform would drop a box the whole sample falls back to clean
    geometry (resolution resizing still applies — it never drops boxes).
    """
    active = _augmentation_active(cfg)
    if active and out_dir is None:
        raise ConfigError("augmentation requires out_dir for derived images")
    for _, doc_id in candset.ordered:
        if doc_id not in image_paths:
            raise MissingSnapshotError(
                f"{record.question_id}: no image for doc {doc_id!r}"
            )
    boxes_by_doc: dict[str, list[BoundingBox]] = {}
    for gold in record.gold_chain:
        boxes_by_doc.setdefault(gold.doc_id, []).extend(gold.boxes)

    refs: list[tuple[str, str]] = []
    transforms: dict[str, dict | str] = {}
    new_boxes_by_doc: dict[str, list[BoundingBox]] = {}
    resolution = None

    if active:
        rng = random.Random(f"{seed}:{record.question_id}:p2")
        resolution = _pick_resolution(rng, cfg)
        images: dict[str, Image.Image] = {
            doc: _load_rgb(image_paths[doc]) for _, doc in candset.ordered
        }
        planned: dict[str, AffineTransform] = {}
        clean_fallback = False
        for label, doc in candset.ordered:
            t_rng = random.Random(f"{seed}:{record.question_id}:p2:{label}")
            planned[doc] = sample_transform(t_rng, images[doc].size, cfg)
        for doc, gold_boxes in boxes_by_doc.items():
            transform = planned[doc]
            dst = output_dims(transform, images[doc].size)
            moved = [
                transform_box(b, transform, images[doc].size, dst, cfg.min_box_retention)
                for b in gold_boxes
            ]
            if any(m is None for m in moved):
                clean_fallback = True
                break
            new_boxes_by_doc[doc] = [m for m in moved if m is not None]
        for label, doc in candset.ordered:
            image = images[doc]
            if clean_fallback:
                transforms[label] = "clean-fallback"
                new_boxes_by_doc[doc] = list(boxes_by_doc.get(doc, []))
            else:
                transform = planned[doc]
                transforms[label] = (
                    "clean" if transform.is_identity else transform.summary()
                )
                if not transform.is_identity:
                    image = apply_transform_image(image, transform)
            doc_boxes = new_boxes_by_doc.get(doc, [])
            if resolution is not None:
                image, scaled = resize_resolution(image, doc_boxes, resolution)
                if doc in new_boxes_by_doc:
                    new_boxes_by_doc[doc] = list(scaled)
            out_path = Path(out_dir) / f"{record.question_id}_p2_{label}.png"
            image.save(out_path)
            refs.append((label, str(out_path)))
    else:
        refs = [(label, str(image_paths[doc])) for label, doc in candset.ordered]
        new_boxes_by_doc = {doc: list(bs) for doc, bs in boxes_by_doc.items()}

    # Reassemble per-hop boxes in chain order from each doc's queue.
    cursor: dict[str, int] = {doc: 0 for doc in boxes_by_doc}
    hops: list[EvidenceHop] = []
    for position, gold in enumerate(record.gold_chain, start=1):
        count = len(gold.boxes)
        start = cursor[gold.doc_id]
        hop_boxes = tuple(new_boxes_by_doc[gold.doc_id][start : start + count])
        cursor[gold.doc_id] = start + count
        hops.append(
            EvidenceHop(
                hop_index=position,
                image_id=candset.gold_map[gold.doc_id],
                boxes=hop_boxes,
                sub_question=default_sub_question(record.question, position),
            )
        )
    target = emit_chain(
        ModelOutput(answer=record.gold_answers[0], chain=EvidenceChain(tuple(hops)))
    )
    return TrainingSample(
        phase=2,
        prompt_text=PHASE2_PROMPT.format(
            question=record.question, k=candset.k, last=candset.k - 1
        ),
        image_refs=tuple(refs),
        target=target,
        provenance={
            "question_id": record.question_id,
            "seed": str(seed),
            "transforms": transforms,
            "resolution": resolution,
        },
    )
