"""Draw gold and predicted evidence boxes onto candidate screenshots."""

from __future__ import annotations

from pathlib import Path
from typing import Mapping

from PIL import Image, ImageDraw

from .chains import ModelOutput, QARecord
from .dataset import CandidateSet

GOLD_COLOR = (27, 131, 59)
PRED_COLOR = (197, 34, 34)
_TEXT_BG = (255, 255, 255)


def _draw_boxes(draw: ImageDraw.ImageDraw, boxes, color, width: int) -> None:
    for box in boxes:
        draw.rectangle(box.as_tuple(), outline=color, width=width)


def _caption(image: Image.Image, text: str) -> None:
    draw = ImageDraw.Draw(image)
    box = draw.textbbox((6, 4), text)
    draw.rectangle((box[0] - 4, box[1] - 3, box[2] + 4, box[3] + 3), fill=_TEXT_BG)
    draw.text((6, 4), text, fill=(0, 0, 0))


def render_overlays(
    record: QARecord,
    candset: CandidateSet,
    output: ModelOutput | None,
    image_paths: Mapping[str, str | Path],
    out_dir: str | Path,
) -> tuple[list[Path], list[str]]:
    """Write one composite raster per gold hop plus index lines.

    Gold boxes draw in green on the gold document; predicted boxes in red
    on whichever candidate the prediction selected. Same selection gives
    a single panel with both stroke styles, a mismatch gives side-by-side
    panels. Returns (written paths, index lines for this record).
    """
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    label_to_doc = candset.label_to_doc()
    written: list[Path] = []
    index_lines: list[str] = []
    for position, gold in enumerate(record.gold_chain, start=1):
        pred_hop = None
        if output is not None and position - 1 < len(output.chain.hops):
            pred_hop = output.chain.hops[position - 1]
        pred_doc = label_to_doc.get(pred_hop.image_id) if pred_hop else None

        gold_img = Image.open(image_paths[gold.doc_id]).convert("RGB")
        gold_draw = ImageDraw.Draw(gold_img)
        _draw_boxes(gold_draw, gold.boxes, GOLD_COLOR, 3)

        if pred_hop is not None and pred_doc == gold.doc_id:
            _draw_boxes(gold_draw, pred_hop.boxes, PRED_COLOR, 2)
            _caption(gold_img, f"hop {position}  gold+pred: {gold.doc_id}")
            composite = gold_img
        elif pred_hop is not None and pred_doc is not None:
            pred_img = Image.open(image_paths[pred_doc]).convert("RGB")
            _draw_boxes(ImageDraw.Draw(pred_img), pred_hop.boxes, PRED_COLOR, 2)
            _caption(gold_img, f"hop {position}  gold: {gold.doc_id}")
            _caption_offset = f"hop {position}  pred: {pred_doc}"
            _caption(pred_img, _caption_offset)
            height = max(gold_img.height, pred_img.height)
            composite = Image.new(
                "RGB", (gold_img.width + pred_img.width + 8, height), "white"
            )
            composite.paste(gold_img, (0, 0))
            composite.paste(pred_img, (gold_img.width + 8, 0))
        else:
            note = "no prediction" if pred_hop is None else f"unknown label {pred_hop.image_id}"
            _caption(gold_img, f"hop {position}  gold: {gold.doc_id}  ({note})")
            composite = gold_img

        path = out_dir / f"{record.question_id}_hop{position}.png"
        composite.save(path)
        written.append(path)
        pred_desc = pred_hop.image_id if pred_hop else "-"
        index_lines.append(
            f"{record.question_id} hop {position}: "
            f"gold={gold.doc_id} ({candset.gold_map.get(gold.doc_id, '?')}) "
            f"pred={pred_desc} file={path.name}"
        )
    return written, index_lines
