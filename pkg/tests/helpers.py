"""Shared test machinery: synthetic corpora on disk, a chat-completions
stub endpoint, and a stub WebDriver server.

Both stubs bind 127.0.0.1 on an ephemeral port and run in a daemon
thread; use them as context managers.
"""

from __future__ import annotations

import base64
import io
import json
import re
import threading
import time
from http.server import BaseHTTPRequestHandler, ThreadingHTTPServer
from pathlib import Path

from PIL import Image, ImageDraw

from evichain import (
    QUESTION_TYPES,
    BoundingBox,
    CandidateDocument,
    DocumentPool,
    EvidenceChain,
    EvidenceHop,
    GoldHop,
    ModelOutput,
    QARecord,
    emit_chain,
)


# ---------------------------------------------------------------------------
# synthetic corpus builders


def make_image(path: str | Path, width: int, height: int, tint: int) -> None:
    """A small deterministic PNG: light background, a few colored blocks."""
    img = Image.new("RGB", (width, height), (246, 245, 240))
    draw = ImageDraw.Draw(img)
    for i in range(3):
        x = (tint * 13 + i * 29) % max(1, width - 20)
        y = (tint * 7 + i * 17) % max(1, height - 12)
        color = (
            (tint * 37 + 60 + i * 40) % 256,
            (tint * 53 + 90) % 256,
            (tint * 71 + 120) % 256,
        )
        draw.rectangle([x, y, x + 16, y + 8], fill=color)
    img.save(path)


def make_pool(
    directory: str | Path,
    n_docs: int,
    width: int = 120,
    height: int = 90,
    group_size: int | None = None,
) -> DocumentPool:
    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    docs = {}
    for i in range(n_docs):
        doc_id = f"doc_{i}"
        path = directory / f"{doc_id}.png"
        make_image(path, width, height, i)
        group = f"grp_{i // group_size}" if group_size else None
        docs[doc_id] = CandidateDocument(
            doc_id=doc_id, image_path=str(path), width=width, height=height,
            group_id=group,
        )
    return DocumentPool(documents=docs)


def hop_box(h: int, j: int = 0) -> BoundingBox:
    """Deterministic in-frame box for hop h, box j (fits a 120x90 frame)."""
    x1 = 8.0 + 6 * h + 3 * j
    y1 = 6.0 + 4 * h + 2 * j
    return BoundingBox(x1, y1, x1 + 34.0, y1 + 18.0)


def make_record(
    i: int,
    doc_ids: list[str],
    qtype: str = "compositional",
    n_boxes: int = 1,
    answer: str | None = None,
) -> QARecord:
    chain = tuple(
        GoldHop(doc_id=doc, boxes=tuple(hop_box(h, j) for j in range(n_boxes)))
        for h, doc in enumerate(doc_ids, start=1)
    )
    return QARecord(
        question_id=f"q_{i}",
        question=f"Which entity links {doc_ids[0]} to {doc_ids[-1]} in case {i}?",
        gold_answers=(answer if answer is not None else f"entity {i}",),
        question_type=qtype,
        gold_chain=chain,
        hop_count=len(chain),
        entity_chain_key=f"ent_{i % 7}",
    )


def make_corpus(
    directory: str | Path,
    n_records: int = 6,
    n_docs: int = 8,
    hops: int = 2,
    width: int = 120,
    height: int = 90,
    n_boxes: int = 1,
) -> tuple[list[QARecord], DocumentPool]:
    pool = make_pool(directory, n_docs, width, height)
    records = [
        make_record(
            i,
            [f"doc_{(i + j) % n_docs}" for j in range(hops)],
            qtype=QUESTION_TYPES[i % len(QUESTION_TYPES)],
            n_boxes=n_boxes,
        )
        for i in range(n_records)
    ]
    return records, pool


def gold_output(record: QARecord, candset, answer: str | None = None) -> ModelOutput:
    """A model output that reproduces the gold chain exactly."""
    hops = tuple(
        EvidenceHop(
            hop_index=pos,
            image_id=candset.gold_map[gold.doc_id],
            boxes=tuple(gold.boxes),
            sub_question=f"hop {pos}",
        )
        for pos, gold in enumerate(record.gold_chain, start=1)
    )
    return ModelOutput(
        answer=record.gold_answers[0] if answer is None else answer,
        chain=EvidenceChain(hops),
    )


def gold_raw(record: QARecord, candset) -> str:
    """The raw response text of a perfectly behaved model."""
    return emit_chain(gold_output(record, candset))


def make_block_image(
    width: int, height: int, block: BoundingBox,
    color: tuple[int, int, int] = (60, 60, 200),
) -> Image.Image:
    """White raster with one solid block whose continuous extent equals
    ``block`` exactly (PIL rectangles include their end pixel)."""
    img = Image.new("RGB", (width, height), (255, 255, 255))
    ImageDraw.Draw(img).rectangle(
        [int(block.x1), int(block.y1), int(block.x2) - 1, int(block.y2) - 1],
        fill=color,
    )
    return img


def content_bounds(
    img: Image.Image, color: tuple[int, int, int] = (60, 60, 200)
) -> BoundingBox | None:
    """Continuous bounds of pixels closer to ``color`` than to white.

    Resampling blends edge pixels; the half-intensity threshold keeps the
    measured edge within half a pixel of the true boundary.
    """
    import numpy as np

    arr = np.asarray(img.convert("RGB"), dtype=np.int32)
    full = sum(abs(c - 255) for c in color)
    mask = np.abs(arr - 255).sum(axis=2) > full / 2
    rows, cols = np.nonzero(mask)
    if not len(rows):
        return None
    return BoundingBox(
        float(cols.min()), float(rows.min()),
        float(cols.max() + 1), float(rows.max() + 1),
    )


def encloses_within(box: BoundingBox, content: BoundingBox, tol: float = 1.0) -> bool:
    """Every edge of ``box`` lies within ``tol`` pixels of the matching
    content edge (neither loose nor clipping)."""
    return (
        abs(box.x1 - content.x1) <= tol
        and abs(box.y1 - content.y1) <= tol
        and abs(box.x2 - content.x2) <= tol
        and abs(box.y2 - content.y2) <= tol
    )


def add_char_noise(text: str, rate: float, rng) -> str:
    """Substitute exactly round(rate * n) non-space characters, each with
    a random letter different from the original."""
    import string as _string

    eligible = [i for i, ch in enumerate(text) if ch != " "]
    count = round(rate * len(eligible))
    chars = list(text)
    for i in rng.sample(eligible, count):
        choices = [c for c in _string.ascii_lowercase if c != chars[i]]
        chars[i] = rng.choice(choices)
    return "".join(chars)


# ---------------------------------------------------------------------------
# chat-completions stub


class _EndpointHandler(BaseHTTPRequestHandler):
    def log_message(self, *args):  # keep pytest output clean
        pass

    def do_POST(self):
        stub = self.server.stub
        with stub.lock:
            stub.active += 1
            stub.max_active = max(stub.max_active, stub.active)
            fault = stub.faults.pop(0) if stub.faults else None
        try:
            length = int(self.headers.get("Content-Length", 0))
            body = self.rfile.read(length)
            if stub.delay:
                time.sleep(stub.delay)
            if fault is not None:
                self._send(fault, {"error": "injected fault"})
                return
            payload = json.loads(body)
            with stub.lock:
                stub.requests.append(payload)
                stub.headers.append(dict(self.headers.items()))
            self._send(
                200,
                {"choices": [{"message": {"role": "assistant",
                                          "content": stub.reply_for(payload)}}]},
            )
        finally:
            with stub.lock:
                stub.active -= 1

    def _send(self, code: int, obj: dict) -> None:
        data = json.dumps(obj).encode("utf-8")
        self.send_response(code)
        self.send_header("Content-Type", "application/json")
        self.send_header("Content-Length", str(len(data)))
        self.end_headers()
        self.wfile.write(data)


class StubEndpoint:
    """Chat-completions stub. Replies are keyed by question substring;
    ``faults`` is a queue of HTTP status codes returned (one per request)
    before normal behavior resumes."""

    def __init__(self, responses: dict[str, str] | None = None,
                 default: str = "I cannot tell.",
                 faults: tuple[int, ...] = (), delay: float = 0.0):
        self.responses = dict(responses or {})
        self.default = default
        self.faults = list(faults)
        self.delay = delay
        self.requests: list[dict] = []
        self.headers: list[dict] = []
        self.lock = threading.Lock()
        self.active = 0
        self.max_active = 0

    def reply_for(self, payload: dict) -> str:
        texts: list[str] = []
        for message in payload.get("messages", []):
            content = message.get("content")
            if isinstance(content, list):
                texts.extend(
                    part.get("text", "") for part in content
                    if part.get("type") == "text"
                )
            elif isinstance(content, str):
                texts.append(content)
        joined = "\n".join(texts)
        for question, reply in self.responses.items():
            if question in joined:
                return reply
        return self.default

    def __enter__(self) -> "StubEndpoint":
        self.server = ThreadingHTTPServer(("127.0.0.1", 0), _EndpointHandler)
        self.server.stub = self
        self.thread = threading.Thread(target=self.server.serve_forever, daemon=True)
        self.thread.start()
        return self

    def __exit__(self, *exc_info) -> None:
        self.server.shutdown()
        self.server.server_close()

    @property
    def url(self) -> str:
        return f"http://127.0.0.1:{self.server.server_address[1]}/v1/chat/completions"


# ---------------------------------------------------------------------------
# WebDriver stub

_SESSION_RE = re.compile(r"^/session/([^/]+)(/.*)?$")

CHROME_HEIGHT = 85  # window height minus innerHeight in the stub browser


def element_color(index: int) -> tuple[int, int, int]:
    return ((40 + 17 * index) % 256, (90 + 23 * index) % 256, (140 + 31 * index) % 256)


class _DriverHandler(BaseHTTPRequestHandler):
    def log_message(self, *args):
        pass

    def _json(self, code: int, value) -> None:
        data = json.dumps({"value": value}).encode("utf-8")
        self.send_response(code)
        self.send_header("Content-Type", "application/json")
        self.send_header("Content-Length", str(len(data)))
        self.end_headers()
        self.wfile.write(data)

    def _body(self) -> dict:
        length = int(self.headers.get("Content-Length", 0))
        raw = self.rfile.read(length) if length else b"{}"
        try:
            return json.loads(raw or b"{}")
        except ValueError:
            return {}

    def _session(self):
        m = _SESSION_RE.match(self.path)
        if not m:
            return None, None
        sid, rest = m.group(1), m.group(2) or ""
        return self.server.stub.sessions.get(sid), (sid, rest)

    def do_POST(self):
        stub = self.server.stub
        if self.path == "/session":
            self._body()
            sid = stub.create_session()
            self._json(200, {"sessionId": sid, "capabilities": {}})
            return
        sess, parsed = self._session()
        if sess is None:
            self._json(404, {"error": "invalid session id", "message": self.path})
            return
        _, rest = parsed
        body = self._body()
        if rest == "/timeouts":
            self._json(200, None)
        elif rest == "/url":
            url = body.get("url")
            page = stub.pages.get(url)
            if page is None:
                self._json(404, {"error": "unknown error", "message": f"no page at {url}"})
            elif page.get("nav_error") == "timeout":
                self._json(500, {"error": "timeout", "message": "navigation timed out"})
            else:
                sess["page"] = url
                self._json(200, None)
        elif rest == "/execute/sync":
            self._execute(stub, sess, body.get("script", ""))
        elif rest == "/window/rect":
            w, h = sess["window"]
            sess["window"] = (int(body.get("width", w)), int(body.get("height", h)))
            w, h = sess["window"]
            self._json(200, {"x": 0, "y": 0, "width": w, "height": h})
        else:
            self._json(404, {"error": "unknown command", "message": rest})

    def _execute(self, stub, sess, script: str) -> None:
        page = stub.pages.get(sess.get("page") or "", {})
        if "readyState" in script:
            if page.get("never_ready"):
                self._json(200, "loading")
            elif page.get("ready_states"):
                self._json(200, page["ready_states"].pop(0))
            else:
                self._json(200, "complete")
        elif "scrollWidth" in script:
            win_w, win_h = sess["window"]
            self._json(200, {
                "width": page.get("width", win_w),
                "height": page.get("height", win_h),
                "innerWidth": win_w,
                "innerHeight": max(0, win_h - CHROME_HEIGHT),
                "dpr": page.get("dpr", 1.0),
            })
        elif "querySelectorAll" in script:
            self._json(200, [
                {"element_id": e["element_id"], "kind": e["kind"],
                 "text": e["text"], "rects": [list(r) for r in e["rects"]]}
                for e in page.get("elements", [])
            ])
        else:
            self._json(200, None)

    def do_GET(self):
        stub = self.server.stub
        sess, parsed = self._session()
        if sess is None:
            self._json(404, {"error": "invalid session id", "message": self.path})
            return
        _, rest = parsed
        if rest == "/window/rect":
            w, h = sess["window"]
            self._json(200, {"x": 0, "y": 0, "width": w, "height": h})
        elif rest == "/screenshot":
            page = stub.pages.get(sess.get("page") or "")
            if page is None:
                self._json(500, {"error": "unknown error", "message": "no page loaded"})
            elif page.get("screenshot") == "garbage":
                self._json(200, base64.b64encode(b"definitely not a png").decode("ascii"))
            else:
                png = stub.render(page, sess)
                self._json(200, base64.b64encode(png).decode("ascii"))
        else:
            self._json(404, {"error": "unknown command", "message": rest})

    def do_DELETE(self):
        stub = self.server.stub
        m = _SESSION_RE.match(self.path)
        if m and not m.group(2) and m.group(1) in stub.sessions:
            stub.close_session(m.group(1))
            self._json(200, None)
        else:
            self._json(404, {"error": "invalid session id", "message": self.path})


class StubWebDriver:
    """Minimal wire-protocol driver. Pages are dicts keyed by URL:

    width/height     document size in CSS pixels
    dpr              device pixel ratio (default 1.0)
    elements         [{element_id, kind, text, rects=[[l,t,r,b] css], ...}]
    ready_states     queue of readyState answers (then "complete")
    never_ready      page never reaches readyState complete
    nav_error        "timeout" makes navigation fail with a timeout error
    screenshot       "garbage" returns undecodable screenshot bytes

    Screenshots paint each element's rects in ``element_color(index)`` on
    white, at device-pixel resolution, so geometry assertions can check
    actual pixels.
    """

    def __init__(self, pages: dict[str, dict]):
        self.pages = pages
        self.sessions: dict[str, dict] = {}
        self.lock = threading.Lock()
        self.created = 0
        self.active = 0
        self.max_active = 0

    def create_session(self) -> str:
        with self.lock:
            self.created += 1
            sid = f"wd-{self.created}"
            self.sessions[sid] = {"page": None, "window": (800, 600)}
            self.active += 1
            self.max_active = max(self.max_active, self.active)
        return sid

    def close_session(self, sid: str) -> None:
        with self.lock:
            if self.sessions.pop(sid, None) is not None:
                self.active -= 1

    def render(self, page: dict, sess: dict) -> bytes:
        dpr = page.get("dpr", 1.0)
        win_w, win_h = sess["window"]
        inner_h = max(1, win_h - CHROME_HEIGHT)
        raster_w = max(1, round(win_w * dpr))
        raster_h = max(1, round(min(page.get("height", inner_h), inner_h) * dpr))
        img = Image.new("RGB", (raster_w, raster_h), (255, 255, 255))
        draw = ImageDraw.Draw(img)
        for idx, element in enumerate(page.get("elements", [])):
            for l, t, r, b in element["rects"]:
                draw.rectangle(
                    [l * dpr, t * dpr, r * dpr - 1, b * dpr - 1],
                    fill=element_color(idx),
                )
        buf = io.BytesIO()
        img.save(buf, format="PNG")
        return buf.getvalue()

    def __enter__(self) -> "StubWebDriver":
        self.server = ThreadingHTTPServer(("127.0.0.1", 0), _DriverHandler)
        self.server.stub = self
        self.thread = threading.Thread(target=self.server.serve_forever, daemon=True)
        self.thread.start()
        return self

    def __exit__(self, *exc_info) -> None:
        self.server.shutdown()
        self.server.server_close()

    @property
    def url(self) -> str:
        return f"http://127.0.0.1:{self.server.server_address[1]}"
