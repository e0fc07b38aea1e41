"""Full-page screenshots and element geometry over the WebDriver protocol.

Talks the classic wire protocol (JSON over HTTP) directly with requests —
session create, navigate, execute-sync, take-screenshot, delete — so any
conformant driver endpoint works. Full-page rendering resizes the window
to the document height; element rectangles come from an injected script
and are normalized to raster pixels via the device pixel ratio.
"""

from __future__ import annotations

import base64
import io
import json
import re
import time
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from datetime import datetime, timezone
from pathlib import Path
from typing import Sequence

import requests
from PIL import Image

from .annotate import ELEMENT_KINDS, RenderedElement
from .boxes import BoundingBox, clip_to_frame
from .errors import (
    CaptureError,
    CaptureFailedError,
    EndpointUnreachableError,
    NavigationTimeoutError,
)

_MAX_PAGE_HEIGHT = 30000  # sanity cap on full-page rasters


@dataclass
class SessionConfig:
    """Connection and rendering parameters for one driver endpoint."""

    endpoint_url: str
    capabilities: dict = field(default_factory=lambda: {"alwaysMatch": {}})
    viewport_width: int = 1920
    viewport_height: int = 1080
    settle_delay: float = 0.5
    nav_timeout: float = 30.0
    request_timeout: float = 60.0
    poll_interval: float = 0.25


@dataclass(frozen=True)
class PageSnapshot:
    """One captured page: full-page PNG plus element geometry in raster
    pixels. Persisted as the PNG alongside a JSON sidecar."""

    doc_id: str
    url: str
    image_bytes: bytes
    width: int
    height: int
    elements: tuple[RenderedElement, ...]
    device_pixel_ratio: float
    captured_at: str


_METRICS_SCRIPT = """
return {
  width: Math.max(document.documentElement.scrollWidth, document.body ? document.body.scrollWidth : 0),
  height: Math.max(document.documentElement.scrollHeight, document.body ? document.body.scrollHeight : 0),
  innerWidth: window.innerWidth,
  innerHeight: window.innerHeight,
  dpr: window.devicePixelRatio || 1
};
""".strip()

_READY_SCRIPT = "return document.readyState;"

# Five element kinds; infobox cells are claimed first so they keep the
# infobox_text kind, the seen-set stops double collection.
_ELEMENTS_SCRIPT = """
var out = [];
var counter = 0;
var seen = new Set();
function visible(el) {
  var style = window.getComputedStyle(el);
  if (style.display === "none" || style.visibility === "hidden") return false;
  var rect = el.getBoundingClientRect();
  return rect.width > 0.5 && rect.height > 0.5;
}
function lineRects(el) {
  var range = document.createRange();
  range.selectNodeContents(el);
  var rects = range.getClientRects();
  var sx = window.scrollX, sy = window.scrollY;
  var acc = [];
  for (var i = 0; i < rects.length; i++) {
    var r = rects[i];
    if (r.width > 0.5 && r.height > 0.5) {
      acc.push([r.left + sx, r.top + sy, r.right + sx, r.bottom + sy]);
    }
  }
  return acc;
}
function collect(el, kind) {
  if (seen.has(el)) return;
  seen.add(el);
  if (!visible(el)) return;
  var text = (el.innerText || el.textContent || "").trim();
  if (!text) return;
  var rects = lineRects(el);
  if (!rects.length) return;
  out.push({element_id: "e" + (counter++), kind: kind, text: text, rects: rects});
}
var infoboxes = document.querySelectorAll(".infobox, .infobox_v2, table.infobox");
for (var i = 0; i < infoboxes.length; i++) {
  var cells = infoboxes[i].querySelectorAll("th, td, caption");
  for (var j = 0; j < cells.length; j++) collect(cells[j], "infobox_text");
}
var kinds = [["p", "paragraph"], ["li", "list_item"], ["td", "table_cell"],
             ["th", "table_cell"], ["caption", "caption"], ["figcaption", "caption"]];
for (var a = 0; a < kinds.length; a++) {
  var nodes = document.querySelectorAll(kinds[a][0]);
  for (var b = 0; b < nodes.length; b++) collect(nodes[b], kinds[a][1]);
}
return out;
""".strip()


class WebDriverSession:
    """One browser session over the wire protocol. Use as a context
    manager so the session is deleted even on failure."""

    def __init__(self, config: SessionConfig):
        self.config = config
        self._base = config.endpoint_url.rstrip("/")
        self._http = requests.Session()
        value = self._command(
            "POST", "/session", {"capabilities": config.capabilities}
        )
        session_id = None
        if isinstance(value, dict):
            session_id = value.get("sessionId")
        if not session_id:
            raise CaptureError(f"session create returned no sessionId: {value!r}")
        self.session_id = session_id
        try:
            ms = int(self.config.nav_timeout * 1000)
            self._session_command(
                "POST", "/timeouts", {"pageLoad": ms, "script": ms}
            )
        except CaptureError:
            pass  # advisory; minimal endpoints may not implement /timeouts

    def __enter__(self) -> "WebDriverSession":
        return self

    def __exit__(self, *exc_info) -> None:
        self.close()

    def _command(self, method: str, path: str, payload: dict | None = None):
        url = self._base + path
        kwargs: dict = {"timeout": self.config.request_timeout}
        if method == "POST":
            kwargs["json"] = payload if payload is not None else {}
        try:
            resp = self._http.request(method, url, **kwargs)
        except requests.RequestException as exc:
            raise EndpointUnreachableError(f"webdriver {url}: {exc}") from exc
        try:
            body = resp.json()
        except ValueError:
            body = {}
        value = body.get("value")
        if resp.status_code >= 400 or (isinstance(value, dict) and "error" in value):
            detail = value if isinstance(value, dict) else {}
            error = detail.get("error", f"http-{resp.status_code}")
            message = detail.get("message", resp.text[:200])
            if "timeout" in str(error):
                raise NavigationTimeoutError(f"{error}: {message}")
            raise CaptureError(f"{error}: {message}")
        return value

    def _session_command(self, method: str, path: str, payload: dict | None = None):
        return self._command(method, f"/session/{self.session_id}{path}", payload)

    def navigate(self, url: str) -> None:
        self._session_command("POST", "/url", {"url": url})

    def execute(self, script: str, args: Sequence = ()):  # execute-sync
        return self._session_command(
            "POST", "/execute/sync", {"script": script, "args": list(args)}
        )

    def screenshot(self) -> bytes:
        encoded = self._session_command("GET", "/screenshot")
        if not isinstance(encoded, str) or not encoded:
            raise CaptureFailedError("screenshot endpoint returned no data")
        try:
            return base64.b64decode(encoded)
        except (ValueError, TypeError) as exc:
            raise CaptureFailedError(f"screenshot is not valid base64: {exc}") from exc

    def get_window_rect(self) -> dict:
        return self._session_command("GET", "/window/rect") or {}

    def set_window_rect(self, width: int, height: int) -> None:
        self._session_command(
            "POST", "/window/rect", {"width": int(width), "height": int(height)}
        )

    def close(self) -> None:
        try:
            self._command("DELETE", f"/session/{self.session_id}")
        except (CaptureError, EndpointUnreachableError):
            pass


def _wait_until_ready(session: WebDriverSession, config: SessionConfig) -> None:
    deadline = time.monotonic() + config.nav_timeout
    while True:
        state = session.execute(_READY_SCRIPT)
        if state == "complete":
            return
        if time.monotonic() >= deadline:
            raise NavigationTimeoutError(
                f"document stuck in readyState={state!r} after {config.nav_timeout}s"
            )
        time.sleep(config.poll_interval)


def _to_raster_elements(
    raw_elements, dpr: float, width: int, height: int
) -> tuple[RenderedElement, ...]:
    elements: list[RenderedElement] = []
    for raw in raw_elements or []:
        kind = raw.get("kind")
        if kind not in ELEMENT_KINDS:
            continue
        rects: list[BoundingBox] = []
        for left, top, right, bottom in raw.get("rects", []):
            try:
                box = BoundingBox(left * dpr, top * dpr, right * dpr, bottom * dpr)
            except Exception:
                continue
            clipped = clip_to_frame(box, width, height)
            if clipped is not None:
                rects.append(clipped)
        text = (raw.get("text") or "").strip()
        if rects and text:
            elements.append(
                RenderedElement(
                    element_id=str(raw.get("element_id", f"e{len(elements)}")),
                    text=text,
                    kind=kind,
                    line_rects=tuple(rects),
                )
            )
    return tuple(elements)


def capture_page(
    url: str, config: SessionConfig, doc_id: str | None = None
) -> PageSnapshot:
    """Capture one page end to end.

    Navigates, waits for readiness plus the settle delay, grows the window
    to the full document height, extracts element rectangles, and takes
    the screenshot. Element rects are converted to raster pixels and
    clipped to the raster frame.

    Raises:
        EndpointUnreachableError: the driver endpoint is down.
        NavigationTimeoutError: the page never became ready.
        CaptureFailedError: the screenshot failed validity checks.
    """
    with WebDriverSession(config) as session:
        session.set_window_rect(config.viewport_width, config.viewport_height)
        session.navigate(url)
        _wait_until_ready(session, config)
        if config.settle_delay > 0:
            time.sleep(config.settle_delay)
        metrics = session.execute(_METRICS_SCRIPT) or {}
        doc_height = int(metrics.get("height", 0))
        inner_height = int(metrics.get("innerHeight", 0))
        rect = session.get_window_rect()
        chrome_extra = max(0, int(rect.get("height", inner_height)) - inner_height)
        if doc_height > inner_height:
            target = min(doc_height + chrome_extra, _MAX_PAGE_HEIGHT)
            session.set_window_rect(config.viewport_width, target)
            # one relayout pass: growing the viewport can change the layout
            metrics = session.execute(_METRICS_SCRIPT) or metrics
            regrown = int(metrics.get("height", doc_height))
            if regrown > doc_height:
                session.set_window_rect(
                    config.viewport_width, min(regrown + chrome_extra, _MAX_PAGE_HEIGHT)
                )
        dpr = float(metrics.get("dpr", 1.0)) or 1.0
        raw_elements = session.execute(_ELEMENTS_SCRIPT)
        png = session.screenshot()
        try:
            with Image.open(io.BytesIO(png)) as img:
                width, height = img.size
        except Exception as exc:
            raise CaptureFailedError(f"{url}: screenshot is not a decodable image") from exc
        if width <= 0 or height <= 0:
            raise CaptureFailedError(f"{url}: screenshot has no pixels")
        return PageSnapshot(
            doc_id=doc_id if doc_id is not None else url,
            url=url,
            image_bytes=png,
            width=width,
            height=height,
            elements=_to_raster_elements(raw_elements, dpr, width, height),
            device_pixel_ratio=dpr,
            captured_at=datetime.now(timezone.utc).isoformat(),
        )


def extract_elements(session: WebDriverSession) -> tuple[RenderedElement, ...]:
    """Extract visible text elements from the session's current page,
    normalized to raster pixels (page CSS coordinates x device pixel
    ratio). Unclipped: callers bind rects to a frame when they have one.
    """
    metrics = session.execute(_METRICS_SCRIPT) or {}
    dpr = float(metrics.get("dpr", 1.0)) or 1.0
    raw = session.execute(_ELEMENTS_SCRIPT)
    elements: list[RenderedElement] = []
    for item in raw or []:
        kind = item.get("kind")
        if kind not in ELEMENT_KINDS:
            continue
        rects = []
        for left, top, right, bottom in item.get("rects", []):
            try:
                rects.append(BoundingBox(left * dpr, top * dpr, right * dpr, bottom * dpr))
            except Exception:
                continue
        text = (item.get("text") or "").strip()
        if rects and text:
            elements.append(
                RenderedElement(
                    element_id=str(item.get("element_id", f"e{len(elements)}")),
                    text=text,
                    kind=kind,
                    line_rects=tuple(rects),
                )
            )
    return tuple(elements)


def snapshot_batch(
    urls: Sequence[str | tuple[str, str]],
    concurrency_limit: int,
    config: SessionConfig,
) -> tuple[list[PageSnapshot], list[tuple[str, str]]]:
    """Capture many pages with at most ``concurrency_limit`` sessions.

    ``urls`` entries are either bare URLs or (doc_id, url) pairs. Results
    keep input order; one page's failure never aborts the batch — it is
    returned as (url, reason).
    """
    if concurrency_limit < 1:
        raise ValueError("concurrency_limit must be >= 1")
    normalized: list[tuple[str, str]] = []
    for entry in urls:
        if isinstance(entry, str):
            normalized.append((entry, entry))
        else:
            doc_id, url = entry
            normalized.append((doc_id, url))
    snapshots: dict[int, PageSnapshot] = {}
    failures: dict[int, tuple[str, str]] = {}

    def work(index: int, doc_id: str, url: str) -> None:
        try:
            snapshots[index] = capture_page(url, config, doc_id=doc_id)
        except Exception as exc:  # isolate per-page failures
            failures[index] = (url, f"{type(exc).__name__}: {exc}")

    with ThreadPoolExecutor(max_workers=concurrency_limit) as pool:
        futures = [
            pool.submit(work, i, doc_id, url)
            for i, (doc_id, url) in enumerate(normalized)
        ]
        for future in futures:
            future.result()
    ordered_snaps = [snapshots[i] for i in sorted(snapshots)]
    ordered_fails = [failures[i] for i in sorted(failures)]
    return ordered_snaps, ordered_fails


def _safe_name(doc_id: str) -> str:
    return re.sub(r"[^A-Za-z0-9._-]+", "_", doc_id) or "page"


def save_snapshot(snapshot: PageSnapshot, directory: str | Path) -> tuple[Path, Path]:
    """Persist a snapshot as ``<doc>.png`` plus ``<doc>.json`` sidecar."""
    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    stem = _safe_name(snapshot.doc_id)
    png_path = directory / f"{stem}.png"
    sidecar_path = directory / f"{stem}.json"
    png_path.write_bytes(snapshot.image_bytes)
    sidecar = {
        "doc_id": snapshot.doc_id,
        "url": snapshot.url,
        "image_file": png_path.name,
        "width": snapshot.width,
        "height": snapshot.height,
        "device_pixel_ratio": snapshot.device_pixel_ratio,
        "captured_at": snapshot.captured_at,
        "elements": [
            {
                "element_id": e.element_id,
                "kind": e.kind,
                "text": e.text,
                "rects": [[r.x1, r.y1, r.x2, r.y2] for r in e.line_rects],
            }
            for e in snapshot.elements
        ],
    }
    sidecar_path.write_text(
        json.dumps(sidecar, ensure_ascii=False, indent=2), encoding="utf-8"
    )
    return png_path, sidecar_path


def load_snapshot(sidecar_path: str | Path) -> PageSnapshot:
    sidecar_path = Path(sidecar_path)
    data = json.loads(sidecar_path.read_text(encoding="utf-8"))
    png_path = sidecar_path.parent / data["image_file"]
    elements = tuple(
        RenderedElement(
            element_id=e["element_id"],
            text=e["text"],
            kind=e["kind"],
            line_rects=tuple(BoundingBox(*r) for r in e["rects"]),
        )
        for e in data.get("elements", [])
    )
    return PageSnapshot(
        doc_id=data["doc_id"],
        url=data.get("url", ""),
        image_bytes=png_path.read_bytes(),
        width=int(data["width"]),
        height=int(data["height"]),
        elements=elements,
        device_pixel_ratio=float(data.get("device_pixel_ratio", 1.0)),
        captured_at=data.get("captured_at", ""),
    )


def load_snapshot_dir(directory: str | Path) -> dict[str, PageSnapshot]:
    """All snapshots under a directory, keyed by doc_id."""
    directory = Path(directory)
    out: dict[str, PageSnapshot] = {}
    for sidecar in sorted(directory.glob("*.json")):
        snap = load_snapshot(sidecar)
        out[snap.doc_id] = snap
    return out
