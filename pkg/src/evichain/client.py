"""Query a multimodal chat endpoint with labeled candidate screenshots.

Requests follow the chat-completions convention: one user message whose
content interleaves a text label part before each base64 image part, so
the model can tie labels to images. Responses are free text; the chain
document is recovered by trying extraction strategies in order. Transport
problems retry with exponential backoff; model misbehavior never raises —
it comes back as a parse failure to be scored.
"""

from __future__ import annotations

import base64
import json
import os
import re
import time
from dataclasses import dataclass
from pathlib import Path
from typing import Mapping

import requests

from .chains import ModelOutput, parse_chain
from .dataset import CandidateSet
from .errors import (
    AuthFailureError,
    ClientError,
    EndpointUnreachableError,
    MissingSnapshotError,
    SchemaError,
)

TEMPLATE_VERSION = "chain-eval-v1"

_RETRYABLE_STATUS = frozenset({408, 429, 500, 502, 503, 504})

_FENCE_RE = re.compile(r"```(?:json)?\s*(.*?)```", re.DOTALL | re.IGNORECASE)


@dataclass(frozen=True)
class PromptTemplate:
    """Versioned prompt text. ``user_suffix`` must contain {question}."""

    system: str
    user_suffix: str
    version: str = TEMPLATE_VERSION


DEFAULT_TEMPLATE = PromptTemplate(
    system=(
        "You answer multi-hop questions about labeled document screenshots. "
        "Reply with a single JSON object and nothing else: "
        '{"answer": "...", "chain": [{"hop": 1, "image_id": "img_<k>", '
        '"boxes": [[x1, y1, x2, y2]], "sub_question": "..."}, ...]}. '
        "List hops in logical reasoning order, number them from 1, and give "
        "pixel coordinates in the selected image for every evidence box."
    ),
    user_suffix="Question: {question}\nReturn the JSON object only.",
)


@dataclass(frozen=True)
class EndpointConfig:
    """Where and how to call the model.

    ``base_url`` is POSTed verbatim (point it at your chat-completions
    route). The auth token is read from the environment — never from
    config files — under ``auth_token_env_name``; requests go out without
    an Authorization header when the variable is empty or unset.
    """

    base_url: str
    model_name: str
    auth_token_env_name: str = "COE_API_TOKEN"
    timeout: float = 120.0
    max_retries: int = 3
    retry_backoff_base: float = 0.5
    max_output_tokens: int = 1024
    temperature: float = 0.0


@dataclass(frozen=True)
class InferenceResult:
    """One model call: the raw response text is always preserved so runs
    can be re-scored without re-querying."""

    question_id: str
    raw_text: str
    output: ModelOutput | None
    failure_reason: str | None
    attempts: int
    latency: float

    @property
    def parse_failed(self) -> bool:
        return self.output is None


def _encode_image(path: str | Path) -> str:
    data = Path(path).read_bytes()
    return base64.b64encode(data).decode("ascii")


def build_request(
    question: str,
    candset: CandidateSet,
    image_paths: Mapping[str, str | Path],
    template: PromptTemplate = DEFAULT_TEMPLATE,
    cfg: EndpointConfig | None = None,
) -> dict:
    """Build the chat-completions payload for one question.

    Image parts appear in candidate order, each preceded by its label as
    a text part. Identical inputs produce byte-identical payloads.
    """
    parts: list[dict] = []
    for label, doc_id in candset.ordered:
        path = image_paths.get(doc_id)
        if path is None:
            raise MissingSnapshotError(f"no image available for candidate doc {doc_id!r}")
        parts.append({"type": "text", "text": f"{label}:"})
        parts.append(
            {
                "type": "image_url",
                "image_url": {"url": f"data:image/png;base64,{_encode_image(path)}"},
            }
        )
    parts.append({"type": "text", "text": template.user_suffix.format(question=question)})
    payload = {
        "messages": [
            {"role": "system", "content": template.system},
            {"role": "user", "content": parts},
        ],
        "temperature": 0.0 if cfg is None else cfg.temperature,
        "max_tokens": 1024 if cfg is None else cfg.max_output_tokens,
    }
    if cfg is not None:
        payload["model"] = cfg.model_name
    return payload


def _balanced_objects(text: str) -> list[str]:
    """Top-level {...} substrings, JSON-string aware."""
    spans: list[str] = []
    depth = 0
    start = -1
    in_string = False
    escaped = False
    for i, ch in enumerate(text):
        if in_string:
            if escaped:
                escaped = False
            elif ch == "\\":
                escaped = True
            elif ch == '"':
                in_string = False
            continue
        if ch == '"':
            if depth > 0:
                in_string = True
        elif ch == "{":
            if depth == 0:
                start = i
            depth += 1
        elif ch == "}":
            if depth > 0:
                depth -= 1
                if depth == 0 and start >= 0:
                    spans.append(text[start : i + 1])
                    start = -1
    return spans


def extract_chain_text(raw: str) -> str | None:
    """Recover the chain document from free-form model text.

    Strategies in order: fenced code blocks, then balanced-brace
    substrings largest first, then the whole string. A candidate counts
    only if it parses into a schema-valid document, so the return value
    is always parseable; None means no strategy produced one.
    """
    candidates: list[str] = []
    for match in _FENCE_RE.finditer(raw):
        inner = match.group(1).strip()
        if inner.startswith("{"):
            candidates.append(inner)
    candidates.extend(sorted(_balanced_objects(raw), key=len, reverse=True))
    candidates.append(raw.strip())
    seen: set[str] = set()
    for candidate in candidates:
        if not candidate or candidate in seen:
            continue
        seen.add(candidate)
        try:
            parse_chain(candidate)
        except SchemaError:
            continue
        return candidate
    return None


def _response_text(resp: requests.Response) -> str:
    try:
        body = resp.json()
        return body["choices"][0]["message"]["content"] or ""
    except (ValueError, KeyError, IndexError, TypeError):
        return resp.text or ""


def infer(
    record,
    candset: CandidateSet,
    image_paths: Mapping[str, str | Path],
    cfg: EndpointConfig,
    template: PromptTemplate = DEFAULT_TEMPLATE,
    session: requests.Session | None = None,
) -> InferenceResult:
    """Run one example against the endpoint.

    Retries transport errors, timeouts, 429 and 5xx with exponential
    backoff up to ``cfg.max_retries`` extra attempts. Unparseable or
    schema-invalid responses come back as results with
    ``failure_reason`` set — scoring handles them — while infrastructure
    problems raise.

    Raises:
        AuthFailureError: 401/403 (non-retryable).
        ClientError: other non-retryable 4xx.
        EndpointUnreachableError: transport/5xx/429 after all retries.
    """
    payload = build_request(record.question, candset, image_paths, template, cfg)
    headers = {"Content-Type": "application/json"}
    token = os.environ.get(cfg.auth_token_env_name, "")
    if token:
        headers["Authorization"] = f"Bearer {token}"
    http = session or requests.Session()
    started = time.monotonic()
    resp: requests.Response | None = None
    attempt = 0
    while True:
        attempt += 1
        try:
            resp = http.post(
                cfg.base_url, json=payload, headers=headers, timeout=cfg.timeout
            )
        except requests.RequestException as exc:
            if attempt > cfg.max_retries:
                raise EndpointUnreachableError(
                    f"{cfg.base_url} unreachable after {attempt} attempts: {exc}"
                ) from exc
            time.sleep(cfg.retry_backoff_base * (2 ** (attempt - 1)))
            continue
        if resp.status_code in (401, 403):
            raise AuthFailureError(
                f"endpoint rejected credentials from ${cfg.auth_token_env_name} "
                f"(HTTP {resp.status_code})"
            )
        if resp.status_code in _RETRYABLE_STATUS:
            if attempt > cfg.max_retries:
                raise EndpointUnreachableError(
                    f"{cfg.base_url} kept failing (HTTP {resp.status_code}) "
                    f"after {attempt} attempts"
                )
            time.sleep(cfg.retry_backoff_base * (2 ** (attempt - 1)))
            continue
        if resp.status_code >= 400:
            raise ClientError(
                f"endpoint rejected request: HTTP {resp.status_code} {resp.text[:200]}"
            )
        break
    latency = time.monotonic() - started
    raw = _response_text(resp)
    text = extract_chain_text(raw)
    if text is None:
        return InferenceResult(
            question_id=record.question_id,
            raw_text=raw,
            output=None,
            failure_reason="no-chain-document",
            attempts=attempt,
            latency=latency,
        )
    return InferenceResult(
        question_id=record.question_id,
        raw_text=raw,
        output=parse_chain(text),
        failure_reason=None,
        attempts=attempt,
        latency=latency,
    )
