"""Chat-completion backend client and the append-only response cache.

The cache key is a content hash of (template_id, rendered prompt), never the
item id, so editing a template invalidates cleanly. Timestamps are metadata
only and never enter the key.
"""

from __future__ import annotations

import base64
import hashlib
import json
import time
from dataclasses import dataclass
from datetime import datetime, timezone
from pathlib import Path

import requests

from .errors import BackendError, CacheIntegrityError, InvalidArgumentError
from .prompts import TEMPLATES, render_prompt


@dataclass
class GenerationRequest:
    template_id: str
    item_id: str
    text_input: str = ""
    image_ref: str | None = None
    model: str = "llama-3.2-11b-vision"
    temperature: float = 0.0
    seed: int | None = 0

    def validate(self) -> None:
        if self.template_id not in TEMPLATES:
            raise InvalidArgumentError(f"unknown template {self.template_id!r}")
        if self.template_id == "describe" and not self.image_ref:
            raise InvalidArgumentError("describe request requires image_ref")
        if self.template_id in ("mask", "complete") and not self.text_input:
            raise InvalidArgumentError(
                f"{self.template_id} request requires text_input")


def request_slots(req: GenerationRequest) -> dict[str, str]:
    req.validate()
    if req.template_id == "direct":
        return {"Positive Attributes": req.text_input}
    if req.template_id == "describe":
        return {"Item Image": req.image_ref or ""}
    if req.template_id == "mask":
        return {"Item Description": req.text_input}
    return {"Masked Description": req.text_input}


def rendered_prompt(req: GenerationRequest) -> str:
    return render_prompt(req.template_id, request_slots(req))


def cache_key(template_id: str, prompt: str) -> str:
    digest = hashlib.sha256()
    digest.update(template_id.encode("utf-8"))
    digest.update(b"\x00")
    digest.update(prompt.encode("utf-8"))
    return digest.hexdigest()


@dataclass
class CacheEntry:
    key: str
    output: str
    model: str
    created_at: str


class ResponseCache:
    """JSONL-backed response cache. Appends on write; a key that reappears with
    a different output is corruption, not a legal update."""

    def __init__(self, path: str | Path):
        self.path = Path(path)
        self._entries: dict[str, CacheEntry] = {}
        if self.path.exists():
            for lineno, line in enumerate(
                    self.path.read_text(encoding="utf-8").splitlines(), start=1):
                if not line.strip():
                    continue
                try:
                    raw = json.loads(line)
                    entry = CacheEntry(key=raw["key"], output=raw["output"],
                                       model=raw.get("model", ""),
                                       created_at=raw.get("created_at", ""))
                except (json.JSONDecodeError, KeyError, TypeError) as exc:
                    raise CacheIntegrityError(
                        f"{self.path} line {lineno}: {exc}") from None
                self._remember(entry)

    def _remember(self, entry: CacheEntry) -> None:
        existing = self._entries.get(entry.key)
        if existing is not None:
            if existing.output != entry.output:
                raise CacheIntegrityError(
                    f"cache key {entry.key[:12]}... maps to two different outputs")
            return
        self._entries[entry.key] = entry

    def get(self, key: str) -> CacheEntry | None:
        return self._entries.get(key)

    def put(self, entry: CacheEntry) -> None:
        if entry.key in self._entries:
            self._remember(entry)
            return
        self._remember(entry)
        record = {"key": entry.key, "output": entry.output,
                  "model": entry.model, "created_at": entry.created_at}
        with self.path.open("a", encoding="utf-8") as fh:
            fh.write(json.dumps(record, ensure_ascii=False) + "\n")

    def __len__(self) -> int:
        return len(self._entries)


_MIME_BY_SUFFIX = {".png": "image/png", ".gif": "image/gif", ".webp": "image/webp"}


def _image_part(image_ref: str) -> dict:
    if image_ref.startswith(("http://", "https://", "data:")):
        url = image_ref
    else:
        path = Path(image_ref)
        if not path.exists():
            raise InvalidArgumentError(f"image file not found: {image_ref}")
        mime = _MIME_BY_SUFFIX.get(path.suffix.lower(), "image/jpeg")
        payload = base64.b64encode(path.read_bytes()).decode("ascii")
        url = f"data:{mime};base64,{payload}"
    return {"type": "image_url", "image_url": {"url": url}}


def build_payload(req: GenerationRequest) -> dict:
    prompt = rendered_prompt(req)
    if req.image_ref:
        content: object = [{"type": "text", "text": prompt}, _image_part(req.image_ref)]
    else:
        content = prompt
    payload: dict = {
        "model": req.model,
        "messages": [{"role": "user", "content": content}],
        "temperature": req.temperature,
    }
    if req.seed is not None:
        payload["seed"] = req.seed
    return payload


def _extract_text(data: object) -> str:
    try:
        content = data["choices"][0]["message"]["content"]  # type: ignore[index]
    except (KeyError, IndexError, TypeError):
        raise BackendError("response missing choices[0].message.content") from None
    if not isinstance(content, str):
        raise BackendError("response content is not a string")
    return content


def call_backend(req: GenerationRequest, endpoint: str, *, token: str | None = None,
                 max_attempts: int = 3, backoff_base: float = 0.5,
                 timeout: float = 60.0, session: requests.Session | None = None) -> str:
    """POST the request; retry transient failures (network errors, 429, 5xx)
    with exponential backoff; give up after `max_attempts` total requests."""
    payload = build_payload(req)
    headers = {"Content-Type": "application/json"}
    if token:
        headers["Authorization"] = f"Bearer {token}"
    post = (session or requests).post
    last_status: int | None = None
    last_body = ""
    for attempt in range(max_attempts):
        if attempt > 0:
            time.sleep(backoff_base * 2 ** (attempt - 1))
        try:
            resp = post(endpoint, json=payload, headers=headers, timeout=timeout)
        except requests.RequestException as exc:
            last_status, last_body = None, str(exc)
            continue
        last_status, last_body = resp.status_code, resp.text[:500]
        if resp.status_code == 429 or resp.status_code >= 500:
            continue
        if resp.status_code != 200:
            raise BackendError("backend rejected request",
                               status=resp.status_code, body=resp.text)
        try:
            data = resp.json()
        except ValueError:
            raise BackendError("backend returned malformed JSON",
                               status=resp.status_code, body=resp.text) from None
        return _extract_text(data)
    raise BackendError(f"backend unavailable after {max_attempts} attempts",
                       status=last_status, body=last_body)


def generate_text(req: GenerationRequest, endpoint: str, cache: ResponseCache, *,
                  token: str | None = None, **kwargs) -> str:
    """Cache-aware generation: consult the cache by content key, call the
    backend only on a miss, and write through on success."""
    key = cache_key(req.template_id, rendered_prompt(req))
    hit = cache.get(key)
    if hit is not None:
        return hit.output
    output = call_backend(req, endpoint, token=token, **kwargs)
    entry = CacheEntry(key=key, output=output, model=req.model,
                       created_at=datetime.now(timezone.utc).isoformat())
    cache.put(entry)
    return output
