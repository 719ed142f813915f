"""The four-step enrichment chain (describe, mask, complete, encode) with
deterministic offline stubs, plus the orchestrator that runs it over a record
set and emits the paired positive/negative attribute embedding files.

Stub mode never touches the network or the cache; its outputs are a pure
function of (records, lexicon, swap_table, vocabulary, seed).
"""

from __future__ import annotations

import string
import threading
from collections import Counter
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field, replace
from datetime import datetime, timezone
from hashlib import blake2b
from pathlib import Path

import numpy as np

from .backend import (CacheEntry, GenerationRequest, ResponseCache, cache_key,
                      call_backend, rendered_prompt)
from .dataio import (EmbeddingFile, ItemAttributeRecord, read_embedding_file,
                     save_attributes, write_embedding_file)
from .errors import (BackendError, InvalidArgumentError, MissingArtifactError,
                     PipelineError)
from .numerics import rng_stream

FIELDS = ("visual_description", "title", "brand", "category")

MASK_TOKEN = "[MASK]"

DEFAULT_VOCABULARY = (
    "red", "blue", "green", "yellow", "wooden", "plastic", "metal", "ceramic",
    "small", "large", "round", "square", "soft", "rough", "light", "dark",
    "modern", "classic", "portable", "foldable",
)

_PUNCT = string.punctuation


def _normalize_token(token: str) -> str:
    return token.strip(_PUNCT).lower()


@dataclass(frozen=True)
class MaskedDescription:
    """Masked text plus the token positions and originals needed to complete it."""

    text: str
    positions: tuple[int, ...]
    originals: tuple[str, ...]


def stub_mask(description: str, key_terms, max_masks: int, seed: int,
              corpus_counts: dict[str, int] | None = None) -> MaskedDescription:
    """Mask up to `max_masks` lexicon hits in position order; with no hit, mask
    the rarest tokens by corpus count. Token count and order are preserved
    (whitespace normalizes to single spaces). At least one token is masked.
    """
    if max_masks < 1:
        raise InvalidArgumentError("max_masks must be >= 1")
    tokens = description.split()
    if not tokens:
        raise InvalidArgumentError("description is empty")
    lexicon = {_normalize_token(t) for t in key_terms}
    lexicon.discard("")
    hits = [i for i, t in enumerate(tokens) if _normalize_token(t) in lexicon]
    if hits:
        chosen = hits[:max_masks]
    else:
        counts = corpus_counts or {}
        take = min(max_masks, len(tokens))
        by_count: dict[int, list[int]] = {}
        for i, tok in enumerate(tokens):
            by_count.setdefault(counts.get(_normalize_token(tok), 0), []).append(i)
        rng = rng_stream(seed, "mask-ties", description)
        chosen = []
        for count in sorted(by_count):
            members = by_count[count]
            room = take - len(chosen)
            if len(members) <= room:
                chosen.extend(members)
            else:
                picked = rng.choice(len(members), size=room, replace=False)
                chosen.extend(members[int(j)] for j in np.sort(picked))
            if len(chosen) >= take:
                break
        chosen.sort()
    out = list(tokens)
    originals = tuple(tokens[i] for i in chosen)
    for i in chosen:
        out[i] = MASK_TOKEN
    return MaskedDescription(text=" ".join(out), positions=tuple(chosen),
                             originals=originals)


def masked_from_pair(original: str, masked_text: str) -> MaskedDescription:
    """Reconstruct mask positions by aligning a masked text with its original."""
    orig_tokens = original.split()
    masked_tokens = masked_text.split()
    if len(orig_tokens) != len(masked_tokens):
        raise InvalidArgumentError("masked text does not align with the original")
    positions = tuple(i for i, t in enumerate(masked_tokens) if t == MASK_TOKEN)
    if not positions:
        raise InvalidArgumentError("masked text contains no mask token")
    return MaskedDescription(text=masked_text, positions=positions,
                             originals=tuple(orig_tokens[i] for i in positions))


def stub_complete(masked: MaskedDescription, swap_table: dict[str, str],
                  vocabulary, seed: int) -> str:
    """Fill each mask with the swap-table alternative for the original token,
    or a seeded vocabulary draw excluding it. Output never equals the original
    at any masked position and contains no mask token."""
    tokens = masked.text.split()
    if MASK_TOKEN not in tokens:
        raise InvalidArgumentError("input contains no mask token")
    mask_positions = [i for i, t in enumerate(tokens) if t == MASK_TOKEN]
    if list(masked.positions) != mask_positions:
        raise InvalidArgumentError("mask positions out of sync with text")
    swaps = {_normalize_token(k): v for k, v in (swap_table or {}).items()}
    vocab = list(vocabulary or ())
    rng = rng_stream(seed, "complete", masked.text)
    for pos, original in zip(masked.positions, masked.originals):
        norm_orig = _normalize_token(original)
        if norm_orig in swaps:
            replacement = swaps[norm_orig]
        else:
            options = [w for w in vocab if _normalize_token(w) != norm_orig]
            if not options:
                raise InvalidArgumentError(
                    f"no swap entry and empty vocabulary for token {original!r}")
            replacement = options[int(rng.integers(len(options)))]
        if not replacement or any(c.isspace() for c in replacement):
            raise InvalidArgumentError(
                f"replacement {replacement!r} is not a single token")
        if _normalize_token(replacement) == norm_orig:
            raise InvalidArgumentError(
                f"replacement for {original!r} does not differ from it")
        tokens[pos] = replacement
    return " ".join(tokens)


class StubEncoder:
    """Signed feature hashing of word 1-grams and 2-grams into `dim` buckets,
    L2-normalized. Empty text encodes the literal token EMPTY."""

    def __init__(self, dim: int):
        if dim < 1:
            raise InvalidArgumentError("encoder dimension must be >= 1")
        self.dim = dim

    def encode(self, text: str) -> np.ndarray:
        tokens = [t for t in (_normalize_token(w) for w in text.split()) if t]
        if not tokens:
            tokens = ["EMPTY"]
        grams = list(tokens)
        grams.extend(f"{a} {b}" for a, b in zip(tokens, tokens[1:]))
        vec = np.zeros(self.dim, dtype=np.float64)
        for gram in grams:
            digest = int.from_bytes(blake2b(gram.encode("utf-8"), digest_size=8).digest(),
                                    "big")
            sign = 1.0 if (digest >> 63) & 1 == 0 else -1.0
            vec[digest % self.dim] += sign
        norm = np.linalg.norm(vec)
        if norm == 0.0:
            # signs can cancel exactly; pin a deterministic fallback bucket
            digest = int.from_bytes(blake2b(text.encode("utf-8"), digest_size=8).digest(),
                                    "big")
            vec[digest % self.dim] = 1.0
            norm = 1.0
        return vec / norm


class FileEncoder:
    """Looks up precomputed per-field vectors by "item_id#field" id from a
    positive/negative embedding file pair."""

    def __init__(self, positive: EmbeddingFile, negative: EmbeddingFile):
        if positive.dim != negative.dim:
            raise InvalidArgumentError("positive and negative files disagree on dim")
        self.dim = positive.dim
        self._pos = {i: positive.vectors[k] for k, i in enumerate(positive.ids)}
        self._neg = {i: negative.vectors[k] for k, i in enumerate(negative.ids)}

    def field_vector(self, item_id: str, field_name: str, negative: bool) -> np.ndarray:
        table = self._neg if negative else self._pos
        key = f"{item_id}#{field_name}"
        if key not in table:
            raise MissingArtifactError(f"no precomputed vector for id {key!r}")
        return np.asarray(table[key], dtype=np.float64)


@dataclass
class AttributeEmbedding:
    """Per-field token vectors for one item: F rows for the positive attributes
    and F rows of identical shape for the generated negative."""

    item_id: str
    positive_tokens: np.ndarray
    negative_tokens: np.ndarray

    def validate(self) -> None:
        if self.positive_tokens.shape != self.negative_tokens.shape:
            raise InvalidArgumentError(
                f"token shapes differ for item {self.item_id!r}")
        if self.positive_tokens.ndim != 2 or self.positive_tokens.shape[0] != len(FIELDS):
            raise InvalidArgumentError(
                f"expected {len(FIELDS)} field vectors for item {self.item_id!r}")


def encode_attributes(record: ItemAttributeRecord,
                      encoder: StubEncoder | FileEncoder) -> AttributeEmbedding:
    """Encode the four attribute fields independently. Negative tokens reuse the
    metadata fields and swap in the generated negative description."""
    if not record.visual_description or not record.negative_description:
        raise InvalidArgumentError(
            f"item {record.item_id!r} has not completed the generation chain")
    pos_rows = []
    neg_rows = []
    for field_name in FIELDS:
        if isinstance(encoder, FileEncoder):
            pos_rows.append(encoder.field_vector(record.item_id, field_name, False))
            neg_rows.append(encoder.field_vector(record.item_id, field_name, True))
            continue
        text = getattr(record, field_name) or ""
        pos_rows.append(encoder.encode(text))
        if field_name == "visual_description":
            neg_rows.append(encoder.encode(record.negative_description))
        else:
            neg_rows.append(encoder.encode(text))
    emb = AttributeEmbedding(item_id=record.item_id,
                             positive_tokens=np.vstack(pos_rows),
                             negative_tokens=np.vstack(neg_rows))
    emb.validate()
    return emb


def write_attribute_embeddings(embeddings: list[AttributeEmbedding],
                               pos_path: str | Path, neg_path: str | Path) -> None:
    if not embeddings:
        raise InvalidArgumentError("no embeddings to write")
    dim = embeddings[0].positive_tokens.shape[1]
    ids = [f"{e.item_id}#{f}" for e in embeddings for f in FIELDS]
    pos = np.vstack([e.positive_tokens for e in embeddings]).astype(np.float32)
    neg = np.vstack([e.negative_tokens for e in embeddings]).astype(np.float32)
    write_embedding_file(EmbeddingFile(ids, dim, pos), pos_path)
    write_embedding_file(EmbeddingFile(ids, dim, neg), neg_path)


def read_attribute_embeddings(pos_path: str | Path,
                              neg_path: str | Path) -> list[AttributeEmbedding]:
    pos = read_embedding_file(pos_path)
    neg = read_embedding_file(neg_path)
    if pos.ids != neg.ids:
        raise InvalidArgumentError("positive and negative files list different ids")
    n_fields = len(FIELDS)
    if len(pos.ids) % n_fields != 0:
        raise InvalidArgumentError("row count is not a multiple of the field count")
    out = []
    for base in range(0, len(pos.ids), n_fields):
        block = pos.ids[base:base + n_fields]
        item_ids = {i.rsplit("#", 1)[0] for i in block}
        fields = [i.rsplit("#", 1)[1] for i in block]
        if len(item_ids) != 1 or fields != list(FIELDS):
            raise InvalidArgumentError(f"unexpected id block {block!r}")
        emb = AttributeEmbedding(
            item_id=block[0].rsplit("#", 1)[0],
            positive_tokens=pos.vectors[base:base + n_fields].astype(np.float64),
            negative_tokens=neg.vectors[base:base + n_fields].astype(np.float64))
        emb.validate()
        out.append(emb)
    return out


def corpus_token_counts(records) -> dict[str, int]:
    counts: Counter[str] = Counter()
    for record in records:
        for field_name in FIELDS:
            text = getattr(record, field_name) or ""
            counts.update(t for t in (_normalize_token(w) for w in text.split()) if t)
    return dict(counts)


def stub_describe(record: ItemAttributeRecord) -> str:
    return f"A {record.category} item: {record.title} by {record.brand}"


@dataclass
class PipelineResult:
    records: list[ItemAttributeRecord]
    embeddings: list[AttributeEmbedding]
    failures: list[tuple[str, str]] = field(default_factory=list)


def _backend_chain(record: ItemAttributeRecord, endpoint: str, cache: ResponseCache,
                   cache_lock: threading.Lock, model: str, token: str | None,
                   **call_kwargs) -> ItemAttributeRecord:
    def cached_call(req: GenerationRequest) -> str:
        key = cache_key(req.template_id, rendered_prompt(req))
        with cache_lock:
            hit = cache.get(key)
        if hit is not None:
            return hit.output
        output = call_backend(req, endpoint, token=token, **call_kwargs)
        with cache_lock:
            cache.put(CacheEntry(key=key, output=output, model=req.model,
                                 created_at=datetime.now(timezone.utc).isoformat()))
        return output

    updated = record
    if not updated.visual_description:
        if not updated.image_ref:
            raise InvalidArgumentError(f"item {record.item_id!r} has no image_ref")
        text = cached_call(GenerationRequest("describe", record.item_id,
                                             image_ref=updated.image_ref, model=model))
        updated = replace(updated, visual_description=text.strip())
    if not updated.masked_description:
        text = cached_call(GenerationRequest("mask", record.item_id,
                                             text_input=updated.visual_description,
                                             model=model))
        masked = text.strip()
        if MASK_TOKEN not in masked:
            raise BackendError(f"mask step produced no {MASK_TOKEN} token")
        updated = replace(updated, masked_description=masked)
    if not updated.negative_description:
        text = cached_call(GenerationRequest("complete", record.item_id,
                                             text_input=updated.masked_description,
                                             model=model))
        negative = text.strip()
        if MASK_TOKEN in negative:
            raise BackendError(f"complete step left a {MASK_TOKEN} token")
        if negative == updated.visual_description:
            raise BackendError("complete step returned the original description")
        updated = replace(updated, negative_description=negative)
    return updated


def run_pipeline(records: list[ItemAttributeRecord], *, mode: str = "stub",
                 encoder_dim: int = 64, seed: int = 0,
                 lexicon=(), swap_table: dict[str, str] | None = None,
                 vocabulary=DEFAULT_VOCABULARY, max_masks: int = 2,
                 endpoint: str | None = None, cache: ResponseCache | None = None,
                 token: str | None = None, model: str = "llama-3.2-11b-vision",
                 parallelism: int = 4, fail_fraction: float = 0.1,
                 encoder: StubEncoder | FileEncoder | None = None,
                 out_dir: str | Path | None = None, **call_kwargs) -> PipelineResult:
    """Run describe, mask, complete, and encode over every record.

    Stub mode is single-threaded and makes no backend or cache calls. Backend
    mode consults the cache before every call and records per-item failures,
    aborting only when more than `fail_fraction` of items fail.
    """
    if mode not in ("stub", "backend"):
        raise InvalidArgumentError(f"unknown pipeline mode {mode!r}")
    if not records:
        raise InvalidArgumentError("no attribute records to process")
    if encoder is None:
        encoder = StubEncoder(encoder_dim)

    failures: list[tuple[str, str]] = []
    updated: list[ItemAttributeRecord] = list(records)

    if mode == "stub":
        counts = corpus_token_counts(records)
        for idx, record in enumerate(records):
            rec = record
            if not rec.visual_description:
                rec = replace(rec, visual_description=stub_describe(rec))
            masked = stub_mask(rec.visual_description, lexicon, max_masks, seed, counts)
            negative = stub_complete(masked, swap_table or {}, vocabulary, seed)
            updated[idx] = replace(rec, masked_description=masked.text,
                                   negative_description=negative)
    else:
        if endpoint is None or cache is None:
            raise InvalidArgumentError("backend mode requires endpoint and cache")
        cache_lock = threading.Lock()

        def work(idx: int) -> None:
            try:
                updated[idx] = _backend_chain(records[idx], endpoint, cache, cache_lock,
                                              model, token, **call_kwargs)
            except (BackendError, InvalidArgumentError) as exc:
                failures.append((records[idx].item_id, str(exc)))

        with ThreadPoolExecutor(max_workers=max(1, parallelism)) as pool:
            list(pool.map(work, range(len(records))))
        if len(failures) > fail_fraction * len(records):
            names = ", ".join(item for item, _ in failures[:5])
            raise PipelineError(
                f"{len(failures)} of {len(records)} items failed ({names}...)")

    failed_ids = {item for item, _ in failures}
    embeddings = [encode_attributes(rec, encoder) for rec in updated
                  if rec.item_id not in failed_ids]

    if out_dir is not None:
        out_dir = Path(out_dir)
        out_dir.mkdir(parents=True, exist_ok=True)
        save_attributes([r for r in updated if r.item_id not in failed_ids],
                        out_dir / "attributes.enriched.jsonl")
        write_attribute_embeddings(embeddings, out_dir / "pos.emb", out_dir / "neg.emb")
    return PipelineResult(records=updated, embeddings=embeddings, failures=failures)
