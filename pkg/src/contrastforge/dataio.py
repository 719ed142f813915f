"""Interaction ingest, k-core filtering, splitting, attribute records, and the
embedding interchange format.

External formats handled here:
  interactions.tsv   user_id TAB item_id [TAB unix_seconds], UTF-8, no header
  attributes.jsonl   one JSON object per line
  *.emb              "NEGGEMB1" magic, u32 count, u32 dim, count*dim f32 (LE),
                     with a ".ids" text sidecar listing one id per row
"""

from __future__ import annotations

import json
import struct
from collections import Counter
from dataclasses import dataclass, field, fields as dc_fields
from pathlib import Path

import numpy as np

from .errors import (EmptyAfterFilterError, FormatError, InvalidArgumentError,
                     ParseError)
from .numerics import rng_stream

MAGIC = b"NEGGEMB1"

Interaction = tuple[str, str, int | None]


@dataclass
class RawInteractions:
    records: list[Interaction]

    def __len__(self) -> int:
        return len(self.records)


def load_interactions(path: str | Path) -> RawInteractions:
    """Parse a TSV interaction log, deduplicating (user, item) pairs.

    Duplicates keep the earliest known timestamp; a pair seen both with and
    without a timestamp keeps the timestamped record.
    """
    text = Path(path).read_text(encoding="utf-8")
    seen: dict[tuple[str, str], int | None] = {}
    order: list[tuple[str, str]] = []
    for lineno, line in enumerate(text.splitlines(), start=1):
        parts = line.split("\t")
        if len(parts) not in (2, 3):
            raise ParseError(f"expected 2 or 3 tab-separated fields, got {len(parts)}", lineno)
        user, item = parts[0], parts[1]
        if not user or not item:
            raise ParseError("empty user or item id", lineno)
        ts: int | None = None
        if len(parts) == 3:
            try:
                ts = int(parts[2])
            except ValueError:
                raise ParseError(f"timestamp is not an integer: {parts[2]!r}", lineno) from None
        key = (user, item)
        if key not in seen:
            seen[key] = ts
            order.append(key)
        else:
            old = seen[key]
            if ts is not None and (old is None or ts < old):
                seen[key] = ts
    if not order:
        raise InvalidArgumentError(f"no interaction records in {path}")
    return RawInteractions(records=[(u, i, seen[(u, i)]) for u, i in order])


def kcore_filter(raw: RawInteractions, k: int) -> RawInteractions:
    """Fixpoint of removing users and items with fewer than k interactions."""
    if k < 1:
        raise InvalidArgumentError(f"k-core threshold must be >= 1, got {k}")
    records = list(raw.records)
    while True:
        user_deg = Counter(u for u, _, _ in records)
        item_deg = Counter(i for _, i, _ in records)
        kept = [r for r in records
                if user_deg[r[0]] >= k and item_deg[r[1]] >= k]
        if len(kept) == len(records):
            break
        records = kept
    if not records:
        raise EmptyAfterFilterError(f"no interactions survive {k}-core filtering")
    return RawInteractions(records=records)


def density(num_users: int, num_items: int, num_interactions: int) -> float:
    """Interaction density of the user-item matrix."""
    if num_users < 1 or num_items < 1:
        raise InvalidArgumentError("density needs at least one user and one item")
    return num_interactions / (num_users * num_items)


def interaction_stats(raw: RawInteractions) -> dict:
    users = {u for u, _, _ in raw.records}
    items = {i for _, i, _ in raw.records}
    return {
        "num_users": len(users),
        "num_items": len(items),
        "num_interactions": len(raw.records),
        "density": density(len(users), len(items), len(raw.records)),
    }


def _round_half_up(x: float) -> int:
    return int(np.floor(x + 0.5))


@dataclass
class InteractionDataset:
    """Index-mapped interactions with disjoint train/val/test splits."""

    user_index: dict[str, int]
    item_index: dict[str, int]
    train: list[tuple[int, int]]
    val: list[tuple[int, int]]
    test: list[tuple[int, int]]
    k_core: int
    split_seed: int
    _train_by_user: tuple[frozenset, ...] | None = field(default=None, repr=False, compare=False)

    @property
    def num_users(self) -> int:
        return len(self.user_index)

    @property
    def num_items(self) -> int:
        return len(self.item_index)

    @property
    def user_ids(self) -> list[str]:
        return sorted(self.user_index, key=self.user_index.get)

    @property
    def item_ids(self) -> list[str]:
        return sorted(self.item_index, key=self.item_index.get)

    def train_positives(self) -> tuple[frozenset, ...]:
        """Training item sets per user index; cached."""
        if self._train_by_user is None:
            sets: list[set[int]] = [set() for _ in range(self.num_users)]
            for u, i in self.train:
                sets[u].add(i)
            self._train_by_user = tuple(frozenset(s) for s in sets)
        return self._train_by_user

    def split_positives(self, split: str) -> list[set[int]]:
        pairs = {"train": self.train, "val": self.val, "test": self.test}[split]
        sets: list[set[int]] = [set() for _ in range(self.num_users)]
        for u, i in pairs:
            sets[u].add(i)
        return sets


def split_80_10_10(raw: RawInteractions, seed: int, k_core: int = 1) -> InteractionDataset:
    """Per-user random 80-10-10 split with at least one val and one test item."""
    by_user: dict[str, list[str]] = {}
    for u, i, _ in raw.records:
        by_user.setdefault(u, []).append(i)

    user_index = {u: n for n, u in enumerate(sorted(by_user))}
    item_index = {i: n for n, i in enumerate(sorted({i for _, i, _ in raw.records}))}

    train: list[tuple[int, int]] = []
    val: list[tuple[int, int]] = []
    test: list[tuple[int, int]] = []
    for user in sorted(by_user):
        items = by_user[user]
        n = len(items)
        if n < 3:
            raise InvalidArgumentError(
                f"user {user!r} has only {n} interactions; at least 3 are required to split")
        rng = rng_stream(seed, "split", user)
        shuffled = [items[j] for j in rng.permutation(n)]
        n_test = max(1, _round_half_up(0.1 * n))
        n_val = max(1, _round_half_up(0.1 * n))
        u_idx = user_index[user]
        for item in shuffled[:n_test]:
            test.append((u_idx, item_index[item]))
        for item in shuffled[n_test:n_test + n_val]:
            val.append((u_idx, item_index[item]))
        for item in shuffled[n_test + n_val:]:
            train.append((u_idx, item_index[item]))
    return InteractionDataset(user_index=user_index, item_index=item_index,
                              train=train, val=val, test=test,
                              k_core=k_core, split_seed=seed)


def save_dataset(ds: InteractionDataset, directory: str | Path) -> None:
    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    users = ds.user_ids
    items = ds.item_ids
    (directory / "users.txt").write_text("".join(u + "\n" for u in users), encoding="utf-8")
    (directory / "items.txt").write_text("".join(i + "\n" for i in items), encoding="utf-8")
    for name in ("train", "val", "test"):
        pairs = getattr(ds, name)
        lines = "".join(f"{users[u]}\t{items[i]}\n" for u, i in pairs)
        (directory / f"{name}.tsv").write_text(lines, encoding="utf-8")
    meta = {"k_core": ds.k_core, "split_seed": ds.split_seed,
            "num_users": ds.num_users, "num_items": ds.num_items,
            "num_interactions": len(ds.train) + len(ds.val) + len(ds.test)}
    (directory / "dataset.json").write_text(json.dumps(meta, indent=2) + "\n", encoding="utf-8")


def load_dataset(directory: str | Path) -> InteractionDataset:
    directory = Path(directory)
    meta = json.loads((directory / "dataset.json").read_text(encoding="utf-8"))
    users = (directory / "users.txt").read_text(encoding="utf-8").splitlines()
    items = (directory / "items.txt").read_text(encoding="utf-8").splitlines()
    user_index = {u: n for n, u in enumerate(users)}
    item_index = {i: n for n, i in enumerate(items)}
    splits = {}
    for name in ("train", "val", "test"):
        pairs = []
        for line in (directory / f"{name}.tsv").read_text(encoding="utf-8").splitlines():
            u, i = line.split("\t")
            pairs.append((user_index[u], item_index[i]))
        splits[name] = pairs
    return InteractionDataset(user_index=user_index, item_index=item_index,
                              train=splits["train"], val=splits["val"], test=splits["test"],
                              k_core=meta["k_core"], split_seed=meta["split_seed"])


@dataclass
class ItemAttributeRecord:
    """Multi-modal fields of one catalog item, enriched in place by the pipeline."""

    item_id: str
    title: str = ""
    brand: str = ""
    category: str = ""
    image_ref: str | None = None
    visual_description: str | None = None
    masked_description: str | None = None
    negative_description: str | None = None

    def validate(self) -> None:
        if not self.item_id:
            raise InvalidArgumentError("item_id must be non-empty")
        if self.masked_description is not None and "[MASK]" not in self.masked_description:
            raise InvalidArgumentError(
                f"item {self.item_id}: masked_description contains no [MASK] token")
        if self.negative_description is not None and "[MASK]" in self.negative_description:
            raise InvalidArgumentError(
                f"item {self.item_id}: negative_description still contains [MASK]")


_RECORD_FIELDS = [f.name for f in dc_fields(ItemAttributeRecord)]


def load_attributes(path: str | Path) -> dict[str, ItemAttributeRecord]:
    """Read a JSONL attribute file into one record per item id."""
    records: dict[str, ItemAttributeRecord] = {}
    text = Path(path).read_text(encoding="utf-8")
    for lineno, line in enumerate(text.splitlines(), start=1):
        if not line.strip():
            continue
        try:
            obj = json.loads(line)
        except json.JSONDecodeError as exc:
            raise ParseError(f"invalid JSON: {exc.msg}", lineno) from None
        if not isinstance(obj, dict) or not obj.get("item_id"):
            raise ParseError("object with a non-empty item_id required", lineno)
        item_id = obj["item_id"]
        if item_id in records:
            raise ParseError(f"duplicate item_id {item_id!r}", lineno)
        known = {k: v for k, v in obj.items() if k in _RECORD_FIELDS and v is not None}
        record = ItemAttributeRecord(**known)
        record.validate()
        records[item_id] = record
    return records


def save_attributes(records, path: str | Path) -> None:
    """Write records as JSONL with a fixed field order; None fields are omitted."""
    lines = []
    for record in records:
        record.validate()
        obj = {name: getattr(record, name) for name in _RECORD_FIELDS
               if getattr(record, name) is not None}
        lines.append(json.dumps(obj, ensure_ascii=False))
    Path(path).write_text("".join(line + "\n" for line in lines), encoding="utf-8")


@dataclass
class EmbeddingFile:
    """Ordered id list plus a float32 matrix, persisted as NEGGEMB1 + ids sidecar."""

    ids: list[str]
    dim: int
    vectors: np.ndarray

    def validate(self) -> None:
        if len(set(self.ids)) != len(self.ids):
            raise InvalidArgumentError("embedding ids must be unique")
        if any("\n" in i or not i for i in self.ids):
            raise InvalidArgumentError("embedding ids must be non-empty, newline-free strings")
        if self.vectors.shape != (len(self.ids), self.dim):
            raise InvalidArgumentError(
                f"vector block {self.vectors.shape} does not match "
                f"{len(self.ids)} ids x dim {self.dim}")
        if self.vectors.size and not np.all(np.isfinite(self.vectors)):
            raise InvalidArgumentError("embedding vectors must be finite")


def write_embedding_file(emb: EmbeddingFile, path: str | Path) -> None:
    emb.validate()
    path = Path(path)
    payload = np.ascontiguousarray(emb.vectors, dtype="<f4").tobytes()
    with open(path, "wb") as fh:
        fh.write(MAGIC)
        fh.write(struct.pack("<II", len(emb.ids), emb.dim))
        fh.write(payload)
    Path(str(path) + ".ids").write_text("".join(i + "\n" for i in emb.ids), encoding="utf-8")


def read_embedding_file(path: str | Path) -> EmbeddingFile:
    path = Path(path)
    blob = path.read_bytes()
    if blob[:8] != MAGIC:
        raise FormatError(f"{path}: bad magic {blob[:8]!r}")
    if len(blob) < 16:
        raise FormatError(f"{path}: truncated header")
    count, dim = struct.unpack("<II", blob[8:16])
    expected = 16 + count * dim * 4
    if len(blob) != expected:
        raise FormatError(f"{path}: expected {expected} bytes for {count}x{dim}, got {len(blob)}")
    vectors = np.frombuffer(blob[16:], dtype="<f4").reshape(count, dim).copy()
    ids_path = Path(str(path) + ".ids")
    if not ids_path.exists():
        raise FormatError(f"missing ids sidecar {ids_path}")
    ids = ids_path.read_text(encoding="utf-8").splitlines()
    if len(ids) != count:
        raise FormatError(f"{ids_path}: {len(ids)} ids for {count} vectors")
    emb = EmbeddingFile(ids=ids, dim=dim, vectors=vectors)
    emb.validate()
    return emb
