"""Hashed-key deduplication across sources.

Each source hashes its primary keys and sends only the digests. The server
finds digests held by more than ``k_keep`` sources, keeps each such record in
``k_keep`` randomly chosen sources, and tells the others which rows to drop.
"""

from __future__ import annotations

import hashlib
import json
from collections import defaultdict
from dataclasses import dataclass
from typing import Iterable, Sequence

import numpy as np

from .errors import EmptyKey, IndexOutOfRange, InvalidConfig, SchemaError
from .model import SourceData

UNIT_SEPARATOR = "\x1f"


def canonical_key(fields: Iterable) -> str:
    """Join key fields with the ASCII unit separator; fields are used verbatim."""
    return UNIT_SEPARATOR.join(str(f) for f in fields)


@dataclass(frozen=True)
class HashedKeyList:
    source_id: int
    digests: tuple[str, ...]

    def __post_init__(self):
        for d in self.digests:
            if len(d) != 64 or d != d.lower() or any(c not in "0123456789abcdef" for c in d):
                raise SchemaError(f"malformed digest {d!r}")


@dataclass(frozen=True)
class ExclusionList:
    source_id: int
    rows: tuple[int, ...]

    def __post_init__(self):
        if len(set(self.rows)) != len(self.rows):
            raise SchemaError(f"duplicate row indices for source {self.source_id}")


def hash_keys(keys: Sequence[str], source_id: int = 0, salt: str | None = None) -> HashedKeyList:
    """SHA-256 lowercase hex digest of each UTF-8 key, in input order.

    A non-empty ``salt`` is prepended to every key; all sources must share it.
    """
    prefix = (salt or "").encode("utf-8")
    out = []
    for i, key in enumerate(keys):
        if key is None or key == "":
            raise EmptyKey(f"source {source_id}: empty primary key at row {i}")
        out.append(hashlib.sha256(prefix + key.encode("utf-8")).hexdigest())
    return HashedKeyList(source_id, tuple(out))


def match_and_assign(
    lists: Sequence[HashedKeyList], k_keep: int = 1, seed: int = 0
) -> dict[int, ExclusionList]:
    """Exclusions that leave every digest in at most ``k_keep`` sources.

    Repeats of a digest within one source are excluded after the first. For a
    digest held by more sources than ``k_keep``, the keepers are a uniform
    seeded choice; digests are visited in sorted order so the result depends
    only on the inputs and ``seed``.
    """
    if k_keep < 1:
        raise InvalidConfig("k_keep must be at least 1")
    ids = [h.source_id for h in lists]
    if len(set(ids)) != len(ids):
        raise InvalidConfig(f"duplicate source ids {ids}")
    drops: dict[int, list[int]] = {sid: [] for sid in ids}
    holders: dict[str, list[tuple[int, int]]] = defaultdict(list)
    for h in sorted(lists, key=lambda h: h.source_id):
        seen = set()
        for row, d in enumerate(h.digests):
            if d in seen:
                drops[h.source_id].append(row)
            else:
                seen.add(d)
                holders[d].append((h.source_id, row))
    rng = np.random.default_rng(seed)
    for d in sorted(holders):
        owners = holders[d]
        if len(owners) <= k_keep:
            continue
        keep = set(rng.choice(len(owners), size=k_keep, replace=False).tolist())
        for j, (sid, row) in enumerate(owners):
            if j not in keep:
                drops[sid].append(row)
    return {sid: ExclusionList(sid, tuple(sorted(rows))) for sid, rows in drops.items()}


def apply_exclusions(src: SourceData, ex: ExclusionList) -> SourceData:
    """Drop the listed rows, keeping the remaining rows in their original order."""
    bad = [r for r in ex.rows if not 0 <= r < src.n]
    if bad:
        raise IndexOutOfRange(f"source {src.source_id}: rows {bad} outside 0..{src.n - 1}")
    keep = np.setdiff1d(np.arange(src.n), np.asarray(ex.rows, dtype=int))
    return src.take(keep)


def encode_digests(h: HashedKeyList) -> str:
    return json.dumps(
        {"type": "digests", "source_id": h.source_id, "digests": list(h.digests)},
        separators=(",", ":"),
    ) + "\n"


def encode_exclusions(ex: ExclusionList) -> str:
    return json.dumps(
        {"type": "exclude", "source_id": ex.source_id, "rows": list(ex.rows)},
        separators=(",", ":"),
    ) + "\n"


def decode_line(line: str | bytes) -> HashedKeyList | ExclusionList:
    try:
        obj = json.loads(line)
    except json.JSONDecodeError as exc:
        raise SchemaError(f"bad dedup message: {exc}") from exc
    kind = obj.get("type") if isinstance(obj, dict) else None
    if kind == "digests" and set(obj) == {"type", "source_id", "digests"}:
        return HashedKeyList(int(obj["source_id"]), tuple(obj["digests"]))
    if kind == "exclude" and set(obj) == {"type", "source_id", "rows"}:
        return ExclusionList(int(obj["source_id"]), tuple(int(r) for r in obj["rows"]))
    raise SchemaError(f"unrecognized dedup message {line!r}")


def run_protocol(
    sources: Sequence[SourceData], k_keep: int = 1, seed: int = 0, salt: str | None = None
) -> list[SourceData]:
    """Hash, match and exclude in one pass; messages go through the wire encoding."""
    inbox = []
    for src in sources:
        if src.keys is None:
            raise SchemaError(f"source {src.source_id} has no primary keys")
        inbox.append(decode_line(encode_digests(hash_keys(src.keys, src.source_id, salt))))
    plan = match_and_assign(inbox, k_keep, seed)
    out = []
    for src in sources:
        ex = decode_line(encode_exclusions(plan[src.source_id]))
        out.append(apply_exclusions(src, ex))
    return out
