"""Byte-level corpora, chunk-aligned batching and the synthetic recall task."""

from __future__ import annotations

import os
import random
from dataclasses import dataclass, field
from typing import Iterator

import numpy as np
import torch

from .errors import ConfigError
from .model import ModelConfig, layout_for

BYTE_VOCAB = 256


class IngestError(OSError):
    pass


@dataclass
class TokenStream:
    """Concatenated documents.

    ``probes`` holds ``(value_pos, def_pos)`` stream offsets for recall
    queries: the token at ``value_pos`` can only be predicted by looking up
    the definition whose chunk contains ``def_pos``.
    """

    ids: np.ndarray
    boundaries: list[int]
    probes: list[tuple[int, int]] = field(default_factory=list)

    def __post_init__(self) -> None:
        self.ids = np.asarray(self.ids, dtype=np.int64)
        if any(b > a for a, b in zip(self.boundaries[1:], self.boundaries)):
            raise ConfigError("document boundaries must be sorted")

    def __len__(self) -> int:
        return int(self.ids.size)

    def document_spans(self) -> list[tuple[int, int]]:
        ends = self.boundaries[1:] + [len(self)]
        return list(zip(self.boundaries, ends))

    def documents(self) -> list[np.ndarray]:
        return [self.ids[a:b] for a, b in self.document_spans()]


def ingest_corpus(paths: list[str | os.PathLike]) -> TokenStream:
    """Read files as raw bytes, one document per file, in the given order."""
    chunks, bounds, offset = [], [], 0
    for path in paths:
        try:
            with open(path, "rb") as fh:
                data = fh.read()
        except OSError as exc:
            raise IngestError(f"cannot read {os.fspath(path)}: {exc.strerror or exc}") from exc
        bounds.append(offset)
        chunks.append(np.frombuffer(data, dtype=np.uint8).astype(np.int64))
        offset += len(data)
    ids = np.concatenate(chunks) if chunks else np.zeros(0, dtype=np.int64)
    return TokenStream(ids, bounds)


def corpus_files(path: str | os.PathLike) -> list[str]:
    """A single file, or every regular file under a directory (sorted)."""
    path = os.fspath(path)
    if os.path.isdir(path):
        found = []
        for root, _, names in os.walk(path):
            found.extend(os.path.join(root, n) for n in names)
        return sorted(found)
    return [path]


def decode(ids) -> bytes:
    """Inverse of byte ingestion. Special ids are dropped."""
    return bytes(int(i) for i in ids if 0 <= int(i) < BYTE_VOCAB)


@dataclass
class Batch:
    tokens: torch.Tensor  # (B, T) laid-out ids
    targets: torch.Tensor  # (B, T)
    loss_mask: torch.Tensor  # (B, T)
    probes: list[tuple[int, int, int]] = field(default_factory=list)  # (row, value_pos, def_chunk)
    sources: list[tuple[int, int]] = field(default_factory=list)  # (doc index, content offset) per row

    def value_mask(self) -> torch.Tensor:
        """Positions whose target is a probed value token."""
        m = torch.zeros_like(self.loss_mask)
        for row, vpos, _ in self.probes:
            m[row, vpos - 1] = True
        return m


def laid_out_pos(content_pos: int, chunk_size: int) -> int:
    return (content_pos // chunk_size) * (chunk_size + 1) + content_pos % chunk_size


@dataclass
class Window:
    doc: int
    start: int  # content offset within the document
    ids: np.ndarray  # content ids, padded to a chunk multiple
    n_real: int
    probes: list[tuple[int, int]]  # (value content pos, def chunk), window-relative


def document_windows(stream: TokenStream, context_len: int, config: ModelConfig) -> list[Window]:
    """Non-overlapping windows per document, the last one PAD-padded to a chunk multiple."""
    s = config.chunk_size
    if context_len < s or context_len % s:
        raise ConfigError(f"context_len={context_len} must be a positive multiple of chunk_size={s}")
    by_doc: dict[int, list[tuple[int, int]]] = {}
    spans = stream.document_spans()
    starts = [a for a, _ in spans]
    for vpos, dpos in stream.probes:
        doc = int(np.searchsorted(starts, vpos, side="right")) - 1
        by_doc.setdefault(doc, []).append((vpos - spans[doc][0], dpos - spans[doc][0]))
    out = []
    for di, (a, b) in enumerate(spans):
        doc = stream.ids[a:b]
        for w0 in range(0, len(doc), context_len):
            piece = doc[w0 : w0 + context_len]
            n = len(piece)
            padded = -(-n // s) * s
            ids = np.full(padded, config.pad_id, dtype=np.int64)
            ids[:n] = piece
            probes = []
            for vpos, dpos in by_doc.get(di, []):
                if w0 <= vpos < w0 + n and w0 <= dpos:
                    probes.append((vpos - w0, (dpos - w0) // s))
            out.append(Window(di, w0, ids, n, probes))
    return out


def make_batches(
    stream: TokenStream,
    context_len: int,
    batch_size: int,
    seed: int,
    config: ModelConfig,
    shuffle: bool = True,
) -> Iterator[Batch]:
    """Yield batches of laid-out windows; rows of unequal length are PAD-extended."""
    if batch_size < 1:
        raise ConfigError("batch_size must be >= 1")
    windows = document_windows(stream, context_len, config)
    if shuffle:
        random.Random(seed).shuffle(windows)
    for i in range(0, len(windows), batch_size):
        yield collate(windows[i : i + batch_size], config)


def batch_for_step(windows: list[Window], step: int, batch_size: int, seed: int, config: ModelConfig) -> Batch:
    """Batch ``step`` of an endless epoch-wise reshuffled pass over ``windows``.

    Depends only on (windows, step, seed), so a resumed run sees the same
    batches as an uninterrupted one.
    """
    if not windows:
        raise ConfigError("no training windows")
    per_epoch = max(1, len(windows) // batch_size)
    epoch, i = divmod(step, per_epoch)
    order = list(range(len(windows)))
    random.Random(seed * 1_000_003 + epoch).shuffle(order)
    pick = order[i * batch_size : (i + 1) * batch_size]
    if len(pick) < batch_size:
        pick = (pick + order)[:batch_size]
    return collate([windows[j] for j in pick], config)


def collate(windows: list[Window], config: ModelConfig) -> Batch:
    s, stride = config.chunk_size, config.stride
    n_chunks = max(len(w.ids) for w in windows) // s
    t = n_chunks * stride
    tokens = torch.full((len(windows), t), config.pad_id, dtype=torch.long)
    base_mask = torch.tensor(layout_for(n_chunks, config).loss_mask)
    lmk = torch.arange(t) % stride == s
    probes, sources = [], []
    for row, w in enumerate(windows):
        content = torch.full((n_chunks * s,), config.pad_id, dtype=torch.long)
        content[: len(w.ids)] = torch.from_numpy(w.ids)
        tokens[row] = torch.where(lmk, torch.tensor(config.lmk_id), torch.zeros(t, dtype=torch.long))
        tokens[row, ~lmk] = content
        for vpos, dchunk in w.probes:
            probes.append((row, laid_out_pos(vpos, s), dchunk))
        sources.append((w.doc, w.start))
    targets = torch.cat([tokens[:, 1:], torch.full((len(windows), 1), config.pad_id)], dim=1)
    loss_mask = base_mask[None].expand_as(tokens) & (targets != config.pad_id)
    return Batch(tokens, targets, loss_mask.clone(), probes, sources)


# --------------------------------------------------------------------------
# synthetic recall task

FILLER = b"ghijklmnopqrstuvwxyz"
KEYS = b"ABCDEFGHIJKLMNOP"
VALUES = b"0123456789abcdef"


def _fill(rng: random.Random, n: int) -> list[int]:
    return [rng.choice(FILLER) for _ in range(n)]


def synthetic_recall_corpus(
    n_docs: int,
    doc_len: int,
    n_keys: int,
    gap: int,
    seed: int,
    chunk_size: int = 16,
    window: int = 64,
    value_len: int = 1,
) -> TokenStream:
    """Documents of filler chunks with key/value definitions and later queries.

    A definition chunk reads ``= K v1 .. vm v1 .. vm ...``: a key followed by
    ``m = value_len`` distinct value symbols tiled to the end of the chunk.
    A query is a cue chunk ``?K?K...`` followed by an answer chunk ``K v1 ..``
    replaying the same tiling. The cue chunk sits at least ``gap`` chunks
    after the definition, and ``gap`` must clear the sliding window. Each key
    appears once per document with fresh values, so the first value of an
    answer (the recorded probe) is uniform over the value alphabet unless the
    definition is retrieved.
    """
    s = chunk_size
    if s < 3:
        raise ConfigError("chunk_size must be >= 3 for the recall task")
    if doc_len % s:
        raise ConfigError(f"doc_len={doc_len} must be a multiple of chunk_size={s}")
    if gap * (s + 1) <= window:
        raise ConfigError(f"gap={gap} chunks does not clear the {window}-position window")
    if not 1 <= n_keys <= len(KEYS):
        raise ConfigError(f"n_keys must be in [1, {len(KEYS)}]")
    n = doc_len // s
    if gap + 2 > n or 3 * n_keys > n:
        raise ConfigError(f"doc of {n} chunks cannot hold {n_keys} queries at gap {gap}")
    if not 1 <= value_len <= min(s - 2, len(VALUES)):
        raise ConfigError(f"value_len must be in [1, {min(s - 2, len(VALUES))}]")
    rng = random.Random(seed)
    ids: list[int] = []
    bounds: list[int] = []
    probes: list[tuple[int, int]] = []
    for _ in range(n_docs):
        layout = _place_queries(rng, n, n_keys, gap)
        keys = rng.sample(list(KEYS), n_keys)
        doc: list[list[int]] = [_fill(rng, s) for _ in range(n)]
        base = len(ids)
        for key, (d, c) in zip(keys, layout):
            values = rng.sample(list(VALUES), value_len) * s
            doc[d] = [ord("="), key] + values[: s - 2]
            doc[c] = ([ord("?"), key] * s)[:s]
            doc[c + 1] = [key] + values[: s - 1]
            probes.append((base + (c + 1) * s + 1, base + d * s))
        bounds.append(base)
        for ch in doc:
            ids.extend(ch)
    return TokenStream(np.array(ids, dtype=np.int64), bounds, probes)


def _place_queries(rng: random.Random, n: int, n_keys: int, gap: int) -> list[tuple[int, int]]:
    """Pick (definition chunk, cue chunk) pairs; cue c and answer c+1 share no chunk with others."""
    for _ in range(200):
        used: set[int] = set()
        pairs = []
        ok = True
        for _ in range(n_keys):
            cand = [
                (d, c)
                for d in range(n - gap - 1)
                if d not in used
                for c in (rng.randrange(d + gap, n - 1),)
                if c not in used and c + 1 not in used and c != d
            ]
            if not cand:
                ok = False
                break
            d, c = rng.choice(cand)
            used.update((d, c, c + 1))
            pairs.append((d, c))
        if ok:
            return pairs
    raise ConfigError(f"could not place {n_keys} queries at gap {gap} in {n} chunks")
