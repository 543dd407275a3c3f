"""Incremental decoding over a tiered chunk store, sampling, and perplexity."""

from __future__ import annotations

import io
import math
import os
import struct
from dataclasses import dataclass

import numpy as np
import torch
import torch.nn.functional as F

from .data import TokenStream, collate, document_windows
from .errors import ConfigError, ContractError
from .model import (
    ModelConfig,
    Params,
    _merge_heads,
    _split_heads,
    decoder_slopes,
    encode_chunks,
    ffn,
    forward,
    gca_output,
    project_chunk_kv,
    rms_norm,
)
from .retrieval import RetrievalSet, fusion_weights, relevance_scores, gumbel_topk

TIER_MAGIC = b"DRTT"
TIER_VERSION = 1
_TIER_HEADER = struct.Struct("<4sIIIII")  # magic, version, d, S, count, bytes per scalar
_NP_DTYPES = {4: np.dtype("<f4"), 8: np.dtype("<f8")}


class StoreError(KeyError):
    pass


class ChunkTier:
    """Append-only slow tier: a header followed by raw little-endian S x d records.

    Backed by an in-process buffer, or by a file when ``path`` is given.
    Records are laid out in offload order; the slot of each chunk is kept
    in memory by the owning store.
    """

    def __init__(self, d: int, s: int, itemsize: int, path: str | os.PathLike | None = None):
        if itemsize not in _NP_DTYPES:
            raise ConfigError(f"unsupported scalar width {itemsize}")
        self.d, self.s, self.itemsize = d, s, itemsize
        self.count = 0
        self._fh = open(path, "w+b") if path is not None else io.BytesIO()
        self._write_header()

    @property
    def record_bytes(self) -> int:
        return self.s * self.d * self.itemsize

    def _write_header(self) -> None:
        self._fh.seek(0)
        self._fh.write(_TIER_HEADER.pack(TIER_MAGIC, TIER_VERSION, self.d, self.s, self.count, self.itemsize))

    def append(self, states: torch.Tensor) -> int:
        arr = np.ascontiguousarray(states.detach().cpu().numpy(), dtype=_NP_DTYPES[self.itemsize])
        if arr.shape != (self.s, self.d):
            raise ContractError(f"tier expects ({self.s}, {self.d}) records, got {arr.shape}")
        slot = self.count
        self._fh.seek(_TIER_HEADER.size + slot * self.record_bytes)
        self._fh.write(arr.tobytes())
        self.count += 1
        self._write_header()
        return slot

    def read(self, slot: int) -> torch.Tensor:
        if not 0 <= slot < self.count:
            raise StoreError(f"tier slot {slot} out of range")
        self._fh.seek(_TIER_HEADER.size + slot * self.record_bytes)
        raw = self._fh.read(self.record_bytes)
        arr = np.frombuffer(raw, dtype=_NP_DTYPES[self.itemsize]).reshape(self.s, self.d)
        return torch.from_numpy(arr.copy())

    def close(self) -> None:
        self._fh.close()

    @staticmethod
    def read_header(raw: bytes) -> dict:
        magic, version, d, s, count, itemsize = _TIER_HEADER.unpack_from(raw)
        if magic != TIER_MAGIC:
            raise ContractError("not a chunk tier file")
        return {"version": version, "d": d, "S": s, "count": count, "itemsize": itemsize}


class ChunkStore:
    """Landmarks stay resident; token matrices C_k may live in the slow tier."""

    def __init__(
        self,
        d: int,
        s: int,
        dtype: torch.dtype = torch.float32,
        offload: bool = False,
        tier_path: str | os.PathLike | None = None,
        keep_states: bool = True,
    ):
        self.d, self.s, self.dtype = d, s, dtype
        self.offload = offload
        self.keep_states = keep_states
        self.landmarks: list[torch.Tensor] = []
        self.positions: list[int] = []
        self._resident: dict[int, torch.Tensor] = {}
        self._slots: dict[int, int] = {}
        self.itemsize = torch.tensor([], dtype=dtype).element_size()
        self.tier = ChunkTier(d, s, self.itemsize, tier_path)
        self.bytes_offloaded = 0
        self.bytes_restored = 0

    def __len__(self) -> int:
        return len(self.landmarks)

    def append(self, landmark: torch.Tensor, states: torch.Tensor | None, position: int) -> int:
        if self.positions and position <= self.positions[-1]:
            raise ContractError("chunk positions must be strictly increasing")
        k = len(self.landmarks)
        self.landmarks.append(landmark.detach().to(self.dtype).clone())
        self.positions.append(position)
        if self.keep_states:
            if states is None:
                raise ContractError("this store keeps chunk states; got none")
            self._resident[k] = states.detach().to(self.dtype).clone()
            if self.offload:
                self.offload_chunk(k)
        return k

    def offload_chunk(self, k: int) -> None:
        if k not in self._resident:
            if k in self._slots:
                return
            raise StoreError(f"chunk {k} was never stored")
        self._slots[k] = self.tier.append(self._resident.pop(k))
        self.bytes_offloaded += self.tier.record_bytes

    def restore_chunks(self, indices: list[int]) -> list[torch.Tensor]:
        """The C_k of ``indices``; tier reads are counted in ``bytes_restored``."""
        out = []
        for k in indices:
            if k in self._resident:
                out.append(self._resident[k])
            elif k in self._slots:
                out.append(self.tier.read(self._slots[k]).to(self.dtype))
                self.bytes_restored += self.tier.record_bytes
            else:
                raise StoreError(f"chunk {k} was never stored")
        return out

    def landmark_matrix(self) -> torch.Tensor:
        if not self.landmarks:
            return torch.zeros(0, self.d, dtype=self.dtype)
        return torch.stack(self.landmarks)

    def landmark_bytes(self) -> int:
        return len(self.landmarks) * self.d * self.itemsize

    def resident_bytes(self) -> int:
        return self.landmark_bytes() + sum(t.numel() for t in self._resident.values()) * self.itemsize


@dataclass
class SamplingParams:
    mode: str = "greedy"
    temperature: float = 1.0
    seed: int = 0
    max_new_tokens: int = 64

    def __post_init__(self) -> None:
        if self.mode not in ("greedy", "temperature"):
            raise ConfigError(f"sampling mode must be greedy or temperature, got {self.mode!r}")
        if self.mode == "temperature" and not self.temperature > 0:
            raise ConfigError("temperature must be > 0")


class _WindowCache:
    """Last ``window`` keys/values of one self-attention layer, (H, n, d_h)."""

    def __init__(self, window: int):
        self.window = window
        self.k: torch.Tensor | None = None
        self.v: torch.Tensor | None = None

    def __len__(self) -> int:
        return 0 if self.k is None else self.k.shape[-2]

    def extend(self, k: torch.Tensor, v: torch.Tensor) -> None:
        self.k = k if self.k is None else torch.cat([self.k, k], dim=-2)
        self.v = v if self.v is None else torch.cat([self.v, v], dim=-2)
        self.k = self.k[..., -self.window :, :]
        self.v = self.v[..., -self.window :, :]

    def nbytes(self) -> int:
        if self.k is None:
            return 0
        return (self.k.numel() + self.v.numel()) * self.k.element_size()


@dataclass
class _ActiveSet:
    """Retrieval set serving the current chunk, with projected GCA keys/values."""

    retrieval: RetrievalSet
    keys: torch.Tensor | None = None  # (H, K, S, d_h)
    values: torch.Tensor | None = None
    weights: torch.Tensor | None = None

    def nbytes(self) -> int:
        n = 0
        for t in (self.keys, self.values):
            if t is not None:
                n += t.numel() * t.element_size()
        return n


class Session:
    """Single-sequence incremental decoder.

    Tokens are consumed in laid-out form. After the landmark of chunk t has
    passed the lower stack the chunk is encoded and stored; at the first
    layer of each group the landmark state scores the stored landmarks of
    chunks 0..t-1 and the resulting set serves chunk t+1.
    """

    def __init__(
        self,
        params: Params,
        config: ModelConfig,
        offload: bool = False,
        tier_path: str | os.PathLike | None = None,
        record_logits: bool = False,
    ):
        self.config = config
        self.params = {n: p.detach().to(config.torch_dtype) for n, p in params.items()}
        self.offload = offload
        self.retrieving = config.n_layers > 0 and config.use_retrieval
        keep = not (config.variant == "embedding" and config.reencode)
        self.store = ChunkStore(config.d_model, config.chunk_size, config.torch_dtype, offload, tier_path, keep)
        n_caches = config.n_layers
        self.caches = [_WindowCache(config.window) for _ in range(n_caches)]
        self.tokens: list[int] = []
        self.chunk_rows: list[torch.Tensor] = []  # encoder inputs of the open chunk
        empty = _ActiveSet(RetrievalSet([], [], []))
        self.active = [empty for _ in range(config.n_groups if config.n_layers else 0)]
        self.pending: list[_ActiveSet] = []
        self.history: list[list[RetrievalSet]] = []  # per completed chunk, per group
        self.refresh_count = 0
        self.last_logits: torch.Tensor | None = None
        self.record_logits = record_logits
        self.logits: list[torch.Tensor] = []
        self.slopes = decoder_slopes(config)

    # -- bookkeeping ---------------------------------------------------------

    @property
    def position(self) -> int:
        return len(self.tokens)

    @property
    def n_chunks(self) -> int:
        return len(self.store)

    def kv_lengths(self) -> list[int]:
        return [len(c) for c in self.caches]

    def resident_bytes(self) -> dict[str, int]:
        parts = {
            "landmarks": self.store.landmark_bytes(),
            "chunk_states": self.store.resident_bytes() - self.store.landmark_bytes(),
            "active_sets": sum(a.nbytes() for a in self.active),
            "kv_cache": sum(c.nbytes() for c in self.caches),
        }
        parts["total"] = sum(parts.values())
        return parts

    # -- layers --------------------------------------------------------------

    def _self_attention(self, x: torch.Tensor, prefix: str, cache: _WindowCache) -> torch.Tensor:
        cfg, p = self.config, self.params
        n = x.shape[0]
        q = _split_heads(x @ p[f"{prefix}.wq"].T, cfg.n_heads)
        k = _split_heads(x @ p[f"{prefix}.wk"].T, cfg.n_heads)
        v = _split_heads(x @ p[f"{prefix}.wv"].T, cfg.n_heads)
        c = len(cache)
        kk = k if cache.k is None else torch.cat([cache.k, k], dim=-2)
        vv = v if cache.v is None else torch.cat([cache.v, v], dim=-2)
        dist = torch.arange(n)[:, None] + c - torch.arange(c + n)[None, :]
        allowed = (dist >= 0) & (dist < cfg.window)
        # double accumulation, as in the batched kernel
        s = q.to(torch.float64) @ kk.to(torch.float64).transpose(-1, -2) / math.sqrt(cfg.head_dim)
        if self.slopes is not None:
            s = s - self.slopes.to(torch.float64).view(-1, 1, 1) * dist.to(torch.float64)
        s = s.masked_fill(~allowed, -math.inf)
        o = (torch.softmax(s, dim=-1) @ vv.to(torch.float64)).to(x.dtype)
        cache.extend(k, v)
        return _merge_heads(o) @ p[f"{prefix}.wo"].T

    def _layer_sa(self, x: torch.Tensor, prefix: str, cache: _WindowCache) -> torch.Tensor:
        return x + self._self_attention(rms_norm(x, self.params[f"{prefix}.attn_norm"]), prefix, cache)

    def _layer_ffn(self, x: torch.Tensor, prefix: str) -> torch.Tensor:
        return x + ffn(rms_norm(x, self.params[f"{prefix}.ffn_norm"]), self.params, prefix)

    def _gca(self, x: torch.Tensor, li: int, active: _ActiveSet) -> torch.Tensor:
        gain = self.params[f"upper.{li}.gca_norm"]
        if not self.retrieving or active.keys is None:
            return rms_norm(x, gain)
        o = gca_output(x, active.keys, active.values, active.weights, self.params, li, self.config)
        return rms_norm(x + o, gain)

    # -- chunk lifecycle -----------------------------------------------------

    def _encode_completed_chunk(self) -> None:
        cfg = self.config
        rows = torch.stack(self.chunk_rows) if cfg.variant == "lower" else self._embed_rows(self.tokens[-cfg.stride :])
        enc = encode_chunks(rows, self.params, cfg)
        start = self.position - cfg.stride
        states = enc.chunk_states if self.store.keep_states else None
        self.store.append(enc.landmark, states, start)
        self.chunk_rows = []

    def _embed_rows(self, ids: list[int]) -> torch.Tensor:
        return self.params["embed"][torch.tensor(ids)]

    def _chunk_states(self, indices: list[int]) -> list[torch.Tensor]:
        if self.store.keep_states:
            return self.store.restore_chunks(indices)
        # re-encode from the stored token positions
        cfg, out = self.config, []
        for k in indices:
            start = self.store.positions[k]
            rows = self._embed_rows(self.tokens[start : start + cfg.stride])
            out.append(encode_chunks(rows, self.params, cfg).chunk_states)
        return out

    def _retrieve(self, h_lmk: torch.Tensor) -> _ActiveSet:
        cfg = self.config
        t = self.n_chunks - 1  # the chunk whose landmark is h_lmk
        cands = self.store.landmark_matrix()[:t]
        scores = relevance_scores(h_lmk, cands)
        idx = gumbel_topk(scores, cfg.top_k, training=False)
        self.refresh_count += 1
        if not idx:
            return _ActiveSet(RetrievalSet([], [], []))
        raw = scores[idx]
        w = fusion_weights(raw)
        rs = RetrievalSet(idx, raw.tolist(), w.tolist())
        states = self._chunk_states(idx)
        k, v = project_chunk_kv(torch.stack(states), self.params, cfg)  # (K, H, S, d_h)
        return _ActiveSet(rs, k.transpose(0, 1), v.transpose(0, 1), w)

    # -- driving -------------------------------------------------------------

    def _advance(self, ids: list[int]) -> torch.Tensor:
        """Run positions that all belong to the open chunk; returns their logits."""
        cfg, p = self.config, self.params
        if self.position + len(ids) > cfg.max_len:
            raise ContractError(f"context of {self.position + len(ids)} positions exceeds max_len={cfg.max_len}")
        base = self.position
        closes = (base + len(ids)) % cfg.stride == 0
        self.tokens.extend(ids)
        x = p["embed"][torch.tensor(ids)]
        for i in range(cfg.n_lower):
            x = self._layer_sa(x, f"lower.{i}", self.caches[i])
            x = self._layer_ffn(x, f"lower.{i}")
        if self.retrieving:
            self.chunk_rows.extend(x)
            if closes:
                self._encode_completed_chunk()
        pending = []
        for g in range(len(self.active)):
            if closes and self.retrieving:
                pending.append(self._retrieve(x[-1]))
            for li in range(g * cfg.layers_per_group, (g + 1) * cfg.layers_per_group):
                pre = f"upper.{li}"
                x = self._layer_sa(x, pre, self.caches[cfg.n_lower + li])
                x = self._gca(x, li, self.active[g])
                x = self._layer_ffn(x, pre)
        if closes and self.retrieving:
            self.active = pending
            self.history.append([a.retrieval for a in pending])
        elif closes:
            self.history.append([])
        logits = rms_norm(x, p["final_norm"]) @ p["head"].T
        self.last_logits = logits[-1]
        if self.record_logits:
            self.logits.append(logits)
        return logits

    def feed(self, ids: list[int]) -> None:
        """Consume laid-out ids, splitting at chunk boundaries."""
        cfg = self.config
        i = 0
        while i < len(ids):
            room = cfg.stride - self.position % cfg.stride
            block = list(ids[i : i + room])
            for j, tok in enumerate(block):
                is_lmk_slot = (self.position + j) % cfg.stride == cfg.chunk_size
                if is_lmk_slot != (tok == cfg.lmk_id):
                    raise ContractError(f"position {self.position + j}: landmark layout violated")
            self._advance(block)
            i += len(block)

    def append_token(self, tok: int) -> None:
        """Append one content token, closing the chunk with a landmark when full."""
        if tok == self.config.lmk_id:
            raise ContractError("landmarks are inserted automatically")
        self.feed([tok])
        if self.position % self.config.stride == self.config.chunk_size:
            self.feed([self.config.lmk_id])

    def all_logits(self) -> torch.Tensor:
        if not self.logits:
            return torch.zeros(0, self.config.vocab_size, dtype=self.config.torch_dtype)
        return torch.cat(self.logits)

    def close(self) -> None:
        self.store.tier.close()


def prefill(
    prompt: list[int],
    params: Params,
    config: ModelConfig,
    offload: bool = False,
    record_logits: bool = False,
    tier_path: str | os.PathLike | None = None,
) -> Session:
    """Session primed with a laid-out prompt (landmark after every S content ids)."""
    if len(prompt) > config.max_len:
        raise ContractError(f"prompt of {len(prompt)} positions exceeds max_len={config.max_len}")
    sess = Session(params, config, offload, tier_path, record_logits)
    with torch.no_grad():
        sess.feed(list(prompt))
    return sess


def content_vocab(config: ModelConfig) -> int:
    """Ids below this bound are ordinary tokens; the three above are reserved."""
    return config.lmk_id


def sample_next(logits: torch.Tensor | None, sampling: SamplingParams, config: ModelConfig, rng: torch.Generator | None):
    """Pick a content id; the reserved ids are never emitted.

    Without any logits (empty history) the prediction is uniform.
    """
    v = content_vocab(config)
    scores = torch.zeros(v, dtype=torch.float64) if logits is None else logits[:v].to(torch.float64)
    if sampling.mode == "greedy":
        return int(torch.argmax(scores))
    probs = torch.softmax(scores / sampling.temperature, dim=-1)
    return int(torch.multinomial(probs, 1, generator=rng))


def decode_step(session: Session, sampling: SamplingParams, rng: torch.Generator | None = None) -> int:
    tok = sample_next(session.last_logits, sampling, session.config, rng)
    with torch.no_grad():
        session.append_token(tok)
    return tok


def generate(session: Session, sampling: SamplingParams) -> list[int]:
    rng = torch.Generator().manual_seed(sampling.seed)
    return [decode_step(session, sampling, rng) for _ in range(sampling.max_new_tokens)]


def lay_out_prefix(content: list[int], config: ModelConfig) -> list[int]:
    """Insert a landmark after every complete chunk of ``content``."""
    out = []
    for i, tok in enumerate(content):
        out.append(int(tok))
        if (i + 1) % config.chunk_size == 0:
            out.append(config.lmk_id)
    return out


# --------------------------------------------------------------------------
# evaluation


@dataclass
class EvalResult:
    nll_sum: float
    n_tokens: int
    probe_nll_sum: float = 0.0
    n_probes: int = 0

    @property
    def ppl(self) -> float:
        return math.exp(self.nll_sum / self.n_tokens)

    @property
    def mean_nll(self) -> float:
        return self.nll_sum / self.n_tokens

    @property
    def probe_nll(self) -> float:
        return self.probe_nll_sum / self.n_probes if self.n_probes else math.nan


def evaluate(
    params: Params,
    config: ModelConfig,
    stream: TokenStream,
    eval_len: int,
    engine: str = "forward",
    offload: bool = False,
    batch_size: int = 1,
) -> EvalResult:
    """Teacher-forced NLL over non-landmark, non-PAD targets, window by window."""
    if engine not in ("forward", "session"):
        raise ConfigError(f"engine must be forward or session, got {engine!r}")
    windows = document_windows(stream, eval_len, config)
    res = EvalResult(0.0, 0)
    with torch.no_grad():
        for i in range(0, len(windows), batch_size):
            batch = collate(windows[i : i + batch_size], config)
            if engine == "forward":
                logits = forward(batch.tokens, params, config).logits
            else:
                rows = []
                for row in batch.tokens:
                    sess = prefill(row.tolist(), params, config, offload=offload, record_logits=True)
                    rows.append(sess.all_logits())
                    sess.close()
                logits = torch.stack(rows)
            nll = -F.log_softmax(logits.to(torch.float64), -1).gather(-1, batch.targets[..., None])[..., 0]
            res.nll_sum += float(nll[batch.loss_mask].sum())
            res.n_tokens += int(batch.loss_mask.sum())
            vm = batch.value_mask()
            res.probe_nll_sum += float(nll[vm].sum())
            res.n_probes += int(vm.sum())
    if res.n_tokens == 0:
        raise ContractError("evaluation set has no scored positions")
    return res


def perplexity(
    params: Params,
    config: ModelConfig,
    stream: TokenStream,
    eval_len: int,
    engine: str = "forward",
    offload: bool = False,
) -> float:
    """exp(mean NLL) over content positions, teacher-forced."""
    if eval_len % config.chunk_size:
        raise ConfigError(f"eval_len={eval_len} must be a multiple of chunk_size={config.chunk_size}")
    return evaluate(params, config, stream, eval_len, engine, offload).ppl


# --------------------------------------------------------------------------
# cost model


def attention_op_count(config: ModelConfig, length: int) -> float:
    """Predicted attention multiply-accumulates for ``length`` content tokens.

    retrieval: G (L/S)^2 d, one MAC per score coordinate over the full
    chunk-by-chunk matrix;
    GCA: c (N/2) L K S d;
    self-attention: c N L min(L, W) d;
    with c = 2 (S+1)/S, covering the QK and PV products and the landmark
    row that every S content tokens add.
    """
    if length % config.chunk_size:
        raise ConfigError(f"L={length} must be a multiple of chunk_size={config.chunk_size}")
    s, d, n, w = config.chunk_size, config.d_model, config.n_layers, config.window
    g = config.n_groups if (n and config.use_retrieval) else 0
    k = config.top_k if (n and config.use_retrieval) else 0
    c = 2 * (s + 1) / s
    return g * (length / s) ** 2 * d + c * (n / 2) * length * k * s * d + c * n * length * min(length, w) * d


def predicted_resident_bytes(config: ModelConfig, length: int, offload: bool) -> dict[str, int]:
    """Resident bytes the session should hold after ``length`` content tokens.

    Landmarks take L d / S scalars; each of the G active sets holds the
    projected keys and values of K retrieved chunks; each self-attention
    layer caches W keys and values.
    """
    item = torch.tensor([], dtype=config.torch_dtype).element_size()
    s, d = config.chunk_size, config.d_model
    n_c = length // s
    k_live = min(config.top_k, max(0, n_c - 1)) if config.use_retrieval and config.n_layers else 0
    g = config.n_groups if config.n_layers else 0
    per_chunk = 2 * s * d
    laid = n_c * config.stride
    return {
        "landmarks": n_c * d * item,
        "chunk_states": 0 if offload else n_c * s * d * item,
        "active_sets": g * k_live * per_chunk * item,
        "kv_cache": config.n_layers * min(laid, config.window) * 2 * d * item,
    }
