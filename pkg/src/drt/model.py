"""The differentiable retrieval-based transformer.

Parameters live in a flat ``dict[str, Tensor]`` and every network piece is a
plain function of (inputs, params, config). Layout of one forward pass:

* ``N/2`` lower decoder layers: sliding-window causal self-attention with
  per-head linear position bias, SwiGLU FFN, pre-RMSNorm.
* a bidirectional in-chunk encoder fed with the lower-stack output (or with
  token embeddings for the ``embedding`` variant), giving per-chunk token
  states ``C_k`` (S x d, landmark excluded) and landmark vectors ``l_k``.
* ``N/2`` upper layers in ``G`` groups. At the first layer of each group the
  landmark state of every chunk scores all earlier encoder landmarks, picks
  top-k and softmaxes the raw scores of the picks. Each upper layer runs
  self-attention, then grouped cross-attention onto the picked chunks of the
  previous chunk's selection, ``H <- RMSNorm(H + O)``, then the FFN.
"""

from __future__ import annotations

import math
from dataclasses import asdict, dataclass, field, fields

import torch
import torch.nn.functional as F

from . import opcount
from .errors import ConfigError, ContractError
from .kernels import BlockSpec, alibi_slopes, banded_window_attention, flash_gca, flash_gca_backward
from .retrieval import BatchedRetrieval, RetrievalSet, batched_scores, masked_fusion_weights, select_batched

Params = dict[str, torch.Tensor]

VARIANTS = ("lower", "embedding")


@dataclass
class ModelConfig:
    vocab_size: int = 259
    d_model: int = 128
    n_heads: int = 4
    n_layers: int = 8
    n_groups: int = 2
    chunk_size: int = 16
    window: int = 64
    top_k: int = 4
    ffn_dim: int = 256
    encoder_layers: int = 1
    variant: str = "lower"
    use_encoder: bool = True
    use_retrieval: bool = True
    use_gumbel: bool = True
    use_mlm_phase: bool = True
    gumbel_temperature: float = 1.0
    decoder_pos_bias: str = "alibi"
    max_len: int = 65536
    reencode: bool = False
    dtype: str = "float32"
    block_rows: int = 16
    block_cols: int = 16

    def __post_init__(self) -> None:
        self.validate()

    def validate(self) -> None:
        def bad(msg: str) -> None:
            raise ConfigError(msg)

        if self.vocab_size < 4:
            bad("vocab_size must leave room for the three special ids")
        if self.n_heads < 1 or self.d_model % self.n_heads:
            bad(f"d_model={self.d_model} is not divisible by n_heads={self.n_heads}")
        if self.n_layers < 0 or self.n_layers % 2:
            bad(f"n_layers must be even, got {self.n_layers}")
        if self.n_layers > 0 and (self.n_groups < 1 or (self.n_layers // 2) % self.n_groups):
            bad(f"{self.n_layers // 2} upper layers cannot be split into n_groups={self.n_groups}")
        if self.chunk_size < 1:
            bad("chunk_size must be >= 1")
        if self.window < self.chunk_size + 1:
            bad(f"window={self.window} must cover a whole chunk plus landmark ({self.chunk_size + 1})")
        if self.top_k < 1:
            bad("top_k must be >= 1")
        if self.variant not in VARIANTS:
            bad(f"variant must be one of {VARIANTS}, got {self.variant!r}")
        if self.decoder_pos_bias not in ("alibi", "none"):
            bad(f"decoder_pos_bias must be 'alibi' or 'none', got {self.decoder_pos_bias!r}")
        if self.dtype not in ("float32", "float64"):
            bad(f"dtype must be float32 or float64, got {self.dtype!r}")
        if self.reencode and self.variant != "embedding":
            bad("reencode requires variant=embedding")

    @property
    def head_dim(self) -> int:
        return self.d_model // self.n_heads

    @property
    def stride(self) -> int:
        return self.chunk_size + 1

    @property
    def lmk_id(self) -> int:
        return self.vocab_size - 3

    @property
    def mask_id(self) -> int:
        return self.vocab_size - 2

    @property
    def pad_id(self) -> int:
        return self.vocab_size - 1

    @property
    def n_lower(self) -> int:
        return self.n_layers // 2

    @property
    def layers_per_group(self) -> int:
        return self.n_lower // self.n_groups if self.n_groups else 0

    @property
    def n_encoder_layers(self) -> int:
        return self.encoder_layers if self.use_encoder else 0

    @property
    def torch_dtype(self) -> torch.dtype:
        return torch.float64 if self.dtype == "float64" else torch.float32

    @property
    def blocks(self) -> BlockSpec:
        return BlockSpec(self.block_rows, self.block_cols)

    def architecture(self) -> dict:
        """Fields that determine parameter shapes and the computation graph."""
        skip = {"max_len", "use_gumbel", "use_mlm_phase", "gumbel_temperature", "reencode", "block_rows", "block_cols"}
        return {k: v for k, v in asdict(self).items() if k not in skip}

    @classmethod
    def field_names(cls) -> list[str]:
        return [f.name for f in fields(cls)]


# --------------------------------------------------------------------------
# layout


@dataclass
class ChunkLayout:
    n_chunks: int
    stride: int
    landmark_positions: list[int]
    loss_mask: list[bool] = field(repr=False)


def insert_landmarks(tokens: list[int] | torch.Tensor, config: ModelConfig) -> tuple[list[int], ChunkLayout]:
    """Append the landmark id after every ``chunk_size`` content tokens."""
    toks = tokens.tolist() if isinstance(tokens, torch.Tensor) else list(tokens)
    s = config.chunk_size
    if len(toks) % s:
        raise ContractError(f"{len(toks)} tokens is not a multiple of chunk_size={s}")
    out: list[int] = []
    for i in range(0, len(toks), s):
        out.extend(toks[i : i + s])
        out.append(config.lmk_id)
    n_chunks = len(toks) // s
    return out, layout_for(n_chunks, config)


def layout_for(n_chunks: int, config: ModelConfig) -> ChunkLayout:
    stride = config.stride
    total = n_chunks * stride
    lmk = [c * stride + config.chunk_size for c in range(n_chunks)]
    lmk_set = set(lmk)
    mask = [(p + 1 < total) and (p + 1 not in lmk_set) for p in range(total)]
    return ChunkLayout(n_chunks, stride, lmk, mask)


# --------------------------------------------------------------------------
# parameters


def _layer_shapes(prefix: str, d: int, ffn: int) -> dict[str, tuple[int, ...]]:
    return {
        f"{prefix}.attn_norm": (d,),
        f"{prefix}.wq": (d, d),
        f"{prefix}.wk": (d, d),
        f"{prefix}.wv": (d, d),
        f"{prefix}.wo": (d, d),
        f"{prefix}.ffn_norm": (d,),
        f"{prefix}.w_gate": (ffn, d),
        f"{prefix}.w_up": (ffn, d),
        f"{prefix}.w_down": (d, ffn),
    }


def param_shapes(config: ModelConfig) -> dict[str, tuple[int, ...]]:
    d, v, ffn = config.d_model, config.vocab_size, config.ffn_dim
    shapes: dict[str, tuple[int, ...]] = {"embed": (v, d)}
    for i in range(config.n_lower):
        shapes.update(_layer_shapes(f"lower.{i}", d, ffn))
    for i in range(config.n_lower):
        shapes.update(_layer_shapes(f"upper.{i}", d, ffn))
        shapes[f"upper.{i}.gca_q"] = (d, d)
        shapes[f"upper.{i}.gca_norm"] = (d,)
    if config.n_layers:
        shapes["gca_k"] = (d, d)
        shapes["gca_v"] = (d, d)
        if config.n_encoder_layers:
            shapes["enc.pos"] = (config.stride, d)
            for i in range(config.n_encoder_layers):
                shapes.update(_layer_shapes(f"enc.{i}", d, ffn))
            shapes["enc.norm"] = (d,)
        shapes["mlm_head"] = (v, d)
    shapes["final_norm"] = (d,)
    shapes["head"] = (v, d)
    return shapes


def param_count(config: ModelConfig) -> int:
    """Closed form: each transformer layer holds 4d^2 + 3*d*ffn + 2d weights.

    embed + head: 2Vd; upper layers add d^2 + d (GCA query + norm) each;
    shared GCA K/V: 2d^2; encoder: (S+1)d + E*layer + d; MLM head: Vd;
    final norm: d.
    """
    d, v, f, n = config.d_model, config.vocab_size, config.ffn_dim, config.n_layers
    per_layer = 4 * d * d + 3 * d * f + 2 * d
    total = 2 * v * d + d + n * per_layer + (n // 2) * (d * d + d)
    if n:
        total += 2 * d * d + v * d
        e = config.n_encoder_layers
        if e:
            total += config.stride * d + e * per_layer + d
    return total


def is_gain(name: str) -> bool:
    return name.endswith("norm")


def init_params(config: ModelConfig, seed: int = 0, std: float = 0.02) -> Params:
    """Normal(0, std) for every matrix and table (std 0.02 by default), ones for norm gains."""
    gen = torch.Generator().manual_seed(seed)
    params: Params = {}
    for name, shape in param_shapes(config).items():
        if is_gain(name):
            t = torch.ones(shape, dtype=torch.float64)
        else:
            t = torch.randn(shape, generator=gen, dtype=torch.float64) * std
        params[name] = t.to(config.torch_dtype)
    return params


# --------------------------------------------------------------------------
# building blocks


def rms_norm(x: torch.Tensor, gain: torch.Tensor, eps: float = 1e-6) -> torch.Tensor:
    return x * torch.rsqrt(x.pow(2).mean(-1, keepdim=True) + eps) * gain


def ffn(x: torch.Tensor, p: Params, prefix: str) -> torch.Tensor:
    return (F.silu(x @ p[f"{prefix}.w_gate"].T) * (x @ p[f"{prefix}.w_up"].T)) @ p[f"{prefix}.w_down"].T


def _split_heads(x: torch.Tensor, n_heads: int) -> torch.Tensor:
    *lead, t, d = x.shape
    return x.view(*lead, t, n_heads, d // n_heads).transpose(-2, -3)


def _merge_heads(x: torch.Tensor) -> torch.Tensor:
    *lead, h, t, dh = x.shape
    return x.transpose(-2, -3).reshape(*lead, t, h * dh)


def decoder_slopes(config: ModelConfig) -> torch.Tensor | None:
    if config.decoder_pos_bias == "none":
        return None
    return alibi_slopes(config.n_heads)


def self_attention(x: torch.Tensor, p: Params, prefix: str, config: ModelConfig) -> torch.Tensor:
    """Causal sliding-window attention over (B, T, d) inputs."""
    q = _split_heads(x @ p[f"{prefix}.wq"].T, config.n_heads)
    k = _split_heads(x @ p[f"{prefix}.wk"].T, config.n_heads)
    v = _split_heads(x @ p[f"{prefix}.wv"].T, config.n_heads)
    o = banded_window_attention(q, k, v, config.window, decoder_slopes(config))
    return _merge_heads(o) @ p[f"{prefix}.wo"].T


def decoder_layer_sa(x: torch.Tensor, p: Params, prefix: str, config: ModelConfig) -> torch.Tensor:
    return x + self_attention(rms_norm(x, p[f"{prefix}.attn_norm"]), p, prefix, config)


def decoder_layer_ffn(x: torch.Tensor, p: Params, prefix: str) -> torch.Tensor:
    return x + ffn(rms_norm(x, p[f"{prefix}.ffn_norm"]), p, prefix)


def _encoder_attention(x: torch.Tensor, p: Params, prefix: str, config: ModelConfig) -> torch.Tensor:
    q = _split_heads(x @ p[f"{prefix}.wq"].T, config.n_heads)
    k = _split_heads(x @ p[f"{prefix}.wk"].T, config.n_heads)
    v = _split_heads(x @ p[f"{prefix}.wv"].T, config.n_heads)
    s = q @ k.transpose(-1, -2) / math.sqrt(config.head_dim)
    o = torch.softmax(s, dim=-1) @ v
    if opcount.enabled():
        n = x.shape[-2]
        opcount.add("encoder", 2 * (x.numel() // x.shape[-1]) * n * config.d_model)
    return _merge_heads(o) @ p[f"{prefix}.wo"].T


@dataclass
class EncoderOutput:
    chunk_states: torch.Tensor  # (..., S, d): C_k
    landmark: torch.Tensor  # (..., d): l_k


def encode_chunks(chunk_inputs: torch.Tensor, params: Params, config: ModelConfig) -> EncoderOutput:
    """Bidirectional encoding of each (S+1, d) chunk independently.

    ``chunk_inputs`` is (..., S+1, d); the last row is the landmark. With no
    encoder layers the inputs pass through unchanged.
    """
    if chunk_inputs.shape[-2] != config.stride:
        raise ContractError(f"chunk inputs need {config.stride} rows, got {chunk_inputs.shape[-2]}")
    x = chunk_inputs
    if config.n_encoder_layers:
        x = x + params["enc.pos"]
        for i in range(config.n_encoder_layers):
            pre = f"enc.{i}"
            x = x + _encoder_attention(rms_norm(x, params[f"{pre}.attn_norm"]), params, pre, config)
            x = x + ffn(rms_norm(x, params[f"{pre}.ffn_norm"]), params, pre)
        x = rms_norm(x, params["enc.norm"])
    s = config.chunk_size
    return EncoderOutput(x[..., :s, :], x[..., s, :])


def project_chunk_kv(chunk_states: torch.Tensor, params: Params, config: ModelConfig) -> tuple[torch.Tensor, torch.Tensor]:
    """Layer-shared GCA key/value projections: (..., S, d) -> (..., H, S, d_h) each."""
    k = _split_heads(chunk_states @ params["gca_k"].T, config.n_heads)
    v = _split_heads(chunk_states @ params["gca_v"].T, config.n_heads)
    return k, v


def gca_output(
    h: torch.Tensor,
    keys: torch.Tensor,
    values: torch.Tensor,
    weights: torch.Tensor,
    params: Params,
    upper_idx: int,
    config: ModelConfig,
    backward_impl=flash_gca_backward,
) -> torch.Tensor:
    """Fused cross-attention output O for query rows ``h`` (..., n, d).

    ``keys``/``values`` are (..., H, K, S, d_h), ``weights`` is (..., K).
    """
    q = _split_heads(h @ params[f"upper.{upper_idx}.gca_q"].T, config.n_heads)  # (..., H, n, d_h)
    w = weights.unsqueeze(-2).expand(*weights.shape[:-1], config.n_heads, weights.shape[-1])
    o = flash_gca(q, keys, values, w, config.blocks, backward_impl)
    return _merge_heads(o)


def upper_layer_forward(
    h: torch.Tensor,
    retrieval: RetrievalSet,
    chunk_outputs: list[EncoderOutput],
    params: Params,
    upper_idx: int,
    config: ModelConfig,
    chunk_index: int | None = None,
) -> torch.Tensor:
    """GCA sub-layer for the rows ``h`` (n x d) of one chunk: RMSNorm(H + O).

    ``retrieval`` is the set computed at the previous chunk; when
    ``chunk_index`` (0-based index of the chunk ``h`` belongs to) is given,
    every retrieved index must precede the chunk that computed the set.
    """
    gain = params[f"upper.{upper_idx}.gca_norm"]
    if not retrieval.indices:
        return rms_norm(h, gain)
    if chunk_index is not None and any(i >= chunk_index - 1 for i in retrieval.indices):
        raise ContractError(f"retrieval {retrieval.indices} breaches causality for chunk {chunk_index}")
    states = torch.stack([chunk_outputs[i].chunk_states for i in retrieval.indices])  # (K, S, d)
    k, v = project_chunk_kv(states, params, config)  # (K, H, S, d_h)
    w = torch.tensor(retrieval.weights, dtype=h.dtype)
    o = gca_output(h, k.transpose(0, 1), v.transpose(0, 1), w, params, upper_idx, config)
    return rms_norm(h + o, gain)


# --------------------------------------------------------------------------
# full forward


@dataclass
class ForwardOut:
    logits: torch.Tensor  # (B, T, V)
    retrieval: list[BatchedRetrieval]  # one per group
    encoder: EncoderOutput | None
    mlm_logits: torch.Tensor | None = None  # (n_masked, V)
    mlm_targets: torch.Tensor | None = None  # (n_masked,)


def _shift_to_next_chunk(x: torch.Tensor, fill) -> torch.Tensor:
    """Row t of the result holds row t-1 of ``x`` (row 0 gets ``fill``)."""
    first = torch.full_like(x[:, :1], fill)
    return torch.cat([first, x[:, :-1]], dim=1)


def forward(
    tokens: torch.Tensor,
    params: Params,
    config: ModelConfig,
    mode: str = "eval",
    rng: torch.Generator | None = None,
    mlm_mask: torch.Tensor | None = None,
    forced_selection: list[torch.Tensor] | None = None,
    gca_backward=flash_gca_backward,
) -> ForwardOut:
    """Run the network on laid-out ids (B, T) with T a multiple of S+1.

    ``mlm_mask`` (B, T) marks content positions whose encoder input is
    replaced by the mask id; the decoder stream is never masked.
    ``forced_selection`` gives per-group (B, n_chunks, K) indices to use
    instead of top-k.
    """
    if mode not in ("train", "eval"):
        raise ContractError(f"mode must be train or eval, got {mode!r}")
    if tokens.dim() == 1:
        tokens = tokens[None]
    b, t = tokens.shape
    if t % config.stride:
        raise ContractError(f"length {t} is not a multiple of the chunk stride {config.stride}")
    if t > config.max_len:
        raise ContractError(f"sequence of {t} positions exceeds max_len={config.max_len}")
    n_c = t // config.stride
    s, d = config.chunk_size, config.d_model
    emb = params["embed"]
    x = emb[tokens]

    def lower_stack(h: torch.Tensor) -> torch.Tensor:
        for i in range(config.n_lower):
            h = decoder_layer_sa(h, params, f"lower.{i}", config)
            h = decoder_layer_ffn(h, params, f"lower.{i}")
        return h

    x = lower_stack(x)
    retrievals: list[BatchedRetrieval] = []
    enc: EncoderOutput | None = None
    mlm_logits = mlm_targets = None
    retrieving = config.n_layers > 0 and config.use_retrieval

    if retrieving:
        if mlm_mask is not None:
            masked_tokens = tokens.masked_fill(mlm_mask, config.mask_id)
            enc_in = emb[masked_tokens] if config.variant == "embedding" else lower_stack(emb[masked_tokens])
        else:
            enc_in = emb[tokens] if config.variant == "embedding" else x
        enc = encode_chunks(enc_in.view(b, n_c, config.stride, d), params, config)
        if mlm_mask is not None:
            content = mlm_mask.view(b, n_c, config.stride)[..., :s]
            mlm_logits = enc.chunk_states[content] @ params["mlm_head"].T
            mlm_targets = tokens.view(b, n_c, config.stride)[..., :s][content]
        chunk_k, chunk_v = project_chunk_kv(enc.chunk_states, params, config)  # (B, n_c, H, S, d_h)

    training = mode == "train" and config.use_gumbel
    k_sel = config.top_k
    for g in range(config.n_groups if config.n_layers else 0):
        if retrieving:
            h_lmk = x.view(b, n_c, config.stride, d)[:, :, s, :]
            scores = batched_scores(h_lmk, enc.landmark)
            forced = forced_selection[g] if forced_selection is not None else None
            idx, valid = select_batched(scores, k_sel, training, rng, config.gumbel_temperature, forced)
            raw = torch.gather(scores, 2, idx)
            w = masked_fusion_weights(raw, valid)
            retrievals.append(BatchedRetrieval(idx, valid, raw.detach(), w.detach()))
            serve_idx = _shift_to_next_chunk(idx, 0)
            serve_w = _shift_to_next_chunk(w, 0.0)
            gather_at = serve_idx.view(b, n_c * k_sel)
            bi = torch.arange(b)[:, None]
            keys = chunk_k[bi, gather_at].view(b, n_c, k_sel, config.n_heads, s, config.head_dim).transpose(2, 3)
            values = chunk_v[bi, gather_at].view(b, n_c, k_sel, config.n_heads, s, config.head_dim).transpose(2, 3)
        for li in range(g * config.layers_per_group, (g + 1) * config.layers_per_group):
            pre = f"upper.{li}"
            x = decoder_layer_sa(x, params, pre, config)
            if retrieving:
                hc = x.view(b, n_c, config.stride, d)
                o = gca_output(hc, keys, values, serve_w, params, li, config, gca_backward)
                x = rms_norm(hc + o, params[f"{pre}.gca_norm"]).view(b, t, d)
            else:
                x = rms_norm(x, params[f"{pre}.gca_norm"])
            x = decoder_layer_ffn(x, params, pre)

    logits = rms_norm(x, params["final_norm"]) @ params["head"].T
    return ForwardOut(logits, retrievals, enc, mlm_logits, mlm_targets)
