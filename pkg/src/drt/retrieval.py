"""Causal chunk retrieval.

Chunk ids are 0-based here: chunk ``t`` may only retrieve chunks ``0..t-1``.
The retrieval set computed at chunk ``t`` is consumed by chunk ``t + 1``.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import torch

from . import opcount
from .errors import ContractError


@dataclass(frozen=True)
class GroupSpec:
    n_layers: int
    n_groups: int

    def __post_init__(self) -> None:
        if self.n_layers % 2:
            raise ContractError(f"layer count must be even, got {self.n_layers}")
        if self.n_groups < 1 or (self.n_layers // 2) % self.n_groups:
            raise ContractError(f"{self.n_layers // 2} upper layers cannot form {self.n_groups} groups")

    @property
    def layers_per_group(self) -> int:
        return self.n_layers // (2 * self.n_groups)


def group_of_layer(layer: int, spec: GroupSpec) -> int:
    """1-based group index of a 1-based upper layer index: ceil((l - N/2) / (N/2G))."""
    half = spec.n_layers // 2
    if not half < layer <= spec.n_layers:
        raise ContractError(f"layer {layer} is not an upper layer of a {spec.n_layers}-layer stack")
    # integer form of the ceiling avoids float rounding
    return -(-(layer - half) // spec.layers_per_group)


@dataclass
class RetrievalSet:
    """Selection made at one chunk for one group."""

    indices: list[int]
    raw_scores: list[float]
    weights: list[float]


def relevance_scores(h: torch.Tensor, landmarks: list[torch.Tensor] | torch.Tensor) -> torch.Tensor:
    """Scaled dot products h . l_k / sqrt(d) against every past landmark."""
    d = h.shape[-1]
    if isinstance(landmarks, list):
        if not landmarks:
            return h.new_zeros(0)
        landmarks = torch.stack(landmarks)
    if landmarks.numel() == 0:
        return h.new_zeros(0)
    if landmarks.shape[-1] != d or h.dim() != 1:
        raise ContractError(f"query of shape {tuple(h.shape)} vs landmarks {tuple(landmarks.shape)}")
    return landmarks @ h / math.sqrt(d)


def gumbel_noise(shape, generator: torch.Generator | None, dtype=torch.float64) -> torch.Tensor:
    u = torch.rand(shape, generator=generator, dtype=torch.float64)
    u = u.clamp(1e-12, 1.0 - 1e-12)
    return (-torch.log(-torch.log(u))).to(dtype)


def _rank(keys: torch.Tensor) -> torch.Tensor:
    # descending with ties resolved toward the lower chunk id
    return torch.sort(keys, dim=-1, descending=True, stable=True).indices


def sample_topk(
    scores: torch.Tensor,
    k: int,
    training: bool,
    generator: torch.Generator | None = None,
    temperature: float = 1.0,
) -> torch.Tensor:
    """Vectorized selection over the last dim of ``scores``: (..., n) -> (..., min(k, n))."""
    if k < 1:
        raise ContractError("k must be >= 1")
    keys = scores.detach().to(torch.float64)
    if training:
        keys = keys + temperature * gumbel_noise(keys.shape, generator)
    return _rank(keys)[..., : min(k, scores.shape[-1])]


def gumbel_topk(
    scores: torch.Tensor,
    k: int,
    training: bool,
    generator: torch.Generator | None = None,
    temperature: float = 1.0,
) -> list[int]:
    """Indices of the selected past chunks, best first.

    In training mode Gumbel noise (scaled by ``temperature``) perturbs the
    ranking only; callers keep using the noise-free scores for weighting.
    Fewer than ``k`` candidates means all of them are returned.
    """
    if scores.numel() == 0:
        if k < 1:
            raise ContractError("k must be >= 1")
        return []
    return sample_topk(scores.reshape(-1), k, training, generator, temperature).tolist()


def fusion_weights(raw_scores: torch.Tensor) -> torch.Tensor:
    """Softmax over exactly the selected chunks' raw scores."""
    if raw_scores.numel() == 0:
        raise ContractError("fusion weights need at least one selected chunk")
    return torch.softmax(raw_scores, dim=-1)


def retrieve(
    h: torch.Tensor,
    landmarks: list[torch.Tensor] | torch.Tensor,
    k: int,
    training: bool = False,
    generator: torch.Generator | None = None,
    temperature: float = 1.0,
) -> RetrievalSet:
    """Score, select and weight past chunks for one (chunk, group)."""
    scores = relevance_scores(h, landmarks)
    idx = gumbel_topk(scores.detach(), k, training, generator, temperature)
    if not idx:
        return RetrievalSet([], [], [])
    raw = scores[idx]
    return RetrievalSet(idx, raw.tolist(), fusion_weights(raw).tolist())


@dataclass
class BatchedRetrieval:
    """Selections for every chunk of a batch, for one group.

    Row ``t`` holds the set computed at chunk ``t`` (serving chunk ``t + 1``).
    Slots beyond the number of available candidates have ``valid == False``
    and zero weight.
    """

    indices: torch.Tensor  # (B, n_chunks, K) long
    valid: torch.Tensor  # (B, n_chunks, K) bool
    raw_scores: torch.Tensor  # (B, n_chunks, K)
    weights: torch.Tensor  # (B, n_chunks, K)

    def as_set(self, b: int, t: int) -> RetrievalSet:
        m = self.valid[b, t]
        return RetrievalSet(
            self.indices[b, t][m].tolist(),
            self.raw_scores[b, t][m].tolist(),
            self.weights[b, t][m].tolist(),
        )


def batched_scores(h: torch.Tensor, landmarks: torch.Tensor) -> torch.Tensor:
    """(B, T, d) queries x (B, T, d) landmarks -> (B, T, T), -inf where k >= t."""
    b, t, d = h.shape
    scores = h @ landmarks.transpose(-1, -2) / math.sqrt(d)
    causal = torch.ones(t, t, dtype=torch.bool).tril(-1)
    if opcount.enabled():
        opcount.add("retrieval", b * t * t * d)
    return scores.masked_fill(~causal, -math.inf)


def select_batched(
    scores: torch.Tensor,
    k: int,
    training: bool,
    generator: torch.Generator | None = None,
    temperature: float = 1.0,
    forced: torch.Tensor | None = None,
) -> tuple[torch.Tensor, torch.Tensor]:
    """Top-k over the last dim of causally masked scores.

    Returns ``(indices, valid)``. ``forced`` overrides the selection with
    externally supplied indices (used to hold retrieval fixed in tests).
    """
    b, t, _ = scores.shape
    n_avail = torch.arange(t).clamp(max=k)  # chunk t has t candidates
    valid = torch.arange(k)[None, :] < n_avail[:, None]
    valid = valid.expand(b, t, k)
    if forced is not None:
        return forced.clone(), valid.clone()
    keys = scores.detach().to(torch.float64)
    if training:
        keys = keys + temperature * gumbel_noise(keys.shape, generator)
        keys = keys.masked_fill(torch.isinf(scores), -math.inf)
    order = _rank(keys)
    if order.shape[-1] < k:
        order = torch.nn.functional.pad(order, (0, k - order.shape[-1]))
    idx = order[..., :k].clone()
    idx = idx.masked_fill(~valid, 0)
    return idx, valid.clone()


def masked_fusion_weights(raw: torch.Tensor, valid: torch.Tensor) -> torch.Tensor:
    """Softmax over valid slots; rows with no valid slot get all-zero weights."""
    logits = raw.masked_fill(~valid, -math.inf)
    any_valid = valid.any(-1, keepdim=True)
    logits = torch.where(any_valid, logits, torch.zeros_like(logits))
    w = torch.softmax(logits, dim=-1)
    return torch.where(valid, w, torch.zeros_like(w))
