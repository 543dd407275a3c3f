"""Objectives, optimizer/schedule, the train step, and gradient verification."""

from __future__ import annotations

import math
from dataclasses import dataclass, field, fields

import torch
import torch.nn.functional as F

from .errors import ConfigError, ContractError, TrainingError
from .kernels import BlockSpec, finite_difference_grad, flash_gca_backward, flash_gca_forward
from .model import ModelConfig, Params, forward, init_params, insert_landmarks, is_gain


@dataclass
class TrainConfig:
    base_lr: float = 2e-3
    final_lr: float = 4e-4
    warmup_frac: float = 0.02
    total_steps: int = 1000
    batch_size: int = 2
    context_len: int = 2048
    mlm_rate: float = 0.15
    mlm_phase_frac: float = 0.5
    weight_decay: float = 0.001
    beta1: float = 0.9
    beta2: float = 0.95
    grad_clip: float = 1.0
    seed: int = 0

    def __post_init__(self) -> None:
        if not 0 <= self.warmup_frac < 1:
            raise ConfigError("warmup_frac must be in [0, 1)")
        if not 0 <= self.mlm_phase_frac <= 1:
            raise ConfigError("mlm_phase_frac must be in [0, 1]")
        if self.base_lr < 0 or self.final_lr < 0 or self.final_lr > self.base_lr:
            raise ConfigError("need 0 <= final_lr <= base_lr")
        if self.total_steps < 1:
            raise ConfigError("total_steps must be >= 1")
        if not 0 < self.mlm_rate < 1:
            raise ConfigError("mlm_rate must be in (0, 1)")

    @property
    def batch_tokens(self) -> int:
        return self.batch_size * self.context_len

    @classmethod
    def field_names(cls) -> list[str]:
        return [f.name for f in fields(cls)]


# --------------------------------------------------------------------------
# losses


def autoregressive_loss(logits: torch.Tensor, targets: torch.Tensor, loss_mask: torch.Tensor) -> torch.Tensor:
    """Mean next-token NLL over positions where ``loss_mask`` is true."""
    if not bool(loss_mask.any()):
        raise ContractError("every position is masked out of the loss")
    return F.cross_entropy(logits[loss_mask], targets[loss_mask])


def shift_targets(tokens: torch.Tensor, pad_id: int) -> torch.Tensor:
    """targets[p] = tokens[p + 1]; the final position gets ``pad_id``."""
    return torch.cat([tokens[..., 1:], torch.full_like(tokens[..., :1], pad_id)], dim=-1)


def mlm_mask(
    tokens: torch.Tensor, rate: float, rng: torch.Generator | None, config: ModelConfig
) -> tuple[torch.Tensor, torch.Tensor]:
    """Mask each content position independently with probability ``rate``.

    Landmarks and padding are never masked. Returns ``(masked_ids, mask)``;
    ``masked_ids`` is only meant for the encoder input.
    """
    if not 0 < rate < 1:
        raise ContractError("mlm rate must be in (0, 1)")
    draw = torch.rand(tokens.shape, generator=rng, dtype=torch.float64) < rate
    maskable = (tokens != config.lmk_id) & (tokens != config.pad_id)
    mask = draw & maskable
    return tokens.masked_fill(mask, config.mask_id), mask


def mlm_loss(mlm_logits: torch.Tensor | None, targets: torch.Tensor | None) -> torch.Tensor:
    if mlm_logits is None or targets is None or targets.numel() == 0:
        return torch.zeros(())
    return F.cross_entropy(mlm_logits, targets)


def lr_schedule(step: int, config: TrainConfig) -> float:
    """Linear warmup to ``base_lr``, then cosine decay to ``final_lr``."""
    if not 0 <= step <= config.total_steps:
        raise ContractError(f"step {step} outside [0, {config.total_steps}]")
    warm = config.warmup_frac * config.total_steps
    if step < warm:
        return config.base_lr * step / warm
    span = config.total_steps - warm
    frac = (step - warm) / span if span > 0 else 1.0
    return config.final_lr + (config.base_lr - config.final_lr) * 0.5 * (1.0 + math.cos(math.pi * frac))


# --------------------------------------------------------------------------
# optimizer


def _decays(name: str) -> bool:
    return not (is_gain(name) or name == "embed" or name == "enc.pos")


@dataclass
class OptState:
    """AdamW moments (inside ``optimizer``) plus the step counter."""

    optimizer: torch.optim.AdamW
    names: list[str]
    step: int = 0

    def state_tensors(self) -> dict[str, torch.Tensor]:
        out = {}
        group_params = [p for g in self.optimizer.param_groups for p in g["params"]]
        by_id = {id(p): n for p, n in zip(group_params, self._ordered_names())}
        for p, st in self.optimizer.state.items():
            n = by_id[id(p)]
            out[f"{n}.exp_avg"] = st["exp_avg"]
            out[f"{n}.exp_avg_sq"] = st["exp_avg_sq"]
            out[f"{n}.step"] = torch.as_tensor(st["step"], dtype=torch.float64).reshape(1)
        return out

    def load_state_tensors(self, tensors: dict[str, torch.Tensor]) -> None:
        group_params = [p for g in self.optimizer.param_groups for p in g["params"]]
        for p, n in zip(group_params, self._ordered_names()):
            if f"{n}.exp_avg" not in tensors:
                continue
            self.optimizer.state[p] = {
                "step": tensors[f"{n}.step"].reshape(()).clone().to(torch.float32),
                "exp_avg": tensors[f"{n}.exp_avg"].clone(),
                "exp_avg_sq": tensors[f"{n}.exp_avg_sq"].clone(),
            }

    def _ordered_names(self) -> list[str]:
        return [n for n in self.names if _decays(n)] + [n for n in self.names if not _decays(n)]


def init_opt_state(params: Params, config: TrainConfig) -> OptState:
    for p in params.values():
        p.requires_grad_(True)
    names = list(params)
    decay = [params[n] for n in names if _decays(n)]
    no_decay = [params[n] for n in names if not _decays(n)]
    groups = [
        {"params": decay, "weight_decay": config.weight_decay},
        {"params": no_decay, "weight_decay": 0.0},
    ]
    opt = torch.optim.AdamW(groups, lr=config.base_lr, betas=(config.beta1, config.beta2), eps=1e-8, foreach=False)
    return OptState(opt, names)


# --------------------------------------------------------------------------
# train step


@dataclass
class TrainBatch:
    """Laid-out ids plus loss mask; ``value_targets`` marks recall probe positions."""

    tokens: torch.Tensor  # (B, T)
    loss_mask: torch.Tensor  # (B, T) bool, true where the target is scored
    probes: list[tuple[int, int, int]] = field(default_factory=list)  # (row, value_pos, def_chunk)


def step_generator(seed: int, step: int) -> torch.Generator:
    return torch.Generator().manual_seed((seed * 1_000_003 + step) % (2**63 - 1))


def mlm_active(step: int, model_cfg: ModelConfig, train_cfg: TrainConfig) -> bool:
    return (
        model_cfg.use_mlm_phase
        and model_cfg.use_retrieval
        and model_cfg.n_layers > 0
        and step < train_cfg.mlm_phase_frac * train_cfg.total_steps
    )


def retrieval_hits(out, probes: list[tuple[int, int, int]], config: ModelConfig) -> tuple[int, int, float]:
    """Count probes whose defining chunk is in the group-1 set serving the value position.

    Returns ``(hits, total, chance)`` where chance is the summed probability
    a uniformly random K-subset would contain the defining chunk.
    """
    if not out.retrieval or not probes:
        return 0, 0, 0.0
    r = out.retrieval[0]
    hits, chance = 0, 0.0
    for row, value_pos, def_chunk in probes:
        predictor_chunk = (value_pos - 1) // config.stride
        serving = predictor_chunk - 1
        if serving < 1:
            continue
        sel = r.indices[row, serving][r.valid[row, serving]].tolist()
        hits += int(def_chunk in sel)
        chance += min(1.0, config.top_k / serving)
    return hits, len(probes), chance


def train_step(
    batch: TrainBatch,
    params: Params,
    opt_state: OptState,
    step: int,
    train_cfg: TrainConfig,
    model_cfg: ModelConfig,
) -> dict:
    """One optimizer update. Deterministic given (seed, step)."""
    gen = step_generator(train_cfg.seed, step)
    use_mlm = mlm_active(step, model_cfg, train_cfg)
    mask = None
    if use_mlm:
        _, mask = mlm_mask(batch.tokens, train_cfg.mlm_rate, gen, model_cfg)
    out = forward(batch.tokens, params, model_cfg, mode="train", rng=gen, mlm_mask=mask)
    targets = shift_targets(batch.tokens, model_cfg.pad_id)
    ar = autoregressive_loss(out.logits, targets, batch.loss_mask)
    loss = ar
    metrics: dict = {"step": step, "ar_loss": float(ar.detach())}
    if use_mlm:
        ml = mlm_loss(out.mlm_logits, out.mlm_targets)
        loss = loss + ml
        metrics["mlm_loss"] = float(ml.detach())
    if not math.isfinite(float(loss.detach())):
        raise TrainingError(f"non-finite loss at step {step}: {metrics}")

    opt = opt_state.optimizer
    opt.zero_grad(set_to_none=True)
    loss.backward()
    plist = list(params.values())
    grad_norm = torch.nn.utils.clip_grad_norm_(plist, train_cfg.grad_clip if train_cfg.grad_clip > 0 else float("inf"))
    if not math.isfinite(float(grad_norm)):
        raise TrainingError(f"non-finite gradient norm at step {step}")
    lr = lr_schedule(min(step, train_cfg.total_steps), train_cfg)
    for g in opt.param_groups:
        g["lr"] = lr
    opt.step()
    opt_state.step = step + 1
    metrics["lr"] = lr
    metrics["grad_norm"] = float(grad_norm)
    if out.retrieval:
        w = out.retrieval[0].weights
        live = out.retrieval[0].valid.any(-1)
        if bool(live.any()):
            metrics["retrieval_max_weight"] = float(w.max(-1).values[live].mean())
    hits, total, chance = retrieval_hits(out, batch.probes, model_cfg)
    if total:
        metrics["retrieval_hit_rate"] = hits / total
        metrics["retrieval_chance_rate"] = chance / total
    return metrics


# --------------------------------------------------------------------------
# gradient verification


def _rel_err(analytic: torch.Tensor, numeric: torch.Tensor) -> tuple[float, tuple[int, ...]]:
    """max |a - n| / max(|a|_inf, |n|_inf), with the worst coordinate."""
    diff = (analytic - numeric).abs()
    denom = max(analytic.abs().max().item(), numeric.abs().max().item())
    flat = int(diff.argmax()) if diff.numel() else 0
    coord = tuple(int(c) for c in torch.unravel_index(torch.tensor(flat), diff.shape)) if diff.numel() else ()
    worst = diff.max().item() if diff.numel() else 0.0
    if denom == 0.0:
        return (0.0 if worst == 0.0 else math.inf), coord
    return worst / denom, coord


@dataclass
class GradCheckEntry:
    name: str
    rel_err: float
    worst_index: tuple[int, ...]
    passed: bool


@dataclass
class GradCheckReport:
    tolerance: float
    entries: list[GradCheckEntry]

    @property
    def passed(self) -> bool:
        return all(e.passed for e in self.entries)

    @property
    def failures(self) -> list[GradCheckEntry]:
        return [e for e in self.entries if not e.passed]

    def lines(self) -> list[str]:
        out = [
            f"{'PASS' if e.passed else 'FAIL'} {e.name} rel_err={e.rel_err:.3e} worst={list(e.worst_index)}"
            for e in self.entries
        ]
        out.append(f"{'PASS' if self.passed else 'FAIL'} overall (tolerance {self.tolerance:g})")
        return out


def tiny_check_config(**overrides) -> ModelConfig:
    base = dict(
        vocab_size=11, d_model=8, n_heads=2, n_layers=4, n_groups=1, chunk_size=4, window=16,
        top_k=2, ffn_dim=16, encoder_layers=1, dtype="float64", block_rows=2, block_cols=3,
    )
    base.update(overrides)
    return ModelConfig(**base)


def _check_entry(name, analytic, numeric, tolerance) -> GradCheckEntry:
    rel, coord = _rel_err(analytic, numeric)
    return GradCheckEntry(name, rel, coord, rel <= tolerance)


def kernel_grad_check(tolerance: float, seed: int = 0, gca_backward=flash_gca_backward) -> list[GradCheckEntry]:
    gen = torch.Generator().manual_seed(seed)
    n_q, n_kv, n_chunks, d = 3, 2, 2, 4
    q = torch.randn(n_q, d, generator=gen, dtype=torch.float64)
    k = torch.randn(n_chunks, n_kv, d, generator=gen, dtype=torch.float64)
    v = torch.randn(n_chunks, n_kv, d, generator=gen, dtype=torch.float64)
    w = torch.softmax(torch.randn(n_chunks, generator=gen, dtype=torch.float64), 0)
    d_out = torch.randn(n_q, d, generator=gen, dtype=torch.float64)
    blocks = BlockSpec(2, 1)
    res = flash_gca_forward(q, k, v, w, blocks)
    g = gca_backward(q, k, v, w, res.out_per_chunk, res.lse, d_out, blocks)
    inputs = {"q": q, "k": k, "v": v, "w": w}
    entries = []
    for field_name, analytic in (("dq", g.dq), ("dk", g.dk), ("dv", g.dv), ("dw", g.dw)):
        key = field_name[1]

        def f(x, key=key):
            args = dict(inputs)
            args[key] = x
            return float((flash_gca_forward(args["q"], args["k"], args["v"], args["w"], blocks).out * d_out).sum())

        entries.append(_check_entry(f"kernel.{field_name}", analytic, finite_difference_grad(f, inputs[key]), tolerance))
    return entries


def model_loss_fn(config: ModelConfig, tokens: torch.Tensor, loss_mask: torch.Tensor, gca_backward=flash_gca_backward):
    targets = shift_targets(tokens, config.pad_id)

    def loss(params: Params) -> torch.Tensor:
        out = forward(tokens, params, config, mode="eval", gca_backward=gca_backward)
        return autoregressive_loss(out.logits, targets, loss_mask)

    return loss


def check_batch(config: ModelConfig, n_chunks: int, seed: int) -> tuple[torch.Tensor, torch.Tensor]:
    gen = torch.Generator().manual_seed(seed + 1)
    content = torch.randint(0, config.lmk_id, (n_chunks * config.chunk_size,), generator=gen)
    ids, layout = insert_landmarks(content, config)
    return torch.tensor(ids)[None], torch.tensor(layout.loss_mask)[None]


def grad_check_suite(
    config: ModelConfig | None = None,
    tolerance: float = 1e-5,
    n_chunks: int = 3,
    seed: int = 0,
    eps: float = 1e-5,
    gca_backward=flash_gca_backward,
    include_kernel: bool = True,
    init_std: float = 0.3,
) -> GradCheckReport:
    """Finite-difference audit of the GCA kernel and of every model parameter tensor.

    Gumbel noise is off (eval mode) so the selection is deterministic.
    """
    config = config or tiny_check_config()
    if config.dtype != "float64":
        raise ContractError("gradient checks need float64 parameters")
    entries = kernel_grad_check(tolerance, seed, gca_backward) if include_kernel else []
    # weights well away from the tiny default init keep gradients far above FD rounding noise
    params = init_params(config, seed, std=init_std)
    tokens, loss_mask = check_batch(config, n_chunks, seed)
    loss_fn = model_loss_fn(config, tokens, loss_mask, gca_backward)
    leaves = {n: p.clone().requires_grad_(True) for n, p in params.items()}
    loss_fn(leaves).backward()
    with torch.no_grad():
        for name, p in params.items():
            analytic = leaves[name].grad if leaves[name].grad is not None else torch.zeros_like(p)

            def f(x, name=name):
                trial = dict(params)
                trial[name] = x
                return float(loss_fn(trial))

            numeric = finite_difference_grad(f, p, eps)
            entries.append(_check_entry(name, analytic, numeric, tolerance))
    return GradCheckReport(tolerance, entries)
