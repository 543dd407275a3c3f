import dataclasses
import math

import pytest
import torch
from hypothesis import given, settings, strategies as st

from drt.errors import ContractError
from drt.kernels import flash_gca_backward
from drt.model import ModelConfig, forward, init_params, insert_landmarks
from drt.training import (
    TrainBatch,
    TrainConfig,
    autoregressive_loss,
    grad_check_suite,
    init_opt_state,
    lr_schedule,
    mlm_active,
    mlm_loss,
    mlm_mask,
    shift_targets,
    step_generator,
    tiny_check_config,
    train_step,
)


def small(**kw) -> ModelConfig:
    base = dict(vocab_size=40, d_model=16, n_heads=2, n_layers=4, n_groups=1, chunk_size=4, window=8, top_k=2,
                ffn_dim=32)
    base.update(kw)
    return ModelConfig(**base)


def batch_for(cfg: ModelConfig, n_chunks: int = 4, rows: int = 2, seed: int = 0) -> TrainBatch:
    g = torch.Generator().manual_seed(seed)
    toks, masks = [], []
    for _ in range(rows):
        content = torch.randint(0, cfg.lmk_id, (n_chunks * cfg.chunk_size,), generator=g)
        ids, layout = insert_landmarks(content, cfg)
        toks.append(torch.tensor(ids))
        masks.append(torch.tensor(layout.loss_mask))
    return TrainBatch(torch.stack(toks), torch.stack(masks))


# -- losses -----------------------------------------------------------------------


def test_uniform_logits_loss_is_log_vocab():
    logits = torch.zeros(3, 5, 16)
    targets = torch.randint(0, 16, (3, 5))
    mask = torch.ones(3, 5, dtype=torch.bool)
    assert float(autoregressive_loss(logits, targets, mask)) == pytest.approx(math.log(16), abs=1e-6)


def test_confident_logits_loss_vanishes():
    targets = torch.tensor([[1, 2, 3]])
    logits = torch.nn.functional.one_hot(targets, 8).double() * 60
    assert float(autoregressive_loss(logits, targets, torch.ones(1, 3, dtype=torch.bool))) < 1e-20


def test_all_masked_is_an_error():
    with pytest.raises(ContractError):
        autoregressive_loss(torch.zeros(1, 2, 4), torch.zeros(1, 2, dtype=torch.long), torch.zeros(1, 2, dtype=torch.bool))


@settings(max_examples=30, deadline=None)
@given(st.integers(0, 10_000))
def test_loss_ignores_masked_positions(seed):
    g = torch.Generator().manual_seed(seed)
    logits = torch.randn(2, 6, 10, generator=g, dtype=torch.float64)
    targets = torch.randint(0, 10, (2, 6), generator=g)
    mask = torch.rand(2, 6, generator=g) < 0.5
    mask[0, 0] = True
    before = autoregressive_loss(logits, targets, mask)
    noisy = logits + (~mask)[..., None] * torch.randn(2, 6, 10, generator=g, dtype=torch.float64) * 100
    assert torch.equal(before, autoregressive_loss(noisy, targets, mask))


def test_landmark_targets_are_not_scored_in_model_loss():
    cfg = small()
    b = batch_for(cfg)
    targets = shift_targets(b.tokens, cfg.pad_id)
    assert not bool(b.loss_mask[targets == cfg.lmk_id].any())


def test_mlm_uniform_and_empty():
    assert float(mlm_loss(torch.zeros(7, 16), torch.randint(0, 16, (7,)))) == pytest.approx(math.log(16))
    assert float(mlm_loss(None, None)) == 0.0
    assert float(mlm_loss(torch.zeros(0, 16), torch.zeros(0, dtype=torch.long))) == 0.0


# -- MLM masking ------------------------------------------------------------------


def test_mlm_fraction():
    cfg = ModelConfig()
    content = torch.randint(0, 256, (100_000 // 16 * 16,), generator=torch.Generator().manual_seed(1))
    ids, _ = insert_landmarks(content, cfg)
    tokens = torch.tensor(ids)[None]
    masked, mask = mlm_mask(tokens, 0.15, torch.Generator().manual_seed(2), cfg)
    content_pos = tokens != cfg.lmk_id
    frac = float(mask[content_pos].double().mean())
    assert abs(frac - 0.15) <= 0.01
    assert not bool(mask[~content_pos].any())
    assert bool((masked[mask] == cfg.mask_id).all())
    assert torch.equal(masked[~mask], tokens[~mask])


def test_mlm_tiny_rate_masks_nothing_and_bad_rate_errors():
    cfg = small()
    tokens = batch_for(cfg).tokens
    _, mask = mlm_mask(tokens, 1e-12, torch.Generator().manual_seed(0), cfg)
    assert not bool(mask.any())
    with pytest.raises(ContractError):
        mlm_mask(tokens, 0.0, None, cfg)


def test_mlm_head_gets_no_gradient_into_output_head():
    cfg = small()
    params = {n: p.requires_grad_(True) for n, p in init_params(cfg, 0).items()}
    b = batch_for(cfg)
    _, mask = mlm_mask(b.tokens, 0.3, torch.Generator().manual_seed(0), cfg)
    out = forward(b.tokens, params, cfg, mlm_mask=mask)
    ml = mlm_loss(out.mlm_logits, out.mlm_targets)
    grads = torch.autograd.grad(ml, [params["head"], params["final_norm"], params["mlm_head"]], allow_unused=True)
    assert grads[0] is None or float(grads[0].abs().max()) == 0.0
    assert grads[1] is None or float(grads[1].abs().max()) == 0.0
    assert float(grads[2].abs().max()) > 0.0


def test_decoder_sees_unmasked_tokens():
    cfg = small()
    params = init_params(cfg, 1, std=0.2)
    b = batch_for(cfg)
    _, mask = mlm_mask(b.tokens, 0.3, torch.Generator().manual_seed(3), cfg)
    with torch.no_grad():
        plain = forward(b.tokens, params, cfg)
        with_mlm = forward(b.tokens, params, cfg, mlm_mask=mask)
    # the lower stack is untouched; only what the encoder feeds into GCA may change
    first_chunks = slice(0, 2 * cfg.stride)
    assert torch.allclose(plain.logits[:, first_chunks], with_mlm.logits[:, first_chunks], atol=1e-6)


# -- schedule ---------------------------------------------------------------------


def test_schedule_values():
    tc = TrainConfig(total_steps=1000)
    warm = int(tc.warmup_frac * tc.total_steps)
    assert lr_schedule(0, tc) == 0.0
    assert lr_schedule(warm, tc) == pytest.approx(2e-3, abs=1e-15)
    assert lr_schedule(1000, tc) == pytest.approx(4e-4, abs=1e-15)
    with pytest.raises(ContractError):
        lr_schedule(1001, tc)


@settings(max_examples=40, deadline=None)
@given(st.integers(10, 100_000), st.floats(0.01, 0.5))
def test_schedule_continuous_and_bounded(total, warm_frac):
    tc = TrainConfig(total_steps=total, warmup_frac=warm_frac)
    w = warm_frac * total
    assert abs(lr_schedule(math.nextafter(w, 0.0), tc) - lr_schedule(w, tc)) <= 1e-12
    for s in (0, total // 3, total):
        assert 0.0 <= lr_schedule(s, tc) <= tc.base_lr + 1e-15
    assert lr_schedule(total, tc) == pytest.approx(tc.final_lr, abs=1e-15)


# -- train step -------------------------------------------------------------------


def run_steps(cfg, tc, n, seed=0):
    params = init_params(cfg, seed)
    opt = init_opt_state(params, tc)
    metrics = []
    for step in range(n):
        metrics.append(train_step(batch_for(cfg, seed=step), params, opt, step, tc, cfg))
    return params, metrics


def test_train_step_is_deterministic():
    cfg, tc = small(), TrainConfig(total_steps=6, seed=3)
    a, ma = run_steps(cfg, tc, 4)
    b, mb = run_steps(cfg, tc, 4)
    assert all(torch.equal(a[n], b[n]) for n in a)
    assert ma == mb


def test_zero_lr_leaves_params_unchanged():
    cfg = small()
    tc = TrainConfig(total_steps=4, base_lr=0.0, final_lr=0.0)
    before = init_params(cfg, 0)
    after, _ = run_steps(cfg, tc, 2)
    assert all(torch.equal(before[n], after[n].detach()) for n in before)


def test_small_lr_step_descends():
    cfg = small(dtype="float64")
    tc = TrainConfig(total_steps=10, base_lr=1e-4, final_lr=1e-4, warmup_frac=0.0)
    cfg = dataclasses.replace(cfg, use_gumbel=False, use_mlm_phase=False)
    wins = 0
    trials = 20
    for seed in range(trials):
        params = init_params(cfg, seed)
        opt = init_opt_state(params, tc)
        b = batch_for(cfg, rows=1, seed=100 + seed)
        targets = shift_targets(b.tokens, cfg.pad_id)

        def loss():
            with torch.no_grad():
                return float(autoregressive_loss(forward(b.tokens, params, cfg).logits, targets, b.loss_mask))

        l0 = loss()
        train_step(b, params, opt, 0, tc, cfg)
        wins += loss() < l0
    assert wins >= 0.95 * trials


def test_mlm_phase_switch():
    cfg = small()
    tc = TrainConfig(total_steps=4, mlm_phase_frac=0.5)
    _, metrics = run_steps(cfg, tc, 4)
    assert ["mlm_loss" in m for m in metrics] == [True, True, False, False]
    assert not mlm_active(2, cfg, tc)
    assert not mlm_active(0, dataclasses.replace(cfg, use_mlm_phase=False), tc)


def test_metrics_report_retrieval_stats():
    cfg = small()
    _, metrics = run_steps(cfg, TrainConfig(total_steps=2), 1)
    m = metrics[0]
    for key in ("ar_loss", "lr", "grad_norm", "retrieval_max_weight"):
        assert math.isfinite(m[key])


def test_step_generator_depends_on_seed_and_step():
    a = torch.rand(3, generator=step_generator(1, 2))
    assert torch.equal(a, torch.rand(3, generator=step_generator(1, 2)))
    assert not torch.equal(a, torch.rand(3, generator=step_generator(1, 3)))
    assert not torch.equal(a, torch.rand(3, generator=step_generator(2, 2)))


# -- gradient checks --------------------------------------------------------------


def test_grad_check_tiny_config_passes():
    report = grad_check_suite(tiny_check_config(n_groups=1), tolerance=1e-5)
    assert report.passed, "\n".join(report.lines())
    names = {e.name for e in report.entries}
    assert {"kernel.dq", "kernel.dk", "kernel.dv", "kernel.dw", "gca_k", "gca_v", "upper.0.gca_q"} <= names


def corrupted_backward(*args, **kwargs):
    g = flash_gca_backward(*args, **kwargs)
    return dataclasses.replace(g, dv=g.dv * 1.01)


def test_grad_check_flags_corrupted_dv():
    report = grad_check_suite(tiny_check_config(), tolerance=1e-5, gca_backward=corrupted_backward)
    failed = {e.name for e in report.failures}
    assert not report.passed
    assert "kernel.dv" in failed and "gca_v" in failed
    assert "kernel.dq" not in failed and "kernel.dw" not in failed
    bad = next(e for e in report.entries if e.name == "kernel.dv")
    assert len(bad.worst_index) == 3
    assert any(line.startswith("FAIL kernel.dv") for line in report.lines())


def test_grad_check_zero_tolerance_fails():
    assert not grad_check_suite(tiny_check_config(), tolerance=0.0, n_chunks=2).passed


def test_grad_check_head_only_model():
    cfg = tiny_check_config(n_layers=0, n_groups=0)
    report = grad_check_suite(cfg, tolerance=1e-5, include_kernel=False)
    assert report.passed
    assert {e.name for e in report.entries} == {"embed", "final_norm", "head"}


def test_grad_check_requires_double():
    with pytest.raises(ContractError):
        grad_check_suite(tiny_check_config(dtype="float32"))
