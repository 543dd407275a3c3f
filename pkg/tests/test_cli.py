import io
import json

import pytest
import torch
from hypothesis import given, settings, strategies as st

from drt.cli import EXIT_OK, EXIT_RUNTIME, EXIT_USAGE, build_corpus, main, run_training
from drt.config import (
    RunConfig,
    apply_overrides,
    load_checkpoint,
    parse_config,
    save_checkpoint,
    serialize_config,
)
from drt.errors import CheckpointError, ConfigError
from drt.inference import attention_op_count
from drt.model import init_params, param_shapes

TINY = {
    "d_model": 16, "n_heads": 2, "n_layers": 4, "n_groups": 1, "chunk_size": 4, "window": 8, "top_k": 2,
    "ffn_dim": 32, "context_len": 64, "batch_size": 2, "total_steps": 10, "synth_docs": 8, "synth_eval_docs": 2,
    "synth_doc_len": 64, "synth_keys": 4, "eval_lens": "64",
}


def tiny_cfg(**kw) -> RunConfig:
    return RunConfig(**{**TINY, **kw})


def write_cfg(tmp_path, **kw):
    path = tmp_path / "run.cfg"
    path.write_text(serialize_config(tiny_cfg(out_dir=str(tmp_path / "out"), **kw)))
    return str(path)


def run(*argv):
    out, err = io.StringIO(), io.StringIO()
    code = main(list(argv), out, err)
    return code, out.getvalue(), err.getvalue()


def rows(text):
    return [json.loads(line) for line in text.splitlines() if line.strip()]


# -- config -----------------------------------------------------------------------


def test_config_round_trip_idempotent():
    text = serialize_config(tiny_cfg())
    assert serialize_config(parse_config(text)) == text
    assert parse_config(text) == tiny_cfg()


@settings(max_examples=30, deadline=None)
@given(st.integers(1, 64), st.booleans(), st.floats(1e-5, 1e-2), st.sampled_from(["lower", "embedding"]))
def test_config_round_trip_property(steps, gumbel, lr, variant):
    cfg = tiny_cfg(total_steps=steps, use_gumbel=gumbel, base_lr=lr, final_lr=lr / 2, variant=variant)
    assert parse_config(serialize_config(cfg)) == cfg


def test_config_comments_and_bools():
    cfg = parse_config("d_model = 32  # wider\n\nuse_gumbel = off\noffload=on\n")
    assert cfg.d_model == 32 and cfg.use_gumbel is False and cfg.offload is True


def test_unknown_key_named():
    with pytest.raises(ConfigError, match="foo"):
        parse_config("foo = 1\n")
    with pytest.raises(ConfigError, match="foo"):
        apply_overrides(RunConfig(), ["foo=2"])
    with pytest.raises(ConfigError, match="d_model"):
        parse_config("d_model = wide\n")


def test_every_field_has_a_default():
    RunConfig()


def test_cli_unknown_key_exit_code(tmp_path):
    path = tmp_path / "bad.cfg"
    path.write_text("foo = 3\n")
    code, _, err = run("train", "--config", str(path))
    assert code == EXIT_USAGE and "foo" in err


# -- checkpoints ------------------------------------------------------------------


def test_checkpoint_round_trip_bit_exact(tmp_path):
    cfg = tiny_cfg()
    params = init_params(cfg.model_config(), 3)
    opt = {"a.exp_avg": torch.randn(3, 2, dtype=torch.float32), "a.step": torch.tensor([4.0], dtype=torch.float64)}
    path = tmp_path / "c.drtc"
    save_checkpoint(path, cfg, params, 17, opt)
    ck = load_checkpoint(path, expect=cfg)
    assert ck.step == 17 and ck.config == cfg
    assert set(ck.params) == set(params)
    assert all(torch.equal(ck.params[n], params[n]) for n in params)
    assert all(torch.equal(ck.opt_tensors[n], opt[n]) for n in opt)


def test_checkpoint_truncation_and_corruption_detected(tmp_path):
    cfg = tiny_cfg()
    path = tmp_path / "c.drtc"
    save_checkpoint(path, cfg, init_params(cfg.model_config()), 1)
    raw = path.read_bytes()
    (tmp_path / "short.drtc").write_bytes(raw[: len(raw) // 2])
    with pytest.raises(CheckpointError):
        load_checkpoint(tmp_path / "short.drtc")
    flipped = bytearray(raw)
    flipped[len(raw) // 2] ^= 0xFF
    (tmp_path / "flip.drtc").write_bytes(bytes(flipped))
    with pytest.raises(CheckpointError):
        load_checkpoint(tmp_path / "flip.drtc")
    (tmp_path / "junk.drtc").write_bytes(b"hello world")
    with pytest.raises(CheckpointError):
        load_checkpoint(tmp_path / "junk.drtc")


def test_checkpoint_architecture_mismatch_names_field(tmp_path):
    cfg = tiny_cfg()
    path = tmp_path / "c.drtc"
    save_checkpoint(path, cfg, init_params(cfg.model_config()), 0)
    with pytest.raises(CheckpointError, match="d_model"):
        load_checkpoint(path, expect=tiny_cfg(d_model=32))
    # training-only fields may differ
    load_checkpoint(path, expect=tiny_cfg(base_lr=1e-3, max_len=4096))


def test_cli_eval_architecture_mismatch(tmp_path):
    ck = tmp_path / "c.drtc"
    cfg = tiny_cfg()
    save_checkpoint(ck, cfg, init_params(cfg.model_config()), 0)
    code, _, err = run("eval", "--config", write_cfg(tmp_path), "--set", "top_k=3", "--checkpoint", str(ck))
    assert code == EXIT_RUNTIME and "top_k" in err


# -- train ------------------------------------------------------------------------


def test_train_ten_steps_emits_ten_records(tmp_path):
    metrics = tmp_path / "m.jsonl"
    code, out, err = run("train", "--config", write_cfg(tmp_path), "--metrics", str(metrics))
    assert code == EXIT_OK, err
    recs = rows(metrics.read_text())
    assert len(recs) == 10
    assert [r["step"] for r in recs] == list(range(10))
    for r in recs:
        assert {"step", "ar_loss", "lr", "grad_norm"} <= set(r)
    assert ("mlm_loss" in recs[0]) and ("mlm_loss" not in recs[-1])
    assert "retrieval_hit_rate" in recs[0]
    assert (tmp_path / "out" / "checkpoint.drtc").exists()
    assert rows(out)[0]["steps"] == 10


def test_resume_matches_continuous(tmp_path):
    cfg = tiny_cfg(total_steps=6)
    full = run_training(cfg)
    ck = tmp_path / "half.drtc"
    run_training(cfg, max_steps=3, checkpoint_path=ck)
    rest = run_training(cfg, resume=ck)
    assert [m["step"] for m in rest.metrics] == [3, 4, 5]
    assert rest.metrics == full.metrics[3:]
    assert all(torch.equal(full.params[n], rest.params[n]) for n in full.params)


def test_cli_resume_appends_metrics(tmp_path):
    conf = write_cfg(tmp_path, total_steps=4)
    m = tmp_path / "m.jsonl"
    ck = tmp_path / "c.drtc"
    assert run("train", "--config", conf, "--steps", "2", "--metrics", str(m), "--save", str(ck))[0] == EXIT_OK
    assert run("train", "--config", conf, "--checkpoint", str(ck), "--metrics", str(m), "--save", str(ck))[0] == EXIT_OK
    assert [r["step"] for r in rows(m.read_text())] == [0, 1, 2, 3]
    assert load_checkpoint(ck).step == 4


def test_divergence_is_a_runtime_error(tmp_path):
    code, _, err = run("train", "--config", write_cfg(tmp_path, base_lr=1e30, final_lr=1e30, warmup_frac=0.0))
    assert code == EXIT_RUNTIME
    assert "step" in err


# -- eval / generate --------------------------------------------------------------


def test_eval_untrained_near_vocab_and_deterministic(tmp_path):
    conf = write_cfg(tmp_path)
    code, out, _ = run("eval", "--config", conf, "--eval-len", "64,256")
    assert code == EXIT_OK
    table = rows(out)
    assert [r["eval_len"] for r in table] == [64, 256]
    for r in table:
        assert r["ppl"] == pytest.approx(259, rel=0.02)
    assert run("eval", "--config", conf, "--eval-len", "64,256")[1] == out


def test_eval_offload_matches(tmp_path):
    conf = write_cfg(tmp_path)
    _, plain, _ = run("eval", "--config", conf, "--engine", "session")
    _, off, _ = run("eval", "--config", conf, "--offload", "on")
    assert rows(plain) == rows(off)


def test_eval_trained_checkpoint(tmp_path):
    conf = write_cfg(tmp_path)
    assert run("train", "--config", conf)[0] == EXIT_OK
    ck = str(tmp_path / "out" / "checkpoint.drtc")
    code, out, _ = run("eval", "--config", conf, "--checkpoint", ck, "--eval-len", "64,256")
    assert code == EXIT_OK
    assert all(r["ppl"] < 259 for r in rows(out))


def test_generate_greedy_and_offload(tmp_path):
    conf = write_cfg(tmp_path)
    a = rows(run("generate", "--config", conf, "--prompt", "=A0000000", "--max-new-tokens", "12")[1])[0]
    b = rows(run("generate", "--config", conf, "--prompt", "=A0000000", "--max-new-tokens", "12",
                 "--offload", "on")[1])[0]
    assert len(a["tokens"]) == 12 and a == b
    t1 = run("generate", "--config", conf, "--temperature", "0.7", "--seed", "4", "--max-new-tokens", "9")[1]
    t2 = run("generate", "--config", conf, "--temperature", "0.7", "--seed", "4", "--max-new-tokens", "9")[1]
    assert t1 == t2


# -- gradcheck / bench / inspect --------------------------------------------------


def test_gradcheck_command():
    code, out, _ = run("gradcheck")
    assert code == EXIT_OK
    lines = out.splitlines()
    assert lines[-1].startswith("PASS overall")
    from drt.training import tiny_check_config

    names = [ln.split()[1] for ln in lines[:-1] if not ln.split()[1].startswith("kernel.")]
    assert sorted(names) == sorted(param_shapes(tiny_check_config()))


def test_gradcheck_zero_tolerance_fails():
    code, out, _ = run("gradcheck", "--tolerance", "0")
    assert code == EXIT_RUNTIME
    assert "FAIL overall" in out


def test_bench_ratio_and_prediction(tmp_path):
    conf = write_cfg(tmp_path, chunk_size=16, window=64, top_k=4)
    code, out, _ = run("bench", "--config", conf, "--lengths", "512,1024")
    assert code == EXIT_OK
    table = rows(out)
    cfg = tiny_cfg(chunk_size=16, window=64, top_k=4).model_config()
    for r in table:
        assert 0.9 <= r["ratio"] <= 1.1
        assert r["predicted_ops"] == attention_op_count(cfg, r["L"])
    assert 1.8 <= table[1]["measured_ops"] / table[0]["measured_ops"] <= 2.3


def test_inspect_retrieval_report(tmp_path):
    text = tmp_path / "in.txt"
    text.write_bytes(b"=A5555555 filler text here ?A?A?A?A A555 more filler bytes " * 3)
    code, out, _ = run("inspect-retrieval", "--config", write_cfg(tmp_path), "--input", str(text))
    assert code == EXIT_OK
    report = rows(out)
    assert report
    for r in report:
        assert all(k < r["chunk"] for k in r["indices"])
        if r["weights"]:
            assert abs(sum(r["weights"]) - 1.0) <= 1e-6
        assert len(r["spans"]) == len(r["indices"])


# -- exit codes -------------------------------------------------------------------


def test_usage_errors():
    assert run()[0] == EXIT_USAGE
    assert run("train", "--bogus")[0] == EXIT_USAGE
    assert run("frobnicate")[0] == EXIT_USAGE
    assert run("--help")[0] == EXIT_OK


def test_runtime_errors(tmp_path):
    code, _, err = run("eval", "--config", write_cfg(tmp_path), "--checkpoint", str(tmp_path / "missing.drtc"))
    assert code == EXIT_RUNTIME and "missing.drtc" in err
    code, _, _ = run("inspect-retrieval", "--config", write_cfg(tmp_path), "--input", str(tmp_path / "nope"))
    assert code == EXIT_RUNTIME


def test_thread_env_validated(tmp_path, monkeypatch):
    monkeypatch.setenv("DRT_NUM_THREADS", "many")
    assert run("eval", "--config", write_cfg(tmp_path))[0] == EXIT_USAGE
    monkeypatch.setenv("DRT_NUM_THREADS", "1")
    assert run("eval", "--config", write_cfg(tmp_path))[0] == EXIT_OK


def test_held_out_corpus_geometry_can_differ_from_training():
    cfg = RunConfig(**TINY).replace(synth_eval_doc_len=128, synth_eval_keys=2)
    train, held = build_corpus(cfg, "train"), build_corpus(cfg, "eval")
    assert {b - a for a, b in train.document_spans()} == {64}
    assert {b - a for a, b in held.document_spans()} == {128}
    assert len(held.probes) == 2 * cfg.synth_eval_docs
    same = build_corpus(RunConfig(**TINY), "eval")
    assert {b - a for a, b in same.document_spans()} == {64}
