"""``drt`` command line: train, eval, generate, gradcheck, bench, inspect-retrieval."""

from __future__ import annotations

import argparse
import json
import os
import sys
import time
from dataclasses import dataclass
from pathlib import Path
from typing import Callable, TextIO

import torch

from . import opcount
from .config import RunConfig, apply_overrides, load_checkpoint, load_config, parse_int_list, save_checkpoint
from .data import (
    TokenStream,
    batch_for_step,
    corpus_files,
    decode,
    document_windows,
    ingest_corpus,
    synthetic_recall_corpus,
)
from .errors import CheckpointError, ConfigError, ContractError, TrainingError
from .inference import SamplingParams, attention_op_count, evaluate, generate, lay_out_prefix, prefill
from .model import Params, forward, init_params, insert_landmarks
from .training import OptState, TrainBatch, grad_check_suite, init_opt_state, tiny_check_config, train_step

EXIT_OK, EXIT_USAGE, EXIT_RUNTIME = 0, 1, 2


def apply_thread_limit() -> None:
    raw = os.environ.get("DRT_NUM_THREADS")
    if raw:
        try:
            n = int(raw)
        except ValueError as exc:
            raise ConfigError(f"DRT_NUM_THREADS must be an integer, got {raw!r}") from exc
        if n < 1:
            raise ConfigError("DRT_NUM_THREADS must be >= 1")
        torch.set_num_threads(n)


# --------------------------------------------------------------------------
# shared plumbing


def build_corpus(cfg: RunConfig, split: str = "train") -> TokenStream:
    source = cfg.corpus if split == "train" else cfg.eval_corpus
    if source == "synthetic":
        train = split == "train"
        n_docs = cfg.synth_docs if train else cfg.synth_eval_docs
        seed = cfg.synth_seed if train else cfg.synth_seed + 1
        doc_len = cfg.synth_doc_len if train or not cfg.synth_eval_doc_len else cfg.synth_eval_doc_len
        keys = cfg.synth_keys if train or not cfg.synth_eval_keys else cfg.synth_eval_keys
        return synthetic_recall_corpus(
            n_docs, doc_len, keys, cfg.synth_gap, seed, cfg.chunk_size, cfg.window, cfg.synth_value_len,
        )
    files = corpus_files(source)
    if not files:
        raise ConfigError(f"corpus {source!r} contains no files")
    return ingest_corpus(files)


@dataclass
class TrainResult:
    params: Params
    opt_state: OptState
    metrics: list[dict]
    seconds: float


def run_training(
    cfg: RunConfig,
    stream: TokenStream | None = None,
    resume: str | Path | None = None,
    max_steps: int | None = None,
    metrics_out: TextIO | None = None,
    checkpoint_path: str | Path | None = None,
    on_step: Callable[[dict], None] | None = None,
) -> TrainResult:
    """Train from scratch or from ``resume`` up to ``total_steps`` (or ``max_steps`` more)."""
    mcfg, tcfg = cfg.model_config(), cfg.train_config()
    stream = stream if stream is not None else build_corpus(cfg, "train")
    windows = document_windows(stream, tcfg.context_len, mcfg)
    start = 0
    params = init_params(mcfg, tcfg.seed)
    opt = init_opt_state(params, tcfg)
    if resume is not None:
        ck = load_checkpoint(resume, expect=cfg)
        with torch.no_grad():
            for name, p in params.items():
                if name not in ck.params:
                    raise CheckpointError(f"checkpoint lacks tensor {name!r}")
                p.copy_(ck.params[name].to(p.dtype))
        if ck.opt_tensors:
            opt.load_state_tensors(ck.opt_tensors)
        start = ck.step
        opt.step = start
    end = tcfg.total_steps if max_steps is None else min(tcfg.total_steps, start + max_steps)
    history = []
    t0 = time.perf_counter()
    for step in range(start, end):
        b = batch_for_step(windows, step, tcfg.batch_size, tcfg.seed, mcfg)
        m = train_step(TrainBatch(b.tokens, b.loss_mask, b.probes), params, opt, step, tcfg, mcfg)
        history.append(m)
        if metrics_out is not None and (cfg.log_every <= 1 or step % cfg.log_every == 0 or step == end - 1):
            metrics_out.write(json.dumps(m, sort_keys=True) + "\n")
            metrics_out.flush()
        if on_step is not None:
            on_step(m)
        if checkpoint_path is not None and cfg.checkpoint_every > 0 and (step + 1) % cfg.checkpoint_every == 0:
            save_checkpoint(checkpoint_path, cfg, params, step + 1, opt.state_tensors())
    if checkpoint_path is not None:
        save_checkpoint(checkpoint_path, cfg, params, end, opt.state_tensors())
    return TrainResult(params, opt, history, time.perf_counter() - t0)


def load_params(cfg: RunConfig, checkpoint: str | None) -> Params:
    mcfg = cfg.model_config()
    if checkpoint is None:
        return init_params(mcfg, cfg.seed)
    ck = load_checkpoint(checkpoint, expect=cfg)
    return {n: t.to(mcfg.torch_dtype) for n, t in ck.params.items()}


def _config_from_args(args) -> RunConfig:
    cfg = load_config(args.config) if getattr(args, "config", None) else RunConfig()
    changes = {}
    if getattr(args, "seed", None) is not None:
        changes["seed"] = args.seed
    if getattr(args, "offload", None) is not None:
        changes["offload"] = args.offload == "on"
    if getattr(args, "eval_len", None):
        changes["eval_lens"] = args.eval_len
    cfg = apply_overrides(cfg, getattr(args, "set", None) or [])
    return cfg.replace(**changes) if changes else cfg


# --------------------------------------------------------------------------
# commands


def cmd_train(args, out: TextIO) -> int:
    cfg = _config_from_args(args)
    out_dir = Path(cfg.out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    ckpt = Path(args.save) if args.save else out_dir / "checkpoint.drtc"
    mode = "a" if args.checkpoint else "w"
    with open(args.metrics or out_dir / "metrics.jsonl", mode) as fh:
        res = run_training(cfg, resume=args.checkpoint, max_steps=args.steps, metrics_out=fh, checkpoint_path=ckpt)
    out.write(json.dumps({"steps": len(res.metrics), "checkpoint": str(ckpt), "seconds": round(res.seconds, 3)}) + "\n")
    return EXIT_OK


def cmd_eval(args, out: TextIO) -> int:
    cfg = _config_from_args(args)
    params = load_params(cfg, args.checkpoint)
    stream = build_corpus(cfg, "eval")
    mcfg = cfg.model_config()
    engine = "session" if cfg.offload or args.engine == "session" else "forward"
    for length in cfg.eval_lengths():
        if length * mcfg.stride // mcfg.chunk_size > mcfg.max_len:
            raise ContractError(f"eval length {length} exceeds max_len={mcfg.max_len}")
        res = evaluate(params, mcfg, stream, length, engine=engine, offload=cfg.offload)
        row = {"eval_len": length, "ppl": res.ppl, "nll": res.mean_nll, "tokens": res.n_tokens}
        if res.n_probes:
            row["probe_nll"] = res.probe_nll
        out.write(json.dumps(row) + "\n")
    return EXIT_OK


def cmd_generate(args, out: TextIO) -> int:
    cfg = _config_from_args(args)
    params = load_params(cfg, args.checkpoint)
    mcfg = cfg.model_config()
    prompt = args.prompt.encode() if args.prompt is not None else b""
    if args.prompt_file:
        prompt = Path(args.prompt_file).read_bytes()
    sess = prefill(lay_out_prefix(list(prompt), mcfg), params, mcfg, offload=cfg.offload)
    mode = "temperature" if args.temperature and args.temperature > 0 else "greedy"
    sampling = SamplingParams(mode, args.temperature or 1.0, cfg.seed, args.max_new_tokens)
    toks = generate(sess, sampling)
    sess.close()
    out.write(json.dumps({"prompt": prompt.decode("utf-8", "replace"), "tokens": toks,
                          "text": decode(toks).decode("utf-8", "replace")}) + "\n")
    return EXIT_OK


def cmd_gradcheck(args, out: TextIO) -> int:
    mcfg = tiny_check_config()
    if args.config:
        mcfg = _config_from_args(args).model_config()
    report = grad_check_suite(mcfg, tolerance=args.tolerance)
    for line in report.lines():
        out.write(line + "\n")
    return EXIT_OK if report.passed else EXIT_RUNTIME


def measure_ops(params: Params, config, length: int, seed: int = 0) -> tuple[dict, float]:
    """Attention MACs and wall time of one eval forward over ``length`` content tokens."""
    gen = torch.Generator().manual_seed(seed)
    content = torch.randint(0, config.lmk_id, (length,), generator=gen)
    ids, _ = insert_landmarks(content, config)
    tokens = torch.tensor(ids)[None]
    t0 = time.perf_counter()
    with torch.no_grad(), opcount.counting() as counts:
        forward(tokens, params, config)
    return dict(counts), time.perf_counter() - t0


ATTENTION_KINDS = ("retrieval", "gca", "self_attn")


def cmd_bench(args, out: TextIO) -> int:
    cfg = _config_from_args(args)
    mcfg = cfg.model_config()
    params = init_params(mcfg, cfg.seed)
    for length in parse_int_list(args.lengths):
        counts, secs = measure_ops(params, mcfg, length, cfg.seed)
        measured = sum(counts.get(k, 0) for k in ATTENTION_KINDS)
        predicted = attention_op_count(mcfg, length)
        out.write(json.dumps({
            "L": length, "measured_ops": measured, "predicted_ops": predicted,
            "ratio": measured / predicted, "seconds": round(secs, 4),
            "breakdown": {k: counts.get(k, 0) for k in (*ATTENTION_KINDS, "encoder")},
        }) + "\n")
    return EXIT_OK


def inspect_retrieval(params: Params, config, content: bytes) -> list[dict]:
    """Per (chunk, group) selection report for the given text, eval mode."""
    s = config.chunk_size
    ids = list(content)
    if len(ids) % s:
        ids += [config.pad_id] * (s - len(ids) % s)
    laid, layout = insert_landmarks(ids, config)
    with torch.no_grad():
        fo = forward(torch.tensor(laid)[None], params, config)
    rows = []

    def span(k: int) -> str:
        return decode(ids[k * s : (k + 1) * s]).decode("utf-8", "replace")

    for g, r in enumerate(fo.retrieval):
        for t in range(layout.n_chunks):
            sel = r.as_set(0, t)
            rows.append({
                "chunk": t, "serves": t + 1, "group": g + 1, "indices": sel.indices,
                "scores": sel.raw_scores, "weights": sel.weights,
                "query_text": span(t), "spans": [span(k) for k in sel.indices],
            })
    return rows


def cmd_inspect(args, out: TextIO) -> int:
    cfg = _config_from_args(args)
    params = load_params(cfg, args.checkpoint)
    content = Path(args.input).read_bytes()
    for row in inspect_retrieval(params, cfg.model_config(), content):
        out.write(json.dumps(row) + "\n")
    return EXIT_OK


# --------------------------------------------------------------------------
# argument parsing


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):  # exit code 1 for usage problems
        raise UsageError(message)


def build_parser() -> argparse.ArgumentParser:
    common = _Parser(add_help=False)
    common.add_argument("--config", help="flat key=value run config")
    common.add_argument("--checkpoint", help="checkpoint to load (train: resume from it)")
    common.add_argument("--seed", type=int)
    common.add_argument("--offload", choices=("on", "off"))
    common.add_argument("--eval-len", dest="eval_len", help="comma-separated content lengths")
    common.add_argument("--set", action="append", metavar="KEY=VALUE", help="override one config key")

    p = _Parser(prog="drt", description="Grouped cross-attention retrieval transformer toolkit.")
    sub = p.add_subparsers(dest="command", parser_class=_Parser)
    sub.required = True

    t = sub.add_parser("train", parents=[common], help="train and write metrics + checkpoints")
    t.add_argument("--steps", type=int, help="stop after this many steps (resumable)")
    t.add_argument("--metrics", help="metrics file (default OUT_DIR/metrics.jsonl)")
    t.add_argument("--save", help="checkpoint path (default OUT_DIR/checkpoint.drtc)")
    t.set_defaults(func=cmd_train)

    e = sub.add_parser("eval", parents=[common], help="perplexity per eval length")
    e.add_argument("--engine", choices=("forward", "session"), default="forward")
    e.set_defaults(func=cmd_eval)

    g = sub.add_parser("generate", parents=[common], help="sample a continuation")
    g.add_argument("--prompt", default="")
    g.add_argument("--prompt-file", dest="prompt_file")
    g.add_argument("--max-new-tokens", dest="max_new_tokens", type=int, default=64)
    g.add_argument("--temperature", type=float, default=0.0, help="0 means greedy")
    g.set_defaults(func=cmd_generate)

    c = sub.add_parser("gradcheck", parents=[common], help="finite-difference gradient audit")
    c.add_argument("--tolerance", type=float, default=1e-5)
    c.set_defaults(func=cmd_gradcheck)

    b = sub.add_parser("bench", parents=[common], help="measured vs predicted attention op counts")
    b.add_argument("--lengths", default="1024,2048,4096,8192")
    b.set_defaults(func=cmd_bench)

    r = sub.add_parser("inspect-retrieval", parents=[common], help="per-chunk retrieval report")
    r.add_argument("--input", required=True)
    r.set_defaults(func=cmd_inspect)
    return p


def main(argv: list[str] | None = None, out: TextIO | None = None, err: TextIO | None = None) -> int:
    out = out or sys.stdout
    err = err or sys.stderr
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except UsageError as exc:
        err.write(f"drt: usage error: {exc}\n")
        return EXIT_USAGE
    except SystemExit as exc:  # --help
        return EXIT_OK if not exc.code else EXIT_USAGE
    try:
        apply_thread_limit()
        return args.func(args, out)
    except ConfigError as exc:
        err.write(f"drt: config error: {exc}\n")
        return EXIT_USAGE
    except TrainingError as exc:
        err.write(f"drt: training failed: {exc}\n")
        return EXIT_RUNTIME
    except (CheckpointError, ContractError, OSError) as exc:
        err.write(f"drt: error: {exc}\n")
        return EXIT_RUNTIME


if __name__ == "__main__":
    sys.exit(main())
