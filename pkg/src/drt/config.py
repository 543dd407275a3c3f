"""Flat key=value run configuration and the binary checkpoint container."""

from __future__ import annotations

import struct
import zlib
from dataclasses import MISSING, asdict, dataclass, fields
from pathlib import Path

import numpy as np
import torch

from .errors import CheckpointError, ConfigError
from .model import ModelConfig
from .training import TrainConfig

_MODEL_KEYS = set(ModelConfig.field_names())
_TRAIN_KEYS = set(TrainConfig.field_names())


@dataclass
class RunConfig:
    # model
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
    # training
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
    # data: a path (file or directory) or "synthetic"
    corpus: str = "synthetic"
    eval_corpus: str = "synthetic"
    synth_docs: int = 64
    synth_eval_docs: int = 8
    synth_doc_len: int = 2048
    synth_keys: int = 16
    synth_gap: int = 5
    synth_value_len: int = 1
    synth_eval_doc_len: int = 0  # 0: same as synth_doc_len
    synth_eval_keys: int = 0  # 0: same as synth_keys
    synth_seed: int = 1234
    # evaluation / inference
    eval_lens: str = "2048"
    offload: bool = False
    # outputs
    out_dir: str = "runs/default"
    checkpoint_every: int = 0
    log_every: int = 1

    def __post_init__(self) -> None:
        self.model_config()
        self.train_config()
        self.eval_lengths()

    def model_config(self) -> ModelConfig:
        return ModelConfig(**{k: v for k, v in asdict(self).items() if k in _MODEL_KEYS})

    def train_config(self) -> TrainConfig:
        return TrainConfig(**{k: v for k, v in asdict(self).items() if k in _TRAIN_KEYS})

    def eval_lengths(self) -> list[int]:
        return parse_int_list(self.eval_lens)

    def replace(self, **changes) -> "RunConfig":
        d = asdict(self)
        for k in changes:
            if k not in d:
                raise ConfigError(f"unknown config key {k!r}")
        d.update(changes)
        return RunConfig(**d)


def parse_int_list(text: str) -> list[int]:
    try:
        vals = [int(x) for x in str(text).split(",") if x.strip()]
    except ValueError as exc:
        raise ConfigError(f"expected comma-separated integers, got {text!r}") from exc
    if not vals or any(v <= 0 for v in vals):
        raise ConfigError(f"expected positive integers, got {text!r}")
    return vals


def _coerce(key: str, raw: str, typ) -> object:
    raw = raw.strip()
    try:
        if typ is bool or typ == "bool":
            low = raw.lower()
            if low in ("1", "true", "yes", "on"):
                return True
            if low in ("0", "false", "no", "off"):
                return False
            raise ValueError(raw)
        if typ is int or typ == "int":
            return int(raw)
        if typ is float or typ == "float":
            return float(raw)
    except ValueError as exc:
        raise ConfigError(f"bad value for {key}: {raw!r}") from exc
    return raw


def parse_config(text: str) -> RunConfig:
    """``key = value`` per line; ``#`` starts a comment. Unknown keys are rejected."""
    types = {f.name: f.type for f in fields(RunConfig)}
    values: dict[str, object] = {}
    for lineno, line in enumerate(text.splitlines(), 1):
        line = line.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ConfigError(f"line {lineno}: expected key = value, got {line!r}")
        key, raw = (s.strip() for s in line.split("=", 1))
        if key not in types:
            raise ConfigError(f"unknown config key {key!r} (line {lineno})")
        values[key] = _coerce(key, raw, types[key])
    return RunConfig(**values)


def apply_overrides(cfg: RunConfig, items: list[str]) -> RunConfig:
    """Apply ``key=value`` strings on top of ``cfg`` with the file parser's typing."""
    types = {f.name: f.type for f in fields(RunConfig)}
    changes = {}
    for item in items:
        if "=" not in item:
            raise ConfigError(f"override must be key=value, got {item!r}")
        key, raw = (x.strip() for x in item.split("=", 1))
        if key not in types:
            raise ConfigError(f"unknown config key {key!r}")
        changes[key] = _coerce(key, raw, types[key])
    return cfg.replace(**changes) if changes else cfg


def load_config(path: str | Path) -> RunConfig:
    try:
        text = Path(path).read_text()
    except OSError as exc:
        raise ConfigError(f"cannot read config {path}: {exc.strerror or exc}") from exc
    return parse_config(text)


def serialize_config(cfg: RunConfig) -> str:
    out = []
    for f in fields(RunConfig):
        v = getattr(cfg, f.name)
        out.append(f"{f.name} = {str(v).lower() if isinstance(v, bool) else v}")
    return "\n".join(out) + "\n"


def config_defaults() -> dict[str, object]:
    return {f.name: f.default for f in fields(RunConfig) if f.default is not MISSING}


# --------------------------------------------------------------------------
# checkpoints
#
# layout (little-endian):
#   "DRTC" | u32 version | u32 len | config text (utf-8)
#   u64 step | u32 n_params | param records | u8 has_opt [| u32 n | opt records]
#   u32 crc32 of everything before it
# record: u16 name len | name | u8 kind (0 f32, 1 f64) | u8 ndim | u32 dims[ndim] | data

CKPT_MAGIC = b"DRTC"
CKPT_VERSION = 1
_KINDS = {torch.float32: (0, np.dtype("<f4")), torch.float64: (1, np.dtype("<f8"))}
_KIND_DTYPES = {0: (torch.float32, np.dtype("<f4")), 1: (torch.float64, np.dtype("<f8"))}


def _pack_table(tensors: dict[str, torch.Tensor]) -> bytes:
    parts = [struct.pack("<I", len(tensors))]
    for name, t in tensors.items():
        t = t.detach().cpu()
        if t.dtype not in _KINDS:
            t = t.to(torch.float64)
        kind, npd = _KINDS[t.dtype]
        nb = name.encode()
        parts.append(struct.pack("<H", len(nb)) + nb + struct.pack("<BB", kind, t.dim()))
        parts.append(struct.pack(f"<{t.dim()}I", *t.shape))
        parts.append(np.ascontiguousarray(t.numpy(), dtype=npd).tobytes())
    return b"".join(parts)


class _Reader:
    def __init__(self, raw: bytes):
        self.raw, self.pos = raw, 0

    def take(self, n: int) -> bytes:
        if self.pos + n > len(self.raw):
            raise CheckpointError("checkpoint is truncated")
        b = self.raw[self.pos : self.pos + n]
        self.pos += n
        return b

    def unpack(self, fmt: str):
        s = struct.Struct(fmt)
        return s.unpack(self.take(s.size))


def _read_table(r: _Reader) -> dict[str, torch.Tensor]:
    (n,) = r.unpack("<I")
    out = {}
    for _ in range(n):
        (ln,) = r.unpack("<H")
        name = r.take(ln).decode()
        kind, ndim = r.unpack("<BB")
        if kind not in _KIND_DTYPES:
            raise CheckpointError(f"tensor {name}: unknown scalar kind {kind}")
        shape = r.unpack(f"<{ndim}I") if ndim else ()
        tdt, npd = _KIND_DTYPES[kind]
        count = int(np.prod(shape)) if shape else 1
        data = np.frombuffer(r.take(count * npd.itemsize), dtype=npd).reshape(shape)
        out[name] = torch.from_numpy(data.copy())
    return out


def save_checkpoint(
    path: str | Path,
    cfg: RunConfig,
    params: dict[str, torch.Tensor],
    step: int,
    opt_tensors: dict[str, torch.Tensor] | None = None,
) -> None:
    text = serialize_config(cfg).encode()
    body = [CKPT_MAGIC, struct.pack("<II", CKPT_VERSION, len(text)), text, struct.pack("<Q", step)]
    body.append(_pack_table(params))
    if opt_tensors is None:
        body.append(b"\x00")
    else:
        body.append(b"\x01" + _pack_table(opt_tensors))
    blob = b"".join(body)
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    tmp = path.with_suffix(path.suffix + ".tmp")
    tmp.write_bytes(blob + struct.pack("<I", zlib.crc32(blob)))
    tmp.replace(path)


@dataclass
class Checkpoint:
    config: RunConfig
    params: dict[str, torch.Tensor]
    step: int
    opt_tensors: dict[str, torch.Tensor] | None


def load_checkpoint(path: str | Path, expect: RunConfig | None = None) -> Checkpoint:
    """Read and verify a checkpoint; ``expect`` must agree on every architecture field."""
    try:
        raw = Path(path).read_bytes()
    except OSError as exc:
        raise CheckpointError(f"cannot read checkpoint {path}: {exc.strerror or exc}") from exc
    if raw[:4] != CKPT_MAGIC:
        raise CheckpointError(f"{path} is not a checkpoint (bad magic)")
    if len(raw) < 8:
        raise CheckpointError("checkpoint is truncated")
    (crc,) = struct.unpack("<I", raw[-4:])
    if zlib.crc32(raw[:-4]) != crc:
        raise CheckpointError(f"{path} is truncated or corrupted (checksum mismatch)")
    r = _Reader(raw[:-4])
    r.take(4)
    version, ln = r.unpack("<II")
    if version != CKPT_VERSION:
        raise CheckpointError(f"unsupported checkpoint version {version}")
    cfg = parse_config(r.take(ln).decode())
    (step,) = r.unpack("<Q")
    params = _read_table(r)
    (has_opt,) = r.unpack("<B")
    opt = _read_table(r) if has_opt else None
    if r.pos != len(r.raw):
        raise CheckpointError("trailing bytes after checkpoint payload")
    if expect is not None:
        check_architecture(cfg, expect)
    return Checkpoint(cfg, params, step, opt)


def check_architecture(saved: RunConfig, current: RunConfig) -> None:
    a = saved.model_config().architecture()
    b = current.model_config().architecture()
    for key in a:
        if a[key] != b[key]:
            raise CheckpointError(f"architecture mismatch on field {key!r}: checkpoint has {a[key]!r}, config has {b[key]!r}")
