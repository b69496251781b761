"""Full network: bottleneck -> multi-scale encoder -> fusion -> pooling ->
embedding -> classifier. Also parameter counting and checkpoint files."""

from __future__ import annotations

import json
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np

from . import tensor as tn
from .blocks import Conv1x1, Module, Parameter, TCNBlock, uniform_init
from .encoder import EncoderConfig, Fusion, MultiScaleEncoder, receptive_field
from .errors import ConfigurationError, DataError
from .pooling import Pooling
from .tensor import Tensor

MAGIC = b"TARNET1\n"


@dataclass
class ModelConfig:
    n_mels: int = 80
    n_speakers: int = 10
    embed_dim: int = 192
    pooling: str = "asp"
    attention_hidden: int = 128
    encoder: EncoderConfig = field(default_factory=EncoderConfig)

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> ModelConfig:
        d = dict(d)
        d["encoder"] = EncoderConfig(**d.get("encoder", {}))
        return cls(**d)


class Linear(Module):
    """``y = x W^T + b`` on ``(..., in)`` inputs."""

    def __init__(self, n_in: int, n_out: int, rng: np.random.Generator | None = None):
        self.n_in, self.n_out = n_in, n_out
        rng = rng or np.random.default_rng(0)
        self.weight = Parameter(uniform_init(rng, (n_out, n_in), n_in))
        self.bias = Parameter(uniform_init(rng, (n_out,), n_in), decay=False)

    def __call__(self, x: Tensor) -> Tensor:
        if x.shape[-1] != self.n_in:
            raise ConfigurationError(f"linear: expected (..., {self.n_in}) input, got shape {x.shape}")
        lead = x.shape[:-1]
        x2 = x if x.ndim == 2 else tn.reshape(x, (-1, self.n_in))
        y = tn.matmul(x2, tn.transpose(self.weight)) + self.bias
        return y if x.ndim == 2 else tn.reshape(y, lead + (self.n_out,))

    @staticmethod
    def count(n_in: int, n_out: int) -> int:
        return n_in * n_out + n_out


class TarnetModel(Module):
    def __init__(self, cfg: ModelConfig, rng: np.random.Generator | int = 0):
        if not isinstance(rng, np.random.Generator):
            rng = np.random.default_rng(rng)
        if cfg.n_speakers < 2:
            raise ConfigurationError(f"need at least 2 speakers, got {cfg.n_speakers}")
        self.cfg = cfg
        enc = cfg.encoder
        self.bottleneck = Conv1x1(cfg.n_mels, enc.channels, rng)
        self.encoder = MultiScaleEncoder(enc, rng)
        self.fusion = Fusion(enc, rng)
        self.pooling = Pooling(cfg.pooling, enc.fusion, cfg.attention_hidden, rng)
        self.embedding = Linear(self.pooling.out_dim, cfg.embed_dim, rng)
        self.classifier = Linear(cfg.embed_dim, cfg.n_speakers, rng)

    def embed(self, x: Tensor) -> Tensor:
        x = tn.as_tensor(x)
        if x.ndim not in (2, 3) or x.shape[-2] != self.cfg.n_mels:
            raise ConfigurationError(
                f"model expects ({self.cfg.n_mels}, T) features, got shape {x.shape}"
            )
        z = self.fusion(self.encoder(self.bottleneck(x)))
        return tn.relu(self.embedding(self.pooling(z)))

    def __call__(self, x) -> Tensor:
        """Logits of shape (N,) for ``(F, T)`` input or (B, N) for ``(B, F, T)``."""
        return self.classifier(self.embed(x))

    def blocks(self) -> list[TCNBlock]:
        return [b for stage in self.encoder.stages for b in stage.blocks]

    def state_dict(self) -> dict[str, np.ndarray]:
        return {name: p.data for name, p in self.named_parameters()}

    def load_state_dict(self, state: dict[str, np.ndarray]) -> None:
        params = dict(self.named_parameters())
        if set(params) != set(state):
            missing = sorted(set(params) ^ set(state))
            raise ConfigurationError(f"checkpoint does not match model layout: {missing[:5]}")
        for name, p in params.items():
            if p.shape != state[name].shape:
                raise ConfigurationError(f"{name}: checkpoint shape {state[name].shape} != {p.shape}")
            p.data = np.array(state[name], dtype=np.float64)


def forward(x, m: TarnetModel) -> Tensor:
    return m(x)


def count_params(m: TarnetModel | ModelConfig) -> int:
    """Closed-form parameter total from the layer widths alone."""
    cfg = m.cfg if isinstance(m, TarnetModel) else m
    enc = cfg.encoder
    C, H, K, D = enc.channels, enc.hidden_width, enc.kernel_size, enc.fusion
    n_blocks = enc.repeats * sum(len(d) for d in enc.stage_dilations)
    pooled = D if cfg.pooling in ("max", "avg") else 2 * D
    return (
        Conv1x1.count(cfg.n_mels, C)
        + n_blocks * TCNBlock.count(C, H, K)
        + Conv1x1.count(enc.active_stages * C, D)
        + Pooling.count(cfg.pooling, D, cfg.attention_hidden)
        + Linear.count(pooled, cfg.embed_dim)
        + Linear.count(cfg.embed_dim, cfg.n_speakers)
    )


def model_receptive_field(m: TarnetModel | ModelConfig) -> int:
    cfg = m.cfg if isinstance(m, TarnetModel) else m
    return receptive_field(cfg.encoder)


# -- checkpoint files --------------------------------------------------------
#
#   TARNET1
#   meta <single-line JSON>
#   entries <n>
#   <name>\t<d0,d1,...>\t<byte offset into blob>      (n lines)
#   end
#   <blob: little-endian float64 arrays back to back>


def save_checkpoint(path, arrays: dict[str, np.ndarray], meta: dict | None = None) -> None:
    lines = [b"meta " + json.dumps(meta or {}, sort_keys=True).encode(), f"entries {len(arrays)}".encode()]
    blobs, offset = [], 0
    for name, arr in arrays.items():
        if "\t" in name or "\n" in name:
            raise ConfigurationError(f"array name {name!r} contains a tab or newline")
        arr = np.array(arr, dtype="<f8", order="C")  # ascontiguousarray would promote 0-d to 1-d
        shape = ",".join(str(n) for n in arr.shape)
        lines.append(f"{name}\t{shape}\t{offset}".encode())
        blobs.append(arr.tobytes())
        offset += arr.nbytes
    lines.append(b"end")
    path = Path(path)
    tmp = path.with_suffix(path.suffix + ".tmp")
    with open(tmp, "wb") as fh:
        fh.write(MAGIC)
        fh.write(b"\n".join(lines) + b"\n")
        for b in blobs:
            fh.write(b)
    tmp.replace(path)


def load_checkpoint(path) -> tuple[dict[str, np.ndarray], dict]:
    path = Path(path)
    if not path.is_file():
        raise DataError(f"checkpoint not found: {path}")
    raw = path.read_bytes()
    if not raw.startswith(MAGIC):
        raise DataError(f"{path}: not a TARNET1 checkpoint")
    pos = len(MAGIC)

    def next_line() -> bytes:
        nonlocal pos
        end = raw.find(b"\n", pos)
        if end < 0:
            raise DataError(f"{path}: truncated manifest")
        line, pos = raw[pos:end], end + 1
        return line

    meta_line = next_line()
    if not meta_line.startswith(b"meta "):
        raise DataError(f"{path}: missing meta line")
    meta = json.loads(meta_line[5:])
    count_line = next_line().split()
    if len(count_line) != 2 or count_line[0] != b"entries":
        raise DataError(f"{path}: missing entries line")
    manifest = []
    for _ in range(int(count_line[1])):
        name, shape, offset = next_line().decode().split("\t")
        dims = tuple(int(s) for s in shape.split(",")) if shape else ()
        manifest.append((name, dims, int(offset)))
    if next_line() != b"end":
        raise DataError(f"{path}: manifest not terminated")
    blob = raw[pos:]
    arrays = {}
    for name, dims, offset in manifest:
        n = int(np.prod(dims)) if dims else 1
        if offset + 8 * n > len(blob):
            raise DataError(f"{path}: array {name} runs past end of file")
        arrays[name] = np.frombuffer(blob, dtype="<f8", count=n, offset=offset).reshape(dims).copy()
    return arrays, meta


def save_model(path, m: TarnetModel, extra_meta: dict | None = None, extra_arrays: dict | None = None) -> None:
    meta = {"model": m.cfg.to_dict(), **(extra_meta or {})}
    arrays = {f"param.{k}": v for k, v in m.state_dict().items()}
    save_checkpoint(path, {**arrays, **(extra_arrays or {})}, meta)


def load_model(path) -> tuple[TarnetModel, dict[str, np.ndarray], dict]:
    """Rebuild a model from a checkpoint. Returns (model, non-parameter arrays, meta)."""
    arrays, meta = load_checkpoint(path)
    if "model" not in meta:
        raise DataError(f"{path}: checkpoint has no model config")
    model = TarnetModel(ModelConfig.from_dict(meta["model"]), rng=0)
    params = {k[len("param."):]: v for k, v in arrays.items() if k.startswith("param.")}
    model.load_state_dict(params)
    rest = {k: v for k, v in arrays.items() if not k.startswith("param.")}
    return model, rest, meta
