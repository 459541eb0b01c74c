"""Unified embedding network shared by photos and sketches.

A small stack of stride-2 conv blocks, each followed by a conditional
channel gate: global-average-pooled channel statistics pass through two
fully connected layers and a sigmoid, with the input's modality bit
appended between the layers so the same backbone can re-weight channels
differently for photos and sketches. The pooled features project
linearly to an embedding, on top of which sit two linear classifier
heads (benchmark classes and original-domain classes).
"""

from __future__ import annotations

import json
import struct
from dataclasses import asdict, dataclass
from pathlib import Path

import numpy as np

from .errors import ContractViolation
from .tensor import (Tensor, concat, conv2d, global_avg_pool, matmul, relu,
                     reshape, sigmoid, softmax_nd)

CHECKPOINT_MAGIC = b"SAKEMDL1"
CHECKPOINT_VERSION = 1


@dataclass
class ModelConfig:
    input_size: int = 32
    channels: tuple[int, ...] = (8, 16, 32)
    reduction: int = 8
    embed_dim: int = 64
    num_source_classes: int = 10
    num_original_classes: int = 20
    domain_code_width: int = 1

    def __post_init__(self):
        self.channels = tuple(int(c) for c in self.channels)
        if not (2 <= len(self.channels) <= 3):
            raise ContractViolation("backbone uses 2 or 3 conv blocks")
        if self.reduction < 1 or self.embed_dim < 1:
            raise ContractViolation("reduction and embed_dim must be >= 1")
        if self.domain_code_width < 0:
            raise ContractViolation("domain_code_width must be >= 0")
        if self.input_size % (2 ** len(self.channels)) != 0:
            raise ContractViolation("input size must survive stride-2 blocks")

    def to_dict(self) -> dict:
        d = asdict(self)
        d["channels"] = list(self.channels)
        return d


class ModelParams:
    """All learnable weights, as an ordered name -> Tensor mapping.

    The insertion order is the declared checkpoint order.
    """

    def __init__(self, config: ModelConfig, params: dict[str, Tensor]):
        self.config = config
        self.params = params

    def __getitem__(self, name: str) -> Tensor:
        return self.params[name]

    def names(self) -> list[str]:
        return list(self.params)

    def bias_names(self) -> frozenset[str]:
        return frozenset(n for n in self.params if n.endswith("_b"))

    def backbone_names(self) -> list[str]:
        return [n for n in self.params
                if not n.startswith(("bench_", "orig_"))]

    def original_head_names(self) -> list[str]:
        return [n for n in self.params if n.startswith("orig_")]

    def benchmark_head_names(self) -> list[str]:
        return [n for n in self.params if n.startswith("bench_")]

    def subset(self, names) -> dict[str, Tensor]:
        return {n: self.params[n] for n in names}

    def copy(self) -> "ModelParams":
        return ModelParams(self.config, {
            n: Tensor(p.data.copy(), requires_grad=p.requires_grad)
            for n, p in self.params.items()})

    def astype(self, dtype) -> "ModelParams":
        return ModelParams(self.config, {
            n: Tensor(p.data.astype(dtype), requires_grad=p.requires_grad)
            for n, p in self.params.items()})

    def zero_grads(self) -> None:
        for p in self.params.values():
            p.zero_grad()


def init_params(config: ModelConfig, seed: int, dtype=np.float32) -> ModelParams:
    """Fan-in scaled random weights, zero biases, in declared order."""
    rng = np.random.default_rng(np.random.SeedSequence([seed, 0x6D6F64]))

    def kaiming(shape, fan_in):
        std = np.sqrt(2.0 / fan_in)
        return Tensor((rng.standard_normal(shape) * std).astype(dtype),
                      requires_grad=True)

    def zeros(shape):
        return Tensor(np.zeros(shape, dtype=dtype), requires_grad=True)

    p: dict[str, Tensor] = {}
    in_ch = 1
    for i, out_ch in enumerate(config.channels, start=1):
        p[f"conv{i}_w"] = kaiming((out_ch, in_ch, 3, 3), in_ch * 9)
        p[f"conv{i}_b"] = zeros((out_ch,))
        r = config.reduction
        p[f"cse{i}_fc1_w"] = kaiming((out_ch, r), out_ch)
        p[f"cse{i}_fc1_b"] = zeros((r,))
        gate_in = r + config.domain_code_width
        p[f"cse{i}_fc2_w"] = kaiming((gate_in, out_ch), gate_in)
        p[f"cse{i}_fc2_b"] = zeros((out_ch,))
        in_ch = out_ch
    p["proj_w"] = kaiming((in_ch, config.embed_dim), in_ch)
    p["proj_b"] = zeros((config.embed_dim,))
    p["bench_w"] = kaiming((config.embed_dim, config.num_source_classes),
                           config.embed_dim)
    p["bench_b"] = zeros((config.num_source_classes,))
    p["orig_w"] = kaiming((config.embed_dim, config.num_original_classes),
                          config.embed_dim)
    p["orig_b"] = zeros((config.num_original_classes,))
    return ModelParams(config, p)


def reinit_benchmark_head(params: ModelParams, seed: int) -> None:
    """Fresh benchmark head in place (used when adapting a pretrained net)."""
    cfg = params.config
    rng = np.random.default_rng(np.random.SeedSequence([seed, 0x68656164]))
    std = np.sqrt(2.0 / cfg.embed_dim)
    dtype = params["bench_w"].data.dtype
    params["bench_w"].data = (rng.standard_normal(
        (cfg.embed_dim, cfg.num_source_classes)) * std).astype(dtype)
    params["bench_b"].data = np.zeros(cfg.num_source_classes, dtype=dtype)


def _domain_column(domains, n: int, width: int, dtype) -> np.ndarray:
    d = np.asarray(domains, dtype=dtype)
    if d.ndim == 0:
        d = np.full(n, float(d), dtype=dtype)
    if d.shape != (n,):
        raise ContractViolation(f"domain vector shape {d.shape} != ({n},)")
    if not np.isin(d, (0.0, 1.0)).all():
        raise ContractViolation("domain bits must be 0 (photo) or 1 (sketch)")
    return np.repeat(d.reshape(n, 1), width, axis=1)


def cse_gate(block_out: Tensor, domains, params: ModelParams,
             block: int) -> Tensor:
    """Channel re-weighting conditioned on the modality bit.

    gate = sigmoid(fc2(concat(relu(fc1(avgpool(x))), domain_bits)));
    every gate value lies strictly in (0, 1).
    """
    n, c = block_out.shape[0], block_out.shape[1]
    z = global_avg_pool(block_out)
    u = relu(matmul(z, params[f"cse{block}_fc1_w"]) + params[f"cse{block}_fc1_b"])
    width = params.config.domain_code_width
    if width > 0:
        dcol = Tensor(_domain_column(domains, n, width, block_out.data.dtype))
        u = concat([u, dcol], axis=1)
    gate = sigmoid(matmul(u, params[f"cse{block}_fc2_w"])
                   + params[f"cse{block}_fc2_b"])
    return block_out * reshape(gate, (n, c, 1, 1))


def cse_forward(block_input: Tensor, domain: int, params: ModelParams,
                block: int = 1) -> Tensor:
    """Single-sample gate application on a (C, H, W) tensor."""
    if block_input.data.ndim != 3:
        raise ContractViolation("cse_forward expects a (C, H, W) input")
    c = block_input.shape[0]
    if c != params.config.channels[block - 1]:
        raise ContractViolation(
            f"channel count {c} does not match block {block}")
    batched = reshape(block_input, (1,) + tuple(block_input.shape))
    out = cse_gate(batched, np.array([float(domain)]), params, block)
    return reshape(out, tuple(block_input.shape))


def embed_batch(params: ModelParams, images, domains) -> Tensor:
    """Feature vectors for a batch: (N, 1, H, W) images -> (N, M).

    Images are standardized per sample (zero mean, unit variance) before
    the first convolution.  Without any normalization in the stack, the
    signal reaching the head varies widely across init seeds; fixing the
    input scale keeps the default learning-rate schedule stable, and it
    puts sparse sketches and dense photos on a comparable footing.
    """
    x = images if isinstance(images, Tensor) else Tensor(images)
    if x.data.ndim != 4 or x.shape[1] != 1:
        raise ContractViolation(f"expected (N, 1, H, W) images, got {x.shape}")
    if x.shape[2] != params.config.input_size or x.shape[3] != params.config.input_size:
        raise ContractViolation(
            f"image side {x.shape[2:]}, configured {params.config.input_size}")
    mu = x.data.mean(axis=(1, 2, 3), keepdims=True)
    sd = x.data.std(axis=(1, 2, 3), keepdims=True) + np.float32(1e-6)
    x = (x + Tensor(-mu)) * Tensor(1.0 / sd)
    for i in range(1, len(params.config.channels) + 1):
        x = conv2d(x, params[f"conv{i}_w"], params[f"conv{i}_b"],
                   stride=2, padding=1)
        x = relu(x)
        x = cse_gate(x, domains, params, i)
    pooled = global_avg_pool(x)
    return matmul(pooled, params["proj_w"]) + params["proj_b"]


def embed(image, domain: int, params: ModelParams) -> np.ndarray:
    """Deterministic embedding of one image; returns a plain (M,) array."""
    arr = np.asarray(image.data if isinstance(image, Tensor) else image)
    if arr.ndim == 2:
        arr = arr[None]
    if arr.ndim != 3 or arr.shape[0] != 1:
        raise ContractViolation(f"expected a (1, H, W) image, got {arr.shape}")
    from .tensor import no_grad
    with no_grad():
        out = embed_batch(params, arr[None], np.array([float(domain)]))
    return out.data[0]


def embed_samples(params: ModelParams, samples, batch_size: int = 256) -> np.ndarray:
    """Embeddings for a sample sequence (uses each sample's modality bit)."""
    from .tensor import no_grad
    chunks = []
    with no_grad():
        for lo in range(0, len(samples), batch_size):
            part = samples[lo:lo + batch_size]
            images = np.stack([s.image for s in part])
            domains = np.array([float(s.modality) for s in part])
            chunks.append(embed_batch(params, images, domains).data)
    return np.concatenate(chunks, axis=0)


def benchmark_logits(params: ModelParams, x: Tensor) -> Tensor:
    return matmul(x, params["bench_w"]) + params["bench_b"]


def original_logits(params: ModelParams, x: Tensor) -> Tensor:
    return matmul(x, params["orig_w"]) + params["orig_b"]


def classify_benchmark(x, params: ModelParams) -> np.ndarray:
    """Probability vector over benchmark classes for one embedding."""
    arr = np.asarray(x.data if isinstance(x, Tensor) else x, dtype=np.float64)
    logits = arr @ params["bench_w"].data.astype(np.float64) \
        + params["bench_b"].data.astype(np.float64)
    return softmax_nd(logits, axis=-1)


def classify_original(x, params: ModelParams) -> np.ndarray:
    """Probability vector over original-domain classes for one embedding."""
    arr = np.asarray(x.data if isinstance(x, Tensor) else x, dtype=np.float64)
    logits = arr @ params["orig_w"].data.astype(np.float64) \
        + params["orig_b"].data.astype(np.float64)
    return softmax_nd(logits, axis=-1)


# -- checkpoint format --------------------------------------------------------
# magic (8 bytes) | u32 header length | header JSON | f32 LE parameter data
# in declared order. The header records the config and every (name, shape).

def save_checkpoint(params: ModelParams, path) -> None:
    header = {
        "version": CHECKPOINT_VERSION,
        "config": params.config.to_dict(),
        "params": [[n, list(p.shape)] for n, p in params.params.items()],
    }
    blob = json.dumps(header, sort_keys=True, separators=(",", ":")).encode()
    with open(path, "wb") as f:
        f.write(CHECKPOINT_MAGIC)
        f.write(struct.pack("<I", len(blob)))
        f.write(blob)
        for p in params.params.values():
            f.write(p.data.astype("<f4", copy=False).tobytes())


def load_checkpoint(path) -> ModelParams:
    raw = Path(path).read_bytes()
    if raw[:8] != CHECKPOINT_MAGIC:
        raise ContractViolation(f"{path}: not a model checkpoint")
    (hlen,) = struct.unpack_from("<I", raw, 8)
    header = json.loads(raw[12:12 + hlen].decode())
    if header.get("version") != CHECKPOINT_VERSION:
        raise ContractViolation(
            f"{path}: unsupported checkpoint version {header.get('version')}")
    cfg_dict = dict(header["config"])
    cfg = ModelConfig(**cfg_dict)
    offset = 12 + hlen
    params: dict[str, Tensor] = {}
    for name, shape in header["params"]:
        count = int(np.prod(shape)) if shape else 1
        arr = np.frombuffer(raw, dtype="<f4", count=count, offset=offset)
        offset += count * 4
        params[name] = Tensor(arr.reshape(shape).copy(), requires_grad=True)
    return ModelParams(cfg, params)
