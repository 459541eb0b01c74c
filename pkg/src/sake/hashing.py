"""Iterative-quantization binary codes over learned embeddings.

Fit: mean-center the training features, project onto the top principal
directions, then alternate between snapping rotated projections to the
nearest sign vectors and re-solving the rotation (orthogonal Procrustes)
that best matches those signs. Encode: threshold the rotated projection
of a centered feature at zero, packing bit b = 1 iff coordinate b >= 0.
"""

from __future__ import annotations

import struct
import warnings
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .errors import ContractViolation

CODEC_MAGIC = b"SAKEITQ1"
CODES_MAGIC = b"SAKECOD1"

_POPCOUNT = np.array([bin(i).count("1") for i in range(256)], dtype=np.int64)


@dataclass(frozen=True)
class BinaryCode:
    bits: bytes  # little-endian packed: bit b of the code is bit b%8 of byte b//8
    length: int

    def unpack(self) -> np.ndarray:
        arr = np.frombuffer(self.bits, dtype=np.uint8)
        return np.unpackbits(arr, bitorder="little")[: self.length]


@dataclass
class ItqCodec:
    mean: np.ndarray        # (M,)
    projection: np.ndarray  # (M, c) orthonormal principal directions
    rotation: np.ndarray    # (c, c) orthogonal
    code_length: int
    iterations: int = 0
    losses: list[float] | None = None  # per-round quantization loss (fit only)


def _orthogonal_init(c: int, seed: int) -> np.ndarray:
    rng = np.random.default_rng(np.random.SeedSequence([seed, 0x697471]))
    q, r = np.linalg.qr(rng.standard_normal((c, c)))
    d = np.sign(np.diag(r))
    d[d == 0] = 1.0
    return q * d


def _canonical_sign(vectors: np.ndarray) -> np.ndarray:
    """Flip each column so its largest-magnitude entry is positive."""
    idx = np.abs(vectors).argmax(axis=0)
    signs = np.sign(vectors[idx, np.arange(vectors.shape[1])])
    signs[signs == 0] = 1.0
    return vectors * signs


def itq_fit(features: np.ndarray, code_length: int, iterations: int = 50,
            seed: int = 0) -> ItqCodec:
    """Learn mean/projection/rotation from training features (n, M)."""
    feats = np.asarray(features, dtype=np.float64)
    if feats.ndim != 2:
        raise ContractViolation("training features must be a (n, M) matrix")
    n, m = feats.shape
    if code_length < 1:
        raise ContractViolation("code length must be >= 1")
    if code_length > m:
        raise ContractViolation(f"code length {code_length} exceeds "
                                f"feature dimension {m}")
    if n <= code_length:
        raise ContractViolation(
            f"need more than {code_length} training rows, got {n}")
    if not np.isfinite(feats).all():
        raise ContractViolation("training features must be finite")

    mean = feats.mean(axis=0)
    centered = feats - mean
    cov = centered.T @ centered / n
    eigvals, eigvecs = np.linalg.eigh(cov)
    order = np.argsort(eigvals)[::-1]
    eigvals, eigvecs = eigvals[order], eigvecs[:, order]
    rank = int((eigvals > max(eigvals[0], 0.0) * 1e-9).sum())
    if rank == 0:
        raise ContractViolation("features are constant; nothing to quantize")
    c = code_length
    if rank < c:
        warnings.warn(f"feature rank {rank} < code length {c}; "
                      f"reducing code length to {rank}")
        c = rank
    proj = _canonical_sign(eigvecs[:, :c])

    v = centered @ proj
    rot = _orthogonal_init(c, seed)
    losses = []
    for _ in range(iterations):
        z = v @ rot
        b = np.where(z >= 0, 1.0, -1.0)
        losses.append(float(((b - z) ** 2).sum()))
        u, _, zt = np.linalg.svd(v.T @ b)
        rot = u @ zt
    return ItqCodec(mean, proj, rot, c, iterations, losses)


def _project(codec: ItqCodec, features: np.ndarray) -> np.ndarray:
    return (features - codec.mean) @ codec.projection @ codec.rotation


def _pack_rows(signs: np.ndarray, length: int) -> list[BinaryCode]:
    packed = np.packbits(signs, axis=1, bitorder="little")
    return [BinaryCode(row.tobytes(), length) for row in packed]


def encode(codec: ItqCodec, feature: np.ndarray) -> BinaryCode:
    """One feature (M,) -> packed code; bit = 1 iff rotated coord >= 0."""
    f = np.asarray(feature, dtype=np.float64)
    if f.shape != codec.mean.shape:
        raise ContractViolation(
            f"feature shape {f.shape} != codec dimension {codec.mean.shape}")
    z = _project(codec, f[None])
    return _pack_rows(z >= 0, codec.code_length)[0]


def encode_many(codec: ItqCodec, features: np.ndarray) -> list[BinaryCode]:
    f = np.asarray(features, dtype=np.float64)
    if f.ndim != 2 or f.shape[1] != codec.mean.shape[0]:
        raise ContractViolation(
            f"features {f.shape} do not match codec dimension "
            f"{codec.mean.shape[0]}")
    return _pack_rows(_project(codec, f) >= 0, codec.code_length)


def hamming_distance(a: BinaryCode, b: BinaryCode) -> int:
    if a.length != b.length:
        raise ContractViolation(
            f"code lengths differ: {a.length} vs {b.length}")
    xa = np.frombuffer(a.bits, dtype=np.uint8)
    xb = np.frombuffer(b.bits, dtype=np.uint8)
    return int(_POPCOUNT[xa ^ xb].sum())


def hamming_many(query: BinaryCode, gallery: list[BinaryCode]) -> np.ndarray:
    """Distances from one code to a code list, as an int array."""
    if any(g.length != query.length for g in gallery):
        raise ContractViolation("gallery code length mismatch")
    q = np.frombuffer(query.bits, dtype=np.uint8)
    g = np.frombuffer(b"".join(c.bits for c in gallery),
                      dtype=np.uint8).reshape(len(gallery), len(q))
    return _POPCOUNT[g ^ q].sum(axis=1)


# -- file formats --------------------------------------------------------------
# codec: magic | u32 M | u32 c | mean (M f32 LE) | W (M*c f32 LE) | R (c*c f32 LE)
# codes: magic | u32 count | u32 code length | packed codes, ceil(c/8) bytes each

def save_codec(codec: ItqCodec, path) -> None:
    with open(path, "wb") as f:
        f.write(CODEC_MAGIC)
        f.write(struct.pack("<II", codec.mean.shape[0], codec.code_length))
        for arr in (codec.mean, codec.projection, codec.rotation):
            f.write(np.ascontiguousarray(arr, dtype="<f4").tobytes())


def load_codec(path) -> ItqCodec:
    raw = Path(path).read_bytes()
    if raw[:8] != CODEC_MAGIC:
        raise ContractViolation(f"{path}: not a codec file")
    m, c = struct.unpack_from("<II", raw, 8)
    offset = 16
    parts = []
    for shape in ((m,), (m, c), (c, c)):
        count = int(np.prod(shape))
        arr = np.frombuffer(raw, dtype="<f4", count=count, offset=offset)
        parts.append(arr.reshape(shape).astype(np.float64))
        offset += count * 4
    return ItqCodec(parts[0], parts[1], parts[2], c)


def save_codes(codes: list[BinaryCode], path) -> None:
    if not codes:
        raise ContractViolation("refusing to write an empty code file")
    length = codes[0].length
    if any(c.length != length for c in codes):
        raise ContractViolation("mixed code lengths")
    with open(path, "wb") as f:
        f.write(CODES_MAGIC)
        f.write(struct.pack("<II", len(codes), length))
        for c in codes:
            f.write(c.bits)


def load_codes(path) -> list[BinaryCode]:
    raw = Path(path).read_bytes()
    if raw[:8] != CODES_MAGIC:
        raise ContractViolation(f"{path}: not a code file")
    count, length = struct.unpack_from("<II", raw, 8)
    nbytes = (length + 7) // 8
    offset = 16
    codes = []
    for _ in range(count):
        if offset + nbytes > len(raw):
            raise ContractViolation(f"{path}: truncated code file")
        codes.append(BinaryCode(raw[offset:offset + nbytes], length))
        offset += nbytes
    return codes
