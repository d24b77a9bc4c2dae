"""Tiny post-LN transformer encoder with MLM, task and domain heads."""

from __future__ import annotations

import hashlib
import math
import struct
from dataclasses import asdict, dataclass, fields
from pathlib import Path

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor

MAGIC = b"UDALMCK1"


@dataclass(frozen=True)
class EncoderConfig:
    vocab_size: int
    layers: int = 2
    hidden: int = 64
    heads: int = 4
    ff_dim: int = 128
    max_len: int = 128
    num_classes: int = 2
    domain_hidden: int = 64
    tie_mlm_weights: bool = False
    init_gain: float = 1.0

    def __post_init__(self):
        for f in ("vocab_size", "layers", "hidden", "heads", "ff_dim", "max_len", "num_classes"):
            if getattr(self, f) <= 0:
                raise ValueError(f"EncoderConfig.{f} must be positive")
        if self.domain_hidden < 0:
            raise ValueError("EncoderConfig.domain_hidden must be >= 0")
        if self.hidden % self.heads:
            raise ValueError(f"hidden={self.hidden} not divisible by heads={self.heads}")


ENCODER_PREFIXES = ("tok_emb", "pos_emb", "emb_ln", "layer")
HEAD_PREFIXES = {"mlm": ("mlm_",), "clf": ("clf_",), "dom": ("dom_",)}


@dataclass
class EncoderParams:
    config: EncoderConfig
    arrays: dict[str, np.ndarray]

    def copy(self) -> "EncoderParams":
        return EncoderParams(self.config, {k: v.copy() for k, v in self.arrays.items()})

    def names(self, *groups: str) -> list[str]:
        """Parameter names belonging to ``groups`` ('encoder', 'mlm', 'clf', 'dom')."""
        out = []
        for name in self.arrays:
            if "encoder" in groups and name.startswith(ENCODER_PREFIXES):
                out.append(name)
            elif any(name.startswith(HEAD_PREFIXES[g]) for g in groups if g in HEAD_PREFIXES):
                out.append(name)
        return out

    def equal(self, other: "EncoderParams") -> bool:
        return (self.config == other.config and self.arrays.keys() == other.arrays.keys()
                and all(np.array_equal(v, other.arrays[k]) for k, v in self.arrays.items()))


def init_params(config: EncoderConfig, seed: int) -> EncoderParams:
    """Weights ~ N(0, gain^2 / fan_in); embeddings ~ N(0, 0.02^2); biases 0, LN gains 1."""
    rng = np.random.default_rng(seed)
    H, F, V = config.hidden, config.ff_dim, config.vocab_size
    g = config.init_gain
    a: dict[str, np.ndarray] = {}

    def dense(name, fan_in, fan_out):
        a[name + "_w"] = rng.normal(0.0, g / math.sqrt(fan_in), size=(fan_in, fan_out))
        a[name + "_b"] = np.zeros(fan_out)

    def norm(name, dim):
        a[name + "_g"] = np.ones(dim)
        a[name + "_b"] = np.zeros(dim)

    a["tok_emb"] = rng.normal(0.0, 0.02, size=(V, H))
    a["pos_emb"] = rng.normal(0.0, 0.02, size=(config.max_len, H))
    norm("emb_ln", H)
    for i in range(config.layers):
        p = f"layer{i}."
        for m in ("q", "k", "v", "o"):
            dense(p + m, H, H)
        norm(p + "ln1", H)
        dense(p + "ff1", H, F)
        dense(p + "ff2", F, H)
        norm(p + "ln2", H)
    if config.tie_mlm_weights:
        a["mlm_b"] = np.zeros(V)
    else:
        dense("mlm", H, V)
    dense("clf", H, config.num_classes)
    if config.domain_hidden:
        dense("dom_hid", H, config.domain_hidden)
        dense("dom_out", config.domain_hidden, 2)
    else:
        dense("dom_out", H, 2)
    return EncoderParams(config, a)


# ---------------------------------------------------------------------------
# forward


def _dense(x: Tensor, p: dict[str, Tensor], name: str) -> Tensor:
    return ad.matmul(x, p[name + "_w"]) + p[name + "_b"]


def _ln(x: Tensor, p: dict[str, Tensor], name: str) -> Tensor:
    return ad.layer_norm(x, p[name + "_g"], p[name + "_b"])


def encode_sequence(p: dict[str, Tensor], config: EncoderConfig, ids: np.ndarray,
                    attention_mask: np.ndarray) -> tuple[Tensor, Tensor]:
    """Run the encoder on a (B, L) batch; returns hidden states (B, L, H) and CLS features (B, H).

    ``L`` may be shorter than ``config.max_len`` (tail padding trimmed); the
    outputs at real positions are unaffected since padding is masked out of
    attention.
    """
    ids = np.asarray(ids)
    attention_mask = np.asarray(attention_mask)
    if ids.ndim == 1:
        ids, attention_mask = ids[None], attention_mask[None]
    if ids.shape != attention_mask.shape or ids.ndim != 2:
        raise ValueError(f"ids {ids.shape} and attention_mask {attention_mask.shape} must be matching (B, L)")
    B, L = ids.shape
    if L > config.max_len:
        raise ValueError(f"sequence length {L} exceeds max_len {config.max_len}")
    if ids.max(initial=0) >= config.vocab_size or ids.min(initial=0) < 0:
        raise ValueError(f"token id outside vocab_size {config.vocab_size}")
    H, nh = config.hidden, config.heads
    dh = H // nh

    x = ad.embedding(p["tok_emb"], ids) + p["pos_emb"][:L]
    x = _ln(x, p, "emb_ln")
    key_mask = (attention_mask != 0)[:, None, None, :]
    scale = 1.0 / math.sqrt(dh)
    for i in range(config.layers):
        pre = f"layer{i}."

        def heads(t):
            return t.reshape(B, L, nh, dh).transpose(0, 2, 1, 3)

        q = heads(_dense(x, p, pre + "q"))
        k = heads(_dense(x, p, pre + "k"))
        v = heads(_dense(x, p, pre + "v"))
        scores = ad.matmul(q, k.transpose(0, 1, 3, 2)) * scale
        attn = ad.softmax(scores, key_mask)
        ctx = ad.matmul(attn, v).transpose(0, 2, 1, 3).reshape(B, L, H)
        x = _ln(x + _dense(ctx, p, pre + "o"), p, pre + "ln1")
        ff = _dense(ad.gelu(_dense(x, p, pre + "ff1")), p, pre + "ff2")
        x = _ln(x + ff, p, pre + "ln2")
    return x, x[:, 0, :]


def mlm_logits(p: dict[str, Tensor], config: EncoderConfig, hidden: Tensor,
               positions: np.ndarray) -> Tensor:
    """Vocabulary logits at flat ``positions`` (indices into B*L) of ``hidden``."""
    B, L, H = hidden.shape
    positions = np.asarray(positions, dtype=np.int64)
    if positions.size and (positions.min() < 0 or positions.max() >= B * L):
        raise IndexError(f"mlm position out of range [0, {B * L})")
    rows = hidden.reshape(B * L, H)[positions]
    if config.tie_mlm_weights:
        return ad.matmul(rows, p["tok_emb"].transpose(1, 0)) + p["mlm_b"]
    return _dense(rows, p, "mlm")


def clf_logits(p: dict[str, Tensor], cls_feature: Tensor) -> Tensor:
    return _dense(cls_feature, p, "clf")


def domain_logits(p: dict[str, Tensor], cls_feature: Tensor, lambda_d: float) -> Tensor:
    h = ad.grad_reverse(cls_feature, lambda_d)
    if "dom_hid_w" in p:
        h = ad.relu(_dense(h, p, "dom_hid"))
    return _dense(h, p, "dom_out")


def mlm_loss(p, config, hidden: Tensor, mlm_labels: np.ndarray) -> Tensor:
    flat = np.asarray(mlm_labels).reshape(-1)
    positions = np.nonzero(flat != ad.IGNORE_INDEX)[0]
    if positions.size == 0:
        return Tensor(0.0)
    return ad.cross_entropy(mlm_logits(p, config, hidden, positions), flat[positions])


def cls_features(params: EncoderParams, ids: np.ndarray, attention_mask: np.ndarray,
                 chunk: int = 64) -> np.ndarray:
    """CLS features for many sequences, no graph kept."""
    p = {k: Tensor(v) for k, v in params.arrays.items()}
    out = []
    for s in range(0, len(ids), chunk):
        m = attention_mask[s : s + chunk]
        w = int(m.sum(axis=1).max())
        _, cls = encode_sequence(p, params.config, ids[s : s + chunk, :w], m[:, :w])
        out.append(cls.data)
    return np.concatenate(out) if out else np.zeros((0, params.config.hidden))


# ---------------------------------------------------------------------------
# checkpoints


class CheckpointError(ValueError):
    pass


def _config_header(config: EncoderConfig) -> bytes:
    return "".join(f"{k}={v}\n" for k, v in asdict(config).items()).encode()


def _parse_header(text: str) -> EncoderConfig:
    kinds = {f.name: f.type for f in fields(EncoderConfig)}
    kw = {}
    for line in text.splitlines():
        key, _, val = line.partition("=")
        if key not in kinds:
            raise CheckpointError(f"unknown config field {key!r}")
        t = kinds[key]
        kw[key] = (val == "True") if t in (bool, "bool") else float(val) if t in (float, "float") else int(val)
    return EncoderConfig(**kw)


def save_params(params: EncoderParams, path) -> None:
    """Layout: magic, header length + config header, then per tensor
    (name, ndim, shape, little-endian float64 data), then a sha256 of all
    preceding bytes."""
    body = bytearray(MAGIC)
    header = _config_header(params.config)
    body += struct.pack("<I", len(header)) + header
    body += struct.pack("<I", len(params.arrays))
    for name in sorted(params.arrays):
        arr = np.ascontiguousarray(params.arrays[name], dtype="<f8")
        nb = name.encode()
        body += struct.pack("<H", len(nb)) + nb
        body += struct.pack("<B", arr.ndim) + struct.pack(f"<{arr.ndim}Q", *arr.shape)
        body += arr.tobytes()
    body += hashlib.sha256(body).digest()
    path = Path(path)
    tmp = path.with_suffix(path.suffix + ".tmp")
    tmp.write_bytes(bytes(body))
    tmp.replace(path)


def load_params(path, expect: EncoderConfig | None = None) -> EncoderParams:
    raw = Path(path).read_bytes()
    if raw[: len(MAGIC)] != MAGIC:
        raise CheckpointError(f"{path}: not a checkpoint (bad magic)")
    body, digest = raw[:-32], raw[-32:]
    if hashlib.sha256(body).digest() != digest:
        raise CheckpointError(f"{path}: checksum mismatch")
    off = len(MAGIC)
    (hlen,) = struct.unpack_from("<I", body, off)
    off += 4
    config = _parse_header(body[off : off + hlen].decode())
    off += hlen
    if expect is not None:
        for f in fields(EncoderConfig):
            got, want = getattr(config, f.name), getattr(expect, f.name)
            if got != want:
                raise CheckpointError(f"config mismatch on {f.name}: checkpoint has {got}, expected {want}")
    (count,) = struct.unpack_from("<I", body, off)
    off += 4
    arrays = {}
    for _ in range(count):
        (nlen,) = struct.unpack_from("<H", body, off)
        off += 2
        name = body[off : off + nlen].decode()
        off += nlen
        (ndim,) = struct.unpack_from("<B", body, off)
        off += 1
        shape = struct.unpack_from(f"<{ndim}Q", body, off)
        off += 8 * ndim
        n = int(np.prod(shape)) if ndim else 1
        arrays[name] = np.frombuffer(body, dtype="<f8", count=n, offset=off).reshape(shape).astype(np.float64)
        off += 8 * n
    params = EncoderParams(config, arrays)
    reference = init_params(config, 0)
    for name, arr in reference.arrays.items():
        if name not in arrays or arrays[name].shape != arr.shape:
            raise CheckpointError(f"tensor {name} missing or mis-shaped for config")
    return params
