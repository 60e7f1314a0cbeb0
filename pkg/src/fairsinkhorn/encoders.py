"""Small dual encoders with hand-written backprop, Adam, and checkpoint files.

Checkpoint layout (all integers little-endian)::

    8 bytes   magic  b"FSKCKPT\\0"
    4 bytes   header length H (uint32)
    H bytes   UTF-8 JSON header: {"format_version", "checksum", "payload_length"}
    payload   UTF-8 JSON manifest length M (uint32) + manifest + raw array bytes

The manifest names every array with dtype, shape and byte offset into the
array block. ``checksum`` is the SHA-256 of the payload.
"""

from __future__ import annotations

import hashlib
import json
import struct
from dataclasses import dataclass, field
from pathlib import Path
from typing import Literal, Sequence

import numpy as np

CHECKPOINT_FORMAT_VERSION = 1
_MAGIC = b"FSKCKPT\0"

# beta presets; "fairclip" is the low-momentum (0.1, 0.1) fine-tuning setting
ADAM_PRESETS = {
    "default": (0.9, 0.999),
    "fairclip": (0.1, 0.1),
}


class CheckpointError(ValueError):
    pass


@dataclass
class EncoderParams:
    kind: Literal["linear", "mlp1"]
    weights: list[np.ndarray]
    biases: list[np.ndarray]

    def __post_init__(self):
        if self.kind not in ("linear", "mlp1"):
            raise ValueError(f"unknown encoder kind {self.kind!r}")
        expected = 1 if self.kind == "linear" else 2
        if len(self.weights) != expected or len(self.biases) != expected:
            raise ValueError(f"{self.kind} encoder needs {expected} layer(s)")
        for w, b in zip(self.weights, self.biases):
            if w.ndim != 2 or b.shape != (w.shape[1],):
                raise ValueError(f"inconsistent layer shapes {w.shape} / {b.shape}")
            if not (np.all(np.isfinite(w)) and np.all(np.isfinite(b))):
                raise ValueError("encoder parameters must be finite")
        for w_prev, w_next in zip(self.weights, self.weights[1:]):
            if w_prev.shape[1] != w_next.shape[0]:
                raise ValueError("layer widths do not chain")

    @property
    def input_dim(self) -> int:
        return self.weights[0].shape[0]

    @property
    def output_dim(self) -> int:
        return self.weights[-1].shape[1]

    @property
    def hidden_dim(self) -> int | None:
        return self.weights[0].shape[1] if self.kind == "mlp1" else None

    def arrays(self) -> list[np.ndarray]:
        out = []
        for w, b in zip(self.weights, self.biases):
            out += [w, b]
        return out

    @classmethod
    def from_arrays(cls, kind, arrays: Sequence[np.ndarray]) -> "EncoderParams":
        return cls(kind, list(arrays[0::2]), list(arrays[1::2]))


def init_encoder(kind: str, input_dim: int, output_dim: int, rng: np.random.Generator,
                 hidden_dim: int | None = None) -> EncoderParams:
    """Uniform(-1/sqrt(fan_in), 1/sqrt(fan_in)) weights and biases."""
    if kind == "linear":
        dims = [input_dim, output_dim]
    elif kind == "mlp1":
        if not hidden_dim:
            raise ValueError("mlp1 needs hidden_dim")
        dims = [input_dim, hidden_dim, output_dim]
    else:
        raise ValueError(f"unknown encoder kind {kind!r}")
    weights, biases = [], []
    for fan_in, fan_out in zip(dims, dims[1:]):
        bound = 1.0 / np.sqrt(fan_in)
        weights.append(rng.uniform(-bound, bound, size=(fan_in, fan_out)))
        biases.append(rng.uniform(-bound, bound, size=fan_out))
    return EncoderParams(kind, weights, biases)


def _check_input(enc: EncoderParams, inputs: np.ndarray) -> np.ndarray:
    x = np.asarray(inputs, dtype=np.float64)
    if x.ndim != 2 or x.shape[1] != enc.input_dim:
        raise ValueError(f"expected inputs of shape (K, {enc.input_dim}), got {x.shape}")
    return x


def forward(enc: EncoderParams, inputs: np.ndarray) -> np.ndarray:
    x = _check_input(enc, inputs)
    if enc.kind == "linear":
        return x @ enc.weights[0] + enc.biases[0]
    h = np.maximum(x @ enc.weights[0] + enc.biases[0], 0.0)
    return h @ enc.weights[1] + enc.biases[1]


@dataclass
class EncoderGrads:
    weights: list[np.ndarray]
    biases: list[np.ndarray]

    def arrays(self) -> list[np.ndarray]:
        out = []
        for w, b in zip(self.weights, self.biases):
            out += [w, b]
        return out


def backward(enc: EncoderParams, inputs: np.ndarray,
             grad_output: np.ndarray) -> tuple[EncoderGrads, np.ndarray]:
    """Parameter and input gradients given dL/d(output)."""
    x = _check_input(enc, inputs)
    g = np.asarray(grad_output, dtype=np.float64)
    if g.shape != (x.shape[0], enc.output_dim):
        raise ValueError(f"grad_output shape {g.shape} does not match ({x.shape[0]}, {enc.output_dim})")
    if enc.kind == "linear":
        return EncoderGrads([x.T @ g], [g.sum(axis=0)]), g @ enc.weights[0].T
    pre = x @ enc.weights[0] + enc.biases[0]
    h = np.maximum(pre, 0.0)
    dW2 = h.T @ g
    db2 = g.sum(axis=0)
    dpre = (g @ enc.weights[1].T) * (pre > 0)
    dW1 = x.T @ dpre
    db1 = dpre.sum(axis=0)
    return EncoderGrads([dW1, dW2], [db1, db2]), dpre @ enc.weights[0].T


@dataclass
class OptimizerState:
    """Adam with decoupled weight decay."""

    learning_rate: float = 1e-5
    beta1: float = 0.9
    beta2: float = 0.999
    weight_decay: float = 6e-5
    eps: float = 1e-8
    method: str = "adam"
    step_count: int = 0
    first_moment: list[np.ndarray] = field(default_factory=list)
    second_moment: list[np.ndarray] = field(default_factory=list)

    @classmethod
    def fresh(cls, params: Sequence[np.ndarray], **hyper) -> "OptimizerState":
        return cls(first_moment=[np.zeros_like(p) for p in params],
                   second_moment=[np.zeros_like(p) for p in params], **hyper)


def optimizer_step(params: Sequence[np.ndarray], grads: Sequence[np.ndarray],
                   state: OptimizerState) -> tuple[list[np.ndarray], OptimizerState]:
    if len(params) != len(grads) or len(params) != len(state.first_moment):
        raise ValueError("params, grads and optimizer state disagree in length")
    for i, (p, g) in enumerate(zip(params, grads)):
        if p.shape != g.shape or p.shape != state.first_moment[i].shape:
            raise ValueError(f"shape mismatch at parameter {i}")
        if not np.all(np.isfinite(g)):
            raise FloatingPointError(f"non-finite gradient for parameter {i}")

    t = state.step_count + 1
    b1, b2 = state.beta1, state.beta2
    new_params, m_new, v_new = [], [], []
    for p, g, m, v in zip(params, grads, state.first_moment, state.second_moment):
        m = b1 * m + (1.0 - b1) * g
        v = b2 * v + (1.0 - b2) * (g * g)
        m_hat = m / (1.0 - b1 ** t)
        v_hat = v / (1.0 - b2 ** t)
        update = m_hat / (np.sqrt(v_hat) + state.eps)
        if state.weight_decay:
            update = update + state.weight_decay * p
        with np.errstate(over="ignore", invalid="ignore"):
            p_new = p - state.learning_rate * update
        if not np.all(np.isfinite(p_new)):
            raise FloatingPointError(f"non-finite parameter {len(new_params)} after the update")
        new_params.append(p_new)
        m_new.append(m)
        v_new.append(v)
    new_state = OptimizerState(
        learning_rate=state.learning_rate, beta1=b1, beta2=b2,
        weight_decay=state.weight_decay, eps=state.eps, method=state.method,
        step_count=t, first_moment=m_new, second_moment=v_new,
    )
    return new_params, new_state


@dataclass
class Checkpoint:
    image_encoder: EncoderParams
    text_encoder: EncoderParams
    optimizer: OptimizerState
    config_hash: str = ""
    rng_state: dict = field(default_factory=dict)
    epoch: int = 0
    format_version: int = CHECKPOINT_FORMAT_VERSION


def _pack_arrays(named: list[tuple[str, np.ndarray]]) -> tuple[list[dict], bytes]:
    entries, blobs, offset = [], [], 0
    for name, arr in named:
        data = np.ascontiguousarray(arr, dtype="<f8").tobytes()
        entries.append({"name": name, "dtype": "<f8", "shape": list(arr.shape),
                        "offset": offset, "nbytes": len(data)})
        blobs.append(data)
        offset += len(data)
    return entries, b"".join(blobs)


def save_checkpoint(ckpt: Checkpoint, path) -> None:
    named: list[tuple[str, np.ndarray]] = []
    for side, enc in (("image", ckpt.image_encoder), ("text", ckpt.text_encoder)):
        named += [(f"{side}.{i}", a) for i, a in enumerate(enc.arrays())]
    opt = ckpt.optimizer
    named += [(f"opt.m.{i}", a) for i, a in enumerate(opt.first_moment)]
    named += [(f"opt.v.{i}", a) for i, a in enumerate(opt.second_moment)]
    entries, blob = _pack_arrays(named)
    manifest = {
        "image_kind": ckpt.image_encoder.kind,
        "text_kind": ckpt.text_encoder.kind,
        "optimizer": {
            "method": opt.method, "learning_rate": opt.learning_rate, "beta1": opt.beta1,
            "beta2": opt.beta2, "weight_decay": opt.weight_decay, "eps": opt.eps,
            "step_count": opt.step_count, "n_params": len(opt.first_moment),
        },
        "config_hash": ckpt.config_hash,
        "rng_state": ckpt.rng_state,
        "epoch": ckpt.epoch,
        "arrays": entries,
    }
    manifest_bytes = json.dumps(manifest, sort_keys=True).encode()
    payload = struct.pack("<I", len(manifest_bytes)) + manifest_bytes + blob
    header = json.dumps({
        "format_version": ckpt.format_version,
        "checksum": hashlib.sha256(payload).hexdigest(),
        "payload_length": len(payload),
    }, sort_keys=True).encode()
    Path(path).write_bytes(_MAGIC + struct.pack("<I", len(header)) + header + payload)


def load_checkpoint(path) -> Checkpoint:
    raw = Path(path).read_bytes()
    if not raw.startswith(_MAGIC) or len(raw) < len(_MAGIC) + 4:
        raise CheckpointError(f"{path}: not a checkpoint file")
    pos = len(_MAGIC)
    (hlen,) = struct.unpack_from("<I", raw, pos)
    pos += 4
    try:
        header = json.loads(raw[pos:pos + hlen])
    except ValueError as exc:
        raise CheckpointError(f"{path}: corrupted header") from exc
    pos += hlen
    if header.get("format_version") != CHECKPOINT_FORMAT_VERSION:
        raise CheckpointError(
            f"{path}: format_version {header.get('format_version')} unsupported "
            f"(expected {CHECKPOINT_FORMAT_VERSION})")
    payload = raw[pos:]
    if len(payload) != header["payload_length"] or \
            hashlib.sha256(payload).hexdigest() != header["checksum"]:
        raise CheckpointError(f"{path}: checksum mismatch (truncated or corrupted)")

    (mlen,) = struct.unpack_from("<I", payload, 0)
    manifest = json.loads(payload[4:4 + mlen])
    block = payload[4 + mlen:]
    arrays = {}
    for e in manifest["arrays"]:
        buf = block[e["offset"]:e["offset"] + e["nbytes"]]
        arrays[e["name"]] = np.frombuffer(buf, dtype=e["dtype"]).reshape(e["shape"]).astype(np.float64)

    def collect(prefix):
        keys = sorted((k for k in arrays if k.startswith(prefix + ".")),
                      key=lambda k: int(k.rsplit(".", 1)[1]))
        return [arrays[k] for k in keys]

    o = manifest["optimizer"]
    opt = OptimizerState(
        learning_rate=o["learning_rate"], beta1=o["beta1"], beta2=o["beta2"],
        weight_decay=o["weight_decay"], eps=o["eps"], method=o["method"],
        step_count=o["step_count"], first_moment=collect("opt.m"), second_moment=collect("opt.v"),
    )
    return Checkpoint(
        image_encoder=EncoderParams.from_arrays(manifest["image_kind"], collect("image")),
        text_encoder=EncoderParams.from_arrays(manifest["text_kind"], collect("text")),
        optimizer=opt,
        config_hash=manifest["config_hash"],
        rng_state=manifest["rng_state"],
        epoch=manifest["epoch"],
        format_version=header["format_version"],
    )
