"""MLP feature encoder with a two-layer projection head.

``encode`` returns both the head output (fed to the contrastive loss and to
clustering) and the backbone representation (read by linear probes).

Checkpoints use a small versioned binary layout::

    magic  b"SWAROCKP"
    u32    format version
    u32    header length, then that many bytes of UTF-8 JSON
    tensors, each as u32 rank, rank * u32 dims, little-endian float64 data

The JSON header carries the layout, activation, tensor names in order and
arbitrary metadata (run config echo, cluster model info).
"""

from __future__ import annotations

import io
import json
import os
import struct
import tempfile
from dataclasses import dataclass, field
from typing import NamedTuple

import numpy as np

from . import diffcore as dc

MAGIC = b"SWAROCKP"
FORMAT_VERSION = 1
EMBEDDING_DIM = 128

_ACTIVATIONS = {"relu": dc.relu, "identity": dc.identity}


class CheckpointError(ValueError):
    pass


@dataclass(frozen=True)
class EncoderParams:
    """Weights of backbone and projection head.

    Each layer is a ``(W, b)`` pair with ``W`` of shape ``(fan_in, fan_out)``.
    The activation follows every backbone layer and sits between the two head
    layers; the head output is linear.
    """

    backbone: tuple[tuple[dc.Tensor, dc.Tensor], ...]
    head: tuple[tuple[dc.Tensor, dc.Tensor], ...]
    activation: str = "relu"

    def __post_init__(self):
        if not self.backbone:
            raise ValueError("encoder needs at least one backbone layer")
        if len(self.head) != 2:
            raise ValueError(f"projection head must have exactly 2 layers, got {len(self.head)}")
        if self.activation not in _ACTIVATIONS:
            raise ValueError(f"unknown activation {self.activation!r}")
        layers = list(self.backbone) + list(self.head)
        for i, (w, b) in enumerate(layers):
            if w.ndim != 2 or b.shape != (w.shape[1],):
                raise ValueError(f"layer {i}: weight {w.shape} and bias {b.shape} do not match")
            if i and layers[i - 1][0].shape[1] != w.shape[0]:
                raise ValueError(
                    f"layer {i}: input width {w.shape[0]} != previous output width "
                    f"{layers[i - 1][0].shape[1]}")

    @property
    def input_dim(self) -> int:
        return self.backbone[0][0].shape[0]

    @property
    def representation_dim(self) -> int:
        return self.backbone[-1][0].shape[1]

    @property
    def embedding_dim(self) -> int:
        return self.head[-1][0].shape[1]

    @property
    def layout(self) -> dict:
        return {
            "backbone": [self.input_dim] + [w.shape[1] for w, _ in self.backbone],
            "head": [w.shape[1] for w, _ in self.head],
            "activation": self.activation,
        }

    def tensors(self) -> list[dc.Tensor]:
        out = []
        for w, b in self.backbone + self.head:
            out.extend((w, b))
        return out

    def num_parameters(self) -> int:
        return int(sum(t.size for t in self.tensors()))

    def tracked(self) -> "EncoderParams":
        """Copy whose tensors are gradient leaves sharing the same data."""
        return self.from_tensors([dc.Tensor(t.data, requires_grad=True) for t in self.tensors()])

    def from_tensors(self, tensors) -> "EncoderParams":
        tensors = list(tensors)
        nb = len(self.backbone)
        pairs = [(tensors[2 * i], tensors[2 * i + 1]) for i in range(len(tensors) // 2)]
        return EncoderParams(tuple(pairs[:nb]), tuple(pairs[nb:]), self.activation)

    def checksum(self) -> str:
        import hashlib

        h = hashlib.sha256()
        for t in self.tensors():
            h.update(np.ascontiguousarray(t.data).tobytes())
        return h.hexdigest()


class Encoding(NamedTuple):
    embedding: dc.Tensor
    representation: dc.Tensor


def init_params(backbone: list[int], head: list[int] | None = None, seed: int = 0,
                activation: str = "relu") -> EncoderParams:
    """He-initialised parameters.

    ``backbone`` lists widths starting with the input width, so ``[8, 16, 16]``
    is two layers 8->16->16.  ``head`` lists the two head output widths.
    """
    head = [EMBEDDING_DIM, EMBEDDING_DIM] if head is None else list(head)
    if len(backbone) < 2:
        raise ValueError("backbone layout needs an input width and at least one layer width")
    if len(head) != 2:
        raise ValueError("projection head layout needs exactly 2 widths")
    widths = list(backbone) + head
    if any(int(w) <= 0 for w in widths):
        raise ValueError(f"layer widths must be positive, got {widths}")
    rng = np.random.default_rng(seed)
    layers = []
    for fan_in, fan_out in zip(widths[:-1], widths[1:]):
        w = rng.standard_normal((fan_in, fan_out)) * np.sqrt(2.0 / fan_in)
        layers.append((dc.Tensor(w), dc.Tensor(np.zeros(fan_out))))
    nb = len(backbone) - 1
    return EncoderParams(tuple(layers[:nb]), tuple(layers[nb:]), activation)


def _linear(x: dc.Tensor, w: dc.Tensor, b: dc.Tensor) -> dc.Tensor:
    return dc.add_rowvec(dc.matmul(x, w), b)


def backbone(params: EncoderParams, x: dc.Tensor) -> dc.Tensor:
    x = dc.as_tensor(x)
    if x.ndim == 1:
        x = dc.expand(x, (1, x.shape[0]))
    if x.shape[1] != params.input_dim:
        raise dc.ShapeError(f"encoder expects width {params.input_dim}, got {x.shape[1]}")
    act = _ACTIVATIONS[params.activation]
    h = x
    for w, b in params.backbone:
        h = act(_linear(h, w, b))
    return h


def head(params: EncoderParams, h: dc.Tensor) -> dc.Tensor:
    act = _ACTIVATIONS[params.activation]
    (w1, b1), (w2, b2) = params.head
    return _linear(act(_linear(h, w1, b1)), w2, b2)


def encode(params: EncoderParams, x: dc.Tensor) -> Encoding:
    """Embed a batch of rows (or a single vector, treated as one row)."""
    rep = backbone(params, x)
    return Encoding(head(params, rep), rep)


def embed_numpy(params: EncoderParams, x: np.ndarray, which: str = "embedding",
                chunk: int = 4096) -> np.ndarray:
    """Untracked forward pass returning a plain array."""
    x = np.asarray(x, dtype=np.float64)
    outs = []
    for start in range(0, max(len(x), 1), chunk):
        part = x[start:start + chunk]
        if len(part) == 0:
            break
        enc = encode(params, dc.Tensor(part))
        outs.append(getattr(enc, which).data)
    if not outs:
        width = params.embedding_dim if which == "embedding" else params.representation_dim
        return np.zeros((0, width))
    return np.concatenate(outs, axis=0)


# ------------------------------------------------------------ checkpoints


def _write_tensor(buf: io.BytesIO, arr: np.ndarray):
    arr = np.ascontiguousarray(arr, dtype="<f8")
    buf.write(struct.pack("<I", arr.ndim))
    buf.write(struct.pack(f"<{arr.ndim}I", *arr.shape))
    buf.write(arr.tobytes())


def _read_tensor(buf: io.BytesIO) -> np.ndarray:
    (rank,) = struct.unpack("<I", _read_exact(buf, 4))
    dims = struct.unpack(f"<{rank}I", _read_exact(buf, 4 * rank))
    n = int(np.prod(dims)) if rank else 1
    data = np.frombuffer(_read_exact(buf, 8 * n), dtype="<f8").astype(np.float64)
    return data.reshape(dims)


def _read_exact(buf: io.BytesIO, n: int) -> bytes:
    chunk = buf.read(n)
    if len(chunk) != n:
        raise CheckpointError("truncated checkpoint")
    return chunk


def checkpoint_bytes(params: EncoderParams, metadata: dict | None = None,
                     extra: dict[str, np.ndarray] | None = None) -> bytes:
    extra = dict(sorted((extra or {}).items()))
    names = []
    for i in range(len(params.backbone)):
        names += [f"backbone.{i}.weight", f"backbone.{i}.bias"]
    for i in range(2):
        names += [f"head.{i}.weight", f"head.{i}.bias"]
    header = {
        "layout": params.layout,
        "tensors": names + list(extra),
        "metadata": metadata or {},
    }
    hbytes = json.dumps(header, sort_keys=True).encode("utf-8")
    buf = io.BytesIO()
    buf.write(MAGIC)
    buf.write(struct.pack("<II", FORMAT_VERSION, len(hbytes)))
    buf.write(hbytes)
    for t in params.tensors():
        _write_tensor(buf, t.data)
    for arr in extra.values():
        _write_tensor(buf, arr)
    return buf.getvalue()


@dataclass
class Checkpoint:
    params: EncoderParams
    metadata: dict = field(default_factory=dict)
    extra: dict[str, np.ndarray] = field(default_factory=dict)


def parse_checkpoint(raw: bytes) -> Checkpoint:
    buf = io.BytesIO(raw)
    if buf.read(len(MAGIC)) != MAGIC:
        raise CheckpointError("not a checkpoint file (bad magic)")
    version, hlen = struct.unpack("<II", _read_exact(buf, 8))
    if version != FORMAT_VERSION:
        raise CheckpointError(f"unsupported checkpoint version {version}")
    try:
        header = json.loads(_read_exact(buf, hlen).decode("utf-8"))
    except (UnicodeDecodeError, json.JSONDecodeError) as exc:
        raise CheckpointError(f"corrupt checkpoint header: {exc}") from exc
    layout = header["layout"]
    names = header["tensors"]
    arrays = [_read_tensor(buf) for _ in names]
    if buf.read(1):
        raise CheckpointError("trailing bytes after last tensor")
    nb = len(layout["backbone"]) - 1
    n_param = 2 * (nb + 2)
    layers = [(dc.Tensor(arrays[2 * i]), dc.Tensor(arrays[2 * i + 1])) for i in range(nb + 2)]
    params = EncoderParams(tuple(layers[:nb]), tuple(layers[nb:]), layout["activation"])
    extra = dict(zip(names[n_param:], arrays[n_param:]))
    return Checkpoint(params, header.get("metadata", {}), extra)


def atomic_write_bytes(path: str | os.PathLike, data: bytes):
    path = os.fspath(path)
    directory = os.path.dirname(path) or "."
    os.makedirs(directory, exist_ok=True)
    fd, tmp = tempfile.mkstemp(dir=directory, prefix=".tmp-")
    try:
        with os.fdopen(fd, "wb") as fh:
            fh.write(data)
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise


def save_checkpoint(path, params: EncoderParams, metadata: dict | None = None,
                    extra: dict[str, np.ndarray] | None = None):
    atomic_write_bytes(path, checkpoint_bytes(params, metadata, extra))


def load_checkpoint(path) -> Checkpoint:
    with open(path, "rb") as fh:
        return parse_checkpoint(fh.read())
