"""Checkpoint container and the ARMF binary tensor archive.

Layout of an ``.armf`` file::

    b"ARMF" | u32 version | u64 header_len | header JSON (UTF-8) | pad to 64
    tensor payloads (little-endian f32, row-major), each starting 64-byte aligned

The header holds ``{"spec": {...}, "tensors": [{"name", "dtype", "shape"}, ...]}``
and is serialized with sorted keys so identical checkpoints give identical bytes.
"""

from __future__ import annotations

import json
import os
import struct
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Iterable, Mapping

import numpy as np

from .errors import FormatError, IncompatibilityError, ValidationError

MAGIC = b"ARMF"
FORMAT_VERSION = 1
ALIGN = 64
DTYPE = np.dtype("<f4")
MLP_KINDS = ("plain", "gated")
DEFAULT_CONTEXT_LENGTH = 256


@dataclass(frozen=True)
class ArchitectureSpec:
    n_blocks: int
    d_model: int
    d_ff: int
    n_heads: int
    vocab_size: int
    mlp_kind: str = "plain"
    tokenizer_id: str = "synthetic-v1"
    context_length: int = DEFAULT_CONTEXT_LENGTH

    def __post_init__(self):
        for name in ("n_blocks", "d_model", "d_ff", "n_heads", "vocab_size", "context_length"):
            value = getattr(self, name)
            if isinstance(value, bool) or not isinstance(value, int) or value < 1:
                raise ValidationError(f"ArchitectureSpec.{name} must be a positive integer, got {value!r}")
        if self.d_model % self.n_heads:
            raise ValidationError(
                f"d_model ({self.d_model}) must be divisible by n_heads ({self.n_heads})"
            )
        if self.mlp_kind not in MLP_KINDS:
            raise ValidationError(f"mlp_kind must be one of {MLP_KINDS}, got {self.mlp_kind!r}")
        if not isinstance(self.tokenizer_id, str):
            raise ValidationError("tokenizer_id must be a string")

    @property
    def head_dim(self) -> int:
        return self.d_model // self.n_heads

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, data: Mapping) -> "ArchitectureSpec":
        known = set(cls.__dataclass_fields__)
        unknown = set(data) - known
        if unknown:
            raise ValidationError(f"unknown ArchitectureSpec fields: {sorted(unknown)}")
        try:
            return cls(**data)
        except TypeError as exc:
            raise ValidationError(f"bad ArchitectureSpec: {exc}") from None


def block_prefix(layer: int) -> str:
    return f"blocks.{layer}"


def mlp_names(layer: int) -> dict[str, str]:
    p = f"{block_prefix(layer)}.mlp"
    return {"w_in": f"{p}.w_in", "b_in": f"{p}.b_in", "w_out": f"{p}.w_out", "w_gate": f"{p}.w_gate"}


def canonical_layout(spec: ArchitectureSpec) -> dict[str, tuple[int, ...]]:
    """Ordered name -> shape map every checkpoint of ``spec`` must match.

    Linear weights are stored (out_features, in_features).
    """
    d, f = spec.d_model, spec.d_ff
    layout: dict[str, tuple[int, ...]] = {
        "tok_embed": (spec.vocab_size, d),
        "pos_embed": (spec.context_length, d),
    }
    for layer in range(spec.n_blocks):
        p = block_prefix(layer)
        layout[f"{p}.attn_norm"] = (d,)
        for proj in ("q", "k", "v", "o"):
            layout[f"{p}.attn.w_{proj}"] = (d, d)
        layout[f"{p}.mlp_norm"] = (d,)
        names = mlp_names(layer)
        layout[names["w_in"]] = (f, d)
        layout[names["b_in"]] = (f,)
        layout[names["w_out"]] = (d, f)
        if spec.mlp_kind == "gated":
            layout[names["w_gate"]] = (f, d)
    layout["final_norm"] = (d,)
    layout["lm_head"] = (spec.vocab_size, d)
    return layout


@dataclass(frozen=True)
class ModelCheckpoint:
    """Validated, read-only named-tensor map plus its architecture."""

    spec: ArchitectureSpec
    tensors: Mapping[str, np.ndarray] = field(repr=False)

    def __post_init__(self):
        frozen = {}
        for name, value in validate_tensors(self.spec, self.tensors).items():
            arr = np.array(value, dtype=DTYPE, order="C", copy=True)
            arr.flags.writeable = False
            frozen[name] = arr
        object.__setattr__(self, "tensors", frozen)

    def __getitem__(self, name: str) -> np.ndarray:
        return self.tensors[name]

    def replace(self, updates: Mapping[str, np.ndarray]) -> "ModelCheckpoint":
        """New checkpoint with some tensors swapped out."""
        merged = dict(self.tensors)
        merged.update(updates)
        return ModelCheckpoint(self.spec, merged)

    def mutable_copy(self) -> dict[str, np.ndarray]:
        return {name: arr.copy() for name, arr in self.tensors.items()}


def validate_tensors(spec: ArchitectureSpec, tensors: Mapping[str, np.ndarray]) -> dict:
    if not tensors:
        raise ValidationError("checkpoint has an empty tensor map")
    layout = canonical_layout(spec)
    missing = [n for n in layout if n not in tensors]
    extra = sorted(n for n in tensors if n not in layout)
    if missing:
        raise ValidationError(f"missing tensor {missing[0]!r} (and {len(missing) - 1} more)")
    if extra:
        raise ValidationError(f"unexpected tensor {extra[0]!r} for this architecture")
    ordered = {}
    for name, shape in layout.items():
        arr = np.asarray(tensors[name])
        if arr.shape != shape:
            raise ValidationError(f"tensor {name!r} has shape {arr.shape}, expected {shape}")
        if not np.all(np.isfinite(arr)):
            raise ValidationError(f"tensor {name!r} contains non-finite values")
        ordered[name] = arr
    return ordered


def _align(n: int) -> int:
    return (n + ALIGN - 1) // ALIGN * ALIGN


def _encode_header(ckpt: ModelCheckpoint) -> bytes:
    header = {
        "spec": ckpt.spec.to_dict(),
        "tensors": [
            {"name": name, "dtype": "f32", "shape": list(arr.shape)}
            for name, arr in ckpt.tensors.items()
        ],
    }
    return json.dumps(header, sort_keys=True, separators=(",", ":")).encode("utf-8")


def to_bytes(ckpt: ModelCheckpoint) -> bytes:
    header = _encode_header(ckpt)
    out = bytearray(MAGIC)
    out += struct.pack("<IQ", FORMAT_VERSION, len(header))
    out += header
    for arr in ckpt.tensors.values():
        out += b"\0" * (_align(len(out)) - len(out))
        out += arr.astype(DTYPE, copy=False).tobytes(order="C")
    return bytes(out)


def from_bytes(data: bytes) -> ModelCheckpoint:
    if len(data) < 16 or data[:4] != MAGIC:
        raise FormatError("not an ARMF archive (bad magic)")
    version, header_len = struct.unpack_from("<IQ", data, 4)
    if version != FORMAT_VERSION:
        raise FormatError(f"unsupported ARMF version {version}")
    if 16 + header_len > len(data):
        raise FormatError("truncated header")
    try:
        header = json.loads(data[16 : 16 + header_len].decode("utf-8"))
        spec = ArchitectureSpec.from_dict(header["spec"])
        table = header["tensors"]
    except (UnicodeDecodeError, json.JSONDecodeError, KeyError, TypeError) as exc:
        raise FormatError(f"malformed header: {exc}") from None
    tensors = {}
    offset = 16 + header_len
    for entry in table:
        try:
            name, dtype, shape = entry["name"], entry["dtype"], tuple(int(s) for s in entry["shape"])
        except (KeyError, TypeError, ValueError) as exc:
            raise FormatError(f"malformed tensor table entry: {exc}") from None
        if dtype != "f32":
            raise FormatError(f"tensor {name!r} has unsupported dtype {dtype!r}")
        if name in tensors:
            raise FormatError(f"duplicate tensor {name!r}")
        offset = _align(offset)
        nbytes = int(np.prod(shape, dtype=np.int64)) * DTYPE.itemsize
        if offset + nbytes > len(data):
            raise FormatError(f"truncated payload for tensor {name!r}")
        tensors[name] = np.frombuffer(data, dtype=DTYPE, count=nbytes // 4, offset=offset).reshape(shape)
        offset += nbytes
    if offset != len(data):
        raise FormatError(f"{len(data) - offset} trailing bytes after last tensor")
    return ModelCheckpoint(spec, tensors)


def save_checkpoint(ckpt: ModelCheckpoint, path: str | os.PathLike) -> None:
    # Re-validate: a caller may have bypassed the constructor via object.__setattr__.
    validate_tensors(ckpt.spec, ckpt.tensors)
    payload = to_bytes(ckpt)
    path = Path(path)
    tmp = path.with_name(path.name + ".tmp")
    with open(tmp, "wb") as fh:
        fh.write(payload)
    os.replace(tmp, path)


def load_checkpoint(path: str | os.PathLike) -> ModelCheckpoint:
    with open(path, "rb") as fh:
        data = fh.read()
    try:
        return from_bytes(data)
    except ValidationError as exc:
        raise type(exc)(f"{path}: {exc}") from None


def validate_pool(ckpts: Iterable[ModelCheckpoint]) -> ArchitectureSpec:
    """Return the architecture shared by every checkpoint, or raise on the first mismatch."""
    ckpts = list(ckpts)
    if not ckpts:
        raise ValidationError("validate_pool needs at least one checkpoint")
    ref = ckpts[0]
    ref_shapes = {n: a.shape for n, a in ref.tensors.items()}
    for other in ckpts[1:]:
        for fname in ArchitectureSpec.__dataclass_fields__:
            a, b = getattr(ref.spec, fname), getattr(other.spec, fname)
            if a != b:
                raise IncompatibilityError(f"checkpoints disagree on {fname}: {a!r} vs {b!r}", field=fname)
        shapes = {n: a.shape for n, a in other.tensors.items()}
        if shapes != ref_shapes:
            diff = sorted(set(shapes.items()) ^ set(ref_shapes.items()))
            raise IncompatibilityError(f"tensor layouts differ at {diff[0][0]!r}", field="tensors")
    return ref.spec
