"""Binary checkpoint container.

Layout (all integers little-endian):

    magic   4 bytes  b"SPLT"
    version u32      1 = inference checkpoint, 2 = training state
    arch    u32 len + utf-8 architecture string (final width resolved)
    dim     u32      lattice dimensionality d_l
    lambda0 f64[dim] base lattice scale
    feats   u32 len + utf-8 comma-joined feature channel names
    latts   u32 len + utf-8 comma-joined lattice channel names
    classes u32
    norm    u8       BCL normalization flag
    count   u32      tensor count, then per tensor:
        name  u32 len + utf-8 (e.g. "003.weight")
        dtype u8   0 = f32, 1 = f64, 2 = i64
        ndim  u8, dims u32[ndim]
        data  raw little-endian payload

Version-1 files store every tensor as f32: loading upcasts to f64 exactly
and saving rounds once, so load(save(load(f))) is a fixed point and
save(load(f)) reproduces f bit for bit. Version-2 files (training state)
keep f64 tensors plus optimizer moments and the iteration counter, so a
resumed run continues bit-exactly.
"""

from __future__ import annotations

import struct
from pathlib import Path

import numpy as np

from .errors import ParseError
from .lattice import LatticeConfig
from .network import NetworkSpec, parse_arch, resolved_arch

MAGIC = b"SPLT"
_DTYPES = {0: np.dtype("<f4"), 1: np.dtype("<f8"), 2: np.dtype("<i8")}
_DTYPE_CODES = {v: k for k, v in _DTYPES.items()}


def _pack_str(s: str) -> bytes:
    raw = s.encode("utf-8")
    return struct.pack("<I", len(raw)) + raw


class _Reader:
    def __init__(self, data: bytes, path: str):
        self.data = data
        self.pos = 0
        self.path = path

    def take(self, n: int) -> bytes:
        if self.pos + n > len(self.data):
            raise ParseError(f"{self.path}: truncated checkpoint")
        out = self.data[self.pos : self.pos + n]
        self.pos += n
        return out

    def u8(self) -> int:
        return self.take(1)[0]

    def u32(self) -> int:
        return struct.unpack("<I", self.take(4))[0]

    def u64(self) -> int:
        return struct.unpack("<Q", self.take(8))[0]

    def string(self) -> str:
        return self.take(self.u32()).decode("utf-8")


def _pack_tensor(name: str, arr: np.ndarray, dtype_code: int) -> bytes:
    wire = np.ascontiguousarray(arr.astype(_DTYPES[dtype_code], copy=False))
    head = _pack_str(name) + struct.pack("<BB", dtype_code, wire.ndim)
    head += struct.pack(f"<{wire.ndim}I", *wire.shape) if wire.ndim else b""
    return head + wire.tobytes()


def _read_tensor(r: _Reader) -> tuple[str, np.ndarray]:
    name = r.string()
    code = r.u8()
    if code not in _DTYPES:
        raise ParseError(f"{r.path}: unknown tensor dtype code {code}")
    ndim = r.u8()
    shape = struct.unpack(f"<{ndim}I", r.take(4 * ndim)) if ndim else ()
    dt = _DTYPES[code]
    count = int(np.prod(shape, dtype=np.int64)) if ndim else 1
    arr = np.frombuffer(r.take(count * dt.itemsize), dtype=dt).reshape(shape)
    return name, arr


def _header_bytes(
    version: int,
    spec: NetworkSpec,
    feature_channels: tuple[str, ...],
    lattice_channels: tuple[str, ...],
) -> bytes:
    out = MAGIC + struct.pack("<I", version)
    out += _pack_str(resolved_arch(spec))
    out += struct.pack("<I", spec.lattice.dim)
    out += np.asarray(spec.lattice.scale, dtype="<f8").tobytes()
    out += _pack_str(",".join(feature_channels))
    out += _pack_str(",".join(lattice_channels))
    out += struct.pack("<I", spec.num_classes)
    norm = any(getattr(l, "normalize", False) for l in spec.layers)
    out += struct.pack("<B", 1 if norm else 0)
    return out


def _tensor_items(params: list[dict]) -> list[tuple[str, np.ndarray]]:
    items = []
    for i, tensors in enumerate(params):
        for key in sorted(tensors):
            items.append((f"{i:03d}.{key}", tensors[key]))
    return items


def save_checkpoint(
    path,
    spec: NetworkSpec,
    params: list[dict],
    feature_channels=("xyz",),
    lattice_channels=("xyz",),
) -> None:
    """Write an inference checkpoint (version 1, f32 tensors)."""
    items = _tensor_items(params)
    out = _header_bytes(1, spec, tuple(feature_channels), tuple(lattice_channels))
    out += struct.pack("<I", len(items))
    for name, arr in items:
        out += _pack_tensor(name, arr, 0)
    Path(path).write_bytes(out)


def _read_header(r: _Reader):
    if r.take(4) != MAGIC:
        raise ParseError(f"{r.path}: not a checkpoint (bad magic)")
    version = r.u32()
    if version not in (1, 2):
        raise ParseError(f"{r.path}: unsupported checkpoint version {version}")
    arch = r.string()
    dim = r.u32()
    lambda0 = np.frombuffer(r.take(8 * dim), dtype="<f8").copy()
    feats = tuple(s for s in r.string().split(",") if s)
    latts = tuple(s for s in r.string().split(",") if s)
    num_classes = r.u32()
    norm = bool(r.u8())
    try:
        spec = parse_arch(arch, LatticeConfig(dim, lambda0), num_classes, normalize=norm)
    except Exception as exc:
        raise ParseError(f"{r.path}: invalid architecture in checkpoint: {exc}") from exc
    return version, spec, feats, latts


def _assemble_params(spec: NetworkSpec, tensors: dict[str, np.ndarray], path: str) -> list[dict]:
    params: list[dict] = [dict() for _ in spec.layers]
    for name, arr in tensors.items():
        try:
            idx_s, key = name.split(".", 1)
            idx = int(idx_s)
        except ValueError:
            raise ParseError(f"{path}: malformed tensor name {name!r}") from None
        if not (0 <= idx < len(spec.layers)):
            raise ParseError(f"{path}: tensor {name!r} indexes a nonexistent layer")
        params[idx][key] = arr.astype(np.float64)
    return params


def load_checkpoint(path):
    """Read a version-1 checkpoint.

    Returns (spec, params, feature_channels, lattice_channels); tensors come
    back as float64.
    """
    r = _Reader(Path(path).read_bytes(), str(path))
    version, spec, feats, latts = _read_header(r)
    if version != 1:
        raise ParseError(f"{r.path}: expected an inference checkpoint, got version {version}")
    count = r.u32()
    tensors = dict(_read_tensor(r) for _ in range(count))
    return spec, _assemble_params(spec, tensors, r.path), feats, latts


def save_train_state(
    path,
    spec: NetworkSpec,
    params: list[dict],
    moments_m: list[dict],
    moments_v: list[dict],
    adam_step: int,
    iteration: int,
    feature_channels=("xyz",),
    lattice_channels=("xyz",),
) -> None:
    """Write a version-2 training state: f64 tensors + optimizer moments."""
    out = _header_bytes(2, spec, tuple(feature_channels), tuple(lattice_channels))
    out += struct.pack("<QQ", adam_step, iteration)
    groups = [("param", params), ("adam_m", moments_m), ("adam_v", moments_v)]
    items = [(f"{tag}.{n}", a) for tag, group in groups for n, a in _tensor_items(group)]
    out += struct.pack("<I", len(items))
    for name, arr in items:
        out += _pack_tensor(name, arr, 1)
    Path(path).write_bytes(out)


def load_train_state(path):
    """Read a version-2 training state.

    Returns (spec, params, moments_m, moments_v, adam_step, iteration,
    feature_channels, lattice_channels).
    """
    r = _Reader(Path(path).read_bytes(), str(path))
    version, spec, feats, latts = _read_header(r)
    if version != 2:
        raise ParseError(f"{r.path}: expected a training state, got version {version}")
    adam_step = r.u64()
    iteration = r.u64()
    count = r.u32()
    groups: dict[str, dict[str, np.ndarray]] = {"param": {}, "adam_m": {}, "adam_v": {}}
    for _ in range(count):
        name, arr = _read_tensor(r)
        tag, rest = name.split(".", 1)
        if tag not in groups:
            raise ParseError(f"{r.path}: unexpected tensor group {tag!r}")
        groups[tag][rest] = arr
    params = _assemble_params(spec, groups["param"], r.path)
    m = _assemble_params(spec, groups["adam_m"], r.path)
    v = _assemble_params(spec, groups["adam_v"], r.path)
    return spec, params, m, v, adam_step, iteration, feats, latts
