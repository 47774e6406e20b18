"""Weight tensors, the per-layer filter view, and the ``PKTC`` container.

Container layout (little-endian)::

    0..3     magic b"PKTC"
    4..7     format version, u32 (= 1)
    8..15    header length H, u64
    16..16+H UTF-8 JSON header
             {"metadata": {...},
              "layers": [{"name", "shape", "dtype": "f32", "offset", "nbytes"}, ...]}
    rest     raw f32 payloads back to back, offsets relative to payload start
"""
from __future__ import annotations

import json
import math
import re
import struct
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

MAGIC = b"PKTC"
VERSION = 1
_PREAMBLE = struct.Struct("<4sIQ")
_F32 = np.dtype("<f4")
_NAME_RE = re.compile(r"^[\x21-\x7e]+$")


class ContainerError(ValueError):
    """Base class for malformed or invalid weight containers."""


class BadMagicError(ContainerError):
    pass


class UnsupportedVersionError(ContainerError):
    pass


class HeaderError(ContainerError):
    """Header is unreadable or disagrees with the payload it describes."""


class TruncatedPayloadError(ContainerError):
    pass


class NonFiniteError(ContainerError):
    pass


class Tensor:
    """Immutable float32 array with at most four dimensions."""

    __slots__ = ("_data",)

    def __init__(self, data, shape=None):
        arr = np.array(data, dtype=np.float32, copy=True)
        if shape is not None:
            shape = tuple(int(s) for s in shape)
            if any(s < 1 for s in shape):
                raise ValueError(f"shape entries must be positive, got {list(shape)}")
            if arr.size != math.prod(shape):
                raise ValueError(
                    f"data length {arr.size} does not match shape {list(shape)}"
                )
            arr = arr.reshape(shape)
        if not 1 <= arr.ndim <= 4:
            raise ValueError(f"tensor must have 1 to 4 dimensions, got {arr.ndim}")
        if any(s < 1 for s in arr.shape):
            raise ValueError(f"shape entries must be positive, got {list(arr.shape)}")
        arr = np.ascontiguousarray(arr)
        arr.flags.writeable = False
        self._data = arr

    @property
    def shape(self) -> tuple[int, ...]:
        return self._data.shape

    @property
    def array(self) -> np.ndarray:
        """Read-only view of the data in its natural shape."""
        return self._data

    @property
    def data(self) -> np.ndarray:
        """Flat row-major read-only view."""
        return self._data.reshape(-1)

    @property
    def size(self) -> int:
        return self._data.size

    def is_finite(self) -> bool:
        return bool(np.isfinite(self._data).all())

    def __eq__(self, other):
        if not isinstance(other, Tensor):
            return NotImplemented
        return self.shape == other.shape and self._data.tobytes() == other._data.tobytes()

    def __repr__(self):
        return f"Tensor(shape={list(self.shape)})"


@dataclass(frozen=True)
class FilterBank:
    """One conv layer viewed as ``n`` flattened filters of length ``c*k*k``.

    ``filters[j]`` is filter ``j`` flattened channel-major, then kernel row,
    then column. It is stored in float64 because all scoring runs in
    float64.
    """

    layer_name: str
    n: int
    k: int
    c: int
    filters: np.ndarray = field(repr=False)

    def __post_init__(self):
        if self.n < 1 or self.c < 1 or self.k < 1:
            raise ValueError("filter bank needs n, c, k >= 1")
        if self.filters.shape != (self.n, self.c * self.k * self.k):
            raise ValueError(
                f"filters shape {self.filters.shape} != ({self.n}, {self.c * self.k * self.k})"
            )

    @classmethod
    def from_vectors(cls, vectors, layer_name="layer"):
        """Build a bank from raw vectors, treating each as a c x 1 x 1 filter."""
        arr = np.ascontiguousarray(np.atleast_2d(np.asarray(vectors, dtype=np.float64)))
        arr.flags.writeable = False
        return cls(layer_name, arr.shape[0], 1, arr.shape[1], arr)

    @property
    def dim(self) -> int:
        return self.filters.shape[1]

    def to_tensor(self) -> Tensor:
        return Tensor(self.filters.reshape(self.n, self.c, self.k, self.k))


def as_filter_bank(t: Tensor, layer_name: str) -> FilterBank:
    if len(t.shape) != 4:
        raise ValueError(f"non-4-D tensor for layer {layer_name!r}: shape {list(t.shape)}")
    n, c, kh, kw = t.shape
    if kh != kw:
        raise ValueError(f"non-square kernel for layer {layer_name!r}: {kh}x{kw}")
    filters = np.ascontiguousarray(t.array.reshape(n, c * kh * kw), dtype=np.float64)
    filters.flags.writeable = False
    return FilterBank(layer_name, n, kh, c, filters)


def validate_layer_name(name):
    if not isinstance(name, str) or not _NAME_RE.match(name):
        raise ContainerError(f"invalid layer name {name!r}")


class WeightContainer:
    """Ordered mapping of layer name to :class:`Tensor`, plus string metadata."""

    def __init__(self, layers=None, metadata=None):
        items = list(layers.items()) if isinstance(layers, dict) else list(layers or [])
        seen = set()
        checked = []
        for name, tensor in items:
            validate_layer_name(name)
            if name in seen:
                raise ContainerError(f"duplicate layer name {name!r}")
            seen.add(name)
            if not isinstance(tensor, Tensor):
                tensor = Tensor(tensor)
            checked.append((name, tensor))
        self._layers = dict(checked)
        self.metadata = {str(k): str(v) for k, v in (metadata or {}).items()}

    @property
    def layers(self):
        return dict(self._layers)

    def names(self):
        return list(self._layers)

    def __getitem__(self, name) -> Tensor:
        return self._layers[name]

    def __contains__(self, name):
        return name in self._layers

    def __iter__(self):
        return iter(self._layers.items())

    def __len__(self):
        return len(self._layers)

    def replace(self, updates):
        """Return a copy with some layers swapped out; order is preserved."""
        unknown = set(updates) - set(self._layers)
        if unknown:
            raise KeyError(f"unknown layers: {sorted(unknown)}")
        return WeightContainer(
            [(n, updates.get(n, t)) for n, t in self._layers.items()], self.metadata
        )

    def __eq__(self, other):
        if not isinstance(other, WeightContainer):
            return NotImplemented
        return (
            list(self._layers) == list(other._layers)
            and all(self._layers[n] == other._layers[n] for n in self._layers)
            and self.metadata == other.metadata
        )

    def __repr__(self):
        return f"WeightContainer({[(n, list(t.shape)) for n, t in self._layers.items()]})"


def _header_bytes(c: WeightContainer) -> bytes:
    entries = []
    offset = 0
    for name, t in c:
        nbytes = t.size * 4
        entries.append(
            {"name": name, "shape": list(t.shape), "dtype": "f32", "offset": offset, "nbytes": nbytes}
        )
        offset += nbytes
    header = {"metadata": dict(sorted(c.metadata.items())), "layers": entries}
    return json.dumps(header, separators=(",", ":")).encode("utf-8")


def to_bytes(c: WeightContainer) -> bytes:
    header = _header_bytes(c)
    parts = [_PREAMBLE.pack(MAGIC, VERSION, len(header)), header]
    parts.extend(t.data.astype(_F32, copy=False).tobytes() for _, t in c)
    return b"".join(parts)


def write_container(c: WeightContainer, path) -> None:
    for name, t in c:
        if not t.is_finite():
            raise NonFiniteError(f"layer {name!r} contains non-finite values")
    Path(path).write_bytes(to_bytes(c))


def from_bytes(buf: bytes) -> WeightContainer:
    if len(buf) < _PREAMBLE.size:
        raise TruncatedPayloadError(f"file is {len(buf)} bytes, shorter than the 16-byte preamble")
    magic, version, hlen = _PREAMBLE.unpack_from(buf, 0)
    if magic != MAGIC:
        raise BadMagicError(f"bad magic {magic!r} at offset 0, expected {MAGIC!r}")
    if version != VERSION:
        raise UnsupportedVersionError(f"unsupported format version {version}")
    start = _PREAMBLE.size
    if start + hlen > len(buf):
        raise HeaderError(
            f"header length {hlen} at offset 8 exceeds file size {len(buf)}"
        )
    try:
        header = json.loads(buf[start:start + hlen].decode("utf-8"))
        metadata = header["metadata"]
        entries = header["layers"]
    except (UnicodeDecodeError, json.JSONDecodeError, KeyError, TypeError) as exc:
        raise HeaderError(f"unreadable header at offset {start}: {exc}") from None
    payload = memoryview(buf)[start + hlen:]

    layers = []
    expected_offset = 0
    for entry in entries:
        name = entry.get("name")
        shape = entry.get("shape")
        if entry.get("dtype") != "f32":
            raise HeaderError(f"layer {name!r}: unsupported dtype {entry.get('dtype')!r}")
        if not isinstance(shape, list) or not 1 <= len(shape) <= 4 or any(
            not isinstance(s, int) or s < 1 for s in shape
        ):
            raise HeaderError(f"layer {name!r}: invalid shape {shape!r}")
        offset, nbytes = entry.get("offset"), entry.get("nbytes")
        if nbytes != math.prod(shape) * 4:
            raise HeaderError(
                f"layer {name!r}: nbytes {nbytes} does not match shape {shape}"
            )
        if offset != expected_offset:
            raise HeaderError(
                f"layer {name!r}: offset {offset}, expected {expected_offset}"
            )
        if offset + nbytes > len(payload):
            raise TruncatedPayloadError(
                f"truncated payload in layer {name!r}: needs bytes {offset}..{offset + nbytes}"
                f" of payload, only {len(payload)} present"
            )
        arr = np.frombuffer(payload[offset:offset + nbytes], dtype=_F32).reshape(shape)
        if not np.isfinite(arr).all():
            bad = int(np.flatnonzero(~np.isfinite(arr.reshape(-1)))[0])
            raise NonFiniteError(
                f"non-finite value in layer {name!r} at element {bad}"
                f" (payload offset {offset + 4 * bad})"
            )
        layers.append((name, Tensor(arr)))
        expected_offset += nbytes
    if expected_offset != len(payload):
        raise HeaderError(
            f"payload has {len(payload)} bytes but header describes {expected_offset}"
        )
    return WeightContainer(layers, metadata)


def read_container(path) -> WeightContainer:
    return from_bytes(Path(path).read_bytes())
