"""Canonical, injective byte encoding for every protocol value.

Each value is a one-byte type code followed by its body. Variable-size bodies
carry a 4-byte big-endian length, integers are big-endian two's complement,
floats are IEEE-754 big-endian, and registered dataclasses are written as
their wire tag plus fields in declaration order. Dicts are written with
entries sorted by encoded key, so equal dicts always encode identically.

Decoding returns tuples for sequences; protocol dataclasses therefore declare
sequence fields as tuples so that ``decode(encode(m)) == m``.
"""

from __future__ import annotations

import dataclasses
import enum
import struct
from typing import Any, Callable, TypeVar

import numpy as np

T = TypeVar("T")

_NONE = 0x00
_FALSE = 0x01
_TRUE = 0x02
_INT = 0x03
_BYTES = 0x04
_STR = 0x05
_FLOAT = 0x06
_SEQ = 0x07
_VECTOR = 0x08
_ENUM = 0x09
_RECORD = 0x0A
_DICT = 0x0B

_records: dict[int, type] = {}
_record_tags: dict[type, int] = {}
_enums: dict[int, type] = {}
_enum_tags: dict[type, int] = {}


class CodecError(ValueError):
    pass


def wire(tag: int) -> Callable[[type[T]], type[T]]:
    """Register a dataclass (or IntEnum) under a fixed wire tag."""

    def register(cls: type[T]) -> type[T]:
        if isinstance(cls, type) and issubclass(cls, enum.IntEnum):
            if tag in _enums and _enums[tag] is not cls:
                raise CodecError(f"enum tag {tag} already used by {_enums[tag].__name__}")
            _enums[tag] = cls
            _enum_tags[cls] = tag
            return cls
        if not dataclasses.is_dataclass(cls):
            raise CodecError(f"{cls!r} is not a dataclass")
        if tag in _records and _records[tag] is not cls:
            raise CodecError(f"wire tag {tag} already used by {_records[tag].__name__}")
        _records[tag] = cls
        _record_tags[cls] = tag
        return cls

    return register


def _len(n: int) -> bytes:
    return n.to_bytes(4, "big")


_fields_cache: dict[type, tuple[str, ...]] = {}
_CACHE_ATTR = "_wire_bytes"


def _record_fields(cls: type) -> tuple[str, ...]:
    names = _fields_cache.get(cls)
    if names is None:
        names = tuple(f.name for f in dataclasses.fields(cls))
        _fields_cache[cls] = names
    return names


def _encode_record(value: Any, out: bytearray) -> None:
    # Frozen records are immutable, so their bytes are memoised on the instance.
    cached = value.__dict__.get(_CACHE_ATTR) if hasattr(value, "__dict__") else None
    if cached is not None:
        out += cached
        return
    cls = type(value)
    names = _record_fields(cls)
    start = len(out)
    out.append(_RECORD)
    out += _record_tags[cls].to_bytes(2, "big")
    out.append(len(names))
    has_array = False
    for name in names:
        v = getattr(value, name)
        if type(v) is np.ndarray:
            has_array = True
        _encode(v, out)
    if not has_array and cls.__dataclass_params__.frozen and hasattr(value, "__dict__"):
        object.__setattr__(value, _CACHE_ATTR, bytes(out[start:]))


def _encode(value: Any, out: bytearray) -> None:
    t = type(value)
    if t is bytes:
        out.append(_BYTES)
        out += _len(len(value))
        out += value
    elif t is int:
        raw = value.to_bytes((value.bit_length() + 8) // 8, "big", signed=True)
        out.append(_INT)
        out += _len(len(raw))
        out += raw
    elif t is tuple or t is list:
        out.append(_SEQ)
        out += _len(len(value))
        for item in value:
            _encode(item, out)
    elif t in _record_tags:
        _encode_record(value, out)
    elif value is None:
        out.append(_NONE)
    elif value is True:
        out.append(_TRUE)
    elif value is False:
        out.append(_FALSE)
    elif isinstance(value, enum.IntEnum):
        tag = _enum_tags.get(t)
        if tag is None:
            raise CodecError(f"unregistered enum {t.__name__}")
        out.append(_ENUM)
        out += tag.to_bytes(2, "big")
        out += int(value).to_bytes(2, "big")
    elif isinstance(value, (int, np.integer)):
        v = int(value)
        raw = v.to_bytes((v.bit_length() + 8) // 8, "big", signed=True)
        out.append(_INT)
        out += _len(len(raw))
        out += raw
    elif isinstance(value, (bytes, bytearray)):
        out.append(_BYTES)
        out += _len(len(value))
        out += value
    elif isinstance(value, str):
        raw = value.encode("utf-8")
        out.append(_STR)
        out += _len(len(raw))
        out += raw
    elif isinstance(value, (float, np.floating)):
        out.append(_FLOAT)
        out += struct.pack(">d", float(value))
    elif isinstance(value, np.ndarray):
        flat = np.ascontiguousarray(value, dtype=">f8").ravel()
        out.append(_VECTOR)
        out += _len(flat.size)
        out += flat.tobytes()
    elif isinstance(value, (tuple, list)):
        out.append(_SEQ)
        out += _len(len(value))
        for item in value:
            _encode(item, out)
    elif isinstance(value, dict):
        items = sorted((encode(k), encode(v)) for k, v in value.items())
        out.append(_DICT)
        out += _len(len(items))
        for k, v in items:
            out += k
            out += v
    else:
        raise CodecError(f"cannot encode {t.__name__}")


def encode(value: Any) -> bytes:
    out = bytearray()
    _encode(value, out)
    return bytes(out)


class _Reader:
    __slots__ = ("data", "pos")

    def __init__(self, data: bytes) -> None:
        self.data = data
        self.pos = 0

    def take(self, n: int) -> bytes:
        end = self.pos + n
        if end > len(self.data):
            raise CodecError("truncated input")
        chunk = self.data[self.pos:end]
        self.pos = end
        return chunk

    def length(self) -> int:
        return int.from_bytes(self.take(4), "big")


def _decode(r: _Reader) -> Any:
    code = r.take(1)[0]
    if code == _NONE:
        return None
    if code == _TRUE:
        return True
    if code == _FALSE:
        return False
    if code == _INT:
        n = r.length()
        if n == 0:
            raise CodecError("empty integer")
        raw = r.take(n)
        v = int.from_bytes(raw, "big", signed=True)
        if raw != v.to_bytes((v.bit_length() + 8) // 8, "big", signed=True):
            raise CodecError("non-minimal integer")
        return v
    if code == _BYTES:
        return r.take(r.length())
    if code == _STR:
        return r.take(r.length()).decode("utf-8")
    if code == _FLOAT:
        return struct.unpack(">d", r.take(8))[0]
    if code == _VECTOR:
        n = r.length()
        return np.frombuffer(r.take(8 * n), dtype=">f8").astype(np.float64)
    if code == _SEQ:
        return tuple(_decode(r) for _ in range(r.length()))
    if code == _DICT:
        n = r.length()
        out = {}
        prev = None
        for _ in range(n):
            start = r.pos
            k = _decode(r)
            key_bytes = r.data[start:r.pos]
            if prev is not None and key_bytes <= prev:
                raise CodecError("dict keys not in canonical order")
            prev = key_bytes
            out[k] = _decode(r)
        return out
    if code == _ENUM:
        tag = int.from_bytes(r.take(2), "big")
        cls = _enums.get(tag)
        if cls is None:
            raise CodecError(f"unknown enum tag {tag}")
        return cls(int.from_bytes(r.take(2), "big"))
    if code == _RECORD:
        tag = int.from_bytes(r.take(2), "big")
        cls = _records.get(tag)
        if cls is None:
            raise CodecError(f"unknown wire tag {tag}")
        count = r.take(1)[0]
        names = _record_fields(cls)
        if count != len(names):
            raise CodecError(f"{cls.__name__}: expected {len(names)} fields, got {count}")
        return cls(*(_decode(r) for _ in names))
    raise CodecError(f"unknown type code {code:#x}")


def decode(data: bytes) -> Any:
    r = _Reader(bytes(data))
    value = _decode(r)
    if r.pos != len(r.data):
        raise CodecError("trailing bytes")
    return value


def walk(value: Any):
    """Yield every nested value, depth first, including ``value`` itself."""
    yield value
    if isinstance(value, (tuple, list)):
        for item in value:
            yield from walk(item)
    elif isinstance(value, dict):
        for k, v in value.items():
            yield from walk(k)
            yield from walk(v)
    elif dataclasses.is_dataclass(value) and not isinstance(value, type):
        for f in dataclasses.fields(value):
            yield from walk(getattr(value, f.name))
