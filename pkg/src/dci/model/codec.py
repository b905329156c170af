"""Canonical JSON encoding for model types.

Field names are the dataclass field names, enums encode as their lowercase
value, bytes as base64 and maps are emitted with sorted keys. Decoding
accepts keys in any order but rejects unknown ones.
"""

from __future__ import annotations

import base64
import binascii
import dataclasses
import json
import types
import typing
from enum import Enum
from functools import lru_cache
from typing import Any, TypeVar, Union

T = TypeVar("T")


class CodecError(ValueError):
    pass


def to_jsonable(obj: Any) -> Any:
    if obj is None or isinstance(obj, bool):
        return obj
    if isinstance(obj, Enum):
        return obj.value
    if isinstance(obj, (int, float, str)):
        return obj
    if isinstance(obj, (bytes, bytearray)):
        return base64.b64encode(bytes(obj)).decode("ascii")
    if dataclasses.is_dataclass(obj) and not isinstance(obj, type):
        hook = getattr(obj, "__json__", None)
        if hook is not None:
            return hook()
        return {f.name: to_jsonable(getattr(obj, f.name)) for f in dataclasses.fields(obj)}
    if isinstance(obj, dict):
        return {str(k.value if isinstance(k, Enum) else k): to_jsonable(v) for k, v in obj.items()}
    if isinstance(obj, (list, tuple)):
        return [to_jsonable(v) for v in obj]
    raise TypeError(f"cannot encode {type(obj).__name__}")


def canonical_json(obj: Any) -> bytes:
    """Encode ``obj`` (model value or plain JSON data) as canonical UTF-8 JSON."""
    return json.dumps(
        to_jsonable(obj),
        sort_keys=True,
        separators=(",", ":"),
        ensure_ascii=False,
        allow_nan=False,
    ).encode("utf-8")


def encode(obj: Any) -> bytes:
    return canonical_json(obj)


def decode(cls: type[T], data: bytes | str) -> T:
    try:
        raw = json.loads(data)
    except (json.JSONDecodeError, UnicodeDecodeError) as exc:
        raise CodecError(f"invalid JSON: {exc}") from exc
    return from_jsonable(cls, raw)


@lru_cache(maxsize=None)
def _hints(cls: type) -> dict[str, Any]:
    return typing.get_type_hints(cls)


def _is_union(origin: Any) -> bool:
    return origin is Union or origin is types.UnionType


def from_jsonable(tp: Any, data: Any) -> Any:
    if tp is Any:
        return data
    origin = typing.get_origin(tp)
    args = typing.get_args(tp)
    if _is_union(origin):
        if data is None and type(None) in args:
            return None
        rest = [a for a in args if a is not type(None)]
        if len(rest) != 1:
            raise CodecError(f"unsupported union {tp}")
        return from_jsonable(rest[0], data)
    if origin is tuple:
        if not isinstance(data, list):
            raise CodecError(f"expected list, got {type(data).__name__}")
        if len(args) == 2 and args[1] is Ellipsis:
            return tuple(from_jsonable(args[0], x) for x in data)
        if len(args) != len(data):
            raise CodecError("tuple arity mismatch")
        return tuple(from_jsonable(a, x) for a, x in zip(args, data))
    if origin is list:
        if not isinstance(data, list):
            raise CodecError(f"expected list, got {type(data).__name__}")
        return [from_jsonable(args[0], x) for x in data]
    if origin is dict:
        if not isinstance(data, dict):
            raise CodecError(f"expected object, got {type(data).__name__}")
        kt, vt = args
        return {from_jsonable(kt, k): from_jsonable(vt, v) for k, v in data.items()}
    if isinstance(tp, type) and issubclass(tp, Enum):
        try:
            return tp(data)
        except ValueError as exc:
            raise CodecError(str(exc)) from exc
    if tp is bool:
        if not isinstance(data, bool):
            raise CodecError(f"expected bool, got {data!r}")
        return data
    if tp is int:
        if isinstance(data, bool) or not isinstance(data, int):
            raise CodecError(f"expected int, got {data!r}")
        return data
    if tp is float:
        if isinstance(data, bool) or not isinstance(data, (int, float)):
            raise CodecError(f"expected float, got {data!r}")
        return float(data)
    if tp is str:
        if not isinstance(data, str):
            raise CodecError(f"expected string, got {data!r}")
        return data
    if tp is bytes:
        if not isinstance(data, str):
            raise CodecError("expected base64 string")
        try:
            return base64.b64decode(data, validate=True)
        except binascii.Error as exc:
            raise CodecError(f"bad base64: {exc}") from exc
    if dataclasses.is_dataclass(tp):
        hook = getattr(tp, "__from_json__", None)
        try:
            if hook is not None:
                return hook(data)
            return _decode_dataclass(tp, data)
        except CodecError:
            raise
        except (ValueError, TypeError) as exc:
            raise CodecError(f"{tp.__name__}: {exc}") from exc
    raise CodecError(f"unsupported type {tp!r}")


def _decode_dataclass(tp: type, data: Any) -> Any:
    if not isinstance(data, dict):
        raise CodecError(f"{tp.__name__}: expected object, got {type(data).__name__}")
    hints = _hints(tp)
    names = {f.name for f in dataclasses.fields(tp)}
    unknown = set(data) - names
    if unknown:
        raise CodecError(f"{tp.__name__}: unknown fields {sorted(unknown)}")
    kwargs = {}
    for f in dataclasses.fields(tp):
        if f.name in data:
            kwargs[f.name] = from_jsonable(hints[f.name], data[f.name])
        elif f.default is dataclasses.MISSING and f.default_factory is dataclasses.MISSING:
            raise CodecError(f"{tp.__name__}: missing field {f.name!r}")
    return tp(**kwargs)
