"""Versioned artifact files: one JSON header line followed by npz bytes.

The header carries ``schema`` and ``version`` so a reader can refuse files
written by an incompatible build before touching the payload.
"""

from __future__ import annotations

import io
import json
from pathlib import Path

import numpy as np


class SchemaError(ValueError):
    pass


def _dumps(header: dict) -> bytes:
    return (json.dumps(header, sort_keys=True, separators=(",", ":")) + "\n").encode()


def write_binary(path, schema: str, version: int, header: dict, arrays: dict) -> None:
    head = dict(header)
    head["schema"] = schema
    head["version"] = version
    buf = io.BytesIO()
    # plain np.savez stores zip timestamps of 1980, so output is byte-stable
    np.savez(buf, **{k: np.ascontiguousarray(v) for k, v in sorted(arrays.items())})
    Path(path).write_bytes(_dumps(head) + buf.getvalue())


def read_header(path) -> dict:
    with open(path, "rb") as fh:
        line = fh.readline()
    try:
        return json.loads(line)
    except (json.JSONDecodeError, UnicodeDecodeError):
        raise SchemaError(f"{path}: missing JSON header line") from None


def check_schema(header: dict, schema: str, version: int, path="") -> None:
    if header.get("schema") != schema:
        raise SchemaError(f"{path}: expected schema {schema!r}, found {header.get('schema')!r}")
    if header.get("version") != version:
        raise SchemaError(f"{path}: schema version {header.get('version')} != supported {version}")


def read_binary(path, schema: str, version: int):
    raw = Path(path).read_bytes()
    nl = raw.find(b"\n")
    if nl < 0:
        raise SchemaError(f"{path}: missing JSON header line")
    try:
        header = json.loads(raw[:nl])
    except (json.JSONDecodeError, UnicodeDecodeError):
        raise SchemaError(f"{path}: missing JSON header line") from None
    check_schema(header, schema, version, path)
    with np.load(io.BytesIO(raw[nl + 1:]), allow_pickle=False) as z:
        arrays = {k: z[k] for k in z.files}
    return header, arrays


def write_json(path, schema: str, version: int, payload: dict) -> None:
    body = dict(payload)
    body["schema"] = schema
    body["version"] = version
    Path(path).write_text(json.dumps(body, sort_keys=True, indent=1) + "\n")


def read_json(path, schema: str, version: int) -> dict:
    try:
        body = json.loads(Path(path).read_text())
    except json.JSONDecodeError as e:
        raise SchemaError(f"{path}: not valid JSON ({e})") from None
    check_schema(body, schema, version, path)
    return body
