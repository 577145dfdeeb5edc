"""ZCKPT1 checkpoint files.

Layout (text header, then a binary payload)::

    ZCKPT1
    meta <json>
    rng <json>
    param <name> <d0,d1,...> <offset>
    ...
    momentum <name> <d0,d1,...> <offset>
    ...
    end <n_values>
    <n_values little-endian float32>

Offsets count float32 values from the start of the payload. JSON is
written with sorted keys so a load/save cycle reproduces the bytes.
"""
import json

import numpy as np

from .autograd import Parameter

MAGIC = b"ZCKPT1"


class CheckpointError(ValueError):
    pass


def _shape_str(shape):
    return ",".join(str(int(d)) for d in shape) if shape else "-"


def _parse_shape(text):
    return () if text == "-" else tuple(int(d) for d in text.split(","))


def dumps_checkpoint(params, meta=None, rng_state=None):
    """``params`` is an iterable of :class:`Parameter`; names must be unique."""
    params = list(params)
    names = [p.name for p in params]
    if len(set(names)) != len(names):
        raise CheckpointError("duplicate parameter names")
    for n in names:
        if not n or any(ch.isspace() for ch in n):
            raise CheckpointError(f"parameter name {n!r} must be non-empty without whitespace")
    lines = [MAGIC.decode(), "meta " + json.dumps(meta or {}, sort_keys=True),
             "rng " + json.dumps(rng_state, sort_keys=True)]
    chunks, offset = [], 0
    for kind in ("param", "momentum"):
        for p in params:
            arr = p.value if kind == "param" else p.momentum
            lines.append(f"{kind} {p.name} {_shape_str(arr.shape)} {offset}")
            chunks.append(np.ascontiguousarray(arr, dtype="<f4").ravel())
            offset += arr.size
    lines.append(f"end {offset}")
    header = ("\n".join(lines) + "\n").encode()
    payload = np.concatenate(chunks).tobytes() if chunks else b""
    return header + payload


def loads_checkpoint(buf):
    """Returns ``(params, meta, rng_state)`` with params as :class:`Parameter`."""
    if not buf.startswith(MAGIC + b"\n"):
        raise CheckpointError("not a ZCKPT1 file")
    pos = 0
    lines = []
    while True:
        nl = buf.find(b"\n", pos)
        if nl < 0:
            raise CheckpointError("header is not terminated")
        line = buf[pos:nl].decode()
        pos = nl + 1
        lines.append(line)
        if line.startswith("end "):
            break
    try:
        meta = json.loads(lines[1][len("meta "):])
        rng_state = json.loads(lines[2][len("rng "):])
        total = int(lines[-1].split()[1])
    except (IndexError, ValueError) as exc:
        raise CheckpointError(f"malformed header: {exc}") from None
    payload = buf[pos:]
    if len(payload) != 4 * total:
        raise CheckpointError(f"payload holds {len(payload) // 4} values, header says {total}")
    values = np.frombuffer(payload, dtype="<f4")
    tables = {"param": {}, "momentum": {}}
    for line in lines[3:-1]:
        kind, name, shape, off = line.split()
        shape, off = _parse_shape(shape), int(off)
        n = int(np.prod(shape)) if shape else 1
        tables[kind][name] = values[off:off + n].reshape(shape).astype(np.float32)
    params = []
    for name, v in tables["param"].items():
        p = Parameter(name, v)
        if name in tables["momentum"]:
            p.momentum = tables["momentum"][name].copy()
        params.append(p)
    return params, meta, rng_state


def save_checkpoint(path, params, meta=None, rng_state=None):
    with open(path, "wb") as fh:
        fh.write(dumps_checkpoint(params, meta, rng_state))


def load_checkpoint(path):
    with open(path, "rb") as fh:
        return loads_checkpoint(fh.read())
