"""Binary checkpoint format.

Layout (all integers little-endian)::

    b"MHMTLCKP"                      magic
    u32 version
    u32 entry count
    entries: u32 name length, name (utf-8), u32 rank, u32 extent * rank,
             float32 values (row-major)
    sections until EOF: 4-byte tag, u64 payload length, payload

Sections: ``OPTM`` (u32 JSON length, JSON header, u32 entry count, moment
entries), ``SCHD`` / ``RNGS`` / ``CONF`` (JSON).
"""

from __future__ import annotations

import io
import json
import os
import struct
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

MAGIC = b"MHMTLCKP"
VERSION = 1


class CheckpointError(Exception):
    """Unreadable checkpoint, or one that does not match the model configuration."""


@dataclass
class Checkpoint:
    params: dict[str, np.ndarray]
    config_digest: str
    model_config: dict
    optimizer: dict | None = None  # {"header": {...}, "m": {...}, "v": {...}}
    scheduler: dict | None = None
    rng: dict | None = None
    extra: dict = field(default_factory=dict)


def _write_entries(buf: io.BytesIO, entries: dict[str, np.ndarray]) -> None:
    buf.write(struct.pack("<I", len(entries)))
    for name, arr in entries.items():
        raw = name.encode("utf-8")
        arr = np.ascontiguousarray(arr, dtype="<f4")
        buf.write(struct.pack("<I", len(raw)))
        buf.write(raw)
        buf.write(struct.pack("<I", arr.ndim))
        buf.write(struct.pack(f"<{arr.ndim}I", *arr.shape))
        buf.write(arr.tobytes())


def _read_entries(view: memoryview, pos: int) -> tuple[dict[str, np.ndarray], int]:
    (count,) = struct.unpack_from("<I", view, pos)
    pos += 4
    out = {}
    for _ in range(count):
        (nlen,) = struct.unpack_from("<I", view, pos)
        pos += 4
        name = bytes(view[pos : pos + nlen]).decode("utf-8")
        pos += nlen
        (rank,) = struct.unpack_from("<I", view, pos)
        pos += 4
        shape = struct.unpack_from(f"<{rank}I", view, pos)
        pos += 4 * rank
        n = int(np.prod(shape)) if rank else 1
        arr = np.frombuffer(view, dtype="<f4", count=n, offset=pos).reshape(shape).astype(np.float32)
        pos += 4 * n
        out[name] = arr
    return out, pos


def _section(buf: io.BytesIO, tag: bytes, payload: bytes) -> None:
    buf.write(tag)
    buf.write(struct.pack("<Q", len(payload)))
    buf.write(payload)


def _json_bytes(obj) -> bytes:
    return json.dumps(obj, sort_keys=True).encode("utf-8")


def dumps(ckpt: Checkpoint) -> bytes:
    buf = io.BytesIO()
    buf.write(MAGIC)
    buf.write(struct.pack("<I", VERSION))
    _write_entries(buf, ckpt.params)
    if ckpt.optimizer is not None:
        opt = io.BytesIO()
        header = _json_bytes(ckpt.optimizer["header"])
        opt.write(struct.pack("<I", len(header)))
        opt.write(header)
        moments = {f"m/{k}": v for k, v in ckpt.optimizer["m"].items()}
        moments.update({f"v/{k}": v for k, v in ckpt.optimizer["v"].items()})
        _write_entries(opt, moments)
        _section(buf, b"OPTM", opt.getvalue())
    if ckpt.scheduler is not None:
        _section(buf, b"SCHD", _json_bytes(ckpt.scheduler))
    if ckpt.rng is not None:
        _section(buf, b"RNGS", _json_bytes(ckpt.rng))
    _section(buf, b"CONF", _json_bytes({"digest": ckpt.config_digest, "model": ckpt.model_config, "extra": ckpt.extra}))
    return buf.getvalue()


def loads(blob: bytes) -> Checkpoint:
    view = memoryview(blob)
    if bytes(view[:8]) != MAGIC:
        raise CheckpointError("not a checkpoint file (bad magic bytes)")
    try:
        (version,) = struct.unpack_from("<I", view, 8)
        if version != VERSION:
            raise CheckpointError(f"unsupported checkpoint version {version}")
        params, pos = _read_entries(view, 12)
        sections: dict[bytes, memoryview] = {}
        while pos < len(view):
            tag = bytes(view[pos : pos + 4])
            (length,) = struct.unpack_from("<Q", view, pos + 4)
            pos += 12
            sections[tag] = view[pos : pos + length]
            if len(sections[tag]) != length:
                raise CheckpointError(f"truncated section {tag!r}")
            pos += length
    except (struct.error, ValueError) as exc:  # ValueError: short tensor payload or bad utf-8 name
        raise CheckpointError(f"truncated or corrupt checkpoint ({exc})") from exc
    if b"CONF" not in sections:
        raise CheckpointError("checkpoint has no CONF section")
    try:
        return _assemble(params, sections)
    except (struct.error, ValueError, KeyError) as exc:
        raise CheckpointError(f"corrupt checkpoint section ({exc})") from exc


def _assemble(params, sections) -> Checkpoint:
    conf = json.loads(bytes(sections[b"CONF"]))
    optimizer = None
    if b"OPTM" in sections:
        opt = sections[b"OPTM"]
        (hlen,) = struct.unpack_from("<I", opt, 0)
        header = json.loads(bytes(opt[4 : 4 + hlen]))
        moments, _ = _read_entries(opt, 4 + hlen)
        optimizer = {
            "header": header,
            "m": {k[2:]: v for k, v in moments.items() if k.startswith("m/")},
            "v": {k[2:]: v for k, v in moments.items() if k.startswith("v/")},
        }
    return Checkpoint(
        params=params,
        config_digest=conf["digest"],
        model_config=conf["model"],
        optimizer=optimizer,
        scheduler=json.loads(bytes(sections[b"SCHD"])) if b"SCHD" in sections else None,
        rng=json.loads(bytes(sections[b"RNGS"])) if b"RNGS" in sections else None,
        extra=conf.get("extra", {}),
    )


def save(ckpt: Checkpoint, path: str | os.PathLike) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    tmp = path.with_suffix(path.suffix + ".tmp")
    tmp.write_bytes(dumps(ckpt))
    os.replace(tmp, path)
    return path


def load(path: str | os.PathLike, expected_digest: str | None = None) -> Checkpoint:
    path = Path(path)
    try:
        blob = path.read_bytes()
    except OSError as exc:
        raise CheckpointError(f"cannot read checkpoint {path}: {exc}") from exc
    ckpt = loads(blob)
    if expected_digest is not None and ckpt.config_digest != expected_digest:
        raise CheckpointError(
            f"checkpoint config digest {ckpt.config_digest[:12]} does not match model config {expected_digest[:12]}"
        )
    return ckpt
