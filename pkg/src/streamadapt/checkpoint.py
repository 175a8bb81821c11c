"""Checkpoint serialization: a plain-text manifest next to a single raw
little-endian buffer.  Round-trips are bit-exact; the manifest carries a
sha256 of the buffer so reruns can be compared by digest alone."""

from __future__ import annotations

import hashlib
from pathlib import Path

import numpy as np

from .model import ParamBundle
from .tensor import Tensor

FORMAT = "dual-branch-checkpoint-v1"
_DTYPE_CODES = {"float32": "<f4", "float64": "<f8"}


def save_checkpoint(bundle: ParamBundle, path) -> Path:
    """Write manifest at `path` and the buffer at `path` + '.bin'."""
    path = Path(path)
    bin_path = path.with_name(path.name + ".bin")

    chunks = []
    entries = []
    offset = 0
    for name in bundle.names():
        t = bundle[name]
        code = _DTYPE_CODES.get(t.data.dtype.name)
        if code is None:
            raise ValueError(f"cannot checkpoint dtype {t.data.dtype} for {name!r}")
        raw = np.ascontiguousarray(t.data, dtype=np.dtype(code)).tobytes()
        entries.append((name, bundle.group_of(name), t.data.dtype.name, t.shape, offset, len(raw)))
        chunks.append(raw)
        offset += len(raw)
    buffer = b"".join(chunks)
    digest = hashlib.sha256(buffer).hexdigest()

    lines = [
        f"format = {FORMAT}",
        "byte_order = little",
        f"buffer = {bin_path.name}",
        f"sha256 = {digest}",
        f"version = {bundle.version}",
        f"count = {len(entries)}",
    ]
    for i, (name, group, dtype, shape, off, size) in enumerate(entries):
        shape_s = ",".join(str(s) for s in shape) if shape else ""
        lines.append(f"param.{i}.name = {name}")
        lines.append(f"param.{i}.group = {group}")
        lines.append(f"param.{i}.dtype = {dtype}")
        lines.append(f"param.{i}.shape = {shape_s}")
        lines.append(f"param.{i}.offset = {off}")
        lines.append(f"param.{i}.size = {size}")

    bin_path.write_bytes(buffer)
    path.write_text("\n".join(lines) + "\n")
    return path


def load_checkpoint(path) -> ParamBundle:
    path = Path(path)
    kv = {}
    for ln in path.read_text().splitlines():
        ln = ln.strip()
        if not ln or ln.startswith("#"):
            continue
        key, _, value = ln.partition("=")
        kv[key.strip()] = value.strip()
    if kv.get("format") != FORMAT:
        raise ValueError(f"{path}: unknown checkpoint format {kv.get('format')!r}")
    buffer = path.with_name(kv["buffer"]).read_bytes()
    if hashlib.sha256(buffer).hexdigest() != kv["sha256"]:
        raise ValueError(f"{path}: buffer digest mismatch (corrupt checkpoint)")

    named, groups = {}, {}
    for i in range(int(kv["count"])):
        name = kv[f"param.{i}.name"]
        dtype = kv[f"param.{i}.dtype"]
        shape_s = kv[f"param.{i}.shape"]
        shape = tuple(int(s) for s in shape_s.split(",")) if shape_s else ()
        off = int(kv[f"param.{i}.offset"])
        size = int(kv[f"param.{i}.size"])
        arr = np.frombuffer(buffer[off : off + size], dtype=np.dtype(_DTYPE_CODES[dtype]))
        arr = arr.reshape(shape).astype(dtype, copy=True)
        named[name] = Tensor(arr, requires_grad=True, dtype=arr.dtype)
        groups[name] = kv[f"param.{i}.group"]
    return ParamBundle(named, groups, version=int(kv.get("version", 0)))


def checkpoint_digest(path) -> str:
    """Content digest of manifest + buffer (filename-independent), for
    rerun-determinism comparisons."""
    path = Path(path)
    h = hashlib.sha256()
    for ln in path.read_text().splitlines():
        if not ln.startswith("buffer ="):
            h.update(ln.encode() + b"\n")
    bin_path = path.with_name(path.name + ".bin")
    h.update(bin_path.read_bytes())
    return h.hexdigest()
