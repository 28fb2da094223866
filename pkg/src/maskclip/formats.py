"""On-disk formats: the MCW1 tensor container, MCM1 mask files and Netpbm images.

MCW1 layout::

    MCW1\\n
    config <count>\\n
    <key> <decimal value>\\n        (count lines)
    tensors <count>\\n
    <name> <rank> <e1> ... <er>\\n  then prod(e) float32 little-endian values
"""
from __future__ import annotations

import os
import tempfile
from pathlib import Path
from typing import Mapping

import numpy as np

MAGIC_WEIGHTS = b"MCW1"
MAGIC_MASKS = "MCM1"


class FormatError(ValueError):
    pass


def atomic_write(path: str | os.PathLike, data: bytes) -> None:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    fd, tmp = tempfile.mkstemp(dir=path.parent, prefix=f".{path.name}.")
    try:
        with os.fdopen(fd, "wb") as f:
            f.write(data)
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise


def encode_container(config: Mapping[str, object], tensors: Mapping[str, np.ndarray]) -> bytes:
    out = [MAGIC_WEIGHTS + b"\n", f"config {len(config)}\n".encode()]
    for key, val in config.items():
        if " " in key or "\n" in str(val):
            raise FormatError(f"bad config entry {key!r}")
        out.append(f"{key} {val}\n".encode())
    out.append(f"tensors {len(tensors)}\n".encode())
    for name in sorted(tensors):
        arr = np.asarray(tensors[name])
        if " " in name:
            raise FormatError(f"tensor name {name!r} contains a space")
        out.append((" ".join([name, str(arr.ndim), *map(str, arr.shape)]) + "\n").encode())
        out.append(np.ascontiguousarray(arr, dtype="<f4").tobytes())
    return b"".join(out)


def decode_container(data: bytes) -> tuple[dict[str, str], dict[str, np.ndarray]]:
    pos = 0

    def line() -> str:
        nonlocal pos
        end = data.find(b"\n", pos)
        if end < 0:
            raise FormatError("truncated header")
        s = data[pos:end].decode()
        pos = end + 1
        return s

    if line() != MAGIC_WEIGHTS.decode():
        raise FormatError("missing MCW1 magic")
    head = line().split()
    if len(head) != 2 or head[0] != "config":
        raise FormatError("expected config section")
    config = {}
    for _ in range(int(head[1])):
        key, _, val = line().partition(" ")
        config[key] = val
    head = line().split()
    if len(head) != 2 or head[0] != "tensors":
        raise FormatError("expected tensors section")
    tensors = {}
    for _ in range(int(head[1])):
        parts = line().split()
        name, rank = parts[0], int(parts[1])
        shape = tuple(int(e) for e in parts[2 : 2 + rank])
        if len(shape) != rank:
            raise FormatError(f"tensor {name}: rank/extent mismatch")
        nbytes = 4 * int(np.prod(shape, dtype=np.int64))
        if pos + nbytes > len(data):
            raise FormatError(f"tensor {name}: truncated data")
        tensors[name] = np.frombuffer(data, dtype="<f4", count=nbytes // 4, offset=pos).astype(np.float64).reshape(shape)
        pos += nbytes
    if pos != len(data):
        raise FormatError("trailing bytes after last tensor")
    return config, tensors


def save_weights(path, weights) -> None:
    atomic_write(path, encode_container(weights.config.as_dict(), weights.tensors))


def load_weights(path):
    from .vit import FrozenWeights, ViTConfig

    config, tensors = decode_container(Path(path).read_bytes())
    cfg = ViTConfig(**{k: int(v) for k, v in config.items()}).validate()
    return FrozenWeights(cfg, tensors)


# ---------------------------------------------------------------- masks


def write_masks(path, masks: np.ndarray, threshold: float = 0.5) -> None:
    masks = np.asarray(masks, dtype=np.float64)
    m, h, w = masks.shape
    lines = [f"{MAGIC_MASKS} {m} {h} {w} {threshold!r}"]
    for k in range(m):
        lines.append(" ".join(repr(float(v)) for v in masks[k].ravel()))
    atomic_write(path, ("\n".join(lines) + "\n").encode())


def read_masks(path) -> tuple[np.ndarray, float]:
    """Read an MCM1 file, or a directory of 8-bit PGM masks (sorted by filename)."""
    path = Path(path)
    if path.is_dir():
        files = sorted(path.glob("*.pgm"))
        masks = [read_pnm(f) / 255.0 for f in files]
        if not masks:
            return np.zeros((0, 0, 0)), 0.5
        return np.stack([m if m.ndim == 2 else m[0] for m in masks]), 0.5
    tokens = path.read_text().split()
    if len(tokens) < 5 or tokens[0] != MAGIC_MASKS:
        raise FormatError(f"{path}: missing MCM1 header")
    m, h, w = (int(t) for t in tokens[1:4])
    threshold = float(tokens[4])
    values = np.array([float(t) for t in tokens[5:]], dtype=np.float64)
    if values.size != m * h * w:
        raise FormatError(f"{path}: expected {m * h * w} values, found {values.size}")
    if values.size and (values.min() < 0.0 or values.max() > 1.0):
        raise FormatError(f"{path}: mask values outside [0, 1]")
    return values.reshape(m, h, w), threshold


# ---------------------------------------------------------------- netpbm


def _pnm_header(data: bytes):
    fields, pos = [], 0
    while len(fields) < 4:
        while pos < len(data) and data[pos : pos + 1].isspace():
            pos += 1
        if data[pos : pos + 1] == b"#":
            pos = data.index(b"\n", pos) + 1
            continue
        start = pos
        while pos < len(data) and not data[pos : pos + 1].isspace():
            pos += 1
        fields.append(data[start:pos].decode())
    return fields, pos + 1


def read_pnm(path) -> np.ndarray:
    """Binary PGM (P5) -> [H, W] or PPM (P6) -> [3, H, W], raw integer values as float64."""
    data = Path(path).read_bytes()
    (magic, w, h, maxval), pos = _pnm_header(data)
    w, h, maxval = int(w), int(h), int(maxval)
    if magic not in ("P5", "P6"):
        raise FormatError(f"{path}: unsupported netpbm type {magic}")
    channels = 3 if magic == "P6" else 1
    dtype = ">u2" if maxval > 255 else "u1"
    count = w * h * channels
    arr = np.frombuffer(data, dtype=dtype, count=count, offset=pos).astype(np.float64)
    if magic == "P6":
        return arr.reshape(h, w, 3).transpose(2, 0, 1)
    return arr.reshape(h, w)


def read_image(path) -> np.ndarray:
    """Read a PPM/PGM as a [3, H, W] float image in [0, 1]."""
    data = Path(path).read_bytes()
    (_, _, _, maxval), _ = _pnm_header(data)
    arr = read_pnm(path) / float(maxval)
    return arr if arr.ndim == 3 else np.repeat(arr[None], 3, axis=0)


def encode_pnm(arr: np.ndarray, maxval: int = 255) -> bytes:
    arr = np.asarray(arr)
    if arr.ndim == 3:
        magic, (c, h, w) = b"P6", arr.shape
        body = arr.transpose(1, 2, 0)
    else:
        magic, (h, w) = b"P5", arr.shape
        body = arr
    dtype = ">u2" if maxval > 255 else "u1"
    if body.min() < 0 or body.max() > maxval:
        raise FormatError("pixel values out of range")
    return magic + f"\n{w} {h}\n{maxval}\n".encode() + np.ascontiguousarray(body, dtype=dtype).tobytes()


def write_image(path, image: np.ndarray) -> None:
    """Write a [3, H, W] float image in [0, 1] as 8-bit PPM."""
    q = np.clip(np.rint(np.asarray(image) * 255.0), 0, 255).astype(np.uint8)
    atomic_write(path, encode_pnm(q, 255))


def save_rma(path, params, config=None) -> None:
    cfg = {} if config is None else config.as_dict()
    atomic_write(path, encode_container(cfg, params.tensors))


def load_rma(path):
    from .rma import RMAParams

    _, tensors = decode_container(Path(path).read_bytes())
    layers = set()
    for name in tensors:
        if not name.startswith("rma.layer"):
            raise FormatError(f"unexpected tensor {name!r} in RMA file")
        layers.add(int(name[len("rma.layer"):].split(".", 1)[0]))
    return RMAParams(tuple(sorted(layers)), tensors)
