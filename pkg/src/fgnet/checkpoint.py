"""Versioned binary model checkpoints.

Layout (little-endian)::

    b"FGN1" | u32 version | u32 epoch | u32 config_len | config (utf-8 key=value)
    | u32 tensor_count | tensor*

    tensor := u16 name_len | name (utf-8) | u32 rows | u32 cols | rows*cols f64
"""

from __future__ import annotations

import io
import struct
from pathlib import Path

import numpy as np

from . import autodiff as ad
from .network import FGNet, NetworkConfig
from .sampling import GumbelSampler

MAGIC = b"FGN1"
VERSION = 1


class CheckpointError(ValueError):
    pass


def parse_key_values(text: str, source: str = "<config>") -> dict[str, str]:
    """Flat ``key=value`` lines; blank lines and ``#`` comments are skipped."""
    values: dict[str, str] = {}
    for lineno, line in enumerate(text.splitlines(), 1):
        line = line.strip()
        if not line or line.startswith("#"):
            continue
        if "=" not in line:
            raise CheckpointError(f"{source}:{lineno}: expected key=value, got {line!r}")
        key, value = line.split("=", 1)
        values[key.strip()] = value.strip()
    return values


def dumps(net: FGNet, epoch: int = 0) -> bytes:
    buf = io.BytesIO()
    cfg = net.config.to_text().encode("utf-8")
    buf.write(MAGIC)
    buf.write(struct.pack("<III", VERSION, epoch, len(cfg)))
    buf.write(cfg)
    tensors = dict(net.all_tensors())
    if net.sampler is not None:
        tensors["gss.state"] = ad.Tensor([[net.sampler.tau, float(net.sampler.seed)]])
    buf.write(struct.pack("<I", len(tensors)))
    for name, t in tensors.items():
        raw = name.encode("utf-8")
        buf.write(struct.pack("<H", len(raw)))
        buf.write(raw)
        buf.write(struct.pack("<II", *t.data.shape))
        buf.write(np.ascontiguousarray(t.data, dtype="<f8").tobytes())
    return buf.getvalue()


def save(net: FGNet, path, epoch: int = 0) -> None:
    path = Path(path)
    tmp = path.with_suffix(path.suffix + ".tmp")
    tmp.write_bytes(dumps(net, epoch))
    tmp.replace(path)


def _read(buf: io.BytesIO, fmt: str):
    size = struct.calcsize(fmt)
    chunk = buf.read(size)
    if len(chunk) != size:
        raise CheckpointError("truncated checkpoint")
    return struct.unpack(fmt, chunk)


def loads(data: bytes) -> tuple[FGNet, int]:
    buf = io.BytesIO(data)
    if buf.read(4) != MAGIC:
        raise CheckpointError("not an FG-Net checkpoint (bad magic)")
    version, epoch, cfg_len = _read(buf, "<III")
    if version != VERSION:
        raise CheckpointError(f"unsupported checkpoint version {version}")
    cfg = NetworkConfig.from_values(parse_key_values(buf.read(cfg_len).decode("utf-8")))
    net = FGNet(cfg)
    (count,) = _read(buf, "<I")
    loaded = {}
    for _ in range(count):
        (nlen,) = _read(buf, "<H")
        name = buf.read(nlen).decode("utf-8")
        rows, cols = _read(buf, "<II")
        raw = buf.read(rows * cols * 8)
        if len(raw) != rows * cols * 8:
            raise CheckpointError(f"truncated tensor {name}")
        loaded[name] = np.frombuffer(raw, dtype="<f8").reshape(rows, cols).astype(np.float64)
    if "gss.weights" in loaded:
        state = loaded.pop("gss.state", np.array([[1.0, 0.0]]))
        net.sampler = GumbelSampler(ad.parameter(loaded.pop("gss.weights"), "gss.weights"),
                                    float(state[0, 0]), int(state[0, 1]))
    targets = net.all_tensors()
    for name, arr in loaded.items():
        if name not in targets:
            raise CheckpointError(f"checkpoint tensor {name!r} has no slot in this network")
        if targets[name].data.shape != arr.shape:
            raise CheckpointError(f"shape mismatch for {name}: {arr.shape} vs {targets[name].data.shape}")
        targets[name].data[...] = arr
    return net, epoch


def load(path) -> tuple[FGNet, int]:
    path = Path(path)
    if not path.exists():
        raise FileNotFoundError(f"checkpoint not found: {path}")
    return loads(path.read_bytes())
