"""Checkpoint container.

Layout: 8-byte magic, little-endian u32 format version, u64 header length,
UTF-8 JSON header, then the raw little-endian tensor payload in the order the
header lists. The header also carries a SHA-256 of the payload.
"""

from __future__ import annotations

import base64
import hashlib
import json
import struct
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any, Dict, Optional

import numpy as np
import torch

MAGIC = b"SODACKPT"
VERSION = 1


class CheckpointError(RuntimeError):
    pass


@dataclass
class Checkpoint:
    config: Dict[str, Any]
    config_hash: str
    step: int
    params: Dict[str, torch.Tensor]
    ema: Dict[str, torch.Tensor]
    adam_m: Dict[str, torch.Tensor] = field(default_factory=dict)
    adam_v: Dict[str, torch.Tensor] = field(default_factory=dict)
    alpha_bars: Optional[np.ndarray] = None
    rng: Dict[str, Any] = field(default_factory=dict)
    meta: Dict[str, Any] = field(default_factory=dict)


def torch_state_to_str(state: torch.Tensor) -> str:
    return base64.b64encode(state.numpy().tobytes()).decode("ascii")


def torch_state_from_str(s: str) -> torch.Tensor:
    return torch.from_numpy(np.frombuffer(base64.b64decode(s), dtype=np.uint8).copy())


def _tensor_groups(ck: Checkpoint):
    yield "params", ck.params
    yield "ema", ck.ema
    yield "adam_m", ck.adam_m
    yield "adam_v", ck.adam_v


def save_checkpoint(ck: Checkpoint, path) -> None:
    entries = []
    chunks = []
    for group, tensors in _tensor_groups(ck):
        for name in sorted(tensors):
            t = tensors[name].detach().cpu().contiguous()
            if t.dtype != torch.float32:
                raise CheckpointError(f"{group}/{name}: expected float32, got {t.dtype}")
            entries.append({"group": group, "name": name, "shape": list(t.shape), "dtype": "<f4"})
            chunks.append(t.numpy().astype("<f4", copy=False).tobytes())
    if ck.alpha_bars is not None:
        ab = np.asarray(ck.alpha_bars, dtype="<f8")
        entries.append({"group": "schedule", "name": "alpha_bars", "shape": [len(ab)], "dtype": "<f8"})
        chunks.append(ab.tobytes())
    payload = b"".join(chunks)
    header = {
        "format": "soda-checkpoint",
        "version": VERSION,
        "config": ck.config,
        "config_hash": ck.config_hash,
        "step": ck.step,
        "rng": ck.rng,
        "meta": ck.meta,
        "tensors": entries,
        "payload_bytes": len(payload),
        "payload_sha256": hashlib.sha256(payload).hexdigest(),
    }
    hb = json.dumps(header, sort_keys=True).encode("utf-8")
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    tmp = path.with_suffix(path.suffix + ".tmp")
    with open(tmp, "wb") as f:
        f.write(MAGIC)
        f.write(struct.pack("<IQ", VERSION, len(hb)))
        f.write(hb)
        f.write(payload)
    tmp.replace(path)


def read_header(path) -> Dict[str, Any]:
    return _read(path)[0]


def _read(path):
    try:
        data = Path(path).read_bytes()
    except OSError as e:
        raise CheckpointError(f"cannot read checkpoint {path}: {e}") from None
    if len(data) < 20 or data[:8] != MAGIC:
        raise CheckpointError(f"{path}: not a checkpoint (bad magic bytes)")
    version, hlen = struct.unpack("<IQ", data[8:20])
    if version != VERSION:
        raise CheckpointError(f"{path}: checkpoint format version {version}, this build reads version {VERSION}")
    if 20 + hlen > len(data):
        raise CheckpointError(f"{path}: truncated header (format version {version})")
    try:
        header = json.loads(data[20 : 20 + hlen].decode("utf-8"))
    except (UnicodeDecodeError, json.JSONDecodeError) as e:
        raise CheckpointError(f"{path}: corrupt header in format version {version} checkpoint: {e}") from None
    payload = data[20 + hlen :]
    if header.get("version") != version:
        raise CheckpointError(f"{path}: header version {header.get('version')} disagrees with container version {version}")
    if len(payload) != header.get("payload_bytes"):
        raise CheckpointError(
            f"{path}: payload is {len(payload)} bytes, header declares {header.get('payload_bytes')} (format version {version})"
        )
    if hashlib.sha256(payload).hexdigest() != header.get("payload_sha256"):
        raise CheckpointError(f"{path}: payload checksum mismatch (format version {version})")
    return header, payload


def load_checkpoint(path) -> Checkpoint:
    header, payload = _read(path)
    groups: Dict[str, Dict[str, torch.Tensor]] = {"params": {}, "ema": {}, "adam_m": {}, "adam_v": {}}
    alpha_bars = None
    offset = 0
    for e in header["tensors"]:
        dt = np.dtype(e["dtype"])
        n = int(np.prod(e["shape"], dtype=np.int64))
        arr = np.frombuffer(payload, dtype=dt, count=n, offset=offset).reshape(e["shape"]).copy()
        offset += n * dt.itemsize
        if e["group"] == "schedule":
            alpha_bars = arr.astype(np.float64)
        else:
            groups[e["group"]][e["name"]] = torch.from_numpy(arr.astype(dt.newbyteorder("=")))
    if offset != len(payload):
        raise CheckpointError(f"{path}: payload length does not match the tensor table")
    return Checkpoint(
        config=header["config"],
        config_hash=header["config_hash"],
        step=int(header["step"]),
        params=groups["params"],
        ema=groups["ema"],
        adam_m=groups["adam_m"],
        adam_v=groups["adam_v"],
        alpha_bars=alpha_bars,
        rng=header.get("rng", {}),
        meta=header.get("meta", {}),
    )
