"""Versioned binary checkpoints.

Layout: 8-byte magic, little-endian uint64 header length, UTF-8 JSON header,
then every parameter array as row-major little-endian float64 in header order.
The header carries a SHA-256 of the payload so truncation or bit rot is caught.
"""
from __future__ import annotations

import hashlib
import json
import struct
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any, Optional

import numpy as np

from .model import ModelParams

MAGIC = b"OPDCKPT\x00"
VERSION = 1
PARAM_ORDER = ("E", "W_a", "W_o", "b")


class CheckpointError(RuntimeError):
    pass


@dataclass
class TrainState:
    params: ModelParams
    step: int = 0
    stage: str = ""
    config_hash: str = ""
    rng_state: Optional[dict] = None
    tokenizer_hash: str = ""
    counters: dict[str, Any] = field(default_factory=dict)
    records: list[dict] = field(default_factory=list)

    def rng(self) -> np.random.Generator:
        g = np.random.default_rng()
        if self.rng_state is not None:
            g.bit_generator.state = self.rng_state
        return g


def save_checkpoint(state: TrainState, path) -> Path:
    path = Path(path)
    arrays = [np.ascontiguousarray(getattr(state.params, n), dtype="<f8") for n in PARAM_ORDER]
    payload = b"".join(a.tobytes(order="C") for a in arrays)
    header = {
        "version": VERSION,
        "shapes": [[n, list(a.shape)] for n, a in zip(PARAM_ORDER, arrays)],
        "tokenizer_hash": state.tokenizer_hash,
        "rng_state": state.rng_state,
        "step": state.step,
        "stage": state.stage,
        "config_hash": state.config_hash,
        "counters": state.counters,
        "records": state.records,
        "payload_sha256": hashlib.sha256(payload).hexdigest(),
    }
    hbytes = json.dumps(header, sort_keys=True).encode()
    tmp = path.with_suffix(path.suffix + ".tmp")
    with open(tmp, "wb") as fh:
        fh.write(MAGIC)
        fh.write(struct.pack("<Q", len(hbytes)))
        fh.write(hbytes)
        fh.write(payload)
    tmp.replace(path)
    return path


def load_checkpoint(path, expected_config_hash: Optional[str] = None, expected_tokenizer_hash: Optional[str] = None) -> TrainState:
    blob = Path(path).read_bytes()
    if blob[:8] != MAGIC or len(blob) < 16:
        raise CheckpointError(f"{path}: not an opd_lab checkpoint (bad magic)")
    (hlen,) = struct.unpack("<Q", blob[8:16])
    try:
        header = json.loads(blob[16 : 16 + hlen].decode())
        shapes = [(n, tuple(s)) for n, s in header["shapes"]]
        version = header["version"]
    except (UnicodeDecodeError, ValueError, KeyError, TypeError) as exc:
        raise CheckpointError(f"{path}: corrupted header ({exc})") from None
    if version != VERSION:
        raise CheckpointError(f"{path}: unsupported checkpoint version {version}")
    if [n for n, _ in shapes] != list(PARAM_ORDER):
        raise CheckpointError(f"{path}: unexpected parameter layout {[n for n, _ in shapes]}")
    payload = blob[16 + hlen :]
    if hashlib.sha256(payload).hexdigest() != header.get("payload_sha256"):
        raise CheckpointError(f"{path}: payload checksum mismatch")
    if expected_config_hash is not None and header["config_hash"] != expected_config_hash:
        raise CheckpointError(
            f"{path}: config hash {header['config_hash']} does not match the requested run ({expected_config_hash}); "
            "refusing to resume under a different configuration"
        )
    if expected_tokenizer_hash is not None and header["tokenizer_hash"] != expected_tokenizer_hash:
        raise CheckpointError(f"{path}: tokenizer hash {header['tokenizer_hash']} != {expected_tokenizer_hash}")
    arrays, pos = [], 0
    for _, shape in shapes:
        n = int(np.prod(shape)) * 8
        arrays.append(np.frombuffer(payload[pos : pos + n], dtype="<f8").reshape(shape).astype(np.float64))
        pos += n
    if pos != len(payload):
        raise CheckpointError(f"{path}: payload size does not match header shapes")
    return TrainState(
        params=ModelParams(*arrays),
        step=header["step"],
        stage=header["stage"],
        config_hash=header["config_hash"],
        rng_state=header["rng_state"],
        tokenizer_hash=header["tokenizer_hash"],
        counters=header["counters"],
        records=header["records"],
    )
