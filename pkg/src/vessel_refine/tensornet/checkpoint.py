"""Binary checkpoints.

Layout (little endian)::

    b"LPRF" | u32 version | u32 descriptor length | descriptor (UTF-8 JSON)
    | parameters of every network as f32, in declaration order
    | for each saved optimizer: b"ADAM" | m then v as f32, in parameter order

The descriptor records each network's constructor config, its layer list
and parameter shapes, optimizer hyperparameters and step counts, plus a
free-form ``meta`` object.
"""
import hashlib
import json
import struct
from dataclasses import dataclass, field
from typing import Any, BinaryIO, Dict, List, Tuple

import numpy as np

from ..errors import DataError
from .layers import Module
from .networks import build_network
from .optim import AdamState

MAGIC = b"LPRF"
ADAM_TAG = b"ADAM"
FORMAT_VERSION = 1
HEADER_SIZE = 12
_F32 = np.dtype("<f4")


@dataclass
class Checkpoint:
    networks: Dict[str, Module]
    optimizers: Dict[str, AdamState] = field(default_factory=dict)
    meta: Dict[str, Any] = field(default_factory=dict)


def _descriptor(ckpt: Checkpoint) -> bytes:
    doc = {
        "networks": [
            {
                "name": name,
                "config": net.config(),
                "layers": [s.to_dict() for s in net.specs()],
                "params": [list(p.shape) for p in net.parameters()],
            }
            for name, net in ckpt.networks.items()
        ],
        "optimizers": [
            {"name": name, "lr": st.lr, "beta1": st.beta1, "beta2": st.beta2, "eps": st.eps, "t": st.t}
            for name, st in ckpt.optimizers.items()
        ],
        "meta": ckpt.meta,
    }
    return json.dumps(doc, sort_keys=True, separators=(",", ":")).encode("utf-8")


def _write_arrays(fh: BinaryIO, arrays: List[np.ndarray]) -> None:
    for arr in arrays:
        fh.write(np.ascontiguousarray(arr, dtype=_F32).tobytes())


def save_checkpoint(path: str, ckpt: Checkpoint) -> None:
    desc = _descriptor(ckpt)
    with open(path, "wb") as fh:
        fh.write(MAGIC)
        fh.write(struct.pack("<II", FORMAT_VERSION, len(desc)))
        fh.write(desc)
        for net in ckpt.networks.values():
            _write_arrays(fh, [p.data for p in net.parameters()])
        for name, state in ckpt.optimizers.items():
            if name not in ckpt.networks:
                raise DataError(f"optimizer state '{name}' has no matching network")
            fh.write(ADAM_TAG)
            if state.m:
                _write_arrays(fh, list(state.m) + list(state.v))
            else:
                zeros = [np.zeros(p.shape) for p in ckpt.networks[name].parameters()]
                _write_arrays(fh, zeros + zeros)


def _read_array(buf: memoryview, offset: int, shape: List[int]) -> Tuple[np.ndarray, int]:
    count = int(np.prod(shape)) if shape else 1
    end = offset + count * _F32.itemsize
    if end > len(buf):
        raise DataError("checkpoint truncated")
    return np.frombuffer(buf[offset:end], dtype=_F32).reshape(shape), end


def load_checkpoint(path: str) -> Checkpoint:
    try:
        with open(path, "rb") as fh:
            raw = fh.read()
    except OSError as e:
        raise DataError(f"{path}: cannot read checkpoint ({e})") from e
    if raw[:4] != MAGIC:
        raise DataError(f"{path}: not a checkpoint (bad magic)")
    if len(raw) < HEADER_SIZE:
        raise DataError(f"{path}: checkpoint header truncated ({len(raw)} bytes)")
    version, desc_len = struct.unpack_from("<II", raw, 4)
    if version != FORMAT_VERSION:
        raise DataError(f"{path}: unsupported checkpoint version {version}")
    offset = HEADER_SIZE + desc_len
    if offset > len(raw):
        raise DataError(f"{path}: checkpoint descriptor truncated")
    try:
        doc = json.loads(raw[HEADER_SIZE:offset].decode("utf-8"))
    except ValueError as e:
        raise DataError(f"{path}: corrupt checkpoint descriptor ({e})") from e
    if not isinstance(doc, dict) or not {"networks", "optimizers"} <= doc.keys():
        raise DataError(f"{path}: checkpoint descriptor lacks networks or optimizers")
    try:
        networks, optimizers, offset = _read_body(path, doc, raw, offset)
    except (KeyError, TypeError) as e:
        raise DataError(f"{path}: malformed checkpoint descriptor entry ({e!r})") from e
    if offset != len(raw):
        raise DataError(f"{path}: {len(raw) - offset} trailing bytes")
    return Checkpoint(networks=networks, optimizers=optimizers, meta=doc.get("meta", {}))


def _read_body(
    path: str, doc: Dict[str, Any], raw: bytes, offset: int
) -> Tuple[Dict[str, Module], Dict[str, AdamState], int]:
    buf = memoryview(raw)
    networks: Dict[str, Module] = {}
    for entry in doc["networks"]:
        net = build_network(entry["config"])
        params = net.parameters()
        if [list(p.shape) for p in params] != entry["params"]:
            raise DataError(f"{path}: parameter shapes of '{entry['name']}' do not match its config")
        for p in params:
            arr, offset = _read_array(buf, offset, list(p.shape))
            p.data[...] = arr
        networks[entry["name"]] = net

    optimizers: Dict[str, AdamState] = {}
    for entry in doc["optimizers"]:
        if raw[offset : offset + 4] != ADAM_TAG:
            raise DataError(f"{path}: missing optimizer section for '{entry['name']}'")
        offset += 4
        shapes = [list(p.shape) for p in networks[entry["name"]].parameters()]
        moments = []
        for shape in shapes + shapes:
            arr, offset = _read_array(buf, offset, shape)
            moments.append(arr.astype(networks[entry["name"]].parameters()[0].dtype))
        optimizers[entry["name"]] = AdamState(
            lr=entry["lr"], beta1=entry["beta1"], beta2=entry["beta2"], eps=entry["eps"], t=entry["t"],
            m=moments[: len(shapes)], v=moments[len(shapes):],
        )
    return networks, optimizers, offset


def file_sha256(path: str) -> str:
    digest = hashlib.sha256()
    with open(path, "rb") as fh:
        for chunk in iter(lambda: fh.read(1 << 20), b""):
            digest.update(chunk)
    return digest.hexdigest()
