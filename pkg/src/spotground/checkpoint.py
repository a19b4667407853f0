"""Model checkpoint container and its on-disk format.

One self-describing binary file: an 8-byte magic, a little-endian uint32
header length, a JSON header (version, head kind, config, vocabulary,
tensor manifest, optimizer step), then the raw little-endian tensor
bytes. Round-trips are bit-exact, which also makes trained checkpoints
byte-comparable across reruns of the same seed.
"""

from __future__ import annotations

import json
import struct
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .errors import FormatError, UnsupportedLayoutError
from .nn import AdamState, EncoderConfig

MAGIC = b"SGMODEL\x00"
FORMAT_VERSION = 1

KIND_SPOT_TRANSFORMER = "spot_transformer"
KIND_SPOT_NETVLAD = "spot_netvlad"
KIND_GROUNDING = "grounding"

_DTYPES = {"<f8": np.dtype("<f8"), "<f4": np.dtype("<f4")}


@dataclass
class Model:
    """A trained head: weights plus everything needed to run or resume it."""

    kind: str
    config: object  # EncoderConfig or spotting.NetVLADConfig
    vocab: list[str]
    params: dict[str, np.ndarray]
    opt: AdamState | None = None
    history: list[dict] = field(default_factory=list)  # not serialized


def _config_to_dict(config) -> dict:
    d = config.to_dict()
    d["kind"] = type(config).__name__
    return d


def _config_from_dict(d: dict):
    d = dict(d)
    kind = d.pop("kind")
    if kind == "EncoderConfig":
        return EncoderConfig.from_dict(d)
    if kind == "NetVLADConfig":
        from .spotting import NetVLADConfig

        return NetVLADConfig(**d)
    raise FormatError(f"unknown config kind {kind!r}")


def save_model(path: str | Path, model: Model) -> None:
    tensors: dict[str, np.ndarray] = {}
    for name, arr in model.params.items():
        tensors["param:" + name] = arr
    opt_step = None
    if model.opt is not None:
        opt_step = model.opt.step
        for name, arr in model.opt.m.items():
            tensors["adam_m:" + name] = arr
        for name, arr in model.opt.v.items():
            tensors["adam_v:" + name] = arr

    manifest = []
    offset = 0
    ordered = sorted(tensors)
    blobs = []
    for name in ordered:
        arr = np.ascontiguousarray(tensors[name])
        if arr.dtype == np.float64:
            dtype = "<f8"
        elif arr.dtype == np.float32:
            dtype = "<f4"
        else:
            raise UnsupportedLayoutError(f"tensor {name} has unsupported dtype {arr.dtype}")
        blob = arr.astype(dtype, copy=False).tobytes(order="C")
        manifest.append(
            {"name": name, "shape": list(arr.shape), "dtype": dtype, "offset": offset,
             "nbytes": len(blob)}
        )
        blobs.append(blob)
        offset += len(blob)

    header = {
        "version": FORMAT_VERSION,
        "model_kind": model.kind,
        "config": _config_to_dict(model.config),
        "vocab": list(model.vocab),
        "opt_step": opt_step,
        "tensors": manifest,
    }
    header_bytes = json.dumps(header, sort_keys=True, separators=(",", ":")).encode("utf-8")
    with open(path, "wb") as fh:
        fh.write(MAGIC)
        fh.write(struct.pack("<I", len(header_bytes)))
        fh.write(header_bytes)
        for blob in blobs:
            fh.write(blob)


def load_model(path: str | Path) -> Model:
    raw = Path(path).read_bytes()
    if raw[: len(MAGIC)] != MAGIC:
        raise FormatError(f"{path} is not a model checkpoint (bad magic)")
    (header_len,) = struct.unpack("<I", raw[len(MAGIC) : len(MAGIC) + 4])
    header_start = len(MAGIC) + 4
    header = json.loads(raw[header_start : header_start + header_len].decode("utf-8"))
    if header.get("version") != FORMAT_VERSION:
        raise FormatError(f"unsupported checkpoint version {header.get('version')}")
    data_start = header_start + header_len

    tensors: dict[str, np.ndarray] = {}
    for entry in header["tensors"]:
        dtype = _DTYPES[entry["dtype"]]
        start = data_start + entry["offset"]
        blob = raw[start : start + entry["nbytes"]]
        if len(blob) != entry["nbytes"]:
            raise FormatError(f"checkpoint truncated at tensor {entry['name']}")
        arr = np.frombuffer(blob, dtype=dtype).reshape(entry["shape"]).copy()
        tensors[entry["name"]] = arr

    params = {n[len("param:") :]: a for n, a in tensors.items() if n.startswith("param:")}
    opt = None
    if header["opt_step"] is not None:
        opt = AdamState(
            m={n[len("adam_m:") :]: a for n, a in tensors.items() if n.startswith("adam_m:")},
            v={n[len("adam_v:") :]: a for n, a in tensors.items() if n.startswith("adam_v:")},
            step=header["opt_step"],
        )
    return Model(
        kind=header["model_kind"],
        config=_config_from_dict(header["config"]),
        vocab=list(header["vocab"]),
        params=params,
        opt=opt,
    )
