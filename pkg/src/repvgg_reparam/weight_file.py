"""
Binary weight container.

Layout:
    magic      4 bytes  b"RVGG"
    version    uint32 little-endian
    header_len uint32 little-endian
    header     UTF-8 JSON (sorted keys, 2-space indent): dtype, format, mode,
               spec, tensors [{name, shape, offset, length}]
    payload    little-endian scalars; every tensor starts at a multiple of 64
               bytes from the payload start, gaps are zero-filled
"""

import json
import logging
import math
import struct
from pathlib import Path

import numpy as np

from repvgg_reparam.arch import MODES, Model, ModelSpec, model_from_state, model_state
from repvgg_reparam.common import (
    PAYLOAD_ALIGNMENT,
    SUPPORTED_DTYPES,
    WEIGHT_FILE_MAGIC,
    WEIGHT_FILE_VERSION,
    RepVggError,
    WeightFileError,
)

FORMAT_NAME = "rvgg"
PREAMBLE = struct.Struct("<4sII")


def _align(offset: int) -> int:
    return -(-offset // PAYLOAD_ALIGNMENT) * PAYLOAD_ALIGNMENT


def serialize(model: Model) -> bytes:
    """Encode a model; the output is a pure function of the model's contents."""
    dtype = np.dtype(model.dtype).newbyteorder("<")
    tensors = []
    chunks = []
    offset = 0
    for name, array in model_state(model).items():
        data = np.ascontiguousarray(array, dtype=dtype).tobytes()
        start = _align(offset)
        if start > offset:
            chunks.append(b"\x00" * (start - offset))
        chunks.append(data)
        tensors.append(
            {"name": name, "shape": list(array.shape), "offset": start, "length": len(data)}
        )
        offset = start + len(data)
    meta = {
        "dtype": model.dtype.name,
        "format": FORMAT_NAME,
        "mode": model.mode,
        "spec": model.spec.to_dict(),
        "tensors": tensors,
    }
    header = json.dumps(meta, sort_keys=True, indent=2).encode("utf-8")
    preamble = PREAMBLE.pack(WEIGHT_FILE_MAGIC, WEIGHT_FILE_VERSION, len(header))
    return preamble + header + b"".join(chunks)


def _parse_header(data: bytes) -> tuple[dict, memoryview]:
    if len(data) < PREAMBLE.size:
        raise WeightFileError(
            f"file is {len(data)} bytes, shorter than the {PREAMBLE.size}-byte preamble",
            field="preamble",
        )
    magic, version, header_len = PREAMBLE.unpack_from(data)
    if magic != WEIGHT_FILE_MAGIC:
        raise WeightFileError(f"expected {WEIGHT_FILE_MAGIC!r}, found {magic!r}", field="magic")
    if version != WEIGHT_FILE_VERSION:
        raise WeightFileError(
            f"unsupported version {version}, this reader handles {WEIGHT_FILE_VERSION}",
            field="version",
        )
    end = PREAMBLE.size + header_len
    if end > len(data):
        raise WeightFileError(
            f"header of {header_len} bytes runs past the end of a {len(data)}-byte file",
            field="header_length",
        )
    try:
        meta = json.loads(bytes(data[PREAMBLE.size : end]).decode("utf-8"))
    except (UnicodeDecodeError, json.JSONDecodeError) as e:
        raise WeightFileError(f"not valid UTF-8 JSON: {e}", field="header") from e
    if not isinstance(meta, dict):
        raise WeightFileError("header must be a JSON object", field="header")
    missing = [k for k in ("dtype", "format", "mode", "spec", "tensors") if k not in meta]
    if missing:
        raise WeightFileError(f"missing keys {', '.join(missing)}", field="header")
    return meta, memoryview(data)[end:]


def _check_manifest(entries, payload_size: int, itemsize: int) -> list[dict]:
    if not isinstance(entries, list):
        raise WeightFileError("must be a list", field="tensors")
    seen = set()
    for i, entry in enumerate(entries):
        where = f"tensors[{i}]"
        if not isinstance(entry, dict):
            raise WeightFileError("entry must be an object", field=where)
        name = entry.get("name")
        shape = entry.get("shape")
        offset = entry.get("offset")
        length = entry.get("length")
        if not isinstance(name, str) or name in seen:
            raise WeightFileError(f"missing or duplicate name {name!r}", field=f"{where}.name")
        seen.add(name)
        if not isinstance(shape, list) or not all(
            isinstance(d, int) and not isinstance(d, bool) and d >= 0 for d in shape
        ):
            raise WeightFileError(f"bad shape {shape!r}", field=f"{where}.shape")
        for key, value in (("offset", offset), ("length", length)):
            if not isinstance(value, int) or isinstance(value, bool) or value < 0:
                raise WeightFileError(f"bad {key} {value!r}", field=f"{where}.{key}")
        if length != math.prod(shape) * itemsize:
            raise WeightFileError(
                f"{length} bytes does not match shape {shape} of {itemsize}-byte scalars",
                field=f"{where}.length",
            )
        if offset + length > payload_size:
            raise WeightFileError(
                f"bytes [{offset}, {offset + length}) out of bounds of a "
                f"{payload_size}-byte payload",
                field=f"{where}.offset",
            )
        if offset % PAYLOAD_ALIGNMENT:
            raise WeightFileError(
                f"offset {offset} is not {PAYLOAD_ALIGNMENT}-byte aligned",
                field=f"{where}.offset",
            )

    end = 0
    for i, entry in sorted(enumerate(entries), key=lambda item: item[1]["offset"]):
        if entry["offset"] < end:
            raise WeightFileError(
                f"bytes starting at {entry['offset']} overlap the previous tensor ending at {end}",
                field=f"tensors[{i}].offset",
            )
        end = entry["offset"] + entry["length"]
    if end != payload_size:
        raise WeightFileError(
            f"payload is {payload_size} bytes but the manifest ends at {end}",
            field="payload",
        )
    return entries


def deserialize(data: bytes) -> Model:
    """
    Decode a model; every structural problem raises WeightFileError naming the
    offending field and no partial model is returned.
    """
    meta, payload = _parse_header(data)
    if meta["format"] != FORMAT_NAME:
        raise WeightFileError(f"unknown format {meta['format']!r}", field="format")
    if meta["dtype"] not in SUPPORTED_DTYPES:
        raise WeightFileError(f"unsupported dtype {meta['dtype']!r}", field="dtype")
    if meta["mode"] not in MODES:
        raise WeightFileError(f"unknown mode {meta['mode']!r}", field="mode")
    try:
        spec = ModelSpec.from_dict(meta["spec"])
    except (RepVggError, AttributeError) as e:
        raise WeightFileError(str(e), field="spec") from e

    dtype = np.dtype(meta["dtype"]).newbyteorder("<")
    entries = _check_manifest(meta["tensors"], len(payload), dtype.itemsize)
    state = {}
    for entry in entries:
        array = np.frombuffer(
            payload,
            dtype=dtype,
            count=entry["length"] // dtype.itemsize,
            offset=entry["offset"],
        )
        state[entry["name"]] = array.reshape(entry["shape"]).astype(meta["dtype"])
    try:
        return model_from_state(spec, meta["mode"], state)
    except RepVggError as e:
        raise WeightFileError(str(e), field="tensors") from e


def save(model: Model, path) -> int:
    """Write `model` to `path`; returns the number of bytes written."""
    data = serialize(model)
    Path(path).write_bytes(data)
    logging.info(f"Saved {model.mode}-mode {model.spec.name} to {path} ({len(data):,} bytes)")
    return len(data)


def load(path) -> Model:
    try:
        data = Path(path).read_bytes()
    except OSError as e:
        raise WeightFileError(f"cannot read {path}: {e}", field="path") from e
    model = deserialize(data)
    logging.info(f"Loaded {model.mode}-mode {model.spec.name} from {path}")
    return model
