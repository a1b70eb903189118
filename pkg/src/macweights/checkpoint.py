"""Checkpoint and token-stream file I/O.

Weight files use the safetensors container layout: an 8-byte little-endian
header length, a UTF-8 JSON header mapping tensor name -> {dtype, shape,
data_offsets}, then the raw little-endian tensor data. Serialization is
canonical (names sorted, offsets packed back to back), so save -> load ->
save is byte-stable.

External tensor names are translated to internal names through a versioned
schema table (schemas/v1.json), one entry per supported model family.
"""

from __future__ import annotations

import json
import re
from importlib import resources
from pathlib import Path

import numpy as np

from .errors import (
    HeaderParseError,
    InputError,
    MissingTensorError,
    OverlappingOffsetsError,
    ShapeMismatchError,
    UnknownDtypeError,
)
from .model import ModelConfig, ParameterStore, param_shapes

_ST_DTYPES = {"F32": np.float32, "F64": np.float64, "F16": np.float16}
_ST_NAMES = {np.dtype(np.float32): "F32", np.dtype(np.float64): "F64"}

TOKEN_MAGIC = b"MWTOKST1"


# ---------------------------------------------------------------------------
# safetensors-layout container
# ---------------------------------------------------------------------------


def read_weight_file(path) -> dict[str, np.ndarray]:
    blob = Path(path).read_bytes()
    if len(blob) < 8:
        raise HeaderParseError(f"{path}: file shorter than the 8-byte header length")
    header_len = int.from_bytes(blob[:8], "little")
    if 8 + header_len > len(blob):
        raise HeaderParseError(f"{path}: truncated header ({header_len} bytes declared)")
    try:
        header = json.loads(blob[8 : 8 + header_len].decode("utf-8"))
    except (UnicodeDecodeError, json.JSONDecodeError) as e:
        raise HeaderParseError(f"{path}: header is not valid JSON ({e})")
    data = blob[8 + header_len :]
    spans = []
    tensors = {}
    for name, meta in header.items():
        if name == "__metadata__":
            continue
        dt = meta.get("dtype")
        if dt == "BF16":
            itemsize = 2
        elif dt in _ST_DTYPES:
            itemsize = np.dtype(_ST_DTYPES[dt]).itemsize
        else:
            raise UnknownDtypeError(f"tensor {name!r}: unsupported dtype {dt!r}")
        begin, end = meta["data_offsets"]
        shape = tuple(int(s) for s in meta["shape"])
        if begin < 0 or end > len(data) or begin > end:
            raise OverlappingOffsetsError(f"tensor {name!r}: offsets [{begin}, {end}) exceed the file")
        count = int(np.prod(shape)) if shape else 1
        if count * itemsize != end - begin:
            raise ShapeMismatchError(
                f"tensor {name!r}: shape {shape} needs {count * itemsize} bytes, span has {end - begin}"
            )
        spans.append((begin, end, name))
        raw = data[begin:end]
        if dt == "BF16":
            bits = np.frombuffer(raw, dtype="<u2").astype(np.uint32) << 16
            arr = bits.view(np.float32).reshape(shape)  # exact bit-extension
        elif dt == "F16":
            arr = np.frombuffer(raw, dtype="<f2").astype(np.float32).reshape(shape)
        else:
            arr = np.frombuffer(raw, dtype=np.dtype(_ST_DTYPES[dt]).newbyteorder("<")).reshape(shape)
        arr = np.ascontiguousarray(arr)
        if not arr.flags.writeable:  # frombuffer views are read-only
            arr = arr.copy()
        tensors[name] = arr
    spans.sort()
    for (b1, e1, n1), (b2, e2, n2) in zip(spans, spans[1:]):
        if b2 < e1:
            raise OverlappingOffsetsError(f"tensors {n1!r} and {n2!r} have overlapping byte ranges")
    return tensors


def weight_file_bytes(tensors: dict[str, np.ndarray]) -> bytes:
    header = {}
    payload = bytearray()
    for name in sorted(tensors):
        arr = np.ascontiguousarray(tensors[name])
        dt = _ST_NAMES.get(arr.dtype)
        if dt is None:
            raise UnknownDtypeError(f"cannot serialize dtype {arr.dtype} of tensor {name!r}")
        begin = len(payload)
        payload += arr.astype(arr.dtype.newbyteorder("<")).tobytes()
        header[name] = {"dtype": dt, "shape": list(arr.shape), "data_offsets": [begin, len(payload)]}
    hjson = json.dumps(header, sort_keys=True, separators=(",", ":")).encode("utf-8")
    return len(hjson).to_bytes(8, "little") + hjson + bytes(payload)


def write_weight_file(path, tensors: dict[str, np.ndarray]):
    Path(path).write_bytes(weight_file_bytes(tensors))


# ---------------------------------------------------------------------------
# schema table
# ---------------------------------------------------------------------------


def _load_schema_table() -> dict:
    with resources.files("macweights.schemas").joinpath("v1.json").open("r") as fh:
        return json.load(fh)


def _file_name_for(internal: str, family_entry: dict) -> tuple[str, bool]:
    """Render the on-disk tensor name for an internal name; returns (name, transpose)."""
    if family_entry.get("identity"):
        return internal, False
    generic = re.sub(r"layers\.(\d+)", "layers.{l}", internal)
    generic = re.sub(r"experts\.(\d+)", "experts.{e}", generic)
    entry = family_entry["map"].get(generic)
    if entry is None:
        raise MissingTensorError(f"schema has no mapping for internal tensor {internal!r}")
    m = re.search(r"layers\.(\d+)", internal)
    l = int(m.group(1)) if m else None
    m = re.search(r"experts\.(\d+)", internal)
    e = int(m.group(1)) if m else None
    name = entry["file"]
    if l is not None:
        name = name.replace("{l0}", str(l - 1)).replace("{l}", str(l))
    if e is not None:
        name = name.replace("{e}", str(e))
    return name, bool(entry.get("transpose", False))


# ---------------------------------------------------------------------------
# checkpoint bundle
# ---------------------------------------------------------------------------


def save_checkpoint(directory, config: ModelConfig, params: ParameterStore, family: str = "toy"):
    """Write config.json + model.st into `directory` (created if needed)."""
    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    table = _load_schema_table()
    entry = table["families"][family]
    tensors = {}
    for internal in params.names():
        fname, transp = _file_name_for(internal, entry)
        arr = params[internal]
        tensors[fname] = arr.T.copy() if transp else arr
    cfg = config.to_dict()
    cfg["schema_version"] = table["version"]
    cfg["family"] = family
    cfg["weights"] = "model.st"
    (directory / "config.json").write_text(json.dumps(cfg, sort_keys=True, indent=2) + "\n")
    write_weight_file(directory / "model.st", tensors)


def load_checkpoint(path) -> tuple[ModelConfig, ParameterStore]:
    """Load a checkpoint directory (or its config.json path)."""
    path = Path(path)
    cfg_path = path / "config.json" if path.is_dir() else path
    if not cfg_path.exists():
        raise InputError(f"no config.json at {cfg_path}")
    cfg = json.loads(cfg_path.read_text())
    family = cfg.get("family", "toy")
    table = _load_schema_table()
    if family not in table["families"]:
        raise InputError(f"unknown model family {family!r}")
    config = ModelConfig.from_dict(cfg)
    raw = read_weight_file(cfg_path.parent / cfg.get("weights", "model.st"))
    dtype = "f64" if any(a.dtype == np.float64 for a in raw.values()) else "f32"
    entry = table["families"][family]
    expected = param_shapes(config)
    arrays = {}
    for internal, shape in expected.items():
        fname, transp = _file_name_for(internal, entry)
        if fname not in raw:
            raise MissingTensorError(f"checkpoint is missing tensor {fname!r} (for {internal!r})")
        arr = raw[fname]
        if transp:
            arr = arr.T
        if arr.shape != shape:
            raise ShapeMismatchError(
                f"tensor {internal!r}: config expects shape {shape}, file has {arr.shape}"
            )
        arrays[internal] = np.ascontiguousarray(arr)
    return config, ParameterStore(arrays, dtype)


# ---------------------------------------------------------------------------
# token streams
# ---------------------------------------------------------------------------


def load_token_stream(path, vocab_size: int) -> np.ndarray:
    """Token ids as uint32, validated against the vocab; JSONL or binary."""
    path = Path(path)
    blob = path.read_bytes()
    if blob[:8] == TOKEN_MAGIC:
        count = int.from_bytes(blob[8:16], "little")
        ids = np.frombuffer(blob[16:], dtype="<u4")
        if ids.size != count:
            raise InputError(f"{path}: header declares {count} ids, payload has {ids.size}")
    else:
        ids_list = []
        for line_no, line in enumerate(blob.decode("utf-8").splitlines(), start=1):
            if not line.strip():
                continue
            try:
                rec = json.loads(line)
                ids_list.extend(int(i) for i in rec["ids"])
            except (json.JSONDecodeError, KeyError, TypeError, ValueError) as e:
                raise InputError(f"{path}:{line_no}: bad token record ({e})")
        ids = np.asarray(ids_list, dtype=np.uint32)
    bad = np.nonzero(ids >= vocab_size)[0]
    if bad.size:
        raise InputError(
            f"{path}: token id {int(ids[bad[0]])} at position {int(bad[0])} "
            f">= vocab_size {vocab_size}"
        )
    return ids.astype(np.uint32)


def save_token_stream(path, ids, binary: bool = True):
    ids = np.asarray(ids, dtype="<u4")
    path = Path(path)
    if binary:
        path.write_bytes(TOKEN_MAGIC + int(ids.size).to_bytes(8, "little") + ids.tobytes())
    else:
        path.write_text(json.dumps({"ids": [int(i) for i in ids]}) + "\n")
