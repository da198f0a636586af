"""Single-file tensor container and the adapter naming convention.

Layout: an 8-byte little-endian unsigned header length, a UTF-8 JSON header,
then the concatenated raw little-endian row-major tensor payload. The header
maps tensor names to {"dtype", "shape", "data_offsets"} entries plus an
optional "__metadata__" string map. There is no alignment padding: the header
length is the exact byte length of the JSON text, and the payload starts
immediately after it.

Header keys are emitted with json sort_keys, so tensor entries appear in
lexicographic name order and their data offsets ascend in that same order,
covering the payload exactly. Writing the same in-memory object twice yields
byte-identical files.
"""

from __future__ import annotations

import json
import os
import struct
import tempfile
from dataclasses import dataclass, field

import numpy as np

from .errors import AdapterFormatError, ParseError
from .kernels import check_tensor

METADATA_KEY = "__metadata__"

DTYPE_TAGS = {
    np.dtype(np.float32): "F32",
    np.dtype(np.float64): "F64",
}
TAG_DTYPES = {
    "F32": np.dtype("<f4"),
    "F64": np.dtype("<f8"),
}

LORA_A_SUFFIX = ".lora_A.weight"
LORA_B_SUFFIX = ".lora_B.weight"


@dataclass
class Checkpoint:
    """Named tensor map plus string metadata, iterated in lexicographic name order.

    By convention checkpoints carry a "model_version" metadata entry; tools
    that need it warn when it is absent rather than fail.
    """

    tensors: dict[str, np.ndarray]
    metadata: dict[str, str] = field(default_factory=dict)

    def __post_init__(self):
        cleaned: dict[str, np.ndarray] = {}
        for name in sorted(self.tensors):
            if not isinstance(name, str) or not name or name == METADATA_KEY:
                raise ParseError(f"checkpoint: invalid tensor name {name!r}")
            cleaned[name] = check_tensor(self.tensors[name], name)
        self.tensors = cleaned
        for key, value in self.metadata.items():
            if not isinstance(key, str) or not isinstance(value, str):
                raise ParseError(f"checkpoint: metadata entry {key!r} is not a string pair")

    def names(self) -> list[str]:
        return list(self.tensors)

    def tensors_equal(self, other: "Checkpoint") -> bool:
        """Bitwise equality of the tensor maps, ignoring metadata."""
        if self.names() != other.names():
            return False
        for name, tensor in self.tensors.items():
            theirs = other.tensors[name]
            if tensor.dtype != theirs.dtype or tensor.shape != theirs.shape:
                return False
            if tensor.tobytes() != theirs.tobytes():
                return False
        return True

    def __eq__(self, other):
        if not isinstance(other, Checkpoint):
            return NotImplemented
        return self.metadata == other.metadata and self.tensors_equal(other)


def atomic_write_bytes(path: str, payload: bytes) -> None:
    """Write via a temp file + rename so interrupted runs never leave partial files."""
    directory = os.path.dirname(os.path.abspath(path))
    try:
        os.makedirs(directory, exist_ok=True)
        fd, tmp = tempfile.mkstemp(dir=directory, prefix=".portpatch-")
        try:
            with os.fdopen(fd, "wb") as handle:
                handle.write(payload)
            os.replace(tmp, path)
        except BaseException:
            os.unlink(tmp)
            raise
    except OSError as exc:
        raise ParseError(f"cannot write {path}: {exc}") from exc


def serialize_container(checkpoint: Checkpoint) -> bytes:
    header: dict[str, object] = {}
    if checkpoint.metadata:
        header[METADATA_KEY] = dict(sorted(checkpoint.metadata.items()))
    chunks: list[bytes] = []
    offset = 0
    for name, tensor in checkpoint.tensors.items():
        tag = DTYPE_TAGS[tensor.dtype]
        raw = np.ascontiguousarray(tensor).astype(TAG_DTYPES[tag], copy=False).tobytes()
        header[name] = {
            "dtype": tag,
            "shape": list(tensor.shape),
            "data_offsets": [offset, offset + len(raw)],
        }
        chunks.append(raw)
        offset += len(raw)
    text = json.dumps(header, sort_keys=True, separators=(",", ":"), ensure_ascii=False)
    encoded = text.encode("utf-8")
    return struct.pack("<Q", len(encoded)) + encoded + b"".join(chunks)


def write_container(path: str, checkpoint: Checkpoint) -> None:
    """Write a checkpoint atomically (temp file + rename)."""
    atomic_write_bytes(path, serialize_container(checkpoint))


def _parse_entry(name: str, entry, payload_size: int, expected_offset: int):
    if not isinstance(entry, dict):
        raise ParseError(f"tensor {name!r}: header entry is not an object")
    try:
        tag = entry["dtype"]
        shape = entry["shape"]
        offsets = entry["data_offsets"]
    except KeyError as exc:
        raise ParseError(f"tensor {name!r}: missing header field {exc.args[0]!r}") from exc
    if tag not in TAG_DTYPES:
        raise ParseError(f"tensor {name!r}: unknown dtype {tag!r}")
    if (
        not isinstance(shape, list)
        or not shape
        or len(shape) > 2
        or not all(isinstance(s, int) and s >= 1 for s in shape)
    ):
        raise ParseError(f"tensor {name!r}: invalid shape {shape!r}")
    if (
        not isinstance(offsets, list)
        or len(offsets) != 2
        or not all(isinstance(o, int) for o in offsets)
    ):
        raise ParseError(f"tensor {name!r}: invalid data_offsets {offsets!r}")
    begin, end = offsets
    if begin != expected_offset:
        raise ParseError(
            f"tensor {name!r}: data_offsets [{begin}, {end}) overlap or leave a gap "
            f"(expected begin {expected_offset})"
        )
    if end < begin or end > payload_size:
        raise ParseError(f"tensor {name!r}: data_offsets out of range [{begin}, {end})")
    dtype = TAG_DTYPES[tag]
    nbytes = dtype.itemsize * int(np.prod(shape))
    if end - begin != nbytes:
        raise ParseError(
            f"tensor {name!r}: data_offsets span {end - begin} bytes, expected {nbytes}"
        )
    return dtype, tuple(shape), begin, end


def deserialize_container(blob: bytes, source: str = "<bytes>") -> Checkpoint:
    if len(blob) < 8:
        raise ParseError(f"{source}: truncated file (missing header length)")
    (header_len,) = struct.unpack("<Q", blob[:8])
    if len(blob) < 8 + header_len:
        raise ParseError(f"{source}: truncated file (header length {header_len} past EOF)")
    try:
        header = json.loads(blob[8 : 8 + header_len].decode("utf-8"))
    except (UnicodeDecodeError, json.JSONDecodeError) as exc:
        raise ParseError(f"{source}: malformed JSON header: {exc}") from exc
    if not isinstance(header, dict):
        raise ParseError(f"{source}: header is not a JSON object")

    metadata = header.pop(METADATA_KEY, {})
    if not isinstance(metadata, dict) or not all(
        isinstance(k, str) and isinstance(v, str) for k, v in metadata.items()
    ):
        raise ParseError(f"{source}: {METADATA_KEY} is not a string map")

    payload = blob[8 + header_len :]
    tensors: dict[str, np.ndarray] = {}
    expected_offset = 0
    for name, entry in header.items():
        dtype, shape, begin, end = _parse_entry(name, entry, len(payload), expected_offset)
        data = np.frombuffer(payload[begin:end], dtype=dtype)
        tensors[name] = data.reshape(shape).astype(dtype.newbyteorder("="), copy=True)
        expected_offset = end
    if expected_offset != len(payload):
        raise ParseError(
            f"{source}: payload has {len(payload) - expected_offset} trailing bytes "
            "not covered by data_offsets"
        )
    return Checkpoint(tensors=tensors, metadata=dict(metadata))


def read_container(path: str) -> Checkpoint:
    """Read and validate a container file; full inverse of write_container."""
    try:
        with open(path, "rb") as handle:
            blob = handle.read()
    except OSError as exc:
        raise ParseError(f"cannot read container {path}: {exc}") from exc
    return deserialize_container(blob, source=path)


def adapter_to_checkpoint(patch) -> Checkpoint:
    """Lay a patch out as container tensors under the adapter naming convention."""
    tensors: dict[str, np.ndarray] = {}
    for module, factors in patch.modules.items():
        tensors[module + LORA_A_SUFFIX] = factors.a
        tensors[module + LORA_B_SUFFIX] = factors.b
    metadata = dict(patch.metadata)
    metadata["rank"] = str(patch.rank)
    metadata["alpha"] = repr(float(patch.alpha))
    metadata["target_modules"] = ",".join(patch.modules)
    return Checkpoint(tensors=tensors, metadata=metadata)


def checkpoint_to_adapter(checkpoint: Checkpoint, source: str = "<container>"):
    """Pair lora_A/lora_B tensors by module path and rebuild the patch."""
    from .patch import LoraFactors, LoraPatch

    a_parts: dict[str, np.ndarray] = {}
    b_parts: dict[str, np.ndarray] = {}
    for name, tensor in checkpoint.tensors.items():
        if name.endswith(LORA_A_SUFFIX):
            a_parts[name[: -len(LORA_A_SUFFIX)]] = tensor
        elif name.endswith(LORA_B_SUFFIX):
            b_parts[name[: -len(LORA_B_SUFFIX)]] = tensor
        else:
            raise AdapterFormatError(f"{source}: tensor {name!r} is not a lora_A/lora_B factor")
    orphans = sorted(set(a_parts) ^ set(b_parts))
    if orphans:
        raise AdapterFormatError(f"{source}: unpaired adapter modules: {', '.join(orphans)}")
    if not a_parts and "rank" not in checkpoint.metadata:
        raise AdapterFormatError(f"{source}: empty adapter without rank metadata")

    metadata = dict(checkpoint.metadata)
    rank_text = metadata.pop("rank", None)
    if rank_text is None:
        raise AdapterFormatError(f"{source}: missing 'rank' metadata")
    try:
        rank = int(rank_text)
    except ValueError as exc:
        raise AdapterFormatError(f"{source}: rank {rank_text!r} is not an integer") from exc

    alpha_text = metadata.pop("alpha", None)
    if alpha_text is None:
        alpha = float(rank)
    else:
        try:
            alpha = float(alpha_text)
        except ValueError as exc:
            raise AdapterFormatError(f"{source}: alpha {alpha_text!r} is not a number") from exc
    metadata.pop("target_modules", None)

    modules: dict[str, LoraFactors] = {}
    for module in sorted(a_parts):
        a = a_parts[module]
        b = b_parts[module]
        if a.ndim != 2 or b.ndim != 2 or a.shape[0] != rank or b.shape[1] != rank:
            raise AdapterFormatError(
                f"{source}: module {module!r} factors {b.shape} x {a.shape} "
                f"do not match metadata rank {rank}"
            )
        modules[module] = LoraFactors(a=a, b=b)
    return LoraPatch(modules=modules, rank=rank, alpha=alpha, metadata=metadata)


def write_adapter(path: str, patch) -> None:
    write_container(path, adapter_to_checkpoint(patch))


def read_adapter(path: str):
    return checkpoint_to_adapter(read_container(path), source=path)
