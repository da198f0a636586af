import json
import struct

import numpy as np
import pytest

from portpatch import (
    Checkpoint,
    LoraPatch,
    delta_weight,
    read_adapter,
    read_container,
    write_adapter,
    write_container,
)
from portpatch.container import serialize_container
from portpatch.errors import AdapterFormatError, ParseError

from conftest import random_checkpoint, random_patch


def craft(header: dict, payload: bytes) -> bytes:
    encoded = json.dumps(header, sort_keys=True, separators=(",", ":")).encode("utf-8")
    return struct.pack("<Q", len(encoded)) + encoded + payload


class TestContainerLayout:
    def test_empty_checkpoint_bytes(self):
        blob = serialize_container(Checkpoint(tensors={}, metadata={}))
        assert blob == struct.pack("<Q", 2) + b"{}"

    def test_f32_payload_length(self):
        ck = Checkpoint(tensors={"w": np.ones((2, 2), dtype=np.float32)}, metadata={})
        blob = serialize_container(ck)
        (header_len,) = struct.unpack("<Q", blob[:8])
        assert len(blob) - 8 - header_len == 16

    def test_offsets_ascending_and_covering(self):
        ck = random_checkpoint(1, {"b": (3, 4), "a": (2, 2), "c": (5,)})
        blob = serialize_container(ck)
        (header_len,) = struct.unpack("<Q", blob[:8])
        header = json.loads(blob[8 : 8 + header_len])
        cursor = 0
        for name in sorted(n for n in header if n != "__metadata__"):
            begin, end = header[name]["data_offsets"]
            assert begin == cursor
            cursor = end
        assert cursor == len(blob) - 8 - header_len


class TestRoundTrips:
    @pytest.mark.parametrize("dtype", [np.float32, np.float64])
    def test_write_read_identity(self, tmp_file, dtype):
        ck = random_checkpoint(7, {"layers.0.w": (4, 6), "bias": (6,)}, dtype=dtype)
        path = tmp_file("c.safetensors")
        write_container(path, ck)
        assert read_container(path) == ck

    def test_write_read_write_byte_identical(self, tmp_file):
        ck = random_checkpoint(8, {"x": (5, 5), "y": (3,)}, version="v1")
        first = tmp_file("first.safetensors")
        second = tmp_file("second.safetensors")
        write_container(first, ck)
        write_container(second, read_container(first))
        assert open(first, "rb").read() == open(second, "rb").read()

    def test_metadata_only_file(self, tmp_file):
        path = tmp_file("meta.safetensors")
        write_container(path, Checkpoint(tensors={}, metadata={"model_version": "m"}))
        back = read_container(path)
        assert back.tensors == {} and back.metadata == {"model_version": "m"}


class TestParseErrors:
    def test_truncated_header_length(self, tmp_file):
        path = tmp_file("bad.safetensors")
        open(path, "wb").write(b"\x01\x02")
        with pytest.raises(ParseError, match="truncated"):
            read_container(path)

    def test_header_past_eof(self, tmp_file):
        path = tmp_file("bad.safetensors")
        open(path, "wb").write(struct.pack("<Q", 1000) + b"{}")
        with pytest.raises(ParseError, match="truncated"):
            read_container(path)

    def test_malformed_json(self, tmp_file):
        path = tmp_file("bad.safetensors")
        open(path, "wb").write(struct.pack("<Q", 3) + b"{,}")
        with pytest.raises(ParseError, match="malformed JSON"):
            read_container(path)

    def test_offsets_past_eof(self, tmp_file):
        header = {"w": {"dtype": "F64", "shape": [2, 2], "data_offsets": [0, 32]}}
        path = tmp_file("bad.safetensors")
        open(path, "wb").write(craft(header, b"\x00" * 8))
        with pytest.raises(ParseError, match="data_offsets out of range"):
            read_container(path)

    def test_overlapping_offsets(self, tmp_file):
        header = {
            "a": {"dtype": "F64", "shape": [1, 2], "data_offsets": [0, 16]},
            "b": {"dtype": "F64", "shape": [1, 2], "data_offsets": [8, 24]},
        }
        path = tmp_file("bad.safetensors")
        open(path, "wb").write(craft(header, b"\x00" * 24))
        with pytest.raises(ParseError, match="overlap"):
            read_container(path)

    def test_unknown_dtype(self, tmp_file):
        header = {"w": {"dtype": "BF16", "shape": [2], "data_offsets": [0, 4]}}
        path = tmp_file("bad.safetensors")
        open(path, "wb").write(craft(header, b"\x00" * 4))
        with pytest.raises(ParseError, match="'w': unknown dtype"):
            read_container(path)

    def test_span_size_mismatch(self, tmp_file):
        header = {"w": {"dtype": "F64", "shape": [2, 2], "data_offsets": [0, 16]}}
        path = tmp_file("bad.safetensors")
        open(path, "wb").write(craft(header, b"\x00" * 16))
        with pytest.raises(ParseError, match="expected 32"):
            read_container(path)

    def test_trailing_payload(self, tmp_file):
        header = {"w": {"dtype": "F64", "shape": [1], "data_offsets": [0, 8]}}
        path = tmp_file("bad.safetensors")
        open(path, "wb").write(craft(header, b"\x00" * 16))
        with pytest.raises(ParseError, match="trailing bytes"):
            read_container(path)

    def test_reserved_tensor_name_rejected(self):
        with pytest.raises(ParseError, match="invalid tensor name"):
            Checkpoint(tensors={"__metadata__": np.ones((2, 2))}, metadata={})


class TestAdapters:
    def test_single_module_round_trip(self, tmp_file):
        patch = random_patch({"layers.0.attn.q": (64, 64)}, rank=8, alpha=16.0, seed=3)
        path = tmp_file("adapter.safetensors")
        write_adapter(path, patch)
        back = read_adapter(path)
        assert back.rank == 8 and back.alpha == 16.0
        assert back.module_names() == ["layers.0.attn.q"]
        assert np.array_equal(back.modules["layers.0.attn.q"].a, patch.modules["layers.0.attn.q"].a)

    def test_delta_bitwise_stable_after_round_trip(self, tmp_file):
        patch = random_patch({"m1": (32, 48), "m2": (16, 16)}, rank=4, alpha=6.0, seed=4)
        path = tmp_file("adapter.safetensors")
        write_adapter(path, patch)
        back = read_adapter(path)
        for module in patch.module_names():
            before = delta_weight(patch, module)
            after = delta_weight(back, module)
            assert before.tobytes() == after.tobytes()

    def test_empty_patch_round_trip(self, tmp_file):
        patch = LoraPatch(modules={}, rank=2, alpha=2.0)
        path = tmp_file("adapter.safetensors")
        write_adapter(path, patch)
        back = read_adapter(path)
        assert back.modules == {} and back.rank == 2

    def test_two_modules_lexicographic_order(self, tmp_file):
        patch = random_patch({"zeta": (8, 8), "alpha": (8, 8)}, rank=2, alpha=2.0, seed=5)
        path = tmp_file("adapter.safetensors")
        write_adapter(path, patch)
        names = read_container(path).names()
        assert names == [
            "alpha.lora_A.weight",
            "alpha.lora_B.weight",
            "zeta.lora_A.weight",
            "zeta.lora_B.weight",
        ]

    def test_orphan_factor_rejected(self, tmp_file):
        ck = Checkpoint(
            tensors={"m.lora_A.weight": np.ones((2, 4))},
            metadata={"rank": "2"},
        )
        path = tmp_file("adapter.safetensors")
        write_container(path, ck)
        with pytest.raises(AdapterFormatError, match="unpaired"):
            read_adapter(path)

    def test_rank_mismatch_between_factors(self, tmp_file):
        ck = Checkpoint(
            tensors={
                "m.lora_A.weight": np.ones((8, 64)),
                "m.lora_B.weight": np.ones((64, 4)),
            },
            metadata={"rank": "8"},
        )
        path = tmp_file("adapter.safetensors")
        write_container(path, ck)
        with pytest.raises(AdapterFormatError, match="rank"):
            read_adapter(path)

    def test_alpha_over_rank_scaling(self, tmp_file):
        ck = Checkpoint(
            tensors={
                "m.lora_A.weight": np.ones((64, 128)),
                "m.lora_B.weight": np.ones((128, 64)),
            },
            metadata={"rank": "64", "alpha": "128"},
        )
        path = tmp_file("adapter.safetensors")
        write_container(path, ck)
        patch = read_adapter(path)
        assert patch.scaling == 2.0

    def test_alpha_defaults_to_rank(self, tmp_file):
        ck = Checkpoint(
            tensors={
                "m.lora_A.weight": np.ones((4, 8)),
                "m.lora_B.weight": np.ones((8, 4)),
            },
            metadata={"rank": "4"},
        )
        path = tmp_file("adapter.safetensors")
        write_container(path, ck)
        patch = read_adapter(path)
        assert patch.alpha == 4.0 and patch.scaling == 1.0

    def test_stray_tensor_rejected(self, tmp_file):
        ck = Checkpoint(tensors={"weights": np.ones((2, 2))}, metadata={"rank": "1"})
        path = tmp_file("adapter.safetensors")
        write_container(path, ck)
        with pytest.raises(AdapterFormatError, match="not a lora_A/lora_B"):
            read_adapter(path)

    def test_extra_metadata_preserved(self, tmp_file):
        patch = random_patch({"m": (8, 8)}, rank=2, alpha=2.0, seed=6, version="base-v3")
        path = tmp_file("adapter.safetensors")
        write_adapter(path, patch)
        assert read_adapter(path).metadata == {"model_version": "base-v3"}
