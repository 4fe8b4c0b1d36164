import struct

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from hypothesis.extra import numpy as hnp

from reidrecipe import persist as ps
from reidrecipe.errors import (BadMagicError, StorageError, TruncationError, ValidationError,
                               VersionMismatchError)
from reidrecipe.evalrank import EmbeddingIndex, concatenate
from reidrecipe.model import BackboneConfig, embed_array, init_model

from oracles import unit_rows

SMALL = BackboneConfig(blocks=((4, 3, 2), (6, 3, 2)), embed_dim=8, pooling="avg")


def test_checkpoint_round_trip_bits(tmp_path):
    model = init_model(SMALL, 3)
    path = tmp_path / "m.rdrc"
    ps.save_model(path, model, "triplet", 3, {"note": "x"})
    raw = path.read_bytes()
    ckpt = ps.load_checkpoint(path)
    assert ckpt.phase == "triplet" and ckpt.seed == 3 and ckpt.config["note"] == "x"
    assert ps.encode_checkpoint(ckpt) == raw
    loaded = ps.model_from_checkpoint(ckpt)
    assert loaded.config == SMALL
    for a, b in zip(model.params(), loaded.params()):
        assert a.data.tobytes() == b.data.tobytes()
    x = np.random.default_rng(0).uniform(size=(3, 20, 12)).astype(np.float32)
    np.testing.assert_array_equal(embed_array(model, x), embed_array(loaded, x))


@settings(max_examples=30, deadline=None)
@given(tensors=st.dictionaries(st.text(min_size=1, max_size=12).filter(lambda s: "=" not in s and "\n" not in s),
                               hnp.arrays(np.float32, hnp.array_shapes(min_dims=0, max_dims=3, max_side=4),
                                          elements=st.floats(width=32, allow_nan=True)),
                               max_size=4))
def test_checkpoint_codec_round_trip_any_tensors(tensors):
    ckpt = ps.Checkpoint(tensors, {"phase": "init", "seed": "1"})
    back = ps.decode_checkpoint(ps.encode_checkpoint(ckpt))
    assert list(back.tensors) == list(tensors)
    for k in tensors:
        assert back.tensors[k].shape == tensors[k].shape
        assert back.tensors[k].tobytes() == tensors[k].tobytes()
    assert back.config == ckpt.config


def test_bad_magic(tmp_path):
    data = bytearray(ps.encode_checkpoint(ps.model_checkpoint(init_model(SMALL, 0), "init", 0)))
    data[:4] = b"XXXX"
    with pytest.raises(BadMagicError, match="bad magic"):
        ps.decode_checkpoint(bytes(data))


def test_version_mismatch():
    data = bytearray(ps.encode_checkpoint(ps.model_checkpoint(init_model(SMALL, 0), "init", 0)))
    data[4:6] = struct.pack("<H", 99)
    with pytest.raises(VersionMismatchError):
        ps.decode_checkpoint(bytes(data))


def test_truncated_payload_names_tensor():
    data = ps.encode_checkpoint(ps.model_checkpoint(init_model(SMALL, 0), "init", 0))
    # 4 magic + 6 header, then the first entry's name and shape
    name = b"block0.weight"
    cut = 4 + 6 + 2 + len(name) + 1 + 16 + 10
    with pytest.raises(TruncationError, match="block0.weight"):
        ps.decode_checkpoint(data[:cut])
    for n in (2, 20, len(data) - 3):
        with pytest.raises(TruncationError):
            ps.decode_checkpoint(data[:n])


def test_trailing_bytes_and_unknown_tensor():
    model = init_model(SMALL, 0)
    data = ps.encode_checkpoint(ps.model_checkpoint(model, "init", 0))
    with pytest.raises(ValidationError):
        ps.decode_checkpoint(data + b"\0")
    ckpt = ps.model_checkpoint(model, "init", 0)
    ckpt.tensors["head.weight"] = np.zeros((2, 2), np.float32)
    with pytest.raises(ValidationError):
        ps.model_from_checkpoint(ckpt)
    with pytest.raises(ValidationError):
        ps.model_checkpoint(model, "finetune", 0)


def test_missing_file_is_storage_error(tmp_path):
    with pytest.raises(StorageError):
        ps.load_checkpoint(tmp_path / "none.rdrc")


def _index(seed=0, n=9, d=5):
    r = np.random.default_rng(seed)
    roles = np.array([0, 0, 0, 1, 1, 1, 1, 2, 2])[:n]
    ids = np.where(roles == 2, -1, r.integers(0, 3, n))
    cams = np.where(roles == 2, -1, r.integers(0, 4, n))
    return EmbeddingIndex(unit_rows(r, n, d).astype(np.float32), ids, cams, roles)


def test_index_round_trip_bits(tmp_path):
    idx = _index()
    path = tmp_path / "x.rdix"
    ps.save_index(path, idx)
    back = ps.load_index(path)
    assert back.vectors.tobytes() == idx.vectors.tobytes()
    for f in ("identities", "cameras", "roles"):
        np.testing.assert_array_equal(getattr(back, f), getattr(idx, f))
    assert ps.encode_index(back) == path.read_bytes()


def test_index_corrupt_row_fails_norm_check():
    idx = _index()
    data = bytearray(ps.encode_index(idx))
    # first vector value of row 2: header 14 bytes, rows of 7 + 4*dim bytes
    off = 4 + 10 + 2 * (7 + 4 * idx.dim) + 7
    data[off:off + 4] = struct.pack("<f", 3.0)
    with pytest.raises(ValidationError, match="row 2"):
        ps.decode_index(bytes(data))
    ps.decode_index(bytes(data), check_norm=False)


def test_index_header_errors():
    data = ps.encode_index(_index())
    with pytest.raises(BadMagicError):
        ps.decode_index(b"RDRC" + data[4:])
    with pytest.raises(VersionMismatchError):
        ps.decode_index(data[:4] + struct.pack("<H", 2) + data[6:])
    with pytest.raises(TruncationError):
        ps.decode_index(data[:-1])


def test_concatenation_dim_mismatch():
    with pytest.raises(ValidationError):
        concatenate(_index(d=5), _index(d=4))


def test_kv_format():
    text = ps.format_kv({"a": "1", "b.c": "x y"})
    assert text == "a=1\nb.c=x y\n"
    assert ps.parse_kv(text + "# note\n\n d = 4 # trailing\n") == {"a": "1", "b.c": "x y", "d": "4"}
    with pytest.raises(ValidationError, match="line 2"):
        ps.parse_kv("a=1\na=2\n")
    with pytest.raises(ValidationError, match="line 1"):
        ps.parse_kv("novalue\n")
