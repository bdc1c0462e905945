from __future__ import annotations

import numpy as np
import pytest

import tensor_core as tc
from checkpoint import decode_checkpoint, encode_checkpoint, load_checkpoint, load_sections, save_checkpoint, save_store
from errors import CheckpointFormatError, MissingCheckpointError


@pytest.fixture
def arrays(rng):
    return {
        "vit.patch.w": rng.normal(0.0, 1.0, (4, 3)).astype(np.float32),
        "vit.pos": rng.normal(0.0, 1.0, (2, 3)).astype(np.float32),
        "txt.emb": rng.normal(0.0, 1.0, 5),
    }


def test_entries_sorted_and_dtypes_kept(arrays):
    back = decode_checkpoint(encode_checkpoint(arrays))
    assert list(back) == sorted(arrays)
    assert back["txt.emb"].dtype == np.float64
    assert back["vit.pos"].dtype == np.float32
    for k, v in arrays.items():
        assert np.array_equal(back[k], v)


def test_encoding_independent_of_insertion_order(arrays):
    reordered = dict(reversed(list(arrays.items())))
    assert encode_checkpoint(reordered) == encode_checkpoint(arrays)


@pytest.mark.parametrize(
    "mutate, message",
    [
        (lambda b: b"XXXXXXXX" + b[8:], "bad magic"),
        (lambda b: b[:-3], "truncated"),
        (lambda b: b + b"\x00", "trailing"),
    ],
)
def test_corrupt_files_rejected(arrays, mutate, message):
    with pytest.raises(CheckpointFormatError, match=message):
        decode_checkpoint(mutate(encode_checkpoint(arrays)))


def test_unsupported_dtype_rejected():
    with pytest.raises(CheckpointFormatError, match="unsupported dtype"):
        encode_checkpoint({"x": np.arange(3)})


def test_save_is_atomic_and_loads(tmp_path, arrays):
    path = save_checkpoint(tmp_path / "ckpt" / "a.seedckpt", arrays)
    assert not path.with_suffix(".seedckpt.tmp").exists()
    assert set(load_checkpoint(path)) == set(arrays)


def test_load_sections_frozen_and_missing(tmp_path, arrays):
    path = save_checkpoint(tmp_path / "a.seedckpt", arrays)
    store = load_sections(path, ["vit"])
    assert store.names() == ["vit.patch.w", "vit.pos"]
    assert all(store.is_frozen(n) for n in store.names())
    with pytest.raises(MissingCheckpointError, match=r"missing checkpoint codebook\.\*"):
        load_sections(path, ["codebook"])
    with pytest.raises(MissingCheckpointError, match=r"missing checkpoint vit\.\*"):
        load_sections(tmp_path / "nope.seedckpt", ["vit"])


def test_save_store_prefixes(tmp_path, rng):
    store = tc.ParamStore()
    store.add("lora.a", rng.normal(0.0, 1.0, 2))
    store.add("lm.w", rng.normal(0.0, 1.0, 2))
    path = save_store(tmp_path / "s.seedckpt", store, ["lora."])
    assert list(load_checkpoint(path)) == ["lora.a"]
