import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from amortix.errors import DimensionError, FormatError
from amortix.masking import (hard_mask, load_masks_bin, load_masks_csv,
                             masked_values, model_input_width, mult_mask,
                             save_masks_bin, save_masks_csv)


def test_hard_mask_basic():
    out = hard_mask([1.5, -2.0, 3.0], [1, 0, 1])
    assert np.array_equal(out.values, [1.5, 0.0, 3.0, 1.0, 0.0, 1.0])
    assert np.array_equal(out.indicator, [1, 0, 1])
    assert out.scheme == "hard"


def test_hard_mask_identity_reveal():
    x = np.array([0.2, -7.0, 0.0])
    out = hard_mask(x, np.ones(3))
    assert np.array_equal(out.values[:3], x)
    assert np.all(out.values[3:] == 1.0)


def test_hard_mask_fully_masked():
    out = hard_mask([9.0, -9.0], [0, 0])
    assert np.all(out.values == 0.0)


def test_mult_mask_examples():
    assert np.array_equal(mult_mask([2.0, 4.0], [1, 0]).values, [2.0, 0.0])
    assert np.array_equal(mult_mask([2.0, 4.0], [0.5, 1]).values, [1.0, 4.0])
    x = np.array([3.0, -1.0, 0.25])
    assert np.array_equal(mult_mask(x, np.ones(3)).values, x)
    assert mult_mask(x, np.ones(3)).indicator is None


def test_length_mismatch():
    with pytest.raises(DimensionError):
        hard_mask([1.0, 2.0], [1])
    with pytest.raises(DimensionError):
        mult_mask([1.0], [1, 0])


finite_floats = st.floats(min_value=-1e6, max_value=1e6,
                          allow_nan=False, allow_infinity=False)


@given(st.lists(st.tuples(finite_floats, st.integers(0, 1)),
                min_size=1, max_size=12))
@settings(max_examples=60, deadline=None)
def test_hard_mask_idempotent_on_revealed(pairs):
    x = np.array([p[0] for p in pairs])
    s = np.array([float(p[1]) for p in pairs])
    once = hard_mask(x, s)
    twice = hard_mask(once.values[:len(x)], s)
    assert np.array_equal(once.values, twice.values)


@given(st.lists(st.tuples(finite_floats, finite_floats, st.integers(0, 1)),
                min_size=1, max_size=12))
@settings(max_examples=60, deadline=None)
def test_hidden_values_cannot_leak(triples):
    """x and x' agreeing on revealed coordinates mask identically."""
    x = np.array([t[0] for t in triples])
    x2 = np.array([t[1] for t in triples])
    s = np.array([float(t[2]) for t in triples])
    x2[s == 1.0] = x[s == 1.0]
    assert np.array_equal(hard_mask(x, s).values, hard_mask(x2, s).values)


def test_mult_mask_aliases_zero_with_masked():
    # documented limitation motivating the indicator design
    a = mult_mask([0.0, 5.0], [1, 1]).values
    b = mult_mask([123.0, 5.0], [0, 1]).values
    assert np.array_equal(a, b)


def test_model_input_width():
    assert model_input_width(11, "hard") == 22
    assert model_input_width(11, "mult") == 11
    with pytest.raises(ValueError):
        model_input_width(3, "soft")


def test_masked_values_dispatch():
    x = np.array([[1.0, 2.0]])
    s = np.array([[0.0, 1.0]])
    assert masked_values(x, s, "hard").shape == (1, 4)
    assert masked_values(x, s, "mult").shape == (1, 2)


def test_mask_serialization_round_trips(tmp_path):
    masks = (np.arange(35).reshape(5, 7) % 3 == 0).astype(np.float64)
    csv_path, bin_path = tmp_path / "m.csv", tmp_path / "m.bin"
    save_masks_csv(masks, csv_path)
    save_masks_bin(masks, bin_path)
    assert np.array_equal(load_masks_csv(csv_path), masks)
    assert np.array_equal(load_masks_bin(bin_path), masks)
    # binary twin layout: magic + two u32 + one byte per bit
    assert bin_path.stat().st_size == 4 + 8 + masks.size


def test_mask_bin_bad_magic(tmp_path):
    path = tmp_path / "bad.bin"
    path.write_bytes(b"XXXX\x01\x00\x00\x00\x01\x00\x00\x00\x01")
    with pytest.raises(FormatError):
        load_masks_bin(path)
