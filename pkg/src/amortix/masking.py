"""Masking functions that hide features from a consumer model.

Two schemes:

* hard: the masked vector is the concatenation [x * s, s]. The indicator
  channel realizes a mask token that lies outside every feature's value
  space -- a genuine 0.0 in x stays distinguishable from a hidden entry
  because the indicator disambiguates them. Doubles the consumer's input
  width. Accepts relaxed s in [0, 1] (used by the continuous control
  variates), in which case the encoding interpolates.
* mult: plain elementwise product x * s with no indicator. Hides values but
  aliases x_j == 0 with s_j == 0; consumers of this scheme accept that by
  construction (pixel inputs scaled to [0, 1], where 0 is background).
"""

from __future__ import annotations

import struct
from dataclasses import dataclass

import numpy as np

from .errors import DimensionError, FormatError

SCHEMES = ("hard", "mult")


@dataclass
class MaskedInput:
    values: np.ndarray          # what the consumer model sees
    indicator: np.ndarray | None  # selection vector (hard scheme only)
    scheme: str


def _check(x, s):
    x = np.asarray(x, dtype=np.float64)
    s = np.asarray(s, dtype=np.float64)
    if x.shape != s.shape:
        raise DimensionError(f"x shape {x.shape} != selection shape {s.shape}")
    return x, s


def hard_mask(x, s) -> MaskedInput:
    """Mask-token replacement; network-facing encoding is [x * s, s]."""
    x, s = _check(x, s)
    return MaskedInput(np.concatenate([x * s, s], axis=-1), s, "hard")


def mult_mask(x, s) -> MaskedInput:
    """Multiplicative masking; s may be relaxed in [0, 1]."""
    x, s = _check(x, s)
    return MaskedInput(x * s, None, "mult")


def masked_values(x, s, scheme) -> np.ndarray:
    if scheme == "hard":
        return hard_mask(x, s).values
    if scheme == "mult":
        return mult_mask(x, s).values
    raise ValueError(f"unknown masking scheme {scheme!r}")


def model_input_width(n_features: int, scheme: str) -> int:
    if scheme == "hard":
        return 2 * n_features
    if scheme == "mult":
        return n_features
    raise ValueError(f"unknown masking scheme {scheme!r}")


# --- mask serialization ------------------------------------------------------

def save_masks_csv(masks, path):
    masks = np.asarray(masks)
    with open(path, "w") as f:
        for row in np.atleast_2d(masks):
            f.write(",".join(str(int(b)) for b in row) + "\n")


def load_masks_csv(path):
    rows = []
    with open(path) as f:
        for line in f:
            line = line.strip()
            if line:
                rows.append([int(tok) for tok in line.split(",")])
    return np.asarray(rows, dtype=np.float64)


_MAGIC = b"AMSK"


def save_masks_bin(masks, path):
    """Flat binary twin: magic AMSK, u32 rows, u32 cols, u8 per bit."""
    masks = np.atleast_2d(np.asarray(masks))
    with open(path, "wb") as f:
        f.write(_MAGIC)
        f.write(struct.pack("<II", masks.shape[0], masks.shape[1]))
        f.write(masks.astype(np.uint8).tobytes())


def load_masks_bin(path):
    with open(path, "rb") as f:
        if f.read(4) != _MAGIC:
            raise FormatError(f"{path}: bad mask magic")
        n, d = struct.unpack("<II", f.read(8))
        buf = f.read(n * d)
        if len(buf) != n * d:
            raise FormatError(f"{path}: truncated mask file")
    return np.frombuffer(buf, dtype=np.uint8).reshape(n, d).astype(np.float64)
