"""Versioned binary serialization for models.

Layout: magic ``CLMK``, format version byte, kind byte, a kind-specific
header, then little-endian 64-bit floats for the flat parameter vector.
"""

from __future__ import annotations

import struct
from pathlib import Path

import numpy as np

from clmark.errors import InvalidInputError

MAGIC = b"CLMK"
VERSION = 1
KIND_ENCODER = 1
KIND_PROBE = 2
KIND_GENERATOR = 3

_ACT_CODES = {"relu": 0, "tanh": 1}
_ACT_NAMES = {v: k for k, v in _ACT_CODES.items()}


def _write_floats(fh, arr: np.ndarray):
    fh.write(np.asarray(arr, dtype="<f8").tobytes())


def _read_floats(fh, n: int) -> np.ndarray:
    raw = fh.read(8 * n)
    if len(raw) != 8 * n:
        raise InvalidInputError("model file truncated")
    return np.frombuffer(raw, dtype="<f8").copy()


def save_encoder(model, path: str | Path):
    from clmark.cltrain import EncoderModel  # local import to avoid cycle

    assert isinstance(model, EncoderModel)
    with open(path, "wb") as fh:
        fh.write(MAGIC)
        fh.write(struct.pack("<BB", VERSION, KIND_ENCODER))
        fh.write(struct.pack("<BI", _ACT_CODES[model.activation], len(model.arch)))
        fh.write(struct.pack(f"<{len(model.arch)}I", *model.arch))
        _write_floats(fh, model.params)


def _check_header(fh, path, expect_kind):
    if fh.read(4) != MAGIC:
        raise InvalidInputError(f"{path}: not a clmark model file")
    version, kind = struct.unpack("<BB", fh.read(2))
    if version != VERSION:
        raise InvalidInputError(f"{path}: unsupported format version {version}")
    if kind != expect_kind:
        raise InvalidInputError(f"{path}: wrong model kind {kind}, expected {expect_kind}")


def load_encoder(path: str | Path):
    from clmark.cltrain import EncoderModel, param_count

    with open(path, "rb") as fh:
        _check_header(fh, path, KIND_ENCODER)
        act_code, n_dims = struct.unpack("<BI", fh.read(5))
        arch = struct.unpack(f"<{n_dims}I", fh.read(4 * n_dims))
        params = _read_floats(fh, param_count(arch))
        return EncoderModel(arch, params, _ACT_NAMES[act_code])


def save_probe(probe, path: str | Path):
    from clmark.downstream import LinearProbe

    assert isinstance(probe, LinearProbe)
    d, k = probe.weights.shape
    with open(path, "wb") as fh:
        fh.write(MAGIC)
        fh.write(struct.pack("<BB", VERSION, KIND_PROBE))
        fh.write(struct.pack("<II", d, k))
        for name in probe.class_names:
            enc = name.encode("utf-8")
            fh.write(struct.pack("<I", len(enc)))
            fh.write(enc)
        _write_floats(fh, probe.weights.ravel())
        _write_floats(fh, probe.bias)


def load_probe(path: str | Path):
    from clmark.downstream import LinearProbe

    with open(path, "rb") as fh:
        _check_header(fh, path, KIND_PROBE)
        d, k = struct.unpack("<II", fh.read(8))
        names = []
        for _ in range(k):
            (length,) = struct.unpack("<I", fh.read(4))
            names.append(fh.read(length).decode("utf-8"))
        weights = _read_floats(fh, d * k).reshape(d, k)
        bias = _read_floats(fh, k)
        return LinearProbe(weights, bias, tuple(names))


def save_generator(gen, path: str | Path):
    from clmark.blto import TriggerGenerator

    assert isinstance(gen, TriggerGenerator)
    h, w, c = gen.shape
    with open(path, "wb") as fh:
        fh.write(MAGIC)
        fh.write(struct.pack("<BB", VERSION, KIND_GENERATOR))
        fh.write(struct.pack("<III", h, w, c))
        fh.write(struct.pack("<d", gen.linf_bound))
        _write_floats(fh, gen.params)


def load_generator(path: str | Path):
    from clmark.blto import TriggerGenerator

    with open(path, "rb") as fh:
        _check_header(fh, path, KIND_GENERATOR)
        h, w, c = struct.unpack("<III", fh.read(12))
        (eps,) = struct.unpack("<d", fh.read(8))
        params = _read_floats(fh, h * w * c)
        return TriggerGenerator((h, w, c), params, eps)
