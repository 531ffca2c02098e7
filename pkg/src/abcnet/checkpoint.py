"""Binary checkpoint format.

    "ABCK" | u32 version (=1) | u32 count | count x entry        (parameters)
           | u32 count | count x entry                          (optimizer moments)
           | u64 step

    entry := u16 name_len | name (UTF-8) | u8 rank | rank x u32 dim
             | prod(dims) x f32 payload

All integers and floats are little-endian. The parameter table carries one
extra entry, ``meta.config``, holding the model configuration as 11 floats
(C, H, W, encoder switch, decoder switch, three dilation rates, deep
supervision, normalization, head prior) so a checkpoint can rebuild its
network. Moment entries are named ``m:<param>`` and
``v:<param>``.
"""
from __future__ import annotations

import struct
from pathlib import Path
from typing import Union

import numpy as np

from .model import ABC, ABCConfig, DECODER_FIRST, ENCODER_FIRST, NORMALIZATIONS
from .train import AdamWState

MAGIC = b"ABCK"
VERSION = 1
META_KEY = "meta.config"

PathLike = Union[str, Path]


class CheckpointError(ValueError):
    code = "checkpoint_error"


class BadMagic(CheckpointError):
    code = "bad_magic"


class VersionMismatch(CheckpointError):
    code = "version_mismatch"


class TruncatedPayload(CheckpointError):
    code = "truncated_payload"


def _config_vector(cfg: ABCConfig) -> np.ndarray:
    h, w = cfg.input_resolution
    return np.array([cfg.input_dim, h, w,
                     ENCODER_FIRST.index(cfg.encoder_first_layer),
                     DECODER_FIRST.index(cfg.decoder_first_layer),
                     *cfg.dilation_rates, int(cfg.deep_supervision),
                     NORMALIZATIONS.index(cfg.normalization),
                     0.0 if cfg.head_prior is None else cfg.head_prior], dtype="<f4")


def _config_from_vector(vec: np.ndarray) -> ABCConfig:
    if vec.shape != (11,):
        raise CheckpointError(f"{META_KEY} must have 11 entries, got shape {vec.shape}")
    v = [int(x) for x in vec[:10]]
    prior = float(vec[10])
    try:
        return ABCConfig(input_dim=v[0], input_resolution=(v[1], v[2]),
                         encoder_first_layer=ENCODER_FIRST[v[3]],
                         decoder_first_layer=DECODER_FIRST[v[4]],
                         dilation_rates=(v[5], v[6], v[7]), deep_supervision=bool(v[8]),
                         normalization=NORMALIZATIONS[v[9]],
                         head_prior=prior if prior > 0 else None)
    except (IndexError, ValueError) as exc:
        raise CheckpointError(f"{META_KEY} does not describe a valid model: {exc}") from None


def _pack_table(entries: list[tuple[str, np.ndarray]]) -> bytes:
    out = [struct.pack("<I", len(entries))]
    for name, arr in entries:
        raw = name.encode("utf-8")
        out.append(struct.pack("<H", len(raw)))
        out.append(raw)
        out.append(struct.pack("<B", arr.ndim))
        out.append(struct.pack(f"<{arr.ndim}I", *arr.shape))
        out.append(np.ascontiguousarray(arr, dtype="<f4").tobytes())
    return b"".join(out)


class _Reader:
    def __init__(self, buf: bytes):
        self.buf = buf
        self.pos = 0

    def take(self, n: int) -> bytes:
        if self.pos + n > len(self.buf):
            raise TruncatedPayload(f"needed {n} bytes at offset {self.pos}, file has {len(self.buf)}")
        chunk = self.buf[self.pos:self.pos + n]
        self.pos += n
        return chunk

    def unpack(self, fmt: str):
        return struct.unpack(fmt, self.take(struct.calcsize(fmt)))

    def table(self) -> list[tuple[str, np.ndarray]]:
        (count,) = self.unpack("<I")
        entries = []
        for _ in range(count):
            (name_len,) = self.unpack("<H")
            name = self.take(name_len).decode("utf-8")
            (rank,) = self.unpack("<B")
            dims = self.unpack(f"<{rank}I")
            n = int(np.prod(dims, dtype=np.int64))
            arr = np.frombuffer(self.take(4 * n), dtype="<f4").reshape(dims).astype(np.float32)
            entries.append((name, arr))
        return entries


def save_checkpoint(model: ABC, state: AdamWState, path: PathLike) -> None:
    params = [(META_KEY, _config_vector(model.config))]
    params += [(name, p.data) for name, p in model.named_parameters()]
    moments = []
    for name, _ in model.named_parameters():
        if name in state.m:
            moments.append((f"m:{name}", state.m[name]))
            moments.append((f"v:{name}", state.v[name]))
    blob = MAGIC + struct.pack("<I", VERSION) + _pack_table(params) + _pack_table(moments)
    blob += struct.pack("<Q", state.step)
    Path(path).write_bytes(blob)


def load_checkpoint(path: PathLike) -> tuple[ABC, AdamWState]:
    r = _Reader(Path(path).read_bytes())
    if r.buf[:4] != MAGIC:
        raise BadMagic(f"{path}: not a checkpoint (magic {r.buf[:4]!r})")
    r.take(4)
    (version,) = r.unpack("<I")
    if version != VERSION:
        raise VersionMismatch(f"{path}: version {version}, expected {VERSION}")
    params = dict(r.table())
    moments = dict(r.table())
    (step,) = r.unpack("<Q")
    if r.pos != len(r.buf):
        raise CheckpointError(f"{path}: {len(r.buf) - r.pos} trailing bytes")

    if META_KEY not in params:
        raise CheckpointError(f"{path}: missing {META_KEY}")
    model = ABC(_config_from_vector(params.pop(META_KEY)))
    named = dict(model.named_parameters())
    if set(named) != set(params):
        missing = sorted(set(named) - set(params))[:3]
        extra = sorted(set(params) - set(named))[:3]
        raise CheckpointError(f"{path}: parameter table mismatch (missing {missing}, unexpected {extra})")
    for name, p in named.items():
        if params[name].shape != p.shape:
            raise CheckpointError(f"{path}: {name} has shape {params[name].shape}, expected {p.shape}")
        p.data = params[name]

    state = AdamWState(step=step)
    for key, arr in moments.items():
        kind, _, name = key.partition(":")
        if kind not in ("m", "v") or name not in named:
            raise CheckpointError(f"{path}: unknown moment entry {key!r}")
        (state.m if kind == "m" else state.v)[name] = arr
    return model, state
