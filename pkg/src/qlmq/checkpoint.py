"""Bit-exact packed checkpoint format.

Layout (all integers little-endian):

  magic   4 bytes  b"QLMQ"
  version u16      format version, currently 1
  digest  32 bytes sha256 of the canonical model-section JSON
  meta    u32 length + UTF-8 JSON: model section, quant section, activation
          ranges (floats as hex strings so the EMA state survives exactly),
          and a gamma summary for diagnostics
  count   u32 number of tensor records
  records per tensor, in the model's stable parameter order:
      name   u16 length + UTF-8
      tag    u8   0 = float32 raw, 1 = packed quantized
      shape  u8 ndim + u32 per dim
      tag 0: count * 4 bytes of float32
      tag 1: bits u8, scalar count u32, scalars as float32,
             code stream of ceil(count*bits/8) bytes (pack_bits layout)
  crc     u32 CRC-32 of every preceding byte

Quantized tensors are stored as level codes plus clipping scalars, never as
dequantized floats; the loader reconstructs exactly the values the saved
model's forward pass used. Loading yields an inference model: decoded
weights are baked in (no weight quantizers are attached) and activation
ranges arrive frozen. Training state such as latent weights and optimizer
moments is out of scope for the format.
"""

from __future__ import annotations

import json
import struct
import zlib
from dataclasses import dataclass
from pathlib import Path
from typing import Optional, Union

import numpy as np

from .autodiff import Tensor
from .config import model_digest
from .errors import ContractError, IntegrityError, VersionError
from .model import ACT_SITES, FINAL_ACT_SITE, GPT, BitTriple, ModelConfig, param_shapes
from .quantizers import (
    ActivationQuantizer,
    LevelSet,
    dequant_codes_symmetric,
    pack_bits,
    quant_codes_symmetric,
    round_half_away,
    unpack_bits,
)

MAGIC = b"QLMQ"
VERSION = 1
_TAG_FLOAT32 = 0
_TAG_PACKED = 1


@dataclass
class TensorRecord:
    name: str
    shape: tuple
    values: Optional[np.ndarray] = None  # float32 records
    bits: Optional[int] = None           # packed records
    scalars: Optional[np.ndarray] = None
    codes: Optional[np.ndarray] = None   # unpacked level indices, flat

    @property
    def packed(self) -> bool:
        return self.values is None


@dataclass
class PackedCheckpoint:
    version: int
    digest: bytes
    meta: dict
    records: list


def _hexfloat(x: Optional[float]) -> Optional[str]:
    return None if x is None else float(x).hex()


def _unhexfloat(s: Optional[str]) -> Optional[float]:
    return None if s is None else float.fromhex(s)


# ---------------------------------------------------------------------------
# encode


def _encode_quantized(w: np.ndarray, q) -> tuple[int, np.ndarray, np.ndarray]:
    """(bits, clipping scalars float32, level codes) for one weight tensor.

    The code/scalar split is chosen so the loader's dequantization replays
    the same float32 operations as the fake-quant forward pass.
    """
    b = q.spec.bits
    ls = LevelSet.for_bits(b)
    scheme = q.spec.scheme
    if scheme == "pact":
        an, ap = q.alpha_neg.data, q.alpha_pos.data
        neg = an[:, None] if q.per_row else an
        pos = ap[:, None] if q.per_row else ap
        scale = np.where(w >= 0, pos, neg).astype(w.dtype)
        u = np.clip(w, -neg, pos) / scale
        codes = (round_half_away(u * ls.k) + ls.k).astype(np.uint16)
        scalars = np.concatenate([np.atleast_1d(an), np.atleast_1d(ap)])
    elif scheme == "lsq":
        step = q.step.data[:, None] if q.per_row else q.step.data
        v = np.clip(round_half_away(w / step), -ls.k, ls.k)
        codes = (v + ls.k).astype(np.uint16)
        scalars = np.atleast_1d(q.step.data)
    else:  # dynamic, laq, fixed: a plain symmetric clip factor
        alpha = q.effective_alpha(w)
        codes = quant_codes_symmetric(w, alpha, b).astype(np.uint16)
        scalars = np.atleast_1d(np.asarray(alpha, dtype=np.float32)).reshape(-1)
    return b, scalars.astype("<f4"), codes.reshape(-1)


def _decode_quantized(rec: TensorRecord, scheme: str) -> np.ndarray:
    """Dequantize one packed record; replays the forward-pass float32 ops.

    Codes at the zero level lose the sign of a negative float zero; the
    difference washes out at the first arithmetic with nonzero operands.
    """
    b = rec.bits
    ls = LevelSet.for_bits(b)
    codes = rec.codes.reshape(rec.shape)
    n_rows = rec.shape[0]
    if scheme == "pact":
        if rec.scalars.size == 2:
            an, ap = np.float32(rec.scalars[0]), np.float32(rec.scalars[1])
        else:
            an = rec.scalars[:n_rows].astype(np.float32)[:, None]
            ap = rec.scalars[n_rows:].astype(np.float32)[:, None]
        lvl = (codes.astype(np.float32) - ls.k) / np.float32(ls.k)
        side = np.where(lvl > 0, ap, an).astype(np.float32)
        return (side * lvl).astype(np.float32)
    if scheme == "lsq":
        step = np.float32(rec.scalars[0]) if rec.scalars.size == 1 \
            else rec.scalars.astype(np.float32)[:, None]
        return ((codes.astype(np.float32) - ls.k) * step).astype(np.float32)
    alpha = np.float32(rec.scalars[0]) if rec.scalars.size == 1 \
        else rec.scalars.astype(np.float32)[:, None]
    return dequant_codes_symmetric(codes, alpha, b, dtype=np.float32)


def _gamma_summary(model: GPT) -> Optional[dict]:
    if model.scheme != "dynamic" or not model.quantizers:
        return None
    out = {}
    for pname, q in model.quantizers.items():
        g = q.gamma.data
        out[pname] = [float(x) for x in g] if q.per_row else float(g)
    return out


def _build_meta(model: GPT) -> dict:
    cfg = model.config
    meta = {
        "model": {
            "vocab_size": cfg.vocab_size, "n_layers": cfg.n_layers,
            "d_model": cfg.d_model, "n_heads": cfg.n_heads, "d_ff": cfg.d_ff,
            "max_seq_len": cfg.max_seq_len, "tie_embeddings": cfg.tie_embeddings,
        },
        "quant": None,
        "act_ranges": {},
        "gamma": _gamma_summary(model),
    }
    if model.bits is not None:
        meta["quant"] = {"w_bits": model.bits.w, "e_bits": model.bits.e,
                         "a_bits": model.bits.a, "scheme": model.scheme}
    for name, aq in model.act_quantizers.items():
        st = aq.range.state()
        meta["act_ranges"][name] = {
            "lo": _hexfloat(st["lo"]), "hi": _hexfloat(st["hi"]),
            "decay": st["decay"], "symmetric": st["symmetric"],
        }
    return meta


def pack_model(model: GPT) -> bytes:
    """Serialize ``model`` to checkpoint bytes.

    The model must be frozen (no parameter requires a gradient): checkpoints
    capture finished models, not training state.
    """
    if any(t.requires_grad for t in model.params.values()):
        raise ContractError("pack_model requires a frozen model; call freeze() first")
    meta = _build_meta(model)
    out = bytearray()
    out += MAGIC
    out += struct.pack("<H", VERSION)
    out += model_digest(meta["model"])
    meta_bytes = json.dumps(meta).encode()
    out += struct.pack("<I", len(meta_bytes))
    out += meta_bytes
    names = list(param_shapes(model.config))
    out += struct.pack("<I", len(names))
    for name in names:
        w = model.params[name].data
        nb = name.encode()
        out += struct.pack("<H", len(nb))
        out += nb
        q = model.quantizers.get(name)
        if q is None:
            out += struct.pack("<B", _TAG_FLOAT32)
            out += struct.pack("<B", w.ndim)
            out += struct.pack(f"<{w.ndim}I", *w.shape)
            out += np.ascontiguousarray(w, dtype="<f4").tobytes()
        else:
            bits, scalars, codes = _encode_quantized(w, q)
            out += struct.pack("<B", _TAG_PACKED)
            out += struct.pack("<B", w.ndim)
            out += struct.pack(f"<{w.ndim}I", *w.shape)
            out += struct.pack("<B", bits)
            out += struct.pack("<I", scalars.size)
            out += scalars.tobytes()
            out += pack_bits(codes, bits)
    out += struct.pack("<I", zlib.crc32(bytes(out)))
    return bytes(out)


def save_checkpoint(model: GPT, path) -> int:
    """Write ``model`` to ``path``; returns the byte count."""
    data = pack_model(model)
    Path(path).write_bytes(data)
    return len(data)


# ---------------------------------------------------------------------------
# decode


class _Reader:
    def __init__(self, data: bytes):
        self.data = data
        self.pos = 0

    def take(self, n: int) -> bytes:
        if self.pos + n > len(self.data):
            raise IntegrityError("checkpoint ends mid-record")
        chunk = self.data[self.pos:self.pos + n]
        self.pos += n
        return chunk

    def unpack(self, fmt: str):
        return struct.unpack(fmt, self.take(struct.calcsize(fmt)))


def read_packed(path) -> PackedCheckpoint:
    """Parse and integrity-check a checkpoint file without building a model."""
    data = Path(path).read_bytes()
    if len(data) < 4 + 2 + 32 + 4 + 4 + 4:
        raise IntegrityError(f"file too short to be a checkpoint: {path}")
    if data[:4] != MAGIC:
        raise IntegrityError(f"bad magic {data[:4]!r}; not a packed checkpoint: {path}")
    (version,) = struct.unpack("<H", data[4:6])
    if version != VERSION:
        raise VersionError(
            f"unsupported checkpoint format version {version}; this build reads {VERSION}")
    body, (stored_crc,) = data[:-4], struct.unpack("<I", data[-4:])
    if zlib.crc32(body) != stored_crc:
        raise IntegrityError(f"CRC-32 mismatch; checkpoint is corrupt or truncated: {path}")
    r = _Reader(body)
    r.take(6)
    digest = r.take(32)
    (meta_len,) = r.unpack("<I")
    meta = json.loads(r.take(meta_len).decode())
    (n_records,) = r.unpack("<I")
    records = []
    for _ in range(n_records):
        (name_len,) = r.unpack("<H")
        name = r.take(name_len).decode()
        (tag,) = r.unpack("<B")
        (ndim,) = r.unpack("<B")
        shape = tuple(r.unpack(f"<{ndim}I"))
        count = int(np.prod(shape, dtype=np.int64)) if ndim else 1
        if tag == _TAG_FLOAT32:
            raw = r.take(count * 4)
            values = np.frombuffer(raw, dtype="<f4").reshape(shape).copy()
            records.append(TensorRecord(name, shape, values=values))
        elif tag == _TAG_PACKED:
            (bits,) = r.unpack("<B")
            (n_scalars,) = r.unpack("<I")
            scalars = np.frombuffer(r.take(n_scalars * 4), dtype="<f4").copy()
            codes = unpack_bits(r.take((count * bits + 7) // 8), bits, count)
            records.append(TensorRecord(name, shape, bits=bits,
                                        scalars=scalars, codes=codes))
        else:
            raise IntegrityError(f"unknown tensor record tag {tag}")
    if r.pos != len(body):
        raise IntegrityError(f"{len(body) - r.pos} trailing bytes after the last record")
    return PackedCheckpoint(version, digest, meta, records)


def checkpoint_digest(path) -> bytes:
    """The 32-byte model-config digest from a checkpoint header."""
    return read_packed(path).digest


def load_checkpoint(path, with_meta: bool = False) -> Union[GPT, tuple[GPT, dict]]:
    """Materialize a checkpoint as an evaluation-ready model.

    Decoded quantized weights are baked into the parameters and activation
    ranges come back frozen, so the loaded model's forward pass reproduces
    the saved model's evaluation exactly, with no teacher or training state
    required.
    """
    ck = read_packed(path)
    cfg = ModelConfig(**ck.meta["model"])
    scheme = (ck.meta.get("quant") or {}).get("scheme")
    expected = param_shapes(cfg)
    model = GPT(cfg, seed=0)
    seen = set()
    for rec in ck.records:
        if rec.name not in expected:
            raise IntegrityError(f"unexpected tensor {rec.name!r} in checkpoint")
        if rec.shape != expected[rec.name]:
            raise IntegrityError(
                f"tensor {rec.name!r} has shape {rec.shape}, expected {expected[rec.name]}")
        if rec.packed:
            if scheme is None:
                raise IntegrityError(
                    f"packed tensor {rec.name!r} in a checkpoint with no quant section")
            values = _decode_quantized(rec, scheme)
        else:
            values = rec.values
        model.params[rec.name] = Tensor(values, requires_grad=False)
        seen.add(rec.name)
    missing = set(expected) - seen
    if missing:
        raise IntegrityError(f"checkpoint is missing tensors: {sorted(missing)}")
    quant = ck.meta.get("quant")
    if quant is not None:
        model.bits = BitTriple(quant["w_bits"], quant["e_bits"], quant["a_bits"])
        model.scheme = quant["scheme"]
        if quant["a_bits"] != "fp":
            site_sym = dict(ACT_SITES)
            for key, st in ck.meta["act_ranges"].items():
                short = key.split(".")[-1]
                symmetric = FINAL_ACT_SITE[1] if key == FINAL_ACT_SITE[0] \
                    else site_sym[short]
                aq = ActivationQuantizer(bits=quant["a_bits"], symmetric=symmetric,
                                         decay=st["decay"], name=key)
                aq.range._lo = _unhexfloat(st["lo"])
                aq.range._hi = _unhexfloat(st["hi"])
                aq.range.frozen = True
                model.act_quantizers[key] = aq
    return (model, ck.meta) if with_meta else model
