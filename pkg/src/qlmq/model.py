"""Desk-scale decoder-only autoregressive transformer with quantizer hooks.

Pre-norm blocks, fused qkv projection, GELU feed-forward, learned absolute
position embeddings, tied input/output embedding. No biases on the linear
maps and no dropout: the model is meant for small deterministic experiments,
not leaderboard numbers.

Quantization placement follows one rule set: every transformer weight matrix
(w_qkv, w_o, w_f, w_g) gets a per-tensor quantizer, the token embedding gets
a per-row quantizer shared with the output head, and a fixed list of
activation sites gets range-calibrated quantizers. Layer norms, position
embeddings, and residual paths stay full precision.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Optional, Union

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor
from .errors import ConfigError, ContractError
from .quantizers import ActivationQuantizer, QuantSpec, WeightQuantizer

Bits = Union[int, str]  # 2/4/8 or "fp"

QUANTIZED_WEIGHTS = ("w_qkv", "w_o", "w_f", "w_g")

# activation sites per layer; (name, symmetric). The two products whose
# outputs skew positive (prob-weighted values, GELU images) are asymmetric.
ACT_SITES = (
    ("attn_q", True),
    ("attn_k", True),
    ("attn_v", True),
    ("attn_scores", True),
    ("attn_ctx", False),
    ("attn_proj", True),
    ("gelu_out", False),
    ("ffn_out", True),
)
FINAL_ACT_SITE = ("final_hidden", True)


def _check_bits(value: Bits, what: str) -> Bits:
    if value == "fp":
        return value
    if isinstance(value, (int, np.integer)) and int(value) >= 2:
        return int(value)
    raise ConfigError(f"{what} bits must be an integer >= 2 or 'fp', got {value!r}")


@dataclass(frozen=True)
class BitTriple:
    """W-E-A precision assignment: transformer weights, embedding, activations."""

    w: Bits
    e: Bits
    a: Bits

    def __post_init__(self):
        _check_bits(self.w, "weight")
        _check_bits(self.e, "embedding")
        _check_bits(self.a, "activation")

    @classmethod
    def parse(cls, text: str) -> "BitTriple":
        parts = text.strip().split("-")
        if text.strip() == "fp":
            return cls("fp", "fp", "fp")
        if len(parts) != 3:
            raise ConfigError(f"precision must look like '2-2-8' or 'fp', got {text!r}")
        vals = tuple(p if p == "fp" else int(p) for p in parts)
        return cls(*vals)

    def __str__(self):
        return f"{self.w}-{self.e}-{self.a}"

    @property
    def full_precision(self) -> bool:
        return self.w == "fp" and self.e == "fp" and self.a == "fp"


@dataclass(frozen=True)
class ModelConfig:
    vocab_size: int
    n_layers: int = 2
    d_model: int = 128
    n_heads: int = 4
    d_ff: int = 512
    max_seq_len: int = 128
    tie_embeddings: bool = True

    def __post_init__(self):
        if self.d_model % self.n_heads != 0:
            raise ConfigError(
                f"d_model {self.d_model} not divisible by n_heads {self.n_heads}"
            )
        if self.max_seq_len < 2:
            raise ConfigError("max_seq_len must be at least 2")
        for f in ("vocab_size", "n_layers", "d_model", "n_heads", "d_ff"):
            if getattr(self, f) < 1:
                raise ConfigError(f"{f} must be positive")

    @property
    def d_head(self) -> int:
        return self.d_model // self.n_heads


def layer_param_names(i: int) -> list[str]:
    base = f"layers.{i}"
    return [
        f"{base}.ln1.gain", f"{base}.ln1.bias",
        f"{base}.w_qkv", f"{base}.w_o",
        f"{base}.ln2.gain", f"{base}.ln2.bias",
        f"{base}.w_f", f"{base}.w_g",
    ]


def param_shapes(config: ModelConfig) -> dict[str, tuple]:
    """Stable name -> shape registry; the save/load and size-report order."""
    d, v = config.d_model, config.vocab_size
    shapes: dict[str, tuple] = {
        "tok_emb": (v, d),
        "pos_emb": (config.max_seq_len, d),
    }
    for i in range(config.n_layers):
        base = f"layers.{i}"
        shapes[f"{base}.ln1.gain"] = (d,)
        shapes[f"{base}.ln1.bias"] = (d,)
        shapes[f"{base}.w_qkv"] = (d, 3 * d)
        shapes[f"{base}.w_o"] = (d, d)
        shapes[f"{base}.ln2.gain"] = (d,)
        shapes[f"{base}.ln2.bias"] = (d,)
        shapes[f"{base}.w_f"] = (d, config.d_ff)
        shapes[f"{base}.w_g"] = (config.d_ff, d)
    shapes["ln_f.gain"] = (d,)
    shapes["ln_f.bias"] = (d,)
    if not config.tie_embeddings:
        shapes["head_w"] = (d, v)
    return shapes


def count_params(config: ModelConfig) -> int:
    return sum(int(np.prod(s)) for s in param_shapes(config).values())


class GPT:
    """Autoregressive transformer holding parameters and quantizer state."""

    def __init__(self, config: ModelConfig, seed: int = 0):
        self.config = config
        self.params: dict[str, Tensor] = {}
        self.quantizers: dict[str, WeightQuantizer] = {}
        self.act_quantizers: dict[str, ActivationQuantizer] = {}
        self.bits: Optional[BitTriple] = None
        self.scheme: Optional[str] = None
        rng = np.random.default_rng(np.random.SeedSequence(seed))
        for name, shape in param_shapes(config).items():
            if name.endswith(".gain") or name.endswith("gain"):
                data = np.ones(shape, dtype=np.float32)
            elif name.endswith("bias"):
                data = np.zeros(shape, dtype=np.float32)
            else:
                data = rng.normal(0.0, 0.02, size=shape).astype(np.float32)
            self.params[name] = Tensor(data, requires_grad=True)

    # -- parameter groups ---------------------------------------------------

    def backbone_params(self) -> dict[str, Tensor]:
        return self.params

    def clip_params(self) -> dict[str, Tensor]:
        out: dict[str, Tensor] = {}
        for pname, q in self.quantizers.items():
            for j, t in enumerate(q.clip_params()):
                out[f"quant.{pname}.{j}"] = t
        return out

    def freeze(self) -> None:
        for t in self.params.values():
            t.requires_grad = False
            t.grad = None

    @property
    def mode(self) -> str:
        return "student" if (self.quantizers or self.act_quantizers) else "teacher"

    # -- quantizer attachment -------------------------------------------------

    def attach_quantizers(self, bits: BitTriple, scheme: str) -> None:
        if self.quantizers or self.act_quantizers:
            raise ContractError("quantizers already attached")
        from .quantizers import WEIGHT_SCHEMES

        if scheme not in WEIGHT_SCHEMES:
            raise ConfigError(f"unknown quantization scheme {scheme!r}")
        self.bits = bits
        self.scheme = scheme
        if bits.e != "fp":
            spec = QuantSpec(bits=bits.e, scheme=scheme, target="embedding")
            self.quantizers["tok_emb"] = WeightQuantizer(
                spec, self.params["tok_emb"].data, name="tok_emb"
            )
        if bits.w != "fp":
            spec = QuantSpec(bits=bits.w, scheme=scheme, target="weight")
            for i in range(self.config.n_layers):
                for wname in QUANTIZED_WEIGHTS:
                    pname = f"layers.{i}.{wname}"
                    self.quantizers[pname] = WeightQuantizer(
                        spec, self.params[pname].data, name=pname
                    )
            if not self.config.tie_embeddings:
                self.quantizers["head_w"] = WeightQuantizer(
                    spec, self.params["head_w"].data, name="head_w"
                )
        if bits.a != "fp":
            for i in range(self.config.n_layers):
                for sname, symmetric in ACT_SITES:
                    key = f"layers.{i}.{sname}"
                    self.act_quantizers[key] = ActivationQuantizer(
                        bits=bits.a, symmetric=symmetric, name=key
                    )
            fname, fsym = FINAL_ACT_SITE
            self.act_quantizers[fname] = ActivationQuantizer(
                bits=bits.a, symmetric=fsym, name=fname
            )

    def refit_quantizers(self) -> None:
        """Re-fit non-learned quantizer state (the alternating-fit scheme)."""
        for pname, q in self.quantizers.items():
            q.refit(self.params[pname].data)

    def freeze_activation_ranges(self, frozen: bool = True) -> None:
        for aq in self.act_quantizers.values():
            aq.range.frozen = frozen

    # -- forward --------------------------------------------------------------

    def _wq(self, name: str, mode: str) -> Tensor:
        w = self.params[name]
        if mode == "teacher":
            return w
        q = self.quantizers.get(name)
        return w if q is None else q.apply(w)

    def _aq(self, key: str, x: Tensor, mode: str, calibrate: bool) -> Tensor:
        if mode == "teacher":
            return x
        aq = self.act_quantizers.get(key)
        return x if aq is None else aq.apply(x, calibrate=calibrate)

    def forward(self, tokens: np.ndarray, mode: Optional[str] = None,
                calibrate: bool = False,
                contrast_layer: str = "last") -> tuple[Tensor, Tensor]:
        """Run the language model; returns (logits, hidden states).

        ``tokens`` is an int array [batch, n] or [n]. ``mode`` defaults to
        student when quantizers are attached, teacher otherwise; passing
        "teacher" explicitly bypasses all quantization. ``calibrate`` lets
        activation quantizers update their EMA ranges from this batch.
        ``contrast_layer`` picks the returned representation: "last" is the
        final hidden state feeding the head, "first" the residual stream
        after the first block. Logits always use the final hidden state.
        """
        if mode is None:
            mode = self.mode
        if mode not in ("teacher", "student"):
            raise ContractError(f"mode must be 'teacher' or 'student', got {mode!r}")
        if contrast_layer not in ("first", "last"):
            raise ConfigError(f"contrast_layer must be 'first' or 'last', got {contrast_layer!r}")
        tokens = np.asarray(tokens)
        squeeze = tokens.ndim == 1
        if squeeze:
            tokens = tokens[None, :]
        if tokens.ndim != 2:
            raise ContractError(f"tokens must be 1-D or 2-D, got shape {tokens.shape}")
        bsz, n = tokens.shape
        cfg = self.config
        if n > cfg.max_seq_len:
            raise ContractError(f"sequence length {n} exceeds max_seq_len {cfg.max_seq_len}")

        emb = self._wq("tok_emb", mode)  # quantized once; reused by the head
        h = ad.add(ad.embedding(emb, tokens),
                   ad.embedding(self.params["pos_emb"], np.arange(n)))

        causal = np.tril(np.ones((n, n), dtype=bool))
        inv_sqrt_dh = np.asarray(1.0 / math.sqrt(cfg.d_head), dtype=np.float32)

        for i in range(cfg.n_layers):
            base = f"layers.{i}"
            x = ad.layer_norm(h, self.params[f"{base}.ln1.gain"], self.params[f"{base}.ln1.bias"])
            qkv = ad.matmul(x, self._wq(f"{base}.w_qkv", mode))  # [B,n,3d]
            qkv = ad.reshape(qkv, (bsz, n, 3, cfg.n_heads, cfg.d_head))
            qkv = ad.transpose(qkv, (2, 0, 3, 1, 4))  # [3,B,H,n,dh]
            q = self._aq(f"{base}.attn_q", _take0(qkv, 0), mode, calibrate)
            k = self._aq(f"{base}.attn_k", _take0(qkv, 1), mode, calibrate)
            v = self._aq(f"{base}.attn_v", _take0(qkv, 2), mode, calibrate)
            scores = ad.mul(ad.matmul(q, ad.transpose(k, (0, 1, 3, 2))), Tensor(inv_sqrt_dh))
            scores = self._aq(f"{base}.attn_scores", scores, mode, calibrate)
            probs = ad.softmax_rows(scores, mask=causal)
            ctx = self._aq(f"{base}.attn_ctx", ad.matmul(probs, v), mode, calibrate)
            merged = ad.reshape(ad.transpose(ctx, (0, 2, 1, 3)), (bsz, n, cfg.d_model))
            attn = ad.matmul(merged, self._wq(f"{base}.w_o", mode))
            attn = self._aq(f"{base}.attn_proj", attn, mode, calibrate)
            h = ad.add(h, attn)

            x = ad.layer_norm(h, self.params[f"{base}.ln2.gain"], self.params[f"{base}.ln2.bias"])
            g = ad.gelu(ad.matmul(x, self._wq(f"{base}.w_f", mode)))
            g = self._aq(f"{base}.gelu_out", g, mode, calibrate)
            f = ad.matmul(g, self._wq(f"{base}.w_g", mode))
            f = self._aq(f"{base}.ffn_out", f, mode, calibrate)
            h = ad.add(h, f)
            if i == 0:
                h_first = h

        h = ad.layer_norm(h, self.params["ln_f.gain"], self.params["ln_f.bias"])
        h = self._aq(FINAL_ACT_SITE[0], h, mode, calibrate)
        if cfg.tie_embeddings:
            logits = ad.matmul(h, ad.transpose(emb, (1, 0)))
        else:
            logits = ad.matmul(h, self._wq("head_w", mode))
        rep = h_first if contrast_layer == "first" else h
        if squeeze:
            logits = ad.reshape(logits, (n, cfg.vocab_size))
            rep = ad.reshape(rep, (n, cfg.d_model))
        return logits, rep


def _take0(t: Tensor, idx: int) -> Tensor:
    """Select index ``idx`` along axis 0 (differentiable gather)."""
    return ad.embedding(t, np.asarray(idx))


def assign_quantizers(model: GPT, bits: BitTriple, scheme: str) -> dict[str, WeightQuantizer]:
    """Attach W-E-A quantizers to a model; returns the weight registry."""
    model.attach_quantizers(bits, scheme)
    return model.quantizers


def init_student_from_teacher(teacher: GPT, bits: BitTriple, scheme: str,
                              config: Optional[ModelConfig] = None) -> GPT:
    """Copy the teacher's weights into a fresh student with new quantizer state."""
    if config is not None and config != teacher.config:
        raise ContractError("student config must match the teacher's")
    student = GPT(teacher.config, seed=0)
    for name, t in teacher.params.items():
        student.params[name] = Tensor(t.data.copy(), requires_grad=True)
    student.attach_quantizers(bits, scheme)
    teacher.freeze()
    return student
