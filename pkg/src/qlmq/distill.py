"""Token-level contrastive distillation with momentum memory banks.

The student learns from a frozen teacher through two signals:

  * a bidirectional InfoNCE loss over cosine similarities between linearly
    projected last-layer hidden states, where each token's anchor is its
    momentum-smoothed bank row (re-expressed through the current observation
    so gradient flows) and negatives are detached bank rows of other tokens;
  * a soft cross-entropy between the two output distributions.

Total objective: lambda * (l_s2t + l_t2s)/2 + l_dist, lambda 0.1 by default.

Bank rows are keyed by vocabulary id: occurrences of the same type within a
batch are averaged before one EMA step, and a token never serves as its own
negative. Five negative-sampling strategies are provided; "default" draws
other token types from the same sequence.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Optional

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor, record_op
from .errors import (
    ConfigError,
    ContractError,
    DegenerateRepresentationError,
    ShapeError,
)

STRATEGIES = ("default", "fp+quan", "quan-only", "global", "in-batch")


# ---------------------------------------------------------------------------
# tape primitives


def normalize_rows_op(x: Tensor) -> Tensor:
    """Unit-normalize the last axis; zero rows are unrepresentable."""
    norms = np.sqrt((x.data * x.data).sum(axis=-1, keepdims=True))
    if np.any(norms == 0.0):
        raise DegenerateRepresentationError("cannot normalize a zero-norm representation")
    y = x.data / norms
    ctx = (y, norms)

    def grad_fn(ctx, g):
        yy, nn = ctx
        dot = (g * yy).sum(axis=-1, keepdims=True)
        return ((g - yy * dot) / nn,)

    return record_op("normalize_rows", (x,), y, ctx, grad_fn)


def rowdot(a: Tensor, b: Tensor) -> Tensor:
    """Inner product over the last axis."""
    return ad.tsum(ad.mul(a, b), axis=-1)


def infonce_op(pos: Tensor, negs: Tensor, mask: Optional[np.ndarray], tau: float) -> Tensor:
    """Mean over anchors of -log( e^{pos/tau} / (e^{pos/tau} + sum_j e^{neg_j/tau}) ).

    ``pos`` is [A], ``negs`` [A, M]; ``mask`` marks valid negatives. An
    anchor with no valid negatives contributes exactly zero.
    """
    if tau <= 0:
        raise ContractError(f"temperature must be positive, got {tau}")
    if pos.data.ndim != 1 or negs.data.ndim != 2 or negs.data.shape[0] != pos.data.shape[0]:
        raise ShapeError(
            f"expected pos [A] and negs [A, M], got {pos.data.shape} and {negs.data.shape}"
        )
    a = pos.data.shape[0]
    if mask is None:
        mask = np.ones(negs.data.shape, dtype=bool)
    z = pos.data / tau
    zn = negs.data / tau
    neg_max = np.max(np.where(mask, zn, -np.inf), axis=1, initial=-np.inf)
    m = np.maximum(z, neg_max)
    ez = np.exp(z - m)
    en = np.where(mask, np.exp(np.where(mask, zn - m[:, None], 0.0)), 0.0)
    denom = ez + en.sum(axis=1)
    losses = -(z - m) + np.log(denom)
    out = np.asarray(losses.mean() if a else 0.0, dtype=pos.data.dtype)
    p0 = ez / denom
    pn = en / denom[:, None]
    ctx = (p0, pn, tau, a)

    def grad_fn(ctx, g):
        prob0, probn, t, n = ctx
        scale = g / (t * n)
        return ((prob0 - 1.0) * scale, probn * scale)

    return record_op("infonce", (pos, negs), out, ctx, grad_fn)


def logit_distill(student_logits: Tensor, teacher_logits: Tensor) -> Tensor:
    """Soft cross-entropy: mean over rows of -sum_v p_teacher(v) log p_student(v)."""
    if student_logits.data.shape != teacher_logits.data.shape:
        raise ShapeError(
            f"logit shapes disagree: {student_logits.data.shape} vs {teacher_logits.data.shape}"
        )
    if student_logits.data.ndim != 2:
        raise ShapeError("logit distillation expects 2-D [positions, vocab] inputs")
    n = student_logits.data.shape[0]

    def log_softmax(x):
        zz = x - x.max(axis=-1, keepdims=True)
        return zz - np.log(np.exp(zz).sum(axis=-1, keepdims=True))

    log_ps = log_softmax(student_logits.data)
    log_pt = log_softmax(teacher_logits.data)
    pt = np.exp(log_pt)
    loss = -(pt * log_ps).sum(axis=-1).mean()
    ps = np.exp(log_ps)
    ctx = (ps, pt, log_ps, n)

    def grad_fn(ctx, g):
        s, t, lps, rows = ctx
        gs = (s - t) * (g / rows)
        inner = (t * lps).sum(axis=-1, keepdims=True)
        gt = -t * (lps - inner) * (g / rows)
        return gs, gt

    return record_op("soft_cross_entropy", (student_logits, teacher_logits),
                     np.asarray(loss, dtype=student_logits.data.dtype), ctx, grad_fn)


def contrastive_total(l_s2t: Tensor, l_t2s: Tensor) -> Tensor:
    return (l_s2t + l_t2s) * 0.5


def total_loss(l_cont: Tensor, l_dist: Tensor, lam: float) -> Tensor:
    if lam < 0:
        raise ContractError(f"loss trade-off must be nonnegative, got {lam}")
    return l_cont * lam + l_dist


# ---------------------------------------------------------------------------
# memory banks and projection heads


class MemoryBank:
    """EMA store of projected token representations, one row per vocab id."""

    def __init__(self, side: str, vocab_size: int, d_proj: int, momentum: float = 0.5):
        if side not in ("student", "teacher"):
            raise ContractError(f"bank side must be student or teacher, got {side!r}")
        if not 0.0 <= momentum < 1.0:
            raise ContractError(f"momentum must lie in [0, 1), got {momentum}")
        self.side = side
        self.momentum = momentum
        self.entries = np.zeros((vocab_size, d_proj), dtype=np.float32)
        self.initialized = np.zeros(vocab_size, dtype=bool)

    @property
    def vocab_size(self) -> int:
        return self.entries.shape[0]

    def update(self, token_ids: np.ndarray, observations: np.ndarray) -> None:
        """One EMA step per distinct id; first sight of a row copies directly."""
        token_ids = np.asarray(token_ids).reshape(-1)
        if observations.shape != (token_ids.size, self.entries.shape[1]):
            raise ShapeError(
                f"observations {observations.shape} do not match "
                f"{token_ids.size} ids x d_proj {self.entries.shape[1]}"
            )
        if token_ids.size == 0:
            return
        if token_ids.min() < 0 or token_ids.max() >= self.vocab_size:
            raise IndexError(f"token id outside [0, {self.vocab_size})")
        order = np.argsort(token_ids, kind="stable")
        sid = token_ids[order]
        starts = np.flatnonzero(np.r_[True, sid[1:] != sid[:-1]])
        uniq = sid[starts]
        sums = np.add.reduceat(observations[order].astype(np.float64), starts, axis=0)
        counts = np.diff(np.r_[starts, sid.size]).astype(np.float64)
        means = (sums / counts[:, None]).astype(np.float32)
        fresh = ~self.initialized[uniq]
        m = self.momentum
        old = self.entries[uniq]
        self.entries[uniq] = np.where(fresh[:, None], means, m * old + (1.0 - m) * means)
        self.initialized[uniq] = True

    def rows(self, ids: np.ndarray) -> np.ndarray:
        ids = np.asarray(ids)
        if ids.size and not self.initialized[ids].all():
            raise ContractError("requested an uninitialized bank row")
        return self.entries[ids]


def bank_update(bank: MemoryBank, token_ids: np.ndarray, observations: np.ndarray) -> None:
    bank.update(token_ids, observations)


class ProjectionHead:
    """Trainable bias-free linear map d_model -> d_proj."""

    def __init__(self, d_model: int, d_proj: int, seed: int = 0):
        rng = np.random.default_rng(np.random.SeedSequence(seed))
        self.weight = Tensor(rng.normal(0.0, 0.02, size=(d_model, d_proj)).astype(np.float32),
                             requires_grad=True)

    def apply(self, h: Tensor) -> Tensor:
        return ad.matmul(h, self.weight)


# ---------------------------------------------------------------------------
# negative sampling


@dataclass
class NegativeSet:
    """Per-anchor negative vocab ids plus the bank sides that serve them.

    ``ids``/``mask`` are [A, M]; rows are sorted ascending so the summation
    order (and the loss bits) do not depend on sampling order. For each
    direction the reps are the concatenation of the listed banks' rows.
    """

    strategy: str
    ids: np.ndarray
    mask: np.ndarray
    s2t_sides: tuple[str, ...] = ("teacher",)
    t2s_sides: tuple[str, ...] = ("student",)

    def count_available(self) -> np.ndarray:
        return self.mask.sum(axis=1)


def _choose(cands: np.ndarray, anchor_ids: np.ndarray, cand_valid: np.ndarray,
            count: int, rng: np.random.Generator) -> tuple[np.ndarray, np.ndarray]:
    """Sample up to ``count`` candidate ids per anchor, excluding the anchor's id."""
    a, u = anchor_ids.size, cands.size
    if u == 0 or count == 0:
        return np.zeros((a, 0), dtype=np.int64), np.zeros((a, 0), dtype=bool)
    scores = rng.random((a, u))
    invalid = (cands[None, :] == anchor_ids[:, None]) | ~cand_valid[None, :]
    scores = np.where(invalid, np.inf, scores)
    k = min(count, u)
    part = np.argpartition(scores, k - 1, axis=1)[:, :k] if k < u else \
        np.broadcast_to(np.arange(u), (a, u)).copy()
    mask = np.isfinite(np.take_along_axis(scores, part, axis=1))
    ids = cands[part]
    sort_key = np.where(mask, ids, np.iinfo(np.int64).max)
    order = np.argsort(sort_key, axis=1)
    ids = np.take_along_axis(ids, order, axis=1)
    mask = np.take_along_axis(mask, order, axis=1)
    return np.where(mask, ids, 0), mask


def sample_negatives(strategy: str, token_ids: np.ndarray, rng: np.random.Generator,
                     count: int, initialized: np.ndarray) -> NegativeSet:
    """Build per-anchor negative sets for a [batch, n] id matrix.

    ``initialized`` flags which vocab rows both banks can serve. The
    "in-batch" strategy compares whole sequences, so its set is empty here
    and handled by the loss orchestrator.
    """
    if strategy not in STRATEGIES:
        raise ConfigError(f"unknown negative-sampling strategy {strategy!r}")
    if count < 0:
        raise ContractError("negative count must be nonnegative")
    token_ids = np.atleast_2d(token_ids)
    bsz, n = token_ids.shape
    if strategy == "in-batch":
        return NegativeSet(strategy=strategy,
                           ids=np.zeros((bsz, 0), dtype=np.int64),
                           mask=np.zeros((bsz, 0), dtype=bool))
    if strategy == "global":
        cands = np.flatnonzero(initialized)
        ids, mask = _choose(cands, token_ids.reshape(-1), np.ones(cands.size, dtype=bool),
                            count, rng)
        return NegativeSet(strategy=strategy, ids=ids, mask=mask,
                           s2t_sides=("teacher",), t2s_sides=("teacher",))
    # same-sequence strategies
    ids = np.zeros((bsz * n, count), dtype=np.int64)
    mask = np.zeros((bsz * n, count), dtype=bool)
    for b in range(bsz):
        cands = np.unique(token_ids[b])
        got_ids, got_mask = _choose(cands, token_ids[b], initialized[cands], count, rng)
        ids[b * n:(b + 1) * n, : got_ids.shape[1]] = got_ids
        mask[b * n:(b + 1) * n, : got_mask.shape[1]] = got_mask
    sides = {"default": (("teacher",), ("student",)),
             "fp+quan": (("teacher", "student"), ("teacher", "student")),
             "quan-only": (("student",), ("student",))}[strategy]
    return NegativeSet(strategy=strategy, ids=ids, mask=mask,
                       s2t_sides=sides[0], t2s_sides=sides[1])


# ---------------------------------------------------------------------------
# loss orchestration


@dataclass
class LossBreakdown:
    l_s2t: float
    l_t2s: float
    l_cont: float
    l_dist: float
    total: float
    lam: float
    loss: Tensor = field(repr=False, default=None)


def bank_sims_op(qn: Tensor, bank_unit: np.ndarray, ids: np.ndarray) -> Tensor:
    """Cosines against bank rows: out[a, j] = qn[a] . bank_unit[ids[a, j]].

    One [A, rows] product plus a gather; much cheaper than materializing
    [A, M, d] negative representations. The bank side is a constant, so
    gradient flows to ``qn`` only, scattered back through the same product.
    """
    full = qn.data @ bank_unit.T
    out = np.take_along_axis(full, ids, axis=1)
    ctx = (bank_unit, ids, qn.data.dtype)

    def grad_fn(ctx, g):
        bu, idx, dt = ctx
        gfull = np.zeros((g.shape[0], bu.shape[0]), dtype=dt)
        np.add.at(gfull, (np.arange(g.shape[0])[:, None], idx), g)
        return (gfull @ bu,)

    return record_op("bank_sims", (qn,), out, ctx, grad_fn)


def contrastive_one_direction(anchors: Tensor, positives: Tensor,
                              neg_bank: np.ndarray, neg_ids: np.ndarray,
                              neg_mask: Optional[np.ndarray], tau: float) -> Tensor:
    """InfoNCE over cosine similarities for one direction.

    ``anchors``/``positives`` are [A, d] tape tensors; negatives are the
    detached ``neg_bank`` rows selected by ``neg_ids`` [A, M].
    """
    qn = normalize_rows_op(anchors)
    pn = normalize_rows_op(positives)
    pos = rowdot(qn, pn)
    a = anchors.data.shape[0]
    m = neg_ids.shape[1]
    if m:
        norms = np.linalg.norm(neg_bank, axis=1)
        served = neg_mask if neg_mask is not None else np.ones(neg_ids.shape, dtype=bool)
        if np.any((norms[neg_ids] == 0.0) & served):
            raise DegenerateRepresentationError("a served negative has zero norm")
        unit = neg_bank / np.where(norms == 0.0, 1.0, norms)[:, None]
        negs = bank_sims_op(qn, unit.astype(anchors.data.dtype, copy=False), neg_ids)
    else:
        negs = Tensor(np.zeros((a, 0), dtype=anchors.data.dtype))
    return infonce_op(pos, negs, neg_mask, tau)


def smoothed_anchor(bank: MemoryBank, token_ids: np.ndarray, obs: Tensor,
                    mode: str = "smoothed") -> Tensor:
    """Anchor representations per Eq.-style momentum smoothing.

    smoothed: m * bank_row (detached) + (1-m) * current observation, with
    m = 0 for rows the bank has not seen yet; immediate: the observation.
    """
    if mode == "immediate":
        return obs
    if mode != "smoothed":
        raise ConfigError(f"anchor mode must be 'smoothed' or 'immediate', got {mode!r}")
    ids = np.asarray(token_ids).reshape(-1)
    m_eff = np.where(bank.initialized[ids], bank.momentum, 0.0).astype(np.float32)[:, None]
    const = Tensor(bank.entries[ids] * m_eff)
    return ad.add(const, ad.mul(obs, Tensor(1.0 - m_eff)))


@dataclass
class DistillConfig:
    tau: float = 0.1
    momentum: float = 0.5
    lam: float = 0.1
    negatives: int = 32
    strategy: str = "default"
    anchor_mode: str = "smoothed"
    contrast_layer: str = "last"
    d_proj: int = 0  # 0 -> d_model

    def __post_init__(self):
        if self.tau <= 0:
            raise ConfigError("tau must be positive")
        if not 0.0 <= self.momentum < 1.0:
            raise ConfigError("momentum must lie in [0, 1)")
        if self.lam < 0:
            raise ConfigError("lambda must be nonnegative")
        if self.strategy not in STRATEGIES:
            raise ConfigError(f"unknown negative-sampling strategy {self.strategy!r}")
        if self.anchor_mode not in ("smoothed", "immediate"):
            raise ConfigError(f"unknown anchor mode {self.anchor_mode!r}")
        if self.contrast_layer not in ("first", "last"):
            raise ConfigError(f"contrast_layer must be 'first' or 'last', got {self.contrast_layer!r}")


class Distiller:
    """Owns projection heads and banks; computes the full distillation loss."""

    def __init__(self, cfg: DistillConfig, vocab_size: int, d_model: int, seed: int = 0):
        self.cfg = cfg
        d_proj = cfg.d_proj or d_model
        self.proj_s = ProjectionHead(d_model, d_proj, seed=seed)
        self.proj_t = ProjectionHead(d_model, d_proj, seed=seed + 1)
        self.bank_s = MemoryBank("student", vocab_size, d_proj, momentum=cfg.momentum)
        self.bank_t = MemoryBank("teacher", vocab_size, d_proj, momentum=cfg.momentum)

    def params(self) -> dict[str, Tensor]:
        if self.cfg.lam == 0:
            return {}
        return {"proj_s.weight": self.proj_s.weight, "proj_t.weight": self.proj_t.weight}

    def _bank(self, side: str) -> MemoryBank:
        return self.bank_s if side == "student" else self.bank_t

    def _neg_view(self, negset: NegativeSet, sides: tuple[str, ...]):
        """Bank matrix, per-anchor row ids, and validity mask for one direction.

        Multiple sides stack their banks; ids into side j are offset by
        j * vocab_size.
        """
        a = negset.ids.shape[0]
        if negset.ids.shape[1] == 0 or not sides:
            return (np.zeros((0, self.bank_t.entries.shape[1]), dtype=np.float32),
                    np.zeros((a, 0), dtype=np.int64), np.zeros((a, 0), dtype=bool))
        if len(sides) == 1:
            return self._bank(sides[0]).entries, negset.ids, negset.mask
        v = self.bank_t.vocab_size
        mat = np.concatenate([self._bank(s).entries for s in sides], axis=0)
        ids = np.concatenate([negset.ids + j * v for j in range(len(sides))], axis=1)
        mask = np.concatenate([negset.mask] * len(sides), axis=1)
        return mat, ids, mask

    def loss(self, student_hidden: Tensor, teacher_hidden: Tensor,
             student_logits: Tensor, teacher_logits: Tensor,
             token_ids: np.ndarray, rng: np.random.Generator) -> LossBreakdown:
        """Full distillation objective for one batch; updates both banks."""
        token_ids = np.atleast_2d(np.asarray(token_ids))
        bsz, n = token_ids.shape
        v = student_logits.data.shape[-1]
        flat_s = ad.reshape(student_logits, (bsz * n, v))
        flat_t = ad.reshape(teacher_logits, (bsz * n, v))
        l_dist = logit_distill(flat_s, flat_t)

        if self.cfg.lam == 0:
            return LossBreakdown(0.0, 0.0, 0.0, float(l_dist.data), float(l_dist.data),
                                 0.0, loss=l_dist)

        d = student_hidden.data.shape[-1]
        hs = self.proj_s.apply(ad.reshape(student_hidden, (bsz * n, d)))
        ht = self.proj_t.apply(ad.reshape(teacher_hidden, (bsz * n, d)))
        flat_ids = token_ids.reshape(-1)

        if self.cfg.strategy == "in-batch":
            hs_seq = ad.tmean(ad.reshape(hs, (bsz, n, hs.data.shape[-1])), axis=1)
            ht_seq = ad.tmean(ad.reshape(ht, (bsz, n, ht.data.shape[-1])), axis=1)
            l_s2t = self._in_batch_direction(hs_seq, ht_seq)
            l_t2s = self._in_batch_direction(ht_seq, hs_seq)
        else:
            negset = sample_negatives(
                self.cfg.strategy, token_ids, rng, self.cfg.negatives,
                self.bank_s.initialized & self.bank_t.initialized,
            )
            anchors_s = smoothed_anchor(self.bank_s, flat_ids, hs, self.cfg.anchor_mode)
            anchors_t = smoothed_anchor(self.bank_t, flat_ids, ht, self.cfg.anchor_mode)
            bank_t, ids_t, mask_t = self._neg_view(negset, negset.s2t_sides)
            bank_s, ids_s, mask_s = self._neg_view(negset, negset.t2s_sides)
            l_s2t = contrastive_one_direction(anchors_s, ht, bank_t, ids_t, mask_t, self.cfg.tau)
            l_t2s = contrastive_one_direction(anchors_t, hs, bank_s, ids_s, mask_s, self.cfg.tau)

        l_cont = contrastive_total(l_s2t, l_t2s)
        total = total_loss(l_cont, l_dist, self.cfg.lam)
        self.bank_s.update(flat_ids, hs.data)
        self.bank_t.update(flat_ids, ht.data)
        return LossBreakdown(
            l_s2t=float(l_s2t.data), l_t2s=float(l_t2s.data),
            l_cont=float(l_cont.data), l_dist=float(l_dist.data),
            total=float(total.data), lam=self.cfg.lam, loss=total,
        )

    def _in_batch_direction(self, anchors_seq: Tensor, others_seq: Tensor) -> Tensor:
        """Sequence-level InfoNCE; other sequences in the batch are negatives."""
        bsz = anchors_seq.data.shape[0]
        qn = normalize_rows_op(anchors_seq)
        pn = normalize_rows_op(others_seq)
        pos = rowdot(qn, pn)
        sims = ad.matmul(qn, ad.transpose(pn, (1, 0)))
        mask = ~np.eye(bsz, dtype=bool)
        return infonce_op(pos, sims, mask, self.cfg.tau)
