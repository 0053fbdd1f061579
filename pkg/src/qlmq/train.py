"""Two-phase training: a full-precision teacher, then a quantized student
distilled from it with the combined contrastive + logit objective.

The harness is deterministic end to end: batch order, negative sampling, and
parameter init all derive from the run seed, and RunRecord.payload() excludes
wall-clock timing so two same-seed runs compare bitwise equal.
"""

import logging
import time
from dataclasses import dataclass, field
from typing import Optional, Union

import numpy as np

from . import autodiff as ad
from .autodiff import Tape, Tensor
from .data import Batcher, make_windows, split_windows
from .diagnostics import perplexity, scaling_dump
from .distill import DistillConfig, Distiller
from .errors import (
    AbortedRunError,
    AbortedStepError,
    ConfigError,
    ContractError,
)
from .model import GPT, BitTriple, ModelConfig, init_student_from_teacher

log = logging.getLogger(__name__)

CLIP_FLOOR = 1e-4  # positivity floor for clipping parameters
DIVERGENCE_FACTOR = 10.0
DIVERGENCE_PATIENCE = 3  # consecutive evals past the factor before flagging


def lr_at(step: int, total_steps: int, lr0: float) -> float:
    """Linear decay to zero: lr0 * (1 - step / total_steps)."""
    if total_steps < 1:
        raise ContractError("total_steps must be at least 1")
    if not 0 <= step <= total_steps:
        raise ContractError(f"step {step} outside [0, {total_steps}]")
    return lr0 * (1.0 - step / total_steps)


# ---------------------------------------------------------------------------
# optimizer


@dataclass
class ParamGroup:
    name: str
    params: dict[str, Tensor]
    lr0: float
    weight_decay: float = 0.0  # applied to ndim >= 2 tensors only


class AdamW:
    """Adam with decoupled weight decay and per-group linearly decayed rates.

    Decay never touches gains, biases, or clipping scalars (anything below
    2-D); clipping parameters live in their own group so they can run at the
    faster rate.
    """

    def __init__(self, groups: list[ParamGroup], total_steps: int,
                 beta1: float = 0.9, beta2: float = 0.999, eps: float = 1e-8,
                 grad_clip_norm: Optional[float] = None):
        names = [g.name for g in groups]
        if len(set(names)) != len(names):
            raise ConfigError("optimizer group names must be unique")
        seen: set[int] = set()
        for g in groups:
            for t in g.params.values():
                if id(t) in seen:
                    raise ConfigError(f"a parameter appears in two groups (group {g.name!r})")
                seen.add(id(t))
        self.groups = groups
        self.total_steps = total_steps
        self.beta1, self.beta2, self.eps = beta1, beta2, eps
        self.grad_clip_norm = grad_clip_norm
        self.t = 0
        self._m: dict[tuple[str, str], np.ndarray] = {}
        self._v: dict[tuple[str, str], np.ndarray] = {}

    def zero_grad(self) -> None:
        for g in self.groups:
            for t in g.params.values():
                t.grad = None

    def _clip_grads(self) -> None:
        if self.grad_clip_norm is None:
            return
        sq = 0.0
        grads = []
        for g in self.groups:
            for t in g.params.values():
                if t.grad is not None:
                    sq += float((t.grad.astype(np.float64) ** 2).sum())
                    grads.append(t)
        norm = np.sqrt(sq)
        if norm > self.grad_clip_norm:
            scale = np.float32(self.grad_clip_norm / (norm + 1e-12))
            for t in grads:
                t.grad = t.grad * scale

    def step(self, step_index: int) -> None:
        """One update with lr_at(step_index) per group; skips gradless params."""
        self._clip_grads()
        self.t += 1
        bc1 = 1.0 - self.beta1 ** self.t
        bc2 = 1.0 - self.beta2 ** self.t
        for g in self.groups:
            lr = np.float32(lr_at(step_index, self.total_steps, g.lr0))
            for name, p in g.params.items():
                if p.grad is None:
                    continue
                grad = p.grad
                key = (g.name, name)
                if key not in self._m:
                    self._m[key] = np.zeros_like(p.data)
                    self._v[key] = np.zeros_like(p.data)
                m = self._m[key]
                v = self._v[key]
                m *= self.beta1
                m += (1.0 - self.beta1) * grad
                v *= self.beta2
                v += (1.0 - self.beta2) * grad * grad
                update = (m / bc1) / (np.sqrt(v / bc2) + self.eps)
                if g.weight_decay and p.data.ndim >= 2:
                    update = update + g.weight_decay * p.data
                p.data -= lr * update


# ---------------------------------------------------------------------------
# run configuration and records


@dataclass
class TrainConfig:
    lr_backbone: float = 5e-4
    lr_clip: float = 1e-3
    batch_size: int = 16
    epochs: int = 3
    seed: int = 0
    weight_decay: float = 0.01
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    grad_clip_norm: Optional[float] = None
    val_frac: float = 0.1
    eval_batch_size: int = 64

    def __post_init__(self):
        if self.lr_backbone <= 0 or self.lr_clip <= 0:
            raise ConfigError("learning rates must be positive")
        if self.batch_size < 1:
            raise ConfigError("batch_size must be at least 1")
        if self.epochs < 1:
            raise ConfigError("epochs must be at least 1")
        if not 0.0 < self.val_frac < 1.0:
            raise ConfigError("val_frac must lie in (0, 1)")


@dataclass
class StepRecord:
    step: int
    epoch: int
    loss: float
    l_s2t: float
    l_t2s: float
    l_cont: float
    l_dist: float
    lr_backbone: float
    lr_clip: float
    clip_mean: Optional[float]  # digest of clipping parameters, None when absent
    clip_std: Optional[float]
    sec: float  # wall clock; excluded from the deterministic payload


@dataclass
class RunRecord:
    steps: list[StepRecord] = field(default_factory=list)
    val_ppl: list[float] = field(default_factory=list)
    teacher_val_ppl: Optional[float] = None
    diverged: bool = False
    clip_clamps: int = 0
    # per-epoch (epoch, scaling_dump rows) snapshots; dynamic scheme only
    gamma_snapshots: list = field(default_factory=list)

    def add(self, rec: StepRecord) -> None:
        if self.steps and rec.step <= self.steps[-1].step:
            raise ContractError("step indices must be strictly increasing")
        for v in (rec.loss, rec.l_s2t, rec.l_t2s, rec.l_cont, rec.l_dist):
            if not np.isfinite(v):
                raise ContractError(f"non-finite scalar in step record {rec.step}")
        self.steps.append(rec)

    def payload(self) -> dict:
        """Deterministic summary; everything except wall-clock timing."""
        return {
            "steps": [
                (s.step, s.epoch, s.loss, s.l_s2t, s.l_t2s, s.l_cont, s.l_dist,
                 s.lr_backbone, s.lr_clip, s.clip_mean, s.clip_std)
                for s in self.steps
            ],
            "val_ppl": list(self.val_ppl),
            "teacher_val_ppl": self.teacher_val_ppl,
            "diverged": self.diverged,
            "clip_clamps": self.clip_clamps,
            "gamma_snapshots": [(e, list(rows)) for e, rows in self.gamma_snapshots],
        }

    def sec_per_iter(self) -> float:
        if not self.steps:
            raise ContractError("no steps recorded")
        return float(np.mean([s.sec for s in self.steps]))


# ---------------------------------------------------------------------------
# shared loop pieces


def _lm_loss(logits: Tensor, targets: np.ndarray) -> Tensor:
    b, n, v = logits.data.shape
    flat = ad.reshape(logits, (b * n, v))
    return ad.cross_entropy_logits(flat, targets.reshape(-1))


def _split_corpus(ids: np.ndarray, config: ModelConfig, tc: TrainConfig):
    windows = make_windows(ids, config.max_seq_len)
    return split_windows(windows, tc.val_frac, tc.seed)


def _clip_digest(model: GPT) -> tuple[Optional[float], Optional[float]]:
    vals = [t.data.reshape(-1) for q in model.quantizers.values() for t in q.clip_params()]
    if not vals:
        return None, None
    flat = np.concatenate(vals).astype(np.float64)
    return float(flat.mean()), float(flat.std())


def _clamp_clip_floor(model: GPT) -> int:
    """Project clipping parameters back above the positivity floor."""
    clamped = 0
    for q in model.quantizers.values():
        for t in q.clip_params():
            viol = t.data < CLIP_FLOOR
            n = int(np.count_nonzero(viol))
            if n:
                t.data[...] = np.maximum(t.data, np.float32(CLIP_FLOOR))
                clamped += n
                log.warning("clip parameter on %s fell below %g; clamped %d value(s)",
                            q.name, CLIP_FLOOR, n)
    return clamped


# ---------------------------------------------------------------------------
# phase 1: teacher


def train_teacher(ids: np.ndarray, model_config: ModelConfig,
                  train_config: TrainConfig) -> tuple[GPT, RunRecord]:
    """Train a full-precision model from scratch with the LM loss."""
    tc = train_config
    train_w, val_w = _split_corpus(ids, model_config, tc)
    model = GPT(model_config, seed=tc.seed)
    batcher = Batcher(train_w, tc.batch_size, seed=tc.seed)
    total = batcher.batches_per_epoch * tc.epochs
    if total < 1:
        raise ContractError("corpus yields no full training batch")
    opt = AdamW(
        [ParamGroup("backbone", model.backbone_params(), tc.lr_backbone, tc.weight_decay)],
        total, tc.beta1, tc.beta2, tc.eps, tc.grad_clip_norm,
    )
    record = RunRecord()
    gstep = 0
    for epoch in range(tc.epochs):
        for batch in batcher.epoch(epoch):
            t0 = time.perf_counter()
            opt.zero_grad()
            try:
                with Tape() as tape:
                    logits, _ = model.forward(batch.inputs)
                    loss = _lm_loss(logits, batch.targets)
                    tape.backward(loss)
            except AbortedStepError as e:
                raise AbortedRunError(gstep, f"teacher diverged at step {gstep}: {e}") from e
            opt.step(gstep)
            record.add(StepRecord(
                step=gstep, epoch=epoch, loss=float(loss.data), l_s2t=0.0,
                l_t2s=0.0, l_cont=0.0,
                l_dist=0.0, lr_backbone=lr_at(gstep, total, tc.lr_backbone),
                lr_clip=0.0, clip_mean=None, clip_std=None,
                sec=time.perf_counter() - t0,
            ))
            gstep += 1
        record.val_ppl.append(perplexity(model, val_w, tc.eval_batch_size))
    return model, record


# ---------------------------------------------------------------------------
# phase 2: quantized student


def student_param_groups(student: GPT, distiller: Distiller,
                         tc: TrainConfig) -> list[ParamGroup]:
    """Backbone (model weights + projection heads) at lr_backbone; clipping
    parameters (gamma / alphas / step sizes) in their own faster group."""
    backbone = dict(student.backbone_params())
    for name, t in distiller.params().items():
        backbone[f"distill.{name}"] = t
    return [ParamGroup("backbone", backbone, tc.lr_backbone, tc.weight_decay),
            ParamGroup("clip", student.clip_params(), tc.lr_clip, 0.0)]


def train_student(teacher: GPT, ids: np.ndarray, bits: Union[BitTriple, str],
                  scheme: str, distill_config: DistillConfig,
                  train_config: TrainConfig) -> tuple[GPT, Distiller, RunRecord]:
    """Quantization-aware distillation of ``teacher`` into a fresh student.

    Every ablation arm runs through this one loop: lam=0 gives the
    logit-distillation-only baseline, scheme="pact"/"lsq"/"laq"/"fixed" swap
    the quantizer while keeping the objective, and scheme="pact" with the full
    loss is the PACT-gradient ablation. The teacher is frozen; its forward
    records nothing on the tape.
    """
    if isinstance(bits, str):
        bits = BitTriple.parse(bits)
    tc = train_config
    cfg = teacher.config
    train_w, val_w = _split_corpus(ids, cfg, tc)
    student = init_student_from_teacher(teacher, bits, scheme)
    distiller = Distiller(distill_config, vocab_size=cfg.vocab_size,
                          d_model=cfg.d_model, seed=tc.seed)
    batcher = Batcher(train_w, tc.batch_size, seed=tc.seed)
    total = batcher.batches_per_epoch * tc.epochs
    if total < 1:
        raise ContractError("corpus yields no full training batch")
    opt = AdamW(student_param_groups(student, distiller, tc), total,
                tc.beta1, tc.beta2, tc.eps, tc.grad_clip_norm)
    neg_rng = np.random.default_rng(np.random.SeedSequence((tc.seed, 0xD157)))
    record = RunRecord()
    record.teacher_val_ppl = perplexity(teacher, val_w, tc.eval_batch_size)
    over = 0
    gstep = 0
    for epoch in range(tc.epochs):
        for batch in batcher.epoch(epoch):
            t0 = time.perf_counter()
            opt.zero_grad()
            try:
                with Tape() as tape:
                    t_logits, t_hidden = teacher.forward(
                        batch.inputs, mode="teacher",
                        contrast_layer=distill_config.contrast_layer)
                    s_logits, s_hidden = student.forward(
                        batch.inputs, calibrate=True,
                        contrast_layer=distill_config.contrast_layer)
                    lb = distiller.loss(s_hidden, t_hidden, s_logits, t_logits,
                                        batch.inputs, neg_rng)
                    tape.backward(lb.loss)
            except AbortedStepError as e:
                raise AbortedRunError(gstep, f"student diverged at step {gstep}: {e}") from e
            opt.step(gstep)
            record.clip_clamps += _clamp_clip_floor(student)
            if scheme == "laq":
                student.refit_quantizers()
            mean, std = _clip_digest(student)
            record.add(StepRecord(
                step=gstep, epoch=epoch, loss=lb.total, l_s2t=lb.l_s2t,
                l_t2s=lb.l_t2s, l_cont=lb.l_cont,
                l_dist=lb.l_dist, lr_backbone=lr_at(gstep, total, tc.lr_backbone),
                lr_clip=lr_at(gstep, total, tc.lr_clip), clip_mean=mean,
                clip_std=std, sec=time.perf_counter() - t0,
            ))
            gstep += 1
        val = perplexity(student, val_w, tc.eval_batch_size)
        record.val_ppl.append(val)
        if scheme == "dynamic":
            record.gamma_snapshots.append((epoch, scaling_dump(student)))
        if val > DIVERGENCE_FACTOR * record.teacher_val_ppl:
            over += 1
            if over >= DIVERGENCE_PATIENCE and not record.diverged:
                record.diverged = True
                log.warning("validation perplexity above %gx the teacher for %d "
                            "consecutive evals; flagged as diverged, continuing",
                            DIVERGENCE_FACTOR, DIVERGENCE_PATIENCE)
        else:
            over = 0
    return student, distiller, record
