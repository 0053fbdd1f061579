"""Perplexity evaluation and model-analysis instruments.

Everything here is a pure read of a frozen model: language-model perplexity
over fixed windows, token-level cosine-similarity matrices, embedding
homogeneity statistics, weight histograms with clipping overlays, per-module
scaling-factor dumps, and the storage-size calculator for quantized
checkpoints.
"""

from dataclasses import dataclass
from typing import Optional

import numpy as np
from scipy.special import logsumexp

from .errors import ConfigError, ContractError, DegenerateRepresentationError
from .model import (
    QUANTIZED_WEIGHTS,
    BitTriple,
    ModelConfig,
    count_params,
    param_shapes,
)
from .quantizers import LevelSet

MB = float(1 << 20)  # size reporting uses 1 MB = 2**20 bytes


# ---------------------------------------------------------------------------
# perplexity


def nll_sum(logits: np.ndarray, targets: np.ndarray) -> float:
    """Summed negative log-likelihood, accumulated in float64."""
    z = np.asarray(logits, dtype=np.float64)
    t = np.asarray(targets)
    lse = logsumexp(z, axis=-1)
    picked = np.take_along_axis(z, t[..., None], axis=-1)[..., 0]
    return float((lse - picked).sum())


def perplexity(model, windows: np.ndarray, batch_size: int = 64) -> float:
    """exp(mean token NLL) of ``model`` over non-overlapping windows.

    ``windows`` is an int array [N, n+1]; position j is predicted from the
    prefix ending at j. Evaluation never calibrates activation ranges, so
    repeated calls are bitwise identical.
    """
    windows = np.asarray(windows)
    if windows.ndim != 2 or windows.shape[0] == 0:
        raise ContractError("evaluation split must be a non-empty [N, n+1] array")
    if batch_size < 1:
        raise ContractError("batch_size must be at least 1")
    total = 0.0
    count = 0
    for lo in range(0, windows.shape[0], batch_size):
        w = windows[lo:lo + batch_size]
        logits, _ = model.forward(w[:, :-1])
        total += nll_sum(logits.data, w[:, 1:])
        count += w[:, 1:].size
    return float(np.exp(total / count))


# ---------------------------------------------------------------------------
# similarity instruments


@dataclass
class SimilarityMatrix:
    values: np.ndarray  # [n, n], entries in [-1, 1]
    mode: str  # "within-model" | "student-vs-teacher"


def _normalized_hidden(model, sentence: np.ndarray) -> np.ndarray:
    _, h = model.forward(sentence)
    h = h.data.astype(np.float64)
    norms = np.linalg.norm(h, axis=-1, keepdims=True)
    if np.any(norms == 0.0):
        raise DegenerateRepresentationError("a token hidden state has zero norm")
    return h / norms


def token_cosine_matrix(model_a, model_b, sentence: np.ndarray) -> SimilarityMatrix:
    """Pairwise cosines between last-layer token representations.

    Entry (i, j) compares model_a's hidden state at position i with
    model_b's at position j; passing the same model twice gives the
    within-model map, which is exactly symmetric with unit diagonal.
    """
    sentence = np.asarray(sentence)
    if sentence.ndim != 1 or sentence.shape[0] < 2:
        raise ContractError("sentence must be a 1-D token array of length >= 2")
    within = model_a is model_b
    ha = _normalized_hidden(model_a, sentence)
    hb = ha if within else _normalized_hidden(model_b, sentence)
    values = np.clip(ha @ hb.T, -1.0, 1.0)
    if within:
        np.fill_diagonal(values, 1.0)  # self-cosine is 1 by definition
    return SimilarityMatrix(values=values, mode="within-model" if within else "student-vs-teacher")


@dataclass
class HomogeneityStats:
    mean_pairwise_cosine: float
    mean_pairwise_l2: float
    token_ids: np.ndarray  # [top_k] ids, most frequent first
    matrix: np.ndarray  # [top_k, d] raw embedding rows for external plotting


def embedding_homogeneity(model, top_k: int, token_counts: Optional[np.ndarray]) -> HomogeneityStats:
    """Pairwise cosine/l2 statistics over the most frequent token embeddings.

    Measured on the latent full-precision embedding table; the quantized table
    can collapse entire rows to zero, where cosines are undefined. Ties in
    frequency break toward the smaller token id.
    """
    if token_counts is None:
        raise ContractError("a token frequency table is required")
    emb = model.params["tok_emb"].data
    vocab = emb.shape[0]
    counts = np.asarray(token_counts)
    if counts.shape != (vocab,):
        raise ContractError(f"frequency table must have shape ({vocab},), got {counts.shape}")
    if not 2 <= top_k <= vocab:
        raise ContractError(f"top_k must lie in [2, {vocab}], got {top_k}")
    order = np.lexsort((np.arange(vocab), -counts))
    ids = order[:top_k]
    rows = emb[ids].astype(np.float64)
    norms = np.linalg.norm(rows, axis=1, keepdims=True)
    if np.any(norms == 0.0):
        raise DegenerateRepresentationError("an embedding row among the top_k has zero norm")
    unit = rows / norms
    cos = unit @ unit.T
    k = top_k
    offdiag = k * (k - 1)
    mean_cos = float((cos.sum() - np.trace(cos)) / offdiag)
    sq = (rows * rows).sum(axis=1)
    d2 = np.maximum(sq[:, None] + sq[None, :] - 2.0 * (rows @ rows.T), 0.0)
    mean_l2 = float(np.sqrt(d2).sum() / offdiag)
    return HomogeneityStats(mean_cos, mean_l2, token_ids=ids, matrix=rows.astype(np.float32))


# ---------------------------------------------------------------------------
# weight histograms and scaling dumps


@dataclass
class WeightHistogram:
    name: str
    counts: np.ndarray
    edges: np.ndarray
    clip_values: Optional[np.ndarray]  # boundary positions, None when unquantized


def weight_histogram(model, module_name: str, bins: int = 64) -> WeightHistogram:
    """Histogram of a module's latent weights plus its clipping boundaries."""
    if module_name not in model.params:
        raise KeyError(f"unknown module {module_name!r}")
    w = model.params[module_name].data
    counts, edges = np.histogram(w, bins=bins)
    q = model.quantizers.get(module_name)
    clip = None
    if q is not None:
        eff = q.effective_alpha(w)
        if isinstance(eff, tuple):  # (negative, positive) magnitudes
            neg, pos = (np.asarray(e, dtype=np.float64).ravel() for e in eff)
            clip = np.concatenate([-neg, pos])
        else:
            a = np.asarray(eff, dtype=np.float64).ravel()
            clip = np.concatenate([-a, a])
    return WeightHistogram(name=module_name, counts=counts, edges=edges, clip_values=clip)


def scaling_dump(model) -> list[tuple[str, float]]:
    """Current scaling factor gamma per quantized module.

    Per-row modules (the embedding table) are summarized by min/median/max
    rows. Row order follows the model's stable parameter order.
    """
    if model.scheme != "dynamic":
        raise ConfigError("scaling dump requires the dynamic-scaling scheme")
    rows: list[tuple[str, float]] = []
    for pname in param_shapes(model.config):
        q = model.quantizers.get(pname)
        if q is None:
            continue
        g = q.gamma.data
        if q.per_row:
            rows.append((f"{pname}.min", float(g.min())))
            rows.append((f"{pname}.median", float(np.median(g))))
            rows.append((f"{pname}.max", float(g.max())))
        else:
            rows.append((pname, float(g)))
    return rows


# ---------------------------------------------------------------------------
# size accounting


@dataclass
class SizeReport:
    total_params: int
    bytes_full_precision: int
    bytes_quantized: int
    mb_full_precision: float
    mb_quantized: float
    compression_ratio: float


def _quantized_tensor_bytes(count: int, bits: int, scalar_rows: int, scheme: str) -> int:
    scalars = 2 if scheme == "pact" else 1  # two clip magnitudes vs one
    return -(-count * bits // 8) + 4 * scalar_rows * scalars


def model_size(config: ModelConfig, bits: BitTriple, scheme: str = "dynamic") -> SizeReport:
    """Storage accounting: packed codes plus 32-bit scales and fp leftovers.

    Activation bit-width never contributes (activations are runtime values);
    per-tensor weights carry one 32-bit scale each, the per-row embedding one
    per row. LevelSet.for_bits validates the bit-widths.
    """
    if isinstance(bits, str):
        bits = BitTriple.parse(bits)
    shapes = param_shapes(config)
    total = count_params(config)
    full_bytes = 4 * total
    quantized: dict[str, tuple[int, int]] = {}  # name -> (bits, scalar rows)
    if bits.e != "fp":
        LevelSet.for_bits(bits.e)
        quantized["tok_emb"] = (bits.e, config.vocab_size)
    if bits.w != "fp":
        LevelSet.for_bits(bits.w)
        for i in range(config.n_layers):
            for wname in QUANTIZED_WEIGHTS:
                quantized[f"layers.{i}.{wname}"] = (bits.w, 1)
        if not config.tie_embeddings:
            quantized["head_w"] = (bits.w, 1)
    q_bytes = 0
    for name, shape in shapes.items():
        count = int(np.prod(shape))
        if name in quantized:
            b, scalar_rows = quantized[name]
            q_bytes += _quantized_tensor_bytes(count, b, scalar_rows, scheme)
        else:
            q_bytes += 4 * count
    return SizeReport(
        total_params=total,
        bytes_full_precision=full_bytes,
        bytes_quantized=q_bytes,
        mb_full_precision=full_bytes / MB,
        mb_quantized=q_bytes / MB,
        compression_ratio=full_bytes / q_bytes,
    )
