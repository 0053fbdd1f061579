import math

import numpy as np
import pytest
from scipy.stats import skew

from qlmq import autodiff as ad
from qlmq import diagnostics as dg
from qlmq.autodiff import Tensor
from qlmq.data import encode_bytes, make_windows, synth_corpus
from qlmq.errors import ConfigError, ContractError, DegenerateRepresentationError
from qlmq.model import GPT, BitTriple, ModelConfig, count_params, init_student_from_teacher
from qlmq.quantizers import dynamic_alpha

RNG = np.random.default_rng(23)

MC = ModelConfig(vocab_size=64, n_layers=1, d_model=16, n_heads=2, d_ff=32,
                 max_seq_len=16)
GPT2_SMALL = ModelConfig(vocab_size=50257, n_layers=12, d_model=768, n_heads=12,
                         d_ff=3072, max_seq_len=1024)


class _UniformModel:
    """Stub emitting constant logits: the uniform predictor over 256 symbols."""

    def forward(self, tokens, mode=None, calibrate=False):
        b, n = np.asarray(tokens).shape
        z = np.zeros((b, n, 256), dtype=np.float32)
        return Tensor(z), Tensor(z[..., :1])


def _windows(n=8, length=9, vocab=64, seed=0):
    rng = np.random.default_rng(seed)
    return rng.integers(0, vocab, size=(n, length), dtype=np.int64)


class TestPerplexity:
    def test_uniform_predictor_is_vocab_size(self):
        w = np.random.default_rng(0).integers(0, 256, size=(4, 9), dtype=np.int64)
        assert dg.perplexity(_UniformModel(), w) == pytest.approx(256.0, rel=1e-9)

    def test_empty_split_rejected(self):
        with pytest.raises(ContractError):
            dg.perplexity(_UniformModel(), np.zeros((0, 9), dtype=np.int64))

    def test_deterministic_bitwise(self):
        m = GPT(MC, seed=0)
        w = _windows()
        assert dg.perplexity(m, w) == dg.perplexity(m, w)

    def test_matches_cross_entropy_aggregate(self):
        m = GPT(MC, seed=1)
        w = _windows(n=6)
        logits, _ = m.forward(w[:, :-1])
        b, n, v = logits.data.shape
        ce = ad.cross_entropy_logits(ad.reshape(logits, (b * n, v)), w[:, 1:].reshape(-1))
        assert dg.perplexity(m, w, batch_size=6) == pytest.approx(math.exp(ce.item()), rel=1e-5)

    def test_batching_does_not_change_value(self):
        m = GPT(MC, seed=2)
        w = _windows(n=7)
        assert dg.perplexity(m, w, batch_size=2) == pytest.approx(
            dg.perplexity(m, w, batch_size=7), rel=1e-6)


class TestTokenCosineMatrix:
    def test_within_model_unit_diagonal_and_symmetry(self):
        m = GPT(MC, seed=0)
        s = np.arange(8) % MC.vocab_size
        sim = dg.token_cosine_matrix(m, m, s)
        assert sim.mode == "within-model"
        assert np.array_equal(sim.values, sim.values.T)
        np.testing.assert_array_equal(np.diag(sim.values), 1.0)
        assert np.all(sim.values >= -1.0) and np.all(sim.values <= 1.0)

    def test_cross_model_mode(self):
        a, b = GPT(MC, seed=0), GPT(MC, seed=1)
        sim = dg.token_cosine_matrix(a, b, np.arange(4))
        assert sim.mode == "student-vs-teacher"
        assert sim.values.shape == (4, 4)
        assert not np.allclose(np.diag(sim.values), 1.0)

    def test_short_sentence_rejected(self):
        m = GPT(MC, seed=0)
        with pytest.raises(ContractError):
            dg.token_cosine_matrix(m, m, np.array([3]))

    def test_zero_norm_hidden_rejected(self):
        m = GPT(MC, seed=0)
        m.params["ln_f.gain"].data[:] = 0.0  # forces all-zero final hiddens
        with pytest.raises(DegenerateRepresentationError):
            dg.token_cosine_matrix(m, m, np.arange(4))


class TestEmbeddingHomogeneity:
    def _counts(self, vocab, hot=()):
        c = np.ones(vocab, dtype=np.int64)
        for i, h in enumerate(hot):
            c[h] = 100 - i
        return c

    def test_identical_embeddings_collapse(self):
        m = GPT(MC, seed=0)
        m.params["tok_emb"].data[:] = m.params["tok_emb"].data[0]
        stats = dg.embedding_homogeneity(m, 5, self._counts(MC.vocab_size))
        assert stats.mean_pairwise_cosine == pytest.approx(1.0, abs=1e-6)
        assert stats.mean_pairwise_l2 == pytest.approx(0.0, abs=1e-6)

    def test_random_gaussian_near_zero_cosine(self):
        cfg = ModelConfig(vocab_size=256, n_layers=1, d_model=128, n_heads=2,
                          d_ff=32, max_seq_len=4)
        m = GPT(cfg, seed=0)
        stats = dg.embedding_homogeneity(m, 100, self._counts(256))
        assert abs(stats.mean_pairwise_cosine) < 0.05

    def test_rotation_invariance(self):
        m = GPT(MC, seed=3)
        counts = self._counts(MC.vocab_size, hot=(4, 9, 11))
        before = dg.embedding_homogeneity(m, 8, counts)
        q, _ = np.linalg.qr(RNG.normal(size=(MC.d_model, MC.d_model)))
        m.params["tok_emb"].data = (m.params["tok_emb"].data @ q.astype(np.float32))
        after = dg.embedding_homogeneity(m, 8, counts)
        assert after.mean_pairwise_cosine == pytest.approx(before.mean_pairwise_cosine, abs=1e-5)
        assert after.mean_pairwise_l2 == pytest.approx(before.mean_pairwise_l2, rel=1e-5)

    def test_top_k_selection_and_tie_break(self):
        m = GPT(MC, seed=0)
        counts = np.zeros(MC.vocab_size, dtype=np.int64)
        counts[[7, 3]] = 50
        counts[12] = 80
        stats = dg.embedding_homogeneity(m, 3, counts)
        np.testing.assert_array_equal(stats.token_ids, [12, 3, 7])
        assert stats.matrix.shape == (3, MC.d_model)

    def test_contract_errors(self):
        m = GPT(MC, seed=0)
        with pytest.raises(ContractError):
            dg.embedding_homogeneity(m, 5, None)
        with pytest.raises(ContractError):
            dg.embedding_homogeneity(m, MC.vocab_size + 1, self._counts(MC.vocab_size))
        with pytest.raises(ContractError):
            dg.embedding_homogeneity(m, 5, np.ones(3, dtype=np.int64))


class TestWeightHistogram:
    def test_mass_conservation(self):
        m = GPT(MC, seed=0)
        h = dg.weight_histogram(m, "layers.0.w_qkv", bins=32)
        assert h.counts.sum() == m.params["layers.0.w_qkv"].data.size
        assert h.clip_values is None  # unquantized model has no overlay

    def test_dynamic_overlay_is_scaled_mean_abs(self):
        cfg = ModelConfig(vocab_size=64, n_layers=1, d_model=128, n_heads=4,
                          d_ff=256, max_seq_len=16)
        teacher = GPT(cfg, seed=0)
        student = init_student_from_teacher(teacher, BitTriple.parse("2-2-8"), "dynamic")
        q = student.quantizers["layers.0.w_qkv"]
        q.gamma.data = np.asarray(1.7, dtype=np.float32)
        w = student.params["layers.0.w_qkv"].data
        h = dg.weight_histogram(student, "layers.0.w_qkv")
        expect = dynamic_alpha(w, 1.7)
        np.testing.assert_allclose(np.sort(h.clip_values), [-expect, expect], rtol=1e-7)

    def test_pact_overlay_reports_both_magnitudes(self):
        teacher = GPT(MC, seed=0)
        student = init_student_from_teacher(teacher, BitTriple.parse("2-2-8"), "pact")
        h = dg.weight_histogram(student, "layers.0.w_o")
        a = 3.0 * np.mean(np.abs(student.params["layers.0.w_o"].data))
        np.testing.assert_allclose(np.sort(h.clip_values), [-a, a], rtol=1e-6)

    def test_init_weights_near_symmetric(self):
        cfg = ModelConfig(vocab_size=64, n_layers=1, d_model=128, n_heads=4,
                          d_ff=512, max_seq_len=16)
        m = GPT(cfg, seed=0)
        s = skew(m.params["layers.0.w_f"].data.reshape(-1))
        assert abs(s) < 0.1

    def test_unknown_module(self):
        with pytest.raises(KeyError):
            dg.weight_histogram(GPT(MC, seed=0), "layers.9.w_zz")


class TestScalingDump:
    def test_all_ones_at_init(self):
        teacher = GPT(MC, seed=0)
        student = init_student_from_teacher(teacher, BitTriple.parse("2-2-8"), "dynamic")
        rows = dict(dg.scaling_dump(student))
        assert rows["layers.0.w_qkv"] == 1.0
        assert rows["tok_emb.min"] == rows["tok_emb.median"] == rows["tok_emb.max"] == 1.0
        # 4 per-tensor modules for 1 layer plus 3 embedding summary rows
        assert len(rows) == 4 * MC.n_layers + 3

    def test_reflects_updates_and_is_deterministic(self):
        teacher = GPT(MC, seed=0)
        student = init_student_from_teacher(teacher, BitTriple.parse("2-2-8"), "dynamic")
        student.quantizers["layers.0.w_f"].gamma.data = np.asarray(0.25, dtype=np.float32)
        assert dict(dg.scaling_dump(student))["layers.0.w_f"] == 0.25
        assert dg.scaling_dump(student) == dg.scaling_dump(student)

    def test_requires_dynamic_scheme(self):
        teacher = GPT(MC, seed=0)
        student = init_student_from_teacher(teacher, BitTriple.parse("2-2-8"), "lsq")
        with pytest.raises(ConfigError):
            dg.scaling_dump(student)


class TestModelSize:
    def test_full_precision_reference(self):
        rep = dg.model_size(GPT2_SMALL, BitTriple.parse("fp"))
        assert rep.mb_full_precision == pytest.approx(474.9, rel=0.02)
        assert rep.compression_ratio == 1.0
        assert rep.total_params == count_params(GPT2_SMALL)

    @pytest.mark.parametrize("triple,expect", [("8-8-8", 121.4), ("4-4-8", 62.4),
                                               ("2-2-8", 33.0)])
    def test_quantized_reference_points(self, triple, expect):
        rep = dg.model_size(GPT2_SMALL, BitTriple.parse(triple))
        assert rep.mb_quantized == pytest.approx(expect, rel=0.05)

    def test_headline_compression_ratio(self):
        rep = dg.model_size(GPT2_SMALL, BitTriple.parse("2-2-8"))
        assert rep.compression_ratio == pytest.approx(14.4, rel=0.05)

    def test_monotone_in_bit_widths(self):
        sizes = [dg.model_size(MC, BitTriple.parse(t)).bytes_quantized
                 for t in ("2-2-8", "4-2-8", "8-2-8")]
        assert sizes[0] < sizes[1] < sizes[2]
        sizes_e = [dg.model_size(MC, BitTriple.parse(t)).bytes_quantized
                   for t in ("2-2-8", "2-4-8", "2-8-8")]
        assert sizes_e[0] < sizes_e[1] < sizes_e[2]

    def test_quantized_below_full_whenever_bits_small(self):
        for t in ("2-2-8", "8-8-8", "2-8-2", "8-2-8"):
            rep = dg.model_size(MC, BitTriple.parse(t))
            assert rep.bytes_quantized < rep.bytes_full_precision

    def test_tiny_config_hand_arithmetic(self):
        cfg = ModelConfig(vocab_size=8, n_layers=1, d_model=4, n_heads=1, d_ff=8,
                          max_seq_len=4)
        # params: emb 32, pos 16, ln1 8, w_qkv 48, w_o 16, ln2 8, w_f 32,
        # w_g 32, ln_f 8 -> 200 total, 800 bytes full precision
        rep = dg.model_size(cfg, BitTriple.parse("2-2-8"))
        assert rep.total_params == 200
        assert rep.bytes_full_precision == 800
        # emb: 8 code bytes + 8 rows * 4; weights: 12+4+8+8 code bytes + 4*4;
        # unquantized 40 params * 4
        assert rep.bytes_quantized == (8 + 32) + (32 + 16) + 160

    def test_pact_doubles_scalar_cost(self):
        cfg = ModelConfig(vocab_size=8, n_layers=1, d_model=4, n_heads=1, d_ff=8,
                          max_seq_len=4)
        a = dg.model_size(cfg, BitTriple.parse("2-2-8"), scheme="dynamic")
        b = dg.model_size(cfg, BitTriple.parse("2-2-8"), scheme="pact")
        assert b.bytes_quantized - a.bytes_quantized == 4 * (8 + 4)  # rows + tensors
