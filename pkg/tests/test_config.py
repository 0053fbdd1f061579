import json

import pytest

from qlmq import config as cf
from qlmq.errors import ConfigError


class TestParse:
    def test_empty_object_gives_documented_defaults(self):
        rc = cf.parse_config("{}")
        assert rc.model["d_model"] == 128
        assert rc.quant == {"w_bits": "fp", "e_bits": "fp", "a_bits": "fp",
                            "scheme": "dynamic"}
        assert rc.distill["lambda"] == 0.1
        assert rc.distill["anchor"] == "bank"
        assert rc.train["lr_backbone"] == 5e-4
        assert rc.data["vocab"] == "byte"

    def test_partial_sections_merge_over_defaults(self):
        rc = cf.parse_config({"train": {"epochs": 7}})
        assert rc.train["epochs"] == 7
        assert rc.train["batch_size"] == 16

    def test_unknown_section_rejected(self):
        with pytest.raises(ConfigError, match="unknown config section"):
            cf.parse_config({"optimizer": {}})

    def test_unknown_key_rejected_with_dotted_path(self):
        with pytest.raises(ConfigError, match=r"distill\.lambda2"):
            cf.parse_config({"distill": {"lambda2": 0.5}})

    def test_bad_json_reports_position(self):
        with pytest.raises(ConfigError, match=r"line 1"):
            cf.parse_config('{"model": }')

    def test_type_errors_name_the_field(self):
        with pytest.raises(ConfigError, match=r"train\.epochs"):
            cf.parse_config({"train": {"epochs": "three"}})
        with pytest.raises(ConfigError, match=r"model\.tie_embeddings"):
            cf.parse_config({"model": {"tie_embeddings": 1}})
        # bool is not an acceptable integer
        with pytest.raises(ConfigError, match=r"train\.seed"):
            cf.parse_config({"train": {"seed": True}})

    def test_bits_accept_fp_or_int(self):
        rc = cf.parse_config({"quant": {"w_bits": 2, "a_bits": "fp"}})
        assert rc.quant["w_bits"] == 2 and rc.quant["a_bits"] == "fp"
        with pytest.raises(ConfigError, match=r"quant\.w_bits"):
            cf.parse_config({"quant": {"w_bits": "two"}})
        with pytest.raises(ConfigError, match="bits"):
            cf.parse_config({"quant": {"w_bits": 1}})

    def test_unknown_scheme_names_valid_options(self):
        with pytest.raises(ConfigError, match="dynamic, pact, lsq, laq, fixed"):
            cf.parse_config({"quant": {"scheme": "ternary"}})

    def test_semantic_validation_delegates(self):
        with pytest.raises(ConfigError, match="divisible"):
            cf.parse_config({"model": {"d_model": 100, "n_heads": 3}})
        with pytest.raises(ConfigError, match="strategy"):
            cf.parse_config({"distill": {"strategy": "hardest"}})
        with pytest.raises(ConfigError, match="anchor"):
            cf.parse_config({"distill": {"anchor": "ema"}})
        with pytest.raises(ConfigError, match="vocab"):
            cf.parse_config({"data": {"vocab": "bpe"}})


class TestViews:
    def test_anchor_surface_maps_to_anchor_mode(self):
        assert cf.parse_config({}).distill_config().anchor_mode == "smoothed"
        rc = cf.parse_config({"distill": {"anchor": "immediate"}})
        assert rc.distill_config().anchor_mode == "immediate"

    def test_lambda_key_maps_to_lam(self):
        rc = cf.parse_config({"distill": {"lambda": 0.0}})
        assert rc.distill_config().lam == 0.0

    def test_val_frac_flows_from_data_section(self):
        rc = cf.parse_config({"data": {"val_frac": 0.25}})
        assert rc.train_config().val_frac == 0.25

    def test_bit_triple_view(self):
        rc = cf.parse_config({"quant": {"w_bits": 2, "e_bits": 4, "a_bits": 8}})
        assert str(rc.bit_triple()) == "2-4-8"


class TestCanonicalization:
    def test_serialize_parse_is_fixed_point(self):
        rc = cf.parse_config({"train": {"epochs": 5}, "quant": {"w_bits": 2}})
        once = cf.serialize_config(rc)
        twice = cf.serialize_config(cf.parse_config(once))
        assert once == twice

    def test_canonical_order_is_schema_order(self):
        text = cf.serialize_config(cf.default_config())
        loaded = json.loads(text)
        assert list(loaded) == ["model", "quant", "distill", "train", "data"]
        assert list(loaded["quant"]) == ["w_bits", "e_bits", "a_bits", "scheme"]

    def test_key_order_in_input_is_irrelevant(self):
        a = cf.parse_config('{"train": {"epochs": 2, "seed": 9}}')
        b = cf.parse_config('{"train": {"seed": 9, "epochs": 2}}')
        assert cf.serialize_config(a) == cf.serialize_config(b)


class TestOverrides:
    def test_override_beats_config_value(self):
        rc = cf.parse_config({"distill": {"lambda": 0.1}})
        rc = cf.apply_overrides(rc, ["distill.lambda=0"])
        assert rc.distill["lambda"] == 0.0

    def test_bare_strings_pass_through(self):
        rc = cf.apply_overrides(cf.default_config(), ["distill.strategy=fp+quan"])
        assert rc.distill["strategy"] == "fp+quan"

    def test_json_values_parse(self):
        rc = cf.apply_overrides(cf.default_config(), [
            "model.tie_embeddings=false", "train.grad_clip_norm=null",
            "quant.w_bits=2", 'data.vocab="word"'])
        assert rc.model["tie_embeddings"] is False
        assert rc.train["grad_clip_norm"] is None
        assert rc.quant["w_bits"] == 2
        assert rc.data["vocab"] == "word"

    def test_unknown_path_rejected(self):
        with pytest.raises(ConfigError, match="unknown config key"):
            cf.apply_overrides(cf.default_config(), ["train.lr=1"])
        with pytest.raises(ConfigError, match="section.key"):
            cf.apply_overrides(cf.default_config(), ["epochs=3"])

    def test_override_revalidates(self):
        with pytest.raises(ConfigError):
            cf.apply_overrides(cf.default_config(), ["distill.tau=-1"])

    def test_original_is_untouched(self):
        rc = cf.default_config()
        cf.apply_overrides(rc, ["train.seed=99"])
        assert rc.train["seed"] == 0


class TestDigests:
    def test_digest_ignores_seed(self):
        a = cf.parse_config({"train": {"seed": 0}})
        b = cf.parse_config({"train": {"seed": 5}})
        assert cf.config_digest(a) == cf.config_digest(b)

    def test_digest_sees_everything_else(self):
        a = cf.default_config()
        b = cf.apply_overrides(a, ["distill.lambda=0"])
        assert cf.config_digest(a) != cf.config_digest(b)

    def test_model_digest_accepts_dict_or_config(self):
        rc = cf.default_config()
        assert cf.model_digest(rc.model) == cf.model_digest(rc.model_config())
        assert len(cf.model_digest(rc.model)) == 32

    def test_model_digest_changes_with_model(self):
        rc = cf.default_config()
        other = cf.apply_overrides(rc, ["model.n_layers=3"])
        assert cf.model_digest(rc.model) != cf.model_digest(other.model)


class TestLoadConfig:
    def test_missing_file(self, tmp_path):
        with pytest.raises(ConfigError, match="not found"):
            cf.load_config(tmp_path / "nope.json")

    def test_roundtrip_through_disk(self, tmp_path):
        p = tmp_path / "c.json"
        p.write_text(cf.serialize_config(cf.default_config()))
        assert cf.load_config(p) == cf.default_config()
