import numpy as np
import pytest

from tabembed import diffcore as dc
from tabembed.data import FeatureSchema, FieldSpec, Kind
from tabembed.diffcore import Tensor
from tabembed.errors import ConfigError, SchemaError
from tabembed.model import BackboneParams, ModelConfig, TabularModel, backbone_param_count, forward

from fdcheck import gradcheck


def mixed_schema(v=6):
    return FeatureSchema(
        (
            FieldSpec("a", Kind.NUMERICAL),
            FieldSpec("b", Kind.NUMERICAL),
            FieldSpec("c", Kind.CATEGORICAL, v),
        )
    )


def small_config(**methods):
    return ModelConfig(d=4, id_dim=2, width=5, backbone=(6,), methods=methods)


def zero_backbone(model):
    for p in model.backbone.parameters():
        p.data[...] = 0.0


class TestEmbedRow:
    def test_zero_deep_fields(self):
        schema = FeatureSchema((FieldSpec("x", Kind.NUMERICAL), FieldSpec("e", Kind.CATEGORICAL, 5)))
        model = TabularModel(schema, small_config(), seed=0)
        num_emb, cat_emb = model.embedders
        num_emb.expansion.beta.data[...] = [0.5, -1.0, 2.0, 0.25]
        for p in [*num_emb.deep.parameters(), *cat_emb.deep.parameters()]:
            p.data[...] = 0.0
        row = model.embed_row([0.0], [3]).data
        np.testing.assert_array_equal(row, [0.5, -1.0, 2.0, 0.25, 0, 0, 0, 0])

    def test_variable_widths_concatenate(self):
        schema = FeatureSchema((FieldSpec("x", Kind.NUMERICAL), FieldSpec("e", Kind.CATEGORICAL, 5)))
        model = TabularModel(schema, small_config(x="none", e="binary"))
        assert model.row_width == 4
        np.testing.assert_array_equal(model.embed_row([0.3], [5]).data, [0.3, 1, 0, 1])

    def test_matrix_requires_uniform_width(self):
        model = TabularModel(mixed_schema(), small_config(a="none"))
        with pytest.raises(ConfigError):
            model.embed_matrix([0.1, 0.2], [1])
        full = TabularModel(mixed_schema(), small_config())
        assert full.embed_matrix(np.zeros((7, 2)), np.zeros((7, 1), int)).shape == (7, 3, 4)

    def test_field_count_mismatch(self):
        model = TabularModel(mixed_schema(), small_config())
        with pytest.raises(SchemaError):
            model.embed_row([0.1], [1])

    def test_unknown_method_field(self):
        with pytest.raises(ConfigError):
            TabularModel(mixed_schema(), small_config(zzz="deep"))

    def test_permuting_fields(self, rng):
        schema = mixed_schema()
        model = TabularModel(schema, small_config(b="linear"), seed=3)
        swapped_schema = FeatureSchema((schema.fields[1], schema.fields[0], schema.fields[2]))
        swapped = TabularModel(swapped_schema, small_config(b="linear"), seed=99)
        state = model.state_dict()
        # field blocks of W0 follow the field order: a | b | c
        W0 = state["backbone.W0"]
        state["backbone.W0"] = np.concatenate([W0[:, 4:8], W0[:, 0:4], W0[:, 8:]], axis=1)
        swapped.load_state_dict(state)
        num = rng.uniform(size=(20, 2))
        cat = rng.integers(0, 7, size=(20, 1))
        a = model.logits(num, cat).data
        b = swapped.logits(num[:, ::-1], cat).data
        np.testing.assert_allclose(a, b, rtol=0, atol=1e-12)


class TestForward:
    def test_zero_backbone_is_half(self, rng):
        model = TabularModel(mixed_schema(), small_config())
        zero_backbone(model)
        p = model.predict_proba(rng.uniform(size=(5, 2)), rng.integers(0, 6, (5, 1))).data
        np.testing.assert_array_equal(p, 0.5)

    def test_hand_set_one_hidden_unit(self):
        params = BackboneParams(
            [Tensor([[1.0, -2.0]]), Tensor([[3.0]])],
            [Tensor([0.5]), Tensor([-1.0])],
        )
        # h = relu(0.2 - 0.8 + 0.5) = 0 for x=(0.2, 0.4); logit = -1
        # h = relu(1.0 - 0.2 + 0.5) = 1.3 for x=(1.0, 0.1); logit = 2.9
        out = forward(Tensor([[0.2, 0.4], [1.0, 0.1]]), params).data
        np.testing.assert_allclose(out, 1 / (1 + np.exp(-np.array([-1.0, 2.9]))), rtol=1e-14)

    def test_width_mismatch(self):
        params = BackboneParams.create(3, (4,), np.random.default_rng(0))
        with pytest.raises(ConfigError):
            forward(Tensor(np.ones(5)), params)

    def test_in_open_interval(self, rng):
        model = TabularModel(mixed_schema(), small_config())
        num, cat = rng.uniform(size=(200, 2)), rng.integers(0, 6, (200, 1))
        # float64 saturates beyond |logit| ~ 36; stay inside that range
        assert np.abs(model.logits(num, cat).data).max() < 36
        p = model.predict_proba(num, cat).data
        assert np.all((p > 0) & (p < 1))

    def test_backbone_count(self):
        model = TabularModel(mixed_schema(), small_config())
        assert model.backbone.param_count() == backbone_param_count(12, (6,)) == 12 * 6 + 6 + 6 + 1


class TestGradients:
    def test_end_to_end_finite_difference(self, rng):
        model = TabularModel(mixed_schema(), small_config(), seed=1)
        num = rng.uniform(size=(6, 2))
        cat = np.array([[0], [1], [1], [4], [5], [6]])
        y = rng.integers(0, 2, 6).astype(float)

        def loss():
            return dc.bce_loss(model.predict_proba(num, cat), y)

        a = model.embedder("a")
        c = model.embedder("c")
        targets = [a.expansion.gamma, a.expansion.beta, c.id_table.entries]
        assert gradcheck(loss, targets) < 1e-4
        assert gradcheck(loss, model.parameters()) < 1e-4

    @pytest.mark.parametrize(
        "methods",
        [{}, {"a": "linear", "b": "discretize", "c": "lookup"}, {"a": "handcrafted", "b": "none", "c": "hashing"}],
    )
    def test_every_parameter_gets_finite_gradient(self, rng, methods):
        model = TabularModel(mixed_schema(), small_config(**methods), seed=2)
        num = rng.uniform(size=(64, 2))
        cat = rng.integers(0, 7, (64, 1))
        y = rng.integers(0, 2, 64).astype(float)
        for p in model.parameters():
            p.zero_grad()
        with dc.Tape() as tape:
            loss = dc.bce_loss(model.predict_proba(num, cat), y)
        dc.backward(loss, tape)
        for name, p in model.named_parameters():
            assert p.grad is not None and np.all(np.isfinite(p.grad)), name


class TestDeterminism:
    def test_same_seed_same_logits(self, rng):
        num = rng.uniform(size=(10, 2))
        cat = rng.integers(0, 6, (10, 1))
        a = TabularModel(mixed_schema(), small_config(), seed=5).logits(num, cat).data
        b = TabularModel(mixed_schema(), small_config(), seed=5).logits(num, cat).data
        assert a.tobytes() == b.tobytes()

    def test_state_round_trip(self, rng):
        src = TabularModel(mixed_schema(), small_config(), seed=5)
        dst = TabularModel(mixed_schema(), small_config(), seed=6)
        dst.load_state_dict(src.state_dict())
        num = rng.uniform(size=(10, 2))
        cat = rng.integers(0, 6, (10, 1))
        assert src.logits(num, cat).data.tobytes() == dst.logits(num, cat).data.tobytes()


class TestParamReport:
    def test_rows_and_totals(self):
        schema = FeatureSchema((FieldSpec("x", Kind.NUMERICAL), FieldSpec("e", Kind.CATEGORICAL, 1000)))
        model = TabularModel(schema, ModelConfig(d=16, id_dim=4, methods={"e": "lookup"}))
        rows = {r["field"]: r for r in model.param_report()}
        assert rows["e"]["params"] == 16000 and rows["e"]["extras"] == {"oov_row": 16}
        assert model.param_totals()["total"] == model.allocated_scalars()
