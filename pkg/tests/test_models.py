import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from ppgdistill.errors import ConfigError, ShapeError
from ppgdistill.models import (
    REFERENCE_PARAMS,
    SWEEP_BLOCKS,
    Model,
    ModelSpec,
    build_mlp,
    build_model,
    build_resnet,
    count_params,
    param_table,
)
from ppgdistill.numcore import Layer, Linear
from ppgdistill.trainer import TrainConfig, train


def test_stem_conv_count():
    m = build_resnet(ModelSpec.resnet(1))
    p = dict(m.named_params())
    assert p["stem_conv.weight"].size + p["stem_conv.bias"].size == 16 * 1 * 7 + 16 == 128


def test_mlp_counts():
    assert count_params(build_mlp(ModelSpec.mlp([64]))) == (200 * 64 + 64) + (64 * 180 + 180) == 24_564
    assert count_params(build_mlp(ModelSpec.mlp([1]))) == 561


def test_linear_and_empty_counts():
    assert count_params(Linear(10, 5)) == 55
    assert count_params(Layer()) == 0


def test_count_ignores_values_and_running_stats():
    a = build_resnet(ModelSpec.resnet(2), seed=0)
    b = build_resnet(ModelSpec.resnet(2), seed=9)
    for _, t in b.named_buffers():
        t.data += 3.0
    assert count_params(a) == count_params(b)


def test_resnet_counts_monotone():
    counts = [count_params(build_resnet(ModelSpec.resnet(n), seed=None)) for n in SWEEP_BLOCKS]
    assert all(x < y for x, y in zip(counts, counts[1:]))


@settings(max_examples=25, deadline=None)
@given(st.lists(st.integers(1, 40), min_size=1, max_size=3), st.integers(0, 2))
def test_mlp_width_monotone(widths, which):
    which = min(which, len(widths) - 1)
    wider = list(widths)
    wider[which] *= 2
    assert count_params(build_mlp(ModelSpec.mlp(wider), seed=None)) > count_params(build_mlp(ModelSpec.mlp(widths), seed=None))


def test_param_table_within_factor_two():
    rows = param_table()
    assert [r["blocks"] for r in rows] == list(REFERENCE_PARAMS)
    for r in rows:
        assert 0.5 <= r["reference_params"] / r["params"] <= 2.0
        assert r["delta"] == r["params"] - r["reference_params"]


@pytest.mark.parametrize("n", SWEEP_BLOCKS)
def test_forward_shape_every_sweep_model(n):
    m = build_resnet(ModelSpec.resnet(n))
    logits, feats = m.forward(np.random.default_rng(0).normal(size=(3, 1, 200)))
    assert logits.shape == (3, 180) and feats.shape == (3, m.feature_dim)
    assert np.isfinite(logits).all()


def test_build_errors():
    with pytest.raises(ConfigError):
        build_resnet(ModelSpec.resnet(0))
    with pytest.raises(ConfigError):
        build_mlp(ModelSpec.mlp([]))
    with pytest.raises(ConfigError):
        build_model(ModelSpec(backbone="transformer", num_blocks=1))


def test_input_shape_error():
    m = build_resnet(ModelSpec.resnet(1))
    with pytest.raises(ShapeError):
        m.forward(np.zeros((2, 1, 199)))


def test_spec_round_trip():
    for spec in (ModelSpec.resnet(4), ModelSpec.mlp([64, 32])):
        assert ModelSpec.from_dict(spec.to_dict()) == spec
    with pytest.raises(ConfigError):
        ModelSpec.from_dict({"backbone": "mlp", "widths": [3], "depth": 2})
    assert ModelSpec.resnet(6).label == "resnet6"
    assert ModelSpec.mlp([64, 32]).label == "mlp64x32"


def test_copy_is_independent():
    m = build_resnet(ModelSpec.resnet(1))
    c = m.copy()
    next(iter(c.named_params()))[1].data += 1.0
    assert not np.array_equal(next(iter(m.named_params()))[1].data, next(iter(c.named_params()))[1].data)


def test_state_arrays_round_trip():
    a = build_resnet(ModelSpec.resnet(2), seed=1)
    b = build_resnet(ModelSpec.resnet(2), seed=2)
    b.load_state_arrays(a.state_arrays())
    x = np.random.default_rng(0).normal(size=(2, 1, 200))
    assert np.array_equal(a.forward(x)[0], b.forward(x)[0])


@pytest.mark.parametrize("spec", [ModelSpec.resnet(n) for n in SWEEP_BLOCKS] + [ModelSpec.mlp([64]), ModelSpec.mlp([128, 64])],
                         ids=lambda s: s.label)
def test_every_sweep_model_trains_two_epochs(spec, small_corpus):
    train_set, _ = small_corpus
    model, hist = train(spec, train_set[:64], None, TrainConfig(epochs=2, batch_size=32, seed=0))
    assert len(hist) == 2 and np.isfinite(hist.train_loss).all()
    assert isinstance(model, Model)
