import json

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from rtca import diffcore as dc
from rtca.errors import CheckpointError, ConfigurationError, DivergenceError

from conftest import central_diff, fd_rel_err


def _net(seed, sizes=(4, 6, 3), act="tanh", out="identity"):
    spec = dc.MlpSpec(sizes, act, out)
    return spec, dc.init_params(spec, np.random.default_rng(seed))


def test_spec_validation():
    with pytest.raises(ConfigurationError):
        dc.MlpSpec((3,))
    with pytest.raises(ConfigurationError):
        dc.MlpSpec((3, 0, 2))
    with pytest.raises(ConfigurationError):
        dc.MlpSpec((3, 2), hidden_activation="sigmoid")


def test_forward_shapes_and_batch_consistency():
    spec, params = _net(0)
    x = np.random.default_rng(1).normal(size=(5, 4))
    batch = dc.forward(spec, params, x)
    assert batch.shape == (5, 3)
    for i in range(5):
        np.testing.assert_allclose(dc.forward(spec, params, x[i]), batch[i], atol=1e-14)


def test_forward_rejects_wrong_width():
    spec, params = _net(0)
    with pytest.raises(ConfigurationError):
        dc.forward(spec, params, np.zeros(5))


def test_softmax_output_sums_to_one():
    spec, params = _net(2, out="softmax")
    p = dc.forward(spec, params, np.random.default_rng(0).normal(size=(7, 4)))
    np.testing.assert_allclose(p.sum(axis=1), 1.0, atol=1e-12)
    assert (p > 0).all()


@pytest.mark.parametrize("act,out", [("relu", "identity"), ("tanh", "identity"), ("tanh", "softmax")])
def test_backward_matches_finite_differences(act, out):
    spec, params = _net(3, (3, 5, 4, 2), act, out)
    rng = np.random.default_rng(4)
    x = rng.normal(size=(3, 3))
    w = rng.normal(size=(3, 2))
    loss = lambda p, xx: float((dc.forward(spec, p, xx) * w).sum())
    bundle = dc.backward(spec, params, x, w)
    for name in params:
        def f(v, name=name):
            return loss({**params, name: v}, x)
        assert fd_rel_err(bundle.param_grads[name], central_diff(f, params[name])) < 1e-5
    assert fd_rel_err(bundle.input_grad, central_diff(lambda xx: loss(params, xx), x)) < 1e-5


def test_sgd_step_moves_against_gradient():
    spec, params = _net(5)
    g = {k: np.ones_like(v) for k, v in params.items()}
    new = dc.sgd_step(params, g, 0.1)
    for k in params:
        np.testing.assert_allclose(new[k], params[k] - 0.1)


def test_sgd_step_detects_divergence():
    spec, params = _net(5)
    g = {k: np.full_like(v, np.inf) for k, v in params.items()}
    with pytest.raises(DivergenceError):
        dc.sgd_step(params, g, 0.1)


def test_clip_by_global_norm():
    g = {"a": np.array([3.0, 4.0])}
    assert dc.global_norm(g) == pytest.approx(5.0)
    np.testing.assert_allclose(dc.clip_by_global_norm(g, 1.0)["a"], [0.6, 0.8])
    np.testing.assert_allclose(dc.clip_by_global_norm(g, 10.0)["a"], [3.0, 4.0])


def test_checkpoint_round_trip_is_bit_exact(tmp_path):
    spec, params = _net(6, (3, 8, 2), "relu")
    path = tmp_path / "net.json"
    dc.save_checkpoint(spec, params, path, meta={"note": "x"})
    spec2, params2 = dc.load_checkpoint(path)
    assert spec2 == spec
    for k in params:
        assert np.array_equal(params[k], params2[k])


def test_corrupted_checkpoint_names_the_field(tmp_path):
    spec, params = _net(6)
    doc = dc.to_document(spec, params)
    doc["params"]["W0"]["shape"] = [2, 2]
    path = tmp_path / "bad.json"
    path.write_text(json.dumps(doc))
    with pytest.raises(CheckpointError, match="params.W0"):
        dc.load_checkpoint(path)


def test_unreadable_checkpoint(tmp_path):
    path = tmp_path / "junk.json"
    path.write_text("{not json")
    with pytest.raises(CheckpointError):
        dc.load_checkpoint(path)


@settings(max_examples=50, deadline=None)
@given(st.lists(st.floats(-50, 50), min_size=2, max_size=8))
def test_log_softmax_is_consistent(z):
    z = np.asarray(z)
    np.testing.assert_allclose(np.exp(dc.log_softmax(z)), dc.softmax(z), atol=1e-12)
    assert dc.softmax(z).sum() == pytest.approx(1.0)
