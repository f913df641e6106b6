import numpy as np
import pytest

from cigm import autodiff as ad
from cigm.errors import DomainError, SchemaError, ShapeError
from cigm.nn import (MlpSpec, adam_state, adam_step, forward, init_mlp, load_checkpoint, member,
                     save_checkpoint, stack_mlps)


def numpy_forward(net, x):
    for k, (w, b) in enumerate(zip(net.weights, net.biases)):
        x = x @ w.data.T + b.data
        if k < len(net.weights) - 1:
            x = np.tanh(x) if net.spec.hidden == "tanh" else np.maximum(x, 0)
    if net.spec.output == "sigmoid":
        x = 1 / (1 + np.exp(-x))
    return x


@pytest.mark.parametrize("hidden,output", [("relu", "identity"), ("tanh", "sigmoid")])
def test_forward_matches_numpy(hidden, output):
    net = init_mlp(MlpSpec((3, 5, 4, 2), hidden, output), 0)
    x = np.random.default_rng(1).normal(size=(7, 3))
    np.testing.assert_allclose(forward(net, x).data, numpy_forward(net, x), atol=1e-12)


def test_init_is_deterministic_and_glorot_bounded():
    a, b = init_mlp(MlpSpec((4, 6, 1)), 3), init_mlp(MlpSpec((4, 6, 1)), 3)
    for p, q in zip(a.parameters(), b.parameters()):
        np.testing.assert_array_equal(p.data, q.data)
    assert np.abs(a.weights[0].data).max() <= np.sqrt(6 / 10)
    assert not a.biases[0].data.any()


def test_spec_validation():
    with pytest.raises(DomainError):
        MlpSpec((3,))
    with pytest.raises(DomainError):
        MlpSpec((3, 1), hidden="gelu")
    with pytest.raises(ShapeError):
        forward(init_mlp(MlpSpec((3, 1)), 0), np.ones((2, 4)))


def test_adam_first_step_by_hand():
    # m = 0.25, v = 0.00025; bias-corrected 0.5 / sqrt(0.25) = 1, so the step is lr
    p = ad.variable(np.array([1.0]))
    st = adam_state([p], lr=0.1, beta1=0.5, beta2=0.999)
    adam_step([p], [np.array([0.5])], st)
    assert p.data[0] == pytest.approx(0.9, abs=1e-7)
    assert st.step == 1


def test_adam_minimises_a_quadratic():
    p = ad.variable(np.array([3.0, -2.0]))
    st = adam_state([p], lr=0.05, beta1=0.9, beta2=0.999)
    for _ in range(2000):
        (g,) = ad.gradient(ad.sum_(ad.square(p - np.array([1.0, 0.5]))), [p])
        adam_step([p], [g], st)
    np.testing.assert_allclose(p.data, [1.0, 0.5], atol=1e-3)


def test_stacked_networks_match_their_members():
    nets = [init_mlp(MlpSpec((3, 4, 2), "tanh"), s) for s in range(3)]
    stack = stack_mlps(nets)
    assert stack.members == 3
    x = np.random.default_rng(0).normal(size=(3, 5, 3))
    out = forward(stack, x).data
    for i, net in enumerate(nets):
        np.testing.assert_allclose(out[i], forward(net, x[i]).data, atol=1e-12)
        for p, q in zip(member(stack, i).parameters(), net.parameters()):
            np.testing.assert_array_equal(p.data, q.data)
    # gradients of a summed loss separate per member
    grads = ad.gradient(ad.sum_(ad.square(forward(stack, x))), stack.parameters())
    solo = ad.gradient(ad.sum_(ad.square(forward(nets[1], x[1]))), nets[1].parameters())
    for g, s in zip(grads, solo):
        np.testing.assert_allclose(g[1], s, atol=1e-12)


def test_checkpoint_round_trip(tmp_path):
    nets = {"g": init_mlp(MlpSpec((2, 3, 1), "tanh", "sigmoid"), 0), "d": init_mlp(MlpSpec((1, 1)), 1)}
    save_checkpoint(tmp_path / "c.ckpt", nets, {"note": "x"})
    back, meta = load_checkpoint(tmp_path / "c.ckpt")
    assert meta == {"note": "x"}
    for name in nets:
        assert back[name].spec == nets[name].spec
        for p, q in zip(back[name].parameters(), nets[name].parameters()):
            np.testing.assert_array_equal(p.data, q.data)


def test_checkpoint_rejects_other_files(tmp_path):
    (tmp_path / "x").write_bytes(b"not a checkpoint")
    with pytest.raises(SchemaError):
        load_checkpoint(tmp_path / "x")
