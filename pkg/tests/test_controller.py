import dataclasses

import numpy as np
import pytest

from cigm import autodiff as ad
from cigm.controller import (ControllerTrainConfig, GraphGenerator, build_critic, build_fc_baseline,
                             build_graph_generator, consistency_violations, critic_loss, discreteness,
                             gradient_penalty, load_generator, member_generator, round_labels, save_generator,
                             stack_generators, train_controller, train_stacked)
from cigm.errors import DomainError, SchemaError, ShapeError
from cigm.evaluation import empirical_joint, tvd
from cigm.graph import load_graph, parse_graph
from cigm.nn import forward, stack_mlps
from cigm.scm import exact_joint, random_discrete_scm, sample

TINY = ControllerTrainConfig(critic_iters=2, batch_size=32, noise_per_node=3, depth=3, hidden_width=8,
                             critic_widths=(16, 16), steps=4, eval_every=2, eval_samples=500)


def test_noise_slices_follow_topological_order():
    g = parse_graph("B\nA\nA -> B")
    gen = build_graph_generator(g, TINY)
    assert gen.noise_layout == {"A": (0, 3), "B": (3, 6)}
    assert gen.noise_dim == 6
    assert gen.subnets["B"].spec.widths[0] == 4


@pytest.mark.parametrize("name", ["line", "collider", "complete", "cg1", "g1", "rcg1"])
def test_generators_are_graph_consistent(name):
    gen = build_graph_generator(load_graph(name), TINY)
    assert consistency_violations(gen) == []


def test_consistency_check_catches_a_miswired_generator():
    g = parse_graph("X\nY")
    gen = build_graph_generator(g, TINY)

    class Leaky(GraphGenerator):
        def forward(self, z, intervention=None):
            out = super().forward(z, intervention)
            return out + ad.concat([ad.constant(np.zeros((z.shape[0], 1))), z[:, 0:1]], axis=1)

    leaky = Leaky(gen.graph, gen.subnets, gen.noise_layout)
    assert consistency_violations(leaky) == [("Y", "X")]


def test_bad_noise_layout_is_rejected():
    gen = build_graph_generator(load_graph("line"), TINY)
    with pytest.raises(SchemaError):
        GraphGenerator(gen.graph, gen.subnets, {"X": (0, 3), "Y": (4, 6), "Z": (6, 9)})


def test_intervention_clamps_and_spares_ancestors():
    gen = build_graph_generator(load_graph("line"), TINY, seed=1)
    z = np.random.default_rng(0).random((50, gen.noise_dim))
    plain = gen.forward(z).data
    cut = gen.forward(z, {"Y": 1}).data
    np.testing.assert_array_equal(cut[:, 1], 1.0)
    np.testing.assert_array_equal(cut[:, 0], plain[:, 0])
    assert not np.allclose(cut[:, 2], plain[:, 2])


def test_fc_baseline_shapes_and_refuses_interventions():
    fc = build_fc_baseline(5, 3, TINY)
    assert len(fc.net.weights) == 5 and fc.noise_dim == 9
    with pytest.raises(DomainError):
        fc.forward(np.zeros((2, 9)), {"X0": 1})
    with pytest.raises(DomainError):
        build_fc_baseline(4, 3, TINY)


def test_round_labels_and_discreteness():
    np.testing.assert_array_equal(round_labels([0.49, 0.5, 0.51]), [0, 1, 1])
    assert discreteness(np.array([0.0, 0.04, 0.5, 0.96, 1.0])) == pytest.approx(0.8)


def test_fused_critic_loss_matches_the_separate_terms():
    r = np.random.default_rng(0)
    critic = build_critic(3, TINY)
    real, fake, eps = r.random((16, 3)), r.random((16, 3)), r.random(16)
    fused, w_est, gp = critic_loss(stack_mlps([critic]), real[None], fake[None], eps[None], 10.0)
    pen = gradient_penalty(critic, real, fake, eps)
    w = forward(critic, real).mean().item() - forward(critic, fake).mean().item()
    assert fused.item() == pytest.approx(-w + 10.0 * pen.item(), abs=1e-12)
    assert gp[0] == pytest.approx(pen.item(), abs=1e-12)
    assert w_est[0] == pytest.approx(w, abs=1e-12)
    # parameter gradients agree as well
    sc = stack_mlps([critic])
    g_fused = ad.gradient(critic_loss(sc, real[None], fake[None], eps[None], 10.0)[0], sc.parameters())
    sep = ad.sub(ad.mul(gradient_penalty(critic, real, fake, eps), 10.0),
                 ad.sub(forward(critic, real).mean(), forward(critic, fake).mean()))
    g_sep = ad.gradient(sep, critic.parameters())
    for a, b in zip(g_fused, g_sep):
        np.testing.assert_allclose(a[0], b, atol=1e-10)


def test_gradient_penalty_shapes():
    critic = build_critic(2, TINY)
    with pytest.raises(ShapeError):
        gradient_penalty(critic, np.zeros((4, 2)), np.zeros((3, 2)), np.zeros(4))


def test_stacked_training_equals_solo_training():
    g = load_graph("line")
    data = [sample(random_discrete_scm(g, s), 400, s) for s in (0, 1)]
    solo = []
    for s, x in zip((0, 1), data):
        cfg = dataclasses.replace(TINY, seed=s)
        gen, trace, _ = train_controller(build_graph_generator(g, cfg, seed=s), x, cfg)
        solo.append((gen, trace))
    stacked = stack_generators([build_graph_generator(g, TINY, seed=s) for s in (0, 1)])
    stacked, traces, _ = train_stacked(stacked, np.stack(data), TINY, [0, 1])
    for i, (gen, trace) in enumerate(solo):
        for p, q in zip(gen.parameters(), member_generator(stacked, i).parameters()):
            np.testing.assert_allclose(p.data, q.data, atol=1e-12)
        np.testing.assert_allclose(trace.column("tvd"), traces[i].column("tvd"))


def test_training_is_deterministic_and_traced():
    g = load_graph("collider")
    x = sample(random_discrete_scm(g, 3), 500, 3)
    runs = [train_controller(build_graph_generator(g, TINY), x, TINY) for _ in range(2)]
    for p, q in zip(runs[0][0].parameters(), runs[1][0].parameters()):
        np.testing.assert_array_equal(p.data, q.data)
    trace = runs[0][1]
    np.testing.assert_array_equal(trace.steps(), [2, 4])
    assert trace.columns == ("wasserstein_estimate", "gradient_penalty", "tvd")


def test_training_rejects_mismatched_data():
    gen = build_graph_generator(load_graph("line"), TINY)
    with pytest.raises(SchemaError):
        train_controller(gen, np.zeros((10, 2)), TINY)
    with pytest.raises(SchemaError):
        train_controller(gen, np.zeros((10, 3)), TINY, labels=("A", "B", "C"))


def test_controller_learns_a_two_label_table():
    g = parse_graph("A -> B")
    scm = random_discrete_scm(g, 7)
    x = sample(scm, 5000, 7)
    cfg = ControllerTrainConfig(critic_iters=5, batch_size=64, lr=1e-4, steps=1000, eval_every=1000,
                                eval_samples=5000)
    gen, trace, _ = train_controller(build_graph_generator(g, cfg), x, cfg)
    fake = empirical_joint(round_labels(gen.sample(20000, np.random.default_rng(0))), g.nodes)
    assert tvd(fake, exact_joint(scm)) < 0.1


def test_generator_checkpoint_round_trip(tmp_path):
    gen = build_graph_generator(load_graph("g1"), TINY, seed=4)
    save_generator(tmp_path / "g.ckpt", gen, {"tag": 1})
    back, meta = load_generator(tmp_path / "g.ckpt")
    assert meta["tag"] == 1 and back.graph == gen.graph and back.noise_layout == gen.noise_layout
    z = np.random.default_rng(0).random((5, gen.noise_dim))
    np.testing.assert_array_equal(back.forward(z).data, gen.forward(z).data)
