import math

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from cigm import autodiff as ad
from cigm.causalgan import (AtomToy, CgTrainConfig, CondGenerator, MixtureToy, TableSampler, antilabeler_loss,
                            build_networks, decay_coefficient, discriminator_loss, empirical_atom_joint,
                            generator_loss, joint_index, labeler_loss, ring_atoms, sample_joint,
                            swapped_labeler_loss, train_causalgan, train_label_estimator)
from cigm.errors import DomainError, ImpossibleEvidence, SchemaError, ShapeError
from cigm.graph import parse_graph
from cigm.nn import MlpSpec, adam_state, adam_step, forward, init_mlp
from cigm.scm import DiscreteTable, ProbTable, Scm, all_bits, conditional_joint, exact_joint, interventional_joint

LN2 = math.log(2.0)


def half(n, d=1):
    return np.full((n, d), 0.5)


# -- loss values ---------------------------------------------------------------

def test_uninformative_labeler_costs_ln2():
    labels = np.array([[0.0], [1.0], [0.0], [1.0]])
    assert labeler_loss(half(4), labels).item() == pytest.approx(LN2)
    assert antilabeler_loss(half(4), labels).item() == pytest.approx(LN2)


def test_labeler_loss_with_explicit_rho():
    out = np.array([[0.8], [0.3]])
    labels = np.array([[1.0], [0.0]])
    want = -(0.25 * math.log(0.8) + 0.75 * math.log(0.7))
    assert labeler_loss(out, labels, rho=0.25).item() == pytest.approx(want)


def test_joint_labeler_picks_the_indexed_output():
    out = np.array([[0.1, 0.2, 0.3, 0.4], [0.25, 0.25, 0.25, 0.25]])
    labels = np.array([[1.0, 1.0], [0.0, 1.0]])
    want = -(math.log(0.4) + math.log(0.25)) / 2
    assert labeler_loss(out, labels, "joint").item() == pytest.approx(want)
    np.testing.assert_array_equal(joint_index(labels), [3, 1])


def test_label_loss_shape_errors():
    with pytest.raises(ShapeError):
        labeler_loss(half(3, 2), np.zeros((3, 1)))
    with pytest.raises(ShapeError):
        labeler_loss(half(3, 3), np.zeros((3, 2)), "joint")
    with pytest.raises(DomainError):
        labeler_loss(np.full((2, 1), 1.5), np.zeros((2, 1)))


def test_discriminator_at_one_half():
    # value before negation is log 0.5 + log 1
    assert discriminator_loss(half(4), half(4)).item() == pytest.approx(LN2)


def test_discriminator_gradient_ignores_the_extra_fake_term():
    d_fake = ad.variable(np.array([[0.3], [0.6]]))
    loss = discriminator_loss(np.array([[0.7], [0.4]]), d_fake)
    (g,) = ad.gradient(loss, [d_fake])
    # d/dD of -0.5 * sum log(1 - D)
    np.testing.assert_allclose(g, 0.5 / (1 - d_fake.data))


def test_decay_coefficient():
    assert decay_coefficient(0, 3000) == 1.0
    assert decay_coefficient(3000, 3000) == pytest.approx(math.exp(-1))
    with pytest.raises(DomainError):
        decay_coefficient(-1, 3000)
    with pytest.raises(DomainError):
        CgTrainConfig(decay_T=0)


def test_generator_loss_forgets_the_antilabeler():
    rng = np.random.default_rng(0)
    d_fake = rng.uniform(0.2, 0.8, (6, 1))
    labels = rng.integers(0, 2, (6, 2)).astype(float)
    lr_out, lg_out = rng.uniform(0.1, 0.9, (6, 2)), rng.uniform(0.1, 0.9, (6, 2))
    cfg = CgTrainConfig(swap=False)
    gan = np.mean(np.log(1 - d_fake) - np.log(d_fake))
    lr_term = labeler_loss(lr_out, labels).item()
    lg_term = labeler_loss(lg_out, labels).item()
    at0 = generator_loss(d_fake, (lr_out, labels), (lg_out, labels), 0, cfg).item()
    assert at0 == pytest.approx(gan + lr_term - lg_term)
    late = generator_loss(d_fake, (lr_out, labels), (lg_out, labels), 1e6, cfg).item()
    assert late == pytest.approx(gan + lr_term)


def test_swapped_cross_entropy_exchanges_arguments():
    out = np.array([[0.8], [0.3]])
    labels = np.array([[1.0], [0.0]])
    eps = 1e-7
    want = -np.mean([0.8 * math.log(1 - eps) + 0.2 * math.log(eps), 0.3 * math.log(eps) + 0.7 * math.log(1 - eps)])
    assert swapped_labeler_loss(out, labels).item() == pytest.approx(want)


@st.composite
def finite_toys(draw):
    seed = draw(st.integers(0, 10_000))
    n_atoms = draw(st.integers(2, 6))
    r = np.random.default_rng(seed)
    return r.dirichlet(np.ones(4)), r.dirichlet(np.ones(n_atoms), size=4), r.dirichlet(np.ones(n_atoms), size=4)


@settings(max_examples=40, deadline=None)
@given(finite_toys())
def test_generator_loss_at_optimal_critics(toy):
    """At the optimal discriminator and labelers the criterion is
    -ln 2 + KL(p_r || (p_r + p_g)/2) + sum_j rho_j KL(p_g^j || p_r^j)."""
    rho, pr_cond, pg_cond = toy
    jr, jg = rho[:, None] * pr_cond, rho[:, None] * pg_cond
    pr, pg = jr.sum(axis=0), jg.sum(axis=0)
    d_star = pr / (pr + pg)
    k, x = (a.ravel() for a in np.meshgrid(np.arange(4), np.arange(len(pr)), indexing="ij"))
    bits = all_bits(2).astype(float)[k]
    cfg = CgTrainConfig(swap=False, variant="joint")
    value = generator_loss(d_star[x][:, None], ((jr / pr)[:, x].T, bits), ((jg / pg)[:, x].T, bits), 0, cfg,
                           d_real=d_star[:, None], weights=jg.ravel(), weights_real=pr).item()

    def kl(p, q):
        return float(np.sum(p * np.log(p / q)))

    want = -LN2 + kl(pr, (pr + pg) / 2) + sum(rho[j] * kl(pg_cond[j], pr_cond[j]) for j in range(4))
    assert abs(value - want) < 1e-6


# -- optima reached by training --------------------------------------------------

def ring_toy(seed: int) -> AtomToy:
    r = np.random.default_rng(seed)
    table = ProbTable(("A", "B"), r.dirichlet(np.ones(4) * 3))
    return AtomToy(table, ring_atoms(8), r.dirichlet(np.ones(8) * 0.7, size=4))


def fitted(toy: AtomToy, variant="per-label", seed=0, steps=3000):
    out = toy.d if variant == "per-label" else 2 ** toy.d
    act = "sigmoid" if variant == "per-label" else "softmax"
    net = init_mlp(MlpSpec((2, 32, 32, out), "relu", act), seed)
    train_label_estimator(net, toy.sample, steps, batch_size=256, lr=1e-3, variant=variant, seed=seed,
                          lr_decay=True)
    with ad.no_record():
        return forward(net, toy.atoms).data


def test_labeler_finds_the_posterior_on_two_atoms():
    table = ProbTable(("A",), np.array([0.4, 0.6]))
    toy = AtomToy(table, np.array([[-1.0, 0.0], [1.0, 0.0]]), np.array([[0.7, 0.3], [0.2, 0.8]]))
    out = fitted(toy, steps=1500)
    assert np.abs(out - toy.posterior()).max() < 0.05


def test_joint_labeler_finds_the_four_way_posterior():
    toy = ring_toy(4)
    out = fitted(toy, "joint")
    j = toy.joint()
    assert np.abs(out - (j / j.sum(axis=0)).T).max() < 0.05


def test_antilabeler_on_a_collapsed_generator():
    # one point per label vector: labels are perfectly decodable
    table = ProbTable(("A", "B"), np.full(4, 0.25))
    toy = AtomToy(table, ring_atoms(4), np.eye(4))
    net = init_mlp(MlpSpec((2, 16, 2), "relu", "sigmoid"), 0)
    train_label_estimator(net, toy.sample, 1500, lr=3e-3, seed=0)
    x, l = toy.sample(500, np.random.default_rng(1))
    assert antilabeler_loss(forward(net, x), l).item() < 0.05


def test_discriminator_is_one_half_when_generator_matches_data():
    toy = ring_toy(2)
    net = init_mlp(MlpSpec((2, 32, 32, 1), "relu", "sigmoid"), 0)
    opt = adam_state(net.parameters(), 1e-3, 0.5, 0.999)
    rng = np.random.default_rng(0)
    for it in range(1500):
        opt.lr = 1e-3 * (1 - it / 1500)
        real, _ = toy.sample(256, rng)
        fake, _ = toy.sample(256, rng)
        loss = discriminator_loss(forward(net, real), forward(net, fake))
        adam_step(net.parameters(), ad.gradient(loss, net.parameters()), opt)
    with ad.no_record():
        assert np.abs(forward(net, toy.atoms).data - 0.5).max() < 0.05


def four_atom_toy() -> AtomToy:
    table = ProbTable(("A", "B"), np.array([0.4, 0.1, 0.2, 0.3]))
    return AtomToy(table, MixtureToy(table).means(), np.eye(4))


def test_generator_class_conditionals_on_four_atoms():
    toy = four_atom_toy()
    x, l = toy.sample(20_000, np.random.default_rng(0))
    cfg = CgTrainConfig(gen_updates=1, batch_size=128, steps=3000, eval_every=1000, swap=False, lr_decay=True)
    sampler = TableSampler(toy.table)
    nets, trace = train_causalgan(sampler, x, l, cfg)
    assert list(trace.columns) == ["d_loss", "g_loss", "labeler_loss", "antilabeler_loss", "decay_coeff"]
    assert len(trace) == 3
    labels, feats = sample_joint(sampler, nets["generator"], 20_000, seed=1)
    emp = empirical_atom_joint(labels, toy.snap(feats), 4)
    cond = emp / emp.sum(axis=1, keepdims=True)
    for k in range(4):
        assert 0.5 * np.abs(cond[k] - toy.p_atom[k]).sum() < 0.1


# -- networks and sampling --------------------------------------------------------

def test_build_networks_shapes():
    nets = build_networks(3, 2)
    g = nets["generator"]
    z = np.zeros((5, g.noise_dim))
    assert g(z, np.zeros((5, 2))).shape == (5, 3)
    assert nets["labeler"].spec.widths[-1] == 2
    joint = build_networks(3, 2, CgTrainConfig(variant="joint"))
    assert joint["labeler"].spec.widths[-1] == 4
    with pytest.raises(DomainError):
        build_networks(3, 5, CgTrainConfig(variant="joint"))
    with pytest.raises(ShapeError):
        g(np.zeros((5, g.noise_dim + 1)), np.zeros((5, 2)))
    with pytest.raises(SchemaError):
        CondGenerator(nets["labeler"], 4, 2)


def test_train_rejects_mismatched_labels():
    sampler = TableSampler(ProbTable(("A", "B"), np.full(4, 0.25)))
    with pytest.raises(SchemaError):
        train_causalgan(sampler, np.zeros((4, 2)), np.zeros((4, 2)), label_names=("B", "A"))
    with pytest.raises(SchemaError):
        train_causalgan(sampler, np.zeros((4, 2)), np.zeros((4, 3)))


CHAIN = parse_graph("A -> B")


def chain_sampler():
    scm = Scm(CHAIN, {"A": DiscreteTable((0.3,)), "B": DiscreteTable((0.2, 0.9))})
    return TableSampler(exact_joint(scm), CHAIN)


def test_do_versus_condition_on_a_chain():
    sampler = chain_sampler()
    t = sampler.table
    do_l, _ = sample_joint(sampler, None, 100_000, "do", s={"B": 1}, seed=0)
    assert abs(do_l[:, 0].mean() - interventional_joint(t, CHAIN, {"B": 1}).marginal("A")) < 0.05
    assert abs(do_l[:, 0].mean() - t.marginal("A")) < 0.05
    cond_l, _ = sample_joint(sampler, None, 100_000, "condition", evidence={"B": 1}, seed=1)
    assert abs(cond_l[:, 0].mean() - conditional_joint(t, {"B": 1}).marginal("A")) < 0.05
    assert (cond_l[:, 1] == 1).all()


def test_full_intervention_fixes_every_label():
    labels, feats = sample_joint(chain_sampler(), None, 50, "do", s={"A": 0, "B": 1}, seed=0)
    assert (labels == [0, 1]).all() and feats.shape == (50, 0)


def test_unreachable_evidence():
    scm = Scm(CHAIN, {"A": DiscreteTable((0.3,)), "B": DiscreteTable((0.0, 0.9))})
    sampler = TableSampler(exact_joint(scm), CHAIN)
    with pytest.raises(ImpossibleEvidence):
        sample_joint(sampler, None, 10, "condition", evidence={"A": 0, "B": 1})
    with pytest.raises(DomainError):
        sample_joint(sampler, None, 10, "do")
    with pytest.raises(DomainError):
        sample_joint(sampler, None, 10, "sideways")


def test_mixture_toy_bayes_labels():
    toy = MixtureToy(ProbTable(("A", "B"), np.full(4, 0.25)))
    x, l = toy.sample(5000, np.random.default_rng(0))
    assert np.mean(np.all(toy.bayes_labels(x) == l, axis=1)) > 0.99
    np.testing.assert_array_equal(toy.bayes_labels(toy.means()), all_bits(2))
