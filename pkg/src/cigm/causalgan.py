"""Conditional generation on top of a trained label controller.

Four networks: a conditional generator ``G(z, l)``, a real/fake discriminator,
a Labeler trained on data and an Anti-Labeler trained on generated samples.
Features here are small real vectors rather than images.
"""
from __future__ import annotations

import math
from dataclasses import dataclass, replace
from typing import Mapping, Sequence

import numpy as np

from . import autodiff as ad
from .autodiff import DiffValue
from .controller import round_labels
from .errors import DomainError, ImpossibleEvidence, SchemaError, ShapeError
from .evaluation import ACCEPTANCE_FLOOR, PROBE_DRAWS, MetricTrace, acceptance_rate, rejection_condition
from .graph import Intervention
from .nn import Mlp, MlpSpec, adam_state, adam_step, forward, init_mlp
from .scm import ProbTable, all_bits

LOG_CLAMP = 1e-7
VARIANTS = ("per-label", "joint")


@dataclass(frozen=True)
class CgTrainConfig:
    gen_updates: int = 6
    decay_T: float = 3000.0
    swap: bool = True
    variant: str = "per-label"
    lr_g: float = 2e-4
    lr_d: float = 2e-4
    beta1: float = 0.5
    beta2: float = 0.999
    batch_size: int = 64
    noise_dim: int = 4
    hidden_width: int = 32
    depth: int = 3
    steps: int = 2000
    eval_every: int = 100
    global_rho: bool = False
    lr_decay: bool = False
    seed: int = 0

    def __post_init__(self):
        if self.decay_T <= 0:
            raise DomainError("decay_T must be positive")
        if self.variant not in VARIANTS:
            raise DomainError(f"variant must be one of {VARIANTS}")
        for name in ("gen_updates", "batch_size", "noise_dim", "hidden_width", "depth", "steps", "eval_every"):
            if getattr(self, name) <= 0:
                raise DomainError(f"{name} must be positive")


def joint_index(labels: np.ndarray) -> np.ndarray:
    """Row index into a 2^d table, first column most significant."""
    labels = np.asarray(labels, dtype=np.int64)
    d = labels.shape[1]
    return labels @ (1 << np.arange(d - 1, -1, -1)) if d else np.zeros(len(labels), dtype=np.int64)


def _clamped_log(p: DiffValue) -> DiffValue:
    if np.any(p.data < 0) or np.any(p.data > 1):
        raise DomainError("probabilities must lie in [0, 1]")
    return ad.log(ad.clamp(p, LOG_CLAMP, 1.0 - LOG_CLAMP))


def _weights(n: int, weights) -> np.ndarray:
    if weights is None:
        return np.full(n, 1.0 / n)
    w = np.asarray(weights, dtype=float).reshape(-1)
    if w.shape != (n,):
        raise ShapeError(f"weights shape {w.shape} does not match batch {n}")
    return w / w.sum()


def _expect(v: DiffValue, w: np.ndarray) -> DiffValue:
    """Weighted sum over the batch axis of a (batch,) or (batch, 1) value."""
    return ad.sum_(ad.mul(ad.reshape(v, (-1,)), w))


def labeler_loss(outputs, labels, variant: str = "per-label", rho=None, weights=None) -> DiffValue:
    """Negated label log-likelihood, minimized by the Labeler (and Anti-Labeler).

    ``per-label``: the mean over labels of
    ``-(rho E[log D_j | l_j=1] + (1 - rho) E[log(1 - D_j) | l_j=0])``, with
    ``rho`` the batch label frequency unless given. ``joint``: ``-E[log D[index(l)]]``
    over 2^d softmax outputs. ``weights`` turns batch means into weighted
    expectations (exact evaluation on a finite support).
    """
    outputs = ad.lift(outputs)
    labels = np.asarray(labels, dtype=float)
    if labels.ndim != 2 or outputs.ndim != 2 or outputs.shape[0] != labels.shape[0]:
        raise ShapeError(f"outputs {outputs.shape} and labels {labels.shape} disagree")
    n, d = labels.shape
    w = _weights(n, weights)
    if variant == "joint":
        if outputs.shape[1] != 2 ** d:
            raise ShapeError(f"joint variant needs {2 ** d} outputs, got {outputs.shape[1]}")
        onehot = np.zeros(outputs.shape)
        onehot[np.arange(n), joint_index(labels)] = 1.0
        picked = ad.sum_(ad.mul(outputs, onehot), axis=1)
        return ad.neg(_expect(_clamped_log(picked), w))
    if variant != "per-label":
        raise DomainError(f"unknown labeler variant {variant!r}")
    if outputs.shape[1] != d:
        raise ShapeError(f"per-label variant needs {d} outputs, got {outputs.shape[1]}")
    log_p = _clamped_log(outputs)
    log_q = _clamped_log(ad.sub(1.0, outputs))
    freq = w @ labels
    rho = freq if rho is None else np.broadcast_to(np.asarray(rho, dtype=float), (d,))
    # conditional expectations: weights renormalised within each label class
    with np.errstate(divide="ignore", invalid="ignore"):
        w1 = np.where(freq > 0, w[:, None] * labels / freq, 0.0) * rho
        w0 = np.where(freq < 1, w[:, None] * (1 - labels) / (1 - freq), 0.0) * (1 - rho)
    ll = ad.add(ad.sum_(ad.mul(log_p, w1)), ad.sum_(ad.mul(log_q, w0)))
    return ad.neg(ad.div(ll, float(d)))


antilabeler_loss = labeler_loss


def swapped_labeler_loss(outputs, labels, variant: str = "per-label", weights=None) -> DiffValue:
    """Cross-entropy with the arguments exchanged: ``-sum D log l`` over clamped targets."""
    outputs = ad.lift(outputs)
    labels = np.asarray(labels, dtype=float)
    n, d = labels.shape
    w = _weights(n, weights)
    if variant == "joint":
        target = np.zeros(outputs.shape)
        target[np.arange(n), joint_index(labels)] = 1.0
        log_t = np.log(np.clip(target, LOG_CLAMP, 1.0 - LOG_CLAMP))
        return ad.neg(_expect(ad.sum_(ad.mul(outputs, log_t), axis=1), w))
    t = np.clip(labels, LOG_CLAMP, 1.0 - LOG_CLAMP)
    per = ad.add(ad.mul(outputs, np.log(t)), ad.mul(ad.sub(1.0, outputs), np.log(1.0 - t)))
    return ad.neg(ad.div(_expect(ad.sum_(per, axis=1), w), float(d)))


def discriminator_loss(d_real, d_fake, weights_real=None, weights_fake=None) -> DiffValue:
    """Negated ``E_data log D + E_g log((1 - D) / D)``.

    The ``-log D`` part on generated samples enters the value only: its
    gradient is cut so the discriminator's optimum stays p_data / (p_data + p_g).
    """
    d_real, d_fake = ad.lift(d_real), ad.lift(d_fake)
    wr = _weights(d_real.shape[0], weights_real)
    wf = _weights(d_fake.shape[0], weights_fake)
    gan = ad.add(_expect(_clamped_log(d_real), wr), _expect(_clamped_log(ad.sub(1.0, d_fake)), wf))
    extra = ad.stop_gradient(ad.neg(_expect(_clamped_log(d_fake), wf)))
    return ad.neg(ad.add(gan, extra))


def decay_coefficient(t: float, T: float) -> float:
    if t < 0:
        raise DomainError("step must be nonnegative")
    return math.exp(-t / T)


def generator_loss(d_fake, labeler_terms, antilabeler_terms, t: float, cfg: CgTrainConfig = CgTrainConfig(),
                   d_real=None, weights=None, weights_real=None) -> DiffValue:
    """``E_g log((1 - D) / D) + L_R - exp(-t/T) L_G``.

    ``labeler_terms`` and ``antilabeler_terms`` are ``(outputs, labels)`` for
    the Labeler and Anti-Labeler evaluated on generated samples. Passing
    ``d_real`` adds the data term ``E_data log D`` (constant in the generator,
    needed when the value itself is inspected).
    """
    d_fake = ad.lift(d_fake)
    w = _weights(d_fake.shape[0], weights)
    gan = _expect(ad.sub(_clamped_log(ad.sub(1.0, d_fake)), _clamped_log(d_fake)), w)
    if d_real is not None:
        d_real = ad.lift(d_real)
        gan = ad.add(gan, _expect(_clamped_log(d_real), _weights(d_real.shape[0], weights_real)))

    def ce(outputs, labels):
        if cfg.swap:
            return swapped_labeler_loss(outputs, labels, cfg.variant, weights=w)
        return labeler_loss(outputs, labels, cfg.variant, weights=w)

    coeff = decay_coefficient(t, cfg.decay_T)
    return ad.sub(ad.add(gan, ce(*labeler_terms)), ad.mul(ce(*antilabeler_terms), coeff))


# -- networks ----------------------------------------------------------------

class CondGenerator:
    """``x = G(z, l)``: one network over the concatenated noise and rounded labels."""

    def __init__(self, net: Mlp, noise_dim: int, n_labels: int):
        if net.spec.widths[0] != noise_dim + n_labels:
            raise SchemaError("generator input width must equal noise_dim + n_labels")
        self.net = net
        self.noise_dim = noise_dim
        self.n_labels = n_labels
        self.feature_dim = net.spec.widths[-1]

    def parameters(self) -> list[DiffValue]:
        return self.net.parameters()

    def forward(self, z, labels) -> DiffValue:
        z, labels = ad.lift(z), ad.lift(labels)
        if z.shape[1] != self.noise_dim or labels.shape[1] != self.n_labels or z.shape[0] != labels.shape[0]:
            raise ShapeError(f"noise {z.shape} / labels {labels.shape} do not fit the generator")
        return forward(self.net, ad.concat([z, labels], axis=1))

    __call__ = forward

    def sample(self, labels: np.ndarray, rng: np.random.Generator) -> np.ndarray:
        labels = np.asarray(labels, dtype=float)
        with ad.no_record():
            return self.forward(rng.random((len(labels), self.noise_dim)), labels).data


def _mlp(widths, output, rng) -> Mlp:
    return init_mlp(MlpSpec(tuple(widths), "relu", output), rng)


def build_networks(feature_dim: int, n_labels: int, cfg: CgTrainConfig = CgTrainConfig()) -> dict[str, object]:
    if cfg.variant == "joint" and n_labels > 4:
        raise DomainError("the joint labeler variant is limited to at most 4 labels")
    rng = np.random.default_rng(cfg.seed)
    hid = (cfg.hidden_width,) * (cfg.depth - 1)
    label_out = (2 ** n_labels, "softmax") if cfg.variant == "joint" else (n_labels, "sigmoid")
    return {
        "generator": CondGenerator(_mlp((cfg.noise_dim + n_labels,) + hid + (feature_dim,), "identity", rng),
                                   cfg.noise_dim, n_labels),
        "discriminator": _mlp((feature_dim,) + hid + (1,), "sigmoid", rng),
        "labeler": _mlp((feature_dim,) + hid + (label_out[0],), label_out[1], rng),
        "antilabeler": _mlp((feature_dim,) + hid + (label_out[0],), label_out[1], rng),
    }


class TableSampler:
    """Exact label sampler backed by a ProbTable; a stand-in for a trained controller."""

    def __init__(self, table: ProbTable, graph=None):
        self.table = table
        self.graph = graph
        self._bits = all_bits(len(table.labels))

    @property
    def labels(self) -> tuple[str, ...]:
        return self.table.labels

    def sample(self, n: int, rng: np.random.Generator, intervention: Intervention | None = None) -> np.ndarray:
        table = self.table
        if intervention:
            from .scm import interventional_joint

            if self.graph is None:
                raise DomainError("interventions need the causal graph")
            table = interventional_joint(table, self.graph, intervention)
        return self._bits[rng.choice(len(self._bits), size=n, p=table.probs)].astype(float)


# -- training ----------------------------------------------------------------

def train_causalgan(controller, features: np.ndarray, labels: np.ndarray, cfg: CgTrainConfig = CgTrainConfig(),
                    label_names: Sequence[str] | None = None, nets: Mapping | None = None, log=None):
    """Alternate one discriminator/Labeler/Anti-Labeler update with ``gen_updates`` generator updates.

    Fake labels come from ``controller.sample`` and are rounded. Returns
    ``(nets, trace)`` with trace columns
    ``d_loss, g_loss, labeler_loss, antilabeler_loss, decay_coeff``.
    """
    features = np.asarray(features, dtype=float)
    labels = np.asarray(labels, dtype=float)
    if label_names is not None and tuple(label_names) != tuple(controller.labels):
        raise SchemaError(f"data labels {tuple(label_names)} != controller labels {tuple(controller.labels)}")
    if labels.shape[1] != len(controller.labels) or len(labels) != len(features):
        raise SchemaError("features, labels and controller disagree in shape")
    nets = dict(nets) if nets is not None else build_networks(features.shape[1], labels.shape[1], cfg)
    G, D, LR, LG = nets["generator"], nets["discriminator"], nets["labeler"], nets["antilabeler"]
    opts = {
        "g": adam_state(G.parameters(), cfg.lr_g, cfg.beta1, cfg.beta2),
        "d": adam_state(D.parameters(), cfg.lr_d, cfg.beta1, cfg.beta2),
        "lr": adam_state(LR.parameters(), cfg.lr_d, cfg.beta1, cfg.beta2),
        "lg": adam_state(LG.parameters(), cfg.lr_d, cfg.beta1, cfg.beta2),
    }
    rho = labels.mean(axis=0) if cfg.global_rho else None
    rng = np.random.default_rng(cfg.seed + 1)
    trace = MetricTrace(("d_loss", "g_loss", "labeler_loss", "antilabeler_loss", "decay_coeff"))
    B, n = cfg.batch_size, len(features)

    def fake_batch():
        lg = round_labels(controller.sample(B, rng)).astype(float)
        return lg, rng.random((B, G.noise_dim))

    g_step = 0
    for it in range(1, cfg.steps + 1):
        if cfg.lr_decay:
            frac = 1.0 - (it - 1) / cfg.steps
            for key, opt in opts.items():
                opt.lr = (cfg.lr_g if key == "g" else cfg.lr_d) * frac
        idx = rng.integers(0, n, B)
        x, l = features[idx], labels[idx]
        lg, z = fake_batch()
        with ad.no_record():
            xg = G(z, lg).data
        d_loss = discriminator_loss(forward(D, x), forward(D, xg))
        lr_loss = labeler_loss(forward(LR, x), l, cfg.variant, rho=rho)
        lg_loss = antilabeler_loss(forward(LG, xg), lg, cfg.variant, rho=rho)
        # the three critics touch disjoint parameters; gradients first, then updates
        grads = [(D, ad.gradient(d_loss, D.parameters()), opts["d"]),
                 (LR, ad.gradient(lr_loss, LR.parameters()), opts["lr"]),
                 (LG, ad.gradient(lg_loss, LG.parameters()), opts["lg"])]
        for net, g, opt in grads:
            adam_step(net.parameters(), g, opt)
        for _ in range(cfg.gen_updates):
            lg, z = fake_batch()
            xg = G(z, lg)
            g_loss = generator_loss(forward(D, xg), (forward(LR, xg), lg), (forward(LG, xg), lg), g_step, cfg)
            adam_step(G.parameters(), ad.gradient(g_loss, G.parameters()), opts["g"])
            g_step += 1
        if it % cfg.eval_every == 0 or it == cfg.steps:
            trace.append(it, d_loss=d_loss.item(), g_loss=g_loss.item(), labeler_loss=lr_loss.item(),
                         antilabeler_loss=lg_loss.item(), decay_coeff=decay_coefficient(g_step, cfg.decay_T))
            if log:
                log(f"step {it} d={d_loss.item():.4f} g={g_loss.item():.4f} "
                    f"lr={lr_loss.item():.4f} lg={lg_loss.item():.4f}")
    return nets, trace


def train_label_estimator(net: Mlp, sampler, steps: int, batch_size: int = 128, lr: float = 1e-3,
                          variant: str = "per-label", seed: int = 0, lr_decay: bool = False) -> Mlp:
    """Fit a Labeler or Anti-Labeler alone on ``sampler(n, rng) -> (features, labels)``."""
    rng = np.random.default_rng(seed)
    opt = adam_state(net.parameters(), lr, 0.5, 0.999)
    for it in range(steps):
        if lr_decay:
            opt.lr = lr * (1.0 - it / steps)
        x, l = sampler(batch_size, rng)
        loss = labeler_loss(forward(net, x), l, variant)
        adam_step(net.parameters(), ad.gradient(loss, net.parameters()), opt)
    return net


# -- sampling ----------------------------------------------------------------

def sample_joint(controller, cond_gen: CondGenerator, n: int, mode: str = "observe",
                 s: Intervention | None = None, evidence: Mapping[str, int] | None = None,
                 seed: int = 0) -> tuple[np.ndarray, np.ndarray]:
    """Labels from the controller (observed, intervened or conditioned), then features.

    Conditioning is rejection sampling on rounded labels; evidence whose
    estimated acceptance falls below the floor raises ImpossibleEvidence.
    """
    rng = np.random.default_rng(seed)
    names = tuple(controller.labels)
    if mode == "observe":
        labels = round_labels(controller.sample(n, rng))
    elif mode == "do":
        if not s:
            raise DomainError("do mode needs an intervention")
        labels = round_labels(controller.sample(n, rng, intervention=s))
    elif mode == "condition":
        if not evidence:
            raise DomainError("condition mode needs evidence")
        sampler = lambda k: round_labels(controller.sample(k, rng))  # noqa: E731
        p, _ = acceptance_rate(sampler, names, evidence, PROBE_DRAWS)
        if p < ACCEPTANCE_FLOOR:
            raise ImpossibleEvidence(f"evidence {dict(evidence)} is (nearly) never generated", acceptance=p)
        labels = rejection_condition(sampler, names, evidence, n)
    else:
        raise DomainError(f"unknown sampling mode {mode!r}")
    features = cond_gen.sample(labels, rng) if cond_gen is not None else np.zeros((n, 0))
    return labels.astype(np.int8), features


# -- toy problems ------------------------------------------------------------

@dataclass(frozen=True)
class MixtureToy:
    """Features are ``mean(l) + sigma * N(0, I)`` with ``mean(l) = spread * (2l - 1)``."""

    table: ProbTable
    sigma: float = 1.0
    spread: float = 3.0

    @property
    def d(self) -> int:
        return len(self.table.labels)

    def means(self) -> np.ndarray:
        bits = all_bits(self.d).astype(float)
        return self.spread * (2.0 * bits - 1.0)

    def sample(self, n: int, rng: np.random.Generator) -> tuple[np.ndarray, np.ndarray]:
        bits = all_bits(self.d)
        k = rng.choice(len(bits), size=n, p=self.table.probs)
        x = self.means()[k] + self.sigma * rng.standard_normal((n, self.d))
        return x, bits[k].astype(float)

    def bayes_labels(self, x: np.ndarray) -> np.ndarray:
        """Most probable label vector for each feature row."""
        x = np.asarray(x, dtype=float)
        sq = ((x[:, None, :] - self.means()[None]) ** 2).sum(axis=2)
        with np.errstate(divide="ignore"):
            score = np.log(self.table.probs)[None] - sq / (2 * self.sigma ** 2)
        return all_bits(self.d)[np.argmax(score, axis=1)]


@dataclass(frozen=True)
class AtomToy:
    """Discrete features: ``x`` is one of ``len(atoms)`` fixed points.

    ``p_atom[k, a] = P(x = atom a | labels = bits[k])``. When every atom has
    a single label vector with positive mass, the labels are a deterministic
    function of the feature.
    """

    table: ProbTable
    atoms: np.ndarray
    p_atom: np.ndarray

    @property
    def d(self) -> int:
        return len(self.table.labels)

    def joint(self) -> np.ndarray:
        """``P(labels = bits[k], x = atom a)`` as a (2^d, n_atoms) array."""
        return self.table.probs[:, None] * self.p_atom

    def posterior(self) -> np.ndarray:
        """Per-atom ``P(l_j = 1 | x = atom)``, shape (n_atoms, d)."""
        j = self.joint()
        bits = all_bits(self.d).astype(float)
        return (bits.T @ j / j.sum(axis=0)).T

    def sample(self, n: int, rng: np.random.Generator) -> tuple[np.ndarray, np.ndarray]:
        j = self.joint().reshape(-1)
        cell = rng.choice(len(j), size=n, p=j / j.sum())
        k, a = np.divmod(cell, self.p_atom.shape[1])
        return self.atoms[a].astype(float), all_bits(self.d)[k].astype(float)

    def snap(self, x: np.ndarray) -> np.ndarray:
        """Index of the nearest atom for each feature row."""
        sq = ((np.asarray(x)[:, None, :] - self.atoms[None]) ** 2).sum(axis=2)
        return np.argmin(sq, axis=1)


def ring_atoms(n: int, radius: float = 3.0) -> np.ndarray:
    angle = 2 * np.pi * np.arange(n) / n
    return radius * np.stack([np.cos(angle), np.sin(angle)], axis=1)


def empirical_atom_joint(labels: np.ndarray, atom_index: np.ndarray, n_atoms: int) -> np.ndarray:
    k = joint_index(labels)
    d = labels.shape[1]
    counts = np.zeros((2 ** d, n_atoms))
    np.add.at(counts, (k, atom_index), 1.0)
    return counts / counts.sum()
