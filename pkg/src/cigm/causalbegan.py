"""Boundary-equilibrium training with label margins.

The discriminator is an autoencoder with a label head. Three proportional
controllers keep the reconstruction margin, the label margin, and the margin
between them near equilibrium.
"""
from __future__ import annotations

from dataclasses import dataclass, replace
from typing import Mapping, Sequence

import numpy as np

from . import autodiff as ad
from .autodiff import DiffValue
from .causalgan import CondGenerator, MixtureToy
from .controller import round_labels
from .errors import DomainError, SchemaError
from .evaluation import MetricTrace
from .nn import Mlp, MlpSpec, adam_state, adam_step, forward, init_mlp
from .scm import all_bits


@dataclass(frozen=True)
class MarginState:
    c1: float = 0.0
    c2: float = 0.0
    c3: float = 0.0
    gamma1: float = 0.5
    gamma2: float = 0.5
    gamma3: float = 0.5
    lambda1: float = 0.001
    lambda2: float = 0.00008
    lambda3: float = 0.01


def _relu(v: float) -> float:
    return max(v, 0.0)


def compute_margins(L_real: float, L_fake: float, Lsq_real: float, Lsq_fake: float,
                    state: MarginState) -> tuple[float, float, float]:
    b1 = state.gamma1 * L_real - L_fake
    b2 = state.gamma2 * Lsq_real - Lsq_fake
    b3 = state.gamma3 * _relu(b1) - _relu(b2)
    return b1, b2, b3


def update_coeffs(state: MarginState, b1: float, b2: float, b3: float) -> MarginState:
    clip = lambda v: float(min(max(v, 0.0), 1.0))  # noqa: E731
    return replace(state,
                   c1=clip(state.c1 + state.lambda1 * b1),
                   c2=clip(state.c2 + state.lambda2 * b2),
                   c3=clip(state.c3 + state.lambda3 * b3))


def began_losses(L_real, L_fake, Lsq_real, Lsq_fake, state: MarginState) -> tuple[DiffValue, DiffValue]:
    """``Loss_D = L(x) - c1 L(G) + Lsq_real - c2 Lsq_fake`` and ``Loss_G = L(G) + c3 Lsq_fake``."""
    L_real, L_fake, Lsq_real, Lsq_fake = map(ad.lift, (L_real, L_fake, Lsq_real, Lsq_fake))
    loss_d = ad.sub(ad.add(ad.sub(L_real, ad.mul(L_fake, state.c1)), Lsq_real), ad.mul(Lsq_fake, state.c2))
    loss_g = ad.add(L_fake, ad.mul(Lsq_fake, state.c3))
    return loss_d, loss_g


def m_complete(L_real: float, b1: float, b2: float, b3: float) -> float:
    return L_real + abs(b1) + abs(b2) + abs(b3)


class AutoencoderDisc:
    """Encoder, decoder, and a label head on the code (or on the input when not shared)."""

    def __init__(self, encoder: Mlp, decoder: Mlp, label_head: Mlp, shared: bool = True):
        self.encoder = encoder
        self.decoder = decoder
        self.label_head = label_head
        self.shared = shared

    def parameters(self) -> list[DiffValue]:
        return self.encoder.parameters() + self.decoder.parameters() + self.label_head.parameters()

    def reconstruction_loss(self, x) -> DiffValue:
        """Mean absolute reconstruction error."""
        x = ad.lift(x)
        rec = forward(self.decoder, forward(self.encoder, x))
        return ad.abs_(ad.sub(rec, x)).mean()

    def label_probs(self, x) -> DiffValue:
        return forward(self.label_head, forward(self.encoder, x) if self.shared else x)

    def networks(self) -> dict[str, Mlp]:
        return {"encoder": self.encoder, "decoder": self.decoder, "label_head": self.label_head}


def label_sq_loss(labels, probs) -> DiffValue:
    return ad.square(ad.sub(probs, np.asarray(labels, dtype=float))).mean()


@dataclass(frozen=True)
class BeganTrainConfig:
    lr: float = 0.00008
    beta1: float = 0.5
    beta2: float = 0.999
    batch_size: int = 64
    noise_dim: int = 4
    hidden_width: int = 32
    code_dim: int = 8
    steps: int = 3000
    eval_every: int = 10
    shared_labeler: bool = True
    fixed_c3: float | None = None
    margins: MarginState = MarginState()
    seed: int = 0

    def __post_init__(self):
        for name in ("lr", "batch_size", "noise_dim", "hidden_width", "code_dim", "steps", "eval_every"):
            if getattr(self, name) <= 0:
                raise DomainError(f"{name} must be positive")


def build_began(feature_dim: int, n_labels: int, cfg: BeganTrainConfig = BeganTrainConfig()):
    rng = np.random.default_rng(cfg.seed)
    h = cfg.hidden_width
    enc = init_mlp(MlpSpec((feature_dim, h, h, cfg.code_dim), "relu", "identity"), rng)
    dec = init_mlp(MlpSpec((cfg.code_dim, h, h, feature_dim), "relu", "identity"), rng)
    head_in = cfg.code_dim if cfg.shared_labeler else feature_dim
    head = init_mlp(MlpSpec((head_in, h, n_labels), "relu", "sigmoid"), rng)
    gen = CondGenerator(init_mlp(MlpSpec((cfg.noise_dim + n_labels, h, h, h, feature_dim), "relu", "identity"), rng),
                        cfg.noise_dim, n_labels)
    return gen, AutoencoderDisc(enc, dec, head, cfg.shared_labeler)


TRACE_COLUMNS = ("L_real", "L_fake", "b1", "b2", "b3", "c1", "c2", "c3", "m_complete")


def train_causalbegan(controller, features: np.ndarray, labels: np.ndarray,
                      cfg: BeganTrainConfig = BeganTrainConfig(), label_names: Sequence[str] | None = None,
                      log=None):
    """Simultaneous generator / autoencoder updates with margin control.

    Both gradient sets are computed from the same parameter snapshot before
    either is applied. Returns ``(gen, disc, state, trace)``.
    """
    features = np.asarray(features, dtype=float)
    labels = np.asarray(labels, dtype=float)
    if label_names is not None and tuple(label_names) != tuple(controller.labels):
        raise SchemaError(f"data labels {tuple(label_names)} != controller labels {tuple(controller.labels)}")
    if labels.shape[1] != len(controller.labels) or len(labels) != len(features):
        raise SchemaError("features, labels and controller disagree in shape")
    gen, disc = build_began(features.shape[1], labels.shape[1], cfg)
    state = cfg.margins
    if cfg.fixed_c3 is not None:
        state = replace(state, c3=cfg.fixed_c3)
    g_params, d_params = gen.parameters(), disc.parameters()
    g_opt = adam_state(g_params, cfg.lr, cfg.beta1, cfg.beta2)
    d_opt = adam_state(d_params, cfg.lr, cfg.beta1, cfg.beta2)
    rng = np.random.default_rng(cfg.seed + 1)
    trace = MetricTrace(TRACE_COLUMNS)
    B, n = cfg.batch_size, len(features)
    for it in range(1, cfg.steps + 1):
        idx = rng.integers(0, n, B)
        x, l = features[idx], labels[idx]
        lg = round_labels(controller.sample(B, rng)).astype(float)
        xg = gen(rng.random((B, gen.noise_dim)), lg)
        L_real = disc.reconstruction_loss(x)
        L_fake = disc.reconstruction_loss(xg)
        Lsq_real = label_sq_loss(l, disc.label_probs(x))
        Lsq_fake = label_sq_loss(lg, disc.label_probs(xg))
        loss_d, loss_g = began_losses(L_real, L_fake, Lsq_real, Lsq_fake, state)
        gd = ad.gradient(loss_d, d_params)
        gg = ad.gradient(loss_g, g_params)
        adam_step(d_params, gd, d_opt)
        adam_step(g_params, gg, g_opt)
        vals = (L_real.item(), L_fake.item(), Lsq_real.item(), Lsq_fake.item())
        b = compute_margins(*vals, state)
        new = update_coeffs(state, *b)
        state = new if cfg.fixed_c3 is None else replace(new, c3=cfg.fixed_c3)
        if it % cfg.eval_every == 0 or it == cfg.steps:
            trace.append(it, L_real=vals[0], L_fake=vals[1], b1=b[0], b2=b[1], b3=b[2],
                         c1=state.c1, c2=state.c2, c3=state.c3, m_complete=m_complete(vals[0], *b))
            if log and it % (cfg.eval_every * 50) == 0:
                log(f"step {it} L={vals[0]:.4f} M={m_complete(vals[0], *b):.4f} c={state.c1:.3f},{state.c2:.3f},{state.c3:.3f}")
    return gen, disc, state, trace


def rare_label_score(gen: CondGenerator, toy: MixtureToy, n: int = 2000, seed: int = 0,
                     radius: float = 2.0) -> float:
    """Consistency on the least likely label vector.

    A sample counts when the Bayes classifier returns the intended labels and
    it lies within ``radius`` standard deviations of the intended component
    mean, so it must be both correctly labelled and on the data manifold.
    """
    k = int(np.argmin(toy.table.probs))
    target = all_bits(toy.d)[k]
    x = gen.sample(np.tile(target.astype(float), (n, 1)), np.random.default_rng(seed))
    agree = np.all(toy.bayes_labels(x) == target, axis=1)
    dist = np.sqrt(((x - toy.means()[k]) ** 2).sum(axis=1)) / toy.sigma
    return float(np.mean(agree & (dist <= radius)))
