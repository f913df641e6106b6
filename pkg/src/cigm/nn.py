"""Multilayer perceptrons, Adam, and the checkpoint container."""
from __future__ import annotations

import json
import struct
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Mapping, Sequence

import numpy as np

from . import autodiff as ad
from .autodiff import DiffValue
from .errors import DomainError, SchemaError, ShapeError

HIDDEN = {"relu": ad.relu, "tanh": ad.tanh}
OUTPUT = {"identity": None, "sigmoid": ad.sigmoid, "softmax": ad.softmax}


@dataclass(frozen=True)
class MlpSpec:
    widths: tuple[int, ...]
    hidden: str = "relu"
    output: str = "identity"

    def __post_init__(self):
        object.__setattr__(self, "widths", tuple(int(w) for w in self.widths))
        if len(self.widths) < 2 or any(w <= 0 for w in self.widths):
            raise DomainError(f"need at least two positive widths, got {self.widths}")
        if self.hidden not in HIDDEN:
            raise DomainError(f"unknown hidden activation {self.hidden!r}")
        if self.output not in OUTPUT:
            raise DomainError(f"unknown output activation {self.output!r}")


@dataclass
class Mlp:
    spec: MlpSpec
    weights: list[DiffValue]  # weights[k] has shape (out, in)
    biases: list[DiffValue]

    def parameters(self) -> list[DiffValue]:
        out = []
        for w, b in zip(self.weights, self.biases):
            out += [w, b]
        return out

    def __call__(self, x) -> DiffValue:
        return forward(self, x)

    def copy(self) -> Mlp:
        return Mlp(self.spec, [ad.variable(w.data.copy()) for w in self.weights],
                   [ad.variable(b.data.copy()) for b in self.biases])

    @property
    def members(self) -> int:
        """Number of stacked independent networks, 0 for a plain one."""
        return self.weights[0].shape[0] if self.weights[0].ndim == 3 else 0


def stack_mlps(mlps: Sequence[Mlp]) -> Mlp:
    """Stack same-shaped networks so they train side by side in one pass."""
    spec = mlps[0].spec
    if any(m.spec != spec or m.members for m in mlps):
        raise ShapeError("only plain networks with identical specs can be stacked")
    return Mlp(spec, [ad.variable(np.stack([m.weights[k].data for m in mlps])) for k in range(len(spec.widths) - 1)],
               [ad.variable(np.stack([m.biases[k].data for m in mlps])) for k in range(len(spec.widths) - 1)])


def member(mlp: Mlp, i: int) -> Mlp:
    """Copy of the ``i``-th network of a stack."""
    if not mlp.members:
        raise ShapeError("not a stacked network")
    return Mlp(mlp.spec, [ad.variable(w.data[i].copy()) for w in mlp.weights],
               [ad.variable(b.data[i].copy()) for b in mlp.biases])


def init_mlp(spec: MlpSpec, seed: int | np.random.Generator) -> Mlp:
    """Glorot-uniform weights, zero biases."""
    rng = np.random.default_rng(seed)
    ws, bs = [], []
    for fan_in, fan_out in zip(spec.widths[:-1], spec.widths[1:]):
        lim = np.sqrt(6.0 / (fan_in + fan_out))
        ws.append(ad.variable(rng.uniform(-lim, lim, (fan_out, fan_in))))
        bs.append(ad.variable(np.zeros(fan_out)))
    return Mlp(spec, ws, bs)


def forward(mlp: Mlp, x) -> DiffValue:
    """Apply the network; a stacked network takes and returns a leading member axis."""
    x = ad.lift(x)
    if x.ndim == 1:
        x = ad.reshape(x, (1, -1))
    want = 3 if mlp.members else 2
    if x.ndim != want or x.shape[-1] != mlp.spec.widths[0] or (mlp.members and x.shape[0] != mlp.members):
        raise ShapeError(f"input shape {x.shape} does not match width {mlp.spec.widths[0]}"
                         + (f" with {mlp.members} members" if mlp.members else ""))
    act = HIDDEN[mlp.spec.hidden]
    last = len(mlp.weights) - 1
    for k, (w, b) in enumerate(zip(mlp.weights, mlp.biases)):
        x = ad.affine(x, w, b)
        if k < last:
            x = act(x)
    out_act = OUTPUT[mlp.spec.output]
    return x if out_act is None else out_act(x)


# -- Adam --------------------------------------------------------------------

@dataclass
class AdamState:
    lr: float
    beta1: float = 0.5
    beta2: float = 0.999
    eps: float = 1e-8
    step: int = 0
    m: list[np.ndarray] = field(default_factory=list)
    v: list[np.ndarray] = field(default_factory=list)


def adam_state(params: Sequence[DiffValue], lr: float, beta1: float = 0.5,
               beta2: float = 0.999, eps: float = 1e-8) -> AdamState:
    return AdamState(lr, beta1, beta2, eps, 0,
                     [np.zeros(p.shape) for p in params], [np.zeros(p.shape) for p in params])


def adam_step(params: Sequence[DiffValue], grads: Sequence[np.ndarray], state: AdamState):
    """One bias-corrected Adam update, applied to ``params`` in place."""
    if len(params) != len(grads) or len(params) != len(state.m):
        raise ShapeError("params, grads and optimizer state disagree in length")
    state.step += 1
    t = state.step
    b1, b2 = state.beta1, state.beta2
    c1 = 1.0 - b1 ** t
    c2 = 1.0 - b2 ** t
    for p, g, m, v in zip(params, grads, state.m, state.v):
        if g.shape != p.shape:
            raise ShapeError(f"gradient shape {g.shape} != parameter shape {p.shape}")
        m *= b1
        m += (1.0 - b1) * g
        v *= b2
        v += (1.0 - b2) * g * g
        p.data -= state.lr * (m / c1) / (np.sqrt(v / c2) + state.eps)
    return params, state


# -- checkpoints -------------------------------------------------------------

MAGIC = b"CIGMCKPT"
FORMAT_VERSION = 1


def save_checkpoint(path: str | Path, networks: Mapping[str, Mlp], meta: Mapping | None = None) -> None:
    """JSON header (specs, metadata, array manifest) followed by little-endian float64 arrays."""
    arrays = []
    manifest = []
    specs = {}
    for name, net in networks.items():
        specs[name] = asdict(net.spec)
        for k, p in enumerate(net.parameters()):
            manifest.append({"network": name, "index": k, "shape": list(p.shape)})
            arrays.append(np.ascontiguousarray(p.data, dtype="<f8"))
    header = {"format_version": FORMAT_VERSION, "specs": specs, "arrays": manifest, "meta": dict(meta or {})}
    blob = json.dumps(header, sort_keys=True).encode()
    with open(path, "wb") as fh:
        fh.write(MAGIC)
        fh.write(struct.pack("<Q", len(blob)))
        fh.write(blob)
        for a in arrays:
            fh.write(a.tobytes())


def load_checkpoint(path: str | Path) -> tuple[dict[str, Mlp], dict]:
    raw = Path(path).read_bytes()
    if raw[:8] != MAGIC:
        raise SchemaError(f"{path} is not a checkpoint file")
    (n,) = struct.unpack("<Q", raw[8:16])
    header = json.loads(raw[16:16 + n])
    if header.get("format_version") != FORMAT_VERSION:
        raise SchemaError(f"unsupported checkpoint version {header.get('format_version')}")
    offset = 16 + n
    params: dict[str, list[np.ndarray]] = {name: [] for name in header["specs"]}
    for item in header["arrays"]:
        count = int(np.prod(item["shape"])) if item["shape"] else 1
        a = np.frombuffer(raw, dtype="<f8", count=count, offset=offset).reshape(item["shape"])
        params[item["network"]].append(a.astype(np.float64))
        offset += 8 * count
    nets = {}
    for name, spec in header["specs"].items():
        s = MlpSpec(tuple(spec["widths"]), spec["hidden"], spec["output"])
        ps = params[name]
        nets[name] = Mlp(s, [ad.variable(w) for w in ps[0::2]], [ad.variable(b) for b in ps[1::2]])
    return nets, header["meta"]
