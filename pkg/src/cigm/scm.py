"""Ground-truth structural causal models and exact discrete oracles.

Every node is computed as ``f(parents..., u)`` with one exogenous Uniform[0, 1]
draw ``u`` per node and row. Binary mechanisms threshold ``u`` against a
conditional probability table, so the same SCM can be sampled or solved
exactly by enumeration.
"""
from __future__ import annotations

import csv
import itertools
import json
from dataclasses import dataclass, field
from math import comb
from pathlib import Path
from typing import Mapping, Sequence, Union

import numpy as np

from .errors import DomainError, ImpossibleEvidence, SchemaError, UnknownNode, UnsupportedMechanism
from .graph import CausalGraph, Intervention, mutilate

MAX_EXACT_LABELS = 20


# -- mechanisms ---------------------------------------------------------------

def n_cubic_monomials(n_vars: int) -> int:
    return comb(n_vars + 3, 3)


def cubic_features(x: np.ndarray) -> np.ndarray:
    """All monomials of degree <= 3 of the columns of ``x`` (constant first)."""
    n, k = x.shape
    cols = [np.ones(n)]
    for deg in (1, 2, 3):
        for idx in itertools.combinations_with_replacement(range(k), deg):
            cols.append(np.prod(x[:, idx], axis=1))
    return np.stack(cols, axis=1)


@dataclass(frozen=True)
class CubicPoly:
    """Cubic polynomial in (parents..., exogenous); optionally squashed by tanh."""

    coefficients: np.ndarray
    squash: bool = True

    def arity(self) -> int:
        for k in range(1, 64):
            if n_cubic_monomials(k) == len(self.coefficients):
                return k
        raise DomainError(f"{len(self.coefficients)} is not a cubic monomial count")

    def __call__(self, parents: np.ndarray, u: np.ndarray) -> np.ndarray:
        x = np.column_stack([parents, u])
        out = cubic_features(x) @ self.coefficients
        return np.tanh(out) if self.squash else out


@dataclass(frozen=True)
class DiscreteTable:
    """P(child = 1 | parents) indexed by the parent bit-vector (first parent = most significant bit).

    ``invert`` selects between two functional forms with the same conditional
    law: ``u < p`` (default) or ``u >= 1 - p``.
    """

    probs: tuple[float, ...]
    invert: bool = False

    def __post_init__(self):
        probs = tuple(float(p) for p in self.probs)
        if any(not 0.0 <= p <= 1.0 for p in probs):
            raise DomainError(f"conditional probabilities must lie in [0, 1]: {probs}")
        n = len(probs).bit_length() - 1
        if len(probs) != 1 << n:
            raise DomainError(f"table length {len(probs)} is not a power of two")
        object.__setattr__(self, "probs", probs)

    def arity(self) -> int:
        return len(self.probs).bit_length()  # parents + exogenous

    def __call__(self, parents: np.ndarray, u: np.ndarray) -> np.ndarray:
        k = parents.shape[1]
        weights = 1 << np.arange(k - 1, -1, -1)
        idx = (parents > 0.5).astype(np.int64) @ weights if k else np.zeros(len(u), dtype=np.int64)
        p = np.asarray(self.probs)[idx]
        hit = u >= 1.0 - p if self.invert else u < p
        return hit.astype(float)


@dataclass(frozen=True)
class Constant:
    value: float

    def arity(self) -> int | None:
        return None  # accepts any parent set

    def __call__(self, parents: np.ndarray, u: np.ndarray) -> np.ndarray:
        return np.full(len(u), float(self.value))


Mechanism = Union[CubicPoly, DiscreteTable, Constant]


@dataclass(frozen=True)
class Scm:
    graph: CausalGraph
    mechanisms: Mapping[str, Mechanism]
    exogenous: Mapping[str, str] = field(default_factory=dict)

    def __post_init__(self):
        g = self.graph
        if set(self.mechanisms) != set(g.nodes):
            raise SchemaError("mechanisms must cover exactly the graph nodes")
        exo = {n: self.exogenous.get(n, "uniform") for n in g.nodes}
        for n, kind in exo.items():
            if kind != "uniform":
                raise UnsupportedMechanism(f"exogenous family {kind!r} for {n!r}; only 'uniform' is supported")
        object.__setattr__(self, "exogenous", exo)
        for n in g.nodes:
            ar = self.mechanisms[n].arity()
            if ar is not None and ar != len(g.parents(n)) + 1:
                raise SchemaError(f"mechanism for {n!r} has arity {ar}, expected {len(g.parents(n)) + 1}")

    @property
    def labels(self) -> tuple[str, ...]:
        return self.graph.nodes


def _run(scm: Scm, u: np.ndarray, clamp: Intervention) -> np.ndarray:
    g = scm.graph
    out = np.zeros_like(u)
    for node in g.topological_order():
        j = g.index(node)
        if node in clamp:
            out[:, j] = float(clamp[node])
            continue
        pa = [g.index(p) for p in g.parents(node)]
        out[:, j] = scm.mechanisms[node](out[:, pa], u[:, j])
    return out


def sample(scm: Scm, n: int, seed: int) -> np.ndarray:
    """Ancestral sampling; returns an ``(n, d)`` array with columns in node order."""
    if n < 1:
        raise DomainError("n must be >= 1")
    u = np.random.default_rng(seed).random((n, len(scm.graph)))
    return _run(scm, u, {})


def sample_do(scm: Scm, s: Intervention, n: int, seed: int) -> np.ndarray:
    """Sample the mutilated SCM. Exogenous draws match ``sample`` for the same seed."""
    for name, val in s.items():
        scm.graph.index(name)
        if val not in (0, 1):
            raise DomainError(f"intervention value for {name!r} must be 0 or 1")
    if n < 1:
        raise DomainError("n must be >= 1")
    u = np.random.default_rng(seed).random((n, len(scm.graph)))
    return _run(scm, u, s)


def do(scm: Scm, s: Intervention) -> Scm:
    """The intervened SCM: mutilated graph, intervened mechanisms replaced by constants."""
    g = mutilate(scm.graph, s)
    mechs = {n: (Constant(float(s[n])) if n in s else m) for n, m in scm.mechanisms.items()}
    return Scm(g, mechs, scm.exogenous)


def make_cubic_scm(graph: CausalGraph, seed: int, squash: bool = True) -> Scm:
    rng = np.random.default_rng(seed)
    mechs = {}
    for node in graph.nodes:
        k = len(graph.parents(node)) + 1
        mechs[node] = CubicPoly(rng.uniform(-1.0, 1.0, n_cubic_monomials(k)), squash=squash)
    return Scm(graph, mechs)


def random_discrete_scm(graph: CausalGraph, seed: int, low: float = 0.1, high: float = 0.9) -> Scm:
    """DiscreteTable SCM with every conditional drawn from Uniform[low, high]."""
    rng = np.random.default_rng(seed)
    mechs = {
        n: DiscreteTable(tuple(rng.uniform(low, high, 1 << len(graph.parents(n)))))
        for n in graph.nodes
    }
    return Scm(graph, mechs)


# -- exact tables ---------------------------------------------------------------

def all_bits(d: int) -> np.ndarray:
    """Rows of every binary vector of length d, in ProbTable index order."""
    idx = np.arange(1 << d)
    return ((idx[:, None] >> np.arange(d - 1, -1, -1)) & 1).astype(np.int8)


@dataclass(frozen=True)
class ProbTable:
    """Exact distribution over binary label vectors.

    Entry ``k`` is the probability of the vector whose bits (first label most
    significant) spell ``k``; ``as_tensor()`` exposes the same numbers with one
    axis per label.
    """

    labels: tuple[str, ...]
    probs: np.ndarray

    def __post_init__(self):
        labels = tuple(self.labels)
        p = np.asarray(self.probs, dtype=float).reshape(-1)
        if len(p) != 1 << len(labels):
            raise SchemaError(f"{len(labels)} labels need {1 << len(labels)} entries, got {len(p)}")
        if (p < -1e-15).any() or abs(p.sum() - 1.0) > 1e-9:
            raise DomainError("probabilities must be nonnegative and sum to 1")
        p = np.clip(p, 0.0, None)
        p.setflags(write=False)
        object.__setattr__(self, "labels", labels)
        object.__setattr__(self, "probs", p)

    @property
    def d(self) -> int:
        return len(self.labels)

    def as_tensor(self) -> np.ndarray:
        return self.probs.reshape((2,) * self.d)

    def axis(self, label: str) -> int:
        try:
            return self.labels.index(label)
        except ValueError:
            raise UnknownNode(f"unknown label {label!r}") from None

    def marginal(self, label: str) -> float:
        """P(label = 1)."""
        t = np.moveaxis(self.as_tensor(), self.axis(label), 0)
        return float(t[1].sum())

    def marginals(self) -> dict[str, float]:
        return {lab: self.marginal(lab) for lab in self.labels}

    def project(self, labels: Sequence[str]) -> ProbTable:
        """Marginal table over ``labels`` (in the given order)."""
        axes = [self.axis(l) for l in labels]
        other = tuple(i for i in range(self.d) if i not in axes)
        t = self.as_tensor().sum(axis=other) if other else self.as_tensor()
        # remaining axes are in increasing original order; permute to the requested order
        kept = sorted(axes)
        t = np.transpose(t, [kept.index(a) for a in axes]) if labels else np.asarray(t)
        return ProbTable(tuple(labels), np.asarray(t).reshape(-1))

    def prob(self, assignment: Mapping[str, int]) -> float:
        t = self.as_tensor()
        index = [slice(None)] * self.d
        for name, v in assignment.items():
            index[self.axis(name)] = int(v)
        return float(np.asarray(t[tuple(index)]).sum())

    def to_json(self) -> dict:
        return {"labels": list(self.labels), "probs": self.probs.tolist()}

    @classmethod
    def from_json(cls, obj: Mapping) -> ProbTable:
        return cls(tuple(obj["labels"]), np.asarray(obj["probs"], dtype=float))


def _discrete_probs(mech: Mechanism, n_parents: int) -> np.ndarray:
    if isinstance(mech, DiscreteTable):
        return np.asarray(mech.probs)
    if isinstance(mech, Constant) and mech.value in (0.0, 1.0):
        return np.full(1 << n_parents, float(mech.value))
    raise UnsupportedMechanism(f"{type(mech).__name__} has no exact discrete form")


def exact_joint(scm: Scm) -> ProbTable:
    """Product of the conditional tables over all 2^d label vectors."""
    g = scm.graph
    d = len(g)
    if d > MAX_EXACT_LABELS:
        raise DomainError(f"exact tables are limited to {MAX_EXACT_LABELS} labels")
    bits = all_bits(d)
    p = np.ones(len(bits))
    for node in g.nodes:
        j = g.index(node)
        pa = [g.index(q) for q in g.parents(node)]
        table = _discrete_probs(scm.mechanisms[node], len(pa))
        weights = 1 << np.arange(len(pa) - 1, -1, -1)
        p1 = table[bits[:, pa].astype(np.int64) @ weights] if pa else np.full(len(bits), table[0])
        p *= np.where(bits[:, j] == 1, p1, 1.0 - p1)
    return ProbTable(g.nodes, p)


def _family_conditional(t: np.ndarray, i: int, parents: Sequence[int]) -> np.ndarray:
    """P(x_i | x_parents) from a joint tensor, broadcastable against it.

    Conditionals on zero-probability parent configurations are undefined; they
    are set to 1/2.
    """
    keep = {i, *parents}
    other = tuple(a for a in range(t.ndim) if a not in keep)
    m = t.sum(axis=other, keepdims=True) if other else t
    z = m.sum(axis=i, keepdims=True)
    with np.errstate(invalid="ignore", divide="ignore"):
        c = np.where(z > 0, m / np.where(z > 0, z, 1.0), 0.5)
    return c


def interventional_joint(table: ProbTable, graph: CausalGraph, s: Intervention) -> ProbTable:
    """Truncated factorization: drop the intervened factors, clamp intervened values."""
    if tuple(graph.nodes) != table.labels:
        raise SchemaError("graph nodes and table labels must agree in order")
    for name, v in s.items():
        graph.index(name)
        if v not in (0, 1):
            raise DomainError(f"intervention value for {name!r} must be 0 or 1")
    if not s:
        return table
    t = table.as_tensor()
    out = np.ones_like(t)
    for node in graph.nodes:
        i = graph.index(node)
        if node in s:
            point = np.zeros(2)
            point[s[node]] = 1.0
            shape = [1] * t.ndim
            shape[i] = 2
            out = out * point.reshape(shape)
        else:
            out = out * _family_conditional(t, i, [graph.index(p) for p in graph.parents(node)])
    return ProbTable(table.labels, out.reshape(-1))


def graph_projection(table: ProbTable, graph: CausalGraph) -> ProbTable:
    """Product of the table's own family conditionals along ``graph``.

    This is the closest distribution (in KL from the table) that factorises
    along ``graph``; it equals the table when the graph is an I-map of it.
    """
    if tuple(graph.nodes) != table.labels:
        raise SchemaError("graph nodes and table labels must agree in order")
    t = table.as_tensor()
    out = np.ones_like(t)
    for node in graph.nodes:
        out = out * _family_conditional(t, graph.index(node), [graph.index(p) for p in graph.parents(node)])
    return ProbTable(table.labels, out.reshape(-1))


def conditional_joint(table: ProbTable, evidence: Mapping[str, int]) -> ProbTable:
    t = np.array(table.as_tensor())
    mask = np.ones_like(t, dtype=bool)
    for name, v in evidence.items():
        ax = table.axis(name)
        sel = np.zeros(2, dtype=bool)
        sel[int(v)] = True
        shape = [1] * t.ndim
        shape[ax] = 2
        mask &= sel.reshape(shape)
    z = t[mask].sum()
    if z <= 1e-15:
        raise ImpossibleEvidence(f"evidence {dict(evidence)} has probability zero", acceptance=0.0)
    return ProbTable(table.labels, np.where(mask, t, 0.0).reshape(-1) / z)


def exact_do_joint(scm: Scm, s: Intervention) -> ProbTable:
    """Interventional table via mechanism surgery (independent of ``interventional_joint``)."""
    return exact_joint(do(scm, s))


# -- files ---------------------------------------------------------------------------

def scm_to_json(scm: Scm, graph_ref: str | None = None) -> dict:
    nodes = {}
    for n, m in scm.mechanisms.items():
        if isinstance(m, CubicPoly):
            nodes[n] = {"type": "cubic", "coefficients": list(map(float, m.coefficients)), "squash": m.squash}
        elif isinstance(m, DiscreteTable):
            nodes[n] = {"type": "table", "probs": list(m.probs), "invert": m.invert}
        else:
            nodes[n] = {"type": "constant", "value": m.value}
        nodes[n]["exogenous"] = scm.exogenous[n]
    from .graph import serialize_graph

    out = {"format": "cigm-scm/1", "graph": serialize_graph(scm.graph), "nodes": nodes}
    if graph_ref:
        out["graph_ref"] = graph_ref
    return out


def scm_from_json(obj: Mapping) -> Scm:
    from .graph import parse_graph

    g = parse_graph(obj["graph"])
    mechs: dict[str, Mechanism] = {}
    exo = {}
    for n, spec in obj["nodes"].items():
        kind = spec["type"]
        if kind == "cubic":
            mechs[n] = CubicPoly(np.asarray(spec["coefficients"], dtype=float), bool(spec.get("squash", True)))
        elif kind == "table":
            mechs[n] = DiscreteTable(tuple(spec["probs"]), bool(spec.get("invert", False)))
        elif kind == "constant":
            mechs[n] = Constant(float(spec["value"]))
        else:
            raise UnsupportedMechanism(f"unknown mechanism type {kind!r}")
        exo[n] = spec.get("exogenous", "uniform")
    return Scm(g, mechs, exo)


def save_scm(scm: Scm, path: str | Path) -> None:
    Path(path).write_text(json.dumps(scm_to_json(scm), indent=1))


def load_scm(path: str | Path) -> Scm:
    return scm_from_json(json.loads(Path(path).read_text()))


def write_dataset(path: str | Path, labels: Sequence[str], data: np.ndarray, binary: bool = False) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(labels)
        if binary:
            w.writerows(np.asarray(data, dtype=np.int64).tolist())
        else:
            w.writerows([[repr(float(v)) for v in row] for row in data])


def read_dataset(path: str | Path) -> tuple[tuple[str, ...], np.ndarray]:
    with open(path, newline="") as fh:
        r = csv.reader(fh)
        header = next(r)
        rows = [[float(v) for v in row] for row in r if row]
    return tuple(header), np.asarray(rows, dtype=float).reshape(-1, len(header))
