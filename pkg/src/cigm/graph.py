"""Directed acyclic graphs over named binary labels.

Graph files are plain text, one statement per line::

    # comment
    Young
    Male -> Bald

A bare name declares a node, ``Parent -> Child`` declares an edge. Nodes keep
first-mention order, which is also the tie-break for topological sorting.
"""
from __future__ import annotations

import heapq
from dataclasses import dataclass
from pathlib import Path
from typing import Iterable, Mapping, Sequence

from .errors import CyclicGraph, DuplicateEdge, DuplicateNode, ParseError, UnknownNode

Intervention = Mapping[str, int]


def _check_name(name: str) -> str:
    if not isinstance(name, str) or not name.strip():
        raise ParseError(f"invalid label name {name!r}")
    if any(c.isspace() for c in name) or "->" in name or "#" in name:
        raise ParseError(f"label name may not contain whitespace, '->' or '#': {name!r}")
    return name


@dataclass(frozen=True)
class CausalGraph:
    nodes: tuple[str, ...]
    edges: frozenset[tuple[str, str]]

    def __init__(self, nodes: Iterable[str], edges: Iterable[tuple[str, str]] = ()):
        nodes = tuple(_check_name(n) for n in nodes)
        if len(set(nodes)) != len(nodes):
            dup = next(n for n in nodes if nodes.count(n) > 1)
            raise DuplicateNode(f"duplicate node {dup!r}")
        edge_list = [tuple(e) for e in edges]
        if len(set(edge_list)) != len(edge_list):
            dup = next(e for e in edge_list if edge_list.count(e) > 1)
            raise DuplicateEdge(f"duplicate edge {dup[0]} -> {dup[1]}")
        known = set(nodes)
        for u, v in edge_list:
            if u not in known or v not in known:
                raise UnknownNode(f"edge {u} -> {v} references an unknown node")
            if u == v:
                raise CyclicGraph(f"self-loop on {u!r}")
        object.__setattr__(self, "nodes", nodes)
        object.__setattr__(self, "edges", frozenset(edge_list))
        object.__setattr__(self, "_index", {n: i for i, n in enumerate(nodes)})
        object.__setattr__(self, "_order", self._toposort())

    def __repr__(self) -> str:
        return f"CausalGraph(nodes={list(self.nodes)}, edges={sorted(self.edges, key=self._edge_key)})"

    def __len__(self) -> int:
        return len(self.nodes)

    def _edge_key(self, e: tuple[str, str]) -> tuple[int, int]:
        return self._index[e[0]], self._index[e[1]]

    def _toposort(self) -> tuple[str, ...]:
        # Kahn's algorithm; the heap pops the ready node with the smallest insertion index
        indeg = {n: 0 for n in self.nodes}
        children: dict[str, list[str]] = {n: [] for n in self.nodes}
        for u, v in self.edges:
            indeg[v] += 1
            children[u].append(v)
        ready = [self._index[n] for n in self.nodes if indeg[n] == 0]
        heapq.heapify(ready)
        order = []
        while ready:
            n = self.nodes[heapq.heappop(ready)]
            order.append(n)
            for c in children[n]:
                indeg[c] -= 1
                if indeg[c] == 0:
                    heapq.heappush(ready, self._index[c])
        if len(order) != len(self.nodes):
            stuck = [n for n in self.nodes if indeg[n] > 0]
            raise CyclicGraph(f"cycle among {stuck}")
        return tuple(order)

    def index(self, node: str) -> int:
        try:
            return self._index[node]
        except KeyError:
            raise UnknownNode(f"unknown node {node!r}") from None

    def parents(self, node: str) -> tuple[str, ...]:
        self.index(node)
        return tuple(sorted((u for u, v in self.edges if v == node), key=self._index.__getitem__))

    def children(self, node: str) -> tuple[str, ...]:
        self.index(node)
        return tuple(sorted((v for u, v in self.edges if u == node), key=self._index.__getitem__))

    def topological_order(self) -> tuple[str, ...]:
        return self._order

    def descendants(self, nodes: Iterable[str]) -> set[str]:
        """Nodes reachable from ``nodes`` (the starting nodes included)."""
        seen = set()
        stack = list(nodes)
        for n in stack:
            self.index(n)
        while stack:
            n = stack.pop()
            if n in seen:
                continue
            seen.add(n)
            stack.extend(self.children(n))
        return seen

    def ancestors(self, nodes: Iterable[str]) -> set[str]:
        seen = set()
        stack = list(nodes)
        while stack:
            n = stack.pop()
            if n in seen:
                continue
            seen.add(n)
            stack.extend(self.parents(n))
        return seen

    def sorted_edges(self) -> list[tuple[str, str]]:
        return sorted(self.edges, key=self._edge_key)


def topological_order(g: CausalGraph) -> tuple[str, ...]:
    return g.topological_order()


def complete_from_ordering(labels: Sequence[str]) -> CausalGraph:
    labels = list(labels)
    if len(set(labels)) != len(labels):
        raise DuplicateNode(f"duplicate labels in ordering {labels}")
    edges = [(labels[i], labels[j]) for i in range(len(labels)) for j in range(i + 1, len(labels))]
    return CausalGraph(labels, edges)


def reverse(g: CausalGraph) -> CausalGraph:
    return CausalGraph(g.nodes, [(v, u) for u, v in g.edges])


def mutilate(g: CausalGraph, s: Intervention) -> CausalGraph:
    """Remove every edge pointing into an intervened node."""
    for name in s:
        g.index(name)
    return CausalGraph(g.nodes, [(u, v) for u, v in g.edges if v not in s])


def parse_graph(text: str) -> CausalGraph:
    nodes: list[str] = []
    edges: list[tuple[str, str]] = []
    seen_edges: set[tuple[str, str]] = set()

    def mention(name: str, lineno: int) -> str:
        name = name.strip()
        try:
            _check_name(name)
        except ParseError as exc:
            raise ParseError(str(exc), lineno) from None
        if name not in nodes:
            nodes.append(name)
        return name

    for lineno, raw in enumerate(text.splitlines(), start=1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        if "->" in line:
            parts = line.split("->")
            if len(parts) != 2 or not parts[0].strip() or not parts[1].strip():
                raise ParseError(f"malformed edge statement {raw.strip()!r}", lineno)
            u, v = mention(parts[0], lineno), mention(parts[1], lineno)
            if (u, v) in seen_edges:
                raise DuplicateEdge(f"line {lineno}: duplicate edge {u} -> {v}")
            seen_edges.add((u, v))
            edges.append((u, v))
        else:
            if len(line.split()) != 1:
                raise ParseError(f"unrecognised statement {raw.strip()!r}", lineno)
            mention(line, lineno)
    return CausalGraph(nodes, edges)


def serialize_graph(g: CausalGraph) -> str:
    lines = list(g.nodes)
    lines += [f"{u} -> {v}" for u, v in g.sorted_edges()]
    return "\n".join(lines) + "\n"


def load_graph(path: str | Path) -> CausalGraph:
    p = Path(path)
    if not p.exists() and not p.suffix:
        p = bundled_graph_path(str(path))
    return parse_graph(p.read_text(encoding="utf-8"))


def bundled_graph_path(name: str) -> Path:
    """Path of a graph file shipped with the package (``g1``, ``cg1``, ``rcg1``, ...)."""
    p = Path(__file__).parent / "data" / f"{name}.graph"
    if not p.exists():
        raise FileNotFoundError(f"no bundled graph named {name!r}")
    return p


def parse_assignment(text: str) -> dict[str, int]:
    """Parse ``"Name=0,Other=1"`` into an intervention / evidence mapping."""
    out: dict[str, int] = {}
    text = text.strip()
    if not text:
        return out
    for item in text.split(","):
        if "=" not in item:
            raise ParseError(f"expected Name=0/1, got {item!r}")
        name, val = (x.strip() for x in item.split("=", 1))
        if val not in ("0", "1"):
            raise ParseError(f"value for {name!r} must be 0 or 1, got {val!r}")
        if name in out:
            raise DuplicateNode(f"{name!r} assigned twice")
        out[name] = int(val)
    return out
