"""Distances, empirical tables, rejection conditioning and report tables."""
from __future__ import annotations

import csv
import io
from dataclasses import dataclass, field
from typing import Callable, Iterable, Mapping, Sequence

import numpy as np

from .errors import DomainError, ImpossibleEvidence, SchemaError, UnknownNode
from .scm import ProbTable

ACCEPTANCE_FLOOR = 1e-4
PROBE_DRAWS = 10_000


def empirical_joint(samples: np.ndarray, labels: Sequence[str]) -> ProbTable:
    samples = np.asarray(samples)
    labels = tuple(labels)
    if samples.ndim != 2 or samples.shape[1] != len(labels):
        raise SchemaError(f"expected (n, {len(labels)}) samples, got shape {samples.shape}")
    if not np.isin(samples, (0, 1)).all():
        raise DomainError("empirical_joint needs entries in {0, 1}; round first")
    if len(samples) == 0:
        raise DomainError("no samples")
    d = len(labels)
    idx = samples.astype(np.int64) @ (1 << np.arange(d - 1, -1, -1)) if d else np.zeros(len(samples), np.int64)
    counts = np.bincount(idx, minlength=1 << d).astype(float)
    return ProbTable(labels, counts / counts.sum())


def tvd(p: ProbTable, q: ProbTable) -> float:
    if p.labels != q.labels:
        raise SchemaError(f"label mismatch: {p.labels} vs {q.labels}")
    return 0.5 * float(np.abs(p.probs - q.probs).sum())


def histogram_edges(reference: np.ndarray, bins: int = 10) -> list[np.ndarray]:
    """Equal-width bin edges per column over the reference min/max."""
    ref = np.asarray(reference, dtype=float)
    return [np.linspace(ref[:, j].min(), ref[:, j].max(), bins + 1) for j in range(ref.shape[1])]


def histogram_probs(x: np.ndarray, edges: Sequence[np.ndarray], overflow_cells: bool = False) -> np.ndarray:
    """Cell frequencies over the product of the per-coordinate bins.

    Values outside the reference range fall into the nearest edge bin, so a
    coordinate has exactly ``len(e) - 1`` cells. With ``overflow_cells`` they
    get separate under- and overflow cells instead.
    """
    x = np.asarray(x, dtype=float)
    cells = np.zeros(len(x), dtype=np.int64)
    stride = 1
    for j, e in enumerate(edges):
        nb = len(e) - 1
        b = np.clip(np.searchsorted(e, x[:, j], side="right") - 1, 0, nb - 1)
        if overflow_cells:
            b = np.where(x[:, j] < e[0], -1, np.where(x[:, j] > e[-1], nb, b)) + 1
            nb += 2
        cells += b * stride
        stride *= nb
    return np.bincount(cells, minlength=stride) / len(x)


def histogram_tvd(real: np.ndarray, fake: np.ndarray, bins: int = 10, overflow_cells: bool = False) -> float:
    """TVD between two continuous samples after binning on the real data's range."""
    real = np.asarray(real, dtype=float)
    fake = np.asarray(fake, dtype=float)
    if real.ndim != 2 or fake.ndim != 2 or real.shape[1] != fake.shape[1]:
        raise SchemaError("column mismatch")
    edges = histogram_edges(real, bins)
    return 0.5 * float(np.abs(histogram_probs(real, edges, overflow_cells)
                              - histogram_probs(fake, edges, overflow_cells)).sum())


def matches(samples: np.ndarray, labels: Sequence[str], evidence: Mapping[str, int]) -> np.ndarray:
    labels = list(labels)
    ok = np.ones(len(samples), dtype=bool)
    for name, v in evidence.items():
        if name not in labels:
            raise UnknownNode(f"unknown label {name!r}")
        ok &= samples[:, labels.index(name)] == v
    return ok


def rejection_condition(
    sampler: Callable[[int], np.ndarray],
    labels: Sequence[str],
    evidence: Mapping[str, int],
    n: int,
    max_draws: int = 10_000_000,
    chunk: int = 10_000,
) -> np.ndarray:
    """Draw ``n`` rows matching ``evidence`` by rejection.

    ``sampler(k)`` must return ``k`` rows of rounded labels. Raises
    ImpossibleEvidence when the budget runs out before ``n`` rows are accepted.
    """
    if n < 1:
        raise DomainError("n must be >= 1")
    if not evidence:
        return np.asarray(sampler(n))
    kept: list[np.ndarray] = []
    accepted = drawn = 0
    while accepted < n and drawn < max_draws:
        k = min(chunk, max_draws - drawn)
        batch = np.asarray(sampler(k))
        drawn += k
        hit = batch[matches(batch, labels, evidence)]
        kept.append(hit)
        accepted += len(hit)
    if accepted < n:
        raise ImpossibleEvidence(
            f"only {accepted} of {n} samples matched {dict(evidence)} after {drawn} draws",
            acceptance=accepted / max(drawn, 1),
        )
    return np.concatenate(kept)[:n]


def acceptance_rate(sampler: Callable[[int], np.ndarray], labels: Sequence[str],
                    evidence: Mapping[str, int], draws: int = PROBE_DRAWS) -> tuple[float, float]:
    """Fraction of ``draws`` matching ``evidence`` and its binomial standard error."""
    batch = np.asarray(sampler(draws))
    p = float(matches(batch, labels, evidence).mean())
    return p, float(np.sqrt(max(p * (1 - p), 1e-300) / draws))


def marginal_report(table: ProbTable) -> dict[str, float]:
    return table.marginals()


def pairwise_report(table: ProbTable, pair: tuple[str, str]) -> np.ndarray:
    """2x2 array ``out[a, b] = P(first = a, second = b)``."""
    return table.project(list(pair)).as_tensor().copy()


def format_marginal_table(columns: Mapping[str, Mapping[str, float]], labels: Iterable[str]) -> str:
    """Rows = labels, one column of P(L=1) per named table (data column last by convention)."""
    names = list(columns)
    head = f"{'Label, L':<22}" + "".join(f"{n:>12}" for n in names)
    lines = [head, "-" * len(head)]
    for lab in sorted(labels):
        lines.append(f"{lab:<22}" + "".join(f"{columns[n][lab]:>12.5f}" for n in names))
    return "\n".join(lines)


def format_pairwise_table(pairs: Mapping[tuple[str, str], Mapping[str, np.ndarray]]) -> str:
    """Each cell rendered as ``v[w](x)`` for up to three tables, in the given order."""
    lines = []
    for (a, b), tables in pairs.items():
        vals = list(tables.values())
        lines.append(f"{a} \\ {b}: " + " ".join(tables))
        for i in (0, 1):
            cells = []
            for j in (0, 1):
                parts = [f"{vals[0][i, j]:.2f}"]
                if len(vals) > 1:
                    parts.append(f"[{vals[1][i, j]:.2f}]")
                if len(vals) > 2:
                    parts.append(f"({vals[2][i, j]:.2f})")
                cells.append("".join(parts))
            lines.append(f"  {a}={i}:  {b}=0 {cells[0]:<20} {b}=1 {cells[1]}")
    return "\n".join(lines)


@dataclass
class MetricTrace:
    """Ordered (step, metrics) records with strictly increasing steps."""

    columns: tuple[str, ...]
    rows: list[tuple[int, dict[str, float]]] = field(default_factory=list)

    def append(self, step: int, **values: float) -> None:
        if self.rows and step <= self.rows[-1][0]:
            raise DomainError(f"trace steps must increase ({step} after {self.rows[-1][0]})")
        self.rows.append((int(step), {k: float(v) for k, v in values.items()}))

    def __len__(self) -> int:
        return len(self.rows)

    def steps(self) -> np.ndarray:
        return np.array([s for s, _ in self.rows])

    def column(self, name: str) -> np.ndarray:
        return np.array([vals.get(name, np.nan) for _, vals in self.rows])

    def to_csv(self) -> str:
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(("step",) + self.columns)
        for step, vals in self.rows:
            w.writerow([step] + [repr(vals[c]) if c in vals else "" for c in self.columns])
        return buf.getvalue()

    def write_csv(self, path) -> None:
        with open(path, "w") as fh:
            fh.write(self.to_csv())

    @classmethod
    def read_csv(cls, path) -> MetricTrace:
        with open(path, newline="") as fh:
            r = csv.reader(fh)
            header = next(r)
            trace = cls(tuple(header[1:]))
            for row in r:
                trace.append(int(row[0]), **{c: float(v) for c, v in zip(header[1:], row[1:]) if v != ""})
        return trace
