"""CelebA attribute files and a synthetic stand-in for them.

The attribute file itself is not redistributable. When it is absent, a small
discrete SCM whose marginals and selected pairwise statistics match the
published label statistics plays its role.
"""
from __future__ import annotations

from importlib import resources
from pathlib import Path
from typing import Sequence

import numpy as np

from .errors import ParseError, SchemaError
from .graph import CausalGraph, load_graph, parse_graph
from .scm import DiscreteTable, ProbTable, Scm, exact_joint, graph_projection, load_scm, sample

LABELS = ("Young", "Male", "Eyeglasses", "Bald", "Mustache", "Smiling",
          "Wearing_Lipstick", "Mouth_Slightly_Open", "Narrow_Eyes")

# Published statistics of the nine labels over the full attribute file.
DATA_MARGINALS = {
    "Bald": 0.02244, "Eyeglasses": 0.06406, "Male": 0.41675, "Mouth_Slightly_Open": 0.48343,
    "Mustache": 0.04154, "Narrow_Eyes": 0.11515, "Smiling": 0.48208, "Wearing_Lipstick": 0.47243,
    "Young": 0.77362,
}
# (Young, Male) -> probability, rounded to two decimals in the source table.
YOUNG_MALE = {(0, 0): 0.07, (0, 1): 0.15, (1, 0): 0.51, (1, 1): 0.26}
SMILING_GIVEN_MOUTH_OPEN = 0.76
SMILING_GIVEN_NARROW_EYES = 0.59
N_ROWS = 202_599


def ingest_celeba_attrs(path: str | Path, selected: Sequence[str] = LABELS):
    """Read an attribute file; returns ``(labels, data, filenames)`` with ``data`` in {0, 1}.

    Line 1 holds the row count, line 2 the attribute names, then one
    ``filename v1 v2 ...`` row per image with ``v`` in {1, -1}.
    """
    with open(path) as fh:
        lines = fh.read().splitlines()
    if len(lines) < 2:
        raise ParseError("missing header lines", line=len(lines) + 1)
    try:
        count = int(lines[0].strip())
    except ValueError:
        raise ParseError(f"expected a row count, got {lines[0]!r}", line=1) from None
    names = lines[1].split()
    missing = [s for s in selected if s not in names]
    if missing:
        raise SchemaError(f"attribute file has no column(s) {missing}")
    cols = [names.index(s) for s in selected]
    rows, files = [], []
    for lineno, line in enumerate(lines[2:], start=3):
        if not line.strip():
            continue
        parts = line.split()
        if len(parts) != len(names) + 1:
            raise ParseError(f"expected {len(names) + 1} fields, got {len(parts)}", line=lineno)
        try:
            vals = [int(v) for v in parts[1:]]
        except ValueError:
            raise ParseError("attribute values must be integers", line=lineno) from None
        if any(v not in (1, -1) for v in vals):
            raise ParseError("attribute values must be 1 or -1", line=lineno)
        files.append(parts[0])
        rows.append([vals[c] for c in cols])
    if len(rows) != count:
        raise ParseError(f"header declares {count} rows, file has {len(rows)}", line=1)
    data = (np.asarray(rows, dtype=np.int64).reshape(-1, len(cols)) > 0).astype(np.int8)
    return tuple(selected), data, files


# -- stand-in ------------------------------------------------------------------

STANDIN_EDGES = """
Young -> Male
Young -> Eyeglasses
Male -> Eyeglasses
Young -> Bald
Male -> Bald
Young -> Mustache
Male -> Mustache
Young -> Smiling
Male -> Smiling
Young -> Wearing_Lipstick
Male -> Wearing_Lipstick
Smiling -> Mouth_Slightly_Open
Smiling -> Narrow_Eyes
"""


def _young_male_table() -> dict[tuple[int, int], float]:
    # keep the (Young=1, Male=1) cell, then fix the rest from the two marginals
    py, pm = DATA_MARGINALS["Young"], DATA_MARGINALS["Male"]
    p11 = YOUNG_MALE[(1, 1)]
    return {(1, 1): p11, (1, 0): py - p11, (0, 1): pm - p11, (0, 0): 1.0 - py - pm + p11}


def _scaled(rel: dict[tuple[int, int], float], target: float, weights: dict[tuple[int, int], float]):
    """``s * rel`` with ``s`` chosen so the weighted mean hits ``target``."""
    s = target / sum(weights[k] * rel[k] for k in rel)
    out = {k: s * v for k, v in rel.items()}
    if any(not 0 <= v <= 1 for v in out.values()):
        raise ValueError("relative rates cannot reach the target marginal")
    return out


def build_standin_scm(eyeglasses_male: float = 5.0) -> Scm:
    """Discrete SCM matching the published label statistics.

    ``eyeglasses_male`` is the relative rate of eyeglasses for men versus
    women. It controls how far the joint sits from the reconstructed Causal
    Graph 1, which has no Male -> Eyeglasses edge.
    """
    graph = parse_graph("\n".join(LABELS) + STANDIN_EDGES)
    ym = _young_male_table()
    pyoung = DATA_MARGINALS["Young"]
    p_male = {1: ym[(1, 1)] / pyoung, 0: ym[(0, 1)] / (1 - pyoung)}
    # keys are (Young, Male), matching the parent order in the graph
    eye = _scaled({(0, 0): 2.0, (0, 1): 2.0 * eyeglasses_male, (1, 0): 0.5, (1, 1): 0.5 * eyeglasses_male},
                  DATA_MARGINALS["Eyeglasses"], ym)
    bald = _scaled({(0, 0): 0.02, (0, 1): 6.0, (1, 0): 0.005, (1, 1): 1.0}, DATA_MARGINALS["Bald"], ym)
    must = _scaled({(0, 0): 0.0, (0, 1): 1.6, (1, 0): 0.0, (1, 1): 1.0}, DATA_MARGINALS["Mustache"], ym)
    smile = _scaled({(0, 0): 1.0, (0, 1): 0.85, (1, 0): 1.15, (1, 1): 0.85}, DATA_MARGINALS["Smiling"], ym)
    lip_male = 0.005
    p_m = DATA_MARGINALS["Male"]
    female = {k: v / (1 - p_m) for k, v in ym.items() if k[1] == 0}
    lip_f = _scaled({(0, 0): 0.8, (1, 0): 1.05}, (DATA_MARGINALS["Wearing_Lipstick"] - p_m * lip_male) / (1 - p_m),
                    female)
    lip = {(0, 0): lip_f[(0, 0)], (0, 1): lip_male, (1, 0): lip_f[(1, 0)], (1, 1): lip_male}
    ps = DATA_MARGINALS["Smiling"]
    joint_mso = SMILING_GIVEN_MOUTH_OPEN * DATA_MARGINALS["Mouth_Slightly_Open"]
    mso = ((DATA_MARGINALS["Mouth_Slightly_Open"] - joint_mso) / (1 - ps), joint_mso / ps)
    joint_ne = SMILING_GIVEN_NARROW_EYES * DATA_MARGINALS["Narrow_Eyes"]
    ne = ((DATA_MARGINALS["Narrow_Eyes"] - joint_ne) / (1 - ps), joint_ne / ps)

    def by_bits(t):
        return tuple(t[k] for k in ((0, 0), (0, 1), (1, 0), (1, 1)))

    mechs = {
        "Young": DiscreteTable((pyoung,)),
        "Male": DiscreteTable((p_male[0], p_male[1])),
        "Eyeglasses": DiscreteTable(by_bits(eye)),
        "Bald": DiscreteTable(by_bits(bald)),
        "Mustache": DiscreteTable(by_bits(must)),
        "Smiling": DiscreteTable(by_bits(smile)),
        "Wearing_Lipstick": DiscreteTable(by_bits(lip)),
        "Mouth_Slightly_Open": DiscreteTable(mso),
        "Narrow_Eyes": DiscreteTable(ne),
    }
    return Scm(graph, mechs)


def standin_path() -> Path:
    return Path(str(resources.files("cigm") / "data" / "standin_scm.json"))


def standin_scm() -> Scm:
    return load_scm(standin_path())


def standin_dataset(n: int = N_ROWS, seed: int = 0) -> np.ndarray:
    """Binary label rows drawn from the bundled stand-in SCM."""
    return sample(standin_scm(), n, seed).astype(np.int8)


def g1_gap(scm: Scm, g1: CausalGraph | None = None) -> float:
    """TVD between the SCM's joint and its factorisation along Causal Graph 1."""
    from .evaluation import tvd

    table = exact_joint(scm)
    return tvd(table, graph_projection(table, g1 or load_graph("g1")))


def load_labels(path: str | Path | None, seed: int = 0) -> tuple[tuple[str, ...], np.ndarray, str]:
    """Attribute-file labels when ``path`` is given, otherwise stand-in samples."""
    if path is not None:
        labels, data, _ = ingest_celeba_attrs(path)
        return labels, data, "celeba"
    return LABELS, standin_dataset(seed=seed), "standin"


def standin_table() -> ProbTable:
    return exact_joint(standin_scm())
