"""Category/attribute knowledge graph.

The graph is bipartite: category nodes occupy indices ``[0, C)`` and
attribute nodes ``[C, C + A)``. Edge weights live in a dense ``C x A``
confidence matrix built by summing per-instance attribute scores and
rescaling them linearly to ``[0, 1]``.
"""
from __future__ import annotations

import logging
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np

logger = logging.getLogger(__name__)

_MAGIC = "# kerl-graph v1"


class GraphError(ValueError):
    """Raised for invalid graph inputs."""


class GraphFormatError(GraphError):
    """Malformed graph file. Carries the offending line number (1-based)."""

    def __init__(self, message, line=None, path=None):
        self.line = line
        self.path = path
        where = ""
        if path is not None:
            where += f"{path}"
        if line is not None:
            where += f":{line}"
        super().__init__(f"{where}: {message}" if where else message)


@dataclass(frozen=True)
class NodeRegistry:
    categories: tuple[str, ...]
    attributes: tuple[str, ...]

    def __post_init__(self):
        object.__setattr__(self, "categories", tuple(self.categories))
        object.__setattr__(self, "attributes", tuple(self.attributes))
        for kind, names in (("category", self.categories), ("attribute", self.attributes)):
            if len(set(names)) != len(names):
                raise GraphError(f"duplicate {kind} names")
            for name in names:
                if not name or "\n" in name:
                    raise GraphError(f"invalid {kind} name {name!r}")

    @property
    def n_categories(self) -> int:
        return len(self.categories)

    @property
    def n_attributes(self) -> int:
        return len(self.attributes)

    @property
    def n_nodes(self) -> int:
        return len(self.categories) + len(self.attributes)

    def attribute_part(self, j: int) -> str:
        name = self.attributes[j]
        return name.split("::", 1)[0] if "::" in name else ""

    def attribute_value(self, j: int) -> str:
        return self.attributes[j].split("::", 1)[-1]

    def node_name(self, v: int) -> str:
        c = self.n_categories
        return self.categories[v] if v < c else self.attributes[v - c]


@dataclass(frozen=True, eq=False)
class KnowledgeGraph:
    registry: NodeRegistry
    s: np.ndarray
    # categories that had no instances at build time; informational only
    empty_categories: tuple[int, ...] = field(default=(), compare=False)

    def __post_init__(self):
        s = np.array(self.s, dtype=np.float64)
        expected = (self.registry.n_categories, self.registry.n_attributes)
        if s.shape != expected:
            raise GraphError(f"confidence matrix has shape {s.shape}, expected {expected}")
        if not np.all(np.isfinite(s)) or s.min(initial=0.0) < 0.0 or s.max(initial=0.0) > 1.0:
            raise GraphError("confidence entries must lie in [0, 1]")
        s.setflags(write=False)
        object.__setattr__(self, "s", s)

    @property
    def n_categories(self) -> int:
        return self.registry.n_categories

    @property
    def n_attributes(self) -> int:
        return self.registry.n_attributes

    @property
    def n_nodes(self) -> int:
        return self.registry.n_nodes

    def __eq__(self, other):
        if not isinstance(other, KnowledgeGraph):
            return NotImplemented
        return self.registry == other.registry and np.array_equal(self.s, other.s)

    def edges(self):
        """Yield ``(category_index, attribute_index, weight)`` for nonzero entries."""
        rows, cols = np.nonzero(self.s)
        for i, j in zip(rows.tolist(), cols.tolist()):
            yield i, j, float(self.s[i, j])


@dataclass(frozen=True, eq=False)
class AdjacencyPair:
    a_c: np.ndarray
    a_full: np.ndarray


def normalize_scores(raw, per_column: bool = False) -> np.ndarray:
    """Min-max rescale accumulated scores to ``[0, 1]``.

    Normalization is global over the matrix unless ``per_column`` is set. A
    constant block maps to all ones when positive and all zeros otherwise.
    """
    raw = np.asarray(raw, dtype=np.float64)
    if raw.ndim != 2:
        raise GraphError("raw score matrix must be 2-D")
    if np.isnan(raw).any() or not np.all(np.isfinite(raw)):
        raise GraphError("raw scores must be finite")
    if (raw < 0).any():
        raise GraphError("raw scores must be non-negative")
    if per_column:
        out = np.empty_like(raw)
        for j in range(raw.shape[1]):
            out[:, j] = _rescale(raw[:, j])
        return out
    return _rescale(raw)


def _rescale(x: np.ndarray) -> np.ndarray:
    if x.size == 0:
        return x.copy()
    lo, hi = x.min(), x.max()
    if hi == lo:
        return np.ones_like(x) if hi > 0 else np.zeros_like(x)
    return (x - lo) / (hi - lo)


def build_graph(
    instances: Iterable[tuple[int, Sequence[float]]],
    registry: NodeRegistry,
    per_column: bool = False,
) -> KnowledgeGraph:
    """Accumulate per-instance attribute scores into a knowledge graph.

    ``instances`` yields ``(category_index, attribute_scores)`` pairs.
    """
    n_cat, n_att = registry.n_categories, registry.n_attributes
    raw = np.zeros((n_cat, n_att), dtype=np.float64)
    counts = np.zeros(n_cat, dtype=np.int64)
    n = 0
    for label, scores in instances:
        label = int(label)
        if not 0 <= label < n_cat:
            raise GraphError(f"instance {n}: category index {label} out of range [0, {n_cat})")
        scores = np.asarray(scores, dtype=np.float64)
        if scores.shape != (n_att,):
            raise GraphError(f"instance {n}: expected {n_att} attribute scores, got {scores.shape}")
        if not np.all(np.isfinite(scores)) or (scores < 0).any():
            raise GraphError(f"instance {n}: attribute scores must be finite and >= 0")
        raw[label] += scores
        counts[label] += 1
        n += 1
    if n == 0:
        raise GraphError("cannot build a graph from an empty instance list")
    empty = tuple(int(i) for i in np.flatnonzero(counts == 0))
    if empty:
        logger.warning("%d categories have no instances; their rows are zero", len(empty))
    return KnowledgeGraph(registry, normalize_scores(raw, per_column=per_column), empty)


def adjacency(graph: KnowledgeGraph) -> AdjacencyPair:
    n_cat, n_nodes = graph.n_categories, graph.n_nodes
    a_c = np.zeros((n_nodes, n_nodes), dtype=np.float64)
    a_c[:n_cat, n_cat:] = graph.s
    return AdjacencyPair(a_c=a_c, a_full=np.hstack([a_c, a_c.T]))


def save_graph(graph: KnowledgeGraph, path) -> None:
    """Write the text graph format.

    Layout::

        # kerl-graph v1
        C <n_categories>
        A <n_attributes>
        category <index> <name>        (C lines)
        attribute <index> <name>       (A lines)
        S
        <A space-separated floats>     (C lines, repr precision)
    """
    lines = [_MAGIC, f"C {graph.n_categories}", f"A {graph.n_attributes}"]
    lines += [f"category {i} {name}" for i, name in enumerate(graph.registry.categories)]
    lines += [f"attribute {j} {name}" for j, name in enumerate(graph.registry.attributes)]
    lines.append("S")
    for row in graph.s:
        lines.append(" ".join(repr(float(x)) for x in row))
    Path(path).write_text("\n".join(lines) + "\n", encoding="utf-8")


def load_graph(path) -> KnowledgeGraph:
    path = Path(path)
    try:
        text = path.read_text(encoding="utf-8")
    except OSError as exc:
        raise GraphFormatError(f"cannot read graph file: {exc}", path=path) from exc
    lines = text.splitlines()
    it = iter(enumerate(lines, start=1))

    def next_line(what):
        for lineno, line in it:
            if line.strip():
                return lineno, line
        raise GraphFormatError(f"unexpected end of file while reading {what}", line=len(lines), path=path)

    lineno, line = next_line("header")
    if line.strip() != _MAGIC:
        raise GraphFormatError(f"bad magic {line.strip()!r}", line=lineno, path=path)
    n_cat = _read_count(next_line("category count"), "C", path)
    n_att = _read_count(next_line("attribute count"), "A", path)

    names = {"category": [], "attribute": []}
    for kind, count in (("category", n_cat), ("attribute", n_att)):
        for k in range(count):
            lineno, line = next_line(f"{kind} {k}")
            parts = line.split(" ", 2)
            if len(parts) != 3 or parts[0] != kind:
                raise GraphFormatError(f"expected '{kind} {k} <name>'", line=lineno, path=path)
            if parts[1] != str(k):
                raise GraphFormatError(f"expected {kind} index {k}, got {parts[1]!r}", line=lineno, path=path)
            names[kind].append(parts[2])

    lineno, line = next_line("matrix marker")
    if line.strip() != "S":
        raise GraphFormatError("expected matrix marker 'S'", line=lineno, path=path)
    s = np.zeros((n_cat, n_att), dtype=np.float64)
    for i in range(n_cat):
        lineno, line = next_line(f"matrix row {i}")
        fields = line.split()
        if len(fields) != n_att:
            raise GraphFormatError(
                f"matrix row {i} has {len(fields)} values, expected {n_att}", line=lineno, path=path
            )
        try:
            s[i] = [float(x) for x in fields]
        except ValueError as exc:
            raise GraphFormatError(f"matrix row {i}: {exc}", line=lineno, path=path) from exc
    for lineno, line in it:
        if line.strip():
            raise GraphFormatError("trailing content after matrix", line=lineno, path=path)
    try:
        registry = NodeRegistry(tuple(names["category"]), tuple(names["attribute"]))
        return KnowledgeGraph(registry, s)
    except GraphError as exc:
        raise GraphFormatError(str(exc), path=path) from exc


def _read_count(item, key, path):
    lineno, line = item
    parts = line.split()
    if len(parts) != 2 or parts[0] != key or not parts[1].isdigit():
        raise GraphFormatError(f"expected '{key} <count>'", line=lineno, path=path)
    return int(parts[1])


def to_dot(graph: KnowledgeGraph) -> str:
    """Graphviz rendering with one weighted edge per nonzero confidence."""
    out = ["graph knowledge {"]
    reg = graph.registry
    for v in range(graph.n_nodes):
        shape = "box" if v < graph.n_categories else "ellipse"
        label = reg.node_name(v).replace('"', '\\"')
        out.append(f'  n{v} [label="{label}", shape={shape}];')
    for i, j, w in graph.edges():
        out.append(f'  n{i} -- n{graph.n_categories + j} [weight={w!r}, penwidth={0.5 + 2 * w:.3f}];')
    out.append("}")
    return "\n".join(out) + "\n"
