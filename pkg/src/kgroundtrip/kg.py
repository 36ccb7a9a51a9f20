"""Ground-truth knowledge graph: data model, synthetic generator, JSONL I/O."""
from __future__ import annotations

import json
from dataclasses import dataclass, field
from pathlib import Path
from typing import Dict, List, Mapping, Optional, Sequence, Set, Tuple

import numpy as np

DEFAULT_TYPES = ("diagnosis", "procedure")


class GraphError(ValueError):
    pass


@dataclass(frozen=True)
class Edge:
    head: str
    relation: str
    tail: str


@dataclass
class KnowledgeGraph:
    """Typed nodes plus directed labeled edges.

    ``nodes`` maps code -> type name and keeps insertion order.
    """

    nodes: Dict[str, str] = field(default_factory=dict)
    edges: List[Edge] = field(default_factory=list)
    types: Tuple[str, ...] = DEFAULT_TYPES

    def __post_init__(self):
        self.validate()

    def validate(self):
        if len(set(self.types)) != len(self.types) or any(not t for t in self.types):
            raise GraphError(f"node type names must be unique and non-empty: {self.types}")
        for code, t in self.nodes.items():
            if not code:
                raise GraphError("empty node code")
            if t not in self.types:
                raise GraphError(f"node {code!r} has unknown type {t!r}")
        seen = set()
        for e in self.edges:
            for end in (e.head, e.tail):
                if end not in self.nodes:
                    raise GraphError(f"edge endpoint {end!r} is not a node")
            if e.head == e.tail:
                raise GraphError(f"self-loop on {e.head!r}")
            key = (e.head, e.relation, e.tail)
            if key in seen:
                raise GraphError(f"duplicate triple {key}")
            seen.add(key)

    def codes_of_type(self, type_name: str) -> List[str]:
        return [c for c, t in self.nodes.items() if t == type_name]

    def neighbors(self, code: str) -> Set[str]:
        """Codes linked to ``code`` by an edge in either direction."""
        out = set()
        for e in self.edges:
            if e.head == code:
                out.add(e.tail)
            elif e.tail == code:
                out.add(e.head)
        return out

    def relations_between(self, head: str, tail: str) -> Set[str]:
        return {e.relation for e in self.edges if e.head == head and e.tail == tail}

    def __eq__(self, other):
        if not isinstance(other, KnowledgeGraph):
            return NotImplemented
        return (list(self.nodes.items()) == list(other.nodes.items())
                and self.edges == other.edges and tuple(self.types) == tuple(other.types))


def relation_label(head_type: str, tail_type: str) -> str:
    return f"{head_type}_to_{tail_type}"


def _prefix(type_name: str) -> str:
    return type_name[0].upper()


def generate_synthetic_kg(n_per_type: Mapping[str, int], edge_density: float = 0.3,
                          bidirectional_fraction: float = 0.5, seed: int = 0) -> KnowledgeGraph:
    """Random cross-type graph.

    Every ordered pair of distinct types (A, B) with A listed before B gets an
    independent Bernoulli(edge_density) draw per node pair; each kept edge
    points A -> B and, with probability ``bidirectional_fraction``, also B -> A.
    """
    types = tuple(n_per_type)
    if len(types) < 2:
        raise GraphError("need at least two node types")
    if any(n < 1 for n in n_per_type.values()):
        raise GraphError("every node type needs at least one node")
    if not 0.0 <= edge_density <= 1.0:
        raise GraphError("edge_density must lie in [0, 1]")
    if not 0.0 <= bidirectional_fraction <= 1.0:
        raise GraphError("bidirectional_fraction must lie in [0, 1]")
    prefixes = [_prefix(t) for t in types]
    if len(set(prefixes)) != len(prefixes):
        prefixes = [f"{t}_" for t in types]

    rng = np.random.default_rng(seed)
    nodes: Dict[str, str] = {}
    for t, pre in zip(types, prefixes):
        for i in range(n_per_type[t]):
            nodes[f"{pre}{i}"] = t

    edges: List[Edge] = []
    for ia, ta in enumerate(types):
        for tb in types[ia + 1:]:
            a_codes = [c for c, t in nodes.items() if t == ta]
            b_codes = [c for c, t in nodes.items() if t == tb]
            keep = rng.random((len(a_codes), len(b_codes))) < edge_density
            both = rng.random((len(a_codes), len(b_codes))) < bidirectional_fraction
            for i, a in enumerate(a_codes):
                for j, b in enumerate(b_codes):
                    if keep[i, j]:
                        edges.append(Edge(a, relation_label(ta, tb), b))
                        if both[i, j]:
                            edges.append(Edge(b, relation_label(tb, ta), a))
    if not edges:
        raise GraphError("generated graph has no edges; raise edge_density")
    return KnowledgeGraph(nodes=nodes, edges=edges, types=types)


def edge_set(g: KnowledgeGraph) -> Set[Tuple[str, str]]:
    return {(e.head, e.tail) for e in g.edges}


# ---------------------------------------------------------------------------
# JSONL
# ---------------------------------------------------------------------------

NODES_HEADER = "#nodes"
TYPES_HEADER = "#types"


def dump_kg_lines(g: KnowledgeGraph, extra: Optional[Sequence[Mapping]] = None) -> List[str]:
    """Serialise to JSONL lines. ``extra`` adds per-edge fields (e.g. match)."""
    lines = [TYPES_HEADER + " " + json.dumps(list(g.types))]
    lines.append(NODES_HEADER + " " + json.dumps([[c, t] for c, t in g.nodes.items()]))
    for i, e in enumerate(g.edges):
        rec = {"head": e.head, "relation": e.relation, "tail": e.tail,
               "head_type": g.nodes[e.head], "tail_type": g.nodes[e.tail]}
        if extra is not None:
            rec.update(extra[i])
        lines.append(json.dumps(rec, sort_keys=False))
    return lines


def save_kg(g: KnowledgeGraph, path) -> None:
    Path(path).write_text("\n".join(dump_kg_lines(g)) + "\n", encoding="utf-8")


def parse_kg_lines(lines: Sequence[str], types: Optional[Sequence[str]] = None):
    """Parse KG JSONL. Returns (graph, list of raw edge records)."""
    nodes: Dict[str, str] = {}
    edges: List[Edge] = []
    records: List[dict] = []
    declared = tuple(types) if types else None
    for lineno, raw in enumerate(lines, start=1):
        line = raw.strip()
        if not line:
            continue
        try:
            if line.startswith(TYPES_HEADER):
                declared = tuple(json.loads(line[len(TYPES_HEADER):]))
                continue
            if line.startswith(NODES_HEADER):
                for code, t in json.loads(line[len(NODES_HEADER):]):
                    nodes[code] = t
                continue
            if line.startswith("#"):
                continue
            rec = json.loads(line)
            head, rel, tail = rec["head"], rec["relation"], rec["tail"]
            ht, tt = rec["head_type"], rec["tail_type"]
        except (ValueError, KeyError, TypeError) as exc:
            raise GraphError(f"line {lineno}: malformed record ({exc})") from None
        for code, t in ((head, ht), (tail, tt)):
            if nodes.setdefault(code, t) != t:
                raise GraphError(f"line {lineno}: node {code!r} typed both {nodes[code]!r} and {t!r}")
        edges.append(Edge(head, rel, tail))
        records.append(rec)
    if declared is None:
        declared = DEFAULT_TYPES
    unknown = sorted({t for t in nodes.values()} - set(declared))
    if unknown:
        raise GraphError(f"unknown node type(s) {unknown}; declared {list(declared)}")
    return KnowledgeGraph(nodes=nodes, edges=edges, types=declared), records


def load_kg(path, types: Optional[Sequence[str]] = None) -> KnowledgeGraph:
    with open(path, encoding="utf-8") as fh:
        return parse_kg_lines(fh.read().splitlines(), types)[0]
