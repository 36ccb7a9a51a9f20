"""Read a knowledge graph back out of attention matrices.

A view is a weighted token graph where ``weights[i, j]`` is the weight of
stepping from token i to token j. Attention rows are queries, so a query row
becomes the "from" side.
"""
from __future__ import annotations

import json
from dataclasses import dataclass, field
from pathlib import Path
from typing import Dict, List, Optional, Sequence, Tuple

import numpy as np

from .cohort import Batch
from .kg import DEFAULT_TYPES, Edge, KnowledgeGraph, dump_kg_lines, parse_kg_lines, relation_label

ORIENTATION = "row=query=from, column=key=to"


class ExtractionError(ValueError):
    pass


@dataclass
class AttentionView:
    token_codes: List[str]
    weights: np.ndarray
    token_types: Optional[List[str]] = None
    meta: Dict[str, str] = field(default_factory=lambda: {"orientation": ORIENTATION})

    def __post_init__(self):
        w = np.array(self.weights, dtype=np.float64)
        n = len(self.token_codes)
        if w.shape != (n, n):
            raise ExtractionError(f"weights shape {w.shape} does not match {n} tokens")
        if np.any(w < 0):
            raise ExtractionError("attention weights must be non-negative")
        np.fill_diagonal(w, 0.0)
        self.weights = w
        self._pos = {c: i for i, c in enumerate(self.token_codes)}

    def index(self, code: str) -> int:
        try:
            return self._pos[code]
        except KeyError:
            raise ExtractionError(f"token {code!r} not in view") from None


@dataclass
class ExtractedTriple:
    head: str
    via: Tuple[str, ...]
    tail: str
    match: float
    relation: str


def _relation(view: AttentionView, h: int, t: int, via: Sequence[str]) -> str:
    if via:
        return " ".join(via)
    if view.token_types is None:
        return "direct"
    return relation_label(view.token_types[h], view.token_types[t])


def _check(view: AttentionView, head: str, tail: str, max_hops: int) -> Tuple[int, int]:
    h, t = view.index(head), view.index(tail)
    if h == t:
        raise ExtractionError("head and tail must differ")
    if max_hops < 1:
        raise ExtractionError("max_hops must be >= 1")
    return h, t


def extract_triple(view: AttentionView, head: str, tail: str, max_hops: int = 3) -> Optional[ExtractedTriple]:
    """Greedy max-attention walk from ``head``; stops when the argmax is ``tail``.

    Zero-weight steps are never taken, so a walk whose best remaining weight
    is 0 gives up.
    """
    h, t = _check(view, head, tail, max_hops)
    n = len(view.token_codes)
    visited = [False] * n
    visited[h] = True
    cur, match, path = h, 0.0, []
    for _hop in range(max_hops):
        cand = [j for j in range(n) if not visited[j]]
        if not cand:
            return None
        row = view.weights[cur, cand]
        k = int(np.argmax(row))  # first max = lowest index
        if row[k] <= 0.0:
            return None  # only masked entries left
        nxt = cand[k]
        match += row[k]
        if nxt == t:
            via = tuple(view.token_codes[i] for i in path)
            return ExtractedTriple(head, via, tail, float(match), _relation(view, h, t, via))
        visited[nxt] = True
        path.append(nxt)
        cur = nxt
    return None


def extract_threshold(view: AttentionView, head: str, tail: str, tau: float,
                      max_hops: int = 3, beam_width: Optional[int] = 4) -> List[ExtractedTriple]:
    """All head->tail paths whose every step weighs at least ``tau``.

    Partial paths are expanded best-match-first and pruned to ``beam_width``
    per depth (``None`` keeps all). Results are sorted by match, descending.
    """
    h, t = _check(view, head, tail, max_hops)
    if not 0.0 < tau < 1.0:
        raise ExtractionError("tau must lie in (0, 1)")
    if beam_width is not None and beam_width < 1:
        raise ExtractionError("beam_width must be >= 1")
    n = len(view.token_codes)
    W = view.weights
    frontier: List[Tuple[float, Tuple[int, ...]]] = [(0.0, (h,))]
    found: List[Tuple[float, Tuple[int, ...]]] = []
    for _depth in range(max_hops):
        grown = []
        for match, path in frontier:
            cur = path[-1]
            for j in range(n):
                if j in path or W[cur, j] < tau:
                    continue
                step = (match + W[cur, j], path + (j,))
                (found if j == t else grown).append(step)
        grown.sort(key=lambda s: (-s[0], s[1]))
        frontier = grown if beam_width is None else grown[:beam_width]
        if not frontier:
            break
    found.sort(key=lambda s: (-s[0], s[1]))
    out = []
    for match, path in found:
        via = tuple(view.token_codes[i] for i in path[1:-1])
        out.append(ExtractedTriple(head, via, tail, float(match), _relation(view, h, t, via)))
    return out


# ---------------------------------------------------------------------------
# whole-cohort recovery
# ---------------------------------------------------------------------------

@dataclass
class RecoveredGraph:
    triples: List[ExtractedTriple] = field(default_factory=list)
    best: Dict[Tuple[str, str], ExtractedTriple] = field(default_factory=dict)
    node_types: Dict[str, str] = field(default_factory=dict)
    params: Dict[str, object] = field(default_factory=dict)

    def pairs(self):
        return set(self.best)

    def to_kg(self, types: Sequence[str] = DEFAULT_TYPES) -> KnowledgeGraph:
        nodes = {c: self.node_types[c] for c in sorted(self.node_types)}
        edges = [Edge(t.head, t.relation, t.tail) for _, t in sorted(self.best.items())]
        return KnowledgeGraph(nodes=nodes, edges=edges, types=tuple(types))


def aggregate(triples: Sequence[ExtractedTriple], how: str = "max") -> Dict[Tuple[str, str], ExtractedTriple]:
    """One triple per (head, tail). ``max`` keeps the best match (first on ties);
    ``mean`` keeps that triple's path but averages match over occurrences."""
    best: Dict[Tuple[str, str], ExtractedTriple] = {}
    seen: Dict[Tuple[str, str], List[float]] = {}
    for tr in triples:
        key = (tr.head, tr.tail)
        seen.setdefault(key, []).append(tr.match)
        if key not in best or tr.match > best[key].match:
            best[key] = tr
    if how == "max":
        return best
    if how == "mean":
        return {k: ExtractedTriple(t.head, t.via, t.tail, float(np.mean(seen[k])), t.relation)
                for k, t in best.items()}
    raise ExtractionError(f"unknown aggregation {how!r}")


def layer_attentions(model, batch: Batch, layer: int) -> List[np.ndarray]:
    from .gct import forward

    L = model.cfg.num_blocks
    if not 1 <= layer <= L:
        raise ExtractionError(f"layer {layer} outside 1..{L}")
    if len(batch) == 0:
        return []
    A = batch.P if layer == 1 else forward(model, batch).attentions[layer - 1]
    sizes = batch.valid.sum(axis=1)
    return [A[b, :n, :n].copy() for b, n in enumerate(sizes)]


def recover_graph(model, batch: Batch, layer: Optional[int] = None, mode: str = "greedy",
                  tau: float = 0.2, max_hops: int = 3, beam_width: Optional[int] = 4,
                  candidates: str = "cross_type", aggregation: str = "max",
                  type_names: Sequence[str] = DEFAULT_TYPES) -> RecoveredGraph:
    if layer is None:
        layer = model.cfg.num_blocks
    if mode not in ("greedy", "threshold"):
        raise ExtractionError(f"unknown extraction mode {mode!r}")
    if candidates not in ("cross_type", "all"):
        raise ExtractionError(f"unknown candidate rule {candidates!r}")
    mats = layer_attentions(model, batch, layer)
    triples: List[ExtractedTriple] = []
    node_types: Dict[str, str] = {}
    for b, A in enumerate(mats):
        codes = batch.tokens[b]
        roles = [type_names[r] for r in batch.types[b, :len(codes)]]
        node_types.update(zip(codes, roles))
        view = AttentionView(list(codes), A, roles)
        for i, hc in enumerate(codes):
            for j, tc in enumerate(codes):
                if i == j or (candidates == "cross_type" and roles[i] == roles[j]):
                    continue
                if mode == "greedy":
                    tr = extract_triple(view, hc, tc, max_hops)
                    if tr is not None:
                        triples.append(tr)
                else:
                    triples.extend(extract_threshold(view, hc, tc, tau, max_hops, beam_width))
    params = {"layer": layer, "mode": mode, "tau": tau, "max_hops": max_hops,
              "beam_width": beam_width, "candidates": candidates, "aggregation": aggregation,
              "orientation": ORIENTATION}
    return RecoveredGraph(triples, aggregate(triples, aggregation), node_types, params)


META_HEADER = "#meta"


def save_recovered(rg: RecoveredGraph, path, types: Sequence[str] = DEFAULT_TYPES) -> None:
    g = rg.to_kg(types)
    extra = [{"match": rg.best[(e.head, e.tail)].match, "via": list(rg.best[(e.head, e.tail)].via)}
             for e in g.edges]
    lines = [META_HEADER + " " + json.dumps(rg.params, sort_keys=True)] + dump_kg_lines(g, extra)
    Path(path).write_text("\n".join(lines) + "\n", encoding="utf-8")


def load_recovered(path) -> RecoveredGraph:
    lines = Path(path).read_text(encoding="utf-8").splitlines()
    params = {}
    for line in lines:
        if line.startswith(META_HEADER):
            params = json.loads(line[len(META_HEADER):])
    g, records = parse_kg_lines(lines)
    best = {}
    for e, rec in zip(g.edges, records):
        if "match" not in rec:
            raise ExtractionError(f"{path}: triple {e.head}->{e.tail} lacks a match score")
        best[(e.head, e.tail)] = ExtractedTriple(e.head, tuple(rec.get("via", [])), e.tail,
                                                 float(rec["match"]), e.relation)
    return RecoveredGraph(list(best.values()), best, dict(g.nodes), params)
