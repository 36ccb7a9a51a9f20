"""Synthetic visits, co-occurrence conditionals, and per-visit attention priors."""
from __future__ import annotations

import csv
import json
from collections import defaultdict
from dataclasses import dataclass, field
from pathlib import Path
from typing import Dict, List, Optional, Sequence, Tuple

import numpy as np

from .kg import KnowledgeGraph
from .numerics import MASK_VALUE


class CohortError(ValueError):
    pass


@dataclass
class VisitRecord:
    visit_id: str
    diagnosis_codes: List[str]
    procedure_codes: List[str]
    label: int

    @property
    def tokens(self) -> List[str]:
        return list(self.diagnosis_codes) + list(self.procedure_codes)

    @property
    def token_types(self) -> List[int]:
        """0 for diagnosis-role tokens, 1 for procedure-role tokens."""
        return [0] * len(self.diagnosis_codes) + [1] * len(self.procedure_codes)

    def validate(self):
        if not self.diagnosis_codes or not self.procedure_codes:
            raise CohortError(f"visit {self.visit_id}: needs a diagnosis and a procedure")
        codes = self.tokens
        if len(set(codes)) != len(codes):
            raise CohortError(f"visit {self.visit_id}: duplicate codes")
        if self.label not in (0, 1):
            raise CohortError(f"visit {self.visit_id}: label must be 0 or 1")


def sample_cohort(g: KnowledgeGraph, n_visits: int, diag_per_visit: Tuple[int, int] = (1, 3),
                  noise_rate: float = 0.05, link_prob: float = 0.8, risk_size: int = 2,
                  label_noise: float = 0.0, seed: int = 0, diagnosis_type: str = "diagnosis",
                  procedure_type: str = "procedure") -> List[VisitRecord]:
    """Draw ``n_visits`` visits from the graph.

    Each visit picks a uniform number of diagnoses in ``diag_per_visit``
    (inclusive), keeps each graph-linked procedure with ``link_prob`` and each
    unlinked one with ``noise_rate``. The label is 1 iff the visit contains a
    procedure from a risk subset of ``risk_size`` procedures drawn once per run,
    then flipped with probability ``label_noise``.
    """
    if n_visits < 1:
        raise CohortError("n_visits must be at least 1")
    if not 0.0 <= noise_rate < 1.0:
        raise CohortError("noise_rate must lie in [0, 1)")
    if not 0.0 <= label_noise <= 0.5:
        raise CohortError("label_noise must lie in [0, 0.5]")
    diags = g.codes_of_type(diagnosis_type)
    procs = g.codes_of_type(procedure_type)
    if not diags or not procs or not g.edges:
        raise CohortError("graph needs diagnoses, procedures and edges")
    lo, hi = diag_per_visit
    hi = min(hi, len(diags))
    if lo < 1 or lo > hi:
        raise CohortError(f"bad diag_per_visit range {diag_per_visit}")

    rng = np.random.default_rng(seed)
    risk = set(rng.choice(procs, size=min(risk_size, len(procs)), replace=False).tolist())
    linked = {d: g.neighbors(d) for d in diags}

    visits = []
    for v in range(n_visits):
        for _attempt in range(1001):
            k = int(rng.integers(lo, hi + 1))
            chosen = sorted(rng.choice(len(diags), size=k, replace=False).tolist())
            d_codes = [diags[i] for i in chosen]
            near = set().union(*(linked[d] for d in d_codes))
            u = rng.random(len(procs))
            p_codes = [p for p, x in zip(procs, u) if x < (link_prob if p in near else noise_rate)]
            if p_codes:
                break
        else:
            raise CohortError(f"visit {v}: 1000 consecutive samples had no procedures")
        label = int(any(p in risk for p in p_codes))
        if rng.random() < label_noise:
            label = 1 - label
        visits.append(VisitRecord(f"v{v:05d}", d_codes, p_codes, label))
    return visits


def save_cohort(visits: Sequence[VisitRecord], path) -> None:
    lines = [json.dumps({"visit_id": v.visit_id, "diagnoses": v.diagnosis_codes,
                         "procedures": v.procedure_codes, "label": v.label}) for v in visits]
    Path(path).write_text("\n".join(lines) + "\n", encoding="utf-8")


def load_cohort(path) -> List[VisitRecord]:
    visits = []
    with open(path, encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, start=1):
            if not line.strip():
                continue
            try:
                rec = json.loads(line)
                v = VisitRecord(str(rec["visit_id"]), list(rec["diagnoses"]),
                                list(rec["procedures"]), int(rec["label"]))
            except (ValueError, KeyError, TypeError) as exc:
                raise CohortError(f"line {lineno}: malformed visit ({exc})") from None
            v.validate()
            visits.append(v)
    return visits


# ---------------------------------------------------------------------------
# conditional table
# ---------------------------------------------------------------------------

@dataclass
class ConditionalTable:
    counts: Dict[Tuple[str, str], int]
    probs: Dict[Tuple[str, str], float]
    codes: Dict[str, int] = field(default_factory=dict)  # code -> role (0 diag, 1 proc)

    def prob(self, a: str, b: str) -> float:
        return self.probs.get((a, b), 0.0)

    @property
    def vocabulary(self) -> List[str]:
        return sorted(self.codes)

    def save_csv(self, path) -> None:
        with open(path, "w", newline="", encoding="utf-8") as fh:
            w = csv.writer(fh, lineterminator="\n")
            w.writerow(["source", "target", "count", "prob"])
            for (a, b) in sorted(self.counts):
                w.writerow([a, b, self.counts[(a, b)], repr(self.probs[(a, b)])])


def count_cooccurrence(cohort: Sequence[VisitRecord]) -> ConditionalTable:
    """Pool cross-type co-occurrence counts over visits; p(b|a) = c(a,b)/sum_c c(a,c)."""
    if not cohort:
        raise CohortError("empty cohort")
    counts: Dict[Tuple[str, str], int] = defaultdict(int)
    codes: Dict[str, int] = {}
    for v in cohort:
        for d in v.diagnosis_codes:
            codes[d] = 0
            for p in v.procedure_codes:
                counts[(d, p)] += 1
                counts[(p, d)] += 1
        for p in v.procedure_codes:
            codes[p] = 1
    totals: Dict[str, int] = defaultdict(int)
    for (a, _), c in counts.items():
        totals[a] += c
    probs = {(a, b): c / totals[a] for (a, b), c in counts.items()}
    return ConditionalTable(dict(counts), probs, codes)


# ---------------------------------------------------------------------------
# priors and batches
# ---------------------------------------------------------------------------

@dataclass
class PriorMatrix:
    token_codes: List[str]
    P: np.ndarray
    M: np.ndarray


def schema_mask(token_types: Sequence[int]) -> np.ndarray:
    """0 where attention is allowed (cross-type, off-diagonal), MASK_VALUE elsewhere."""
    t = np.asarray(token_types)
    allowed = t[:, None] != t[None, :]
    return np.where(allowed, 0.0, MASK_VALUE)


def build_visit_prior(visit: VisitRecord, table: ConditionalTable) -> PriorMatrix:
    if not visit.diagnosis_codes or not visit.procedure_codes:
        raise CohortError(f"visit {visit.visit_id}: single-type visit has no attention targets")
    tokens = visit.tokens
    missing = [c for c in tokens if c not in table.codes]
    if missing:
        raise CohortError(f"visit {visit.visit_id}: codes {missing} absent from table")
    M = schema_mask(visit.token_types)
    allowed = M == 0.0
    n = len(tokens)
    P = np.zeros((n, n))
    for i, a in enumerate(tokens):
        for j, b in enumerate(tokens):
            if allowed[i, j]:
                P[i, j] = table.prob(a, b)
        s = P[i].sum()
        if s > 0:
            P[i] /= s
        else:
            P[i] = allowed[i] / allowed[i].sum()
    return PriorMatrix(tokens, P, M)


@dataclass
class Batch:
    """Padded visits. Padding rows attend only to themselves and are flagged invalid."""

    visit_ids: List[str]
    tokens: List[List[str]]
    index: np.ndarray       # (B, T) vocabulary index, 0 = padding
    P: np.ndarray           # (B, T, T)
    M: np.ndarray           # (B, T, T)
    valid: np.ndarray       # (B, T) bool
    types: np.ndarray       # (B, T) role, -1 for padding
    labels: np.ndarray      # (B,)

    def __len__(self):
        return len(self.visit_ids)

    def subset(self, rows) -> "Batch":
        rows = np.asarray(rows)
        return Batch([self.visit_ids[i] for i in rows], [self.tokens[i] for i in rows],
                     self.index[rows], self.P[rows], self.M[rows], self.valid[rows],
                     self.types[rows], self.labels[rows])

    def unpad(self, b: int) -> List[str]:
        return list(self.tokens[b])


PAD = "<pad>"


def vocabulary_index(vocabulary: Sequence[str]) -> Dict[str, int]:
    return {c: i + 1 for i, c in enumerate(vocabulary)}


def encode_batch(visits: Sequence[VisitRecord], table: ConditionalTable, max_tokens: int,
                 vocabulary: Optional[Sequence[str]] = None) -> Batch:
    vocab = vocabulary_index(table.vocabulary if vocabulary is None else vocabulary)
    B, T = len(visits), max_tokens
    index = np.zeros((B, T), dtype=np.int64)
    P = np.zeros((B, T, T))
    M = np.full((B, T, T), MASK_VALUE)
    valid = np.zeros((B, T), dtype=bool)
    types = np.full((B, T), -1, dtype=np.int64)
    labels = np.zeros(B)
    for b, v in enumerate(visits):
        n = len(v.tokens)
        if n > T:
            raise CohortError(f"visit {v.visit_id} has {n} tokens > max_tokens={T}")
        prior = build_visit_prior(v, table)
        try:
            index[b, :n] = [vocab[c] for c in v.tokens]
        except KeyError as exc:
            raise CohortError(f"visit {v.visit_id}: code {exc} not in vocabulary") from None
        P[b, :n, :n] = prior.P
        M[b, :n, :n] = prior.M
        for t in range(n, T):
            P[b, t, t] = 1.0
            M[b, t, t] = 0.0
        valid[b, :n] = True
        types[b, :n] = v.token_types
        labels[b] = v.label
    return Batch([v.visit_id for v in visits], [v.tokens for v in visits],
                 index, P, M, valid, types, labels)


def split_cohort(visits: Sequence[VisitRecord], eval_fraction: float, seed: int):
    """Seeded shuffle split by visit; returns (train, eval) keeping input order within each."""
    n = len(visits)
    rng = np.random.default_rng(seed)
    perm = rng.permutation(n)
    n_eval = int(round(n * eval_fraction))
    eval_idx = set(perm[:n_eval].tolist())
    train = [v for i, v in enumerate(visits) if i not in eval_idx]
    held = [v for i, v in enumerate(visits) if i in eval_idx]
    return train, held
