import itertools

import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from kgroundtrip.cohort import (CohortError, VisitRecord, build_visit_prior, count_cooccurrence, encode_batch,
                                load_cohort, sample_cohort, save_cohort, split_cohort)
from kgroundtrip.kg import generate_synthetic_kg
from kgroundtrip.numerics import MASK_VALUE


@pytest.fixture(scope="module")
def kg42():
    return generate_synthetic_kg({"diagnosis": 10, "procedure": 10}, 0.3, 0.5, seed=42)


def V(d, p, label=0, vid="v"):
    return VisitRecord(vid, list(d), list(p), label)


def recount(visits):
    """Naive pairwise recount: every ordered cross-type token pair in every visit."""
    counts = {}
    for v in visits:
        toks = [(c, 0) for c in v.diagnosis_codes] + [(c, 1) for c in v.procedure_codes]
        for (a, ta), (b, tb) in itertools.product(toks, toks):
            if ta != tb:
                counts[(a, b)] = counts.get((a, b), 0) + 1
    probs = {}
    for (a, b), c in counts.items():
        probs[(a, b)] = c / sum(n for (x, _), n in counts.items() if x == a)
    return counts, probs


# -- sampling ------------------------------------------------------------------------

def test_noise_free_procedures_are_linked():
    g = generate_synthetic_kg({"diagnosis": 3, "procedure": 4}, 1.0, 0.0, seed=3)
    for v in sample_cohort(g, 50, noise_rate=0.0, seed=1):
        assert set(v.procedure_codes) <= set(g.codes_of_type("procedure"))
        assert v.diagnosis_codes and v.procedure_codes


def test_sample_errors(kg42):
    with pytest.raises(CohortError):
        sample_cohort(kg42, 0)
    with pytest.raises(CohortError):
        sample_cohort(kg42, 5, noise_rate=1.0)


def test_sample_deterministic(kg42):
    a = sample_cohort(kg42, 100, seed=9)
    assert a == sample_cohort(kg42, 100, seed=9)
    assert a != sample_cohort(kg42, 100, seed=10)


def test_label_rule_without_noise(kg42):
    visits = sample_cohort(kg42, 200, seed=5)
    labels = {v.label for v in visits}
    assert labels == {0, 1}
    positive_procs = set().union(*(v.procedure_codes for v in visits if v.label))
    negative_procs = set().union(*(v.procedure_codes for v in visits if not v.label))
    risk = positive_procs - negative_procs
    assert risk, "some procedure must only appear in positive visits"
    for v in visits:
        assert v.label == int(bool(risk & set(v.procedure_codes)))


def test_cohort_file_roundtrip(kg42, tmp_path):
    visits = sample_cohort(kg42, 30, seed=2)
    save_cohort(visits, tmp_path / "c.jsonl")
    assert load_cohort(tmp_path / "c.jsonl") == visits
    (tmp_path / "bad.jsonl").write_text('{"visit_id": "a", "diagnoses": ["D0"]}\n')
    with pytest.raises(CohortError, match="line 1"):
        load_cohort(tmp_path / "bad.jsonl")


@pytest.mark.property
@given(st.integers(0, 2 ** 32 - 1), st.integers(1, 40))
def test_noise_zero_respects_graph(seed, n):
    g = generate_synthetic_kg({"diagnosis": 5, "procedure": 5}, 0.4, 0.5, seed=seed % 97 + 1)
    for v in sample_cohort(g, n, noise_rate=0.0, seed=seed):
        linked = {t for d in v.diagnosis_codes for t in g.neighbors(d)}
        assert set(v.procedure_codes) <= linked


# -- co-occurrence ----------------------------------------------------------------

def test_single_visit_table():
    t = count_cooccurrence([V(["d1"], ["p1"])])
    assert t.prob("d1", "p1") == 1.0 and t.prob("p1", "d1") == 1.0


def test_two_visit_table():
    t = count_cooccurrence([V(["d1"], ["p1"]), V(["d1"], ["p2"])])
    assert t.prob("d1", "p1") == 0.5 and t.prob("d1", "p2") == 0.5
    assert t.prob("p1", "d1") == 1.0
    assert t.prob("d1", "d9") == 0.0


def test_empty_cohort():
    with pytest.raises(CohortError):
        count_cooccurrence([])


def test_seed42_cohort_recount(kg42):
    visits = sample_cohort(kg42, 200, seed=42)
    t = count_cooccurrence(visits)
    counts, probs = recount(visits)
    assert t.counts == counts
    assert t.probs == probs


def test_table_csv(kg42, tmp_path):
    t = count_cooccurrence(sample_cohort(kg42, 20, seed=1))
    t.save_csv(tmp_path / "t.csv")
    lines = (tmp_path / "t.csv").read_text().splitlines()
    assert lines[0] == "source,target,count,prob"
    assert len(lines) == len(t.counts) + 1
    a, b, c, p = lines[1].split(",")
    assert t.counts[(a, b)] == int(c) and t.probs[(a, b)] == float(p)


@st.composite
def cohorts(draw, max_visits=30):
    n = draw(st.integers(1, max_visits))
    out = []
    for i in range(n):
        d = draw(st.sets(st.sampled_from([f"D{k}" for k in range(6)]), min_size=1, max_size=3))
        p = draw(st.sets(st.sampled_from([f"P{k}" for k in range(6)]), min_size=1, max_size=3))
        out.append(V(sorted(d), sorted(p), draw(st.integers(0, 1)), f"v{i}"))
    return out


@pytest.mark.property
@given(cohorts())
def test_table_equals_recount(visits):
    t = count_cooccurrence(visits)
    counts, probs = recount(visits)
    assert t.counts == counts
    assert t.probs == probs
    for a in {a for a, _ in t.probs}:
        assert abs(sum(p for (x, _), p in t.probs.items() if x == a) - 1.0) < 1e-9


# -- priors -----------------------------------------------------------------------

def test_prior_two_tokens():
    v = V(["d1"], ["p1"])
    pm = build_visit_prior(v, count_cooccurrence([v]))
    np.testing.assert_array_equal(pm.P, [[0, 1], [1, 0]])
    assert pm.M[0, 0] == MASK_VALUE and pm.M[0, 1] == 0.0


def test_prior_symmetric_row():
    v = V(["d1"], ["p1", "p2"])
    pm = build_visit_prior(v, count_cooccurrence([v]))
    np.testing.assert_array_equal(pm.P[0], [0, 0.5, 0.5])


def test_prior_seed42_by_hand(kg42):
    visits = sample_cohort(kg42, 200, seed=42)
    t = count_cooccurrence(visits)
    v = next(v for v in visits if len(v.diagnosis_codes) == 2 and len(v.procedure_codes) >= 2)
    v = V(v.diagnosis_codes, v.procedure_codes[:2])
    pm = build_visit_prior(v, t)
    d1, d2 = v.diagnosis_codes
    p1, p2 = v.procedure_codes
    raw = [t.prob(d1, p1), t.prob(d1, p2)]
    assert pm.P[0, 2] == pytest.approx(raw[0] / sum(raw), abs=1e-15)
    raw = [t.prob(p2, d1), t.prob(p2, d2)]
    assert pm.P[3, 1] == pytest.approx(raw[1] / sum(raw), abs=1e-15)
    assert pm.P[0, 1] == 0.0 and pm.P[2, 3] == 0.0


def test_prior_uniform_fallback():
    # d2 never co-occurs with p1 or p2, so its row has no table mass
    t = count_cooccurrence([V(["d1"], ["p1", "p2"]), V(["d2"], ["p9"])])
    pm = build_visit_prior(V(["d1", "d2"], ["p1", "p2"]), t)
    np.testing.assert_array_equal(pm.P[1], [0, 0, 0.5, 0.5])


def test_prior_errors():
    t = count_cooccurrence([V(["d1"], ["p1"])])
    with pytest.raises(CohortError):
        build_visit_prior(V(["d1"], []), t)
    with pytest.raises(CohortError):
        build_visit_prior(V(["d1"], ["p7"]), t)


@pytest.mark.property
@given(cohorts())
def test_prior_invariants(visits):
    t = count_cooccurrence(visits)
    for v in visits:
        pm = build_visit_prior(v, t)
        assert np.all(pm.P[pm.M == MASK_VALUE] == 0.0)
        np.testing.assert_allclose(pm.P.sum(axis=1), 1.0, atol=1e-6)
        again = build_visit_prior(v, t)
        assert np.array_equal(again.P, pm.P) and np.array_equal(again.M, pm.M)


# -- encoding -----------------------------------------------------------------------

def test_encode_padding():
    v = V(["d1"], ["p1"])
    b = encode_batch([v], count_cooccurrence([v]), 4)
    assert b.valid.tolist() == [[True, True, False, False]]
    assert b.index[0, 2:].tolist() == [0, 0]
    # padding rows attend only to themselves; real rows never see padding
    np.testing.assert_array_equal(b.P[0, 2:], [[0, 0, 1, 0], [0, 0, 0, 1]])
    assert np.all(b.M[0, :2, 2:] == MASK_VALUE)
    assert np.all(b.P[0, :2, 2:] == 0)


def test_encode_identical_visits():
    v = V(["d1", "d2"], ["p1"])
    b = encode_batch([v, v], count_cooccurrence([v]), 5)
    for arr in (b.index, b.P, b.M, b.valid, b.types):
        assert np.array_equal(arr[0], arr[1])


def test_encode_oversize_names_visit():
    v = V(["d1", "d2"], ["p1"], vid="big7")
    with pytest.raises(CohortError, match="big7"):
        encode_batch([v], count_cooccurrence([v]), 2)


@pytest.mark.property
@given(cohorts(12))
def test_encode_unpad_roundtrip(visits):
    t = count_cooccurrence(visits)
    T = max(len(v.tokens) for v in visits) + 1
    b = encode_batch(visits, t, T)
    for i, v in enumerate(visits):
        assert b.unpad(i) == v.tokens
        n = len(v.tokens)
        assert b.valid[i].sum() == n
        inv = {ix: c for c, ix in zip(t.vocabulary, range(1, len(t.vocabulary) + 1))}
        assert [inv[k] for k in b.index[i, :n]] == v.tokens


def test_split_is_partition(kg42):
    visits = sample_cohort(kg42, 100, seed=1)
    tr, ev = split_cohort(visits, 0.2, seed=3)
    assert len(ev) == 20 and len(tr) == 80
    assert sorted(v.visit_id for v in tr + ev) == sorted(v.visit_id for v in visits)
    assert split_cohort(visits, 0.2, seed=3) == (tr, ev)
