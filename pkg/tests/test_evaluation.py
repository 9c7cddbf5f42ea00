import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from interproto.core_math import cosine_matrix
from interproto.data import Dataset, SyntheticSpec, generate_synthetic, load_csv
from interproto.encoder import PrototypeHead
from interproto.evaluation import (
    IdentificationSplit,
    PairSet,
    best_threshold_accuracy,
    build_identification_split,
    build_verification_pairs,
    export_heatmap,
    inter_class_similarity,
    intra_class_similarity,
    parse_heatmap_csv,
    project_prototypes_2d,
    prototype_similarity,
    rank1_identification,
    similarity_report,
    validate_pairs,
    verification_accuracy,
)


def cos(a, b):
    return float(a @ b / (math.sqrt(a @ a) * math.sqrt(b @ b)))


def oracle_intra(E, W, ids, groups, role):
    out = {}
    for i in range(W.shape[1]):
        vals = [cos(E[:, k], W[:, i]) for k in range(E.shape[1])
                if ids[k] == i and (role == "all" or (groups[k] == 0) == (role == "child"))]
        if vals:
            out[i] = sum(vals) / len(vals)
    return out


def oracle_inter(E, ids, groups, role, subjects):
    k = len(subjects)
    m = np.zeros((k, k))
    ok = lambda s: role == "all" or (groups[s] == 0) == (role == "child")
    for a, i in enumerate(subjects):
        for b, j in enumerate(subjects):
            if i == j:
                continue
            total, count = 0.0, 0
            for s in range(E.shape[1]):
                for t in range(E.shape[1]):
                    if ids[s] == i and ids[t] == j and ok(s) and ok(t):
                        total += cos(E[:, s], E[:, t])
                        count += 1
            m[a, b] = total / count
    return m


def random_instance(rng, n_ids=5, per=3, d=6):
    ids = np.repeat(np.arange(n_ids), per)
    groups = rng.choice([0, 3, 4], size=ids.size)
    groups[::per] = 0
    groups[1::per] = 4
    return rng.normal(size=(d, ids.size)), rng.normal(size=(d, n_ids)), ids, groups


def test_intra_trivial_cases():
    W = np.eye(3)
    ids = np.array([0, 1, 2, 2])
    E = W[:, ids] * 2.0
    _, vals, _ = intra_class_similarity(E, W, ids, np.zeros(4, int))
    np.testing.assert_allclose(vals, 1.0, atol=1e-15)
    E_orth = np.roll(W, 1, axis=0)[:, ids]
    _, vals, _ = intra_class_similarity(E_orth, W, ids, np.zeros(4, int))
    np.testing.assert_allclose(vals, 0.0, atol=1e-15)


@pytest.mark.parametrize("role", ["child", "adult", "all"])
def test_intra_and_inter_match_nested_loops(role, rng):
    for _ in range(5):
        E, W, ids, groups = random_instance(rng)
        kept, vals, excluded = intra_class_similarity(E, W, ids, groups, role)
        expected = oracle_intra(E, W, ids, groups, role)
        assert kept.tolist() == sorted(expected)
        np.testing.assert_allclose(vals, [expected[i] for i in kept], atol=1e-12)
        kept, m, _ = inter_class_similarity(E, ids, groups, role)
        np.testing.assert_allclose(m, oracle_inter(E, ids, groups, role, kept.tolist()), atol=1e-12)
        np.testing.assert_allclose(m, m.T, atol=1e-15)


def test_inter_trivial_cases():
    E = np.array([[1.0, 1.0], [0.0, 0.0]])
    _, m, _ = inter_class_similarity(E, [0, 1], [0, 0])
    assert m[0, 1] == pytest.approx(1.0)
    E = np.eye(2)
    _, m, _ = inter_class_similarity(E, [0, 1], [0, 0])
    assert m[0, 1] == 0.0


def test_inter_excludes_and_requires_two():
    E = np.eye(3)
    kept, _, excluded = inter_class_similarity(E, [0, 1, 2], [0, 0, 4], role="child")
    assert kept.tolist() == [0, 1] and excluded == [2]
    with pytest.raises(ValueError):
        inter_class_similarity(E, [0, 1, 2], [0, 4, 4], role="child")


def test_intra_excludes_identity_without_samples():
    kept, _, excluded = intra_class_similarity(np.eye(3), np.eye(3), [0, 0, 1], [0, 0, 0], "child")
    assert kept.tolist() == [0, 1] and excluded == [2]


def test_report_diagonal_holds_intra(rng):
    E, W, ids, groups = random_instance(rng)
    rep = similarity_report(E, W, ids, groups, "all")
    np.testing.assert_allclose(np.diag(rep.fig2_matrix()), rep.intra)


def test_prototype_similarity_cases(rng):
    q, _ = np.linalg.qr(rng.normal(size=(6, 3)))
    c, summary = prototype_similarity(PrototypeHead(q, [0, 1]), [0, 1, 2])
    np.testing.assert_allclose(c, np.eye(3), atol=1e-14)
    assert summary == pytest.approx(0.0, abs=1e-14)
    W = np.array([[1.0, 2.0], [1.0, 2.0]])
    assert prototype_similarity(PrototypeHead(W, []), [0, 1])[1] == pytest.approx(1.0)
    W = rng.normal(size=(5, 7))
    c, _ = prototype_similarity(PrototypeHead(W, []), [1, 4, 6])
    assert np.array_equal(c, cosine_matrix(W[:, [1, 4, 6]], W[:, [1, 4, 6]]))


def gap_dataset():
    text = ("identity,age_group,age_years,f0,f1\n"
            "a,0,5,1,0\n" "a,2,24,1,0.1\n" "a,3,26,1,0.2\n"
            "b,0,3,0,1\n" "b,3,30,0.1,1\n")
    return load_csv(text)


def test_gap_boundary_excluded():
    ds = gap_dataset()
    pairs = build_verification_pairs(ds, 20, count=None, seed=0)
    used = {(p[1], p[3]) for p in pairs.pairs}
    assert (0, 1) not in used  # 24 - 5 = 19
    assert all(ds.age_years[b] - ds.age_years[a] > 20 for _, a, _, b, _ in pairs.pairs)


def test_insufficient_pairs_reports_maximum():
    ds = gap_dataset()
    with pytest.raises(ValueError, match="at most 2"):
        build_verification_pairs(ds, 20, count=5)


def independent_validator(ds, pairs, gap):
    bad = 0
    seen = set()
    for ia, sa, ib, sb, same in pairs.pairs:
        roles = sorted([ds.age_groups[sa] == 0, ds.age_groups[sb] == 0])
        if roles != [False, True]:
            bad += 1
        child, adult = (sa, sb) if ds.age_groups[sa] == 0 else (sb, sa)
        if gap is not None and not ds.age_years[adult] - ds.age_years[child] > gap:
            bad += 1
        if same != (ds.identities[sa] == ds.identities[sb]):
            bad += 1
        if (sa, sb) in seen:
            bad += 1
        seen.add((sa, sb))
    labels = [p[4] for p in pairs.pairs]
    if labels.count(True) != labels.count(False):
        bad += 1
    return bad


def test_pair_counts_and_validator():
    ds = generate_synthetic(SyntheticSpec(n_identities=200, identity_offset=40))
    p = build_verification_pairs(ds, 20, count=10, seed=1)
    assert sum(x[4] for x in p.pairs) == 10 and len(p) == 20
    big = build_verification_pairs(ds, 30, count=500, seed=2)
    assert len(big) == 1000
    assert independent_validator(ds, big, 30) == 0
    assert validate_pairs(ds, big) == []
    free = build_verification_pairs(ds, None, count=100, seed=2)
    assert independent_validator(ds, free, None) == 0


def test_pairs_deterministic():
    ds = generate_synthetic(SyntheticSpec())
    assert build_verification_pairs(ds, 20, 50, 3).pairs == build_verification_pairs(ds, 20, 50, 3).pairs


def test_validate_pairs_flags_problems():
    ds = gap_dataset()
    bad = PairSet([(0, 0, 0, 1, True), (0, 0, 1, 4, True)], 20)
    problems = validate_pairs(ds, bad)
    assert any("age gap" in p for p in problems)
    assert any("label" in p for p in problems)
    assert any("unbalanced" in p for p in problems)


def test_pair_csv_header():
    ds = gap_dataset()
    text = build_verification_pairs(ds, 20, None, 0).to_csv_text(ds)
    lines = text.splitlines()
    assert lines[0].startswith("#") and "strictly" in lines[0]
    assert lines[1] == "identity_a,sample_a,identity_b,sample_b,label,age_a,age_b"


def exhaustive_accuracy(scores, labels):
    best = 0.0
    cands = sorted(set(scores))
    thresholds = [cands[0] - 1] + [(a + b) / 2 for a, b in zip(cands, cands[1:])] + [cands[-1] + 1]
    for t in thresholds:
        acc = np.mean((np.asarray(scores) > t) == np.asarray(labels))
        best = max(best, acc)
    return best


def test_verification_trivial():
    assert best_threshold_accuracy([0.9, 0.9, 0.1, 0.1], [1, 1, 0, 0])[0] == 1.0
    assert best_threshold_accuracy([0.3] * 6, [1, 1, 1, 0, 0, 0])[0] == 0.5


def test_verification_vs_exhaustive_scan(rng):
    for _ in range(50):
        n = int(rng.integers(2, 30))
        scores = np.round(rng.uniform(-1, 1, size=2 * n), 2)
        labels = np.array([True] * n + [False] * n)
        acc, thr = best_threshold_accuracy(scores, labels)
        assert acc == exhaustive_accuracy(scores, labels)
        assert np.mean((scores > thr) == labels) == acc


@settings(max_examples=50, deadline=None)
@given(st.lists(st.integers(-1000, 1000), min_size=4, max_size=40).filter(lambda v: len(v) % 2 == 0))
def test_verification_properties(grid):
    scores = np.array(grid) / 1000.0
    labels = np.arange(scores.size) < scores.size // 2
    acc, _ = best_threshold_accuracy(scores, labels)
    assert acc >= 0.5
    assert best_threshold_accuracy(np.exp(3 * scores) + 2, labels)[0] == acc


def test_verification_accuracy_uses_cosines():
    ds = gap_dataset()
    pairs = build_verification_pairs(ds, 20, None, 0)
    E = ds.features.T
    rep = verification_accuracy(E, pairs)
    expected = [cos(E[:, a], E[:, b]) for _, a, _, b, _ in pairs.pairs]
    np.testing.assert_allclose(rep["scores"], expected, atol=1e-15)
    assert rep["accuracy"] == 1.0


def brute_rank1(E, split):
    hits = 0
    for p, ident in zip(split.probes, split.identities):
        best, best_j = -2.0, None
        for j, g in enumerate(split.gallery):
            c = cos(E[:, p], E[:, g])
            if c > best:
                best, best_j = c, j
        hits += split.identities[best_j] == ident
    return hits / len(split.probes)


def test_rank1_trivial():
    E = np.eye(3)
    split = IdentificationSplit(np.array([0, 1]), np.array([0, 1]), np.array([5, 6]))
    assert rank1_identification(E, split) == 1.0
    one = IdentificationSplit(np.array([1]), np.array([2]), np.array([0]))
    assert rank1_identification(E, one) == 1.0
    with pytest.raises(ValueError):
        rank1_identification(E, IdentificationSplit(np.array([0]), np.array([], int), np.array([0])))


def test_rank1_vs_bruteforce_and_scale_invariance(rng):
    E = rng.normal(size=(6, 40))
    split = IdentificationSplit(np.arange(20), np.arange(20, 40), np.arange(20))
    acc = rank1_identification(E, split)
    assert acc == brute_rank1(E, split)
    assert rank1_identification(E * rng.uniform(0.1, 10, size=40), split) == acc


def test_rank1_tie_lowest_index():
    E = np.array([[1.0, 1.0, 1.0], [0.0, 0.0, 0.0]])
    split = IdentificationSplit(np.array([0]), np.array([1, 2]), np.array([7, 7]))
    assert rank1_identification(E, split) == 1.0


def test_identification_split_constraints():
    ds = generate_synthetic(SyntheticSpec(n_identities=200, identity_offset=40))
    split = build_identification_split(ds, 20, seed=0)
    assert len(split.probes) == len(split.gallery) > 10
    assert np.all(ds.age_groups[split.probes] == 0)
    assert np.all(ds.age_groups[split.gallery] != 0)
    assert np.array_equal(ds.identities[split.probes], ds.identities[split.gallery])
    oldest = ds.age_years[split.probes].max()
    assert np.all(ds.age_years[split.gallery] - oldest > 20)


def test_heatmap_pgm_values():
    assert export_heatmap([[1.0]], "pgm") == b"P2\n1 1\n255\n255\n"
    assert export_heatmap([[0.0]], "pgm").split()[-1] == b"128"
    assert export_heatmap([[-1.0, 0.5]], "pgm").split()[-2:] == [b"0", b"191"]
    with pytest.raises(ValueError):
        export_heatmap([[1.5]], "pgm")


def test_heatmap_csv_round_trip(rng):
    m = rng.uniform(-1, 1, size=(4, 5))
    back = parse_heatmap_csv(export_heatmap(m, "csv"))
    assert np.max(np.abs(back - m)) <= 1e-12


def test_projection_cases(rng):
    W = np.ones((4, 5))
    coords, _ = project_prototypes_2d(PrototypeHead(W, [0]))
    np.testing.assert_array_equal(coords, 0.0)
    angles = rng.uniform(0, 2 * np.pi, size=6)
    W = np.zeros((5, 6))
    W[0], W[2] = np.cos(angles), np.sin(angles)
    coords, tags = project_prototypes_2d(PrototypeHead(W, [1, 4]))
    d = lambda x: np.linalg.norm(x[:, None] - x[None, :], axis=-1)
    np.testing.assert_allclose(d(coords), d(W.T), atol=1e-9)
    assert tags.sum() == 2 and (~tags).sum() == 4
