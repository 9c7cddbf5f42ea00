"""Similarity analyses, child-adult pair protocols and heatmap export."""

import csv
import io
from dataclasses import dataclass, field
from typing import Optional

import numpy as np

from .core_math import cosine_matrix, pca_2d
from .data import CHILD_GROUP, UNKNOWN_AGE

ROLES = ("child", "adult", "all")


def _role_mask(age_groups, role):
    age_groups = np.asarray(age_groups)
    if role == "child":
        return age_groups == CHILD_GROUP
    if role == "adult":
        return age_groups != CHILD_GROUP
    if role == "all":
        return np.ones(age_groups.shape, dtype=bool)
    raise ValueError(f"role must be one of {ROLES}, got {role!r}")


def _unit_columns(m):
    m = np.asarray(m, dtype=np.float64)
    norms = np.linalg.norm(m, axis=0)
    if np.any(norms == 0):
        raise ValueError(f"zero-norm column {int(np.flatnonzero(norms == 0)[0])}")
    return m / norms


@dataclass
class SimilarityReport:
    identities: np.ndarray
    intra: Optional[np.ndarray]
    inter: np.ndarray
    role: str
    excluded: list = field(default_factory=list)

    def fig2_matrix(self):
        """Inter matrix with intra values written on the diagonal."""
        m = self.inter.copy()
        if self.intra is not None:
            np.fill_diagonal(m, self.intra)
        return m


def intra_class_similarity(embeddings, prototypes, identities, age_groups, role="all", subjects=None):
    """Per-identity mean cosine between sample embeddings and their prototype.

    ``embeddings`` is ``d x N``; ``prototypes`` is ``d x n``. Identities in
    ``subjects`` (default: all prototype columns) with no sample passing
    the role filter are dropped and listed in the second return value.

    Returns ``(subjects_kept, values, excluded)``.
    """
    identities = np.asarray(identities)
    mask = _role_mask(age_groups, role)
    feats = _unit_columns(embeddings)
    protos = _unit_columns(prototypes)
    if subjects is None:
        subjects = np.arange(protos.shape[1])
    kept, values, excluded = [], [], []
    for ident in subjects:
        sel = mask & (identities == ident)
        if not sel.any():
            excluded.append(int(ident))
            continue
        kept.append(int(ident))
        values.append(float(np.mean(protos[:, ident] @ feats[:, sel])))
    return np.array(kept, dtype=np.int64), np.array(values), excluded


def inter_class_similarity(embeddings, identities, age_groups, role="all", subjects=None,
                           role_b=None):
    """Mean cross-identity cosine between sample embeddings.

    Entry ``(i, j)`` averages the cosine over every pair formed by a
    sample of identity ``i`` passing ``role`` and a sample of identity
    ``j`` passing ``role_b`` (defaults to ``role``). The diagonal is left
    at zero. With ``role_b`` different from ``role`` the matrix need not
    be symmetric (child-adult panels).

    Returns ``(subjects_kept, matrix, excluded)``.
    """
    identities = np.asarray(identities)
    role_b = role if role_b is None else role_b
    mask_a = _role_mask(age_groups, role)
    mask_b = _role_mask(age_groups, role_b)
    feats = _unit_columns(embeddings)
    if subjects is None:
        subjects = np.unique(identities)
    kept, excluded = [], []
    for ident in subjects:
        has = (mask_a & (identities == ident)).any() and (mask_b & (identities == ident)).any()
        (kept if has else excluded).append(int(ident))
    if len(kept) < 2:
        raise ValueError(f"need >= 2 identities passing the {role}/{role_b} filter, got {len(kept)}")
    k = len(kept)
    sums_a = np.stack([feats[:, mask_a & (identities == i)].mean(axis=1) for i in kept], axis=1)
    sums_b = np.stack([feats[:, mask_b & (identities == i)].mean(axis=1) for i in kept], axis=1)
    # the mean over cross pairs factorises into a dot of per-identity mean vectors
    m = sums_a.T @ sums_b
    m[np.arange(k), np.arange(k)] = 0.0
    if role == role_b:
        m = 0.5 * (m + m.T)
    return np.array(kept, dtype=np.int64), m, excluded


def similarity_report(embeddings, prototypes, identities, age_groups, role="child", subjects=None):
    """Fig-2-style intra/inter bundle for one age role."""
    kept, inter, excluded = inter_class_similarity(embeddings, identities, age_groups, role, subjects)
    _, intra, _ = intra_class_similarity(embeddings, prototypes, identities, age_groups, role, kept)
    return SimilarityReport(kept, intra, inter, role, excluded)


def prototype_similarity(head, subset=None):
    """Cosine matrix of the chosen prototype columns and its mean off-diagonal |C|."""
    W = head.W
    subset = np.arange(W.shape[1]) if subset is None else np.asarray(subset, dtype=np.int64)
    if subset.size == 0:
        raise ValueError("subset must be nonempty")
    c = cosine_matrix(W[:, subset], W[:, subset])
    k = subset.size
    if k < 2:
        return c, 0.0
    off = ~np.eye(k, dtype=bool)
    return c, float(np.mean(np.abs(c[off])))


# ---------------------------------------------------------------------------
# Pair protocols


@dataclass
class PairSet:
    """Child-adult verification pairs.

    Each pair is ``(identity_a, sample_a, identity_b, sample_b, same)``
    where ``sample_a`` is the child sample and ``sample_b`` the adult one.
    ``min_age_gap`` of None means age gaps were not enforced.
    """

    pairs: list
    min_age_gap: Optional[int]

    def __len__(self):
        return len(self.pairs)

    @property
    def labels(self):
        return np.array([p[4] for p in self.pairs], dtype=bool)

    def to_csv_text(self, dataset):
        buf = io.StringIO()
        gap = "none" if self.min_age_gap is None else f"gap>{self.min_age_gap}"
        buf.write(f"# child-adult pairs; age rule: {gap} (strictly greater)\n")
        writer = csv.writer(buf, lineterminator="\n")
        writer.writerow(["identity_a", "sample_a", "identity_b", "sample_b", "label", "age_a", "age_b"])
        for ia, sa, ib, sb, same in self.pairs:
            writer.writerow([ia, sa, ib, sb, "same" if same else "different",
                             int(dataset.age_years[sa]), int(dataset.age_years[sb])])
        return buf.getvalue()


def _gap_ok(child_age, adult_age, min_gap):
    if min_gap is None:
        return True
    if child_age == UNKNOWN_AGE or adult_age == UNKNOWN_AGE:
        return False
    return adult_age - child_age > min_gap


def _candidate_pairs(dataset, min_gap):
    child = np.flatnonzero(dataset.child_mask)
    adult = np.flatnonzero(~dataset.child_mask)
    ages = dataset.age_years
    ids = dataset.identities
    ca = ages[child][:, None]
    aa = ages[adult][None, :]
    if min_gap is None:
        ok = np.ones((child.size, adult.size), dtype=bool)
    else:
        ok = (aa - ca > min_gap) & (ca != UNKNOWN_AGE) & (aa != UNKNOWN_AGE)
    same = ids[child][:, None] == ids[adult][None, :]
    ci, ai = np.nonzero(ok & same)
    pos = np.stack([child[ci], adult[ai]], axis=1)
    ci, ai = np.nonzero(ok & ~same)
    neg = np.stack([child[ci], adult[ai]], axis=1)
    return pos, neg


def build_verification_pairs(dataset, min_gap_years=20, count=None, seed=0):
    """Sample ``count`` positive and ``count`` negative child-adult pairs.

    A pair qualifies when the adult is more than ``min_gap_years`` older
    than the child (no constraint when ``min_gap_years`` is None). With
    ``count`` None the largest balanced set is drawn.
    """
    if min_gap_years is not None and min_gap_years < 0:
        raise ValueError("min_gap_years must be >= 0 or None")
    pos, neg = _candidate_pairs(dataset, min_gap_years)
    limit = min(len(pos), len(neg))
    if count is None:
        count = limit
    if count < 1 or count > limit:
        raise ValueError(
            f"cannot draw {count} positive and {count} negative pairs at gap "
            f"{min_gap_years}: at most {limit} of each are available")
    rng = np.random.default_rng(np.random.SeedSequence(seed, spawn_key=(4,)))
    p = pos[np.sort(rng.choice(len(pos), size=count, replace=False))]
    q = neg[np.sort(rng.choice(len(neg), size=count, replace=False))]
    ids = dataset.identities
    pairs = [(int(ids[a]), int(a), int(ids[b]), int(b), True) for a, b in p]
    pairs += [(int(ids[a]), int(a), int(ids[b]), int(b), False) for a, b in q]
    return PairSet(pairs, min_gap_years)


def validate_pairs(dataset, pairset):
    """List of human-readable violations; empty when the set is valid."""
    problems = []
    seen = set()
    n_same = 0
    for k, (ia, sa, ib, sb, same) in enumerate(pairset.pairs):
        ga, gb = int(dataset.age_groups[sa]), int(dataset.age_groups[sb])
        if ga != CHILD_GROUP:
            problems.append(f"pair {k}: first sample is not a child")
        if gb == CHILD_GROUP:
            problems.append(f"pair {k}: second sample is not an adult")
        if int(dataset.identities[sa]) != ia or int(dataset.identities[sb]) != ib:
            problems.append(f"pair {k}: identity fields disagree with samples")
        if same != (ia == ib):
            problems.append(f"pair {k}: label does not match identities")
        if pairset.min_age_gap is not None:
            gap = int(dataset.age_years[sb]) - int(dataset.age_years[sa])
            if int(dataset.age_years[sa]) < 0 or gap <= pairset.min_age_gap:
                problems.append(f"pair {k}: age gap {gap} not above {pairset.min_age_gap}")
        if (sa, sb) in seen:
            problems.append(f"pair {k}: duplicate")
        seen.add((sa, sb))
        n_same += bool(same)
    if 2 * n_same != len(pairset.pairs):
        problems.append(f"unbalanced: {n_same} same vs {len(pairset.pairs) - n_same} different")
    return problems


def _pair_scores(embeddings, pairset):
    feats = _unit_columns(embeddings)
    a = np.array([p[1] for p in pairset.pairs])
    b = np.array([p[3] for p in pairset.pairs])
    return np.sum(feats[:, a] * feats[:, b], axis=0)


def best_threshold_accuracy(scores, labels):
    """Best accuracy of ``score > t`` over midpoints of adjacent sorted scores.

    Thresholds below the minimum and above the maximum score are also
    tried, so the all-same and all-different decisions are included.
    Returns ``(accuracy, threshold)``; ties pick the smallest threshold.
    """
    scores = np.asarray(scores, dtype=np.float64)
    labels = np.asarray(labels, dtype=bool)
    if scores.size == 0:
        raise ValueError("no scores")
    order = np.argsort(scores, kind="stable")
    s = scores[order]
    y = labels[order]
    # cut k: samples [0, k) predicted different, [k, N) predicted same
    neg_below = np.concatenate([[0], np.cumsum(~y)])
    pos_above = np.concatenate([np.cumsum(y[::-1])[::-1], [0]])
    correct = neg_below + pos_above
    # cuts only between distinct scores
    valid = np.ones(s.size + 1, dtype=bool)
    valid[1:-1] = s[1:] > s[:-1]
    correct = np.where(valid, correct, -1)
    k = int(np.argmax(correct))
    if k == 0:
        thr = s[0] - 1.0
    elif k == s.size:
        thr = s[-1] + 1.0
    else:
        thr = 0.5 * (s[k - 1] + s[k])
    return correct[k] / s.size, float(thr)


def verification_accuracy(embeddings, pairset):
    """Cosine-scored verification with the best single threshold.

    Returns a dict with ``accuracy``, ``threshold`` and per-pair ``scores``.
    """
    if len(pairset) == 0:
        raise ValueError("empty pair set")
    scores = _pair_scores(embeddings, pairset)
    acc, thr = best_threshold_accuracy(scores, pairset.labels)
    return {"accuracy": float(acc), "threshold": thr, "scores": scores}


@dataclass
class IdentificationSplit:
    probes: np.ndarray  # sample indices, one child per identity
    gallery: np.ndarray  # sample indices, one adult per identity
    identities: np.ndarray
    min_age_gap: Optional[int] = None


def build_identification_split(dataset, min_gap_years=20, seed=0):
    """One child probe and one adult gallery image per qualifying identity.

    Every gallery image must be more than ``min_gap_years`` older than
    every probe, the identity's own probe included.
    """
    rng = np.random.default_rng(np.random.SeedSequence(seed, spawn_key=(5,)))
    ids = dataset.identities
    ages = dataset.age_years
    probes = {}
    for ident in dataset.child_ids():
        cands = np.flatnonzero(dataset.child_mask & (ids == ident))
        if min_gap_years is not None:
            cands = cands[ages[cands] != UNKNOWN_AGE]
        if cands.size:
            probes[int(ident)] = int(rng.choice(cands))
    if not probes:
        raise ValueError("no identity has a usable child sample")
    oldest_probe = max(ages[s] for s in probes.values())
    rows = []
    for ident, probe in sorted(probes.items()):
        cands = np.flatnonzero(~dataset.child_mask & (ids == ident))
        if min_gap_years is not None:
            cands = cands[(ages[cands] != UNKNOWN_AGE) & (ages[cands] - oldest_probe > min_gap_years)]
        if cands.size:
            rows.append((ident, probe, int(rng.choice(cands))))
    if not rows:
        raise ValueError(f"no identity has an adult sample satisfying gap > {min_gap_years}")
    rows = np.array(rows)
    return IdentificationSplit(rows[:, 1], rows[:, 2], rows[:, 0], min_gap_years)


def rank1_identification(embeddings, split):
    """Fraction of probes whose nearest gallery embedding shares their identity.

    Ties go to the lowest gallery index.
    """
    if len(split.gallery) == 0:
        raise ValueError("empty gallery")
    feats = _unit_columns(embeddings)
    sims = feats[:, split.probes].T @ feats[:, split.gallery]
    nearest = np.argmax(sims, axis=1)
    correct = split.identities[nearest] == split.identities
    return float(np.mean(correct))


# ---------------------------------------------------------------------------
# Export


def export_heatmap(matrix, fmt="csv"):
    """Encode a matrix as CSV text or a plain (P2) PGM image; returns bytes.

    PGM maps ``v`` in [-1, 1] to ``floor(127.5 * (v + 1) + 0.5)``.
    """
    m = np.asarray(matrix, dtype=np.float64)
    if m.ndim != 2:
        raise ValueError("heatmap needs a 2-D matrix")
    if not np.all(np.isfinite(m)):
        raise ValueError("heatmap matrix has non-finite entries")
    if fmt == "csv":
        lines = [",".join(repr(float(v)) for v in row) for row in m]
        return ("\n".join(lines) + "\n").encode("ascii")
    if fmt == "pgm":
        if np.any(np.abs(m) > 1 + 1e-9):
            raise ValueError("pgm export needs values in [-1, 1]")
        pix = np.floor(127.5 * (np.clip(m, -1.0, 1.0) + 1.0) + 0.5).astype(int)
        rows = [" ".join(str(v) for v in row) for row in pix]
        head = f"P2\n{m.shape[1]} {m.shape[0]}\n255\n"
        return (head + "\n".join(rows) + "\n").encode("ascii")
    raise ValueError(f"unknown heatmap format {fmt!r}")


def parse_heatmap_csv(data):
    text = data.decode("ascii") if isinstance(data, bytes) else data
    return np.array([[float(c) for c in line.split(",")] for line in text.splitlines() if line])


def project_prototypes_2d(head, child_ids=None):
    """PCA layout of the unit-normalised prototypes, tagged child/non-child.

    Returns ``(coords, is_child)`` with ``coords`` of shape (n, 2).
    """
    child_ids = head.child_ids if child_ids is None else child_ids
    W = np.asarray(head.W, dtype=np.float64)
    n = W.shape[1]
    if n < 3:
        raise ValueError("need >= 3 prototypes to project")
    unit = _unit_columns(W)
    coords = pca_2d(unit.T)
    tags = np.zeros(n, dtype=bool)
    tags[np.asarray(child_ids, dtype=np.int64)] = True
    return coords, tags


def projection_csv(coords, tags):
    buf = io.StringIO()
    writer = csv.writer(buf, lineterminator="\n")
    writer.writerow(["identity", "is_child", "x", "y"])
    for i, ((x, y), c) in enumerate(zip(coords, tags)):
        writer.writerow([i, int(c), repr(float(x)), repr(float(y))])
    return buf.getvalue().encode("ascii")
