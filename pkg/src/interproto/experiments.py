"""Arm wiring, evaluation bundles and seed aggregation used by the CLI.

Everything here is a plain function of its inputs so the command-line
outputs can be reproduced with direct library calls.
"""

import math
import statistics

import numpy as np

from .config import ARMS
from .data import generate_synthetic
from .encoder import embed, mean_offdiag_abs_cos, train
from .evaluation import (
    build_identification_split,
    build_verification_pairs,
    export_heatmap,
    inter_class_similarity,
    project_prototypes_2d,
    projection_csv,
    prototype_similarity,
    rank1_identification,
    verification_accuracy,
)
from .losses import MarginConfig


def gap_key(gap):
    return "none" if gap is None else str(gap)


def arm_train_config(arm, cfg, dataset, seed):
    """TrainConfig for one comparison arm.

    baseline: margin loss only. ip: plus Inter-Prototype on child
    identities. ip_full: Inter-Prototype on every identity. reweight,
    margin_up, oversample: the child re-weighting, raised child margin
    and child oversampling alternatives, all without the Inter-Prototype
    term.
    """
    if arm not in ARMS:
        raise ValueError(f"unknown arm {arm!r}; expected one of {ARMS}")
    plain = cfg.margin_config(lambda_ip=0.0)
    if arm == "baseline":
        return cfg.train_config(seed, margin=plain, apply_ip_to="off")
    if arm == "ip":
        return cfg.train_config(seed, apply_ip_to="child_only")
    if arm == "ip_full":
        return cfg.train_config(seed, apply_ip_to="all_identities")
    if arm == "reweight":
        m = MarginConfig(kind=plain.kind, scale=plain.scale, margin=plain.margin, lambda_ip=0.0,
                         per_sample_weight={True: cfg.reweight_w, False: 1.0})
        return cfg.train_config(seed, margin=m, apply_ip_to="off")
    if arm == "margin_up":
        override = {int(c): cfg.margin_up for c in dataset.child_ids()}
        m = MarginConfig(kind=plain.kind, scale=plain.scale, margin=plain.margin, lambda_ip=0.0,
                         per_class_margin_override=override)
        return cfg.train_config(seed, margin=m, apply_ip_to="off")
    return cfg.train_config(seed, margin=plain, apply_ip_to="off", rho=cfg.oversample_rho)


def datasets_for(cfg):
    return generate_synthetic(cfg.synthetic_spec("train")), generate_synthetic(cfg.synthetic_spec("test"))


def run_arm(cfg, arm, seed, dataset=None):
    """Train one arm for one seed; returns ``(params, head, ledger)``."""
    if dataset is None:
        dataset = generate_synthetic(cfg.synthetic_spec("train"))
    tcfg = arm_train_config(arm, cfg, dataset, seed)
    params, head, ledger = train(dataset, tcfg, run_id=f"{arm}/seed{seed}")
    ledger.notes.update({"arm": arm, "experiment_digest": cfg.digest()})
    return params, head, ledger


def evaluate(params, head, dataset, gaps, pair_count=None, seed=0):
    """Verification accuracy per gap and rank-1 per gap on ``dataset``."""
    emb = embed(params, dataset)
    if emb.shape[0] != head.W.shape[0]:
        raise ValueError(f"embedding dim {emb.shape[0]} != prototype dim {head.W.shape[0]}")
    verification, rank1, counts = {}, {}, {}
    for gap in gaps:
        pairs = build_verification_pairs(dataset, gap, pair_count, seed)
        verification[gap_key(gap)] = verification_accuracy(emb, pairs)["accuracy"]
        counts[gap_key(gap)] = len(pairs)
        split = build_identification_split(dataset, gap, seed)
        rank1[gap_key(gap)] = rank1_identification(emb, split)
    return {
        "verification": verification,
        "rank1": rank1,
        "pairs": counts,
        "child_mean_abs_cos": mean_offdiag_abs_cos(head.W, head.child_ids),
    }


def analysis_files(params, head, dataset):
    """Heatmaps and projection as ``{filename: bytes}`` plus a summary dict."""
    emb = embed(params, dataset)
    child_ids = dataset.child_ids()
    files = {}
    _, cc, _ = inter_class_similarity(emb, dataset.identities, dataset.age_groups, "child",
                                      subjects=child_ids)
    _, ca, _ = inter_class_similarity(emb, dataset.identities, dataset.age_groups, "child",
                                      subjects=child_ids, role_b="adult")
    gram, summary = prototype_similarity(head, head.child_ids)
    for name, m in (("child_child_inter", cc), ("child_adult_inter", ca), ("prototype_gram", gram)):
        files[f"{name}.csv"] = export_heatmap(m, "csv")
        files[f"{name}.pgm"] = export_heatmap(np.clip(m, -1.0, 1.0), "pgm")
    coords, tags = project_prototypes_2d(head)
    files["projection.csv"] = projection_csv(coords, tags)
    off = ~np.eye(cc.shape[0], dtype=bool)
    info = {
        "prototype_child_mean_abs_cos": summary,
        "child_child_inter_mean": float(cc[off].mean()),
        "child_adult_inter_mean": float(ca[off].mean()),
        "n_child": int(len(child_ids)),
    }
    return files, info


def mean_std(values):
    """Mean and sample standard deviation; std is None for fewer than 2 values."""
    vals = [float(v) for v in values]
    mean = statistics.fmean(vals)
    std = statistics.stdev(vals) if len(vals) >= 2 else None
    return mean, std


def flatten_metrics(metrics):
    out = {}
    for gap, v in metrics["verification"].items():
        out[f"verif@{gap}"] = v
    for gap, v in metrics["rank1"].items():
        out[f"rank1@{gap}"] = v
    out["child_abs_cos"] = metrics["child_mean_abs_cos"]
    return out


def compare(arm_metrics):
    """Aggregate ``{arm: {seed: metrics}}`` into mean/std rows.

    Every arm must cover the same seeds.
    """
    if not arm_metrics:
        raise ValueError("nothing to compare")
    seed_sets = {arm: sorted(m) for arm, m in arm_metrics.items()}
    reference = next(iter(seed_sets.values()))
    for arm, seeds in seed_sets.items():
        if seeds != reference:
            missing = sorted(set(reference) ^ set(seeds))
            raise ValueError(f"arm {arm} has seeds {seeds}, expected {reference} (differ: {missing})")
    rows = []
    for arm, per_seed in arm_metrics.items():
        flat = [flatten_metrics(per_seed[s]) for s in reference]
        row = {"arm": arm, "seeds": reference, "metrics": {}}
        for key in flat[0]:
            mean, std = mean_std([f[key] for f in flat])
            row["metrics"][key] = {"mean": mean, "std": std}
        rows.append(row)
    return {"seeds": reference, "rows": rows}


def format_table(report):
    keys = list(report["rows"][0]["metrics"])
    header = ["arm"] + keys
    body = []
    for row in report["rows"]:
        cells = [row["arm"]]
        for k in keys:
            m = row["metrics"][k]
            std = "n/a" if m["std"] is None else f"{m['std']:.4f}"
            cells.append(f"{m['mean']:.4f} ± {std}")
        body.append(cells)
    widths = [max(len(r[i]) for r in [header] + body) for i in range(len(header))]
    fmt = lambda r: "  ".join(c.ljust(w) for c, w in zip(r, widths)).rstrip()
    lines = [fmt(header), "  ".join("-" * w for w in widths)] + [fmt(r) for r in body]
    return "\n".join(lines) + "\n"


def is_finite_ledger(ledger):
    return all(math.isfinite(v) for r in ledger.records for v in r.values()
               if isinstance(v, float))
