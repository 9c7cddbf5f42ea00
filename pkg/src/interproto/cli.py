"""Command-line experiment runner.

    interproto gen-data --config exp.cfg --out results
    interproto train    --config exp.cfg --arm ip --seed 0 --seed 1 --out results
    interproto eval     results/runs/ip/seed0 --config exp.cfg
    interproto analyze  results/runs/ip/seed0 --config exp.cfg
    interproto compare  results/runs/baseline results/runs/ip --out results

The output root defaults to ``$INTERPROTO_OUT`` and then to the config's
``out_dir``. Every file is written under a temporary name and renamed once
complete.
"""

import argparse
import hashlib
import json
import os
import sys
import time
from pathlib import Path

from .config import ARMS, load_config
from .data import load_csv, write_csv
from .encoder import load_checkpoint, save_checkpoint
from .experiments import (
    analysis_files,
    compare,
    datasets_for,
    evaluate,
    format_table,
    run_arm,
)

ENV_OUT = "INTERPROTO_OUT"


class CommandError(Exception):
    pass


def _write_atomic(path, data):
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    tmp = path.with_name(path.name + ".tmp")
    tmp.write_bytes(data if isinstance(data, bytes) else data.encode("utf-8"))
    os.replace(tmp, path)


def _json_bytes(obj):
    return (json.dumps(obj, sort_keys=True, indent=2) + "\n").encode("utf-8")


def _out_root(args, cfg):
    return Path(args.out or os.environ.get(ENV_OUT) or cfg.out_dir)


def _seeds(args, cfg):
    seeds = args.seed or list(cfg.seeds)
    if len(set(seeds)) != len(seeds):
        raise CommandError(f"seeds must be distinct, got {seeds}")
    return seeds


def _dataset(path, cfg, split):
    if path:
        return load_csv(path)
    train, test = datasets_for(cfg)
    return train if split == "train" else test


def cmd_gen_data(args):
    cfg = load_config(args.config)
    out = _out_root(args, cfg) / "data"
    out.mkdir(parents=True, exist_ok=True)
    train, test = datasets_for(cfg)
    for name, ds in (("train", train), ("test", test)):
        path = out / f"{name}.csv"
        write_csv(ds, path)
        s = ds.summary()
        print(f"{path}: (n_child, n_total) = ({s['n_child']}, {s['n']}); "
              f"{s['samples']} samples ({s['child_samples']} child, {s['adult_samples']} adult)")
    return 0


def cmd_train(args):
    cfg = load_config(args.config)
    root = _out_root(args, cfg)
    dataset = _dataset(args.data, cfg, "train")
    for seed in _seeds(args, cfg):
        run_dir = root / "runs" / args.arm / f"seed{seed}"
        start = time.time()
        params, head, ledger = run_arm(cfg, args.arm, seed, dataset)
        header = json.loads(ledger.lines()[0])
        header["timestamp"] = time.strftime("%Y-%m-%dT%H:%M:%S")
        lines = [json.dumps(header, sort_keys=True)] + ledger.lines()[1:]
        _write_atomic(run_dir / "ledger.jsonl", "\n".join(lines) + "\n")
        ckpt = run_dir / "checkpoint.json"
        run_dir.mkdir(parents=True, exist_ok=True)
        save_checkpoint(ckpt, params, head, cfg.digest())
        print(f"{run_dir}: child |C| {ledger.final['child_mean_abs_cos']:.4f}, "
              f"final loss {ledger.records[-1]['loss']:.4f} ({time.time() - start:.1f}s)")
    return 0


def _run_info(run_dir):
    ledger = Path(run_dir) / "ledger.jsonl"
    if not ledger.exists():
        return {}
    with open(ledger, encoding="utf-8") as fh:
        return json.loads(fh.readline())


def cmd_eval(args):
    cfg = load_config(args.config)
    for run_dir in args.runs:
        run_dir = Path(run_dir)
        ckpt = run_dir / "checkpoint.json"
        if not ckpt.exists():
            raise CommandError(f"{ckpt}: no checkpoint")
        params, head, digest = load_checkpoint(ckpt)
        dataset = _dataset(args.data, cfg, "test")
        if dataset.dim != params.d_in:
            raise CommandError(f"dataset dimension {dataset.dim} != encoder input {params.d_in}")
        info = _run_info(run_dir)
        seed = args.seed[0] if args.seed else int(info.get("seed", 0))
        metrics = evaluate(params, head, dataset, cfg.gaps, cfg.pair_count, seed)
        metrics.update({
            "arm": info.get("arm"),
            "seed": seed,
            "config_digest": digest,
            "checkpoint_sha256": hashlib.sha256(ckpt.read_bytes()).hexdigest(),
        })
        out = Path(args.out) / "metrics.json" if args.out else run_dir / "metrics.json"
        _write_atomic(out, _json_bytes(metrics))
        verif = ", ".join(f"gap>{g}: {v:.4f}" for g, v in metrics["verification"].items())
        print(f"{out}: verification {verif}")
    return 0


def cmd_analyze(args):
    cfg = load_config(args.config)
    run_dir = Path(args.run)
    params, head, digest = load_checkpoint(run_dir / "checkpoint.json")
    dataset = _dataset(args.data, cfg, "train")
    if dataset.dim != params.d_in:
        raise CommandError(f"dataset dimension {dataset.dim} != encoder input {params.d_in}")
    files, info = analysis_files(params, head, dataset)
    info["config_digest"] = digest
    out = Path(args.out) if args.out else run_dir / "analysis"
    for name, data in files.items():
        _write_atomic(out / name, data)
    _write_atomic(out / "summary.json", _json_bytes(info))
    print(f"{out}: prototype child mean |C| = {info['prototype_child_mean_abs_cos']:.4f}")
    return 0


def cmd_compare(args):
    arm_metrics = {}
    digests = {}
    for arm_dir in args.arms:
        arm_dir = Path(arm_dir)
        files = sorted(arm_dir.glob("seed*/metrics.json"))
        if not files:
            raise CommandError(f"{arm_dir}: no seed*/metrics.json files")
        per_seed = {}
        for f in files:
            m = json.loads(f.read_text(encoding="utf-8"))
            per_seed[int(m["seed"])] = m
            digests[str(f)] = m["config_digest"]
        arm_metrics[arm_dir.name] = per_seed
    if len(set(digests.values())) > 1:
        detail = ", ".join(f"{k}={v[:12]}" for k, v in digests.items())
        raise CommandError(f"metrics come from different configs: {detail}")
    try:
        report = compare(arm_metrics)
    except ValueError as exc:
        raise CommandError(str(exc)) from None
    report["config_digest"] = next(iter(digests.values()))
    table = format_table(report)
    sys.stdout.write(table)
    out = Path(args.out or os.environ.get(ENV_OUT) or ".")
    _write_atomic(out / "comparison.json", _json_bytes(report))
    _write_atomic(out / "comparison.txt", table)
    return 0


def build_parser():
    p = argparse.ArgumentParser(prog="interproto", description=__doc__.splitlines()[0])
    sub = p.add_subparsers(dest="command", required=True)

    def common(sp, out_help="output root directory"):
        sp.add_argument("--config", help="key = value experiment config")
        sp.add_argument("--out", help=out_help)

    sp = sub.add_parser("gen-data", help="write train/test synthetic datasets as CSV")
    common(sp)
    sp.set_defaults(func=cmd_gen_data)

    sp = sub.add_parser("train", help="train one arm for one or more seeds")
    common(sp)
    sp.add_argument("--arm", required=True, choices=ARMS)
    sp.add_argument("--seed", type=int, action="append")
    sp.add_argument("--data", help="training dataset CSV (default: regenerate from config)")
    sp.set_defaults(func=cmd_train)

    sp = sub.add_parser("eval", help="verification and rank-1 metrics for trained runs")
    common(sp, "directory for metrics.json (default: the run directory)")
    sp.add_argument("runs", nargs="+", help="run directories holding checkpoint.json")
    sp.add_argument("--seed", type=int, action="append", help="pair sampling seed")
    sp.add_argument("--data", help="evaluation dataset CSV (default: held-out synthetic identities)")
    sp.set_defaults(func=cmd_eval)

    sp = sub.add_parser("analyze", help="similarity heatmaps and prototype projection")
    common(sp, "output directory (default: RUN/analysis)")
    sp.add_argument("run")
    sp.add_argument("--data", help="dataset CSV (default: the training identities)")
    sp.set_defaults(func=cmd_analyze)

    sp = sub.add_parser("compare", help="mean ± std table over seeds for several arms")
    sp.add_argument("arms", nargs="+", help="arm directories containing seed*/metrics.json")
    sp.add_argument("--out", help="where to write comparison.json/.txt")
    sp.set_defaults(func=cmd_compare)
    return p


def main(argv=None):
    args = build_parser().parse_args(argv)
    try:
        return args.func(args)
    except (CommandError, ValueError, OSError, RuntimeError) as exc:
        print(f"interproto {args.command}: error: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
