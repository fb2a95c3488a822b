"""Command-line entry point: ``gct gen | prior | train | eval | attn-dump | stats``.

Exit status is 0 on success, 2 for usage and contract errors and 3 when
training diverges.
"""
from __future__ import annotations

import argparse
import csv
import hashlib
import json
import logging
import sys
from dataclasses import asdict, replace
from pathlib import Path

import numpy as np

from . import graph, harness, synthgen
from . import numerics as nx
from .errors import DivergenceError, GCTError
from .models import MODEL_KINDS, ModelSpec, Vocab
from .records import FORMAT_VERSION, dataset_stats, read_jsonl, write_jsonl, write_stats
from .tasks import TASK_KINDS, TaskSpec

log = logging.getLogger("gct")

EXIT_OK, EXIT_USAGE, EXIT_DIVERGED = 0, 2, 3
RUN_CONFIG = "config.json"
METRICS_CSV = "metrics.csv"


class UsageError(Exception):
    pass


def _fmt(x) -> str:
    return f"{x:.6g}" if isinstance(x, float) else str(x)


def _read_json(path) -> dict:
    try:
        return json.loads(Path(path).read_text(encoding="utf-8"))
    except (OSError, json.JSONDecodeError) as exc:
        raise UsageError(f"cannot read {path}: {exc}") from exc


def _write_json(path, data) -> None:
    Path(path).write_text(json.dumps(data, indent=2, sort_keys=True) + "\n", encoding="utf-8")


def _sha256(path) -> str:
    return hashlib.sha256(Path(path).read_bytes()).hexdigest()


def _load_data(path) -> list:
    try:
        encounters = read_jsonl(path)
    except OSError as exc:
        raise UsageError(f"cannot read {path}: {exc}") from exc
    if not encounters:
        raise UsageError(f"{path} holds no encounters")
    return encounters


# -- gen / stats / prior -------------------------------------------------------

def cmd_gen(args) -> int:
    config = synthgen.SyntheticConfig.desk() if args.desk else synthgen.SyntheticConfig()
    if args.config:
        config = synthgen.SyntheticConfig.from_dict({**config.to_dict(), **_read_json(args.config)})
    if args.seed is not None:
        config = synthgen.with_seed(config, args.seed)
    if args.n_encounters is not None:
        config = replace(config, n_encounters=args.n_encounters)
    labels = synthgen.DxTreatmentLabelSpec() if args.labels == "dx-treatment" else None
    encounters = synthgen.generate(config, labels)
    out = Path(args.out)
    try:
        write_jsonl(encounters, out)
        stats = dataset_stats(encounters)
        stats["generator"] = config.to_dict()
        write_stats(stats, out.with_name(out.name + ".stats.json"))
    except OSError as exc:
        raise UsageError(f"cannot write {out}: {exc}") from exc
    print(f"wrote {len(encounters)} encounters to {out}")
    for key in ("mean_dx", "mean_treat", "mean_lab"):
        print(f"{key}\t{_fmt(stats[key])}")
    return EXIT_OK


def cmd_stats(args) -> int:
    stats = dataset_stats(_load_data(args.data))
    for key in ("n_encounters", "mean_dx", "mean_treat", "mean_lab", "has_structure"):
        print(f"{key}\t{_fmt(stats[key])}")
    for key, value in sorted(stats["prevalence"].items()):
        print(f"prevalence.{key}\t{_fmt(value)}")
    if args.out:
        write_stats(stats, args.out)
    return EXIT_OK


def _find(encounters, encounter_id):
    for enc in encounters:
        if str(enc.id) == str(encounter_id):
            return enc
    raise UsageError(f"no encounter with id {encounter_id!r}")


def cmd_prior(args) -> int:
    """P and M of one encounter, with tables from a training split."""
    encounters = _load_data(args.data)
    vocab = graph.vocab_sizes(encounters)
    run_seed = harness.run_seed_for(args.seed, args.repeat)
    train_set, _, _ = harness.split(encounters, harness.derive_seed(run_seed, "split"))
    tables = graph.estimate_cond_probs(train_set, vocab)
    enc = _find(encounters, args.encounter)
    prior = graph.build_prior(enc, tables, args.green_value)
    doc = {
        "format_version": FORMAT_VERSION,
        "encounter": enc.id,
        "nodes": graph.node_labels(enc),
        "prior": prior.tolist(),
        "allowed": graph.allowed_pattern(graph.NodeIndexing.of(enc)).astype(int).tolist(),
    }
    if args.out:
        _write_json(args.out, doc)
    else:
        json.dump(doc, sys.stdout)
        print()
    return EXIT_OK


# -- train ------------------------------------------------------------------------

def _specs_from_args(args, encounters):
    vocab = Vocab(*graph.vocab_sizes(encounters))
    task = TaskSpec(args.task, n_dx=vocab.n_dx)
    base = _read_json(args.config) if args.config else {}
    spec = ModelSpec.from_dict({"kind": args.model, **base.get("model", {})})
    config = harness.TrainConfig.from_dict(base.get("train", {}))
    if args.preset:
        spec, config = harness.apply_preset(args.preset, spec, config)
    overrides = {k: getattr(args, k) for k in ("dim", "mlp_dropout", "post_mlp_dropout", "reg_coef")
                 if getattr(args, k) is not None}
    if args.first_block_kl is not None:
        overrides["first_block_kl"] = args.first_block_kl == "on"
    spec = replace(spec, **overrides)
    train_overrides = {k: getattr(args, k) for k in ("lr", "iterations", "eval_interval", "batch_size",
                                                    "repeats", "seed") if getattr(args, k) is not None}
    config = replace(config, **train_overrides)
    spec.validate()
    config.validate()
    return spec, task, config, vocab


def cmd_train(args) -> int:
    encounters = _load_data(args.data)
    spec, task, config, vocab = _specs_from_args(args, encounters)
    harness.check_compatible(spec.kind, task)
    structure = args.structure
    if structure and not all(e.has_structure for e in encounters):
        raise UsageError("--structure needs a dataset with ground-truth edges")
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    _write_json(out / RUN_CONFIG, {
        "format_version": FORMAT_VERSION,
        "data": str(Path(args.data).resolve()),
        "data_sha256": _sha256(args.data),
        "model": spec.to_dict(),
        "task": task.kind,
        "vocab": asdict(vocab),
        "train": config.to_dict(),
        "structure": structure,
    })
    records = harness.repeat_experiment(spec, task, config, encounters, vocab, structure=structure,
                                        jobs=args.jobs, out_dir=out)
    (out / METRICS_CSV).write_text(harness.metrics_csv(records), encoding="utf-8")
    _print_summary(records)
    return EXIT_OK


def _print_summary(records) -> None:
    for split_name in ("valid", "test"):
        for metric, (mean, std) in sorted(harness.aggregate(records, split_name).items()):
            print(f"{split_name}\t{metric}\t{_fmt(mean)}\t({_fmt(std)})")


# -- eval / attn-dump ---------------------------------------------------------------

def _restore(run_dir, repeat: int, with_truth: bool):
    run_dir = Path(run_dir)
    if not (run_dir / RUN_CONFIG).exists():
        raise UsageError(f"{run_dir} is not a run directory")
    cfg = _read_json(run_dir / RUN_CONFIG)
    encounters = _load_data(cfg["data"])
    if with_truth and not all(e.has_structure for e in encounters):
        raise UsageError("dataset carries no ground-truth structure")
    spec = ModelSpec.from_dict(cfg["model"])
    vocab = Vocab(**cfg["vocab"])
    task = TaskSpec(cfg["task"], n_dx=vocab.n_dx)
    config = harness.TrainConfig.from_dict(cfg["train"])
    record, _, arrays = harness.load_run(run_dir, repeat)
    exp = harness.build_experiment(spec, task, config, encounters, vocab, record.seed, with_truth=with_truth)
    exp.restore(arrays)
    return exp, record, encounters


def _repeats(run_dir) -> list[int]:
    found = sorted(int(p.stem.split("_")[1]) for p in Path(run_dir).glob("run_*.json"))
    if not found:
        raise UsageError(f"{run_dir} holds no trained runs")
    return found


def cmd_eval(args) -> int:
    rows = []
    repeats = [args.repeat] if args.repeat is not None else _repeats(args.run)
    for r in repeats:
        exp, record, _ = _restore(args.run, r, with_truth=args.structure or args.pinned_truth)
        if args.structure and not harness.has_attention_maps(exp):
            raise UsageError(f"{exp.spec.kind} produces no attention maps")
        items = exp.test if args.split == "test" else exp.valid
        metrics = harness.evaluate(exp, items, structure=args.structure, pinned_truth=args.pinned_truth)
        for metric in sorted(metrics):
            rows.append((exp.spec.kind, exp.task.kind, args.split, record.seed, metric, metrics[metric]))
    print("\t".join(harness.CSV_COLUMNS))
    for row in rows:
        print("\t".join(_fmt(v) for v in row))
    if args.out:
        with open(args.out, "w", newline="", encoding="utf-8") as fh:
            writer = csv.writer(fh, lineterminator="\n")
            writer.writerow(harness.CSV_COLUMNS)
            for row in rows:
                writer.writerow([*row[:5], repr(float(row[5]))])
    return EXIT_OK


def attention_dump(exp, encounter, node: int) -> dict:
    """Attention paid by ``node`` to every node of ``encounter``, per block."""
    prepared = harness.prepare([encounter], exp.vocab, exp.tables, exp.spec.kind, exp.task, exp.data_seed,
                               with_truth=encounter.has_structure)[0]
    n = prepared.indexing.size
    if not 0 <= node < n:
        raise UsageError(f"node {node} outside encounter of {n} nodes")
    with nx.no_grad():
        batch, _ = harness.collate([prepared], exp.spec.kind, exp.task, exp.vocab, np.random.default_rng(0))
        out = exp.model.forward(batch)
    maps = harness.attention_maps(out, 0, n)
    if not maps:
        raise UsageError(f"{exp.spec.kind} has no attention maps")
    truth = None
    if encounter.has_structure:
        truth = (graph.adjacency_matrix(encounter)[node] > 0).tolist()
    labels = graph.node_labels(encounter)
    return {
        "format_version": FORMAT_VERSION,
        "model": exp.spec.kind,
        "encounter": encounter.id,
        "node": node,
        "node_label": labels[node],
        "labels": labels,
        "true_connection": truth,
        "blocks": [{"block": j + 1, "attention": m[node].tolist()} for j, m in enumerate(maps)],
    }


def cmd_attn_dump(args) -> int:
    exp, _, encounters = _restore(args.run, args.repeat, with_truth=False)
    if not harness.has_attention_maps(exp):
        raise UsageError(f"{exp.spec.kind} has no attention maps")
    doc = attention_dump(exp, _find(encounters, args.encounter), args.node)
    _write_json(args.out, doc)
    for block in doc["blocks"]:
        row = "  ".join(f"{lab}={_fmt(v)}" for lab, v in zip(doc["labels"], block["attention"]))
        print(f"block {block['block']}: {row}")
    return EXIT_OK


# -- parser ----------------------------------------------------------------------------

def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="gct", description=__doc__.splitlines()[0])
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("gen", help="generate a synthetic dataset")
    p.add_argument("--config", help="JSON file of generator settings")
    p.add_argument("--out", required=True)
    p.add_argument("--labels", choices=("dx-treatment", "none"), default="dx-treatment")
    p.add_argument("--seed", type=int)
    p.add_argument("--n-encounters", type=int)
    p.add_argument("--desk", action="store_true", help="vocabulary of 100 per code type")
    p.set_defaults(func=cmd_gen)

    p = sub.add_parser("stats", help="summary statistics of a dataset")
    p.add_argument("--data", required=True)
    p.add_argument("--out")
    p.set_defaults(func=cmd_stats)

    p = sub.add_parser("prior", help="prior matrix P of one encounter")
    p.add_argument("--data", required=True)
    p.add_argument("--encounter", required=True)
    p.add_argument("--seed", type=int, default=0, help="master seed selecting the training split")
    p.add_argument("--repeat", type=int, default=0)
    p.add_argument("--green-value", type=float, default=1.0)
    p.add_argument("--out")
    p.set_defaults(func=cmd_prior)

    p = sub.add_parser("train", help="train one model on one task")
    p.add_argument("--data", required=True)
    p.add_argument("--model", required=True, choices=MODEL_KINDS)
    p.add_argument("--task", required=True, choices=TASK_KINDS)
    p.add_argument("--preset", choices=sorted(harness.PRESETS), metavar="NAME",
                   help="named hyperparameters, e.g. synthetic/graph-recon/gct")
    p.add_argument("--config", help="JSON with optional 'model' and 'train' sections")
    p.add_argument("--out", required=True)
    p.add_argument("--dim", type=int)
    p.add_argument("--lr", type=float)
    p.add_argument("--mlp-dropout", type=float)
    p.add_argument("--post-mlp-dropout", type=float)
    p.add_argument("--reg-coef", type=float)
    p.add_argument("--first-block-kl", choices=("on", "off"))
    p.add_argument("--iterations", type=int)
    p.add_argument("--eval-interval", type=int)
    p.add_argument("--batch-size", type=int)
    p.add_argument("--repeats", type=int)
    p.add_argument("--seed", type=int)
    p.add_argument("--structure", action="store_true", help="also report attention structure on test")
    p.add_argument("--jobs", type=int, default=1)
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("eval", help="evaluate a trained run")
    p.add_argument("--run", required=True)
    p.add_argument("--split", choices=("test", "valid"), default="test")
    p.add_argument("--repeat", type=int)
    p.add_argument("--structure", action="store_true")
    p.add_argument("--pinned-truth", action="store_true",
                   help="pin transformer attention to the true adjacency (sanity check)")
    p.add_argument("--out")
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("attn-dump", help="attention row of one node, per block")
    p.add_argument("--run", required=True)
    p.add_argument("--encounter", required=True)
    p.add_argument("--node", type=int, required=True)
    p.add_argument("--repeat", type=int, default=0)
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_attn_dump)
    return parser


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        return args.func(args)
    except DivergenceError as exc:
        print(f"error: training diverged at {exc}", file=sys.stderr)
        return EXIT_DIVERGED
    except (UsageError, GCTError, ValueError, OSError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_USAGE


if __name__ == "__main__":
    sys.exit(main())
