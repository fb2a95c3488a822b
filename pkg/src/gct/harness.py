"""Splits, batching, training with validation-based selection, repetition."""
from __future__ import annotations

import csv
import io
import json
import logging
import math
from concurrent.futures import ProcessPoolExecutor
from dataclasses import asdict, dataclass, field, fields, replace
from pathlib import Path

import numpy as np

from . import graph
from . import numerics as nx
from .errors import ConfigError, DivergenceError, OptimizerError, StructureError, TaskError
from .models import ATTENTION_MODELS, GCN_FAMILY, Batch, Model, ModelOutput, ModelSpec, Vocab, load_checkpoint, \
    load_parameters, save_checkpoint
from .records import Encounter
from .rng import derive_seed, stream, tag_id
from .tasks import Head, Targets, TaskSpec, check_compatible, compute_metrics, masked_dx_task, \
    structure_eval, task_loss, total_loss

log = logging.getLogger(__name__)

RECORD_VERSION = 1
CSV_COLUMNS = ("model", "task", "split", "seed", "metric", "value")


@dataclass(frozen=True)
class TrainConfig:
    batch_size: int = 32
    iterations: int = 20_000
    lr: float = 1e-3
    eval_interval: int = 500
    eval_batch_size: int = 64
    seed: int = 0
    split_ratio: tuple[float, float, float] = (0.8, 0.1, 0.1)
    repeats: int = 5
    green_value: float = 1.0

    def validate(self) -> None:
        if self.batch_size < 1 or self.eval_batch_size < 1:
            raise ConfigError("batch sizes must be positive")
        if self.iterations < 0 or self.eval_interval < 1:
            raise ConfigError("iterations must be >= 0 and eval_interval >= 1")
        if self.lr <= 0:
            raise ConfigError("learning rate must be positive")
        if len(self.split_ratio) != 3 or min(self.split_ratio) < 0 or \
                not math.isclose(sum(self.split_ratio), 1.0, abs_tol=1e-9):
            raise ConfigError("split ratios must be three non-negative numbers summing to 1")
        if self.repeats < 1:
            raise ConfigError("repeats must be >= 1")

    def to_dict(self) -> dict:
        d = asdict(self)
        d["split_ratio"] = list(self.split_ratio)
        return d

    @classmethod
    def from_dict(cls, data: dict) -> "TrainConfig":
        known = {f.name for f in fields(cls)}
        unknown = set(data) - known
        if unknown:
            raise ConfigError(f"unknown training fields: {sorted(unknown)}")
        data = dict(data)
        if "split_ratio" in data:
            data["split_ratio"] = tuple(data["split_ratio"])
        return cls(**data)


# Per-task hyperparameters: (lr, mlp dropout, post-MLP dropout, reg coef).
_PRESET_MODELS = ("gcn", "gcn-p", "gcn-random", "shallow", "deep", "transformer", "gct")
_PRESET_TABLE = {
    "synthetic/graph-recon": (
        (0.00045, 0.3, 0.2, None), (0.0006, 0.01, 0.02, None), (0.0003, 0.5, 0.005, None),
        (0.00025, 0.2, None, None), None, (0.0007, 0.8, 0.001, None), (0.0005, 0.3, 0.1, 0.02),
    ),
    "synthetic/dx-treatment": (
        (0.0001, 0.2, 0.65, None), (0.0001, 0.3, 0.02, None), (0.0001, 0.5, 0.4, None),
        (0.0002, 0.02, None, None), (0.0008, 0.01, 0.3, None), (0.00015, 0.5, 0.01, None),
        (0.0001, 0.85, 0.03, 0.05),
    ),
    "synthetic/masked-dx": (
        (0.0003, 0.01, 0.88, None), (0.0007, 0.8, 0.005, None), (0.0002, 0.5, 0.5, None),
        (0.0007, 0.08, None, None), (0.0004, 0.12, 0.75, None), (0.0003, 0.4, 0.5, None),
        (0.0001, 0.85, 0.6, 0.05),
    ),
    "eicu/masked-dx": (
        None, (0.0005, 0.5, 0.5, None), (0.0001, 0.3, 0.4, None), (0.0001, 0.3, None, None),
        (0.00012, 0.4, 0.45, None), (0.0001, 0.87, 0.2, None), (0.0009, 0.5, 0.03, 50.0),
    ),
    "eicu/readmission": (
        None, (0.00024, 0.3, 0.1, None), (0.0001, 0.7, 0.01, None), (0.0001, 0.63, None, None),
        (0.00011, 0.05, 0.33, None), (0.0002, 0.45, 0.28, None), (0.00022, 0.08, 0.024, 0.1),
    ),
    "eicu/mortality": (
        None, (0.0003, 0.85, 0.04, None), (0.00013, 0.9, 0.01, None), (0.0001, 0.25, None, None),
        (0.00015, 0.01, 0.01, None), (0.0006, 0.88, 0.2, None), (0.00011, 0.72, 0.005, 1.5),
    ),
}


@dataclass(frozen=True)
class Preset:
    lr: float
    mlp_dropout: float
    post_mlp_dropout: float
    reg_coef: float


def _build_presets() -> dict[str, Preset]:
    out = {}
    for prefix, row in _PRESET_TABLE.items():
        for model, values in zip(_PRESET_MODELS, row):
            if values is None:
                continue
            lr, mlp, post, reg = values
            out[f"{prefix}/{model}"] = Preset(lr, mlp, post or 0.0, reg or 0.0)
    return out


PRESETS = _build_presets()


def apply_preset(name: str, spec: ModelSpec, config: TrainConfig) -> tuple[ModelSpec, TrainConfig]:
    try:
        p = PRESETS[name]
    except KeyError:
        raise ConfigError(f"unknown preset {name!r}") from None
    model = name.rsplit("/", 1)[1]
    if model != spec.kind:
        raise ConfigError(f"preset {name!r} is for {model}, not {spec.kind}")
    spec = replace(spec, mlp_dropout=p.mlp_dropout, post_mlp_dropout=p.post_mlp_dropout, reg_coef=p.reg_coef)
    return spec, replace(config, lr=p.lr)


# -- data preparation ---------------------------------------------------------

def split(encounters: list[Encounter], seed: int, ratio=(0.8, 0.1, 0.1)):
    """Seeded shuffle followed by a contiguous cut."""
    n = len(encounters)
    if n < 10:
        raise ConfigError(f"need at least 10 encounters to split, got {n}")
    order = stream(seed, "split").permutation(n)
    n_train = int(round(ratio[0] * n))
    n_valid = int(round(ratio[1] * n))
    parts = (order[:n_train], order[n_train:n_train + n_valid], order[n_train + n_valid:])
    return tuple([encounters[i] for i in part] for part in parts)


@dataclass
class Prepared:
    """Per-encounter arrays the batcher needs."""

    encounter: Encounter
    indexing: graph.NodeIndexing
    rows: np.ndarray
    allowed: np.ndarray
    prior: np.ndarray | None
    truth: np.ndarray | None
    edges: np.ndarray | None
    random_adj: np.ndarray | None
    labels: np.ndarray | None
    masked: tuple[int, int] | None = None


def _label_vector(enc: Encounter, task: TaskSpec) -> np.ndarray | None:
    if task.kind == "dx-treatment":
        if "dx_treatment" not in enc.labels:
            raise TaskError(f"encounter {enc.id!r} has no dx_treatment labels")
        present = set(enc.labels["dx_treatment"])
        return np.array([1 in present, 2 in present], dtype=nx.DTYPE)
    if task.kind in ("readmission", "mortality"):
        if task.kind not in enc.labels:
            raise TaskError(f"encounter {enc.id!r} has no {task.kind} label")
        return np.array([float(bool(enc.labels[task.kind]))])
    return None


def prepare(encounters, vocab: Vocab, tables: graph.CondProbTables | None, model_kind: str,
            task: TaskSpec, seed: int, green_value: float = 1.0, with_truth: bool = False,
            fixed_masking: bool = True) -> list[Prepared]:
    """Build the matrices each encounter needs for ``model_kind`` on ``task``.

    ``tables`` must come from the training split. With ``fixed_masking`` the
    masked diagnosis of each encounter is chosen once from a keyed stream.
    """
    need_prior = model_kind in ("gct", "gcn-p")
    need_truth = with_truth or task.needs_structure or model_kind == "gcn"
    out = []
    for enc in encounters:
        ix = graph.NodeIndexing.of(enc)
        truth = edges = None
        if need_truth:
            if not enc.has_structure:
                raise StructureError(f"encounter {enc.id!r} carries no structure")
            a = graph.adjacency_matrix(enc)
            edges = a + np.eye(ix.size)
            truth = edges / edges.sum(axis=1, keepdims=True)
        prior = graph.build_prior(enc, tables, green_value) if need_prior else None
        random_adj = None
        if model_kind == "gcn-random":
            random_adj = graph.random_adjacency(ix.size, stream(seed, "random_adjacency", _id_key(enc.id)))
        masked = None
        if task.kind == "masked-dx" and fixed_masking:
            masked = masked_dx_task(enc, stream(seed, "masked_dx", _id_key(enc.id)))
        out.append(Prepared(
            enc, ix, vocab.rows(enc.dx, enc.treat, enc.lab), graph.allowed_pattern(ix),
            prior, truth, edges, random_adj, _label_vector(enc, task), masked,
        ))
    return out


def _id_key(encounter_id) -> int:
    if isinstance(encounter_id, (int, np.integer)) and encounter_id >= 0:
        return int(encounter_id)
    return tag_id(str(encounter_id))


def _pad_square(n: int, size: int, m: np.ndarray) -> np.ndarray:
    out = np.eye(n)
    out[:size, :size] = m
    return out


def collate(items: list[Prepared], model_kind: str, task: TaskSpec, vocab: Vocab,
            rng: np.random.Generator | None = None) -> tuple[Batch, Targets]:
    """Pad to the largest encounter. Pad rows are one-hot on themselves in every
    matrix and masked from everything else; the visit node stays at row 0."""
    b = len(items)
    n = max(p.indexing.size for p in items)
    codes = np.zeros((b, n), dtype=np.intp)
    node_mask = np.zeros((b, n), dtype=bool)
    allowed = np.broadcast_to(np.eye(n, dtype=bool), (b, n, n)).copy()
    adjacency = np.zeros((b, n, n)) if model_kind in GCN_FAMILY else None
    prior = np.zeros((b, n, n)) if model_kind == "gct" else None
    edges = np.zeros((b, n, n)) if task.needs_structure else None
    labels = np.stack([p.labels for p in items]) if items[0].labels is not None else None
    classes = masked_node = None
    if task.kind == "masked-dx":
        classes = np.zeros(b, dtype=np.intp)
        masked_node = np.zeros(b, dtype=np.intp)
    for i, p in enumerate(items):
        k = p.indexing.size
        codes[i, :k] = p.rows
        node_mask[i, :k] = True
        allowed[i, :k, :k] = True if model_kind == "transformer" else p.allowed
        p_prior = p.prior
        if task.kind == "masked-dx":
            node, code = p.masked if p.masked is not None else masked_dx_task(p.encounter, rng)
            codes[i, node] = vocab.mask_token
            classes[i], masked_node[i] = code, node
            if p_prior is not None:
                p_prior = graph.mask_diagnosis_in_prior(p_prior, node, p.indexing)
        if prior is not None:
            prior[i] = _pad_square(n, k, p_prior)
        if adjacency is not None:
            src = {"gcn": p.truth, "gcn-p": p_prior, "gcn-random": p.random_adj}[model_kind]
            adjacency[i] = _pad_square(n, k, src)
        if edges is not None:
            edges[i, :k, :k] = p.edges
    batch = Batch(codes, node_mask, nx.as_additive_mask(allowed), adjacency, prior)
    return batch, Targets(node_mask, edges, labels, classes, masked_node)


# -- training -------------------------------------------------------------------

@dataclass
class Experiment:
    """A model, its task head and the prepared splits of one run."""

    spec: ModelSpec
    task: TaskSpec
    vocab: Vocab
    model: Model
    head: Head
    train: list[Prepared]
    valid: list[Prepared]
    test: list[Prepared]
    tables: graph.CondProbTables
    data_seed: int = 0

    def parameters(self) -> dict[str, nx.Tensor]:
        params = {f"encoder.{k}": v for k, v in self.model.parameters().items()}
        params.update(self.head.parameters())
        return params

    def snapshot(self) -> dict[str, np.ndarray]:
        return {k: v.value.copy() for k, v in self.parameters().items()}

    def restore(self, arrays: dict[str, np.ndarray]) -> None:
        load_parameters(self.parameters(), arrays)


def build_experiment(spec: ModelSpec, task: TaskSpec, config: TrainConfig, encounters: list[Encounter],
                     vocab: Vocab, run_seed: int, with_truth: bool = False) -> Experiment:
    check_compatible(spec.kind, task)
    train_set, valid_set, test_set = split(encounters, derive_seed(run_seed, "split"), config.split_ratio)
    tables = graph.estimate_cond_probs(train_set, (vocab.n_dx, vocab.n_treat, vocab.n_lab))
    data_seed = derive_seed(run_seed, "data")

    def prep(encs, fixed):
        return prepare(encs, vocab, tables, spec.kind, task, data_seed, config.green_value,
                       with_truth=with_truth, fixed_masking=fixed)

    init_rng = stream(run_seed, "init")
    model = Model(spec, vocab, init_rng)
    head = Head.create(task, spec.dim, init_rng)
    return Experiment(spec, task, vocab, model, head, prep(train_set, False), prep(valid_set, True),
                      prep(test_set, True), tables, data_seed)


def forward_loss(exp: Experiment, items: list[Prepared], train: bool, rng=None):
    batch, targets = collate(items, exp.spec.kind, exp.task, exp.vocab, rng)
    out = exp.model.forward(batch, train=train, rng=rng)
    result = task_loss(exp.task, exp.head, out, targets, exp.spec.kind)
    return total_loss(result, out, exp.spec.reg_coef), result, out, batch


# Fixed per-chunk cost, in units of padded N x N cells, used when splitting a
# minibatch into size-sorted chunks.
CHUNK_OVERHEAD = 20_000


def plan_chunks(sizes: list[int], overhead: float = CHUNK_OVERHEAD) -> list[list[int]]:
    """Partition item positions into runs of similar size.

    Positions are sorted by size and cut where the saved padding outweighs
    ``overhead``; the cost of a chunk is ``len * max_size**2 + overhead``.
    """
    order = sorted(range(len(sizes)), key=lambda i: (sizes[i], i))
    s = [sizes[i] for i in order]
    n = len(s)
    best = [0.0] + [math.inf] * n
    cut = [0] * (n + 1)
    for end in range(1, n + 1):
        for start in range(end):
            cost = best[start] + (end - start) * s[end - 1] ** 2 + overhead
            if cost < best[end]:
                best[end], cut[end] = cost, start
    chunks, end = [], n
    while end > 0:
        chunks.append(order[cut[end]:end])
        end = cut[end]
    return chunks[::-1]


def batch_loss(exp: Experiment, items: list[Prepared], train: bool, rng=None) -> nx.Tensor:
    """Minibatch loss computed over size-sorted chunks.

    Each chunk's mean loss is weighted by its share of the minibatch, so the
    sum equals the loss of the whole minibatch padded to one size.
    """
    total = None
    for chunk in plan_chunks([p.indexing.size for p in items]):
        loss = forward_loss(exp, [items[i] for i in chunk], train, rng)[0]
        loss = nx.scale(loss, len(chunk) / len(items))
        total = loss if total is None else nx.add(total, loss)
    return total


def evaluate(exp: Experiment, items: list[Prepared], batch_size: int = 64,
             structure: bool = False, pinned_truth: bool = False) -> dict[str, float]:
    """Task metrics over ``items``; with ``structure`` also mean KL-to-truth and
    attention entropy. ``pinned_truth`` pins attention to the true adjacency."""
    scores, labels = [], []
    kls, ents = [], []
    items = sorted(items, key=lambda p: p.indexing.size)
    with nx.no_grad():
        for start in range(0, len(items), batch_size):
            chunk = items[start:start + batch_size]
            batch, targets = collate(chunk, exp.spec.kind, exp.task, exp.vocab)
            pinned = None
            if pinned_truth:
                if exp.spec.kind != "transformer":
                    raise ConfigError("pinned-truth evaluation applies to the transformer")
                pinned = np.stack([_pad_square(batch.n_nodes, p.indexing.size, p.truth) for p in chunk])
            out = exp.model.forward(batch, pinned=pinned)
            result = task_loss(exp.task, exp.head, out, targets, exp.spec.kind)
            scores.append(result.scores)
            labels.append(result.labels)
            if structure:
                for i, p in enumerate(chunk):
                    kl, ent = structure_of(out, i, p)
                    kls.append(kl)
                    ents.append(ent)
    metrics = compute_metrics(exp.task, np.concatenate(scores), np.concatenate(labels))
    if structure:
        metrics["kl_to_truth"] = float(np.mean(kls))
        metrics["entropy"] = float(np.mean(ents))
    return metrics


def attention_maps(out: ModelOutput, i: int, size: int) -> list[np.ndarray]:
    """The ``size x size`` attention maps of batch element ``i``."""
    return [np.asarray(a.value[i] if a.value.ndim == 3 else a.value)[:size, :size] for a in out.attention]


def structure_of(out: ModelOutput, i: int, p: Prepared) -> tuple[float, float]:
    if p.truth is None:
        raise StructureError("structure evaluation needs ground-truth edges")
    maps = attention_maps(out, i, p.indexing.size)
    return structure_eval(maps, p.truth)


@dataclass
class RunRecord:
    model: str
    task: str
    seed: int
    spec: dict
    config: dict
    split_sizes: list[int]
    history: list[dict] = field(default_factory=list)
    best_iteration: int = 0
    valid: dict = field(default_factory=dict)
    test: dict = field(default_factory=dict)

    def to_json(self) -> dict:
        return dict(asdict(self), format_version=RECORD_VERSION)

    @classmethod
    def from_json(cls, data: dict) -> "RunRecord":
        data = dict(data)
        version = data.pop("format_version", RECORD_VERSION)
        if version != RECORD_VERSION:
            raise ConfigError(f"unsupported run record version {version}")
        return cls(**data)


def _eval_points(config: TrainConfig) -> set[int]:
    points = set(range(config.eval_interval, config.iterations + 1, config.eval_interval))
    points.add(config.iterations)
    return points


def train(exp: Experiment, config: TrainConfig, run_seed: int, structure: bool = False,
          progress=None) -> tuple[RunRecord, dict[str, np.ndarray]]:
    """Adam on minibatches of the training split; validation every
    ``eval_interval`` iterations keeps the best parameters; the test split is
    evaluated once, with those parameters."""
    config.validate()
    params = exp.parameters()
    state = nx.AdamState(lr=config.lr)
    batch_rng = stream(run_seed, "batches")
    dropout_rng = stream(run_seed, "dropout")
    select = exp.task.selection_metric
    record = RunRecord(exp.spec.kind, exp.task.kind, run_seed, exp.spec.to_dict(), config.to_dict(),
                       [len(exp.train), len(exp.valid), len(exp.test)])
    best, best_value = exp.snapshot(), -math.inf
    points = _eval_points(config)
    order, cursor = batch_rng.permutation(len(exp.train)), 0
    running, n_running = 0.0, 0
    for it in range(1, config.iterations + 1):
        if cursor + config.batch_size > len(order):
            order, cursor = batch_rng.permutation(len(exp.train)), 0
        items = [exp.train[k] for k in order[cursor:cursor + config.batch_size]]
        cursor += config.batch_size
        loss = batch_loss(exp, items, train=True, rng=dropout_rng)
        if not np.isfinite(loss.value):
            raise DivergenceError(it)
        for p in params.values():
            p.zero_grad()
        nx.backward(loss)
        try:
            nx.adam_step(params, {k: p.grad for k, p in params.items()}, state)
        except OptimizerError as exc:
            raise DivergenceError(it, str(exc)) from exc
        running += float(loss.value)
        n_running += 1
        if it in points:
            metrics = evaluate(exp, exp.valid, config.eval_batch_size)
            record.history.append({"iteration": it, "train_loss": running / n_running, **metrics})
            running, n_running = 0.0, 0
            if progress is not None:
                progress(it, metrics)
            if metrics[select] > best_value:
                best_value, best = metrics[select], exp.snapshot()
                record.best_iteration, record.valid = it, metrics
    if config.iterations == 0:
        record.valid = evaluate(exp, exp.valid, config.eval_batch_size)
    exp.restore(best)
    record.test = evaluate(exp, exp.test, config.eval_batch_size,
                           structure=structure and has_attention_maps(exp))
    return record, best


def has_attention_maps(exp: Experiment) -> bool:
    return exp.spec.kind in ATTENTION_MODELS + GCN_FAMILY


def run_seed_for(master_seed: int, repeat: int) -> int:
    return derive_seed(master_seed, "repeat", repeat)


def run_once(spec: ModelSpec, task: TaskSpec, config: TrainConfig, encounters: list[Encounter],
             vocab: Vocab, repeat: int, structure: bool = False, out_dir=None) -> RunRecord:
    seed = run_seed_for(config.seed, repeat)
    exp = build_experiment(spec, task, config, encounters, vocab, seed, with_truth=structure)
    record, best = train(exp, config, seed, structure=structure)
    if out_dir is not None:
        save_run(out_dir, record, best, vocab, repeat)
    return record


def _run_job(args):
    return run_once(*args)


def repeat_experiment(spec: ModelSpec, task: TaskSpec, config: TrainConfig, encounters: list[Encounter],
                      vocab: Vocab, n: int | None = None, structure: bool = False, jobs: int = 1,
                      out_dir=None) -> list[RunRecord]:
    """``n`` independent runs (distinct split and init seeds), ordered by repeat index."""
    n = config.repeats if n is None else n
    if n < 1:
        raise ConfigError("need at least one repeat")
    args = [(spec, task, config, encounters, vocab, r, structure, out_dir) for r in range(n)]
    if jobs <= 1:
        return [_run_job(a) for a in args]
    with ProcessPoolExecutor(max_workers=jobs) as pool:
        return list(pool.map(_run_job, args))


def aggregate(records: list[RunRecord], split_name: str = "test") -> dict[str, tuple[float, float]]:
    """metric -> (mean, sample standard deviation; 0 for a single run)."""
    values: dict[str, list[float]] = {}
    for r in records:
        for k, v in getattr(r, split_name).items():
            values.setdefault(k, []).append(v)
    return {k: (float(np.mean(v)), float(np.std(v, ddof=1)) if len(v) > 1 else 0.0)
            for k, v in values.items()}


# -- persistence --------------------------------------------------------------------

def metrics_rows(records: list[RunRecord]) -> list[tuple]:
    rows = []
    for r in records:
        for split_name in ("valid", "test"):
            for metric in sorted(getattr(r, split_name)):
                rows.append((r.model, r.task, split_name, r.seed, metric, getattr(r, split_name)[metric]))
    return rows


def metrics_csv(records: list[RunRecord]) -> str:
    buf = io.StringIO()
    writer = csv.writer(buf, lineterminator="\n")
    writer.writerow(CSV_COLUMNS)
    for row in metrics_rows(records):
        writer.writerow([*row[:5], repr(float(row[5]))])
    return buf.getvalue()


def save_run(out_dir, record: RunRecord, params: dict[str, np.ndarray], vocab: Vocab, repeat: int) -> None:
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    (out / f"run_{repeat}.json").write_text(json.dumps(record.to_json(), indent=2, sort_keys=True) + "\n")
    header = {"spec": record.spec, "task": record.task, "vocab": asdict(vocab), "seed": record.seed}
    save_checkpoint(out / f"run_{repeat}.ckpt", params, header)


def load_run(run_dir, repeat: int = 0) -> tuple[RunRecord, dict, dict[str, np.ndarray]]:
    run_dir = Path(run_dir)
    record = RunRecord.from_json(json.loads((run_dir / f"run_{repeat}.json").read_text()))
    header, arrays = load_checkpoint(run_dir / f"run_{repeat}.ckpt")
    return record, header, arrays
