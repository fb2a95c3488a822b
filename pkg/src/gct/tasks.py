"""Prediction heads, losses and evaluation metrics."""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from scipy.stats import rankdata

from . import numerics as nx
from .errors import MetricUndefinedError, StructureError, TaskError
from .graph import NodeIndexing
from .models import ModelOutput
from .numerics import Tensor
from .records import Encounter

TASK_KINDS = ("graph-recon", "dx-treatment", "masked-dx", "readmission", "mortality")


@dataclass(frozen=True)
class TaskSpec:
    kind: str
    n_dx: int = 0

    def __post_init__(self):
        if self.kind not in TASK_KINDS:
            raise TaskError(f"unknown task {self.kind!r}; expected one of {TASK_KINDS}")
        if self.kind == "masked-dx" and self.n_dx < 1:
            raise TaskError("masked-dx needs the diagnosis vocabulary size")

    @property
    def n_outputs(self) -> int:
        return {"graph-recon": 0, "dx-treatment": 2, "masked-dx": self.n_dx}.get(self.kind, 1)

    @property
    def needs_structure(self) -> bool:
        return self.kind == "graph-recon"

    @property
    def selection_metric(self) -> str:
        return "accuracy" if self.kind == "masked-dx" else "aucpr"

    @property
    def metrics(self) -> tuple[str, ...]:
        return ("accuracy",) if self.kind == "masked-dx" else ("aucpr", "auroc")


def check_compatible(model_kind: str, task: TaskSpec) -> None:
    if model_kind == "deep" and task.kind == "graph-recon":
        raise TaskError("the deep baseline has no per-node output for graph reconstruction")


@dataclass
class Targets:
    """Padded supervision for one batch.

    ``edges``: B x N x N 0/1 with self-loops (graph-recon). ``labels``: B x k
    binary (dx-treatment, readmission, mortality). ``classes`` and
    ``masked_node``: target code and node row (masked-dx).
    """

    node_mask: np.ndarray
    edges: np.ndarray | None = None
    labels: np.ndarray | None = None
    classes: np.ndarray | None = None
    masked_node: np.ndarray | None = None


@dataclass
class Head:
    weight: Tensor | None = None
    bias: Tensor | None = None

    @classmethod
    def create(cls, task: TaskSpec, dim: int, rng: np.random.Generator) -> "Head":
        k = task.n_outputs
        if k == 0:
            return cls()
        return cls(
            Tensor(nx.glorot_uniform(rng, dim, k), True, "head.weight"),
            Tensor(np.zeros(k), True, "head.bias"),
        )

    def parameters(self) -> dict[str, Tensor]:
        return {} if self.weight is None else {"head.weight": self.weight, "head.bias": self.bias}


@dataclass
class TaskResult:
    """Loss plus the raw outputs needed for metrics (converted on demand)."""

    loss: Tensor
    logits: np.ndarray
    targets: np.ndarray
    multiclass: bool = False
    keep: np.ndarray | None = None

    @property
    def scores(self) -> np.ndarray:
        if self.multiclass:
            return self.logits
        z = self.logits[self.keep] if self.keep is not None else self.logits.ravel()
        return nx.sigmoid(z)

    @property
    def labels(self) -> np.ndarray:
        if self.multiclass:
            return self.targets
        return self.targets[self.keep] if self.keep is not None else self.targets.ravel()


def _linear(head: Head, x: Tensor) -> Tensor:
    return nx.add(nx.matmul(x, head.weight), head.bias)


def graph_reconstruction_loss(nodes: Tensor, targets: Targets) -> TaskResult:
    """Mean BCE of sigmoid(c_i . c_j) against the self-looped adjacency over all
    N^2 ordered pairs of each encounter, averaged over the batch."""
    if targets.edges is None:
        raise TaskError("graph reconstruction needs ground-truth edges")
    logits = nx.matmul(nodes, nx.transpose(nodes))
    real = targets.node_mask.astype(nx.DTYPE)
    pair = real[:, :, None] * real[:, None, :]
    n = real.sum(axis=1)
    weights = pair / (n * n)[:, None, None] / len(n)
    loss = nx.bce_with_logits(logits, targets.edges, weights)
    return TaskResult(loss, logits.value, targets.edges, keep=pair > 0)


def multilabel_loss(head: Head, visit: Tensor, labels: np.ndarray) -> TaskResult:
    logits = _linear(head, visit)
    weights = np.full(logits.shape, 1.0 / logits.shape[0])
    loss = nx.bce_with_logits(logits, labels, weights)
    return TaskResult(loss, logits.value, np.asarray(labels))


def masked_dx_loss(head: Head, nodes: Tensor, visit: Tensor, targets: Targets, use_visit: bool) -> TaskResult:
    """Cross-entropy over the diagnosis vocabulary from the masked node's
    final embedding, or from v for models without per-node context."""
    if use_visit:
        x = visit
    else:
        x = nodes[np.arange(nodes.shape[0]), targets.masked_node]
    logits = _linear(head, x)
    weights = np.full(logits.shape[0], 1.0 / logits.shape[0])
    loss = nx.softmax_cross_entropy(logits, targets.classes, weights)
    return TaskResult(loss, logits.value, np.asarray(targets.classes), multiclass=True)


def task_loss(task: TaskSpec, head: Head, out: ModelOutput, targets: Targets,
              model_kind: str) -> TaskResult:
    if task.kind == "graph-recon":
        return graph_reconstruction_loss(out.nodes, targets)
    if task.kind == "masked-dx":
        return masked_dx_loss(head, out.nodes, out.visit, targets, model_kind in ("shallow", "deep"))
    return multilabel_loss(head, out.visit, targets.labels)


def total_loss(task_result: TaskResult, out: ModelOutput, reg_coef: float) -> Tensor:
    """L_pred + reg_coef * batch mean of the summed KL regularizers.

    With ``reg_coef == 0`` the regularizer is left out of the graph entirely.
    """
    reg = out.reg
    if reg is None or reg_coef == 0.0:
        return task_result.loss
    return nx.add(task_result.loss, nx.scale(nx.reduce_mean(reg), reg_coef))


# -- masked diagnosis selection ----------------------------------------------

def masked_dx_task(encounter: Encounter, rng: np.random.Generator) -> tuple[int, int]:
    """Pick one diagnosis uniformly; returns (node row, target code)."""
    if not encounter.dx:
        raise TaskError(f"encounter {encounter.id!r} has no diagnosis to mask")
    pos = int(rng.integers(len(encounter.dx)))
    return NodeIndexing.of(encounter).index("d", pos), int(encounter.dx[pos])


# -- metrics -----------------------------------------------------------------

def _check_binary(labels, scores) -> tuple[np.ndarray, np.ndarray]:
    labels = np.asarray(labels).astype(bool).ravel()
    scores = np.asarray(scores, dtype=nx.DTYPE).ravel()
    if labels.shape != scores.shape:
        raise TaskError("labels and scores differ in length")
    if labels.all() or not labels.any():
        raise MetricUndefinedError("metric needs at least one positive and one negative")
    return labels, scores


def aucpr(labels, scores) -> float:
    """Average precision: sum of precision * recall increment over distinct
    thresholds taken in descending score order (tied scores form one step)."""
    labels, scores = _check_binary(labels, scores)
    order = np.argsort(-scores, kind="stable")
    s, y = scores[order], labels[order]
    tp = np.cumsum(y)
    last = np.r_[np.flatnonzero(np.diff(s)), len(s) - 1]
    tp_at = tp[last]
    precision = tp_at / (last + 1)
    recall_gain = np.diff(np.r_[0, tp_at]) / tp[-1]
    return float(np.sum(precision * recall_gain))


def auroc(labels, scores) -> float:
    """Mann-Whitney U / (n_pos n_neg); ties count one half."""
    labels, scores = _check_binary(labels, scores)
    ranks = rankdata(scores)
    n_pos = labels.sum()
    n_neg = len(labels) - n_pos
    u = ranks[labels].sum() - n_pos * (n_pos + 1) / 2.0
    return float(u / (n_pos * n_neg))


def accuracy(logits: np.ndarray, classes) -> float:
    logits = np.asarray(logits)
    classes = np.asarray(classes)
    if len(classes) == 0:
        raise MetricUndefinedError("accuracy of an empty set")
    return float(np.mean(np.argmax(logits, axis=-1) == classes))


def compute_metrics(task: TaskSpec, scores: np.ndarray, labels: np.ndarray) -> dict[str, float]:
    if task.kind == "masked-dx":
        return {"accuracy": accuracy(scores, labels)}
    return {"aucpr": aucpr(labels, scores), "auroc": auroc(labels, scores)}


# -- structure evaluation --------------------------------------------------------

def structure_eval(attention_maps: list[np.ndarray], truth: np.ndarray) -> tuple[float, float]:
    """(KL(truth || A), mean row entropy of A), each averaged over the maps.

    ``truth`` is the normalized true adjacency of one encounter; the maps are
    that encounter's N x N attention matrices, one per block.
    """
    if truth is None:
        raise StructureError("structure evaluation needs the true adjacency")
    if not attention_maps:
        raise StructureError("model produces no attention maps")
    kls = [nx.kl_divergence_rows(truth, a) for a in attention_maps]
    ents = [nx.row_entropy(a) for a in attention_maps]
    return float(np.mean(kls)), float(np.mean(ents))
