"""Encoders over a padded batch of encounters.

All models take a batch of node codes (``B x N``) and return per-node
embeddings plus a visit embedding. Shorter encounters are padded to the
batch maximum; pad nodes attend only to themselves and nothing attends to
them, so a padded forward pass equals the per-encounter computation.
"""
from __future__ import annotations

import json
import math
import struct
from dataclasses import asdict, dataclass, field, fields
from pathlib import Path

import numpy as np

from . import numerics as nx
from .errors import ConfigError, ContractError, DimensionError, VocabularyError
from .numerics import Dense, Tensor

MODEL_KINDS = ("gcn", "gcn-p", "gcn-random", "shallow", "deep", "transformer", "gct")
GCN_FAMILY = ("gcn", "gcn-p", "gcn-random")
ATTENTION_MODELS = ("transformer", "gct")

_STOCHASTIC_TOL = 1e-9


@dataclass(frozen=True)
class ModelSpec:
    kind: str
    dim: int = 128
    gcn_steps: int = 5
    attention_blocks: int = 3
    shallow_layers: int = 15
    deep_pre_layers: int = 8
    deep_post_layers: int = 7
    hidden_factor: int = 2
    mlp_dropout: float = 0.0
    post_mlp_dropout: float = 0.0
    reg_coef: float = 0.0
    first_block_kl: bool = True

    def validate(self) -> None:
        if self.kind not in MODEL_KINDS:
            raise ConfigError(f"unknown model kind {self.kind!r}; expected one of {MODEL_KINDS}")
        counts = (self.dim, self.gcn_steps, self.attention_blocks, self.shallow_layers,
                  self.deep_pre_layers, self.deep_post_layers, self.hidden_factor)
        if any(int(v) != v or v < 1 for v in counts):
            raise ConfigError("dimensions and layer counts must be positive integers")
        for name in ("mlp_dropout", "post_mlp_dropout"):
            if not 0.0 <= getattr(self, name) < 1.0:
                raise ConfigError(f"{name} must lie in [0, 1)")
        if self.reg_coef < 0:
            raise ConfigError("reg_coef must be non-negative")

    @property
    def n_blocks(self) -> int:
        if self.kind in GCN_FAMILY:
            return self.gcn_steps
        if self.kind in ATTENTION_MODELS:
            return self.attention_blocks
        return 0

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, data: dict) -> "ModelSpec":
        known = {f.name for f in fields(cls)}
        unknown = set(data) - known
        if unknown:
            raise ConfigError(f"unknown model fields: {sorted(unknown)}")
        return cls(**data)


@dataclass(frozen=True)
class Vocab:
    """Row layout of the shared embedding table.

    Row 0 is the visit placeholder, then the dx, treatment and lab tables,
    then the mask token used by masked-diagnosis prediction.
    """

    n_dx: int
    n_treat: int
    n_lab: int

    @property
    def dx_offset(self) -> int:
        return 1

    @property
    def treat_offset(self) -> int:
        return 1 + self.n_dx

    @property
    def lab_offset(self) -> int:
        return 1 + self.n_dx + self.n_treat

    @property
    def mask_token(self) -> int:
        return 1 + self.n_dx + self.n_treat + self.n_lab

    @property
    def n_rows(self) -> int:
        return self.mask_token + 1

    def rows(self, dx, treat, lab) -> np.ndarray:
        """Table rows for one encounter's nodes (visit first)."""
        for codes, size, kind in ((dx, self.n_dx, "diagnosis"), (treat, self.n_treat, "treatment"),
                                  (lab, self.n_lab, "lab")):
            bad = [c for c in codes if not 0 <= c < size]
            if bad:
                raise VocabularyError(f"{kind} code {bad[0]} outside vocabulary of {size}")
        return np.concatenate([
            [0],
            np.asarray(dx, dtype=np.intp) + self.dx_offset,
            np.asarray(treat, dtype=np.intp) + self.treat_offset,
            np.asarray(lab, dtype=np.intp) + self.lab_offset,
        ]).astype(np.intp)


@dataclass
class Batch:
    """Padded inputs for ``B`` encounters of at most ``N`` nodes.

    ``mask`` is the additive attention mask (0 / ``MASKED``) for attention
    models; ``adjacency`` is the row-stochastic propagation matrix for the
    GCN family; ``prior`` is P for GCT.
    """

    codes: np.ndarray
    node_mask: np.ndarray
    mask: np.ndarray
    adjacency: np.ndarray | None = None
    prior: np.ndarray | None = None

    @property
    def size(self) -> int:
        return self.codes.shape[0]

    @property
    def n_nodes(self) -> int:
        return self.codes.shape[1]


@dataclass
class ModelOutput:
    nodes: Tensor
    visit: Tensor
    attention: list[Tensor] = field(default_factory=list)
    first_block_attention: Tensor | None = None
    reg_terms: list[Tensor] = field(default_factory=list)

    @property
    def reg(self) -> Tensor | None:
        """Per-encounter sum of the KL regularizers, shape ``(B,)``."""
        if not self.reg_terms:
            return None
        total = self.reg_terms[0]
        for term in self.reg_terms[1:]:
            total = nx.add(total, term)
        return total


# -- building blocks ----------------------------------------------------------

@dataclass
class BlockMLP:
    """LN(x + W2 dropout(relu(x W1 + b1)) + b2)."""

    w1: Tensor
    b1: Tensor
    gain: Tensor
    shift: Tensor
    w2: Tensor
    b2: Tensor

    @classmethod
    def create(cls, rng, dim: int, hidden: int, prefix: str) -> "BlockMLP":
        return cls(
            w1=Tensor(nx.glorot_uniform(rng, dim, hidden), True, f"{prefix}.w1"),
            b1=Tensor(np.zeros(hidden), True, f"{prefix}.b1"),
            gain=Tensor(np.ones(dim), True, f"{prefix}.gain"),
            shift=Tensor(np.zeros(dim), True, f"{prefix}.shift"),
            w2=Tensor(nx.glorot_uniform(rng, hidden, dim), True, f"{prefix}.w2"),
            b2=Tensor(np.zeros(dim), True, f"{prefix}.b2"),
        )

    def tensors(self) -> list[Tensor]:
        return [self.w1, self.b1, self.gain, self.shift, self.w2, self.b2]

    def __call__(self, x: Tensor, rate: float, train: bool, rng) -> Tensor:
        h = nx.relu(nx.add(nx.matmul(x, self.w1), self.b1))
        h = nx.dropout(h, rate, rng, train)
        out = nx.add(x, nx.add(nx.matmul(h, self.w2), self.b2))
        return nx.layer_norm(out, self.gain, self.shift)


@dataclass
class PropagationBlock:
    """One GCN step or attention block: ``MLP(A C W)`` with ``A`` given or learned."""

    w: Tensor
    mlp: BlockMLP
    wq: Tensor | None = None
    wk: Tensor | None = None

    @classmethod
    def create(cls, rng, dim: int, hidden: int, prefix: str, attention: bool) -> "PropagationBlock":
        w = Tensor(nx.glorot_uniform(rng, dim, dim), True, f"{prefix}.w")
        mlp = BlockMLP.create(rng, dim, hidden, f"{prefix}.mlp")
        if not attention:
            return cls(w, mlp)
        wq = Tensor(nx.glorot_uniform(rng, dim, dim), True, f"{prefix}.wq")
        wk = Tensor(nx.glorot_uniform(rng, dim, dim), True, f"{prefix}.wk")
        return cls(w, mlp, wq, wk)

    def tensors(self) -> list[Tensor]:
        out = [self.w, *self.mlp.tensors()]
        if self.wq is not None:
            out += [self.wq, self.wk]
        return out

    def attention(self, c: Tensor, mask: np.ndarray, validate: bool = True) -> Tensor:
        q = nx.matmul(c, self.wq)
        k = nx.matmul(c, self.wk)
        logits = nx.scale(nx.matmul(q, nx.transpose(k)), 1.0 / math.sqrt(c.shape[-1]))
        return nx.masked_row_softmax(logits, mask, validate)

    def propagate(self, c: Tensor, a, spec: ModelSpec, train: bool, rng) -> Tensor:
        h = nx.matmul(a, nx.matmul(c, self.w))
        h = self.mlp(h, spec.mlp_dropout, train, rng)
        return nx.dropout(h, spec.post_mlp_dropout, rng, train)


def _check_stochastic(a: np.ndarray, what: str) -> None:
    if np.any(a < 0) or not np.all(np.abs(a.sum(axis=-1) - 1.0) <= _STOCHASTIC_TOL):
        raise ContractError(f"{what} must be row-stochastic")


# -- forward passes -----------------------------------------------------------

def gcn_forward(c0: Tensor, adjacency: np.ndarray, blocks: list[PropagationBlock], spec: ModelSpec,
                train: bool = False, rng=None) -> ModelOutput:
    """``C <- MLP(A C W)`` for each step with a fixed row-stochastic ``A``."""
    adjacency = np.asarray(adjacency, dtype=nx.DTYPE)
    _check_stochastic(adjacency, "adjacency")
    c = c0
    for block in blocks:
        c = block.propagate(c, adjacency, spec, train, rng)
    return ModelOutput(c, c[..., 0, :], [Tensor(adjacency)] * len(blocks))


def transformer_forward(c0: Tensor, mask: np.ndarray, blocks: list[PropagationBlock], spec: ModelSpec,
                        train: bool = False, rng=None, pinned: np.ndarray | None = None) -> ModelOutput:
    """Single-head self-attention blocks. ``pinned`` replaces every softmax
    attention map with a fixed row-stochastic matrix."""
    if pinned is not None:
        pinned = np.asarray(pinned, dtype=nx.DTYPE)
        _check_stochastic(pinned, "pinned attention")
    c = c0
    maps = []
    for j, block in enumerate(blocks):
        a = Tensor(pinned) if pinned is not None else block.attention(c, mask, validate=j == 0)
        maps.append(a)
        c = block.propagate(c, a, spec, train, rng)
    return ModelOutput(c, c[..., 0, :], maps)


def gct_forward(c0: Tensor, prior: np.ndarray | None, mask: np.ndarray, blocks: list[PropagationBlock],
                spec: ModelSpec, train: bool = False, rng=None) -> ModelOutput:
    """Block 1 propagates with P; later blocks use masked softmax attention.

    Each block j > 1 adds KL(A^(j-1) || A^(j)). With ``first_block_kl`` the
    first block also computes its own softmax attention A^(1) (not used for
    propagation), adds KL(P || A^(1)), and A^(1) is the reference for block 2;
    otherwise P is. ``prior=None`` propagates block 1 with A^(1) instead,
    which turns the model into a masked Transformer plus regularizer.
    """
    mask = np.asarray(mask, dtype=nx.DTYPE)
    if prior is not None:
        prior = np.asarray(prior, dtype=nx.DTYPE)
        _check_stochastic(prior, "prior")
        if np.any((prior > 0) & ~nx.mask_allowed(mask)):
            raise ContractError("prior has mass on masked cells")
    c = c0
    maps: list[Tensor] = []
    reg: list[Tensor] = []
    first_computed = None
    reference = None
    for j, block in enumerate(blocks):
        if j == 0:
            need_first = prior is None or spec.first_block_kl
            if need_first:
                first_computed = block.attention(c, mask)
            if prior is None:
                a = first_computed
            else:
                a = Tensor(prior)
                if spec.first_block_kl:
                    reg.append(nx.kl_rows(a, first_computed, validate=False))
            reference = first_computed if spec.first_block_kl or prior is None else a
        else:
            a = block.attention(c, mask, validate=first_computed is None and j == 1)
            reg.append(nx.kl_rows(reference, a, validate=False))
            reference = a
        maps.append(a)
        c = block.propagate(c, a, spec, train, rng)
    return ModelOutput(c, c[..., 0, :], maps, first_computed, reg)


def shallow_deep_forward(c0: Tensor, node_mask: np.ndarray, pre: list[Dense], post: list[Dense],
                         spec: ModelSpec, train: bool = False, rng=None) -> ModelOutput:
    """Per-node feedforward stack, sum over code nodes into v, optional stack on v.

    The visit placeholder and pad rows are excluded from the sum.
    """
    h = nx.mlp_block(c0, pre, spec.mlp_dropout, train, rng)
    weights = np.asarray(node_mask, dtype=nx.DTYPE).copy()
    weights[..., 0] = 0.0
    v = nx.reduce_sum(nx.scale(h, weights[..., None]), axis=-2)
    if post:
        v = nx.mlp_block(v, post, spec.post_mlp_dropout, train, rng)
    return ModelOutput(h, v)


# -- model ---------------------------------------------------------------------

class Model:
    """Parameters of one encoder plus its forward dispatch."""

    def __init__(self, spec: ModelSpec, vocab: Vocab, rng: np.random.Generator):
        spec.validate()
        self.spec = spec
        self.vocab = vocab
        dim = spec.dim
        self.embedding = Tensor(nx.glorot_uniform(rng, vocab.n_rows, dim), True, "embedding")
        self.blocks: list[PropagationBlock] = []
        self.pre: list[Dense] = []
        self.post: list[Dense] = []
        attention = spec.kind in ATTENTION_MODELS
        for j in range(spec.n_blocks):
            self.blocks.append(
                PropagationBlock.create(rng, dim, spec.hidden_factor * dim, f"block{j}", attention)
            )
        if spec.kind == "shallow":
            self.pre = [Dense.create(rng, dim, dim, f"pre{j}") for j in range(spec.shallow_layers)]
        elif spec.kind == "deep":
            self.pre = [Dense.create(rng, dim, dim, f"pre{j}") for j in range(spec.deep_pre_layers)]
            self.post = [Dense.create(rng, dim, dim, f"post{j}") for j in range(spec.deep_post_layers)]

    def parameters(self) -> dict[str, Tensor]:
        tensors = [self.embedding]
        for block in self.blocks:
            tensors += block.tensors()
        for layer in self.pre + self.post:
            tensors += layer.tensors()
        return {t.name: t for t in tensors}

    def embed(self, codes: np.ndarray) -> Tensor:
        codes = np.asarray(codes, dtype=np.intp)
        if codes.size and (codes.min() < 0 or codes.max() >= self.vocab.n_rows):
            raise VocabularyError("embedding row outside the table")
        return nx.gather_rows(self.embedding, codes)

    def forward(self, batch: Batch, train: bool = False, rng=None,
                pinned: np.ndarray | None = None) -> ModelOutput:
        c0 = self.embed(batch.codes)
        kind = self.spec.kind
        if kind in GCN_FAMILY:
            if batch.adjacency is None:
                raise ContractError(f"{kind} needs a propagation matrix")
            return gcn_forward(c0, batch.adjacency, self.blocks, self.spec, train, rng)
        if kind == "transformer":
            return transformer_forward(c0, batch.mask, self.blocks, self.spec, train, rng, pinned)
        if kind == "gct":
            if batch.prior is None:
                raise ContractError("gct needs the prior matrix P")
            return gct_forward(c0, batch.prior, batch.mask, self.blocks, self.spec, train, rng)
        return shallow_deep_forward(c0, batch.node_mask, self.pre, self.post, self.spec, train, rng)


# -- checkpoint file -------------------------------------------------------------

CHECKPOINT_MAGIC = b"GCTCKPT\0"
CHECKPOINT_VERSION = 1


def save_checkpoint(path, arrays: dict[str, np.ndarray], header: dict) -> None:
    """Magic, u32 version, u64 header length, JSON header, raw little-endian f64 data.

    The header lists every array's name, shape and byte offset; arrays are
    written in sorted-name order so identical parameters give identical files.
    """
    entries, offset = [], 0
    blobs = []
    for name in sorted(arrays):
        a = np.ascontiguousarray(arrays[name], dtype="<f8")
        entries.append({"name": name, "shape": list(a.shape), "offset": offset})
        blobs.append(a.tobytes())
        offset += a.nbytes
    meta = dict(header, format_version=CHECKPOINT_VERSION, arrays=entries)
    meta_bytes = json.dumps(meta, sort_keys=True).encode()
    with open(Path(path), "wb") as fh:
        fh.write(CHECKPOINT_MAGIC)
        fh.write(struct.pack("<IQ", CHECKPOINT_VERSION, len(meta_bytes)))
        fh.write(meta_bytes)
        for blob in blobs:
            fh.write(blob)


def load_checkpoint(path) -> tuple[dict, dict[str, np.ndarray]]:
    data = Path(path).read_bytes()
    if not data.startswith(CHECKPOINT_MAGIC):
        raise ConfigError(f"{path}: not a checkpoint file")
    pos = len(CHECKPOINT_MAGIC)
    version, n_meta = struct.unpack_from("<IQ", data, pos)
    if version != CHECKPOINT_VERSION:
        raise ConfigError(f"{path}: unsupported checkpoint version {version}")
    pos += struct.calcsize("<IQ")
    meta = json.loads(data[pos:pos + n_meta])
    base = pos + n_meta
    arrays = {}
    for entry in meta.pop("arrays"):
        shape = tuple(entry["shape"])
        count = int(np.prod(shape)) if shape else 1
        start = base + entry["offset"]
        arrays[entry["name"]] = np.frombuffer(data, dtype="<f8", count=count, offset=start).reshape(shape).copy()
    return meta, arrays


def load_parameters(params: dict[str, Tensor], arrays: dict[str, np.ndarray]) -> None:
    """Copy saved arrays into live parameters (names and shapes must match)."""
    missing = set(params) - set(arrays)
    if missing:
        raise ConfigError(f"checkpoint lacks parameters {sorted(missing)}")
    for name, p in params.items():
        if arrays[name].shape != p.shape:
            raise DimensionError(f"{name}: checkpoint shape {arrays[name].shape} vs {p.shape}")
        p.value = arrays[name].copy()
