import numpy as np
import pytest

from gct import graph, harness
from gct import numerics as nx
from gct.errors import ConfigError, ContractError, DimensionError, VocabularyError
from gct.models import (MODEL_KINDS, Batch, Model, ModelSpec, PropagationBlock, Vocab, gcn_forward,
                        gct_forward, load_checkpoint, load_parameters, save_checkpoint, shallow_deep_forward,
                        transformer_forward)
from gct.tasks import TaskSpec, task_loss, total_loss
from conftest import random_tree_encounter, tiny_encounter

VOCAB = Vocab(5, 5, 5)
SMALL = dict(dim=6, gcn_steps=3, attention_blocks=3, shallow_layers=3, deep_pre_layers=2, deep_post_layers=2)


def make_batch(encounters, kind, task=TaskSpec("graph-recon"), tables=None):
    tables = tables or graph.estimate_cond_probs(encounters, (5, 5, 5))
    items = harness.prepare(encounters, VOCAB, tables, kind, task, seed=3, with_truth=True)
    return harness.collate(items, kind, task, VOCAB, np.random.default_rng(0))


def encounters(seed=0, n=3, max_nodes=6):
    rng = np.random.default_rng(seed)
    return [random_tree_encounter(rng, i, max_nodes=max_nodes) for i in range(n)]


# -- embedding ---------------------------------------------------------------------

def test_embedding_lookup_and_gradient():
    model = Model(ModelSpec("gcn", **SMALL), VOCAB, np.random.default_rng(0))
    enc = tiny_encounter(dx=(2, 2), treat=(1,), lab=(0,))
    codes = VOCAB.rows(enc.dx, enc.treat, enc.lab)
    c0 = model.embed(codes)
    np.testing.assert_array_equal(c0.value[1], c0.value[2])
    np.testing.assert_array_equal(c0.value[0], model.embedding.value[0])
    nx.backward(nx.reduce_sum(c0))
    used = np.zeros(VOCAB.n_rows, dtype=bool)
    used[codes] = True
    assert np.all(model.embedding.grad[~used] == 0)
    np.testing.assert_array_equal(model.embedding.grad[VOCAB.rows([2], [], [])[1]], 2.0)


def test_vocabulary_errors():
    with pytest.raises(VocabularyError):
        VOCAB.rows([5], [], [])
    model = Model(ModelSpec("gcn", **SMALL), VOCAB, np.random.default_rng(0))
    with pytest.raises(VocabularyError):
        model.embed(np.array([VOCAB.n_rows]))


def test_spec_validation():
    with pytest.raises(ConfigError):
        ModelSpec("rnn").validate()
    with pytest.raises(ConfigError):
        ModelSpec("gct", reg_coef=-1.0).validate()
    with pytest.raises(ConfigError):
        ModelSpec("gcn", dim=0).validate()
    with pytest.raises(ConfigError):
        ModelSpec.from_dict({"kind": "gcn", "heads": 2})
    spec = ModelSpec("gct", dim=8, reg_coef=0.1)
    assert ModelSpec.from_dict(spec.to_dict()) == spec


# -- GCN ----------------------------------------------------------------------------

def _identity_block(dim):
    block = PropagationBlock.create(np.random.default_rng(0), dim, 2 * dim, "b", attention=True)
    block.w.value = np.eye(dim)
    block.mlp.w2.value[:] = 0.0
    return block


def test_gcn_identity_adjacency_is_a_fixed_point():
    dim, n = 8, 5
    rng = np.random.default_rng(1)
    c0 = rng.normal(size=(n, dim))
    c0 = (c0 - c0.mean(axis=1, keepdims=True)) / c0.std(axis=1, keepdims=True)  # already layer-normal
    blocks = [_identity_block(dim) for _ in range(5)]
    out = gcn_forward(nx.Tensor(c0), np.eye(n), blocks, ModelSpec("gcn", dim=dim))
    np.testing.assert_allclose(out.nodes.value, c0, rtol=1e-4, atol=1e-4)


def test_gcn_uniform_adjacency_makes_nodes_identical():
    rng = np.random.default_rng(2)
    spec = ModelSpec("gcn", dim=6, gcn_steps=1)
    block = PropagationBlock.create(rng, 6, 12, "b", attention=False)
    out = gcn_forward(nx.Tensor(rng.normal(size=(4, 6))), np.full((4, 4), 0.25), [block], spec)
    np.testing.assert_allclose(out.nodes.value, np.broadcast_to(out.nodes.value[0], (4, 6)), atol=1e-14)


def test_gcn_rejects_non_stochastic_adjacency():
    block = PropagationBlock.create(np.random.default_rng(0), 4, 8, "b", attention=False)
    with pytest.raises(ContractError):
        gcn_forward(nx.Tensor(np.ones((2, 4))), np.array([[0.5, 0.4], [0.5, 0.5]]), [block], ModelSpec("gcn", dim=4))


def test_gcn_matches_transformer_with_pinned_attention():
    encs = encounters(3)
    spec_g = ModelSpec("gcn", **SMALL)
    spec_t = ModelSpec("transformer", **{**SMALL, "attention_blocks": SMALL["gcn_steps"]})
    gcn = Model(spec_g, VOCAB, np.random.default_rng(5))
    tr = Model(spec_t, VOCAB, np.random.default_rng(6))
    gcn_params, tr_params = gcn.parameters(), tr.parameters()
    for name, p in gcn_params.items():
        tr_params[name].value = p.value.copy()
    batch, _ = make_batch(encs, "gcn")
    tbatch, _ = make_batch(encs, "transformer")
    out_g = gcn.forward(batch)
    out_t = tr.forward(tbatch, pinned=batch.adjacency)
    assert np.max(np.abs(out_g.nodes.value - out_t.nodes.value)) < 1e-10


# -- transformer ------------------------------------------------------------------------

def test_single_node_attention_is_one():
    rng = np.random.default_rng(0)
    block = PropagationBlock.create(rng, 4, 8, "b", attention=True)
    out = transformer_forward(nx.Tensor(rng.normal(size=(1, 4))), np.zeros((1, 1)), [block], ModelSpec("transformer", dim=4))
    np.testing.assert_array_equal(out.attention[0].value, [[1.0]])


def test_zero_query_key_gives_uniform_attention():
    rng = np.random.default_rng(0)
    block = PropagationBlock.create(rng, 4, 8, "b", attention=True)
    block.wq.value[:] = 0.0
    block.wk.value[:] = 0.0
    allowed = graph.allowed_pattern(graph.NodeIndexing(2, 2, 1))
    a = block.attention(nx.Tensor(rng.normal(size=(6, 4))), nx.as_additive_mask(allowed)).value
    np.testing.assert_allclose(a, allowed / allowed.sum(axis=1, keepdims=True), atol=1e-15)


# -- GCT ------------------------------------------------------------------------------------

def _gct_setup(seed=0, reg=0.5, blocks=3, first_block_kl=True):
    encs = encounters(seed)
    spec = ModelSpec("gct", **{**SMALL, "attention_blocks": blocks}, reg_coef=reg, first_block_kl=first_block_kl)
    model = Model(spec, VOCAB, np.random.default_rng(seed))
    batch, targets = make_batch(encs, "gct")
    return model, batch, targets


def test_gct_first_block_propagates_with_prior_exactly():
    model, batch, _ = _gct_setup(blocks=1)
    out = model.forward(batch)
    c0 = model.embed(batch.codes)
    block = model.blocks[0]
    expected = block.mlp(nx.matmul(nx.Tensor(batch.prior), nx.matmul(c0, block.w)), 0.0, False, None)
    np.testing.assert_array_equal(out.nodes.value, expected.value)
    assert out.attention[0].value is not None
    np.testing.assert_array_equal(out.attention[0].value, batch.prior)


@pytest.mark.parametrize("seed", range(5))
def test_gct_attention_contracts(seed):
    model, batch, _ = _gct_setup(seed)
    out = model.forward(batch)
    allowed = nx.mask_allowed(batch.mask)
    for a in out.attention + [out.first_block_attention]:
        np.testing.assert_allclose(a.value.sum(axis=-1), 1.0, atol=1e-12)
        assert np.all(a.value[~allowed] == 0.0)
    assert len(out.reg_terms) == 3
    for term in out.reg_terms:
        assert np.all(term.value >= 0)


def test_gct_zero_reg_coef_drops_regularizer_exactly():
    model, batch, targets = _gct_setup(reg=0.0)
    out = model.forward(batch)
    result = task_loss(TaskSpec("graph-recon"), None, out, targets, "gct")
    assert total_loss(result, out, 0.0) is result.loss
    positive = total_loss(result, out, 0.3)
    assert float(positive.value) == pytest.approx(float(result.loss.value) + 0.3 * float(np.mean(out.reg.value)))


def test_gct_first_block_kl_flag():
    model, batch, _ = _gct_setup(first_block_kl=False)
    out = model.forward(batch)
    assert out.first_block_attention is None
    assert len(out.reg_terms) == 2
    # without the first-block term, block 2 is anchored to P itself
    expected = nx.kl_rows(batch.prior, out.attention[1]).value
    np.testing.assert_allclose(out.reg_terms[0].value, expected, rtol=1e-14)


def test_gct_rejects_prior_on_masked_cells():
    model, batch, _ = _gct_setup()
    bad = batch.prior.copy()
    allowed = nx.mask_allowed(batch.mask)
    i, r, c = np.argwhere(~allowed)[0]
    bad[i, r] = 0.0
    bad[i, r, c] = 1.0
    with pytest.raises(ContractError):
        gct_forward(model.embed(batch.codes), bad, batch.mask, model.blocks, model.spec)


def test_gct_without_prior_and_reg_is_a_masked_transformer():
    """Same weights and seeds give the same loss trajectory over a few Adam steps."""
    encs = encounters(7, n=4)
    spec_g = ModelSpec("gct", **SMALL, reg_coef=0.0)
    spec_t = ModelSpec("transformer", **SMALL)
    gct, tr = Model(spec_g, VOCAB, np.random.default_rng(1)), Model(spec_t, VOCAB, np.random.default_rng(1))
    batch, targets = make_batch(encs, "gct")
    task = TaskSpec("graph-recon")
    losses = {"gct": [], "transformer": []}
    for name, model in (("gct", gct), ("transformer", tr)):
        state = nx.AdamState(lr=0.01)
        params = model.parameters()
        for _ in range(3):
            c0 = model.embed(batch.codes)
            if name == "gct":
                out = gct_forward(c0, None, batch.mask, model.blocks, model.spec)
            else:
                out = transformer_forward(c0, batch.mask, model.blocks, model.spec)
            loss = total_loss(task_loss(task, None, out, targets, name), out, 0.0)
            losses[name].append(float(loss.value))
            for p in params.values():
                p.zero_grad()
            nx.backward(loss)
            nx.adam_step(params, {k: p.grad for k, p in params.items()}, state)
    assert losses["gct"] == losses["transformer"]


# -- shallow / deep -------------------------------------------------------------------------

@pytest.mark.parametrize("kind", ["shallow", "deep"])
def test_visit_embedding_is_permutation_invariant(kind):
    model = Model(ModelSpec(kind, **SMALL), VOCAB, np.random.default_rng(0))
    enc = tiny_encounter(dx=(0, 3), treat=(1, 4), lab=(2,))
    perm = tiny_encounter(dx=(3, 0), treat=(4, 1), lab=(2,))
    v = [model.forward(make_batch([e], kind)[0]).visit.value for e in (enc, perm)]
    np.testing.assert_allclose(v[0], v[1], atol=1e-13)


def test_shallow_single_node_visit_is_the_node():
    model = Model(ModelSpec("shallow", **SMALL), VOCAB, np.random.default_rng(0))
    c0 = model.embed(np.array([[0, 3]]))
    out = shallow_deep_forward(c0, np.array([[True, True]]), model.pre, [], model.spec)
    np.testing.assert_allclose(out.visit.value[0], out.nodes.value[0, 1], atol=1e-15)


# -- batching ---------------------------------------------------------------------------------

@pytest.mark.parametrize("kind", MODEL_KINDS)
def test_padded_batch_equals_single_encounter(kind):
    encs = encounters(11, n=3, max_nodes=7)
    tables = graph.estimate_cond_probs(encs, (5, 5, 5))
    model = Model(ModelSpec(kind, **SMALL), VOCAB, np.random.default_rng(2))
    batch, _ = make_batch(encs, kind, tables=tables)
    joint = model.forward(batch)
    for i, enc in enumerate(encs):
        alone = model.forward(make_batch([enc], kind, tables=tables)[0])
        n = graph.NodeIndexing.of(enc).size
        np.testing.assert_allclose(joint.visit.value[i], alone.visit.value[0], atol=1e-12)
        if kind != "deep":
            np.testing.assert_allclose(joint.nodes.value[i, :n], alone.nodes.value[0], atol=1e-12)
        for a_joint, a_alone in zip(joint.attention, alone.attention):
            np.testing.assert_allclose(a_joint.value[i, :n, :n], a_alone.value[0], atol=1e-12)


@pytest.mark.parametrize("kind", ["gcn", "gct", "transformer"])
def test_permutation_equivariance(kind):
    enc = tiny_encounter(dx=(0, 3), treat=(1, 4), lab=(2,), edges=[
        ("v:0", "d:0"), ("v:0", "d:1"), ("d:0", "m:0"), ("d:1", "m:1"), ("m:1", "r:0")])
    swapped = tiny_encounter(dx=(3, 0), treat=(4, 1), lab=(2,), edges=[
        ("v:0", "d:1"), ("v:0", "d:0"), ("d:1", "m:1"), ("d:0", "m:0"), ("m:0", "r:0")])
    tables = graph.estimate_cond_probs([enc], (5, 5, 5))
    model = Model(ModelSpec(kind, **SMALL), VOCAB, np.random.default_rng(4))
    a = model.forward(make_batch([enc], kind, tables=tables)[0])
    b = model.forward(make_batch([swapped], kind, tables=tables)[0])
    order = [0, 2, 1, 4, 3, 5]
    np.testing.assert_allclose(b.nodes.value[0], a.nodes.value[0][order], atol=1e-12)
    np.testing.assert_allclose(b.visit.value, a.visit.value, atol=1e-12)


# -- checkpoints --------------------------------------------------------------------------------

def test_checkpoint_round_trip(tmp_path):
    model = Model(ModelSpec("gct", **SMALL), VOCAB, np.random.default_rng(0))
    arrays = {k: v.value for k, v in model.parameters().items()}
    path = tmp_path / "m.ckpt"
    save_checkpoint(path, arrays, {"spec": model.spec.to_dict()})
    meta, back = load_checkpoint(path)
    assert meta["spec"] == model.spec.to_dict()
    assert meta["format_version"] == 1
    assert set(back) == set(arrays)
    for k in arrays:
        np.testing.assert_array_equal(back[k], arrays[k])
    other = Model(ModelSpec("gct", **SMALL), VOCAB, np.random.default_rng(9))
    load_parameters(other.parameters(), back)
    np.testing.assert_array_equal(other.embedding.value, model.embedding.value)
    # identical parameters write identical bytes
    save_checkpoint(tmp_path / "again.ckpt", arrays, {"spec": model.spec.to_dict()})
    assert (tmp_path / "again.ckpt").read_bytes() == path.read_bytes()


def test_checkpoint_errors(tmp_path):
    bad = tmp_path / "bad.ckpt"
    bad.write_bytes(b"not a checkpoint")
    with pytest.raises(ConfigError):
        load_checkpoint(bad)
    model = Model(ModelSpec("gcn", **SMALL), VOCAB, np.random.default_rng(0))
    arrays = {k: v.value for k, v in model.parameters().items()}
    arrays["embedding"] = np.zeros((2, 2))
    with pytest.raises(DimensionError):
        load_parameters(model.parameters(), arrays)
    del arrays["embedding"]
    with pytest.raises(ConfigError):
        load_parameters(model.parameters(), arrays)
