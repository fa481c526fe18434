import numpy as np
import pytest

from progen.model import (ModelConfig, ProgressiveModel, TrainConfig, collate, loss_ar, loss_progressive,
                          state_to_class, train_model, write_training_log)
from progen.nncore import AdamW, Tensor, gradient_check, no_grad, ops
from progen.scheduler import MASK, RevisionConfig, inject_revision, make_tuple, materialize_tuples, plan_baseline

TINY = ModelConfig(layers=1, width=16, ff_width=32, heads=2, text_layers=1, text_width=16,
                   codebook_size=8, seq_len=16)


def tiny(seed=0, dtype=np.float64, **kw):
    cfg = ModelConfig(**{**TINY.__dict__, **kw})
    return ProgressiveModel(cfg, seed=seed, dtype=dtype)


def text_batch(n, seed=0):
    rng = np.random.default_rng(seed)
    return np.stack([rng.integers(0, 4, n), 4 + rng.integers(0, 5, n), 9 + rng.integers(0, 5, n),
                     14 + rng.integers(0, 2, n), 16 + rng.integers(0, 2, n)], axis=1)


def test_state_classes():
    assert state_to_class(np.array([0, 1, -1])).tolist() == [0, 1, 2]


def test_large_scale_reference_recorded():
    assert ModelConfig.REFERENCE_SCALE == {"layers": 24, "width": 1280, "ff_width": 4096, "heads": 20}
    d = ModelConfig()
    assert (d.layers, d.width, d.ff_width, d.heads) == (4, 128, 256, 4)
    with pytest.raises(ValueError):
        ModelConfig(width=130, heads=4)


def test_encode_text_shape_and_vocab():
    m = tiny()
    mem = m.encode_text(text_batch(3))
    assert mem.shape == (3, 5, 16)
    with pytest.raises(ValueError):
        m.encode_text(np.array([[0, 4, 9, 14, 18]]))


def test_batch_permutation_equivariance():
    m = tiny()
    text = text_batch(3, 1)
    toks = np.random.default_rng(2).integers(-1, 8, (3, 16))
    prior = np.random.default_rng(3).integers(-1, 2, (3, 16))
    with no_grad():
        out = m.forward(toks, prior, m.encode_text(text)).token_logits.data
        perm = [2, 0, 1]
        out_p = m.forward(toks[perm], prior[perm], m.encode_text(text[perm])).token_logits.data
    np.testing.assert_allclose(out_p, out[perm], atol=1e-12)


def test_forward_shapes_and_softmax():
    m = tiny()
    with no_grad():
        out = m.forward(np.full((2, 16), MASK), np.zeros((2, 16), int), m.encode_text(text_batch(2)))
    assert out.token_logits.shape == (2, 16, 8)
    assert out.state_logits.shape == (2, 16, 3)
    p = np.exp(out.token_logits.data - out.token_logits.data.max(-1, keepdims=True))
    np.testing.assert_allclose((p / p.sum(-1, keepdims=True)).sum(-1), 1.0)
    assert m.forward_calls == 1


def test_bidirectional_probe():
    m = tiny()
    mem = m.encode_text(text_batch(1))
    toks = np.random.default_rng(4).integers(0, 8, (1, 16))
    other = toks.copy()
    other[0, -1] = (other[0, -1] + 1) % 8
    prior = np.zeros((1, 16), int)
    with no_grad():
        a = m.forward(toks, prior, mem).token_logits.data[0, 0]
        b = m.forward(other, prior, mem).token_logits.data[0, 0]
    assert np.abs(a - b).max() > 1e-8
    causal = tiny(causal=True)
    mem = causal.encode_text(text_batch(1))
    with no_grad():
        a = causal.forward(toks, prior, mem).token_logits.data[0, 0]
        b = causal.forward(other, prior, mem).token_logits.data[0, 0]
    assert np.abs(a - b).max() == 0.0


def test_all_mask_symmetry_without_positions():
    m = tiny()
    m.img_pos.weight.data[:] = 0
    with no_grad():
        out = m.forward(np.full((1, 16), MASK), np.zeros((1, 16), int), m.encode_text(text_batch(1)))
    logits = out.token_logits.data[0]
    np.testing.assert_allclose(logits, np.broadcast_to(logits[0], logits.shape), atol=1e-12)


def test_rejects_bad_tokens():
    m = tiny()
    mem = m.encode_text(text_batch(1))
    with pytest.raises(ValueError):
        m.forward(np.full((1, 16), 9), np.zeros((1, 16), int), mem)
    with pytest.raises(ValueError):
        m.forward(np.full((1, 12), MASK), np.zeros((1, 12), int), mem)


def _uniform_model(K=128, L=64):
    m = ProgressiveModel(ModelConfig(layers=1, width=16, ff_width=16, heads=2, text_layers=1, text_width=16,
                                     codebook_size=K, seq_len=L), dtype=np.float64)
    for head in (m.token_head, m.state_head):
        head.weight.data[:] = 0
        head.bias.data[:] = 0
    return m


def test_uniform_loss_closed_form():
    m = _uniform_model()
    y = np.random.default_rng(5).integers(0, 128, 64)
    tup = make_tuple(text_batch(1)[0], y, plan_baseline("random", 8, np.random.default_rng(6)), 3)
    parts = loss_progressive(m, [tup])
    assert parts.token.item() == pytest.approx(np.log(128), rel=1e-12)
    assert parts.state.item() == pytest.approx(np.log(3), rel=1e-12)
    assert parts.total.item() == pytest.approx(np.log(128) + np.log(3), rel=1e-12)


def test_uniform_loss_ar_closed_form():
    m = _uniform_model(K=4, L=2)
    assert loss_ar(m, text_batch(1), np.array([[1, 3]])).item() == pytest.approx(2 * np.log(4), rel=1e-12)


def test_loss_ar_matches_raster_tuples():
    m = tiny(seed=1)
    rng = np.random.default_rng(7)
    text = text_batch(2, 8)
    y = rng.integers(0, 8, (2, 16))
    total = 0.0
    for b in range(2):
        for tup in materialize_tuples(text[b], y[b], plan_baseline("l2r", 16, L=16)):
            total += loss_progressive(m, [tup]).token.item()
    assert loss_ar(m, text, y).item() == pytest.approx(total / 2, abs=1e-6)


def test_loss_ar_first_token_sees_all_mask():
    m = tiny(seed=2)
    text = text_batch(1)
    y = np.random.default_rng(9).integers(0, 8, (1, 16))
    first = make_tuple(text[0], y[0], plan_baseline("l2r", 16, L=16), 1)
    assert (first.inp == MASK).all()
    with no_grad():
        out = m.forward(first.inp, first.prior_state, m.encode_text(text))
    logp = out.token_logits.data[0, 0] - np.log(np.exp(out.token_logits.data[0, 0]).sum())
    assert loss_progressive(m, [first]).token.item() == pytest.approx(-logp[y[0, 0]], rel=1e-10)


def test_loss_rejects_invalid_tuple():
    m = tiny()
    tup = make_tuple(text_batch(1)[0], np.arange(16) % 8, plan_baseline("l2r", 4, L=16), 2)
    bad = type(tup)(tup.text, tup.target, tup.target, tup.state, tup.prior_state, 2)
    with pytest.raises(ValueError):
        loss_progressive(m, [bad])


def test_token_loss_ignores_unchanged_positions():
    m = tiny(seed=3)
    y = np.random.default_rng(10).integers(0, 8, 16)
    tup = make_tuple(text_batch(1)[0], y, plan_baseline("l2r", 4, L=16), 3)
    batch = collate([tup])
    memory = m.encode_text(batch.text)
    logits = Tensor(m.forward(batch.inp, batch.prior, memory).token_logits.data, requires_grad=True)
    supervised = batch.state == 1
    ops.cross_entropy(logits, np.where(supervised, batch.target, 0), supervised).backward()
    assert (logits.grad[0, ~supervised[0]] == 0).all()
    assert np.abs(logits.grad[0, supervised[0]]).sum() > 0


def test_gradient_check_all_parameters():
    m = tiny(seed=4, layers=1, width=8, ff_width=8, text_width=8)
    rng = np.random.default_rng(11)
    y = rng.integers(0, 8, (2, 16))
    tuples = [inject_revision(make_tuple(text_batch(2)[b], y[b], plan_baseline("random", 4, rng, L=16), 3),
                              RevisionConfig(1.0, 0.5), 8, rng) for b in range(2)]
    batch = collate(tuples)
    assert gradient_check(lambda: loss_progressive(m, batch).total, m.parameters()) < 1e-4


def test_text_embedding_gradient():
    m = tiny(seed=5)
    y = np.random.default_rng(12).integers(0, 8, 16)
    batch = collate([make_tuple(text_batch(1)[0], y, plan_baseline("l2r", 2, L=16), 2)])
    assert gradient_check(lambda: loss_progressive(m, batch).total, [m.text_emb.weight]) < 1e-4


def test_overfit_single_batch():
    m = tiny(seed=6, dtype=np.float32, width=32, ff_width=64, text_width=32)
    rng = np.random.default_rng(13)
    y = rng.integers(0, 8, (4, 16))
    text = text_batch(4, 14)
    batch = collate([make_tuple(text[b], y[b], plan_baseline("random", 4, rng, L=16), 1 + b) for b in range(4)])
    opt = AdamW(m.parameters(), lr=3e-3)
    for _ in range(500):
        opt.zero_grad()
        loss = loss_progressive(m, batch).total
        loss.backward()
        opt.step()
    assert loss_progressive(m, batch).total.item() < 0.05


def test_train_model_runs_and_logs(tmp_path):
    rng = np.random.default_rng(15)
    toks = rng.integers(0, 8, (20, 16))
    errs = rng.random((20, 16))
    res = train_model(text_batch(20), toks, errs, TINY,
                      TrainConfig(order="qerr", stages=(2, 4), steps=6, batch=4, log_every=2))
    assert [r["step"] for r in res.log] == [0, 2, 4, 5]
    write_training_log(tmp_path / "log.csv", res.log)
    assert (tmp_path / "log.csv").read_text().splitlines()[0] == "step,lr,token_loss,state_loss"


def test_checkpoint_roundtrip(tmp_path):
    m = tiny(seed=7, dtype=np.float32)
    m.save(tmp_path / "m.ckpt")
    back = ProgressiveModel.load(tmp_path / "m.ckpt")
    assert back.cfg == m.cfg
    toks = np.random.default_rng(16).integers(-1, 8, (2, 16))
    prior = np.zeros((2, 16), int)
    with no_grad():
        a = m.forward(toks, prior, m.encode_text(text_batch(2))).state_logits.data
        b = back.forward(toks, prior, back.encode_text(text_batch(2))).state_logits.data
    np.testing.assert_array_equal(a, b)
