import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from progen.nncore import Tensor, gradient_check, ops, stop_gradient
from progen.vqtok import (Codebook, Tokenizer, VqConfig, ema_update, psnr, quantize, read_token_file,
                          write_token_file)

SMALL = VqConfig(codebook_size=16, dim=8, channels=8)


def test_quantize_exact_hit():
    rng = np.random.default_rng(0)
    entries = rng.standard_normal((8, 4))
    res = quantize(entries[3][None], entries)
    assert res.tokens.tolist() == [3]
    assert res.errors[0] == 0.0


def test_quantize_nearest_example():
    res = quantize(np.array([[0.9, 0.9]]), np.array([[0.0, 0.0], [1.0, 1.0]]))
    assert res.tokens[0] == 1
    assert res.errors[0] == pytest.approx(0.02, abs=1e-12)


def test_quantize_tie_goes_to_lowest_index():
    res = quantize(np.array([[0.5, 0.5]]), np.array([[0.0, 0.0], [1.0, 1.0]]))
    assert res.tokens[0] == 0


def test_quantize_rejects_empty_and_wrong_dim():
    with pytest.raises(ValueError):
        quantize(np.zeros((2, 3)), np.zeros((0, 3)))
    with pytest.raises(ValueError):
        quantize(np.zeros((2, 3)), np.zeros((4, 2)))


@settings(max_examples=30, deadline=None)
@given(st.integers(2, 512), st.integers(1, 8), st.integers(0, 2**31 - 1))
def test_quantize_matches_exhaustive_search(K, d, seed):
    rng = np.random.default_rng(seed)
    entries = rng.standard_normal((K, d)).astype(np.float32)
    z = rng.standard_normal((50, d)).astype(np.float32)
    res = quantize(z, entries, chunk=7)
    for i in range(len(z)):
        dists = [float(((z[i].astype(np.float64) - entries[k]) ** 2).sum()) for k in range(K)]
        assert res.tokens[i] == int(np.argmin(dists))
        assert res.errors[i] == pytest.approx(min(dists), rel=1e-12, abs=1e-12)


def test_quantize_idempotent_on_entries():
    entries = np.random.default_rng(1).standard_normal((64, 6))
    res = quantize(entries, entries)
    assert res.tokens.tolist() == list(range(64))
    assert (res.errors == 0).all()


def test_moving_closer_never_increases_error():
    rng = np.random.default_rng(2)
    entries = rng.standard_normal((32, 4))
    z = rng.standard_normal((100, 4))
    res = quantize(z, entries)
    closer = z + 0.5 * (entries[res.tokens] - z)
    assert (quantize(closer, entries).errors <= res.errors + 1e-12).all()


def test_ema_gamma_zero_gives_mean():
    cb = Codebook(np.zeros((3, 2)), gamma=0.0)
    feats = np.array([[1.0, 2.0], [3.0, 4.0], [10.0, 10.0]])
    ema_update(cb, feats, np.array([0, 0, 2]))
    np.testing.assert_allclose(cb.entries[0], [2.0, 3.0], rtol=1e-6)
    np.testing.assert_allclose(cb.entries[2], [10.0, 10.0], rtol=1e-6)
    np.testing.assert_array_equal(cb.entries[1], [0.0, 0.0])


def test_ema_unassigned_entry_nearly_unchanged():
    cb = Codebook(np.zeros((2, 2)), gamma=0.99)
    ema_update(cb, np.array([[1.0, 1.0], [2.0, -1.0]]), np.array([0, 1]))
    old = cb.entries[1].copy()
    size, total = cb.cluster_size[1], cb.embed_sum[1].copy()
    ema_update(cb, np.array([[5.0, 5.0]]), np.array([0]))
    expected = total * 0.99 / (size * 0.99 + cb.eps)
    np.testing.assert_allclose(cb.entries[1], expected, rtol=1e-6)
    np.testing.assert_allclose(cb.entries[1], old, rtol=1e-6)


def test_ema_converges_to_assignment_mean():
    rng = np.random.default_rng(3)
    cb = Codebook(rng.standard_normal((4, 3)), gamma=0.99)
    feats = rng.standard_normal((40, 3))
    assign = np.arange(40) % 4
    for _ in range(200):
        ema_update(cb, feats, assign)
    for k in range(4):
        np.testing.assert_allclose(cb.entries[k], feats[assign == k].mean(axis=0), atol=1e-6)


@settings(max_examples=25, deadline=None)
@given(st.floats(0.0, 0.999), st.integers(0, 2**31 - 1))
def test_ema_stays_finite(gamma, seed):
    rng = np.random.default_rng(seed)
    cb = Codebook(rng.standard_normal((5, 2)), gamma=gamma)
    for _ in range(5):
        feats = rng.standard_normal((7, 2)) * 100
        ema_update(cb, feats, rng.integers(0, 5, 7))
        assert np.isfinite(cb.entries).all() and (cb.cluster_size >= 0).all()


def test_ema_rejects_bad_assignment():
    with pytest.raises(ValueError):
        ema_update(Codebook(np.zeros((2, 2))), np.zeros((1, 2)), np.array([2]))


def test_loss_terms_hand_example():
    # one feature at distance 0.1 from its entry
    z = Tensor(np.array([[0.1, 0.0]]), requires_grad=True)
    zq = Tensor(np.array([[0.0, 0.0]]))
    codebook_term = ((stop_gradient(z) - zq) ** 2).sum()
    commit_term = 0.25 * ((stop_gradient(zq) - z) ** 2).sum()
    assert codebook_term.item() == pytest.approx(0.01)
    assert commit_term.item() == pytest.approx(0.0025)


def test_loss_reports_codebook_and_commit_terms():
    tok = Tokenizer(SMALL, seed=0, dtype=np.float64)
    img = np.random.default_rng(4).random((2, 16, 16, 3))
    feats = tok.encode(img).reshape(-1, SMALL.dim)
    tok.codebook.weight.data = np.concatenate([feats[:1] + 0.1 / np.sqrt(SMALL.dim),
                                               np.full((SMALL.codebook_size - 1, SMALL.dim), 1e3)])
    out = tok.loss(img)
    res = quantize(feats, tok.codebook)
    assert out.codebook == pytest.approx(res.errors.mean(), rel=1e-9)
    assert out.commit == pytest.approx(out.codebook, rel=1e-12)
    assert out.total.item() == pytest.approx(out.recon + SMALL.beta * out.commit, rel=1e-9)


def test_commitment_gradient_finite_differences():
    tok = Tokenizer(SMALL, seed=1, dtype=np.float64)
    img = np.random.default_rng(5).random((1, 8, 8, 3))
    params = tok.encoder.parameters()
    codes = tok.codebook.entries.astype(np.float64)

    def commit():
        z = tok.encode_tensor(img)
        res = quantize(z.data, codes)
        return ((Tensor(codes[res.tokens]) - z) ** 2).sum() * (SMALL.beta / res.tokens.size)

    assert gradient_check(commit, params) < 1e-4


def test_full_loss_gradient_finite_differences():
    cfg = VqConfig(codebook_size=8, dim=4, channels=4, use_ema=False)
    tok = Tokenizer(cfg, seed=3, dtype=np.float64)
    tok.codebook.weight.data = tok.codebook.weight.data.astype(np.float64)
    # zero-initialized biases put dead-input ReLUs exactly on the kink
    jitter = np.random.default_rng(7)
    for p in tok.encoder.parameters() + tok.decoder.parameters():
        p.data += jitter.normal(scale=0.05, size=p.shape)
    img = np.random.default_rng(6).random((1, 8, 8, 3))
    z0 = tok.encode(img)
    res = quantize(z0, tok.codebook)
    zq0 = tok.codebook.entries[res.tokens].copy()
    n = res.tokens.size

    # finite differences see through stop-gradients, so the reference freezes
    # the stopped operands as constants taken at the current point
    def reference():
        z = tok.encode_tensor(img)
        zq = tok.codebook.weight[res.tokens]
        recon = tok._decode_tensor(z + Tensor(zq0 - z0), 2, 2)
        return (ops.absolute(recon - Tensor(img)).mean() + ((Tensor(z0) - zq) ** 2).sum() * (1 / n)
                + cfg.beta * ((Tensor(zq0) - z) ** 2).sum() * (1 / n))

    assert abs(reference().item() - tok.loss(img).total.item()) < 1e-12
    assert gradient_check(lambda: tok.loss(img).total, tok.parameters(), h=1e-6, reference=reference) < 1e-4


def test_encode_shapes():
    tok = Tokenizer(SMALL)
    assert tok.encode(np.zeros((2, 32, 32, 3), np.float32)).shape == (2, 64, SMALL.dim)
    big = Tokenizer(VqConfig(codebook_size=4, dim=2, channels=2, factor=16))
    assert big.grid_shape(512, 512) == (32, 32)
    assert big.encode(np.zeros((1, 512, 512, 3), np.float32)).shape == (1, 1024, 2)


def test_encode_rejects_indivisible_image():
    with pytest.raises(ValueError):
        Tokenizer(SMALL).encode(np.zeros((1, 30, 32, 3)))


def test_zero_image_bias_free_encoder_gives_zero_features():
    tok = Tokenizer(SMALL)
    for name, p in tok.encoder.named_parameters():
        if name.endswith("bias"):
            p.data[:] = 0
    assert (tok.encode(np.zeros((1, 32, 32, 3), np.float32)) == 0).all()


def test_raster_order_of_features():
    # a bright patch in the top-right 4x4 cell changes feature index 7 first
    tok = Tokenizer(VqConfig(codebook_size=4, dim=4, channels=4, factor=4))
    base = tok.encode(np.zeros((1, 32, 32, 3), np.float32))[0]
    img = np.zeros((1, 32, 32, 3), np.float32)
    img[0, 0:4, 28:32] = 1.0
    diff = np.abs(tok.encode(img)[0] - base).sum(axis=1)
    assert diff[7] > 0 and diff[56:].sum() == 0


def test_decode_range_and_errors():
    tok = Tokenizer(SMALL)
    out = tok.decode(np.random.default_rng(7).integers(0, 16, (3, 64)))
    assert out.shape == (3, 32, 32, 3)
    assert out.min() >= 0 and out.max() <= 1
    with pytest.raises(ValueError):
        tok.decode(np.full((1, 64), 16))
    with pytest.raises(ValueError):
        tok.decode(np.zeros((1, 60), int))


def test_decode_identical_tokens_is_periodic_inside():
    tok = Tokenizer(SMALL)
    out = tok.decode(np.full((1, 64), 5))[0]
    # away from the border every 4x4 cell looks the same
    inner = out[8:24, 8:24]
    np.testing.assert_allclose(inner[:4, :4], inner[4:8, 8:12], atol=1e-6)


def test_psnr_known_value():
    a = np.zeros((1, 4, 4, 3))
    b = np.full((1, 4, 4, 3), 0.1)
    assert psnr(a, b)[0] == pytest.approx(20.0)


def test_token_file_roundtrip(tmp_path):
    rng = np.random.default_rng(8)
    toks = rng.integers(0, 128, (5, 64))
    errs = rng.random((5, 64)).astype(np.float32)
    write_token_file(tmp_path / "t.bin", toks, errs, 128)
    t2, e2, K = read_token_file(tmp_path / "t.bin")
    assert K == 128
    np.testing.assert_array_equal(t2, toks)
    np.testing.assert_array_equal(e2, errs)
    with pytest.raises(ValueError):
        write_token_file(tmp_path / "bad.bin", toks, errs, 64)


def test_checkpoint_roundtrip(tmp_path):
    tok = Tokenizer(SMALL, seed=3)
    tok.codebook.cluster_size[:] = np.arange(16)
    tok.save(tmp_path / "tok.ckpt")
    back = Tokenizer.load(tmp_path / "tok.ckpt")
    img = np.random.default_rng(9).random((2, 32, 32, 3)).astype(np.float32)
    np.testing.assert_array_equal(back.tokenize(img).tokens, tok.tokenize(img).tokens)
    np.testing.assert_array_equal(back.codebook.cluster_size, tok.codebook.cluster_size)
    np.testing.assert_array_equal(back.reconstruct(img), tok.reconstruct(img))
