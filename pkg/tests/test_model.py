import math

import numpy as np
import pytest

from unidial.batching import PackedSample, collate, pack_ids, unpack
from unidial.model import (ModelConfig, StaleTraceError, backward, embed, forward, init_params, load_checkpoint,
                           nll_loss, save_checkpoint)
from unidial.tokenizer import PAD

from conftest import DESK


def small_batch(rng=None, vocab=512):
    rng = rng or np.random.default_rng(0)
    rows = [
        pack_ids([(rng.integers(4, vocab, 4).tolist(), 1), (rng.integers(4, vocab, 3).tolist(), 0)],
                 rng.integers(4, vocab, 3).tolist()),
        pack_ids([(rng.integers(4, vocab, 2).tolist(), 2)], rng.integers(4, vocab, 2).tolist()),
    ]
    return collate(rows)


def jiggle(params, rng, scale=0.05):
    for v in params.tensors.values():
        v += rng.normal(0, scale, v.shape).astype(v.dtype)
    return params


def test_config_validation():
    with pytest.raises(ValueError, match="divisible"):
        ModelConfig(d_model=65, n_heads=4)
    with pytest.raises(ValueError):
        ModelConfig(n_roles=1)
    big = ModelConfig(n_layers=72, n_heads=32, d_model=3072, d_ff=18432, vocab_size=8000, max_positions=1025)
    assert big.d_head == 96
    assert 10e9 < big.n_params() < 12e9


def test_init_deterministic():
    cfg = ModelConfig(**DESK)
    a, b = init_params(cfg, 7), init_params(cfg, 7)
    assert all(np.array_equal(a[k], b[k]) for k in a.tensors)
    c = init_params(cfg, 8)
    assert not np.array_equal(a["tok_emb"], c["tok_emb"])


def test_init_scaled_residual_std():
    cfg = ModelConfig(n_layers=2, n_heads=4, d_model=256, d_ff=1024, vocab_size=64)
    p = init_params(cfg, 0, dtype=np.float64)
    resid = np.concatenate([p[k].ravel() for k in p.tensors if k.endswith(("attn.w_out", "mlp.w_out"))])
    assert resid.size >= 10**5
    assert abs(resid.std() - 0.02 / math.sqrt(4)) < 0.05 * 0.01
    other = p["h0.attn.w_qkv"].ravel()
    assert abs(other.std() - 0.02) < 0.05 * 0.02
    assert (p["h0.ln1.g"] == 1).all() and (p["h0.attn.b_qkv"] == 0).all()


def test_shapes_follow_config():
    cfg = ModelConfig(**DESK)
    p = init_params(cfg)
    assert {k: v.shape for k, v in p.tensors.items()} == cfg.shapes()
    assert "lm_head" not in p.tensors
    untied = init_params(ModelConfig(**DESK, tie_embeddings=False))
    assert untied["lm_head"].shape == (64, 512)


def test_embed_zero_tables():
    p = init_params(ModelConfig(**DESK))
    for k in ("tok_emb", "pos_emb", "type_emb", "role_emb"):
        p.tensors[k][:] = 0
    assert (embed(small_batch(), p) == 0).all()


def test_embed_role_only_probe():
    p = init_params(ModelConfig(**DESK), dtype=np.float64)
    for k in ("tok_emb", "pos_emb", "type_emb"):
        p.tensors[k][:] = 0
    b = small_batch()
    x = embed(b, p)
    r = b.role_ids[0]
    i, j = np.nonzero(r == 1)[0][:2]
    assert np.array_equal(x[0, i], x[0, j])


def test_embed_role_perturbation_touches_only_role0():
    p = init_params(ModelConfig(**DESK), dtype=np.float64)
    b = small_batch()
    base = embed(b, p)
    h = 1e-3
    p.tensors["role_emb"][0, 5] += h
    fd = (embed(b, p) - base) / h
    moved = np.abs(fd).max(-1) > 0.5
    assert np.array_equal(moved, b.role_ids == 0)
    assert np.allclose(fd[moved][:, 5], 1.0)


def test_embed_out_of_range():
    p = init_params(ModelConfig(**DESK))
    b = small_batch()
    b.role_ids[0, 0] = 9
    with pytest.raises(ValueError, match="role id out of range"):
        embed(b, p)


def test_forward_shape_single_token():
    p = init_params(ModelConfig(**DESK))
    one = PackedSample([5], [0], [0], [1], [0], (1, 0))
    b = collate([one])
    assert b.shape == (1, 1)
    assert forward(b, p).logits.shape == (1, 1, 512)


def test_context_rows_blind_to_response():
    p = jiggle(init_params(ModelConfig(**DESK), dtype=np.float64), np.random.default_rng(3))
    b = small_batch()
    c = b.lengths[0, 0]
    base = forward(b, p).logits
    tok = b.token_ids.copy()
    tok[0, c + 2] = (tok[0, c + 2] + 17) % 508 + 4
    after = forward(b.with_tokens(tok), p).logits
    assert np.array_equal(base[0, :c], after[0, :c])
    assert not np.allclose(base[0, c + 2:], after[0, c + 2:])


def test_causality_token_perturbation_oracle():
    """Perturb every position in turn; record which logits move."""
    p = jiggle(init_params(ModelConfig(**DESK), dtype=np.float64), np.random.default_rng(4))
    b = small_batch()
    base = forward(b, p).logits
    for row in range(2):
        c, r = b.lengths[row]
        n = c + r + 2
        for t in range(n):
            tok = b.token_ids.copy()
            tok[row, t] = (tok[row, t] + 101) % 508 + 4
            moved = np.abs(forward(b.with_tokens(tok), p).logits[row] - base[row]).max(-1) > 0
            if t < c:
                assert moved[:n].all()
            else:
                assert not moved[:t].any()
                assert moved[t:n].all()
        # Last response token: nothing before it changes.
        last = c + r
        tok = b.token_ids.copy()
        tok[row, last] = 4 if tok[row, last] != 4 else 5
        after = forward(b.with_tokens(tok), p).logits
        assert np.array_equal(after[row, :last], base[row, :last])


def independent_nll(logits, tokens, mask):
    total, count = 0.0, 0
    B, L, V = logits.shape
    for b in range(B):
        for i in range(1, L):
            if not mask[b, i]:
                continue
            row = [float(v) for v in logits[b, i - 1]]
            top = max(row)
            lse = top + math.log(sum(math.exp(v - top) for v in row))
            total -= row[int(tokens[b, i])] - lse
            count += 1
    return total / count


def test_nll_matches_independent_oracle():
    p = jiggle(init_params(ModelConfig(**DESK), dtype=np.float64), np.random.default_rng(5), 0.2)
    b = small_batch()
    tr = forward(b, p)
    loss, per_tok = nll_loss(tr, b)
    assert abs(loss - independent_nll(tr.logits, b.token_ids, b.loss_mask)) < 1e-6
    assert (per_tok[b.loss_mask == 0] == 0).all()


def test_nll_uniform_logits():
    b = small_batch()
    p = init_params(ModelConfig(**DESK))
    tr = forward(b, p)
    tr.logits = np.zeros_like(tr.logits)
    loss, _ = nll_loss(tr, b)
    assert loss == pytest.approx(math.log(512), abs=1e-6)
    assert loss == pytest.approx(6.238, abs=1e-3)


def test_nll_spike_on_targets():
    b = small_batch()
    tr = forward(b, init_params(ModelConfig(**DESK)))
    logits = np.zeros(tr.logits.shape)
    B, L = b.shape
    for bi in range(B):
        for i in range(1, L):
            logits[bi, i - 1, b.token_ids[bi, i]] = 1e4
    tr.logits = logits
    assert nll_loss(tr, b)[0] < 1e-12


def test_nll_empty_mask():
    b = small_batch()
    b.loss_mask[:] = 0
    with pytest.raises(ValueError):
        nll_loss(forward(b, init_params(ModelConfig(**DESK))), b)


def central_fd(f, arr, idx, h=1e-3):
    flat = arr.reshape(-1)
    out = np.empty(len(idx))
    for j, i in enumerate(idx):
        orig = flat[i]
        flat[i] = orig + h
        fp = f()
        flat[i] = orig - h
        fm = f()
        flat[i] = orig
        out[j] = (fp - fm) / (2 * h)
    return out


def test_gradients_spot_check_untied():
    cfg = ModelConfig(n_layers=1, n_heads=2, d_model=16, d_ff=32, vocab_size=40, max_positions=32,
                      tie_embeddings=False)
    rng = np.random.default_rng(6)
    p = jiggle(init_params(cfg, dtype=np.float64), rng, 0.1)
    b = small_batch(rng, vocab=40)
    g = backward(forward(b, p), b, p)
    f = lambda: nll_loss(forward(b, p), b)[0]
    for name, arr in p.tensors.items():
        idx = rng.choice(arr.size, min(arr.size, 40), replace=False)
        num = central_fd(f, arr, idx)
        an = g[name].reshape(-1)[idx]
        assert np.linalg.norm(num - an) <= 1e-5 * max(np.linalg.norm(num), 1e-8) + 1e-10, name


def test_zero_loss_row_contributes_nothing():
    p = jiggle(init_params(ModelConfig(**DESK), dtype=np.float64), np.random.default_rng(7))
    b = small_batch()
    b.loss_mask[1] = 0
    alone = collate(unpack(small_batch())[:1])
    assert alone.shape[1] == b.shape[1]
    g_masked = backward(forward(b, p), b, p)
    g_alone = backward(forward(alone, p), alone, p)
    for k in g_masked:
        assert np.allclose(g_masked[k], g_alone[k], rtol=1e-10, atol=1e-14), k


def test_grad_scale_linear():
    p = jiggle(init_params(ModelConfig(**DESK), dtype=np.float64), np.random.default_rng(8))
    b = small_batch()
    tr = forward(b, p)
    g1 = backward(tr, b, p)
    g2 = backward(tr, b, p, grad_scale=2.0)
    for k in g1:
        assert np.allclose(g2[k], 2 * g1[k], rtol=1e-12, atol=0)


def test_stale_trace():
    p = init_params(ModelConfig(**DESK))
    b = small_batch()
    tr = forward(b, p)
    p.version += 1
    with pytest.raises(StaleTraceError):
        backward(tr, b, p)
    with pytest.raises(StaleTraceError):
        backward(forward(b, p), small_batch(), p)


def test_pad_inertness():
    p = jiggle(init_params(ModelConfig(**DESK), dtype=np.float64), np.random.default_rng(9))
    b = small_batch()
    assert b.pad_count > 0
    tr = forward(b, p)
    loss, _ = nll_loss(tr, b)
    g = backward(tr, b, p)
    tok = b.token_ids.copy()
    pad_pos = np.zeros_like(tok, dtype=bool)
    for i, (c, r) in enumerate(b.lengths):
        pad_pos[i, c + r + 2:] = True
    assert (tok[pad_pos] == PAD).all()
    tok[pad_pos] = 77
    b2 = b.with_tokens(tok)
    tr2 = forward(b2, p)
    assert nll_loss(tr2, b2)[0] == loss
    g2 = backward(tr2, b2, p)
    for k in g:
        assert np.array_equal(g[k], g2[k]), k


def test_forward_bit_identical():
    p = init_params(ModelConfig(**DESK))
    b = small_batch()
    assert np.array_equal(forward(b, p).logits, forward(b, p).logits)


@pytest.mark.filterwarnings("ignore::RuntimeWarning")
def test_non_finite_detected():
    p = init_params(ModelConfig(**DESK))
    p.tensors["h1.mlp.w_in"][0, 0] = np.inf
    with pytest.raises(FloatingPointError, match="layer 1"):
        forward(small_batch(), p)


def test_role_sensitivity_and_relabeling():
    cfg = ModelConfig(**DESK)
    p = init_params(cfg, 11, dtype=np.float64)
    b = small_batch()
    base = forward(b, p).logits
    b2 = small_batch()
    b2.role_ids[0, :2] = 3
    assert np.abs(forward(b2, p).logits - base).max() > 1e-6
    perm = np.random.default_rng(1).permutation(cfg.n_roles)
    q = p.copy()
    q.tensors["role_emb"] = p["role_emb"][perm]
    inv = np.argsort(perm)
    b3 = small_batch()
    b3.role_ids = inv[b.role_ids]
    assert np.abs(forward(b3, q).logits - base).max() < 1e-6


def test_checkpoint_round_trip(tmp_path):
    p = init_params(ModelConfig(**DESK))
    path = tmp_path / "m.ckpt"
    save_checkpoint(path, p, {"note": "x"}, {"extra.t": np.arange(6, dtype=np.float32).reshape(2, 3)})
    q, header, extra = load_checkpoint(path)
    assert header["note"] == "x" and header["config"]["d_model"] == 64
    assert all(np.array_equal(p[k], q[k]) for k in p.tensors)
    assert extra["extra.t"].shape == (2, 3)
    b = small_batch()
    assert nll_loss(forward(b, p), b)[0] == nll_loss(forward(b, q), b)[0]
    save_checkpoint(tmp_path / "again.ckpt", q)
    save_checkpoint(tmp_path / "first.ckpt", p)
    assert (tmp_path / "again.ckpt").read_bytes() == (tmp_path / "first.ckpt").read_bytes()
