"""Unit tests for the tensor/autodiff substrate, layers and Adam."""

import numpy as np
import pytest

from codec_probe import nn


def rng(seed=0):
    return np.random.default_rng(seed)


class TestPrimitiveOps:
    def test_softmax_rows_sum_to_one(self):
        x = nn.Tensor(rng().normal(size=(7, 13)).astype(np.float32))
        y = nn.softmax(x).data
        assert np.all(y >= 0)
        np.testing.assert_allclose(y.sum(axis=-1), 1.0, atol=1e-6)

    def test_backward_of_sum_is_ones(self):
        p = nn.Tensor(rng().normal(size=(4, 3)), requires_grad=True)
        with nn.Graph() as g:
            loss = nn.sum_all(p)
        g.backward(loss)
        np.testing.assert_array_equal(p.grad, np.ones((4, 3)))

    def test_linear_layer_analytic_gradient(self):
        """y = W x summed: grad W is the outer product with ones."""
        lin = nn.Linear(4, 3, rng(1), np.float64)
        x = rng(2).normal(size=(5, 4))
        with nn.Graph() as g:
            loss = nn.sum_all(lin(nn.Tensor(x)))
        g.backward(loss)
        np.testing.assert_allclose(lin.w.grad, np.repeat(x.sum(0)[:, None], 3, axis=1))
        np.testing.assert_allclose(lin.b.grad, np.full(3, 5.0))

    def test_backward_before_forward_raises(self):
        p = nn.Tensor(np.zeros(3), requires_grad=True)
        g = nn.Graph()
        with pytest.raises(nn.GraphError):
            g.backward(p)

    def test_gather_rows_out_of_range(self):
        table = nn.Tensor(np.zeros((4, 2)))
        with pytest.raises(ValueError, match="out of range"):
            nn.gather_rows(table, np.array([4]))


class TestCrossEntropy:
    def test_uniform_logits_give_log_vocab(self):
        logits = nn.Tensor(np.zeros((10, 256), dtype=np.float64))
        loss = nn.cross_entropy(logits, np.zeros(10, dtype=np.int64))
        np.testing.assert_allclose(float(loss.data), np.log(256), rtol=1e-12)

    def test_saturated_correct_prediction(self):
        logits = np.zeros((4, 7))
        logits[np.arange(4), np.arange(4)] = 30.0
        loss = nn.cross_entropy(nn.Tensor(logits), np.arange(4))
        assert float(loss.data) <= 1e-9

    def test_matches_high_precision_oracle(self):
        """Random 5x7 logits against a direct float64 computation."""
        logits = rng(3).normal(size=(5, 7))
        targets = rng(4).integers(0, 7, size=5)
        loss = float(nn.cross_entropy(nn.Tensor(logits), targets).data)
        probs = np.exp(logits) / np.exp(logits).sum(axis=1, keepdims=True)
        oracle = -np.log(probs[np.arange(5), targets]).mean()
        np.testing.assert_allclose(loss, oracle, rtol=1e-6)

    def test_target_out_of_range(self):
        with pytest.raises(ValueError, match="target out of range"):
            nn.cross_entropy(nn.Tensor(np.zeros((2, 3))), np.array([0, 3]))


class TestAttention:
    def test_single_position_softmax_is_identity_weight(self):
        """With one key, attention weight is 1 and output is its value path."""
        attn = nn.MultiHeadAttention(8, 2, rng(0), np.float64)
        x = rng(1).normal(size=(1, 8))
        out = attn(nn.Tensor(x), nn.Tensor(x), nn.Tensor(x)).data
        v = x @ attn.wv.w.data + attn.wv.b.data
        expected = v @ attn.wo.w.data + attn.wo.b.data
        np.testing.assert_allclose(out, expected, rtol=1e-12)

    def test_mask_forces_attention_to_position_zero(self):
        attn = nn.MultiHeadAttention(8, 2, rng(0), np.float64)
        x = rng(2).normal(size=(5, 8))
        mask = np.zeros((5, 5), dtype=bool)
        mask[:, 0] = True
        out = attn(nn.Tensor(x), nn.Tensor(x), nn.Tensor(x), mask=mask).data
        v0 = (x[0:1] @ attn.wv.w.data + attn.wv.b.data) @ attn.wo.w.data + attn.wo.b.data
        np.testing.assert_allclose(out, np.repeat(v0, 5, axis=0), rtol=1e-9)

    def test_all_true_mask_equals_no_mask_bit_exactly(self):
        attn = nn.MultiHeadAttention(8, 4, rng(0), np.float32)
        x = rng(3).normal(size=(6, 8)).astype(np.float32)
        a = attn(nn.Tensor(x), nn.Tensor(x), nn.Tensor(x)).data
        b = attn(nn.Tensor(x), nn.Tensor(x), nn.Tensor(x), mask=np.ones((6, 6), bool)).data
        assert np.array_equal(a, b)

    def test_matches_naive_per_head_loop(self):
        """Vectorized attention equals a straightforward dense loop."""
        heads = 2
        attn = nn.MultiHeadAttention(8, heads, rng(0), np.float64)
        x = rng(5).normal(size=(4, 8))
        out = attn(nn.Tensor(x), nn.Tensor(x), nn.Tensor(x)).data

        q = x @ attn.wq.w.data + attn.wq.b.data
        k = x @ attn.wk.w.data + attn.wk.b.data
        v = x @ attn.wv.w.data + attn.wv.b.data
        dh = 8 // heads
        merged = np.zeros((4, 8))
        for h in range(heads):
            qs, ks, vs = (m[:, h * dh : (h + 1) * dh] for m in (q, k, v))
            scores = qs @ ks.T / np.sqrt(dh)
            w = np.exp(scores - scores.max(axis=1, keepdims=True))
            w /= w.sum(axis=1, keepdims=True)
            merged[:, h * dh : (h + 1) * dh] = w @ vs
        expected = merged @ attn.wo.w.data + attn.wo.b.data
        np.testing.assert_allclose(out, expected, rtol=1e-5)

    def test_dimension_mismatch_raises(self):
        attn = nn.MultiHeadAttention(8, 2, rng(0))
        with pytest.raises(ValueError):
            attn(nn.Tensor(np.zeros((3, 6))), nn.Tensor(np.zeros((3, 6))), nn.Tensor(np.zeros((3, 6))))


class TestGradientChecks:
    """Central finite differences (h=1e-5, float64) per parameter tensor."""

    def check(self, params, build):
        errs = nn.gradient_check(build, params)
        worst = max(errs.values())
        assert worst <= 1e-4, f"gradient check failed: {errs}"

    def test_linear_gelu_chain(self):
        lin = nn.Linear(5, 4, rng(0), np.float64)
        x = rng(1).normal(size=(6, 5))

        def build():
            return nn.mean_all(nn.gelu(lin(nn.Tensor(x))))

        self.check([(p.name, p) for p in lin.parameters()], build)

    def test_layer_norm(self):
        ln = nn.LayerNorm(6, np.float64)
        x = rng(2).normal(size=(4, 6))

        def build():
            return nn.mean_all(nn.mul(ln(nn.Tensor(x)), ln(nn.Tensor(x))))

        self.check([(p.name, p) for p in ln.parameters()], build)

    def test_attention_layer(self):
        attn = nn.MultiHeadAttention(8, 2, rng(3), np.float64)
        x = rng(4).normal(size=(5, 8))

        def build():
            return nn.mean_all(attn(nn.Tensor(x), nn.Tensor(x), nn.Tensor(x)))

        self.check([(p.name, p) for p in attn.parameters()], build)

    def test_transformer_block_with_cross_entropy(self):
        block = nn.TransformerBlock(8, 2, rng(5), np.float64)
        head = nn.Linear(8, 5, rng(6), np.float64, "head")
        x = rng(7).normal(size=(4, 8))
        targets = np.array([0, 2, 4, 1])

        def build():
            return nn.cross_entropy(head(block(nn.Tensor(x))), targets)

        params = [(p.name, p) for p in block.parameters() + head.parameters()]
        self.check(params, build)

    def test_embedding_gather(self):
        emb = nn.Embedding(7, 4, rng(8), np.float64)
        ids = np.array([1, 3, 3, 0, 6])

        def build():
            return nn.mean_all(nn.gelu(emb(ids)))

        self.check([(emb.table.name, emb.table)], build)


class TestAdam:
    def test_zero_gradient_leaves_parameters_unchanged(self):
        p = nn.Tensor(np.ones(4), requires_grad=True, name="p")
        opt = nn.Adam([p], lr=0.1)
        p.grad = np.zeros(4)
        opt.step()
        np.testing.assert_array_equal(p.data, np.ones(4))
        assert opt.step_count == 1

    def test_moments_decay_after_zero_gradient(self):
        p = nn.Tensor(np.ones(1), requires_grad=True)
        opt = nn.Adam([p], lr=0.1)
        p.grad = np.ones(1)
        opt.step()
        m_before = opt.m[0].copy()
        p.grad = np.zeros(1)
        opt.step()
        assert abs(opt.m[0][0]) < abs(m_before[0])

    def test_first_step_with_unit_gradient_moves_by_lr(self):
        """Bias correction makes the first update exactly -lr (up to eps)."""
        p = nn.Tensor(np.zeros(3), requires_grad=True)
        opt = nn.Adam([p], lr=0.1)
        p.grad = np.ones(3)
        opt.step()
        np.testing.assert_allclose(p.data, -0.1, rtol=1e-7)

    def test_converges_on_quadratic(self):
        """(x - 3)^2 reaches |x - 3| <= 0.01 in 500 steps at lr 0.05."""
        p = nn.Tensor(np.zeros(1), requires_grad=True)
        opt = nn.Adam([p], lr=0.05)
        for _ in range(500):
            p.grad = 2.0 * (p.data - 3.0)
            opt.step()
        assert abs(p.data[0] - 3.0) <= 0.01

    def test_nan_gradient_raises(self):
        p = nn.Tensor(np.zeros(2), requires_grad=True, name="p")
        opt = nn.Adam([p])
        p.grad = np.array([np.nan, 0.0])
        with pytest.raises(nn.NumericError):
            opt.step()


class TestCheckpoint:
    def test_round_trip_is_bit_exact(self, tmp_path):
        path = tmp_path / "params.anc"
        arrays = [
            ("block.w", rng(0).normal(size=(3, 4)).astype(np.float32)),
            ("block.b", rng(1).normal(size=(4,)).astype(np.float32)),
            ("scalarish", np.float32(rng(2).normal(size=(1,)))),
        ]
        nn.save_checkpoint(path, arrays)
        loaded = nn.load_checkpoint(path)
        assert list(loaded) == [n for n, _ in arrays]
        for name, arr in arrays:
            assert np.array_equal(loaded[name], arr)

    def test_magic_is_checked(self, tmp_path):
        path = tmp_path / "bad.anc"
        path.write_bytes(b"NOPE")
        with pytest.raises(ValueError, match="magic"):
            nn.load_checkpoint(path)


class TestDeterminism:
    def test_training_trajectory_reproduces_bitwise(self):
        def run():
            r = np.random.default_rng(9)
            lin = nn.Linear(6, 6, np.random.default_rng(5), np.float32)
            opt = nn.Adam(lin.parameters(), lr=1e-3)
            for _ in range(20):
                x = r.normal(size=(8, 6)).astype(np.float32)
                t = r.integers(0, 6, size=8)
                opt.zero_grad()
                with nn.Graph() as g:
                    loss = nn.cross_entropy(lin(nn.Tensor(x)), t)
                g.backward(loss)
                opt.step()
            return lin.w.data.copy(), lin.b.data.copy()

        w1, b1 = run()
        w2, b2 = run()
        assert np.array_equal(w1, w2) and np.array_equal(b1, b2)
