"""Attention flow: composition oracles, symmetry, gating dataflow, heads."""

import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from dfaf import attention as A
from dfaf import tensor as T
from dfaf.tensor import GradTape, ShapeError, Tensor, backward


# ---------------------------------------------------------------------------
# independent numpy oracles (no module forward code reused)


def np_linear(layer, x):
    return x @ layer.weight.data + layer.bias.data


def np_softmax(x):
    e = np.exp(x - x.max(axis=-1, keepdims=True))
    return e / e.sum(axis=-1, keepdims=True)


def np_sigmoid(x):
    return 1.0 / (1.0 + np.exp(-x))


def np_heads_attend(q, k, v, heads):
    hd = q.shape[-1] // heads
    outs = []
    for h in range(heads):
        sl = slice(h * hd, (h + 1) * hd)
        w = np_softmax(q[..., sl] @ k[..., sl].swapaxes(-1, -2) / math.sqrt(hd))
        outs.append(w @ v[..., sl])
    return np.concatenate(outs, axis=-1)


def np_qkv(p, x):
    return np_linear(p.query, x), np_linear(p.key, x), np_linear(p.value, x)


def inter_oracle(r, e, p, heads, order):
    rq, rk, rv = np_qkv(p.region_qkv, r)
    eq, ek, ev = np_qkv(p.word_qkv, e)

    def upd_r(keys, values):
        return np_linear(
            p.region_out, np.concatenate([r, np_heads_attend(rq, keys, values, heads)], -1)
        )

    def upd_e(keys, values):
        return np_linear(
            p.word_out, np.concatenate([e, np_heads_attend(eq, keys, values, heads)], -1)
        )

    if order == "parallel":
        return upd_r(ek, ev), upd_e(rk, rv)
    if order == "r_then_e":
        e_new = upd_e(rk, rv)
        return upd_r(np_linear(p.word_qkv.key, e_new), np_linear(p.word_qkv.value, e_new)), e_new
    r_new = upd_r(ek, ev)
    return r_new, upd_e(np_linear(p.region_qkv.key, r_new), np_linear(p.region_qkv.value, r_new))


def dyintra_oracle(r, e, p, heads):
    rq, rk, rv = np_qkv(p.region_qkv, r)
    eq, ek, ev = np_qkv(p.word_qkv, e)
    if p.dynamic:
        gate_r = np_sigmoid(np_linear(p.gate_from_words, e.mean(axis=0)))
        gate_e = np_sigmoid(np_linear(p.gate_from_regions, r.mean(axis=0)))
        rq, rk = rq * (1 + gate_r), rk * (1 + gate_r)
        eq, ek = eq * (1 + gate_e), ek * (1 + gate_e)
    r_new = np_linear(p.region_out, r + np_heads_attend(rq, rk, rv, heads))
    e_new = np_linear(p.word_out, e + np_heads_attend(eq, ek, ev, heads))
    return r_new, e_new


def rand_re(rng, mu=5, length=3, dim=8, batch=None):
    shape_r = (mu, dim) if batch is None else (batch, mu, dim)
    shape_e = (length, dim) if batch is None else (batch, length, dim)
    return Tensor(rng.standard_normal(shape_r)), Tensor(rng.standard_normal(shape_e))


# ---------------------------------------------------------------------------


class TestScaledDotAttention:
    def test_zero_queries_give_uniform_rows(self):
        q = Tensor(np.zeros((4, 6)))
        k = Tensor(np.random.default_rng(0).standard_normal((5, 6)))
        w = A.scaled_dot_attention(q, k).numpy()
        assert np.allclose(w, 0.2)

    def test_single_key_gives_weight_one(self):
        rng = np.random.default_rng(1)
        w = A.scaled_dot_attention(
            Tensor(rng.standard_normal((7, 3))), Tensor(rng.standard_normal((1, 3)))
        ).numpy()
        assert np.array_equal(w, np.ones((7, 1)))

    def test_sharp_limit_dominates_diagonal(self):
        c = 50.0
        qk = Tensor(np.eye(3) * c)
        w = A.scaled_dot_attention(qk, qk).numpy()
        assert np.all(np.diag(w) > 0.999)

    def test_scaling_uses_feature_width(self):
        rng = np.random.default_rng(2)
        q = rng.standard_normal((3, 4))
        k = rng.standard_normal((5, 4))
        w = A.scaled_dot_attention(Tensor(q), Tensor(k)).numpy()
        assert np.allclose(w, np_softmax(q @ k.T / 2.0), atol=1e-12)

    def test_width_mismatch_rejected(self):
        with pytest.raises(ShapeError):
            A.scaled_dot_attention(Tensor(np.ones((2, 3))), Tensor(np.ones((2, 4))))

    @settings(max_examples=50, deadline=None)
    @given(
        st.integers(1, 6),
        st.integers(1, 6),
        st.integers(1, 8),
        st.integers(0, 2**31 - 1),
    )
    def test_rows_are_distributions(self, a, b, d, seed):
        rng = np.random.default_rng(seed)
        w = A.scaled_dot_attention(
            Tensor(rng.standard_normal((a, d)) * 5), Tensor(rng.standard_normal((b, d)) * 5)
        ).numpy()
        assert np.all(w >= 0)
        assert np.allclose(w.sum(axis=-1), 1.0, atol=1e-9)


class TestMultiHead:
    def test_single_head_is_bit_exact_unsplit(self):
        rng = np.random.default_rng(3)
        q, k, v = (Tensor(rng.standard_normal((4, 8))) for _ in range(3))
        merged, weights = A.multi_head_apply(A.scaled_dot_attention, q, k, v, 1)
        direct = T.matmul(A.scaled_dot_attention(q, k), v)
        assert np.array_equal(merged.numpy(), direct.numpy())
        assert len(weights) == 1

    def test_two_heads_equal_independent_half_runs(self):
        rng = np.random.default_rng(4)
        q, k, v = (Tensor(rng.standard_normal((5, 8))) for _ in range(3))
        merged, weights = A.multi_head_apply(A.scaled_dot_attention, q, k, v, 2)
        halves = []
        for lo, hi in ((0, 4), (4, 8)):
            out_h, w_h = A.multi_head_apply(
                A.scaled_dot_attention,
                Tensor(q.data[:, lo:hi]),
                Tensor(k.data[:, lo:hi]),
                Tensor(v.data[:, lo:hi]),
                1,
            )
            halves.append((out_h.numpy(), w_h[0].numpy()))
        assert np.max(np.abs(merged.numpy() - np.concatenate([h[0] for h in halves], -1))) < 1e-10
        for got, (_, expect) in zip(weights, halves):
            assert np.max(np.abs(got.numpy() - expect)) < 1e-10

    def test_paper_scale_shapes(self):
        rng = np.random.default_rng(5)
        q = Tensor(rng.standard_normal((100, 512)))
        k = Tensor(rng.standard_normal((14, 512)))
        v = Tensor(rng.standard_normal((14, 512)))
        merged, weights = A.multi_head_apply(A.scaled_dot_attention, q, k, v, 8)
        assert merged.shape == (100, 512)
        assert len(weights) == 8
        assert all(w.shape == (100, 14) for w in weights)

    def test_indivisible_heads_rejected(self):
        q = Tensor(np.ones((2, 6)))
        with pytest.raises(ShapeError, match="6"):
            A.multi_head_apply(A.scaled_dot_attention, q, q, q, 4)


class TestComputeGates:
    def test_zero_features_zero_bias_give_half(self):
        rng = np.random.default_rng(6)
        layer = T.linear_init(4, 4, rng)
        g = A.compute_gates(Tensor(np.zeros((3, 4))), layer).numpy()
        assert np.allclose(g, 0.5)

    def test_duplicated_rows_leave_gates_unchanged(self):
        rng = np.random.default_rng(7)
        layer = T.linear_init(4, 4, rng)
        feats = rng.standard_normal((2, 4))
        g1 = A.compute_gates(Tensor(feats), layer).numpy()
        g2 = A.compute_gates(Tensor(np.tile(feats, (3, 1))), layer).numpy()
        assert np.allclose(g1, g2, atol=1e-12)

    def test_saturating_bias_drives_multiplier_to_two(self):
        layer = T.LinearLayer(
            Tensor(np.zeros((4, 4)), requires_grad=True),
            Tensor(np.full(4, 60.0), requires_grad=True),
        )
        g = A.compute_gates(Tensor(np.zeros((2, 4))), layer).numpy()
        assert np.all(g > 1 - 1e-12)
        assert np.all(1 + g < 2 + 1e-12)

    def test_open_interval(self):
        rng = np.random.default_rng(8)
        layer = T.linear_init(6, 6, rng)
        g = A.compute_gates(Tensor(rng.standard_normal((4, 6)) * 10), layer).numpy()
        assert np.all(g > 0) and np.all(g < 1)

    def test_empty_input_rejected(self):
        rng = np.random.default_rng(9)
        layer = T.linear_init(4, 4, rng)
        with pytest.raises(ShapeError):
            A.compute_gates(Tensor(np.zeros((0, 4))), layer)


class TestInterMaf:
    @pytest.mark.parametrize("order", A.ORDERS)
    @pytest.mark.parametrize("heads", [1, 2])
    def test_matches_composition_oracle(self, order, heads):
        rng = np.random.default_rng(10)
        p = A.init_inter_maf(8, rng)
        r, e = rand_re(rng, mu=3, length=2, dim=8)
        r_new, e_new = A.inter_maf_forward(r, e, p, heads=heads, order=order)
        er, ee = inter_oracle(r.data, e.data, p, heads, order)
        assert np.max(np.abs(r_new.numpy() - er)) < 1e-10
        assert np.max(np.abs(e_new.numpy() - ee)) < 1e-10

    def test_fixed_integer_weights_oracle(self):
        # Small deterministic parameters; asserts exact composed arithmetic.
        dim = 4

        def int_layer(i, o, fill, bias=0.25):
            w = np.full((i, o), 0.0)
            w[np.arange(min(i, o)), np.arange(min(i, o))] = fill
            return T.LinearLayer(
                Tensor(w, requires_grad=True),
                Tensor(np.full(o, bias), requires_grad=True),
            )

        p = A.InterMafParams(
            region_qkv=A.QkvProjection(int_layer(4, 4, 1.0), int_layer(4, 4, 2.0), int_layer(4, 4, 0.5)),
            word_qkv=A.QkvProjection(int_layer(4, 4, -1.0), int_layer(4, 4, 1.0), int_layer(4, 4, 3.0)),
            region_out=int_layer(8, 4, 1.0),
            word_out=int_layer(8, 4, -0.5),
        )
        r = Tensor(np.arange(12.0).reshape(3, 4) / 6.0)
        e = Tensor(np.array([[1.0, 0.0, -1.0, 2.0], [0.5, 0.5, 0.5, 0.5]]))
        r_new, e_new = A.inter_maf_forward(r, e, p, heads=1, order="parallel")
        er, ee = inter_oracle(r.data, e.data, p, 1, "parallel")
        assert np.max(np.abs(r_new.numpy() - er)) < 1e-10
        assert np.max(np.abs(e_new.numpy() - ee)) < 1e-10

    def test_single_word_attention_is_all_ones(self):
        rng = np.random.default_rng(11)
        p = A.init_inter_maf(6, rng)
        r, e = rand_re(rng, mu=4, length=1, dim=6)
        rec = A.AttentionRecord()
        A.inter_maf_forward(r, e, p, record=rec)
        assert np.array_equal(rec.inter_r_from_e[0], np.ones((4, 1)))

    def test_region_permutation_equivariance(self):
        rng = np.random.default_rng(12)
        p = A.init_inter_maf(8, rng)
        r, e = rand_re(rng, mu=6, length=3, dim=8)
        perm = rng.permutation(6)
        r_new, e_new = A.inter_maf_forward(r, e, p, order="parallel")
        r_p, e_p = A.inter_maf_forward(Tensor(r.data[perm]), e, p, order="parallel")
        assert np.max(np.abs(r_p.numpy() - r_new.numpy()[perm])) < 1e-12
        assert np.max(np.abs(e_p.numpy() - e_new.numpy())) < 1e-12

    def test_orders_differ_generically(self):
        rng = np.random.default_rng(13)
        p = A.init_inter_maf(8, rng)
        r, e = rand_re(rng, dim=8)
        outs = {o: A.inter_maf_forward(r, e, p, order=o)[0].numpy() for o in A.ORDERS}
        assert not np.allclose(outs["parallel"], outs["r_then_e"])
        assert not np.allclose(outs["r_then_e"], outs["e_then_r"])

    def test_batched_matches_per_slice(self):
        rng = np.random.default_rng(14)
        p = A.init_inter_maf(8, rng)
        r, e = rand_re(rng, mu=4, length=3, dim=8, batch=3)
        r_new, e_new = A.inter_maf_forward(r, e, p, heads=2, order="r_then_e")
        for i in range(3):
            ri, ei = A.inter_maf_forward(
                Tensor(r.data[i]), Tensor(e.data[i]), p, heads=2, order="r_then_e"
            )
            assert np.max(np.abs(r_new.numpy()[i] - ri.numpy())) < 1e-12
            assert np.max(np.abs(e_new.numpy()[i] - ei.numpy())) < 1e-12


class TestDyIntraMaf:
    @pytest.mark.parametrize("dynamic", [True, False])
    @pytest.mark.parametrize("heads", [1, 2])
    def test_matches_composition_oracle(self, dynamic, heads):
        rng = np.random.default_rng(15)
        p = A.init_dyintra_maf(8, rng, dynamic=dynamic)
        r, e = rand_re(rng, dim=8)
        r_new, e_new = A.dyintra_maf_forward(r, e, p, heads=heads)
        er, ee = dyintra_oracle(r.data, e.data, p, heads)
        assert np.max(np.abs(r_new.numpy() - er)) < 1e-10
        assert np.max(np.abs(e_new.numpy() - ee)) < 1e-10

    def test_hand_set_two_by_two_oracle(self):
        ident = lambda: T.LinearLayer(
            Tensor(np.eye(2), requires_grad=True), Tensor(np.zeros(2), requires_grad=True)
        )
        p = A.DyIntraMafParams(
            region_qkv=A.QkvProjection(ident(), ident(), ident()),
            word_qkv=A.QkvProjection(ident(), ident(), ident()),
            gate_from_regions=ident(),
            gate_from_words=ident(),
            region_out=ident(),
            word_out=ident(),
            dynamic=True,
        )
        r = Tensor(np.array([[1.0, 0.0], [0.0, 1.0]]))
        e = Tensor(np.array([[2.0, -1.0]]))
        r_new, e_new = A.dyintra_maf_forward(r, e, p)
        er, ee = dyintra_oracle(r.data, e.data, p, 1)
        assert np.max(np.abs(r_new.numpy() - er)) < 1e-10
        assert np.max(np.abs(e_new.numpy() - ee)) < 1e-10

    def test_word_perturbation_changes_dynamic_region_attention(self):
        rng = np.random.default_rng(16)
        p = A.init_dyintra_maf(8, rng, dynamic=True)
        r, e = rand_re(rng, dim=8)
        rec1, rec2 = A.AttentionRecord(), A.AttentionRecord()
        A.dyintra_maf_forward(r, e, p, record=rec1)
        e2 = Tensor(e.data + rng.standard_normal(e.shape) * 0.1)
        A.dyintra_maf_forward(r, e2, p, record=rec2)
        assert not np.array_equal(rec1.intra_r[0], rec2.intra_r[0])

    def test_naive_region_attention_ignores_words_bitwise(self):
        rng = np.random.default_rng(17)
        p = A.init_dyintra_maf(8, rng, dynamic=False)
        r, e = rand_re(rng, dim=8)
        rec1, rec2 = A.AttentionRecord(), A.AttentionRecord()
        A.dyintra_maf_forward(r, e, p, record=rec1)
        A.dyintra_maf_forward(r, Tensor(rng.standard_normal(e.shape) * 9), p, record=rec2)
        assert np.array_equal(rec1.intra_r[0], rec2.intra_r[0])
        assert rec1.gate_on_regions is None and rec1.gate_on_words is None

    def test_zero_pre_sigmoid_gates_preserve_argmax(self):
        # Gates fixed at sigmoid(0)=0.5 scale every q/k channel by 1.5: the
        # per-row attention argmax must match the ungated variant.
        rng = np.random.default_rng(18)
        p = A.init_dyintra_maf(8, rng, dynamic=True)
        p.gate_from_words.weight.data[:] = 0.0
        p.gate_from_words.bias.data[:] = 0.0
        p.gate_from_regions.weight.data[:] = 0.0
        p.gate_from_regions.bias.data[:] = 0.0
        naive = A.DyIntraMafParams(
            region_qkv=p.region_qkv,
            word_qkv=p.word_qkv,
            gate_from_regions=p.gate_from_regions,
            gate_from_words=p.gate_from_words,
            region_out=p.region_out,
            word_out=p.word_out,
            dynamic=False,
        )
        r, e = rand_re(rng, mu=6, length=4, dim=8)
        rec_d, rec_n = A.AttentionRecord(), A.AttentionRecord()
        A.dyintra_maf_forward(r, e, p, record=rec_d)
        A.dyintra_maf_forward(r, e, naive, record=rec_n)
        assert np.array_equal(
            rec_d.intra_r[0].argmax(axis=-1), rec_n.intra_r[0].argmax(axis=-1)
        )
        assert np.array_equal(
            rec_d.intra_e[0].argmax(axis=-1), rec_n.intra_e[0].argmax(axis=-1)
        )
        assert np.allclose(rec_d.gate_on_regions, 0.5)

    def test_values_are_not_gated(self):
        # With q/k projections zeroed, attention is uniform regardless of the
        # gates, so dynamic and naive variants agree exactly: any difference
        # would have to enter through gated values, which must not exist.
        rng = np.random.default_rng(19)
        p_dyn = A.init_dyintra_maf(8, rng, dynamic=True)
        for qkv in (p_dyn.region_qkv, p_dyn.word_qkv):
            qkv.query.weight.data[:] = 0.0
            qkv.query.bias.data[:] = 0.0
            qkv.key.weight.data[:] = 0.0
            qkv.key.bias.data[:] = 0.0
        r, e = rand_re(rng, dim=8)
        r_dyn, e_dyn = A.dyintra_maf_forward(r, e, p_dyn)
        p_dyn.dynamic = False
        r_nv, e_nv = A.dyintra_maf_forward(r, e, p_dyn)
        assert np.array_equal(r_dyn.numpy(), r_nv.numpy())
        assert np.array_equal(e_dyn.numpy(), e_nv.numpy())

    def test_batched_matches_per_slice(self):
        rng = np.random.default_rng(20)
        p = A.init_dyintra_maf(8, rng, dynamic=True)
        r, e = rand_re(rng, mu=4, length=3, dim=8, batch=2)
        r_new, e_new = A.dyintra_maf_forward(r, e, p, heads=2)
        for i in range(2):
            ri, ei = A.dyintra_maf_forward(Tensor(r.data[i]), Tensor(e.data[i]), p, heads=2)
            assert np.max(np.abs(r_new.numpy()[i] - ri.numpy())) < 1e-12
            assert np.max(np.abs(e_new.numpy()[i] - ei.numpy())) < 1e-12


class TestDfafBlock:
    def test_paper_scale_shapes_preserved(self):
        rng = np.random.default_rng(21)
        block = A.init_dfaf_block(512, 8, rng)
        r, e = rand_re(rng, mu=100, length=14, dim=512)
        rec = A.AttentionRecord()
        r_new, e_new = A.dfaf_block_forward(r, e, block, record=rec)
        assert r_new.shape == (100, 512) and e_new.shape == (14, 512)
        assert all(w.shape == (100, 14) for w in rec.inter_r_from_e)
        assert all(w.shape == (14, 100) for w in rec.inter_e_from_r)
        assert all(w.shape == (100, 100) for w in rec.intra_r)
        assert all(w.shape == (14, 14) for w in rec.intra_e)
        assert len(rec.intra_r) == 8

    def test_region_permutation_equivariance(self):
        rng = np.random.default_rng(22)
        block = A.init_dfaf_block(8, 2, rng)
        r, e = rand_re(rng, mu=7, length=4, dim=8)
        perm = rng.permutation(7)
        r_new, e_new = A.dfaf_block_forward(r, e, block)
        r_p, e_p = A.dfaf_block_forward(Tensor(r.data[perm]), e, block)
        assert np.max(np.abs(r_p.numpy() - r_new.numpy()[perm])) < 1e-12
        assert np.max(np.abs(e_p.numpy() - e_new.numpy())) < 1e-12

    def test_word_permutation_equivariance(self):
        rng = np.random.default_rng(23)
        block = A.init_dfaf_block(8, 2, rng)
        r, e = rand_re(rng, mu=4, length=5, dim=8)
        perm = rng.permutation(5)
        r_new, e_new = A.dfaf_block_forward(r, e, block)
        r_p, e_p = A.dfaf_block_forward(r, Tensor(e.data[perm]), block)
        assert np.max(np.abs(e_p.numpy() - e_new.numpy()[perm])) < 1e-12
        assert np.max(np.abs(r_p.numpy() - r_new.numpy())) < 1e-12

    @pytest.mark.parametrize("attention_type", A.ATTENTION_TYPES)
    def test_every_parameter_gradient_matches_finite_differences(self, attention_type):
        rng = np.random.default_rng(24)
        block = A.init_dfaf_block(8, 2, rng, attention_type=attention_type)
        r, e = rand_re(rng, mu=3, length=2, dim=8)
        weights = rng.standard_normal((3, 8)), rng.standard_normal((2, 8))

        with GradTape() as tape:
            r_new, e_new = A.dfaf_block_forward(r, e, block)
            loss = T.add(
                T.sum_all(T.mul(r_new, Tensor(weights[0]))),
                T.sum_all(T.mul(e_new, Tensor(weights[1]))),
            )
        backward(tape, loss)

        names = [n for n, _ in block.named_parameters()]
        params = [p for _, p in block.named_parameters()]

        def f(ps):
            rn, en = A.dfaf_block_forward(r, e, block)
            return float((rn.data * weights[0]).sum() + (en.data * weights[1]).sum())

        fd = T.finite_diff_gradient(f, params)
        for name, p, g in zip(names, params, fd):
            analytic = p.grad if p.grad is not None else np.zeros_like(p.data)
            err = T.relative_error(analytic, g)
            assert err < 1e-4, f"{attention_type}:{name} rel err {err:.2e}"

    def test_width_mismatch_rejected(self):
        rng = np.random.default_rng(25)
        block = A.init_dfaf_block(8, 2, rng)
        with pytest.raises(ShapeError, match="width 8"):
            A.dfaf_block_forward(Tensor(np.ones((3, 6))), Tensor(np.ones((2, 8))), block)

    def test_attention_type_roundtrip(self):
        rng = np.random.default_rng(26)
        for kind in A.ATTENTION_TYPES:
            block = A.init_dfaf_block(8, 2, rng, attention_type=kind)
            assert block.attention_type == kind

    def test_train_mode_dropout_changes_outputs_eval_does_not(self):
        rng = np.random.default_rng(27)
        block = A.init_dfaf_block(8, 1, rng)
        r, e = rand_re(rng, dim=8)
        ctx = A.ForwardContext("train", 0.5, np.random.default_rng(0))
        r_tr, _ = A.dfaf_block_forward(r, e, block, ctx=ctx)
        r_ev1, _ = A.dfaf_block_forward(r, e, block)
        r_ev2, _ = A.dfaf_block_forward(r, e, block)
        assert not np.allclose(r_tr.numpy(), r_ev1.numpy())
        assert np.array_equal(r_ev1.numpy(), r_ev2.numpy())


class TestDfafStack:
    def test_single_block_stack_equals_block(self):
        rng = np.random.default_rng(28)
        block = A.init_dfaf_block(8, 2, rng)
        r, e = rand_re(rng, dim=8)
        r_s, e_s = A.dfaf_stack_forward(r, e, [block])
        r_b, e_b = A.dfaf_block_forward(r, e, block)
        assert np.array_equal(r_s.numpy(), r_b.numpy())
        assert np.array_equal(e_s.numpy(), e_b.numpy())

    def test_records_one_per_block_rows_normalized(self):
        rng = np.random.default_rng(29)
        blocks = A.init_dfaf_stack(8, 2, 3, rng)
        r, e = rand_re(rng, dim=8)
        records = []
        A.dfaf_stack_forward(r, e, blocks, records=records)
        assert len(records) == 3
        for rec in records:
            seen = 0
            for _, _, w in rec.matrices():
                assert np.all(w >= 0)
                assert np.allclose(w.sum(axis=-1), 1.0, atol=1e-6)
                seen += 1
            assert seen == 4 * 2  # four matrix families, two heads
            assert np.all((rec.gate_on_regions > 0) & (rec.gate_on_regions < 1))
            assert np.all((rec.gate_on_words > 0) & (rec.gate_on_words < 1))

    def test_deep_stack_survives_sgd_steps(self):
        rng = np.random.default_rng(30)
        blocks = A.init_dfaf_stack(8, 2, 8, rng)
        params = [p for b in blocks for _, p in b.named_parameters()]
        r, e = rand_re(rng, mu=4, length=3, dim=8)
        for _ in range(100):
            with GradTape() as tape:
                r_new, e_new = A.dfaf_stack_forward(r, e, blocks)
                loss = T.add(
                    T.sum_all(T.mul(r_new, r_new)), T.sum_all(T.mul(e_new, e_new))
                )
            assert math.isfinite(loss.item())
            for p in params:
                p.zero_grad()
            backward(tape, loss)
            for p in params:
                if p.grad is not None:
                    assert np.all(np.isfinite(p.grad))
                    p.data -= 1e-3 * p.grad
        assert math.isfinite(loss.item())

    def test_empty_stack_rejected(self):
        with pytest.raises(ValueError):
            A.dfaf_stack_forward(Tensor(np.ones((2, 4))), Tensor(np.ones((2, 4))), [])

    def test_mixed_width_stack_rejected(self):
        rng = np.random.default_rng(31)
        blocks = [A.init_dfaf_block(8, 2, rng), A.init_dfaf_block(4, 2, rng)]
        with pytest.raises(ShapeError):
            A.dfaf_stack_forward(Tensor(np.ones((2, 8))), Tensor(np.ones((2, 8))), blocks)


class TestBuilders:
    def test_parameter_names_are_stable_and_unique(self):
        rng = np.random.default_rng(32)
        block = A.init_dfaf_block(8, 2, rng)
        names = [n for n, _ in block.named_parameters()]
        assert len(names) == len(set(names))
        assert "inter.region_qkv.query.weight" in names
        assert "intra.gate_from_words.bias" in names
        # full block: inter has 8 layers, intra has 10, two tensors each
        assert len(names) == (8 + 10) * 2

    def test_head_dim_invariant_enforced(self):
        rng = np.random.default_rng(33)
        with pytest.raises(ShapeError):
            A.init_dfaf_block(8, 3, rng)

    def test_bad_attention_type_rejected(self):
        rng = np.random.default_rng(34)
        with pytest.raises(ValueError, match="attention_type"):
            A.init_dfaf_block(8, 2, rng, attention_type="extra_only")

    def test_bad_order_rejected(self):
        rng = np.random.default_rng(35)
        with pytest.raises(ValueError, match="order"):
            A.init_dfaf_block(8, 2, rng, order="sideways")

    def test_context_mode_validated(self):
        with pytest.raises(ValueError):
            A.ForwardContext(mode="test")
