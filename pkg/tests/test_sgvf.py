import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis.extra.numpy import arrays
from hypothesis import strategies as st

from zsfuse import nn
from zsfuse import tensor as T
from zsfuse.sgvf import (apply_sgvf, compute_gates, concat_baseline, cross_attention_variant, fuse, init_sgvf,
                         modality_weights, sgvf_forward, sgvf_plus_self_attention_variant)
from zsfuse.tensor import DimensionError, Tensor, grad_check_params

D, H = 16, 4


@pytest.fixture
def rng():
    return np.random.default_rng(31)


def feats(rng, n, grad=True):
    return Tensor(rng.standard_normal((n, D)), requires_grad=grad)


def all_params(p):
    return [t for _, t in nn.named_parameters(p)]


class TestComputeGates:
    def test_shapes(self, rng):
        p = init_sgvf(rng, D, H)
        w3, w2 = compute_gates(p, feats(rng, 3), feats(rng, 8), feats(rng, 8))
        assert w3.shape == (8, D) and w2.shape == (8, D)

    def test_default_dims(self, rng):
        p = init_sgvf(rng)
        assert p.gate_mha_3d.dim == 128 and p.gate_mha_3d.heads == 4
        assert p.fuse_mlp.layers[0].d_in == 256

    def test_single_class_gates_constant(self, rng):
        p = init_sgvf(rng, D, H)
        w3, w2 = compute_gates(p, feats(rng, 1), feats(rng, 6), feats(rng, 6))
        for w in (w3, w2):
            np.testing.assert_allclose(w.data, np.broadcast_to(w.data[0], w.shape), atol=1e-12)

    def test_point_permutation(self, rng):
        p = init_sgvf(rng, D, H)
        F_es, F_el, F_ei = feats(rng, 3), rng.standard_normal((6, D)), rng.standard_normal((6, D))
        perm = rng.permutation(6)
        a = compute_gates(p, F_es, Tensor(F_el), Tensor(F_ei))
        b = compute_gates(p, F_es, Tensor(F_el[perm]), Tensor(F_ei[perm]))
        for x, y in zip(a, b):
            np.testing.assert_allclose(y.data, x.data[perm], atol=1e-12)

    def test_gradient_wrt_semantics(self, rng):
        p = init_sgvf(rng, D, H)
        F_es, F_el, F_ei = feats(rng, 3), feats(rng, 5), feats(rng, 5)
        R = Tensor(rng.standard_normal((5, D)))

        def readout():
            w3, w2 = compute_gates(p, F_es, F_el, F_ei)
            return T.add(T.reduce_sum(T.mul(w3, R)), T.reduce_sum(T.mul(w2, w2)))

        assert grad_check_params(readout, [F_es]) <= 1e-4

    def test_no_classes(self, rng):
        with pytest.raises(DimensionError):
            compute_gates(init_sgvf(rng, D, H), Tensor(np.zeros((0, D))), feats(rng, 2), feats(rng, 2))


class TestFuse:
    def test_symmetric_scores_split_evenly(self, rng):
        F = feats(rng, 4)
        w = feats(rng, 4)
        a3, a2 = modality_weights(w, w, F, F)
        np.testing.assert_allclose(a3.data, 0.5, atol=1e-15)
        np.testing.assert_allclose(a2.data, 0.5, atol=1e-15)

    def test_masking_limit(self, rng):
        p = init_sgvf(rng, D, H)
        w3, w2, F_el, F_ei = (feats(rng, 4) for _ in range(4))
        valid = np.array([True, False, True, False])
        a3, a2 = modality_weights(w3, w2, F_el, F_ei, valid)
        assert a2.data[0, ~valid].max() < 1e-12
        np.testing.assert_allclose(a3.data[0, ~valid], 1.0, atol=1e-12)
        out = fuse(p, w3, w2, F_el, F_ei, valid).data
        zeros = Tensor(np.zeros((4, D)))
        ref = nn.mlp(p.fuse_mlp, T.concat([F_el, zeros], axis=1)).data
        np.testing.assert_allclose(out[~valid], ref[~valid], atol=1e-9)

    def test_gradient_t8(self, rng):
        p = init_sgvf(rng, D, H)
        w3, w2, F_el, F_ei = (feats(rng, 8) for _ in range(4))
        valid = np.array([True] * 6 + [False] * 2)
        R = Tensor(rng.standard_normal((8, D)))
        err = grad_check_params(lambda: T.reduce_sum(T.mul(fuse(p, w3, w2, F_el, F_ei, valid), R)),
                                [w3, w2, F_el, F_ei] + all_params(p))
        assert err <= 1e-4

    def test_full_pipeline_gradient(self, rng):
        p = init_sgvf(rng, D, H)
        F_es, F_el, F_ei = feats(rng, 3), feats(rng, 6), feats(rng, 6)
        R = Tensor(rng.standard_normal((6, D)))
        err = grad_check_params(lambda: T.reduce_sum(T.mul(sgvf_forward(p, F_es, F_el, F_ei), R)),
                                [F_es, F_el, F_ei] + all_params(p))
        assert err <= 1e-4

    def test_pipeline_equivariance(self, rng):
        p = init_sgvf(rng, D, H)
        F_es, F_el, F_ei = feats(rng, 3), rng.standard_normal((6, D)), rng.standard_normal((6, D))
        valid = np.array([True, False, True, True, True, False])
        perm = rng.permutation(6)
        a = sgvf_forward(p, F_es, Tensor(F_el), Tensor(F_ei), valid).data
        b = sgvf_forward(p, F_es, Tensor(F_el[perm]), Tensor(F_ei[perm]), valid[perm]).data
        np.testing.assert_allclose(b, a[perm], atol=1e-12)

    def test_shape_mismatch(self, rng):
        with pytest.raises(DimensionError):
            modality_weights(feats(rng, 3), feats(rng, 4), feats(rng, 3), feats(rng, 3))

    @settings(max_examples=40, deadline=None)
    @given(arrays(np.float64, (4, 4, 3), elements=st.floats(-50, 50)))
    def test_property_slices_sum_to_one(self, x):
        w3, w2, F_el, F_ei = (Tensor(x[i]) for i in range(4))
        a3, a2 = modality_weights(w3, w2, F_el, F_ei)
        assert np.abs(a3.data + a2.data - 1.0).max() <= 1e-12


class TestBaselines:
    def test_concat_shape_and_semantics_free(self, rng):
        p = init_sgvf(rng, D, H, variant="concat_baseline")
        F_el, F_ei = feats(rng, 5), feats(rng, 5)
        out = apply_sgvf(p, feats(rng, 3), F_el, F_ei)
        assert out.shape == (5, D)
        np.testing.assert_array_equal(out.data, apply_sgvf(p, feats(rng, 7), F_el, F_ei).data)
        np.testing.assert_array_equal(out.data, concat_baseline(p, F_el, F_ei).data)

    def test_concat_gradient(self, rng):
        p = init_sgvf(rng, D, H, variant="concat_baseline")
        F_el, F_ei = feats(rng, 5), feats(rng, 5)
        R = Tensor(rng.standard_normal((5, D)))
        err = grad_check_params(lambda: T.reduce_sum(T.mul(concat_baseline(p, F_el, F_ei), R)),
                                [F_el, F_ei] + all_params(p))
        assert err <= 1e-4

    def test_cross_attention_variant(self, rng):
        p = init_sgvf(rng, D, H, variant="cross_attention_only")
        F_el, F_ei = feats(rng, 5), feats(rng, 5)
        out = cross_attention_variant(p, F_el, F_ei)
        assert out.shape == (5, D)
        np.testing.assert_array_equal(out.data, apply_sgvf(p, feats(rng, 2), F_el, F_ei).data)
        assert np.abs(out.data - concat_baseline(p, F_el, F_ei).data).max() > 1e-6

    def test_sgvf_plus_self_attention(self, rng):
        p = init_sgvf(rng, D, H, variant="sgvf_plus_self_attention", td_hidden=2 * D)
        F_es, F_el, F_ei = feats(rng, 3), feats(rng, 5), feats(rng, 5)
        assert sgvf_plus_self_attention_variant(p, F_es, F_el, F_ei).shape == (5, D)
        R = Tensor(rng.standard_normal((5, D)))
        err = grad_check_params(
            lambda: T.reduce_sum(T.mul(sgvf_plus_self_attention_variant(p, F_es, F_el, F_ei), R)), all_params(p))
        assert err <= 1e-4

    def test_sgvf_plus_self_attention_reduces_to_fuse(self, rng):
        p = init_sgvf(rng, D, H, variant="sgvf_plus_self_attention", td_hidden=2 * D)
        blk = p.self_block
        blk.attn.wv.weight.data[:] = 0
        blk.mlp.layers[-1].weight.data[:] = 0
        for ln in (blk.ln1, blk.ln2):
            ln.gamma.data[:] = 1.0
        blk.out.weight.data[:] = np.eye(D)
        F_es, F_el, F_ei = feats(rng, 3), feats(rng, 5), feats(rng, 5)
        fused = sgvf_forward(p, F_es, F_el, F_ei)
        out = sgvf_plus_self_attention_variant(p, F_es, F_el, F_ei)
        ln = lambda x: nn.layer_norm(blk.ln2, nn.layer_norm(blk.ln1, x))  # noqa: E731
        np.testing.assert_allclose(out.data, ln(fused).data, atol=1e-12)

    def test_point_only_when_image_missing(self, rng):
        p = init_sgvf(rng, D, H)
        F_el = feats(rng, 4)
        out = apply_sgvf(p, feats(rng, 3), F_el, None)
        ref = nn.mlp(p.fuse_mlp, T.concat([F_el, Tensor(np.zeros((4, D)))], axis=1))
        np.testing.assert_array_equal(out.data, ref.data)

    def test_unknown_variant(self, rng):
        with pytest.raises(ValueError):
            init_sgvf(rng, D, H, variant="late_fusion")
