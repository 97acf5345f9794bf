"""Detector, attention pooling and expert comparator."""

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays

from dcn import tensor as T
from dcn.attend import DescriptorSet, attend_pool, attention_overlays, describe, recalibrate, save_overlays, self_normalize
from dcn.compare import (
    ExpertParams,
    SimilarityOutput,
    build_expert_input,
    compare_logits,
    compare_templates,
    expert_width,
)
from dcn.detect import DetectParams, detect_forward
from dcn.tensor import Tensor


@pytest.fixture(scope="module")
def det():
    return DetectParams.init(np.random.default_rng(0), (8, 8, 16), k=4, dtype=np.float64)


@pytest.fixture
def rng():
    return np.random.default_rng(5)


# --------------------------------------------------------------------------
# detect
# --------------------------------------------------------------------------


def test_stride_eight_maps(det, rng):
    m = detect_forward(rng.random((2, 48, 48, 3)), det)
    assert m.F.shape == (2, 6, 6, 16)
    assert m.A.shape == (2, 6, 6, 4) and m.G.shape == (2, 6, 6, 1)
    assert m.scores.shape == (2, 6, 6, 5)


def test_weight_sharing_across_images(det, rng):
    x = rng.random((48, 48, 3))
    m = detect_forward(np.stack([x, x, x]), det)
    for n in (1, 2):
        assert np.array_equal(m.F.data[n], m.F.data[0])
        assert np.array_equal(m.A.data[n], m.A.data[0])


def test_global_map_is_channel_max(det, rng):
    m = detect_forward(rng.random((2, 48, 48, 3)), det)
    A, G = m.A.data, m.G.data
    assert np.all(G >= A)
    np.testing.assert_array_equal(G[..., 0], A.max(axis=-1))


def test_detect_rejects_mixed_sizes(det, rng):
    with pytest.raises(ValueError, match="mixed"):
        detect_forward([rng.random((48, 48, 3)), rng.random((40, 40, 3))], det)


# --------------------------------------------------------------------------
# attend
# --------------------------------------------------------------------------


@settings(max_examples=50, deadline=None)
@given(st.sampled_from([1, 2, 3, 5]), st.integers(0, 2**31 - 1))
def test_recalibrated_mass_is_one(n, seed):
    maps = np.random.default_rng(seed).normal(0, 5, (n, 6, 6, 13))
    mass = recalibrate(Tensor(maps)).data.sum(axis=(0, 1, 2))
    assert np.all(np.abs(mass - 1) <= 1e-6)


def test_recalibrate_single_image_is_spatial_softmax(rng):
    maps = rng.standard_normal((1, 4, 4, 3))
    np.testing.assert_allclose(recalibrate(Tensor(maps)).data, self_normalize(Tensor(maps)).data, atol=1e-15)


def test_recalibrate_identical_images_split_mass(rng):
    one = rng.standard_normal((4, 4, 3))
    r = recalibrate(Tensor(np.stack([one] * 3))).data
    np.testing.assert_allclose(r.sum(axis=(1, 2)), 1 / 3, atol=1e-12)


def test_recalibrate_batched_matches_per_template(rng):
    maps = rng.standard_normal((2, 3, 4, 4, 5))
    batched = recalibrate(Tensor(maps)).data
    for t in range(2):
        np.testing.assert_allclose(batched[t], recalibrate(Tensor(maps[t])).data, atol=1e-15)


def test_pool_one_hot_selects_cell(rng):
    F = rng.standard_normal((3, 3, 3, 4))
    A = np.zeros((3, 3, 3, 2))
    A[2, 1, 0, 0] = 1
    A[0, 2, 2, 1] = 1
    v = attend_pool(Tensor(F), Tensor(A)).vectors.data
    np.testing.assert_array_equal(v[0], F[2, 1, 0])
    np.testing.assert_array_equal(v[1], F[0, 2, 2])


def test_pool_uniform_is_mean(rng):
    F = rng.standard_normal((2, 3, 3, 4))
    A = np.full((2, 3, 3, 1), 1 / 18)
    np.testing.assert_allclose(attend_pool(Tensor(F), Tensor(A)).vectors.data[0], F.mean(axis=(0, 1, 2)), atol=1e-12)


def test_pool_matches_triple_loop(rng):
    F = rng.standard_normal((2, 3, 3, 4))
    A = rng.random((2, 3, 3, 3))
    oracle = np.zeros((3, 4))
    for k in range(3):
        for n in range(2):
            for i in range(3):
                for j in range(3):
                    oracle[k] += F[n, i, j] * A[n, i, j, k]
    np.testing.assert_allclose(attend_pool(Tensor(F), Tensor(A)).vectors.data, oracle, atol=1e-6)


def test_pool_shape_mismatch(rng):
    with pytest.raises(T.ShapeError):
        attend_pool(Tensor(np.zeros((2, 3, 3, 4))), Tensor(np.zeros((1, 3, 3, 2))))


def test_self_normalize_cases(rng):
    p = self_normalize(Tensor(rng.normal(0, 3, (3, 6, 6, 4)))).data
    np.testing.assert_allclose(p.sum(axis=(1, 2)), 1, atol=1e-6)
    np.testing.assert_allclose(self_normalize(Tensor(np.zeros((1, 6, 6, 2)))).data, 1 / 36)
    x = rng.standard_normal((2, 4, 4, 3))
    np.testing.assert_array_equal(self_normalize(Tensor(x)).data[:1], self_normalize(Tensor(x[:1])).data)


def test_describe_duplicate_collapse(det, rng):
    x = rng.random((48, 48, 3))
    single = describe(detect_forward(x[None], det)).vectors.data
    triple = describe(detect_forward(np.stack([x, x, x]), det)).vectors.data
    np.testing.assert_allclose(triple, single, atol=1e-10)


def test_descriptor_set_validation():
    with pytest.raises(T.ShapeError):
        DescriptorSet(Tensor(np.zeros(3)))
    d = DescriptorSet(Tensor(np.ones((5, 2))))
    assert d.k == 4 and d.width == 2


def test_overlays(tmp_path, rng):
    img = rng.random((48, 48, 3))
    maps = rng.standard_normal((6, 6, 5))
    ovs = attention_overlays(img, maps)
    assert len(ovs) == 5 and all(o.shape == (48, 48, 3) and o.dtype == np.uint8 for o in ovs)
    paths = save_overlays(img[None].repeat(2, 0), maps[None].repeat(2, 0), tmp_path)
    assert len(paths) == 10 and all(p.exists() for p in paths)


# --------------------------------------------------------------------------
# compare
# --------------------------------------------------------------------------


def test_expert_widths():
    assert expert_width(1024, 12) == 2061
    assert expert_width(64, 12) == 141


def test_expert_input_identifier():
    x = build_expert_input(np.ones(3), 2 * np.ones(3), 0, 4)
    assert x.shape == (11,)
    np.testing.assert_array_equal(x[6:], [1, 0, 0, 0, 0])
    with pytest.raises(ValueError):
        build_expert_input(np.ones(3), np.ones(3), 5, 4)


def _expert(rng, c, k, e):
    return ExpertParams.init(rng, c, k, e, np.float64)


def test_compare_matches_loop_oracle(rng):
    k, c, e = 2, 3, 4
    p = _expert(rng, c, k, e)
    p.expert_b.data[:] = rng.standard_normal(e)
    p.cls_b.data[:] = rng.standard_normal(2)
    d1, d2 = rng.standard_normal((1, k + 1, c)), rng.standard_normal((1, k + 1, c))
    hidden = []
    for j in range(k + 1):
        x = build_expert_input(d1[0, j], d2[0, j], j, k)
        hidden.append(np.maximum(x @ p.expert_w.data + p.expert_b.data, 0))
    oracle = np.max(hidden, axis=0) @ p.cls_w.data + p.cls_b.data
    np.testing.assert_allclose(compare_logits(Tensor(d1), Tensor(d2), p).data[0], oracle, atol=1e-6)


def test_equal_expert_outputs_pool_to_common_vector(rng):
    k, c, e = 3, 2, 5
    p = _expert(rng, c, k, e)
    p.expert_w.data[2 * c :] = 0  # identifier has no effect
    d = np.tile(rng.standard_normal(c), (1, k + 1, 1))
    h = np.maximum(np.concatenate([d[0, 0], d[0, 0]]) @ p.expert_w.data[: 2 * c] + p.expert_b.data, 0)
    np.testing.assert_allclose(compare_logits(Tensor(d), Tensor(d), p).data[0], h @ p.cls_w.data, atol=1e-12)


@settings(max_examples=30, deadline=None)
@given(arrays(np.float64, (2, 4, 3), elements=st.floats(-10, 10)))
def test_eval_score_symmetric(v):
    p = _expert(np.random.default_rng(0), 3, 3, 6)
    a, b = DescriptorSet(Tensor(v[0])), DescriptorSet(Tensor(v[1]))
    assert np.array_equal(compare_templates(a, b, p).logits, compare_templates(b, a, p).logits)


def test_train_mode_needs_rng_and_picks_an_order(rng):
    p = _expert(rng, 3, 2, 4)
    a, b = DescriptorSet(Tensor(rng.standard_normal((3, 3)))), DescriptorSet(Tensor(rng.standard_normal((3, 3))))
    with pytest.raises(ValueError):
        compare_templates(a, b, p, mode="train")
    ab = compare_logits(T.reshape(a.normalized(), (1, 3, 3)), T.reshape(b.normalized(), (1, 3, 3)), p).data[0]
    ba = compare_logits(T.reshape(b.normalized(), (1, 3, 3)), T.reshape(a.normalized(), (1, 3, 3)), p).data[0]
    seen = {tuple(compare_templates(a, b, p, "train", rng).logits) for _ in range(20)}
    assert seen == {tuple(ab), tuple(ba)}


def test_compare_row_mismatch(rng):
    p = _expert(rng, 3, 2, 4)
    with pytest.raises(T.ShapeError):
        compare_templates(DescriptorSet(Tensor(np.ones((3, 3)))), DescriptorSet(Tensor(np.ones((4, 3)))), p)


def test_similarity_output():
    s = SimilarityOutput(np.array([0.0, np.log(3.0)]))
    assert s.probability_same == pytest.approx(0.75)
    assert s.margin == pytest.approx(np.log(3.0))


def test_compare_grad(rng):
    p = _expert(rng, 3, 2, 4)
    d1, d2 = rng.standard_normal((2, 3, 3)), rng.standard_normal((2, 3, 3))

    def f(w, b, d1, d2):
        q = ExpertParams(w, b, p.cls_w, p.cls_b)
        return compare_logits(T.l2_normalize(d1), T.l2_normalize(d2), q)

    assert T.grad_check(f, [p.expert_w.data, rng.standard_normal(4), d1, d2]) < 1e-5
