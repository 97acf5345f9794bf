import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from dcn import tensor as T
from dcn.attend import self_normalize
from dcn.objectives import (
    ClassifierParams,
    KeypointTarget,
    LossSchedule,
    diversity_loss,
    keypoint_loss,
    keypoint_target,
    pose_channels,
    template_cls_loss,
    total_loss,
)
from dcn.synth import Pose
from dcn.tensor import Tensor

K = 12


def one_hot_maps(cells, n=1, h=6, w=6):
    p = np.zeros((n, h, w, len(cells)))
    for k, (i, j) in enumerate(cells):
        p[:, i, j, k] = 1
    return p


# --------------------------------------------------------------------------
# diversity
# --------------------------------------------------------------------------


def test_diversity_disjoint_one_hots_zero():
    cells = [(k // 6, k % 6) for k in range(K)]
    assert diversity_loss(Tensor(one_hot_maps(cells))).item() == 0.0


@pytest.mark.parametrize("n", [1, 3])
def test_diversity_uniform_maps(n):
    p = np.full((n, 6, 6, K), 1 / 36)
    assert abs(diversity_loss(Tensor(p)).item() - n * (K - 1)) <= 1e-6


def test_diversity_shared_cell():
    assert diversity_loss(Tensor(one_hot_maps([(2, 2)] * K))).item() == pytest.approx(11.0)


@settings(max_examples=40, deadline=None)
@given(st.integers(1, 3), st.integers(0, 2**31 - 1))
def test_diversity_bounds(n, seed):
    p = self_normalize(Tensor(np.random.default_rng(seed).normal(0, 4, (n, 6, 6, K))))
    v = diversity_loss(p).item()
    assert -1e-9 <= v < n * K


def test_diversity_batched_average():
    rng = np.random.default_rng(0)
    p = self_normalize(Tensor(rng.standard_normal((2, 3, 6, 6, K)))).data
    per = [diversity_loss(Tensor(p[t])).item() for t in range(2)]
    assert diversity_loss(Tensor(p)).item() == pytest.approx(np.mean(per), abs=1e-12)


def test_diversity_grad():
    rng = np.random.default_rng(1)
    assert T.grad_check(lambda a: diversity_loss(self_normalize(a)), [rng.standard_normal((2, 3, 3, 4))]) < 1e-6


# --------------------------------------------------------------------------
# keypoints
# --------------------------------------------------------------------------


def test_pose_channel_assignment():
    assert pose_channels(Pose.LEFT_PROFILE) == [0, 1, 2, 3]
    assert pose_channels(Pose.FRONTAL) == [4, 5, 6, 7]
    assert pose_channels(Pose.RIGHT_PROFILE) == [8, 9, 10, 11]


def test_keypoint_target_structure():
    kp = np.array([[[10, 12], [30, 12], [20, 25], [20, 35]], [[-1, -1], [30, 12], [20, 25], [20, 35]]], float)
    t = keypoint_target(kp, [Pose.FRONTAL, Pose.LEFT_PROFILE], (6, 6))
    assert t.active[0].tolist() == [False] * 4 + [True] * 4 + [False] * 4
    assert t.active[1].tolist() == [False, True, True, True] + [False] * 8
    sums = t.p_hat.sum(axis=(1, 2))
    np.testing.assert_allclose(sums[t.active], 1.0)
    assert not sums[~t.active].any()
    # peak sits in the keypoint's stride-8 cell
    i, j = np.unravel_index(np.argmax(t.p_hat[0, :, :, 6]), (6, 6))
    assert (i, j) == (25 // 8, 20 // 8)


def test_keypoint_target_needs_twelve_channels():
    with pytest.raises(ValueError):
        keypoint_target(np.zeros((1, 4, 2)), [Pose.FRONTAL], (6, 6), k=8)


@pytest.fixture
def target():
    kp = np.array([[[10, 12], [30, 12], [20, 25], [20, 35]]], float)
    return keypoint_target(kp, [Pose.FRONTAL], (6, 6))


def test_keypoint_loss_zero_at_target(target):
    assert keypoint_loss(Tensor(target.p_hat.copy()), target).item() == 0.0


def test_keypoint_loss_ignores_inactive(target):
    p = target.p_hat.copy()
    p[..., 0] = np.random.default_rng(0).random((1, 6, 6)) * 100
    p[..., 11] = -7
    assert keypoint_loss(Tensor(p), target).item() == 0.0


def test_keypoint_loss_delta_squared(target):
    p = target.p_hat.copy()
    d = 0.125
    p[0, 1, 1, 4] += d
    p[0, 4, 4, 4] -= d
    assert keypoint_loss(Tensor(p), target).item() == pytest.approx(d * d, abs=1e-15)


def test_keypoint_grad_zero_on_inactive(target):
    rng = np.random.default_rng(3)
    p = Tensor(rng.random((1, 6, 6, K)), requires_grad=True)
    keypoint_loss(p, target).backward()
    assert np.max(np.abs(p.grad[..., ~target.active[0]])) <= 1e-10
    assert np.abs(p.grad[..., target.active[0]]).max() > 0
    assert T.grad_check(lambda x: keypoint_loss(x, target), [rng.random((1, 6, 6, K))]) < 1e-6


def test_keypoint_loss_shape_check(target):
    with pytest.raises(T.ShapeError):
        keypoint_loss(Tensor(np.zeros((2, 6, 6, K))), target)


# --------------------------------------------------------------------------
# classification and total
# --------------------------------------------------------------------------


def _classifier(c, m, rng):
    return ClassifierParams.init(rng, c, m, np.float64)


def test_cls_uniform_logits_is_log_m():
    cls = ClassifierParams(Tensor(np.zeros((4, 7))), Tensor(np.zeros(7)))
    assert template_cls_loss(Tensor(np.ones(4)), 3, cls).item() == pytest.approx(np.log(7))


def test_cls_saturated_logits_near_zero():
    cls = ClassifierParams(Tensor(np.zeros((2, 3))), Tensor(np.array([0.0, 200.0, 0.0])))
    assert template_cls_loss(Tensor(np.ones(2)), 1, cls).item() < 1e-12


def test_cls_matches_log_softmax():
    rng = np.random.default_rng(2)
    cls = _classifier(5, 9, rng)
    cls.b.data[:] = rng.standard_normal(9)
    g = rng.standard_normal(5)
    z = g @ cls.w.data + cls.b.data
    expect = -(z[4] - np.log(np.exp(z).sum()))
    assert abs(template_cls_loss(Tensor(g), 4, cls).item() - expect) < 1e-7


def test_cls_rejects_unknown_label():
    cls = _classifier(3, 4, np.random.default_rng(0))
    with pytest.raises(ValueError):
        template_cls_loss(Tensor(np.ones(3)), 4, cls)


def test_total_loss_arithmetic():
    assert total_loss(1, 1, 1, 1, 0).total == 39.0
    assert total_loss(0, 0, 0, 0, 0).total == 0.0
    s = LossSchedule(decay_period=1000)
    assert s.alpha3(999) == 30.0 and s.alpha3(1000) == 15.0 and s.alpha3(2500) == 7.5
    assert LossSchedule(decay_period=60_000).alpha3(60_000) == 15.0


@settings(max_examples=50)
@given(st.lists(st.floats(0, 50), min_size=4, max_size=4), st.integers(0, 10_000))
def test_total_loss_linear(parts, step):
    s = LossSchedule()
    got = total_loss(*parts, step, s).total
    want = 2 * (parts[0] + parts[1]) + 5 * parts[2] + s.alpha3(step) * parts[3]
    assert got == pytest.approx(want, rel=1e-12, abs=1e-12)


def test_alpha3_non_increasing():
    s = LossSchedule(decay_period=7)
    vals = [s.alpha3(t) for t in range(100)]
    assert all(a >= b for a, b in zip(vals, vals[1:]))
    with pytest.raises(ValueError):
        s.alpha3(-1)


def test_keypoint_target_mask_dtype(target):
    assert isinstance(target, KeypointTarget)
    assert target.mask(np.float32).dtype == np.float32
