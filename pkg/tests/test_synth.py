import itertools

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from scipy.optimize import brentq

from dcn import synth
from dcn.synth import DataConfig, Pose, RenderedSample


def test_identity_deterministic_and_distinct():
    a, b = synth.generate_identity(7, 0), synth.generate_identity(7, 0)
    assert a == b
    assert not np.array_equal(a.params, synth.generate_identity(7, 1).params)
    vecs = [synth.generate_identity(7, i).params for i in range(100)]
    for u, v in itertools.combinations(vecs, 2):
        assert not np.array_equal(u, v)


def test_identity_rejects_negative_id():
    with pytest.raises(ValueError):
        synth.generate_identity(7, -1)


def test_params_within_ranges():
    for i in range(50):
        s = synth.generate_identity(3, i)
        for name, (lo, hi) in synth.PARAM_RANGES.items():
            assert lo <= getattr(s, name) <= hi


# --------------------------------------------------------------------------
# pose
# --------------------------------------------------------------------------


def test_pose_thresholds():
    assert synth.pose_from_ratio(0.2) is Pose.LEFT_PROFILE
    assert synth.pose_from_ratio(0.3) is Pose.FRONTAL
    assert synth.pose_from_ratio(1.0) is Pose.FRONTAL
    assert synth.pose_from_ratio(3.0) is Pose.FRONTAL
    assert synth.pose_from_ratio(4.0) is Pose.RIGHT_PROFILE


def test_symmetric_frontal():
    _, pose, ratio = synth.keypoint_layout(synth.symmetric_identity(), 0.0)
    assert ratio == pytest.approx(1.0, abs=1e-12)
    assert pose is Pose.FRONTAL


@pytest.mark.parametrize("target,pose", [(0.2, Pose.LEFT_PROFILE), (4.0, Pose.RIGHT_PROFILE)])
def test_yaw_reaching_ratio(target, pose):
    spec = synth.symmetric_identity()

    def gap(yaw):
        return synth.keypoint_layout(spec, yaw)[2] - target

    lo, hi = (-1.0, 0.0) if target < 1 else (0.0, 1.0)
    yaw = brentq(gap, lo, hi, xtol=1e-12)
    _, got_pose, ratio = synth.keypoint_layout(spec, yaw)
    assert ratio == pytest.approx(target, rel=1e-6)
    assert got_pose is pose


def test_ratio_monotone_in_yaw():
    spec = synth.symmetric_identity()
    ratios = [synth.keypoint_layout(spec, y)[2] for y in np.linspace(-0.5, 0.5, 40)]
    assert np.all(np.diff(ratios) > 0)


def test_all_poses_reachable():
    spec = synth.symmetric_identity()
    poses = {synth.keypoint_layout(spec, y)[1] for y in np.linspace(-1, 1, 41)}
    assert poses == set(Pose)


# --------------------------------------------------------------------------
# rendering
# --------------------------------------------------------------------------


def test_render_is_pure():
    spec = synth.generate_identity(7, 5)
    a = synth.render_sample(spec, 0.3, 0.5, np.random.default_rng(9))
    b = synth.render_sample(spec, 0.3, 0.5, np.random.default_rng(9))
    assert a.image.tobytes() == b.image.tobytes()
    assert a.image.shape == (48, 48, 3) and a.image.dtype == np.float32


@settings(max_examples=40, deadline=None)
@given(st.integers(0, 10_000), st.floats(-1, 1), st.floats(0, 1))
def test_visible_keypoints_in_bounds(ident, yaw, quality):
    s = synth.render_sample(synth.generate_identity(1, ident), yaw, quality, np.random.default_rng(ident))
    kp = s.keypoints[s.visible()]
    assert np.all((kp >= 0) & (kp <= 47))
    assert 0 <= s.image.min() and s.image.max() <= 1


def test_profile_occludes_far_eye():
    spec = synth.symmetric_identity()
    left = synth.render_sample(spec, -1.0, 1.0, np.random.default_rng(0), jitter=0)
    right = synth.render_sample(spec, 1.0, 1.0, np.random.default_rng(0), jitter=0)
    assert left.pose is Pose.LEFT_PROFILE and right.pose is Pose.RIGHT_PROFILE
    assert tuple(left.keypoints[0]) == synth.OCCLUDED and left.visible()[1]
    assert tuple(right.keypoints[1]) == synth.OCCLUDED and right.visible()[0]


def _centroid(alpha):
    yy, xx = np.mgrid[0 : alpha.shape[0], 0 : alpha.shape[1]]
    m = alpha.sum()
    return np.array([(alpha * xx).sum() / m, (alpha * yy).sum() / m])


@pytest.mark.parametrize("ident", range(8))
def test_glyph_centroids_match_keypoints(ident):
    spec = synth.generate_identity(7, ident)
    g = synth.render_glyphs(spec, 0.0)
    assert g["pose"] is Pose.FRONTAL
    for k, name in enumerate(("left_eye", "right_eye", "nose", "mouth")):
        assert np.linalg.norm(_centroid(g[name]) - g["keypoints"][k]) < 0.5, name


def test_quality_transform_levels():
    assert synth.quality_transform(1.0) == (0.0, 1)
    assert synth.quality_transform(0.5)[1] == 2
    assert synth.quality_transform(0.1)[1] == 4
    sharp = synth.render_sample(synth.symmetric_identity(), 0, 1.0, np.random.default_rng(2))
    soft = synth.render_sample(synth.symmetric_identity(), 0, 0.0, np.random.default_rng(2))
    assert np.abs(np.diff(soft.image, axis=1)).mean() < np.abs(np.diff(sharp.image, axis=1)).mean()


# --------------------------------------------------------------------------
# templates
# --------------------------------------------------------------------------


def _stub_render(spec, yaw, quality, rng, size=48):
    return RenderedSample(np.full((2, 2, 3), rng.random(), np.float32), np.zeros((4, 2)), Pose.FRONTAL, quality, spec.id)


def test_identical_template_fraction(monkeypatch):
    monkeypatch.setattr(synth, "render_sample", _stub_render)
    rng = np.random.default_rng(0)
    spec = synth.symmetric_identity()

    def identical():
        t = synth.assemble_template(spec, 3, rng)
        return all(np.array_equal(s.image, t.samples[0].image) for s in t.samples)

    frac = np.mean([identical() for _ in range(10_000)])
    assert abs(frac - 0.2) <= 0.02
    both_distinct = np.mean([not identical() and not identical() for _ in range(10_000)])
    assert abs(both_distinct - 0.64) <= 0.02


def test_single_sample_template():
    t = synth.assemble_template(synth.symmetric_identity(), 1, np.random.default_rng(0))
    assert len(t) == 1


def test_template_validation():
    with pytest.raises(ValueError):
        synth.assemble_template(synth.symmetric_identity(), 0, np.random.default_rng(0))
    s = _stub_render(synth.generate_identity(0, 1), 0, 1, np.random.default_rng(0))
    with pytest.raises(ValueError):
        synth.Template(2, [s])


# --------------------------------------------------------------------------
# augmentation
# --------------------------------------------------------------------------


@pytest.fixture(scope="module")
def sample():
    return synth.render_sample(synth.generate_identity(7, 3), 0.4, 0.8, np.random.default_rng(4))


def test_augment_probability(sample):
    rng = np.random.default_rng(1)
    hits = sum(synth.augment(sample, rng).transform is not None for _ in range(10_000))
    assert abs(hits / 10_000 - 0.2) <= 0.02


def test_flip_involution(sample):
    twice = synth.apply_transform(synth.apply_transform(sample, "flip"), "flip")
    assert np.array_equal(twice.image, sample.image)
    assert np.array_equal(twice.keypoints, sample.keypoints)
    assert twice.pose is sample.pose


def test_flip_mirrors_keypoints():
    sample = synth.render_sample(synth.symmetric_identity(), 0.05, 1.0, np.random.default_rng(4))
    assert sample.visible().all()
    f = synth.apply_transform(sample, "flip")
    assert f.keypoints[0, 0] == pytest.approx(47 - sample.keypoints[1, 0])
    assert f.keypoints[2, 0] == pytest.approx(47 - sample.keypoints[2, 0])
    assert f.pose is Pose(2 - sample.pose)


def test_monochrome_equal_channels(sample):
    m = synth.apply_transform(sample, "monochrome").image
    assert np.array_equal(m[..., 0], m[..., 1]) and np.array_equal(m[..., 1], m[..., 2])


def test_unknown_transform(sample):
    with pytest.raises(ValueError):
        synth.apply_transform(sample, "rotate")


# --------------------------------------------------------------------------
# datasets
# --------------------------------------------------------------------------

SMALL = DataConfig(dataset_seed=7, train_identities=3, test_identities=2, samples_per_identity=4)


def test_dataset_pure_and_split():
    a, b = synth.generate_dataset(SMALL), synth.generate_dataset(SMALL)
    assert all(x.image.tobytes() == y.image.tobytes() for x, y in zip(a.samples, b.samples))
    assert not set(a.train_ids) & set(a.test_ids)
    assert len(a.samples) == 20


def test_export_roundtrip(tmp_path):
    ds = synth.generate_dataset(SMALL)
    manifest = synth.export_dataset(ds, tmp_path / "a")
    synth.export_dataset(ds, tmp_path / "b")
    assert manifest.read_bytes() == (tmp_path / "b" / synth.MANIFEST).read_bytes()
    back = synth.load_dataset(tmp_path / "a")
    assert back.train_ids == ds.train_ids and back.test_ids == ds.test_ids
    for x, y in zip(ds.samples, back.samples):
        assert np.array_equal(x.image, y.image)
        assert x.pose is y.pose
        np.testing.assert_allclose(x.keypoints, y.keypoints, atol=5e-5)


def test_manifest_record_layout(tmp_path):
    ds = synth.generate_dataset(SMALL)
    lines = synth.export_dataset(ds, tmp_path).read_text().splitlines()[1:]
    fields = lines[0].split(",")
    assert len(fields) == 12
    assert fields[2] in ("left_profile", "frontal", "right_profile")


def test_load_missing(tmp_path):
    with pytest.raises(FileNotFoundError):
        synth.load_dataset(tmp_path)
