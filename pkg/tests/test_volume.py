import numpy as np
import pytest

from xrayreg.volume import (
    Volume,
    bone_augment,
    isocenter_pose,
    load_volume,
    sample_bone_multiplier,
    save_volume,
)


def test_load_zero_volume(tmp_path):
    raw = tmp_path / "v.raw"
    meta = tmp_path / "v.meta"
    np.zeros(8, dtype="<f4").tofile(raw)
    meta.write_text("dims = 2 2 2\nspacing = 1 1 1\ndtype = f32\n")
    v = load_volume(raw, meta)
    assert v.dims == (2, 2, 2)
    assert np.all(v.data == 0)


def test_load_length_mismatch(tmp_path):
    raw = tmp_path / "v.raw"
    meta = tmp_path / "v.meta"
    np.zeros(999, dtype="<f4").tofile(raw)
    meta.write_text("dims = 10 10 10\nspacing = 1 1 1\ndtype = f32\n")
    with pytest.raises(ValueError, match="999"):
        load_volume(raw, meta)


def test_load_bad_metadata(tmp_path):
    raw = tmp_path / "v.raw"
    np.zeros(8, dtype="<f4").tofile(raw)
    meta = tmp_path / "v.meta"
    meta.write_text("dims = 2 2 2\nspacing = 1 1 1\ndtype = f16\n")
    with pytest.raises(ValueError, match="scalar type"):
        load_volume(raw, meta)
    meta.write_text("dims = 2 2 2\nspacing = 1 -1 1\ndtype = f32\n")
    with pytest.raises(ValueError, match="spacing"):
        load_volume(raw, meta)


def test_save_load_roundtrip_bitexact(tmp_path):
    rng = np.random.default_rng(0)
    data = rng.random((5, 4, 3)).astype(np.float32).astype(np.float64)
    v = Volume(data, spacing=(0.5, 1.0, 2.0), origin=(1.0, 2.0, 3.0))
    save_volume(tmp_path / "v.raw", tmp_path / "v.meta", v, dtype="f32")
    v2 = load_volume(tmp_path / "v.raw", tmp_path / "v.meta")
    assert v2.data.shape == v.data.shape
    assert np.array_equal(v2.data, v.data)
    assert np.array_equal(v2.spacing, v.spacing)
    assert np.array_equal(v2.origin, v.origin)
    # and the raw bytes themselves are stable across a second save
    save_volume(tmp_path / "w.raw", tmp_path / "w.meta", v2, dtype="f32")
    assert (tmp_path / "v.raw").read_bytes() == (tmp_path / "w.raw").read_bytes()


def test_memory_order_is_x_fastest(tmp_path):
    data = np.arange(24, dtype=np.float64).reshape(4, 3, 2)  # (bx, by, bz)
    flat = np.zeros(24, dtype="<f4")
    for iz in range(2):
        for iy in range(3):
            for ix in range(4):
                flat[ix + 4 * (iy + 3 * iz)] = data[ix, iy, iz]
    flat.tofile(tmp_path / "v.raw")
    (tmp_path / "v.meta").write_text("dims = 4 3 2\nspacing = 1 1 1\ndtype = f32\n")
    v = load_volume(tmp_path / "v.raw", tmp_path / "v.meta")
    assert np.array_equal(v.data, data)


def test_rescale_clamps_and_keeps_hu(tmp_path):
    hu = np.array([-1000.0, 0.0, 400.0, 2000.0], dtype="<f4")
    hu.tofile(tmp_path / "v.raw")
    (tmp_path / "v.meta").write_text(
        "dims = 4 1 1\nspacing = 1 1 1\ndtype = f32\n"
        "rescale_slope = 1e-5\nrescale_intercept = 0.005\n"
    )
    with pytest.warns(UserWarning, match="clamped"):
        v = load_volume(tmp_path / "v.raw", tmp_path / "v.meta")
    assert v.data[0, 0, 0] == 0.0  # air clamped
    assert v.hu is not None
    assert np.allclose(v.hu.ravel(), hu)


def test_isocenter_pose():
    v = Volume(np.zeros((100, 100, 100)), spacing=(1, 1, 1))
    iso = isocenter_pose(v)
    assert np.array_equal(iso.R, np.eye(3))
    assert np.allclose(iso.t, [50, 50, 50])
    v = Volume(np.zeros((512, 512, 256)), spacing=(0.5, 0.5, 1.0))
    assert np.allclose(isocenter_pose(v).t, [128, 128, 128])


def test_bone_augment_identity_and_mask():
    rng = np.random.default_rng(1)
    data = rng.uniform(0.01, 0.02, size=(6, 6, 6))
    v = Volume(data, spacing=(1, 1, 1))
    same = bone_augment(v, 1.0)
    assert np.array_equal(same.data, v.data)

    hu = np.zeros((6, 6, 6))
    hu[2, 3, 4] = 500.0
    boosted = bone_augment(v, 10.0, hu=hu)
    assert boosted.data[2, 3, 4] == pytest.approx(10 * v.data[2, 3, 4])
    changed = boosted.data != v.data
    assert changed.sum() == 1

    # threshold is strict: exactly 350 HU stays soft tissue
    hu[2, 3, 4] = 350.0
    assert np.array_equal(bone_augment(v, 10.0, hu=hu).data, v.data)

    with pytest.raises(ValueError):
        bone_augment(v, 0.5)


def test_bone_augment_monotone_in_c():
    rng = np.random.default_rng(2)
    v = Volume(rng.uniform(0.01, 0.05, size=(8, 8, 8)), spacing=(1, 1, 1))
    means = [bone_augment(v, c).data.mean() for c in (1.0, 2.0, 5.0, 10.0)]
    assert all(m2 >= m1 for m1, m2 in zip(means, means[1:]))


def test_bone_augment_commutes_with_scaling_given_hu():
    rng = np.random.default_rng(3)
    data = rng.uniform(0.01, 0.05, size=(5, 5, 5))
    hu = rng.uniform(-500, 1500, size=(5, 5, 5))
    v = Volume(data, spacing=(1, 1, 1))
    a = bone_augment(Volume(2.0 * data, (1, 1, 1)), 3.0, hu=hu).data
    b = 2.0 * bone_augment(v, 3.0, hu=hu).data
    assert np.allclose(a, b, atol=1e-15)


def test_sample_bone_multiplier():
    rng = np.random.default_rng(4)
    draws = np.array([sample_bone_multiplier(rng) for _ in range(100_000)])
    assert draws.min() >= 1.0 and draws.max() <= 10.0
    assert abs(draws.mean() - 5.5) < 0.05
    r1 = np.random.default_rng(7)
    r2 = np.random.default_rng(7)
    assert [sample_bone_multiplier(r1) for _ in range(5)] == [
        sample_bone_multiplier(r2) for _ in range(5)
    ]


def test_volume_validation():
    with pytest.raises(ValueError):
        Volume(np.zeros((2, 2)), spacing=(1, 1, 1))
    with pytest.raises(ValueError):
        Volume(np.zeros((2, 2, 2)), spacing=(1, 0, 1))
    with pytest.raises(ValueError):
        Volume(-np.ones((2, 2, 2)), spacing=(1, 1, 1))
