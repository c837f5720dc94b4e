import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from gnpm.data import (
    CloudFormatError,
    DataSpec,
    generate,
    link_transforms,
    load_cloud,
    load_data_spec,
    load_dataset,
    pose_points,
    sample_points,
    save_cloud,
    save_dataset,
)

SMALL = DataSpec(identities=2, sequences=1, heldout_sequences=1, frames=4, points=64, seed=3)


def test_generate_deterministic_and_counts():
    a, b = generate(SMALL), generate(SMALL)
    assert len(a.identities) == 2 and len(a.sequences) == 4 and len(a.frames) == 16
    for fa, fb in zip(a.frames, b.frames):
        assert fa.cloud.tobytes() == fb.cloud.tobytes()
    assert len(a.train_frames()) == 8
    assert [s.split for s in a.sequences] == ["train", "heldout_pose"] * 2
    assert generate(SMALL, seed=4).frames[0].cloud.tobytes() != a.frames[0].cloud.tobytes()


def test_zero_angles_give_canonical():
    ds = generate(SMALL)
    ident = ds.identities[0]
    np.testing.assert_allclose(pose_points(ident, [0.0], 0.05), ident.canonical, atol=1e-15)


@given(st.floats(-1.5, 1.5), st.integers(0, 1000))
def test_links_move_rigidly(theta, seed):
    ds = generate(DataSpec(identities=1, sequences=0, heldout_sequences=0, frames=1, points=200, blend=0.0, seed=seed))
    ident = ds.identities[0]
    posed = pose_points(ident, [theta], 0.0)
    for part in (0, 1):
        sel = ident.parts == part
        a, b = ident.canonical[sel], posed[sel]
        # pairwise distances inside a link are preserved
        da = np.linalg.norm(a[:, None] - a[None], axis=-1)
        db = np.linalg.norm(b[:, None] - b[None], axis=-1)
        np.testing.assert_allclose(da, db, atol=1e-12)
    np.testing.assert_allclose(posed[ident.parts == 0], ident.canonical[ident.parts == 0])


def test_joint_is_fixed_point():
    ds = generate(DataSpec(identities=1, links=3, sequences=0, heldout_sequences=0, points=50))
    ident = ds.identities[0]
    tf = link_transforms(ident, [0.4, -0.7])
    for j, x in enumerate(ident.joints):
        c = np.array([x, 0.0, 0.0])
        r_prev, t_prev = tf[j]
        r, t = tf[j + 1]
        np.testing.assert_allclose(r @ c + t, r_prev @ c + t_prev, atol=1e-14)


def test_amplitude_bound():
    ds = generate(SMALL)
    angles = np.stack([f.angles for f in ds.frames])
    assert np.abs(angles).max() <= SMALL.amplitude + 1e-12


def test_heldout_identities_and_next_frame():
    ds = generate(SMALL, heldout_identities=1)
    assert ds.identities[-1].split == "heldout_identity"
    assert len(ds.sequences_in("heldout_identity")) == 1
    seq = ds.sequences[0]
    assert ds.next_frame(seq.frames[0]) == seq.frames[1]
    assert ds.next_frame(seq.frames[-1]) is None


@pytest.mark.parametrize("bad", [{"links": 1}, {"amplitude": 4.0}, {"frames": 0}, {"noise": -1.0}])
def test_spec_validation(bad):
    with pytest.raises(ValueError):
        generate(SMALL, **bad)


def test_sample_points(rng):
    idx = sample_points(50, 20, rng)
    assert len(set(idx.tolist())) == 20 and idx.max() < 50
    np.testing.assert_array_equal(sample_points(7, 7, 0), np.arange(7))
    with pytest.raises(ValueError):
        sample_points(5, 6, 0)


def test_cloud_roundtrip_exact(tmp_path, rng):
    pts = rng.standard_normal((9, 3))
    save_cloud(tmp_path / "a.pc", pts, np.arange(9), np.arange(9) % 2)
    pc = load_cloud(tmp_path / "a.pc")
    assert pc.points.tobytes() == pts.tobytes()
    np.testing.assert_array_equal(pc.corr, np.arange(9))
    np.testing.assert_array_equal(pc.part, np.arange(9) % 2)
    save_cloud(tmp_path / "b.pc", pts)
    assert load_cloud(tmp_path / "b.pc").corr is None


@pytest.mark.parametrize(
    "text,line",
    [
        ("nope\n", 1),
        ("GNPM-PC 1\nN 2 COLS x y\n", 2),
        ("GNPM-PC 1\nN 2 COLS x y z\n0 0 0\n", 4),
        ("GNPM-PC 1\nN 1 COLS x y z\n0 0\n", 3),
        ("GNPM-PC 1\nN 1 COLS x y z\n0 0 nan\n", 3),
        ("GNPM-PC 1\nN 1 COLS x y z corr\n0 0 0 -1\n", 3),
    ],
)
def test_cloud_errors_carry_line(tmp_path, text, line):
    path = tmp_path / "bad.pc"
    path.write_text(text)
    with pytest.raises(CloudFormatError) as info:
        load_cloud(path)
    assert info.value.line == line


def test_dataset_roundtrip(tmp_path):
    ds = generate(SMALL)
    save_dataset(ds, tmp_path / "d")
    back = load_dataset(tmp_path / "d")
    assert [s.frames for s in back.sequences] == [s.frames for s in ds.sequences]
    for a, b in zip(ds.frames, back.frames):
        assert a.cloud.tobytes() == b.cloud.tobytes()
        np.testing.assert_array_equal(a.angles, b.angles)
    np.testing.assert_array_equal(back.identities[1].parts, ds.identities[1].parts)
    assert back.spec == ds.spec


def test_data_spec_file(tmp_path):
    (tmp_path / "s.json").write_text('{"identities": 1, "length_range": [0.4, 0.5]}')
    spec = load_data_spec(tmp_path / "s.json")
    assert spec.identities == 1 and spec.length_range == (0.4, 0.5)
