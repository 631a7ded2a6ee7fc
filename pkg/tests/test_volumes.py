"""Gridded containers, MetaImage I/O, sampling, and problem assembly."""

import numpy as np
import pytest

from meshdir.volumes import (
    BLADDER_ELASTICITY,
    BONE_ELASTICITY,
    Dvf,
    GridMismatchError,
    LabelVolume,
    OTHER_TISSUE_ELASTICITY,
    Volume,
    boundary_face_centers,
    build_problem,
    default_elasticity_table,
    farthest_point_subset,
    load_volume,
    save_volume,
    trilinear_sample,
    voxel_centers,
    warp_mask,
)


def _vol(data, spacing=(2.0, 3.0, 4.0), origin=(1.0, -2.0, 0.5)):
    return Volume(np.asarray(data, dtype=np.float32), spacing, origin)


class TestMetaImageRoundtrip:
    def test_float_volume(self, tmp_path, rng):
        vol = _vol(rng.normal(size=(4, 5, 6)).astype(np.float32))
        save_volume(vol, tmp_path / "v.mha")
        back = load_volume(tmp_path / "v.mha")
        assert isinstance(back, Volume)
        assert back.dims == vol.dims
        assert back.spacing == vol.spacing
        assert back.origin == vol.origin
        np.testing.assert_array_equal(back.data, vol.data)

    def test_short_volume_keeps_dtype(self, tmp_path):
        data = np.arange(-30, 30, dtype="<i2").reshape(3, 4, 5)
        vol = Volume(data, (1.0, 1.0, 1.0))
        save_volume(vol, tmp_path / "v.mha")
        back = load_volume(tmp_path / "v.mha")
        assert back.data.dtype == np.dtype("<i2")
        np.testing.assert_array_equal(back.data, data)

    def test_labels(self, tmp_path):
        data = np.zeros((4, 4, 4), dtype=np.uint8)
        data[1:3, 1:3, 1:3] = 2
        lv = LabelVolume(data, (3.0, 3.0, 3.0))
        save_volume(lv, tmp_path / "l.mha")
        back = load_volume(tmp_path / "l.mha")
        assert isinstance(back, LabelVolume)
        np.testing.assert_array_equal(back.data, data)

    def test_dvf_vector_payload(self, tmp_path, rng):
        vec = rng.normal(size=(3, 4, 5, 3)).astype(np.float32)
        dvf = Dvf(vec, (2.0, 2.0, 2.0), (0.0, 0.0, 0.0))
        save_volume(dvf, tmp_path / "d.mha")
        back = load_volume(tmp_path / "d.mha")
        assert isinstance(back, Dvf)
        np.testing.assert_array_equal(back.vectors, vec)

    def test_header_is_ascii_with_channels(self, tmp_path):
        dvf = Dvf(np.zeros((2, 2, 2, 3), dtype=np.float32), (1.0, 1.0, 1.0))
        save_volume(dvf, tmp_path / "d.mha")
        head = (tmp_path / "d.mha").read_bytes().split(b"ElementDataFile")[0]
        assert b"ElementNumberOfChannels = 3" in head
        assert b"DimSize = 2 2 2" in head


class TestVoxelGeometry:
    def test_centers_are_half_voxel_shifted(self):
        vol = _vol(np.zeros((2, 2, 3)))
        c = voxel_centers(vol)
        assert c.shape == (12, 3)
        np.testing.assert_allclose(c[0], [1.0 + 1.0, -2.0 + 1.5, 0.5 + 2.0])

    def test_centers_x_fastest(self):
        vol = _vol(np.zeros((2, 2, 3)))
        c = voxel_centers(vol)
        # consecutive rows advance x first
        assert c[1, 0] - c[0, 0] == pytest.approx(2.0)
        assert c[1, 1] == c[0, 1] and c[1, 2] == c[0, 2]


class TestTrilinearSample:
    def test_exact_at_voxel_centers(self, rng):
        vol = _vol(rng.normal(size=(4, 4, 4)))
        c = voxel_centers(vol)
        vals = trilinear_sample(vol, c)
        np.testing.assert_allclose(vals, vol.data.ravel(), rtol=0, atol=1e-6)

    def test_reproduces_linear_field(self):
        # u(x, y, z) = 2x - y + 3z is linear, so interpolation is exact
        vol0 = _vol(np.zeros((5, 5, 5)), spacing=(2.0, 2.0, 2.0), origin=(0, 0, 0))
        c = voxel_centers(vol0)
        field = (2 * c[:, 0] - c[:, 1] + 3 * c[:, 2]).reshape(5, 5, 5)
        vol = Volume(field.astype(np.float64), (2.0, 2.0, 2.0))
        lo, hi = vol.bounds
        pts = np.random.default_rng(1).uniform(lo + 1.0, hi - 1.0, size=(50, 3))
        np.testing.assert_allclose(
            trilinear_sample(vol, pts), 2 * pts[:, 0] - pts[:, 1] + 3 * pts[:, 2], atol=1e-9
        )

    def test_clamped_outside(self):
        vol = _vol(np.arange(8, dtype=np.float32).reshape(2, 2, 2), spacing=(1, 1, 1), origin=(0, 0, 0))
        far = np.array([[-100.0, -100.0, -100.0], [100.0, 100.0, 100.0]])
        vals = trilinear_sample(vol, far)
        assert vals[0] == vol.data[0, 0, 0]
        assert vals[1] == vol.data[-1, -1, -1]

    def test_vector_field_sampling(self):
        vec = np.zeros((3, 3, 3, 3))
        vec[..., 0] = 5.0
        dvf = Dvf(vec, (1.0, 1.0, 1.0))
        out = trilinear_sample(dvf, np.array([[1.0, 1.0, 1.0]]))
        np.testing.assert_allclose(out, [[5.0, 0.0, 0.0]])


class TestBoundaryFaceCenters:
    def test_single_voxel_has_six_faces(self):
        data = np.zeros((3, 3, 3), dtype=np.uint8)
        data[1, 1, 1] = 1
        lv = LabelVolume(data, (2.0, 2.0, 2.0))
        pts = boundary_face_centers(lv, 1)
        assert pts.shape == (6, 3)
        center = np.array([3.0, 3.0, 3.0])
        d = np.linalg.norm(pts - center, axis=1)
        np.testing.assert_allclose(d, 1.0)  # half a voxel away

    def test_interior_faces_not_reported(self):
        data = np.zeros((4, 4, 4), dtype=np.uint8)
        data[1:3, 1:3, 1:3] = 1
        lv = LabelVolume(data, (1.0, 1.0, 1.0))
        pts = boundary_face_centers(lv, 1)
        # 2x2x2 block: 6 sides x 4 faces
        assert pts.shape == (24, 3)


class TestFarthestPointSubset:
    def test_size_and_uniqueness(self, rng):
        pts = rng.normal(size=(60, 3))
        idx = farthest_point_subset(pts, 12)
        assert len(idx) == 12
        assert len(set(map(int, idx))) == 12

    def test_requesting_more_returns_all(self, rng):
        pts = rng.normal(size=(5, 3))
        idx = farthest_point_subset(pts, 10)
        assert sorted(map(int, idx)) == [0, 1, 2, 3, 4]

    def test_spreads_better_than_prefix(self, rng):
        pts = rng.normal(size=(200, 3))
        idx = farthest_point_subset(pts, 20)

        def min_pairwise(sub):
            d = np.linalg.norm(sub[:, None] - sub[None, :], axis=2)
            return d[~np.eye(len(sub), dtype=bool)].min()

        assert min_pairwise(pts[idx]) > min_pairwise(pts[:20])


class TestLabelNames:
    def test_default_names(self):
        lv = LabelVolume(np.ones((2, 2, 2), dtype=np.uint8), (1, 1, 1))
        assert lv.name_of(1) == "label_1"

    def test_elasticity_table_by_name(self):
        data = np.zeros((2, 2, 4), dtype=np.uint8)
        data[..., 0] = 1
        data[..., 1] = 2
        data[..., 2] = 3
        lv = LabelVolume(data, (1, 1, 1), label_names=("bladder", "bone", "body"))
        table = default_elasticity_table(lv)
        assert table[1] == BLADDER_ELASTICITY
        assert table[2] == BONE_ELASTICITY
        assert table[3] == OTHER_TISSUE_ELASTICITY


class TestWarpMask:
    def test_identity_dvf_preserves_mask(self, mini_case):
        dvf = Dvf(
            np.zeros((*mini_case.source_labels.data.shape, 3)),
            mini_case.source_labels.spacing,
            mini_case.source_labels.origin,
        )
        out = warp_mask(mini_case.source_labels, dvf, 1)
        np.testing.assert_array_equal(out.data == 1, mini_case.source_labels.data == 1)

    def test_truth_dvf_tracks_target_mask_coarsely(self, mini_case):
        # 6 mm voxels put the shrunk sphere at ~2.5 voxel radius; the
        # tight agreement bound lives with the default-spacing case
        out = warp_mask(mini_case.source_labels, mini_case.truth, 1)
        a = out.data == 1
        b = mini_case.target_labels.data == 1
        dice = 2 * (a & b).sum() / (a.sum() + b.sum())
        assert dice >= 0.75

    def test_truth_dvf_recovers_target_mask(self, standard_case):
        out = warp_mask(standard_case.source_labels, standard_case.truth, 1)
        a = out.data == 1
        b = standard_case.target_labels.data == 1
        dice = 2 * (a & b).sum() / (a.sum() + b.sum())
        assert dice >= 0.99


class TestBuildProblem:
    def test_guidance_for_all_shared_labels(self, mini_problem):
        assert set(mini_problem.organ_labels()) == {1, 2, 3}
        for label in mini_problem.organ_labels():
            gp = mini_problem.guidance[label]
            assert len(gp.source) <= 400 and len(gp.target) <= 400
            assert gp.source.ndim == 2 and gp.source.shape[1] == 3

    def test_grid_mismatch_rejected(self, mini_case):
        shifted = Volume(
            np.asarray(mini_case.target_image.data), (5.0, 5.0, 5.0)
        )
        with pytest.raises(GridMismatchError):
            build_problem(
                mini_case.source_image,
                shifted,
                mini_case.source_labels,
                mini_case.target_labels,
            )

    def test_elasticity_lookup(self, mini_problem):
        assert mini_problem.elasticity_of(1) == BLADDER_ELASTICITY
        assert mini_problem.elasticity_of(2) == BONE_ELASTICITY
