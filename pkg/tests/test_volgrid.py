import numpy as np
import pytest

from motion4d import volgrid
from motion4d.errors import FormatError, GeometryError
from motion4d.volgrid import Grid3, Mask, Segment, Volume


def ramp_volume(grid):
    return Volume(grid, np.arange(grid.nvox, dtype=np.float64))


class TestGrid3:
    def test_rejects_bad_dims(self):
        with pytest.raises(ValueError):
            Grid3((0, 4, 4), (1, 1, 1))

    def test_rejects_bad_spacing(self):
        with pytest.raises(ValueError):
            Grid3((4, 4, 4), (1, -1, 1))
        with pytest.raises(ValueError):
            Grid3((4, 4, 4), (1, np.inf, 1))

    def test_axis_coords(self):
        g = Grid3((3, 1, 1), (2.0, 1.0, 1.0), (5.0, 0.0, 0.0))
        assert np.array_equal(g.axis_coords(0), [5.0, 7.0, 9.0])


class TestVolume:
    def test_rejects_nonfinite(self):
        g = Grid3((2, 2, 2), (1, 1, 1))
        with pytest.raises(ValueError):
            Volume(g, [0, 1, 2, 3, 4, 5, 6, np.nan])

    def test_rejects_wrong_length(self):
        g = Grid3((2, 2, 2), (1, 1, 1))
        with pytest.raises(ValueError):
            Volume(g, np.zeros(7))


class TestExtractSegment:
    def test_full_range_is_identity(self):
        g = Grid3((3, 4, 5), (1, 1, 1))
        v = ramp_volume(g)
        seg = volgrid.extract_segment(v, 0, g.dims[2] - 1, 0)
        assert np.array_equal(seg.values, v.values)
        assert seg.parent_grid == g

    def test_constant_slices(self):
        g = Grid3((2, 2, 4), (1, 1, 1))
        vals = np.repeat(np.arange(4.0), 4).reshape(4, 2, 2)
        seg = volgrid.extract_segment(Volume(g, vals), 1, 2, 7)
        assert np.array_equal(np.unique(seg.values[0]), [1.0])
        assert np.array_equal(np.unique(seg.values[1]), [2.0])
        assert seg.t == 7

    def test_out_of_range(self):
        g = Grid3((2, 2, 4), (1, 1, 1))
        v = ramp_volume(g)
        with pytest.raises(IndexError):
            volgrid.extract_segment(v, 0, 4, 0)
        with pytest.raises(IndexError):
            volgrid.extract_segment(v, -1, 2, 0)

    def test_reinsertion_roundtrip(self):
        g = Grid3((3, 3, 6), (1, 1, 1))
        v = ramp_volume(g)
        seg = volgrid.extract_segment(v, 2, 4, 0)
        rebuilt = v.values.copy()
        rebuilt[2:5] = 0
        rebuilt[seg.z_lo : seg.z_hi + 1] = seg.values
        assert np.array_equal(rebuilt, v.values)


class TestDownsample:
    def test_identity_factor(self):
        g = Grid3((4, 4, 4), (1, 1, 1))
        v = ramp_volume(g)
        out = volgrid.downsample(v, (1, 1, 1))
        assert np.array_equal(out.values, v.values)
        assert out.grid == g

    def test_constant_stays_constant(self):
        g = Grid3((5, 6, 7), (1, 1, 1))
        v = Volume(g, np.full(g.nvox, 123.25))
        out = volgrid.downsample(v, (2, 3, 2))
        assert np.all(out.values == np.float32(123.25))

    def test_mean_of_eight(self):
        g = Grid3((2, 2, 2), (1, 1, 1))
        v = Volume(g, np.arange(8.0))
        out = volgrid.downsample(v, (2, 2, 2))
        assert out.values.shape == (1, 1, 1)
        assert out.values[0, 0, 0] == np.float32(3.5)
        assert out.grid.spacing == (2.0, 2.0, 2.0)
        assert out.grid.origin == (0.5, 0.5, 0.5)

    def test_zero_factor_rejected(self):
        g = Grid3((2, 2, 2), (1, 1, 1))
        with pytest.raises(ValueError):
            volgrid.downsample(ramp_volume(g), (0, 1, 1))

    def test_constant_down_up_roundtrip(self):
        g = Grid3((6, 4, 4), (1, 1, 1))
        v = Volume(g, np.full(g.nvox, -7.5))
        down = volgrid.downsample(v, (2, 2, 2))
        up = np.repeat(np.repeat(np.repeat(down.values, 2, 0), 2, 1), 2, 2)
        assert np.array_equal(up, v.values)


class TestAverageVolumes:
    def test_single(self):
        g = Grid3((2, 2, 2), (1, 1, 1))
        v = ramp_volume(g)
        assert np.array_equal(volgrid.average_volumes([v]).values, v.values)

    def test_two_constants(self):
        g = Grid3((2, 2, 2), (1, 1, 1))
        a = Volume(g, np.zeros(8))
        b = Volume(g, np.full(8, 10.0))
        assert np.all(volgrid.average_volumes([a, b]).values == 5.0)

    def test_matches_per_voxel_oracle(self, rng):
        g = Grid3((4, 3, 5), (1, 1, 1))
        vols = [Volume(g, rng.normal(0, 100, g.nvox)) for _ in range(10)]
        got = volgrid.average_volumes(vols)
        expect = np.zeros(g.shape_zyx)
        for v in vols:
            expect = expect + v.values.astype(np.float64)
        expect /= len(vols)
        np.testing.assert_allclose(got.values, expect, rtol=1e-6)

    def test_permutation_invariant_exactly(self, rng):
        g = Grid3((4, 4, 4), (1, 1, 1))
        vols = [Volume(g, rng.normal(0, 100, g.nvox)) for _ in range(7)]
        a = volgrid.average_volumes(vols)
        b = volgrid.average_volumes(vols[::-1])
        perm = [vols[i] for i in rng.permutation(len(vols))]
        c = volgrid.average_volumes(perm)
        assert a.values.tobytes() == b.values.tobytes() == c.values.tobytes()

    def test_grid_mismatch(self):
        a = Volume(Grid3((2, 2, 2), (1, 1, 1)), np.zeros(8))
        b = Volume(Grid3((2, 2, 2), (2, 1, 1)), np.zeros(8))
        with pytest.raises(GeometryError):
            volgrid.average_volumes([a, b])

    def test_empty_rejected(self):
        with pytest.raises(ValueError):
            volgrid.average_volumes([])


class TestVolumeIO:
    def test_roundtrip_ramp(self, tmp_path):
        g = Grid3((3, 3, 3), (1.0, 2.0, 3.0), (0.5, -1.0, 2.25))
        v = ramp_volume(g)
        volgrid.write_volume(v, tmp_path / "v.json")
        back = volgrid.read_volume(tmp_path / "v.json")
        assert back.grid == g
        assert back.values.tobytes() == v.values.tobytes()

    def test_size_mismatch(self, tmp_path):
        g = Grid3((2, 2, 2), (1, 1, 1))
        volgrid.write_volume(Volume(g, np.zeros(8)), tmp_path / "v.json")
        (tmp_path / "v.raw").write_bytes(np.zeros(7, dtype="<f4").tobytes())
        with pytest.raises(FormatError):
            volgrid.read_volume(tmp_path / "v.json")

    def test_nonfinite_payload(self, tmp_path):
        g = Grid3((2, 2, 2), (1, 1, 1))
        volgrid.write_volume(Volume(g, np.zeros(8)), tmp_path / "v.json")
        bad = np.zeros(8, dtype="<f4")
        bad[3] = np.nan
        (tmp_path / "v.raw").write_bytes(bad.tobytes())
        with pytest.raises(FormatError):
            volgrid.read_volume(tmp_path / "v.json")

    def test_malformed_header(self, tmp_path):
        (tmp_path / "v.json").write_text("{not json")
        with pytest.raises(FormatError):
            volgrid.read_volume(tmp_path / "v.json")

    def test_mask_roundtrip(self, tmp_path, rng):
        g = Grid3((3, 4, 2), (1, 1, 1))
        m = Mask(g, (rng.random(g.nvox) > 0.5).astype(np.uint8))
        volgrid.write_mask(m, tmp_path / "m.json")
        back = volgrid.read_mask(tmp_path / "m.json")
        assert np.array_equal(back.values, m.values)

    def test_segment_roundtrip(self, tmp_path):
        g = Grid3((3, 3, 6), (1, 1, 1))
        seg = volgrid.extract_segment(ramp_volume(g), 2, 4, 11)
        volgrid.write_segment(seg, tmp_path / "s.json")
        back = volgrid.read_segment(tmp_path / "s.json")
        assert (back.z_lo, back.z_hi, back.t) == (2, 4, 11)
        assert np.array_equal(back.values, seg.values)

    def test_phantom_template_roundtrip(self, tmp_path):
        from motion4d import phantom

        spec = phantom.default_spec(n_times=10)
        template = spec.template()
        volgrid.write_volume(template, tmp_path / "t.json")
        back = volgrid.read_volume(tmp_path / "t.json")
        assert back.values.tobytes() == template.values.tobytes()


class TestResampleTo:
    def test_identity(self, rng):
        g = Grid3((5, 4, 3), (1, 1, 1))
        v = Volume(g, rng.normal(size=g.nvox))
        out = volgrid.resample_to(v, g)
        np.testing.assert_allclose(out.values, v.values, atol=1e-6)

    def test_linear_field_exact(self):
        g = Grid3((8, 8, 8), (2.0, 2.0, 2.0))
        x = g.axis_coords(0)
        vals = np.broadcast_to(x[None, None, :], g.shape_zyx)
        # fine grid inside the coarse voxel-centre hull
        fine = Grid3((14, 14, 14), (1.0, 1.0, 1.0), (0.5, 0.5, 0.5))
        out = volgrid.resample_to(Volume(g, vals.copy()), fine)
        expect = np.broadcast_to(fine.axis_coords(0)[None, None, :], fine.shape_zyx)
        np.testing.assert_allclose(out.values, expect, atol=1e-5)
