import numpy as np
import pytest

from motion4d import bspline, volgrid
from motion4d.bspline import ControlGrid
from motion4d.errors import GeometryError
from motion4d.volgrid import Grid3, Volume

from conftest import midcell_control, naive_displacement, naive_trilinear, smooth_control, smooth_volume


class TestBasisWeights:
    def test_at_zero(self):
        np.testing.assert_allclose(bspline.basis_weights(0.0), [1 / 6, 4 / 6, 1 / 6, 0.0])

    def test_at_half(self):
        np.testing.assert_allclose(
            bspline.basis_weights(0.5), np.array([1, 23, 23, 1]) / 48.0
        )

    def test_partition_of_unity(self, rng):
        for u in rng.uniform(0, 1, 200):
            assert abs(bspline.basis_weights(u).sum() - 1.0) < 1e-12

    def test_domain(self):
        with pytest.raises(ValueError):
            bspline.basis_weights(1.0)
        with pytest.raises(ValueError):
            bspline.basis_weights(-1e-9)


class TestControlGrid:
    def test_create_covers_extent(self):
        g = Grid3((12, 12, 12), (1, 1, 1))
        cg = ControlGrid.create(g, (4.0, 4.0, 4.0))
        assert all(d >= 4 for d in cg.cdims)
        # every voxel centre evaluates without a range error
        pts = np.stack(
            np.meshgrid(g.axis_coords(0), g.axis_coords(1), g.axis_coords(2), indexing="ij"),
            axis=-1,
        ).reshape(-1, 3)
        bspline.displacement_at(cg, pts)

    def test_small_cdims_rejected(self):
        g = Grid3((4, 4, 4), (1, 1, 1))
        with pytest.raises(ValueError):
            ControlGrid((3, 4, 4), (4, 4, 4), g, np.zeros((4, 4, 3, 3)))


class TestDisplacementAt:
    def test_uniform_displacement(self, rng):
        g = Grid3((10, 9, 8), (1.5, 1.0, 2.0))
        cg = ControlGrid.create(g, (6.0, 4.0, 8.0))
        cg.disp[:] = [1.25, -2.0, 0.5]
        pts = np.column_stack(
            [rng.uniform(lo, hi, 50) for lo, hi in g.extent()]
        )
        out = bspline.displacement_at(cg, pts)
        np.testing.assert_allclose(out, np.tile([1.25, -2.0, 0.5], (50, 1)), atol=1e-12)

    def test_zero(self):
        g = Grid3((6, 6, 6), (1, 1, 1))
        cg = ControlGrid.create(g, (2.0, 2.0, 2.0))
        assert np.all(bspline.displacement_at(cg, np.array([2.0, 2.0, 2.0])) == 0)

    def test_single_control_point_matches_naive(self, rng):
        g = Grid3((9, 9, 9), (1, 1, 1))
        cg = ControlGrid.create(g, (2.0, 2.0, 2.0))
        cg.disp[3, 2, 4] = [2.0, -1.0, 0.5]
        probe = np.linspace(1.0, 7.0, 5)
        for x in probe:
            for y in probe:
                for z in probe:
                    got = bspline.displacement_at(cg, np.array([x, y, z]))
                    want = naive_displacement(cg, (x, y, z))
                    np.testing.assert_allclose(got, want, atol=1e-12)

    def test_outside_extent(self):
        g = Grid3((6, 6, 6), (1, 1, 1))
        cg = ControlGrid.create(g, (2.0, 2.0, 2.0))
        with pytest.raises(IndexError):
            bspline.displacement_at(cg, np.array([5.0, 5.0, 5.2]))

    def test_field_matches_pointwise(self, rng):
        g = Grid3((8, 7, 6), (1.0, 2.0, 1.5))
        cg = smooth_control(rng, ControlGrid.create(g, (4.0, 8.0, 6.0)))
        field = bspline.displacement_field(cg)
        pts = np.stack(
            np.meshgrid(g.axis_coords(0), g.axis_coords(1), g.axis_coords(2), indexing="ij"),
            axis=-1,
        )
        direct = bspline.displacement_at(cg, pts.reshape(-1, 3)).reshape(pts.shape)
        np.testing.assert_allclose(field, np.moveaxis(direct, (0, 1, 2), (2, 1, 0)), atol=1e-9)


class TestWarpVolume:
    def test_zero_displacement_identity(self, rng):
        g = Grid3((10, 10, 10), (1, 1, 1))
        v = smooth_volume(rng, g)
        cg = ControlGrid.create(g, (4.0, 4.0, 4.0))
        out = bspline.warp_volume(v, cg)
        assert np.array_equal(out.values, v.values)

    def test_integer_slice_shift(self, rng):
        g = Grid3((8, 8, 8), (1.0, 1.0, 2.5))
        v = Volume(g, rng.normal(0, 500, g.nvox))
        cg = ControlGrid.create(g, (4.0, 4.0, 10.0))
        cg.disp[..., 2] = 2.5  # exactly one slice towards +z
        out = bspline.warp_volume(v, cg)
        assert np.array_equal(out.values[:-1], v.values[1:])
        assert np.all(out.values[-1] == np.float32(-1000.0))

    def test_matches_per_voxel_oracle(self, rng):
        g = Grid3((16, 16, 16), (1, 1, 1))
        v = smooth_volume(rng, g)
        cg = smooth_control(rng, ControlGrid.create(g, (4.0, 4.0, 4.0)), scale=0.6)
        out = bspline.warp_volume(v, cg)
        vals64 = v.values.astype(np.float64)
        for _ in range(200):
            i, j, k = rng.integers(0, 16, 3)
            u = naive_displacement(cg, (float(i), float(j), float(k)))
            got = out.values[k, j, i]
            want = naive_trilinear(vals64, (i + u[0], j + u[1], k + u[2]))
            if want is None:
                assert got == np.float32(-1000.0)
            else:
                np.testing.assert_allclose(got, want, rtol=1e-6, atol=1e-4)

    def test_geometry_mismatch(self, rng):
        g = Grid3((8, 8, 8), (1, 1, 1))
        other = Grid3((8, 8, 8), (2, 1, 1))
        v = smooth_volume(rng, g)
        with pytest.raises(GeometryError):
            bspline.warp_volume(v, ControlGrid.create(other, (4.0, 4.0, 4.0)))


class TestTranslationReproduction:
    def test_interior_exact_at_integer_voxel_shift(self, rng):
        g = Grid3((12, 12, 12), (2.0, 2.0, 3.0))
        v = Volume(g, rng.normal(0, 500, g.nvox))
        cg = ControlGrid.create(g, (8.0, 8.0, 12.0))
        cg.disp[:] = [2.0, 4.0, 3.0]  # (1, 2, 1) voxels
        out = bspline.warp_volume(v, cg)
        assert np.array_equal(out.values[:-1, :-2, :-1], v.values[1:, 2:, 1:])


class TestResidualAndGradient:
    def test_zero_residual(self, rng):
        g = Grid3((10, 10, 10), (1, 1, 1))
        v = smooth_volume(rng, g)
        cg = ControlGrid.create(g, (4.0, 4.0, 4.0))
        seg = volgrid.extract_segment(v, 2, 7, 0)
        sse, grad = bspline.residual_and_gradient(v, cg, seg)
        assert sse == 0.0
        assert np.all(grad == 0.0)

    def test_constant_offset_zero_gradient(self):
        g = Grid3((8, 8, 8), (1, 1, 1))
        ref = Volume(g, np.full(g.nvox, 10.0))
        seg_src = Volume(g, np.full(g.nvox, 11.0))
        cg = ControlGrid.create(g, (4.0, 4.0, 4.0))
        # a contraction towards the centre keeps every sample inside
        # (cubic B-splines reproduce linear fields from knot samples)
        for a, cd in enumerate(cg.cdims):
            knots = cg.origin[a] + cg.cspacing[a] * np.arange(cd)
            shape = [1, 1, 1]
            shape[2 - a] = cd
            cg.disp[..., a] = -0.08 * (knots - 3.5).reshape(shape)
        seg = volgrid.extract_segment(seg_src, 1, 6, 0)
        sse, grad = bspline.residual_and_gradient(ref, cg, seg)
        n_vox = 8 * 8 * 6
        assert sse == pytest.approx(n_vox * 1.0, rel=1e-12)
        np.testing.assert_allclose(grad, 0.0, atol=1e-9)

    @pytest.mark.parametrize("seed", [0, 1, 2])
    def test_gradient_matches_finite_differences(self, seed):
        rng = np.random.default_rng(seed)
        g = Grid3((12, 12, 12), (1.0, 1.0, 1.0))
        ref = smooth_volume(rng, g)
        seg_src = smooth_volume(rng, g)
        cg = midcell_control(rng, ControlGrid.create(g, (4.0, 4.0, 4.0)))
        seg = volgrid.extract_segment(seg_src, 3, 8, 0)
        _, grad = bspline.residual_and_gradient(ref, cg, seg)
        h = 1e-3
        fd = np.zeros_like(grad)
        it = np.nditer(grad, flags=["multi_index"])
        for _ in it:
            idx = it.multi_index
            d0 = cg.disp[idx]
            cg.disp[idx] = d0 + h
            fp = bspline.residual_sse(ref, cg, seg)
            cg.disp[idx] = d0 - h
            fm = bspline.residual_sse(ref, cg, seg)
            cg.disp[idx] = d0
            fd[idx] = (fp - fm) / (2 * h)
        rel = np.abs(grad - fd).max() / np.abs(fd).max()
        assert rel < 1e-4

    def test_locality(self, rng):
        g = Grid3((16, 16, 16), (1, 1, 1))
        ref = smooth_volume(rng, g)
        seg_src = smooth_volume(rng, g)
        cg = smooth_control(rng, ControlGrid.create(g, (4.0, 4.0, 4.0)), scale=0.3)
        seg = volgrid.extract_segment(seg_src, 0, 3, 0)
        base = bspline.residual_sse(ref, cg, seg)
        # a control point whose z support starts beyond the slab cannot move it;
        # slab z in [0,3] maps to local lattice cells around indices 1..2
        far_idx = (cg.cdims[2] - 1, 2, 2)
        cg.disp[far_idx] += 5.0
        assert bspline.residual_sse(ref, cg, seg) == base
        # a nearby control point does change it
        cg.disp[far_idx] -= 5.0
        cg.disp[(1, 2, 2)] += 0.5
        assert bspline.residual_sse(ref, cg, seg) != base


class TestRefitControlGrid:
    def test_subdivision_is_near_exact(self, rng):
        coarse_grid = Grid3((12, 12, 12), (4.0, 4.0, 4.0))
        fine_grid = Grid3((24, 24, 24), (2.0, 2.0, 2.0), (-1.0, -1.0, -1.0))
        cg = smooth_control(rng, ControlGrid.create(coarse_grid, (16.0, 16.0, 16.0)), scale=2.0)
        fine = bspline.refit_control_grid(cg, fine_grid, (8.0, 8.0, 8.0))
        # compare on interior points shared by both extents
        pts = np.column_stack([rng.uniform(4, 40, 400) for _ in range(3)])
        np.testing.assert_allclose(
            bspline.displacement_at(fine, pts),
            bspline.displacement_at(cg, pts),
            atol=1e-3,
        )

    def test_io_roundtrip(self, tmp_path, rng):
        g = Grid3((8, 8, 8), (1, 1, 1))
        cg = smooth_control(rng, ControlGrid.create(g, (4.0, 4.0, 4.0)))
        cg.disp[:] = cg.disp.astype(np.float32)  # make payload exactly representable
        bspline.write_control_grid(cg, tmp_path / "cg.json")
        back = bspline.read_control_grid(tmp_path / "cg.json")
        assert back.cdims == cg.cdims
        assert back.cspacing == cg.cspacing
        assert np.array_equal(back.disp, cg.disp)
