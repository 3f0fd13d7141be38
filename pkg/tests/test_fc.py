"""Fuzzy-connectedness delineation.

The propagation kernel is checked three independent ways: against a
union-find oracle (brute_force_connectivity), against exhaustive simple-path
enumeration on tiny volumes, and against the max-min fixed-point equations.
All routes consume the same link-affinity table, so agreement is exact.
"""

import math

import numpy as np
import pytest

from mandseg import fc
from mandseg.grid import BoundingBox, Mask, Volume, gradient_magnitude, threshold

SP = (1.0, 1.0, 1.0)
EXP_HALF = 0.60653065971263342  # exp(-1/2)


def gvol(arr, spacing=SP):
    return Volume(np.asarray(arr, dtype=np.float64), spacing)


def random_grad(rng, dims, scale=2.0):
    return gvol(rng.random(dims) * scale)


def enum_connectivity(grad, seed, params):
    """Exhaustive oracle: max over all simple paths of the min link affinity.

    Exponential in volume size; only for volumes of a dozen voxels or so.
    """
    aff, offsets = fc.link_affinities(grad, params)
    nx, ny, nz = grad.dims
    n = nx * ny * nz
    adj = [[] for _ in range(n)]
    for k, (dx, dy, dz) in enumerate(offsets):
        for i in range(n):
            x = i % nx
            rest = i // nx
            y = rest % ny
            z = rest // ny
            xx, yy, zz = x + dx, y + dy, z + dz
            if 0 <= xx < nx and 0 <= yy < ny and 0 <= zz < nz:
                adj[i].append((xx + nx * (yy + ny * zz), aff[k, i]))
    best = np.zeros(n)
    seed_lin = seed[0] + nx * (seed[1] + ny * seed[2])
    best[seed_lin] = 1.0
    visited = [False] * n
    visited[seed_lin] = True

    def dfs(i, s):
        for j, a in adj[i]:
            if visited[j]:
                continue
            s2 = min(s, a)
            if s2 > best[j]:
                best[j] = s2
            visited[j] = True
            dfs(j, s2)
            visited[j] = False

    dfs(seed_lin, 1.0)
    return best.reshape(grad.dims, order="F")


class TestAffinity:
    def test_zero_gradient_gives_one(self):
        assert fc.affinity(0.0, 0.0, fc.AffinityParams(100.0)) == 1.0

    def test_mean_equal_to_sigma(self):
        p = fc.AffinityParams(250.0)
        assert fc.affinity(250.0, 250.0, p) == pytest.approx(EXP_HALF, abs=1e-12)
        assert fc.affinity(100.0, 400.0, p) == pytest.approx(EXP_HALF, abs=1e-12)

    def test_monotone_in_gradient(self):
        p = fc.AffinityParams(100.0)
        values = [fc.affinity(g, g, p) for g in (0, 50, 100, 200, 400)]
        assert all(a > b for a, b in zip(values, values[1:]))

    def test_rejects_negative(self):
        with pytest.raises(ValueError):
            fc.affinity(-1.0, 0.0, fc.AffinityParams(1.0))

    def test_params_validation(self):
        with pytest.raises(ValueError):
            fc.AffinityParams(0.0)
        with pytest.raises(ValueError):
            fc.AffinityParams(float("nan"))
        with pytest.raises(ValueError):
            fc.AffinityParams(1.0, adjacency=7)

    def test_path_strength(self):
        assert fc.path_strength([0.9, 0.4, 1.0]) == 0.4
        with pytest.raises(ValueError):
            fc.path_strength([])
        with pytest.raises(ValueError):
            fc.path_strength([1.5])

    def test_constants(self):
        assert fc.DEFAULT_THETA == 0.72
        assert fc.BONE_HU == 600.0


class TestLinkAffinities:
    def test_shape_and_range(self):
        rng = np.random.default_rng(0)
        grad = random_grad(rng, (4, 3, 2))
        aff, offsets = fc.link_affinities(grad, fc.AffinityParams(1.0, adjacency=26))
        assert aff.shape == (26, 24)
        assert offsets.shape == (26, 3)
        assert aff.min() >= 0.0 and aff.max() <= 1.0

    def test_matches_scalar_affinity(self):
        rng = np.random.default_rng(1)
        grad = random_grad(rng, (3, 3, 3))
        params = fc.AffinityParams(0.7, adjacency=6)
        aff, offsets = fc.link_affinities(grad, params)
        nx, ny, nz = grad.dims
        for k, (dx, dy, dz) in enumerate(offsets):
            for x in range(nx):
                for y in range(ny):
                    for z in range(nz):
                        i = x + nx * (y + ny * z)
                        xx, yy, zz = x + dx, y + dy, z + dz
                        if 0 <= xx < nx and 0 <= yy < ny and 0 <= zz < nz:
                            want = fc.affinity(grad.data[x, y, z], grad.data[xx, yy, zz], params)
                            assert aff[k, i] == want
                        else:
                            assert aff[k, i] == 0.0

    def test_symmetric_links(self):
        rng = np.random.default_rng(2)
        grad = random_grad(rng, (4, 4, 2))
        aff, offsets = fc.link_affinities(grad, fc.AffinityParams(1.3))
        index_of = {tuple(o): k for k, o in enumerate(map(tuple, offsets))}
        nx, ny, nz = grad.dims
        for k, (dx, dy, dz) in enumerate(offsets):
            krev = index_of[(-dx, -dy, -dz)]
            for i in range(nx * ny * nz):
                x = i % nx
                rest = i // nx
                y = rest % ny
                z = rest // ny
                xx, yy, zz = x + dx, y + dy, z + dz
                if 0 <= xx < nx and 0 <= yy < ny and 0 <= zz < nz:
                    j = xx + nx * (yy + ny * zz)
                    assert aff[k, i] == aff[krev, j]

    def test_rejects_negative_gradients(self):
        with pytest.raises(ValueError):
            fc.link_affinities(gvol([[[-1.0]]]), fc.AffinityParams(1.0))


class TestSigmaEstimate:
    def test_step_edge_is_exact(self):
        data = np.zeros((6, 6, 6))
        data[3:] = 1000.0
        v = Volume(data, SP)
        grad = gradient_magnitude(v)
        bone = threshold(v, 600.0)
        assert fc.estimate_sigma(grad, bone) == 500.0

    def test_fallback_to_nonzero_median(self):
        grad = gvol(np.array([0.0, 3.0, 5.0, 7.0]).reshape(4, 1, 1))
        bone = Mask(np.zeros((4, 1, 1), dtype=bool), SP)
        assert fc.estimate_sigma(grad, bone) == 5.0

    def test_all_zero_raises(self):
        grad = gvol(np.zeros((3, 3, 3)))
        bone = Mask(np.zeros((3, 3, 3), dtype=bool), SP)
        with pytest.raises(fc.DelineationError, match="sigma"):
            fc.estimate_sigma(grad, bone)

    def test_dims_mismatch(self):
        grad = gvol(np.zeros((3, 3, 3)))
        bone = Mask(np.zeros((2, 2, 2), dtype=bool), SP)
        with pytest.raises(ValueError, match="dims"):
            fc.estimate_sigma(grad, bone)

    def test_boundary_needs_in_bounds_neighbor(self):
        # a fully bone volume has no boundary; falls back to nonzero median
        data = np.full((3, 3, 3), 1000.0)
        v = Volume(data, SP)
        bone = threshold(v, 600.0)
        grad = gvol(np.full((3, 3, 3), 2.5))
        assert fc.estimate_sigma(grad, bone) == 2.5


class TestSelectSeed:
    def test_picks_peak_of_largest_component(self):
        data = np.zeros((8, 4, 4), dtype=np.int16)
        data[0:3, 0:2, 0:2] = 700   # 12 voxels
        data[1, 1, 1] = 900         # peak of the large component
        data[6, 3, 3] = 3000        # brighter but tiny component
        seed = fc.select_seed(Volume(data, SP), BoundingBox((0, 0, 0), (7, 3, 3)))
        assert seed == (1, 1, 1)

    def test_tie_breaks_smallest_zyx(self):
        data = np.zeros((4, 4, 4), dtype=np.int16)
        data[0:3, 0:3, 0:3] = 700
        data[2, 2, 1] = 900
        data[1, 2, 1] = 900  # same z and y, smaller x wins
        data[2, 2, 2] = 900  # larger z loses
        seed = fc.select_seed(Volume(data, SP), BoundingBox((0, 0, 0), (3, 3, 3)))
        assert seed == (1, 2, 1)

    def test_returns_global_coordinates(self):
        data = np.zeros((8, 8, 8), dtype=np.int16)
        data[5, 6, 7] = 1500
        seed = fc.select_seed(Volume(data, SP), BoundingBox((4, 4, 4), (7, 7, 7)))
        assert seed == (5, 6, 7)

    def test_no_bone_raises(self):
        v = Volume(np.zeros((4, 4, 4), dtype=np.int16), SP)
        with pytest.raises(fc.DelineationError, match="no seed"):
            fc.select_seed(v, BoundingBox((0, 0, 0), (3, 3, 3)))

    def test_box_must_fit(self):
        v = Volume(np.zeros((4, 4, 4), dtype=np.int16), SP)
        with pytest.raises(ValueError):
            fc.select_seed(v, BoundingBox((0, 0, 0), (4, 3, 3)))


class TestConnectivityFixtures:
    def test_three_voxel_line(self):
        # gradients chosen so the two links have affinity 0.9 and 0.4
        g1 = 2.0 * math.sqrt(2.0 * math.log(1.0 / 0.9))
        g2 = 2.0 * math.sqrt(2.0 * math.log(1.0 / 0.4)) - g1
        grad = gvol(np.array([0.0, g1, g2]).reshape(3, 1, 1))
        cm = fc.compute_connectivity(grad, (0, 0, 0), fc.AffinityParams(1.0))
        got = cm.strength.ravel(order="F")
        assert got[0] == 1.0
        assert got[1] == pytest.approx(0.9, abs=1e-12)
        assert got[2] == pytest.approx(0.4, abs=1e-12)

    def test_seed_is_one_everywhere_reachable(self):
        grad = gvol(np.zeros((3, 3, 3)))
        cm = fc.compute_connectivity(grad, (1, 1, 1), fc.AffinityParams(1.0))
        assert np.all(cm.strength == 1.0)

    def test_detour_beats_direct_link(self):
        # seed and target both sit on a high gradient, so their direct link
        # is weak; a detour through two low-gradient voxels is stronger
        g = np.zeros((2, 2, 1))
        g[0, 0, 0] = 4.0  # seed
        g[1, 0, 0] = 4.0  # target
        grad = gvol(g)
        params = fc.AffinityParams(2.0, adjacency=6)
        cm = fc.compute_connectivity(grad, (0, 0, 0), params)
        direct = fc.affinity(4.0, 4.0, params)
        around = min(
            fc.affinity(4.0, 0.0, params),
            fc.affinity(0.0, 0.0, params),
            fc.affinity(0.0, 4.0, params),
        )
        assert around > direct
        assert cm.strength[1, 0, 0] == pytest.approx(around, abs=1e-15)

    def test_seed_validation(self):
        grad = gvol(np.zeros((3, 3, 3)))
        with pytest.raises(ValueError):
            fc.compute_connectivity(grad, (3, 0, 0), fc.AffinityParams(1.0))
        with pytest.raises(ValueError):
            fc.compute_connectivity(grad, (0, -1, 0), fc.AffinityParams(1.0))

    def test_relax_order_validation(self):
        grad = gvol(np.zeros((2, 2, 2)))
        with pytest.raises(ValueError, match="relax_order"):
            fc.compute_connectivity(
                grad, (0, 0, 0), fc.AffinityParams(1.0), relax_order=np.zeros(26, dtype=np.int64)
            )


class TestDualRouteEquivalence:
    def test_kernel_matches_union_find_oracle(self):
        rng = np.random.default_rng(2024)
        worst = 0.0
        for trial in range(60):
            dims = tuple(int(d) for d in rng.integers(2, 5, size=2)) + (int(rng.integers(1, 3)),)
            adjacency = [6, 18, 26][trial % 3]
            sigma = float(rng.uniform(0.3, 3.0))
            grad = random_grad(rng, dims)
            seed = tuple(int(rng.integers(0, d)) for d in dims)
            params = fc.AffinityParams(sigma, adjacency=adjacency)
            a = fc.compute_connectivity(grad, seed, params)
            b = fc.brute_force_connectivity(grad, seed, params)
            worst = max(worst, float(np.abs(a.strength - b.strength).max()))
        assert worst <= 1e-12

    def test_oracle_matches_exhaustive_enumeration(self):
        rng = np.random.default_rng(77)
        for dims in [(3, 2, 1), (2, 2, 2), (4, 2, 1), (3, 3, 1)]:
            for adjacency in (6, 26):
                grad = random_grad(rng, dims)
                seed = tuple(int(rng.integers(0, d)) for d in dims)
                params = fc.AffinityParams(1.0, adjacency=adjacency)
                bf = fc.brute_force_connectivity(grad, seed, params)
                enum = enum_connectivity(grad, seed, params)
                assert float(np.abs(bf.strength - enum).max()) == 0.0

    def test_kernel_matches_enumeration_directly(self):
        rng = np.random.default_rng(78)
        grad = random_grad(rng, (3, 2, 2))
        params = fc.AffinityParams(0.8, adjacency=26)
        cm = fc.compute_connectivity(grad, (0, 0, 0), params)
        enum = enum_connectivity(grad, (0, 0, 0), params)
        assert float(np.abs(cm.strength - enum).max()) == 0.0

    def test_oracle_size_guard(self):
        grad = gvol(np.zeros((9, 8, 8)))
        with pytest.raises(ValueError, match="too large"):
            fc.brute_force_connectivity(grad, (0, 0, 0), fc.AffinityParams(1.0))


class TestFixedPointAndInvariance:
    def test_bellman_fixed_point_exact(self):
        rng = np.random.default_rng(5)
        grad = random_grad(rng, (5, 4, 3))
        params = fc.AffinityParams(0.9, adjacency=26)
        seed = (2, 1, 1)
        cm = fc.compute_connectivity(grad, seed, params)
        aff, offsets = fc.link_affinities(grad, params)
        s = cm.strength.ravel(order="F")
        nx, ny, nz = grad.dims
        n = nx * ny * nz
        rhs = np.zeros(n)
        for k, (dx, dy, dz) in enumerate(offsets):
            for i in range(n):
                x = i % nx
                rest = i // nx
                y = rest % ny
                z = rest // ny
                xx, yy, zz = x + dx, y + dy, z + dz
                if 0 <= xx < nx and 0 <= yy < ny and 0 <= zz < nz:
                    j = xx + nx * (yy + ny * zz)
                    rhs[i] = max(rhs[i], min(s[j], aff[k, i]))
        seed_lin = seed[0] + nx * (seed[1] + ny * seed[2])
        assert s[seed_lin] == 1.0
        mask = np.ones(n, dtype=bool)
        mask[seed_lin] = False
        assert np.array_equal(s[mask], rhs[mask])

    def test_relax_order_invariance_bit_exact(self):
        rng = np.random.default_rng(6)
        # quantized gradients force many exactly-tied link values
        grad = gvol(rng.integers(0, 4, size=(5, 5, 3)).astype(np.float64))
        params = fc.AffinityParams(1.5, adjacency=26)
        base = fc.compute_connectivity(grad, (2, 2, 1), params)
        for _ in range(3):
            order = rng.permutation(26).astype(np.int64)
            other = fc.compute_connectivity(grad, (2, 2, 1), params, relax_order=order)
            assert np.array_equal(base.strength, other.strength)

    def test_strength_in_unit_interval(self):
        rng = np.random.default_rng(7)
        grad = random_grad(rng, (6, 5, 4), scale=5.0)
        cm = fc.compute_connectivity(grad, (0, 0, 0), fc.AffinityParams(1.0))
        assert cm.strength.min() >= 0.0 and cm.strength.max() <= 1.0


class TestThresholdObject:
    def make_cmap(self, strength, seed):
        return fc.ConnectivityMap(np.asarray(strength, dtype=np.float64), SP, seed)

    def test_keeps_seed_component_only(self):
        s = np.zeros((5, 1, 1))
        s[0:2] = [[[1.0]], [[0.8]]]
        s[3:5] = 0.9  # above theta but disconnected from the seed side
        m = fc.threshold_object(self.make_cmap(s, (0, 0, 0)), 0.5)
        assert m.data.ravel().tolist() == [True, True, False, False, False]

    def test_theta_validation(self):
        cm = self.make_cmap(np.ones((2, 2, 2)), (0, 0, 0))
        for theta in (0.0, -0.1, 1.1):
            with pytest.raises(ValueError):
                fc.threshold_object(cm, theta)
        assert fc.threshold_object(cm, 1.0).count == 8

    def test_nesting_in_theta(self):
        rng = np.random.default_rng(8)
        grad = random_grad(rng, (6, 6, 4), scale=3.0)
        cm = fc.compute_connectivity(grad, (3, 3, 2), fc.AffinityParams(1.0))
        m7 = fc.threshold_object(cm, 0.7)
        m5 = fc.threshold_object(cm, 0.5)
        m3 = fc.threshold_object(cm, 0.3)
        assert not (m7.data & ~m5.data).any()
        assert not (m5.data & ~m3.data).any()
        assert m3.data[3, 3, 2] and m5.data[3, 3, 2] and m7.data[3, 3, 2]
