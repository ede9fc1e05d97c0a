import numpy as np
import numpy.testing as npt
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from oracles import em_oracle

from mecaps.capsules import (CapsuleField, PrimaryCapsParams, TransformParams,
                             em_routing, predict, primary_capsules, relu_route,
                             squash, votes)
from mecaps.errors import ConfigError, ShapeError
from mecaps.rng import Rng
from mecaps.tensor import Tensor


def random_instance(rng, n=1, ci=3, co=2, d=2):
    v = Tensor(rng.normal((n, ci, co, d)))
    a = Tensor(rng.uniform((n, ci), 0.2, 0.9))
    b = Tensor(rng.normal((co,), std=0.5))
    k = Tensor(np.asarray(0.9189))
    return v, a, b, k


class TestPrimaryCapsules:
    def test_zero_conv_gives_zero_poses_half_activations(self, rng):
        params = PrimaryCapsParams.create(5, types=3, dim=4, rng=rng)
        params.kernel.data[:] = 0.0
        fld = primary_capsules(Tensor(rng.normal((2, 5, 4, 4))), params)
        npt.assert_array_equal(fld.poses.data, 0.0)
        npt.assert_array_equal(fld.activations.data, 0.5)

    def test_capsule_count_arithmetic(self, rng):
        params = PrimaryCapsParams.create(4, types=8, dim=8, rng=rng)
        fld = primary_capsules(Tensor(rng.normal((1, 4, 6, 6))), params)
        assert fld.count == 288  # 8 types * 6 * 6 locations
        assert fld.dim == 8
        assert fld.grid == (8, 6, 6)

    def test_channel_arithmetic_must_divide(self, rng):
        params = PrimaryCapsParams.create(5, types=3, dim=4, rng=rng)
        params.types = 4  # now kernel channels no longer match types*(dim+1)
        with pytest.raises(ConfigError):
            primary_capsules(Tensor(rng.normal((1, 5, 4, 4))), params)

    def test_activations_strictly_inside_unit_interval(self, rng):
        params = PrimaryCapsParams.create(3, types=2, dim=3, rng=rng)
        fld = primary_capsules(Tensor(rng.normal((2, 3, 5, 5))), params)
        assert (fld.activations.data > 0).all() and (fld.activations.data < 1).all()


class TestVotes:
    def test_identity_transform_broadcasts_poses(self, rng):
        poses = rng.normal((2, 4, 3))
        fld = CapsuleField(poses=Tensor(poses), activations=Tensor(np.full((2, 4), 0.5)))
        w = np.broadcast_to(np.eye(3), (4, 5, 3, 3)).copy()
        out = votes(fld, TransformParams(w=Tensor(w)))
        for j in range(5):
            npt.assert_allclose(out.data[:, :, j, :], poses, rtol=1e-12)

    def test_zero_poses(self, rng):
        fld = CapsuleField(poses=Tensor(np.zeros((1, 2, 3))),
                           activations=Tensor(np.full((1, 2), 0.5)))
        out = votes(fld, TransformParams.create(2, 4, 3, rng))
        npt.assert_array_equal(out.data, 0.0)

    def test_hand_value(self):
        fld = CapsuleField(poses=Tensor([[[1.0, 2.0]]]),
                           activations=Tensor([[0.5]]))
        w = Tensor(np.array([[[[0.0, 1.0], [1.0, 0.0]]]]))
        out = votes(fld, TransformParams(w=w))
        npt.assert_array_equal(out.data.reshape(2), [2.0, 1.0])

    def test_types_shared_across_locations(self, rng):
        # 2 types x 3 locations: same pose at every location of a type
        pose_a, pose_b = rng.normal((3,)), rng.normal((3,))
        poses = np.stack([pose_a] * 3 + [pose_b] * 3)[None]
        fld = CapsuleField(poses=Tensor(poses), activations=Tensor(np.full((1, 6), 0.5)))
        out = votes(fld, TransformParams.create(2, 2, 3, rng)).data
        for loc in range(1, 3):
            npt.assert_allclose(out[0, loc], out[0, 0], rtol=1e-12)
            npt.assert_allclose(out[0, 3 + loc], out[0, 3], rtol=1e-12)

    def test_dim_mismatch(self, rng):
        fld = CapsuleField(poses=Tensor(rng.normal((1, 2, 3))),
                           activations=Tensor(np.full((1, 2), 0.5)))
        with pytest.raises(ShapeError):
            votes(fld, TransformParams.create(2, 2, 4, rng))


class TestSquash:
    def test_zero_maps_to_zero(self):
        out = squash(Tensor(np.zeros((2, 3))))
        npt.assert_array_equal(out.data, 0.0)

    def test_hand_value_c1(self):
        out = squash(Tensor([[3.0, 4.0]]), c=1.0)
        npt.assert_allclose(out.data, [[0.576923, 0.769231]], atol=1e-6)

    @given(st.lists(st.floats(-100, 100), min_size=2, max_size=6))
    @settings(max_examples=60, deadline=None)
    def test_norm_strictly_below_one(self, vec):
        out = squash(Tensor(np.array([vec])))
        assert np.linalg.norm(out.data) < 1.0

    def test_norm_monotone_in_input_norm(self, rng):
        direction = rng.normal((4,))
        direction /= np.linalg.norm(direction)
        scales = np.linspace(0.1, 10.0, 25)
        norms = [np.linalg.norm(squash(Tensor(direction[None] * s)).data)
                 for s in scales]
        assert all(b > a for a, b in zip(norms, norms[1:]))


class TestReluRoute:
    def test_negative_preactivation_zeroes(self, rng):
        out = relu_route(Tensor(rng.uniform((2, 3), 0, 1) * 0.0),
                         Tensor(np.zeros((3, 4))), Tensor(np.full(4, -1.0)))
        npt.assert_array_equal(out.data, 0.0)

    def test_identity_on_nonnegative(self, rng):
        x = np.abs(rng.normal((3, 4)))
        out = relu_route(Tensor(x), Tensor(np.eye(4)), Tensor(np.zeros(4)))
        npt.assert_array_equal(out.data, x)

    def test_hand_value(self):
        out = relu_route(Tensor([[1.0, -2.0]]), Tensor(np.eye(2)),
                         Tensor([0.0, 3.0]))
        npt.assert_array_equal(out.data, [[1.0, 1.0]])


class TestEmRouting:
    def test_degenerate_one_to_one(self):
        v = Tensor(np.array([[[[0.3, -0.7, 0.1]]]]))
        a = Tensor(np.array([[0.8]]))
        trace = []
        a_out, mu = em_routing(v, a, Tensor(np.zeros(1)), Tensor(np.asarray(0.9)),
                               iters=3, trace=trace)
        npt.assert_allclose(mu.data, v.data[:, 0], rtol=1e-12)
        for step in trace:
            npt.assert_array_equal(step["r"], 1.0)
            npt.assert_allclose(step["sigma2"], 1e-4)

    def test_identical_votes_all_parents_share_mean(self, rng):
        vote = rng.normal((3,))
        v = np.broadcast_to(vote, (1, 2, 2, 3)).copy()
        a_out, mu = em_routing(Tensor(v), Tensor(np.full((1, 2), 0.7)),
                               Tensor(np.array([0.5, -0.5])),
                               Tensor(np.asarray(0.9)), iters=3)
        npt.assert_allclose(mu.data[0, 0], vote, rtol=1e-12)
        npt.assert_allclose(mu.data[0, 1], vote, rtol=1e-12)
        # distinct offsets order the activations
        assert a_out.data[0, 0] > a_out.data[0, 1]

    def test_matches_scripted_oracle(self, rng):
        v, a, b, k = random_instance(rng, n=2, ci=3, co=2, d=2)
        trace = []
        em_routing(v, a, b, k, iters=3, trace=trace)
        expected = em_oracle(v.data, a.data, b.data, float(k.data), iters=3)
        for got, want in zip(trace, expected):
            for key in ("r", "mu", "sigma2", "j", "a"):
                npt.assert_allclose(got[key], want[key], atol=1e-9,
                                    err_msg=f"quantity {key}")

    def test_assignments_normalized_every_iteration(self, rng):
        for _ in range(20):
            v, a, b, k = random_instance(rng, n=2, ci=4, co=3, d=3)
            trace = []
            em_routing(v, a, b, k, iters=3, trace=trace)
            for step in trace:
                npt.assert_allclose(step["r"].sum(axis=-1), 1.0, atol=1e-6)

    def test_parent_permutation_equivariance_exact(self, rng):
        v, a, b, k = random_instance(rng, n=2, ci=4, co=3, d=3)
        perm = np.array([2, 0, 1])
        a1, m1 = em_routing(v, a, b, k, iters=3)
        a2, m2 = em_routing(Tensor(v.data[:, :, perm, :]), a,
                            Tensor(b.data[perm]), k, iters=3)
        npt.assert_array_equal(a1.data[:, perm], a2.data)
        npt.assert_array_equal(m1.data[:, perm], m2.data)

    def test_vote_coordinate_permutation_equivariance_exact(self, rng):
        v, a, b, k = random_instance(rng, n=2, ci=4, co=3, d=4)
        perm = np.array([3, 0, 2, 1])
        a1, m1 = em_routing(v, a, b, k, iters=3)
        a2, m2 = em_routing(Tensor(v.data[..., perm]), a, b, k, iters=3)
        npt.assert_array_equal(a1.data, a2.data)
        npt.assert_array_equal(m1.data[..., perm], m2.data)

    def test_activations_open_interval(self, rng):
        for _ in range(10):
            v, a, b, k = random_instance(rng, n=2, ci=5, co=3, d=4)
            a_out, _ = em_routing(v, a, b, k, iters=3)
            assert (a_out.data > 0).all() and (a_out.data < 1).all()

    def test_variance_floor_respected(self, rng):
        v, a, b, k = random_instance(rng, n=1, ci=4, co=2, d=3)
        trace = []
        em_routing(v, a, b, k, iters=3, var_floor=1e-4, trace=trace)
        for step in trace:
            assert (step["sigma2"] >= 1e-4 - 1e-15).all()

    def test_iters_validated(self, rng):
        v, a, b, k = random_instance(rng)
        with pytest.raises(ConfigError):
            em_routing(v, a, b, k, iters=0)


class TestPredict:
    def _field(self, acts):
        acts = np.asarray(acts, dtype=np.float64)
        poses = np.zeros(acts.shape + (2,))
        return CapsuleField(poses=Tensor(poses), activations=Tensor(acts))

    def test_argmax(self):
        assert predict(self._field([[0.1, 0.9, 0.3]])).tolist() == [1]

    def test_tie_breaks_low_index(self):
        assert predict(self._field([[0.4, 0.4, 0.4]])).tolist() == [0]

    def test_monotone_transform_invariance(self, rng):
        acts = rng.uniform((4, 10), 0.05, 0.95)
        base = predict(self._field(acts))
        npt.assert_array_equal(base, predict(self._field(acts / 2.0)))
