import math

import numpy as np
import pytest
from hypothesis import given, strategies as st

from ocsbp import tensor as T
from ocsbp.embeddings import coordinate_grid
from ocsbp.gradcheck import check_gradients
from ocsbp.icsbp import FixedK, MassThreshold, icsbp_cluster, icsbp_count_slots, parse_stop_policy
from ocsbp.kernels import DistanceKernel, KernelKind, ThresholdKernel, kernel_eval
from ocsbp.nn import RngState
from ocsbp.tensor import Tensor


def gaussian(sigma=0.3):
    return lambda field, seed: kernel_eval("gaussian", sigma, seed, field)


class TestPolicies:
    def test_parse(self):
        assert parse_stop_policy("fixed:5") == FixedK(5)
        assert parse_stop_policy("mass:20,11") == MassThreshold(20.0, 11)
        assert str(parse_stop_policy("mass:20,11")) == "mass:20,11"

    @pytest.mark.parametrize("text", ["fixed:", "fixed:0", "mass:20", "mass:-1,3", "unknown:3"])
    def test_parse_errors(self, text):
        with pytest.raises(ValueError):
            parse_stop_policy(text)

    def test_threshold_scales_with_area(self):
        assert MassThreshold(20, 11).threshold(32, 32) == pytest.approx(5.0)
        assert MassThreshold(20, 11).threshold(64, 64) == pytest.approx(20.0)


class TestCluster:
    def test_fixed_k_slot_count(self, rng):
        masks = icsbp_cluster(rng.standard_normal((8, 8, 3)), gaussian(), FixedK(5), RngState(0))
        assert masks.masks.shape == (5, 8, 8)
        assert icsbp_count_slots(masks) == 5
        assert masks.seeds.shape == (4, 2)

    def test_k1_is_all_ones(self, rng):
        masks = icsbp_cluster(rng.standard_normal((4, 4, 2)), gaussian(), FixedK(1), RngState(0))
        np.testing.assert_array_equal(masks.masks.data, np.ones((1, 4, 4)))

    def test_batched_matches_unbatched(self, rng):
        emb = rng.standard_normal((3, 6, 6, 2))
        batched = icsbp_cluster(emb, gaussian(), FixedK(4), RngState(5))
        assert batched.masks.shape == (3, 4, 6, 6)
        np.testing.assert_allclose(batched.masks.data.sum(axis=1), 1.0, atol=1e-6)

    def test_seed_is_scope_weighted_argmax(self, rng):
        emb = rng.standard_normal((5, 5, 2))
        stream = RngState(9)
        scores = RngState(9).open_uniform((1, 5, 5))[0]
        masks = icsbp_cluster(emb, gaussian(), FixedK(3), stream)
        i, j = masks.seeds[0]
        assert (i, j) == np.unravel_index(np.argmax(scores), scores.shape)
        i2, j2 = masks.seeds[1]
        weighted = masks.scopes[1] * scores
        assert (i2, j2) == np.unravel_index(np.argmax(weighted), weighted.shape)

    def test_scope_shrinks(self, rng):
        masks = icsbp_cluster(rng.standard_normal((6, 6, 2)), gaussian(), FixedK(5), RngState(1))
        for a, b in zip(masks.scopes, masks.scopes[1:]):
            assert (b <= a + 1e-7).all()

    def test_mass_threshold_stops_early_on_two_objects(self):
        emb = np.zeros((16, 16, 2))
        emb[:, 8:] = 5.0  # two well-separated clusters
        masks = icsbp_cluster(emb, gaussian(0.5), MassThreshold(20, 11), RngState(0))
        assert masks.num_slots == 3  # two clusters plus an empty residual scope
        np.testing.assert_allclose(masks.masks.data[-1], 0.0, atol=1e-6)

    def test_mass_threshold_bounded_by_kmax(self, rng):
        emb = rng.standard_normal((8, 8, 4)) * 10
        masks = icsbp_cluster(emb, gaussian(0.01), MassThreshold(0.001, 6), RngState(0))
        assert masks.num_slots <= 6

    def test_mass_threshold_requires_single_image(self, rng):
        with pytest.raises(ValueError, match="one image"):
            icsbp_cluster(rng.standard_normal((2, 4, 4, 2)), gaussian(), MassThreshold(5, 4), RngState(0))

    def test_same_seed_same_masks(self, rng):
        emb = rng.standard_normal((6, 6, 3))
        a = icsbp_cluster(emb, gaussian(), FixedK(4), RngState(3)).masks.data
        b = icsbp_cluster(emb, gaussian(), FixedK(4), RngState(3)).masks.data
        assert a.tobytes() == b.tobytes()


@pytest.mark.parametrize("kind", list(KernelKind))
@given(seed=st.integers(0, 2**32 - 1), k=st.integers(1, 8), mass=st.booleans())
def test_masks_partition_unity(kind, seed, k, mass):
    gen = np.random.default_rng(seed)
    emb = gen.uniform(-1, 1, (7, 9, 3))
    kernel = DistanceKernel(kind, K=max(k, 2))
    policy = MassThreshold(float(gen.uniform(1, 200)), k) if mass else FixedK(k)
    masks = icsbp_cluster(emb, kernel, policy, RngState(seed)).masks.data
    np.testing.assert_allclose(masks.sum(axis=0), 1.0, atol=1e-5)
    assert masks.min() >= 0.0


def test_hard_kernel_partition_is_seed_independent():
    # three separated clusters; a binary kernel assigns each cluster wholly to one mask
    gen = np.random.default_rng(0)
    emb = np.zeros((8, 8, 2))
    emb[:, :3] = [0, 0]
    emb[:, 3:6] = [5, 0]
    emb[:, 6:] = [0, 5]
    emb += gen.uniform(-0.1, 0.1, emb.shape)
    parts = []
    for s in (1, 2):
        m = icsbp_cluster(emb, ThresholdKernel(1.0), FixedK(4), RngState(s)).masks.data
        parts.append({m[k].tobytes() for k in range(4)})
    assert parts[0] == parts[1]


def test_masks_differentiable_in_embeddings_and_sigma():
    rng = np.random.default_rng(0)
    passed = 0
    for trial in range(6):
        emb = rng.uniform(-1, 1, (4, 5, 3))
        log_sigma = np.array(math.log(0.5))
        probe = rng.standard_normal((4, 4, 5))

        def fn(e, ls):
            kern = lambda f, s: kernel_eval("gaussian", T.exp(ls), s, f)
            return icsbp_cluster(e, kern, FixedK(4), RngState(trial)).masks

        check = check_gradients(fn, [emb, log_sigma], probe=probe)
        if check.kinked:
            continue
        assert check.rel_error < 1e-4
        passed += 1
    assert passed >= 4


def test_slot_order_varies_with_seed():
    emb = coordinate_grid(8, 8, np.float64)
    firsts = {tuple(icsbp_cluster(emb, gaussian(), FixedK(3), RngState(s)).seeds[0]) for s in range(20)}
    assert len(firsts) > 1


def test_two_pixel_hand_execution():
    # psi(z1, z2) = 0.4 and pixel 1 carries the larger seed score
    class Fixed:
        def open_uniform(self, shape):
            return np.array([[[0.9, 0.1]]])

    def kernel(field, seed):
        near = np.isclose(field.data[..., 0], seed.data[..., None, None, 0])
        return Tensor(np.where(near, 1.0, 0.4))

    emb = np.array([[[0.0], [1.0]]])
    masks = icsbp_cluster(emb, kernel, FixedK(2), Fixed()).masks.data
    np.testing.assert_allclose(masks[0], [[1.0, 0.4]])
    np.testing.assert_allclose(masks[1], [[0.0, 0.6]])
    np.testing.assert_allclose(masks.sum(axis=0), 1.0)
