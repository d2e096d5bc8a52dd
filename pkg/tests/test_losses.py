import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays

from multico3d import diffkernel as dk
from multico3d.diffkernel import ContractError, DimensionError, Parameter
from multico3d.losses import (LossWeightState, distillation_loss, dynamic_coefficient, dynamic_coefficients,
                              label_similarity, segmentation_loss, total_loss, uncertainty_map, voxel_contrast_loss)

import oracles
from experiments import balance_orbit

LOG2 = math.log(2)


# ---------------------------------------------------------------- uncertainty map

def test_uncertainty_examples():
    assert uncertainty_map(np.array([0.5, 0.9, 0.0, 1.0])).tolist() == pytest.approx([0, 0.8, 1, 1], abs=1e-15)
    assert uncertainty_map(np.array([0.5]))[0] == 0.0
    assert uncertainty_map(np.array([0.0]))[0] == 1.0 and uncertainty_map(np.array([1.0]))[0] == 1.0


@given(arrays(np.float64, 20, elements=st.floats(0, 1)))
def test_uncertainty_is_absolute_value_form(z):
    np.testing.assert_allclose(uncertainty_map(z), np.abs(2 * z - 1), rtol=0, atol=1e-15)


# ---------------------------------------------------------------- distillation and segmentation

def test_distillation_confident_target_against_half():
    assert distillation_loss(np.array([[1.0]]), dk.const(np.array([[0.5]]))).value == pytest.approx(LOG2, abs=1e-12)


def test_distillation_vanishes_for_uncertain_target():
    z_new = dk.const(np.random.default_rng(0).uniform(size=(2, 5)))
    assert distillation_loss(np.full((2, 5), 0.5), z_new).value == 0.0


def test_distillation_shape_mismatch():
    with pytest.raises(DimensionError):
        distillation_loss(np.zeros((2, 3)), dk.const(np.zeros((3, 2))))


@settings(max_examples=100, deadline=None)
@given(st.integers(1, 4), st.integers(1, 12), st.integers(0, 2 ** 31))
def test_distillation_matches_scalar_loop(m, v, seed):
    rng = np.random.default_rng(seed)
    z_old, z_new = rng.uniform(size=(m, v)), rng.uniform(size=(m, v))
    got = float(distillation_loss(z_old, dk.const(z_new)).value)
    assert got == pytest.approx(oracles.distillation(z_old, z_new), abs=1e-12)


def test_distillation_per_element_means():
    rng = np.random.default_rng(1)
    z_old, z_new = rng.uniform(size=(3, 2, 6)), rng.uniform(size=(3, 2, 6))
    per = distillation_loss(z_old, dk.const(z_new), per_element=True).value
    assert per.shape == (3,)
    for b in range(3):
        assert per[b] == pytest.approx(oracles.distillation(z_old[b], z_new[b]), abs=1e-12)


@pytest.mark.parametrize("seed", range(5))
def test_distillation_stationary_at_old_prediction(seed):
    z = np.random.default_rng(seed).uniform(0.01, 0.99, size=(3, 12))
    p = Parameter("z", z.copy())
    g = dk.backward(distillation_loss(z, p))["z"]
    assert np.linalg.norm(g) <= 1e-8


def test_segmentation_half_on_positive():
    assert segmentation_loss(dk.const(np.array([[0.5]])), np.array([[1]])).value == pytest.approx(LOG2, abs=1e-12)


def test_segmentation_perfect_prediction_hits_clamp_floor():
    y = np.array([[1, 0, 1]])
    val = float(segmentation_loss(dk.const(y.astype(float)), y).value)
    assert val == pytest.approx(-math.log(1 - 1e-7), rel=1e-6)


def test_segmentation_rejects_soft_labels():
    with pytest.raises(ContractError):
        segmentation_loss(dk.const(np.full((1, 2), 0.5)), np.array([[0.5, 1.0]]))


@settings(max_examples=100, deadline=None)
@given(st.integers(1, 4), st.integers(1, 12), st.integers(0, 2 ** 31))
def test_segmentation_matches_scalar_loop(n, v, seed):
    rng = np.random.default_rng(seed)
    z, y = rng.uniform(size=(n, v)), rng.integers(0, 2, size=(n, v))
    got = float(segmentation_loss(dk.const(z), y).value)
    assert got == pytest.approx(oracles.segmentation(z, y), abs=1e-12)
    assert got >= 0


# ---------------------------------------------------------------- label similarity and beta

def test_similarity_examples():
    assert label_similarity([1, 1, 0], [1, 0, 1]) == 1
    assert label_similarity([0, 0, 0], [1, 1, 1]) == 0
    with pytest.raises(DimensionError):
        label_similarity([1, 0], [1, 0, 1])


@given(st.integers(1, 10).flatmap(lambda k: st.tuples(arrays(np.uint8, k, elements=st.integers(0, 1)),
                                                      arrays(np.uint8, k, elements=st.integers(0, 1)))))
def test_similarity_matches_loop(pair):
    a, b = pair
    assert label_similarity(a, b) == oracles.similarity(a, b)


def test_beta_two_thirds():
    anchor = np.array([1, 1, 0])
    members = np.array([[1, 1, 1], [1, 0, 0]])  # C = 2 and 1
    assert dynamic_coefficient(anchor, 0, members) == pytest.approx(2 / 3, abs=1e-15)


def test_beta_skips_when_nothing_shared():
    assert dynamic_coefficients([1, 0], [[0, 1], [0, 0]]) is None
    assert dynamic_coefficient([1, 0], 0, [[0, 1]]) == 0.0


@settings(max_examples=100, deadline=None)
@given(st.integers(1, 5), st.integers(1, 9), st.integers(0, 2 ** 31))
def test_beta_matches_normalization_oracle(K, M, seed):
    rng = np.random.default_rng(seed)
    anchor, members = rng.integers(0, 2, K), rng.integers(0, 2, (M, K))
    got, ref = dynamic_coefficients(anchor, members), oracles.betas(anchor, members)
    if ref is None:
        assert got is None
        return
    np.testing.assert_allclose(got, ref, rtol=0, atol=1e-12)
    assert abs(got.sum() - 1) <= 1e-12 and np.all(got >= 0)


# ---------------------------------------------------------------- voxel contrast

def test_vc_singleton_member_gives_zero():
    emb = dk.const(np.array([[0.0, 0.0], [3.0, 4.0]]))
    assert float(voxel_contrast_loss(emb, [[1, 0], [1, 1]], [0]).value) == pytest.approx(0, abs=1e-15)


def test_vc_equal_distances_give_log_two():
    emb = dk.const(np.array([[0.0, 0.0], [1.0, 0.0], [0.0, 1.0]]))
    labels = [[1, 1], [1, 1], [1, 0]]  # C = 2 and 1
    assert float(voxel_contrast_loss(emb, labels, [0]).value) == pytest.approx(LOG2, abs=1e-12)


def test_vc_all_skipped_is_zero():
    emb = dk.const(np.random.default_rng(0).normal(size=(3, 2)))
    assert float(voxel_contrast_loss(emb, [[1, 0], [0, 1], [0, 0]], [0]).value) == 0.0


def test_vc_rejects_bad_arguments():
    emb = dk.const(np.zeros((3, 2)))
    with pytest.raises(ValueError):
        voxel_contrast_loss(emb, np.ones((3, 1)), [0], tau=0)
    with pytest.raises(DimensionError):
        voxel_contrast_loss(emb, np.ones((4, 1)), [0])


def _vc_instance(rng, S=8, K=3, one_hot=False):
    emb = rng.normal(size=(S, 4))
    if one_hot:
        labels = np.eye(K, dtype=np.int64)[rng.integers(0, K, S)]
    else:
        labels = rng.integers(0, 2, (S, K))
    anchors = rng.choice(S, size=int(rng.integers(1, S + 1)), replace=False)
    return emb, labels, anchors, float(rng.uniform(0.3, 2.0))


@settings(max_examples=100, deadline=None)
@given(st.integers(0, 2 ** 31), st.integers(2, 8))
def test_vc_matches_double_loop(seed, S):
    emb, labels, anchors, tau = _vc_instance(np.random.default_rng(seed), S=S)
    got = float(voxel_contrast_loss(dk.const(emb), labels, anchors, tau=tau).value)
    assert got == pytest.approx(oracles.voxel_contrast(emb, labels, anchors, tau=tau), abs=1e-10)
    assert got >= 0


@settings(max_examples=50, deadline=None)
@given(st.integers(0, 2 ** 31))
def test_vc_with_explicit_members_matches_double_loop(seed):
    rng = np.random.default_rng(seed)
    emb, labels, _, tau = _vc_instance(rng, S=10)
    anchors = rng.choice(10, 3, replace=False)
    members = np.array([rng.choice(np.delete(np.arange(10), p), 5) for p in anchors])
    got = float(voxel_contrast_loss(dk.const(emb), labels, anchors, members, tau=tau).value)
    assert got == pytest.approx(oracles.voxel_contrast(emb, labels, anchors, members, tau), abs=1e-10)


@pytest.mark.parametrize("seed", range(5))
def test_vc_gradient_passes_grad_check(seed):
    emb, labels, anchors, tau = _vc_instance(np.random.default_rng(seed))
    labels[:, 0] = 1
    rep = dk.grad_check(lambda e: voxel_contrast_loss(e, labels, anchors, tau=tau), emb, 1e-5, 1e-4)
    assert rep.passed


@pytest.mark.parametrize("seed", range(5))
def test_vc_normalized_gradient_passes_grad_check(seed):
    emb, labels, anchors, tau = _vc_instance(np.random.default_rng(seed))
    labels[:, 0] = 1
    assert dk.grad_check(lambda e: voxel_contrast_loss(e, labels, anchors, tau=tau, normalize=True), emb).passed


@settings(max_examples=100, deadline=None)
@given(st.integers(0, 2 ** 31), st.integers(2, 10))
def test_vc_one_hot_reduces_to_supervised_contrast(seed, S):
    emb, labels, anchors, tau = _vc_instance(np.random.default_rng(seed), S=S, one_hot=True)
    got = float(voxel_contrast_loss(dk.const(emb), labels, anchors, tau=tau).value)
    assert got == pytest.approx(oracles.supcon(emb, labels.argmax(1), anchors, tau), abs=1e-9)


@pytest.mark.parametrize("seed", range(5))
def test_vc_single_positive_is_increasing_in_its_distance(seed):
    rng = np.random.default_rng(seed)
    others = rng.normal(size=(4, 3)) * 3
    labels = [[1, 0], [1, 1], [0, 1], [0, 1], [0, 0], [0, 0]]
    direction = rng.normal(size=3)
    direction /= np.linalg.norm(direction)
    values = []
    for r in np.linspace(0.1, 5, 12):
        emb = np.vstack([np.zeros(3), r * direction, others])
        values.append(float(voxel_contrast_loss(dk.const(emb), labels, [0]).value))
    assert np.all(np.diff(values) > 0)


@pytest.mark.parametrize("seed", range(3))
def test_balance_orbit_higher_similarity_sits_closer(seed):
    d1, d2 = balance_orbit(3, 1, seed)
    assert d1 < d2
    assert d2 - d1 == pytest.approx(math.log(3), abs=1e-3)


# ---------------------------------------------------------------- total loss

def _comps(values):
    return {n: dk.const(np.float64(v)) for n, v in zip(("seg", "dis", "vc"), values)}


def test_total_of_one_two_three_is_six():
    assert float(total_loss(_comps([1, 2, 3]), LossWeightState.create()).value) == 6.0
    assert float(total_loss(_comps([1, 2, 3])).value) == 6.0


def test_total_stationary_point_at_log_loss():
    L = np.array([0.4, 1.7, 3.2])
    state = LossWeightState.create(np.log(L))
    g = dk.backward(total_loss(_comps(L), state))["loss_weights.s"]
    assert np.max(np.abs(g)) <= 1e-8


@settings(max_examples=100, deadline=None)
@given(arrays(np.float64, 3, elements=st.floats(0.01, 5)), arrays(np.float64, 3, elements=st.floats(-3, 3)))
def test_total_matches_direct_formula(L, s):
    got = float(total_loss(_comps(L), LossWeightState.create(s)).value)
    assert got == pytest.approx(oracles.total(L, s), abs=1e-12)


def test_total_weight_gradient_closed_form():
    L, s = np.array([0.5, 2.0, 1.0]), np.array([0.3, -0.4, 1.1])
    g = dk.backward(total_loss(_comps(L), LossWeightState.create(s)))["loss_weights.s"]
    np.testing.assert_allclose(g, -np.exp(-s) * L + 1, rtol=0, atol=1e-14)


def test_disabled_components_drop_their_weight_term():
    state = LossWeightState.create((0.5, 0.5, 0.5))
    got = float(total_loss({"seg": dk.const(np.float64(2.0))}, state).value)
    assert got == pytest.approx(math.exp(-0.5) * 2 + 0.5, abs=1e-15)


def test_total_rejects_empty_and_non_finite():
    with pytest.raises(ContractError):
        total_loss({})
    with pytest.raises(FloatingPointError):
        total_loss(_comps([1.0, np.nan, 1.0]))
