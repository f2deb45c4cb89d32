import numpy as np
import pytest

from conftest import rand_matrix, unit
from logstab.errors import CapacityError, ContractViolation, DimensionError
from logstab.extremal import vertex_oracle
from logstab.linalg import frobenius_inner, frobenius_norm
from logstab.outer import parse_result
from logstab.two_layer import (
    TwoLayerInstance,
    double_vertex_oracle,
    eval_two_layer,
    format_two_layer_result,
    joint_extremizer,
    two_layer_gradients,
    two_layer_stabilize,
)


def _pair(seed, k=3, n=3):
    rng = np.random.default_rng(seed)
    return rng.standard_normal((k, n)), rng.standard_normal((n, k))


def test_identity_second_layer_reduces_to_one_layer():
    A1 = rand_matrix(0, 3)
    inst = TwoLayerInstance(A1, np.eye(3), 1.0, -5.0)
    ev = eval_two_layer(inst, 1e-3, unit(rand_matrix(1, 3)), unit(rand_matrix(2, 3)))
    B1, B2 = inst.weights(1e-3, unit(rand_matrix(1, 3)), unit(rand_matrix(2, 3)))
    assert ev.bundle.lambda_max == pytest.approx(vertex_oracle(B2 @ B1, 1.0).mu_value, abs=1e-12)


@pytest.mark.parametrize("a, c", [(2.0, 3.0), (2.0, -3.0), (-1.5, 0.5), (-1.0, -4.0)])
def test_scalar_joint_max(a, c):
    jx = joint_extremizer(np.array([[a]]), np.array([[c]]), 0.5)
    want = c * a if c * a > 0 else 0.25 * c * a
    assert jx.mu_value == pytest.approx(want)


@pytest.mark.parametrize("seed", range(10))
def test_joint_matches_double_oracle(seed):
    B1, B2 = _pair(seed)
    assert abs(joint_extremizer(B1, B2, 0.5).mu_value - double_vertex_oracle(B1, B2, 0.5).mu_value) <= 1e-7


def test_joint_rectangular_layers():
    B1, B2 = _pair(3, k=4, n=2)
    assert abs(joint_extremizer(B1, B2, 0.3).mu_value - double_vertex_oracle(B1, B2, 0.3).mu_value) <= 1e-7


def test_double_oracle_capacity():
    with pytest.raises(CapacityError):
        double_vertex_oracle(np.ones((11, 10)), np.ones((10, 11)), 0.5)


def test_instance_contracts():
    with pytest.raises(DimensionError):
        TwoLayerInstance(np.ones((3, 2)), np.ones((3, 2)), 0.5, 0.0)
    with pytest.raises(ContractViolation):
        TwoLayerInstance(np.ones((2, 2)), np.ones((2, 2)), 0.0, 0.0)


def test_gradients_inactive_zero():
    inst = TwoLayerInstance(-np.eye(3), np.eye(3), 0.5, 0.0)
    E1, E2 = unit(rand_matrix(1, 3)), unit(rand_matrix(2, 3))
    ev = eval_two_layer(inst, 0.01, E1, E2)
    G1, G2 = two_layer_gradients(inst, 0.01, E1, E2, ev.bundle, ev.d1, ev.d2)
    assert not np.any(G1) and not np.any(G2)


def _F(inst, eps, E1, E2):
    return eval_two_layer(inst, eps, E1, E2, polish=True).F


@pytest.mark.parametrize("seed", range(4))
def test_gradients_finite_difference(seed):
    rng = np.random.default_rng(seed)
    A1, A2 = _pair(seed)
    eps = 0.1
    E1, E2 = unit(rng.standard_normal((3, 3))), unit(rng.standard_normal((3, 3)))
    B1, B2 = A1 + eps * E1, A2 + eps * E2
    inst = TwoLayerInstance(A1, A2, 0.5, double_vertex_oracle(B1, B2, 0.5).mu_value - 0.3)
    ev = eval_two_layer(inst, eps, E1, E2)
    G1, G2 = two_layer_gradients(inst, eps, E1, E2, ev.bundle, ev.d1, ev.d2)
    h = 1e-6
    for _ in range(3):
        V = unit(rng.standard_normal((3, 3)))
        fd1 = (_F(inst, eps, E1 + h * V, E2) - _F(inst, eps, E1 - h * V, E2)) / (2 * h * eps)
        fd2 = (_F(inst, eps, E1, E2 + h * V) - _F(inst, eps, E1, E2 - h * V)) / (2 * h * eps)
        assert abs(frobenius_inner(G1, V) - fd1) <= 1e-4 * max(abs(fd1), 1e-3)
        assert abs(frobenius_inner(G2, V) - fd2) <= 1e-4 * max(abs(fd2), 1e-3)


def test_gradients_transpose_symmetry():
    # with m = 1 both diagonals are the identity and the formulas mirror each other
    A1 = rand_matrix(5, 3)
    E1 = unit(rand_matrix(6, 3))
    inst = TwoLayerInstance(A1, A1.T, 1.0, -10.0)
    ev = eval_two_layer(inst, 0.0, E1, E1.T)
    G1, G2 = two_layer_gradients(inst, 0.0, E1, E1.T, ev.bundle, ev.d1, ev.d2)
    assert np.allclose(G1, G2.T, atol=1e-12)


def test_stabilize_already_satisfied():
    A1, A2 = _pair(0)
    mu = double_vertex_oracle(A1, A2, 0.5).mu_value
    res = two_layer_stabilize(TwoLayerInstance(A1, A2, 0.5, mu + 1.0))
    assert res.already_satisfied and res.epsilon_star == 0.0
    assert not np.any(res.E1_star) and not np.any(res.E2_star)


def test_stabilize_scalar_closed_form():
    # (c - eps)(a - eps) = delta for a, c > 0
    a, c, delta = 2.0, 3.0, 1.0
    res = two_layer_stabilize(TwoLayerInstance(np.array([[a]]), np.array([[c]]), 0.5, delta))
    want = 0.5 * ((a + c) - np.sqrt((a - c) ** 2 + 4 * delta))
    assert res.converged
    assert res.epsilon_star == pytest.approx(want, abs=1e-6)


@pytest.mark.parametrize("seed", [100, 101])
def test_stabilize_random_pair(seed):
    A1, A2 = _pair(seed)
    mu0 = double_vertex_oracle(A1, A2, 0.5).mu_value
    res = two_layer_stabilize(TwoLayerInstance(A1, A2, 0.5, 0.5 * mu0))
    assert res.converged
    assert abs(double_vertex_oracle(res.A1_hat, res.A2_hat, 0.5).mu_value - res.delta) <= 1e-6
    assert abs(frobenius_norm(res.E1_star) - 1) <= 1e-12
    assert abs(frobenius_norm(res.E2_star) - 1) <= 1e-12


def test_result_document():
    A1, A2 = _pair(101)
    mu0 = double_vertex_oracle(A1, A2, 0.5).mu_value
    res = two_layer_stabilize(TwoLayerInstance(A1, A2, 0.5, 0.5 * mu0))
    doc = parse_result(format_two_layer_result(res))
    assert set(doc["matrices"]) >= {"E1_star", "E2_star", "A1_hat", "A2_hat"}
    assert float(doc["header"]["epsilon_star"]) == res.epsilon_star
