import numpy as np
import pytest

from conftest import rand_matrix
from logstab.errors import ConfigError, ContractViolation, DimensionError, DivergenceError
from logstab.extremal import vertex_oracle
from logstab.node import (
    NeuralOdeModel,
    SmoothedLeakyReLU,
    activation,
    activation_derivative,
    format_report,
    forward,
    lipschitz_bound,
    read_manifest,
    verify_bound,
    write_manifest,
)
from logstab.outer import stabilize


def _bisect(f, lo, hi, tol=1e-12):
    while hi - lo > tol:
        mid = 0.5 * (lo + hi)
        if np.sign(f(mid)) == np.sign(f(lo)):
            lo = mid
        else:
            hi = mid
    return 0.5 * (lo + hi)


def test_activation_origin():
    assert activation(0.0) == 0.0
    assert activation_derivative(0.0) == 1.0
    assert activation_derivative(1e-9) == 1.0


def test_junction_constants():
    z_bar = _bisect(lambda z: 1 - np.tanh(z) ** 2 - 0.1, 0.0, 10.0)
    beta = np.tanh(-z_bar) + 0.1 * z_bar
    sigma = SmoothedLeakyReLU(0.1)
    assert sigma.z_bar == pytest.approx(z_bar, abs=1e-10)
    assert sigma.beta == pytest.approx(beta, abs=1e-10)
    assert sigma.z_bar == pytest.approx(1.81845, abs=1e-5)
    assert sigma.beta == pytest.approx(-0.76684, abs=1e-5)


def test_activation_continuous_and_c1():
    sigma = SmoothedLeakyReLU(0.1)
    zb, h = sigma.z_bar, 1e-9
    assert abs(sigma(-zb - h) - sigma(-zb + h)) <= 1e-8
    assert abs(sigma.derivative(-zb - h) - sigma.derivative(-zb + h)) <= 1e-8


def test_derivative_range():
    z = np.random.default_rng(0).uniform(-100, 100, 1_000_000)
    d = activation_derivative(z)
    assert d.min() >= 0.1 and d.max() <= 1.0


def test_derivative_matches_finite_difference():
    z = np.linspace(-5, 5, 101) + 1e-3
    h = 1e-6
    fd = (activation(z + h) - activation(z - h)) / (2 * h)
    assert np.allclose(fd, activation_derivative(z), atol=1e-6)


def test_alpha_contract():
    with pytest.raises(ContractViolation):
        SmoothedLeakyReLU(1.0)


def test_forward_zero_field_constant():
    model = NeuralOdeModel([(np.zeros((3, 3)), np.zeros(3))], steps=50)
    x0 = np.array([0.3, -1.0, 2.0])
    traj = forward(model, x0)
    assert traj.shape == (51, 3)
    assert np.all(traj == x0)


def test_forward_linear_decay():
    model = NeuralOdeModel([(np.array([[-1.0]]), np.zeros(1))], horizon=1.0, steps=2000)
    x0 = 1e-3
    xT = forward(model, np.array([x0]))[-1, 0]
    assert abs(xT - x0 * np.exp(-1.0)) <= 0.05 * x0 * np.exp(-1.0)


def test_forward_batch_matches_single():
    model = NeuralOdeModel([(rand_matrix(0, 3), np.ones(3))], steps=20)
    X = np.random.default_rng(1).standard_normal((5, 3))
    batch = forward(model, X)
    for i in range(5):
        assert np.allclose(batch[:, i], forward(model, X[i]))


def test_forward_divergence():
    model = NeuralOdeModel([(1e200 * np.eye(2), np.zeros(2))], steps=10)
    with pytest.raises(DivergenceError) as exc:
        forward(model, np.ones(2))
    assert exc.value.step >= 1


def test_forward_dimension_check():
    model = NeuralOdeModel([(np.eye(2), np.zeros(2))])
    with pytest.raises(DimensionError):
        forward(model, np.ones(3))


def test_model_contracts():
    with pytest.raises(ContractViolation):
        NeuralOdeModel([(np.eye(2), np.zeros(2))], kind="lstm")
    with pytest.raises(DimensionError):
        NeuralOdeModel([(np.eye(2), np.zeros(3))])
    with pytest.raises(DimensionError):
        NeuralOdeModel([(np.eye(2), np.zeros(2))], kind="two_layer")


def test_two_layer_and_nsd_fields():
    rng = np.random.default_rng(2)
    A1, A2 = rng.standard_normal((4, 3)), rng.standard_normal((3, 4))
    two = NeuralOdeModel([(A1, np.zeros(4)), (A2, np.zeros(3))], kind="two_layer")
    x = rng.standard_normal(3)
    assert np.allclose(two.field(x), activation(A2 @ activation(A1 @ x)))
    nsd = NeuralOdeModel([(A1, np.zeros(4))], kind="nsd")
    assert nsd.dim == 3
    assert np.allclose(nsd.field(x), -A1.T @ activation(A1 @ x))


def _stabilized_model(seed, delta, n=4, steps=2000):
    rng = np.random.default_rng(seed)
    A, b = rng.standard_normal((n, n)), rng.standard_normal(n)
    res = stabilize(A, delta, 0.1)
    assert res.converged
    return NeuralOdeModel([(res.A_hat, b)], SmoothedLeakyReLU(0.1), 1.0, steps)


def test_verify_nonexpansive():
    rep = verify_bound(_stabilized_model(600, 0.0), 0.0, trials=300)
    assert rep.violations == 0 and rep.max_amplification <= 1 + 1e-3


def test_verify_contractive():
    rep = verify_bound(_stabilized_model(601, -0.2), -0.2, trials=300)
    assert rep.violations == 0 and rep.max_amplification < 1


def test_verify_unstabilized_bound_and_aligned_growth():
    rng = np.random.default_rng(3)
    Q, _ = np.linalg.qr(rng.standard_normal((3, 3)))
    A = Q @ np.diag([0.8, 0.3, -0.5]) @ Q.T
    mu0 = vertex_oracle(A, 0.1).mu_value
    model = NeuralOdeModel([(A, 5.0 * np.ones(3))], SmoothedLeakyReLU(0.1), 1.0, 2000)
    rep = verify_bound(model, mu0, trials=300)
    assert rep.violations == 0
    # with a large bias the state stays where the field is affine, A x + b
    v = 1e-6 * Q[:, 0]
    x0 = np.zeros(3)
    amp = np.linalg.norm(forward(model, x0 + v)[-1] - forward(model, x0)[-1]) / 1e-6
    assert amp >= 0.5 * np.exp(mu0)


def test_verify_report_text():
    # worst-case slope of sigma is alpha, so mu2(D(-I)) peaks at -alpha
    model = NeuralOdeModel([(-np.eye(2), np.zeros(2))], steps=10)
    rep = verify_bound(model, -0.1, trials=10, seed=4)
    text = format_report(rep)
    assert "violations = 0" in text and "seed = 4" in text
    with pytest.raises(ContractViolation):
        verify_bound(model, 0.0, trials=0)


def test_lipschitz_bound_examples():
    assert lipschitz_bound([1.0, 1.0], 0.0, 1.0) == 1.0
    assert lipschitz_bound([2.0], np.log(2.0), 1.0) == pytest.approx(4.0)
    with pytest.raises(ContractViolation):
        lipschitz_bound([-1.0], 0.0, 1.0)


def test_lipschitz_bound_dominates_classifier():
    rng = np.random.default_rng(5)
    n, p, c = 4, 3, 2
    ode = _stabilized_model(602, 0.0, n=n, steps=200)
    A1 = rng.standard_normal((n, p))
    A2 = rng.standard_normal((c, n))
    L = lipschitz_bound([np.linalg.norm(A1, 2), np.linalg.norm(A2, 2)], 0.0, 1.0)

    def out(X):
        Z = forward(ode, X @ A1.T)[-1]
        return Z @ A2.T

    X = rng.uniform(-1, 1, (1000, p))
    V = rng.standard_normal((1000, p))
    V *= 1e-3 / np.linalg.norm(V, axis=1, keepdims=True)
    ratio = np.linalg.norm(out(X + V) - out(X), axis=1) / 1e-3
    assert ratio.max() <= L * (1 + 1e-3)


def test_manifest_roundtrip(tmp_path):
    rng = np.random.default_rng(6)
    model = NeuralOdeModel(
        [(rng.standard_normal((4, 3)), rng.standard_normal(4)), (rng.standard_normal((3, 4)), rng.standard_normal(3))],
        SmoothedLeakyReLU(0.2), 0.5, 40, "two_layer",
    )
    path = tmp_path / "net.manifest"
    write_manifest(path, model)
    back = read_manifest(path)
    assert back.kind == "two_layer" and back.steps == 40 and back.horizon == 0.5
    assert back.activation.alpha == 0.2
    for (W, b), (W2, b2) in zip(model.layers, back.layers):
        assert np.array_equal(W, W2) and np.array_equal(b, b2)


def test_manifest_errors(tmp_path):
    path = tmp_path / "bad.manifest"
    path.write_text("kind = one_layer\nA1 = missing.txt\nb1 = missing.txt\n")
    with pytest.raises(ConfigError):
        read_manifest(path)
    path.write_text("kind = one_layer\n")
    with pytest.raises(ConfigError, match="missing key"):
        read_manifest(path)
