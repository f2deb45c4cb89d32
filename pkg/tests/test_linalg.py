import numpy as np
import pytest
from hypothesis import given, settings, strategies as st
from hypothesis.extra.numpy import arrays

from logstab.errors import ConfigError, ContractViolation, DimensionError
from logstab.linalg import (
    format_matrix,
    frobenius_inner,
    frobenius_norm,
    mu2,
    normalize,
    parse_matrix,
    read_matrix,
    sym,
    symmetric_eig,
    write_matrix,
)

finite = st.floats(-10, 10, allow_nan=False, allow_infinity=False)
square = st.integers(1, 6).flatmap(lambda n: arrays(float, (n, n), elements=finite))


def test_sym_skew_vanishes():
    assert np.array_equal(sym([[0.0, 1.0], [-1.0, 0.0]]), np.zeros((2, 2)))


def test_sym_fixes_symmetric():
    S = np.array([[2.0, -1.0], [-1.0, 5.0]])
    assert np.array_equal(sym(S), S)


def test_sym_formula():
    assert np.array_equal(sym([[1.0, 2.0], [0.0, 3.0]]), [[1.0, 1.0], [1.0, 3.0]])


def test_sym_rejects_rectangular():
    with pytest.raises(DimensionError):
        sym(np.ones((2, 3)))


def test_frobenius_inner_examples():
    assert frobenius_inner(np.eye(2), np.eye(2)) == 2.0
    assert frobenius_inner(np.ones((3, 3)), np.zeros((3, 3))) == 0.0
    assert frobenius_inner([[1, 2], [3, 4]], [[4, 3], [2, 1]]) == 20.0


def test_frobenius_inner_shape_mismatch():
    with pytest.raises(DimensionError):
        frobenius_inner(np.eye(2), np.eye(3))


def test_normalize_zero_rejected():
    with pytest.raises(ContractViolation):
        normalize(np.zeros((2, 2)))


def test_eig_diagonal():
    b = symmetric_eig(np.diag([3.0, 1.0, 2.0]))
    assert np.array_equal(b.eigenvalues, [3.0, 2.0, 1.0])
    assert np.allclose(b.eigenvectors, np.eye(3)[:, [0, 2, 1]])


def test_eig_swap():
    b = symmetric_eig([[0.0, 1.0], [1.0, 0.0]])
    assert np.allclose(b.eigenvalues, [1.0, -1.0])
    s = 1 / np.sqrt(2)
    assert np.allclose(b.eigenvectors[:, 0], [s, s])
    assert np.allclose(b.eigenvectors[:, 1], [s, -s])


def test_eig_reconstruction_5x5(rng):
    M = rng.standard_normal((5, 5))
    M = M + M.T
    b = symmetric_eig(M)
    R = (b.eigenvectors * b.eigenvalues) @ b.eigenvectors.T
    assert frobenius_norm(R - M) <= 1e-10 * frobenius_norm(M)


def test_eig_rejects_asymmetric():
    with pytest.raises(ContractViolation):
        symmetric_eig([[1.0, 2.0], [0.0, 1.0]])


@settings(max_examples=60, deadline=None)
@given(square)
def test_eig_properties(M):
    S = sym(M)
    b = symmetric_eig(S)
    assert np.all(np.diff(b.eigenvalues) <= 0)
    assert np.allclose(b.eigenvectors.T @ b.eigenvectors, np.eye(S.shape[0]), atol=1e-10)
    R = (b.eigenvectors * b.eigenvalues) @ b.eigenvectors.T
    assert frobenius_norm(R - S) <= 1e-10 * max(1.0, frobenius_norm(S))
    mags = np.abs(b.eigenvectors)
    top = np.argmax(mags >= mags.max(axis=0) * (1 - 1e-10), axis=0)
    assert np.all(b.eigenvectors[top, np.arange(S.shape[0])] >= 0)


def test_mu2_examples():
    assert mu2(np.eye(3)) == pytest.approx(1.0)
    assert mu2([[0.0, 2.0], [-2.0, 0.0]]) == pytest.approx(0.0, abs=1e-15)
    assert mu2([[-2.0, 1.0], [0.0, -2.0]]) == pytest.approx(-1.5, abs=1e-14)


@settings(max_examples=60, deadline=None)
@given(square)
def test_mu2_bounds_rayleigh(M):
    x = np.ones(M.shape[0]) / np.sqrt(M.shape[0])
    assert mu2(M) >= x @ M @ x - 1e-9 * max(1.0, np.abs(M).max())


def test_matrix_text_roundtrip(tmp_path, rng):
    M = rng.standard_normal((3, 4))
    path = tmp_path / "m.txt"
    write_matrix(path, M)
    assert np.array_equal(read_matrix(path), M)
    assert np.array_equal(parse_matrix(format_matrix(M)), M)


@pytest.mark.parametrize(
    "text, line",
    [
        ("", 1),
        ("2\n1 2\n", 1),
        ("2 2\n1 2\n3 x\n", 3),
        ("2 2\n1 2 3\n3 4\n", 2),
        ("2 2\n1 2\n", 3),
    ],
)
def test_parse_errors_carry_line_numbers(text, line):
    with pytest.raises(ConfigError, match=f"<string>:{line}:"):
        parse_matrix(text)
