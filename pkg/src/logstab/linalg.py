"""Dense matrix primitives, Frobenius geometry and the logarithmic 2-norm.

Matrices are plain 2-D ``numpy.ndarray`` objects of dtype float64.  The
symmetric eigensolver wraps LAPACK (``numpy.linalg.eigh``) and fixes the
ordering and sign of the eigenvectors so that every flow built on top of it
is reproducible bit-for-bit.

The text matrix format used throughout the package is::

    rows cols
    a11 a12 ... a1c
    ...
    ar1 ar2 ... arc
"""

from dataclasses import dataclass
import os

import numpy as np

from .errors import ConfigError, ContractViolation, DimensionError
from ._io import atomic_write_text

__all__ = [
    "SpectralBundle",
    "as_matrix",
    "sym",
    "frobenius_inner",
    "frobenius_norm",
    "normalize",
    "symmetric_eig",
    "mu2",
    "format_matrix",
    "parse_matrix",
    "read_matrix",
    "write_matrix",
]

SYMMETRY_RTOL = 1e-12
_TIE_RTOL = 1e-10


@dataclass(frozen=True)
class SpectralBundle:
    """Eigenpairs of a real symmetric matrix.

    Attributes
    ----------
    eigenvalues : ndarray, shape (n,)
        Sorted in descending order.
    eigenvectors : ndarray, shape (n, n)
        Column ``i`` is the unit eigenvector for ``eigenvalues[i]``.
    """

    eigenvalues: np.ndarray
    eigenvectors: np.ndarray

    @property
    def lambda_max(self) -> float:
        return float(self.eigenvalues[0])

    @property
    def leading_vector(self) -> np.ndarray:
        return self.eigenvectors[:, 0]

    def gap(self) -> float:
        """Distance between the two largest eigenvalues (inf when n = 1)."""
        if self.eigenvalues.size < 2:
            return np.inf
        return float(self.eigenvalues[0] - self.eigenvalues[1])

    def active(self, delta: float) -> np.ndarray:
        """Boolean mask of eigenvalues strictly above ``delta``."""
        return self.eigenvalues > delta


def as_matrix(M, name="matrix") -> np.ndarray:
    """Convert to a finite float64 2-D array or raise."""
    A = np.asarray(M, dtype=float)
    if A.ndim == 0:
        A = A.reshape(1, 1)
    if A.ndim != 2 or A.shape[0] < 1 or A.shape[1] < 1:
        raise DimensionError(f"{name} must be a non-empty 2-D array, got shape {A.shape}")
    if not np.all(np.isfinite(A)):
        raise ContractViolation(f"{name} has non-finite entries")
    return A


def _square(M, name="matrix") -> np.ndarray:
    A = as_matrix(M, name)
    if A.shape[0] != A.shape[1]:
        raise DimensionError(f"{name} must be square, got shape {A.shape}")
    return A


def sym(M) -> np.ndarray:
    """Symmetric part ``(M + M^T) / 2`` of a square matrix."""
    A = _square(M)
    return 0.5 * (A + A.T)


def frobenius_inner(M, N) -> float:
    """Frobenius inner product ``sum_ij M_ij N_ij``."""
    A = np.asarray(M, dtype=float)
    B = np.asarray(N, dtype=float)
    if A.shape != B.shape:
        raise DimensionError(f"shape mismatch {A.shape} vs {B.shape}")
    return float(np.vdot(A, B))


def frobenius_norm(M) -> float:
    return float(np.linalg.norm(np.asarray(M, dtype=float)))


def normalize(M) -> np.ndarray:
    """Scale ``M`` to unit Frobenius norm."""
    A = np.asarray(M, dtype=float)
    nrm = frobenius_norm(A)
    if nrm == 0.0:
        raise ContractViolation("cannot normalize the zero matrix")
    return A / nrm


def _canonical_signs(V: np.ndarray) -> np.ndarray:
    # largest-magnitude component nonnegative; near-ties go to the lowest index
    mags = np.abs(V)
    top = mags.max(axis=0)
    idx = np.argmax(mags >= top * (1.0 - _TIE_RTOL), axis=0)
    signs = np.sign(V[idx, np.arange(V.shape[1])])
    signs[signs == 0] = 1.0
    return V * signs


def symmetric_eig(M, check=True) -> SpectralBundle:
    """Full eigendecomposition of a symmetric matrix.

    Eigenvalues come back in descending order (ties keep LAPACK's order) and
    each eigenvector has its largest-magnitude entry nonnegative.

    Parameters
    ----------
    M : array_like, shape (n, n)
    check : bool
        Verify symmetry to a relative tolerance of 1e-12.  Internal callers
        that build ``M`` as an exact symmetric part skip the check.

    Raises
    ------
    ContractViolation
        If ``M`` is asymmetric beyond tolerance.
    """
    A = _square(M)
    if check:
        scale = max(frobenius_norm(A), np.finfo(float).tiny)
        if frobenius_norm(A - A.T) > SYMMETRY_RTOL * scale:
            raise ContractViolation("matrix is not symmetric within tolerance")
    w, V = np.linalg.eigh(A)
    order = np.argsort(-w, kind="stable")
    return SpectralBundle(w[order], _canonical_signs(V[:, order]))


def mu2(M) -> float:
    """Logarithmic 2-norm: the largest eigenvalue of ``sym(M)``."""
    return float(np.linalg.eigvalsh(sym(M))[-1])


# ---- text matrix format ----------------------------------------------------


def format_matrix(M) -> str:
    A = as_matrix(M)
    lines = [f"{A.shape[0]} {A.shape[1]}"]
    lines += [" ".join(repr(float(v)) for v in row) for row in A]
    return "\n".join(lines) + "\n"


def parse_matrix(text: str, source="<string>") -> np.ndarray:
    """Parse the text matrix format; errors carry 1-based line numbers."""
    lines = text.splitlines()
    while lines and not lines[-1].strip():
        lines.pop()
    if not lines:
        raise ConfigError(f"{source}:1: empty matrix file")
    head = lines[0].split()
    try:
        rows, cols = (int(t) for t in head)
    except ValueError:
        raise ConfigError(f"{source}:1: expected 'rows cols', got {lines[0]!r}") from None
    if rows < 1 or cols < 1:
        raise ConfigError(f"{source}:1: dimensions must be positive")
    if len(lines) - 1 != rows:
        raise ConfigError(f"{source}:{len(lines) + 1}: expected {rows} data rows, found {len(lines) - 1}")
    out = np.empty((rows, cols))
    for i, line in enumerate(lines[1:]):
        tokens = line.split()
        if len(tokens) != cols:
            raise ConfigError(f"{source}:{i + 2}: expected {cols} values, found {len(tokens)}")
        try:
            out[i] = [float(t) for t in tokens]
        except ValueError:
            raise ConfigError(f"{source}:{i + 2}: non-numeric entry in {line!r}") from None
    if not np.all(np.isfinite(out)):
        raise ConfigError(f"{source}: non-finite entries")
    return out


def read_matrix(path) -> np.ndarray:
    with open(path) as fh:
        return parse_matrix(fh.read(), source=os.fspath(path))


def write_matrix(path, M) -> None:
    atomic_write_text(path, format_matrix(M))
