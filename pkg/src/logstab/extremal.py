"""Worst-case activation slopes: maximize ``mu2(diag(d) @ M)`` over the box ``[m, 1]^n``.

The objective is the largest eigenvalue of a matrix that is linear in ``d``,
hence convex in ``d``; its maximum is attained at a vertex of the box, but
there can be several local maxima.  :func:`find_extremizer` runs the
semi-combinatorial sign iteration (vertex update driven by the sign of the
gradient) from a warm start, optionally followed by a polishing pass that
restarts the iteration from neighbouring and eigenvector-induced vertices.
:func:`projected_flow` is the continuous fallback and :func:`vertex_oracle`
the exhaustive reference.
"""

from dataclasses import dataclass, field
import itertools
import warnings

import numpy as np

from .errors import CapacityError, ContractViolation
from .linalg import as_matrix

__all__ = [
    "DegenerateEigenvalueWarning",
    "ExtremizerReport",
    "leading_pair",
    "diag_gradient",
    "update_vertex",
    "find_extremizer",
    "projected_flow",
    "vertex_oracle",
    "max_lognorm",
]

GAP_TOL = 1e-10
ORACLE_MAX_N = 20
PAIR_FLIP_MAX_N = 12


class DegenerateEigenvalueWarning(RuntimeWarning):
    """The leading eigenvalue is (numerically) multiple, so its gradient is not unique."""


@dataclass
class ExtremizerReport:
    """Outcome of a maximization of ``mu2(diag(d) M)`` over ``[m, 1]^n``.

    ``method`` is one of ``"semi_combinatorial"``, ``"projected_flow"`` or
    ``"vertex_oracle"``.  ``fallback`` is set when the sign iteration did not
    reach a fixed point and the projected flow took over; ``stalled`` when the
    flow ended on step underflow.
    """

    d_star: np.ndarray
    m: float
    mu_value: float
    iterations: int
    method: str
    degenerate: bool = False
    fallback: bool = False
    stalled: bool = False
    polish_moves: int = 0
    extra: dict = field(default_factory=dict)

    @property
    def D(self) -> np.ndarray:
        return np.diag(self.d_star)


def _check_m(m):
    if not (0.0 < m <= 1.0):
        raise ContractViolation(f"m must lie in (0, 1], got {m}")


def _check_d(d, n, m):
    d = np.asarray(d, dtype=float).reshape(-1)
    if d.size != n:
        raise ContractViolation(f"diagonal point has length {d.size}, expected {n}")
    if np.any(d < m - 1e-15) or np.any(d > 1.0 + 1e-15):
        raise ContractViolation("diagonal point leaves the box [m, 1]^n")
    return np.clip(d, m, 1.0)


def leading_pair(M: np.ndarray, d: np.ndarray):
    """Largest eigenvalue, its unit eigenvector and the spectral gap of ``Sym(diag(d) M)``."""
    S = d[:, None] * M
    S = 0.5 * (S + S.T)
    w, V = np.linalg.eigh(S)
    gap = w[-1] - w[-2] if w.size > 1 else np.inf
    return float(w[-1]), V[:, -1], float(gap)


def _is_degenerate(lam, gap):
    return gap <= GAP_TOL * max(1.0, abs(lam))


def _one_layer_evaluator(M):
    def evaluate(d):
        lam, x, gap = leading_pair(M, d)
        return lam, (M @ x) * x, _is_degenerate(lam, gap)

    return evaluate


def diag_gradient(M, d) -> np.ndarray:
    """Gradient of ``mu2(diag(d) M)`` with respect to ``d``.

    With ``x`` the leading unit eigenvector of ``Sym(diag(d) M)`` and
    ``z = M x`` the gradient is ``g_i = z_i x_i``.  If the leading eigenvalue
    is multiple a :class:`DegenerateEigenvalueWarning` is issued and the
    eigenvector chosen by the eigensolver is used.
    """
    A = as_matrix(M)
    d = np.asarray(d, dtype=float).reshape(-1)
    if d.size != A.shape[0] or A.shape[0] != A.shape[1]:
        raise ContractViolation("d and M have incompatible sizes")
    S = 0.5 * (d[:, None] * A + (d[:, None] * A).T)
    w, V = np.linalg.eigh(S)
    # pick the lowest-index eigenvector among a degenerate top cluster
    lam = w[-1]
    if w.size > 1 and _is_degenerate(lam, lam - w[-2]):
        warnings.warn("leading eigenvalue is degenerate", DegenerateEigenvalueWarning, stacklevel=2)
        top = np.flatnonzero(w >= lam - GAP_TOL * max(1.0, abs(lam)))
        x = V[:, top[0]]
    else:
        x = V[:, -1]
    return (A @ x) * x


def update_vertex(d, g, m) -> np.ndarray:
    """Sign update: ``d_i = 1`` where ``g_i > 0``, ``d_i = m`` where ``g_i < 0``, else unchanged."""
    out = np.array(d, dtype=float, copy=True).reshape(-1)
    g = np.asarray(g, dtype=float).reshape(-1)
    out[g > 0] = 1.0
    out[g < 0] = m
    return out


def _sign_iterate(evaluate, d0, m, maxit):
    """Run the vertex sign iteration; return (d, mu, updates, converged, degenerate)."""
    d = d0
    degenerate = False
    for it in range(maxit):
        lam, g, deg = evaluate(d)
        degenerate |= deg
        nxt = update_vertex(d, g, m)
        if np.array_equal(nxt, d):
            return d, lam, it, True, degenerate
        d = nxt
    lam, g, deg = evaluate(d)
    return d, lam, maxit, np.array_equal(update_vertex(d, g, m), d), degenerate | deg


def _polish_candidates(evaluate_full, d, m):
    n = d.size
    for i in range(n):
        e = d.copy()
        e[i] = m if e[i] == 1.0 else 1.0
        yield e
    if n <= PAIR_FLIP_MAX_N:
        for i, j in itertools.combinations(range(n), 2):
            e = d.copy()
            e[[i, j]] = np.where(e[[i, j]] == 1.0, m, 1.0)
            yield e
    for base in (d, np.ones(n), np.full(n, m)):
        for g in evaluate_full(base):
            yield np.where(g > 0, 1.0, m)


def _polish(evaluate, evaluate_full, d, lam, m, maxit):
    """Escape non-global fixed points by restarting from nearby vertices."""
    seen = {tuple(d)}
    moves = 0
    while True:
        best = None
        for cand in _polish_candidates(evaluate_full, d, m):
            key = tuple(cand)
            if key in seen:
                continue
            seen.add(key)
            e, v, _, ok, _ = _sign_iterate(evaluate, cand, m, maxit)
            seen.add(tuple(e))
            if ok and v > lam + 1e-13 * max(1.0, abs(lam)) and (best is None or v > best[1]):
                best = (e, v)
        if best is None:
            return d, lam, moves
        d, lam = best
        moves += 1


def _eigvec_gradients(M):
    def evaluate_full(d):
        S = d[:, None] * M
        S = 0.5 * (S + S.T)
        _, V = np.linalg.eigh(S)
        return [(M @ V[:, j]) * V[:, j] for j in range(V.shape[1] - 1, -1, -1)]

    return evaluate_full


def find_extremizer(M, m, warm_start=None, maxit=20, polish=True) -> ExtremizerReport:
    """Maximize ``mu2(diag(d) M)`` over ``d`` in ``[m, 1]^n``.

    Parameters
    ----------
    M : array_like, shape (n, n)
    m : float
        Lower bound of the box, ``0 < m <= 1``.
    warm_start : array_like, optional
        Starting diagonal (typically the previous extremizer).  Defaults to
        the all-ones vector.
    maxit : int
        Sign-iteration budget before falling back to :func:`projected_flow`.
    polish : bool
        After the fixed point is reached, restart the sign iteration from the
        single-flip neighbours, the double-flip neighbours (``n <= 12``) and
        the vertices induced by the eigenvectors of ``Sym(D M)``; move
        whenever that strictly improves the value.

    Returns
    -------
    ExtremizerReport
    """
    A = as_matrix(M)
    _check_m(m)
    n = A.shape[0]
    d0 = np.ones(n) if warm_start is None else _check_d(warm_start, n, m)
    evaluate = _one_layer_evaluator(A)
    d, lam, updates, converged, degenerate = _sign_iterate(evaluate, d0, m, maxit)
    if not converged:
        rep = projected_flow(A, m, d)
        rep.iterations += updates
        rep.fallback = True
        rep.degenerate |= degenerate
        return rep
    moves = 0
    if polish:
        d, lam, moves = _polish(evaluate, _eigvec_gradients(A), d, lam, m, maxit)
    return ExtremizerReport(d, m, lam, updates, "semi_combinatorial", degenerate=degenerate, polish_moves=moves)


def projected_flow(M, m, d0, h0=1.0, tol=1e-9, max_steps=10_000) -> ExtremizerReport:
    """Projected gradient ascent on ``mu2(diag(d) M)`` over the box.

    Explicit Euler steps ``d <- clip(d + h g, m, 1)``; a step that does not
    increase the objective is retried with ``h / 2``, an accepted step
    doubles ``h``.  Stops when the projected gradient ``clip(d + g) - d`` has
    norm at most ``tol``, after ``max_steps`` accepted steps, or when ``h``
    underflows below 1e-14 (``stalled`` is then set).
    """
    A = as_matrix(M)
    _check_m(m)
    d = _check_d(d0, A.shape[0], m)
    evaluate = _one_layer_evaluator(A)
    lam, g, degenerate = evaluate(d)
    h = h0
    steps = 0
    stalled = False
    trace = [lam]
    while steps < max_steps:
        if np.linalg.norm(np.clip(d + g, m, 1.0) - d) <= tol:
            break
        while True:
            trial = np.clip(d + h * g, m, 1.0)
            lam_t, g_t, deg_t = evaluate(trial)
            if lam_t > lam:
                break
            h *= 0.5
            if h < 1e-14:
                stalled = True
                break
        if stalled:
            break
        d, lam, g = trial, lam_t, g_t
        degenerate |= deg_t
        trace.append(lam)
        steps += 1
        h *= 2.0
    return ExtremizerReport(d, m, lam, steps, "projected_flow", degenerate=degenerate, stalled=stalled, extra={"trace": trace})


def _prefer_on_tie(cand, best):
    # toward m: fewer unit entries, then lexicographically smaller
    cs, bs = cand.sum(), best.sum()
    if cs != bs:
        return cs < bs
    return tuple(cand) < tuple(best)


def vertex_oracle(M, m) -> ExtremizerReport:
    """Exhaustive maximization over the ``2^n`` vertices ``{m, 1}^n`` (n <= 20).

    Values within ``1e-12 (1 + |mu|)`` count as ties and are resolved toward
    ``m`` (fewer unit entries first).
    """
    A = as_matrix(M)
    _check_m(m)
    n = A.shape[0]
    if n > ORACLE_MAX_N:
        raise CapacityError(f"vertex enumeration limited to n <= {ORACLE_MAX_N}, got {n}")
    best_d, best = None, -np.inf
    for v in itertools.product((m, 1.0), repeat=n):
        d = np.array(v)
        S = d[:, None] * A
        lam = float(np.linalg.eigvalsh(0.5 * (S + S.T))[-1])
        tie = 1e-12 * (1.0 + abs(best)) if np.isfinite(best) else 0.0
        if lam > best + tie:
            best_d, best = d, lam
        elif abs(lam - best) <= tie and _prefer_on_tie(d, best_d):
            best_d, best = d, max(lam, best)
    # report the value at the chosen vertex exactly
    S = best_d[:, None] * A
    value = float(np.linalg.eigvalsh(0.5 * (S + S.T))[-1])
    return ExtremizerReport(best_d, m, value, 2**n, "vertex_oracle")


def max_lognorm(M, m, oracle=False) -> float:
    """``max_{D in Omega_m} mu2(D M)`` by :func:`find_extremizer` (or the oracle)."""
    rep = vertex_oracle(M, m) if oracle else find_extremizer(M, m)
    return rep.mu_value
