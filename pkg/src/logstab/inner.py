"""Inner iteration: minimize the spectral penalty at a fixed perturbation size.

For a base matrix ``A``, target ``delta`` and amplitude ``epsilon`` the
penalty of a unit-Frobenius-norm direction ``E`` is::

    F(E) = 1/2 * sum_i (lambda_i(Sym(D* (A + epsilon E))) - delta)_+^2

with ``D*`` the worst-case activation diagonal for ``A + epsilon E``.  It is
minimized by an explicit Euler discretization of the norm-preserving
gradient system ``dE/dt = -G + <G, E> E`` with step-size control.
"""

from dataclasses import dataclass, replace
import csv
import io
from typing import NamedTuple, Optional

import numpy as np

from .errors import ContractViolation, DimensionError
from .extremal import find_extremizer, update_vertex
from .linalg import SpectralBundle, as_matrix, frobenius_inner, frobenius_norm, symmetric_eig

__all__ = [
    "PenaltyFunctional",
    "Evaluation",
    "FlowState",
    "eval_functional",
    "penalty",
    "free_gradient",
    "total_gradient",
    "project_structured",
    "constrained_direction",
    "initial_state",
    "euler_step",
    "minimize",
    "trace_to_csv",
]

STRUCTURES = ("full", "diagonal")
H_MIN = 1e-14


@dataclass(frozen=True)
class PenaltyFunctional:
    """Data of the inner problem.

    Attributes
    ----------
    base : ndarray, shape (n, n)
        Unperturbed weight matrix ``A``.
    delta : float
        Target bound on the worst-case logarithmic norm.
    m : float
        Lower activation slope, ``0 < m <= 1``.
    epsilon : float
        Perturbation amplitude, ``> 0``.
    structure : {"full", "diagonal"}
    """

    base: np.ndarray
    delta: float
    m: float
    epsilon: float
    structure: str = "full"

    def __post_init__(self):
        A = as_matrix(self.base, "base")
        if A.shape[0] != A.shape[1]:
            raise DimensionError("base matrix must be square")
        object.__setattr__(self, "base", A)
        if not self.epsilon > 0:
            raise ContractViolation(f"epsilon must be positive, got {self.epsilon}")
        if not (0.0 < self.m <= 1.0):
            raise ContractViolation(f"m must lie in (0, 1], got {self.m}")
        if self.structure not in STRUCTURES:
            raise ContractViolation(f"unknown structure {self.structure!r}")

    def at(self, epsilon) -> "PenaltyFunctional":
        return replace(self, epsilon=float(epsilon))


class Evaluation(NamedTuple):
    """Penalty value with the spectrum at the worst-case diagonal ``d_star``.

    ``terms`` lists ``(d, bundle)`` for every vertex that contributes to
    ``F``; it has a single entry unless a vertex set was supplied.
    """

    F: float
    bundle: SpectralBundle
    d_star: np.ndarray
    terms: tuple = ()


def penalty(eigenvalues, delta) -> float:
    """``1/2 * sum (lambda_i - delta)_+^2``."""
    excess = np.maximum(np.asarray(eigenvalues) - delta, 0.0)
    return 0.5 * float(excess @ excess)


def _sym_spectrum(d, B):
    S = d[:, None] * B
    return symmetric_eig(0.5 * (S + S.T), check=False)


def eval_functional(P: PenaltyFunctional, E, d_warm=None, polish=False, vertices=()) -> Evaluation:
    """Penalty at ``A + epsilon E`` with the worst-case diagonal recomputed.

    ``d_warm`` warm-starts the extremizer search (typically the previous
    ``d*``); ``polish`` enables its global polishing pass.  Each diagonal in
    ``vertices`` adds its own penalty term, which keeps the functional smooth
    when several vertices compete for the maximum.
    """
    B = P.base + P.epsilon * np.asarray(E, dtype=float)
    d_star = bundle = None
    if d_warm is not None and not polish:
        # a warm start that is already a sign fixed point needs no search
        d = np.asarray(d_warm, dtype=float)
        bundle = _sym_spectrum(d, B)
        x = bundle.leading_vector
        if np.array_equal(update_vertex(d, (B @ x) * x, P.m), d):
            d_star = d
    if d_star is None:
        d_star = find_extremizer(B, P.m, warm_start=d_warm, polish=polish).d_star
        bundle = _sym_spectrum(d_star, B)
    F = penalty(bundle.eigenvalues, P.delta)
    terms = [(d_star, bundle)]
    key = tuple(d_star)
    others = np.array([v for v in vertices if tuple(v) != key], dtype=float)
    if others.size:
        # one batched eigensolve; only vertices above delta carry a term
        S = others[:, :, None] * B
        S = 0.5 * (S + np.swapaxes(S, 1, 2))
        act = np.linalg.eigvalsh(S)[:, -1] > P.delta
        if np.any(act):
            W, V = np.linalg.eigh(S[act])
            for d, w, vecs in zip(others[act], W, V):
                b = SpectralBundle(w[::-1], vecs[:, ::-1])
                F += penalty(b.eigenvalues, P.delta)
                terms.append((d, b))
    return Evaluation(F, bundle, d_star, tuple(terms))


def free_gradient(P: PenaltyFunctional, E, bundle: SpectralBundle, d_star) -> np.ndarray:
    """``G = sum_i gamma_i (D* x_i) x_i^T`` over eigenvalues above ``delta``."""
    gamma = np.maximum(bundle.eigenvalues - P.delta, 0.0)
    act = gamma > 0
    X = bundle.eigenvectors[:, act]
    Z = np.asarray(d_star)[:, None] * X
    return (Z * gamma[act]) @ X.T


def total_gradient(P: PenaltyFunctional, E, ev: Evaluation) -> np.ndarray:
    """Free gradient summed over all penalty terms of ``ev``."""
    terms = ev.terms or ((ev.d_star, ev.bundle),)
    G = np.zeros_like(P.base)
    for d, b in terms:
        G += free_gradient(P, E, b, d)
    return G


def project_structured(G, structure="full") -> np.ndarray:
    """Orthogonal projection onto the perturbation subspace."""
    G = np.asarray(G, dtype=float)
    if structure == "full":
        return G
    if structure == "diagonal":
        return np.diag(np.diag(G))
    raise ContractViolation(f"unknown structure {structure!r}")


def constrained_direction(E, G) -> np.ndarray:
    """Tangent steepest-descent direction ``-G + <G, E> E`` on the unit sphere."""
    E = np.asarray(E, dtype=float)
    return -G + frobenius_inner(G, E) * E


@dataclass(frozen=True)
class FlowState:
    """Snapshot of the constrained gradient flow.

    ``G`` is the free gradient projected onto the perturbation structure;
    ``h`` is the step size proposed for the next step and ``t`` the flow time
    accumulated over accepted steps.  ``vertices`` holds every worst-case
    diagonal met so far (as tuples); each one contributes a penalty term.
    """

    E: np.ndarray
    d_star: np.ndarray
    F_value: float
    G: np.ndarray
    h: float
    t: float = 0.0
    bundle: Optional[SpectralBundle] = None
    vertices: tuple = ()
    stationary: bool = False
    converged: bool = False
    steps: int = 0
    rejections: int = 0
    segment: int = 0

    @property
    def direction(self) -> np.ndarray:
        return constrained_direction(self.E, self.G)

    @property
    def lambda_max(self) -> float:
        return self.bundle.lambda_max

    def alignment(self) -> float:
        """``|| G/||G|| - sigma E ||_F`` with ``sigma = sign <G, E>`` (0 if G = 0)."""
        g = frobenius_norm(self.G)
        if g == 0.0:
            return 0.0
        sigma = 1.0 if frobenius_inner(self.G, self.E) >= 0 else -1.0
        return frobenius_norm(self.G / g - sigma * self.E)


def _check_unit(E, tol=1e-10):
    nrm = frobenius_norm(E)
    if abs(nrm - 1.0) > tol:
        raise ContractViolation(f"E must have unit Frobenius norm, got {nrm}")


def _check_structure(E, structure):
    if structure == "diagonal":
        off = E - np.diag(np.diag(E))
        if np.any(off != 0.0):
            raise ContractViolation("structured run needs a diagonal starting direction")


def _merge_vertices(vertices, ev):
    keys = set(vertices)
    extra = tuple(tuple(d) for d, _ in ev.terms if tuple(d) not in keys)
    return tuple(vertices) + extra


def _state_at(P, E, ev, h, vertices=(), **kw) -> FlowState:
    G = project_structured(total_gradient(P, E, ev), P.structure)
    return FlowState(
        E=E, d_star=ev.d_star, F_value=ev.F, G=G, h=h, bundle=ev.bundle,
        vertices=_merge_vertices(vertices, ev), **kw,
    )


def initial_state(P: PenaltyFunctional, E0, h0=0.1, d_warm=None, vertices=()) -> FlowState:
    """Evaluate penalty and gradient at ``E0`` with a polished extremizer."""
    E0 = np.asarray(E0, dtype=float)
    if E0.shape != P.base.shape:
        raise DimensionError(f"E0 has shape {E0.shape}, expected {P.base.shape}")
    _check_unit(E0)
    _check_structure(E0, P.structure)
    E0 = E0 / frobenius_norm(E0)
    ev = eval_functional(P, E0, d_warm=d_warm, polish=True, vertices=vertices)
    return _state_at(P, E0, ev, h0, vertices=vertices)


def euler_step(state: FlowState, P: PenaltyFunctional, theta=2.0) -> FlowState:
    """One controlled Euler step of the constrained gradient flow.

    The trial point ``normalize(E + h Edot)`` is accepted only if the penalty
    strictly decreases; otherwise ``h`` is divided by ``theta`` and the
    worst-case diagonal recomputed.  After an acceptance without rejections
    the next proposed step is ``theta * h``.  If ``h`` drops below 1e-14, or
    the direction vanishes, the input state is returned marked stationary.
    """
    if not theta > 1:
        raise ContractViolation("theta must exceed 1")
    Edot = state.direction
    if frobenius_norm(Edot) == 0.0:
        return replace(state, stationary=True)
    h = state.h
    rejected = 0
    while True:
        trial = state.E + h * Edot
        trial = trial / frobenius_norm(trial)
        ev = eval_functional(P, trial, d_warm=state.d_star, vertices=state.vertices)
        if ev.F < state.F_value:
            break
        h /= theta
        rejected += 1
        if h < H_MIN:
            return replace(state, stationary=True, rejections=state.rejections + rejected)
    h_next = theta * h if rejected == 0 else h
    return _state_at(
        P, trial, ev, h_next, vertices=state.vertices, t=state.t + h,
        steps=state.steps + 1, rejections=state.rejections + rejected, segment=state.segment,
    )


def _trace_row(state: FlowState, delta):
    return {
        "t": state.t,
        "h": state.h,
        "F": state.F_value,
        "mu": state.bundle.lambda_max,
        "active": int(np.count_nonzero(state.bundle.eigenvalues > delta)),
        "d_star": "".join("1" if v == 1.0 else "m" for v in state.d_star),
        "segment": state.segment,
        "E_norm": frobenius_norm(state.E),
        "offdiag": float(np.max(np.abs(state.E - np.diag(np.diag(state.E))), initial=0.0)),
    }


def minimize(
    P: PenaltyFunctional,
    E0=None,
    theta=2.0,
    stall_tol=1e-9,
    max_steps=5000,
    h0=0.1,
    state: Optional[FlowState] = None,
    trace: Optional[list] = None,
) -> FlowState:
    """Integrate the constrained flow to a stationary point of the penalty.

    Either ``E0`` (unit norm, diagonal for structured runs) or a ready
    ``state`` must be given.  Iteration stops when

    * ``F <= 1e-14``,
    * ``||-G + <G, E> E||_F <= stall_tol * max(1, ||G||_F)``,
    * the step size underflows (numerically stationary), or
    * ``max_steps`` accepted steps were taken (``converged`` stays False).

    Before returning, the worst-case diagonal is re-derived with polishing.
    If that exposes a vertex carrying positive penalty that the flow has not
    yet seen, it joins the vertex set and the flow resumes; the trace then
    starts a new ``segment`` (the penalty may jump up between segments).

    Parameters
    ----------
    trace : list, optional
        Receives one dict per accepted step (see :func:`trace_to_csv`).
    """
    if state is None:
        if E0 is None:
            raise ContractViolation("minimize needs E0 or state")
        state = initial_state(P, E0, h0=h0)
    if trace is not None:
        trace.append(_trace_row(state, P.delta))
    while True:
        small = state.F_value <= 1e-14
        if not small:
            gnorm = frobenius_norm(state.G)
            small = frobenius_norm(state.direction) <= stall_tol * max(1.0, gnorm)
        if small or state.stationary:
            ev = eval_functional(P, state.E, d_warm=state.d_star, polish=True, vertices=state.vertices)
            fresh = tuple(ev.d_star) not in set(state.vertices)
            if fresh and ev.F > state.F_value:
                state = _state_at(
                    P, state.E, ev, state.h, vertices=state.vertices, t=state.t,
                    steps=state.steps, rejections=state.rejections, segment=state.segment + 1,
                )
                if trace is not None:
                    trace.append(_trace_row(state, P.delta))
                continue
            return replace(state, converged=True, stationary=True)
        if state.steps >= max_steps:
            return replace(state, converged=False)
        state = euler_step(state, P, theta)
        if trace is not None and not state.stationary:
            trace.append(_trace_row(state, P.delta))


TRACE_COLUMNS = ("t", "h", "F", "mu", "active", "d_star", "segment", "E_norm", "offdiag")


def trace_to_csv(rows) -> str:
    """Render inner-flow trace rows as CSV text."""
    buf = io.StringIO()
    writer = csv.DictWriter(buf, fieldnames=TRACE_COLUMNS, lineterminator="\n")
    writer.writeheader()
    for row in rows:
        writer.writerow({k: (repr(v) if isinstance(v, float) else v) for k, v in row.items()})
    return buf.getvalue()
