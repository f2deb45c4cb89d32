"""Two-layer vector fields ``sigma(A2 sigma(A1 x + b1) + b2)``.

The Jacobian of the field is ``D2 A2 D1 A1`` with activation slopes
``D1, D2`` in the box ``[m, 1]``.  Both weights are perturbed with a shared
amplitude, ``A_k + eps E_k`` with ``||E_k||_F = 1``, and the penalty is::

    F(E1, E2) = 1/2 * sum_i (lambda_i(Sym(D2* B2 D1* B1)) - delta)_+^2

where ``B_k = A_k + eps E_k`` and ``(D1*, D2*)`` maximize the leading
eigenvalue jointly.  The joint maximizer is found by alternating one-box
searches until neither diagonal changes.
"""

from dataclasses import dataclass, field, replace
import itertools
from typing import NamedTuple, Optional

import numpy as np

from .errors import CapacityError, ContractViolation, DimensionError
from .extremal import ORACLE_MAX_N, _is_degenerate, _polish, _sign_iterate, find_extremizer
from .inner import H_MIN, constrained_direction, penalty
from .linalg import SpectralBundle, as_matrix, format_matrix, frobenius_norm, symmetric_eig
from .outer import CERT_ORACLE_N, INNER_STALL_TOL, OuterTrace

__all__ = [
    "TwoLayerInstance",
    "JointExtremizer",
    "TwoLayerEvaluation",
    "TwoLayerFlowState",
    "TwoLayerResult",
    "joint_extremizer",
    "double_vertex_oracle",
    "eval_two_layer",
    "two_layer_gradients",
    "two_layer_minimize",
    "two_layer_stabilize",
    "certify_pair",
    "format_two_layer_result",
]

MAX_SWEEPS = 50
POLISH_MAX_K = 10


@dataclass(frozen=True)
class TwoLayerInstance:
    """Weights of a two-layer field.

    ``A1`` has shape ``(k, n)`` and ``A2`` shape ``(n, k)``, so that
    ``D2 A2 D1 A1`` is ``n x n`` with ``D1`` of size ``k`` and ``D2`` of size ``n``.
    """

    A1: np.ndarray
    A2: np.ndarray
    m: float
    delta: float

    def __post_init__(self):
        A1 = as_matrix(self.A1, "A1")
        A2 = as_matrix(self.A2, "A2")
        if A2.shape != (A1.shape[1], A1.shape[0]):
            raise DimensionError(f"A2 must have shape {(A1.shape[1], A1.shape[0])}, got {A2.shape}")
        if not (0.0 < self.m <= 1.0):
            raise ContractViolation(f"m must lie in (0, 1], got {self.m}")
        object.__setattr__(self, "A1", A1)
        object.__setattr__(self, "A2", A2)

    @property
    def sizes(self):
        """``(k, n)``: lengths of ``d1`` and ``d2``."""
        return self.A1.shape[0], self.A2.shape[0]

    def weights(self, eps, E1, E2):
        return self.A1 + eps * np.asarray(E1, dtype=float), self.A2 + eps * np.asarray(E2, dtype=float)


def _product(B1, B2, d1, d2):
    return d2[:, None] * (B2 @ (d1[:, None] * B1))


def _lam_max(M):
    return float(np.linalg.eigvalsh(0.5 * (M + M.T))[-1])


@dataclass
class JointExtremizer:
    """Joint maximizer of ``mu2(D2 B2 D1 B1)``; ``converged`` is False if the sweep cap was hit."""

    d1: np.ndarray
    d2: np.ndarray
    mu_value: float
    sweeps: int
    converged: bool = True
    degenerate: bool = False


def _d1_evaluators(B1, B2, d2):
    # mu2(D2 B2 D1 B1) is linear in d1 inside Sym: g_i = (B2^T D2 x)_i (B1 x)_i
    L = d2[:, None] * B2

    def evaluate(d1):
        S = L @ (d1[:, None] * B1)
        w, V = np.linalg.eigh(0.5 * (S + S.T))
        x = V[:, -1]
        gap = w[-1] - w[-2] if w.size > 1 else np.inf
        return float(w[-1]), (L.T @ x) * (B1 @ x), _is_degenerate(w[-1], gap)

    def evaluate_full(d1):
        S = L @ (d1[:, None] * B1)
        _, V = np.linalg.eigh(0.5 * (S + S.T))
        return [(L.T @ V[:, j]) * (B1 @ V[:, j]) for j in range(V.shape[1] - 1, -1, -1)]

    return evaluate, evaluate_full


def _alternate(B1, B2, m, d1, d2, polish, maxit=20):
    degenerate = False
    for sweep in range(1, MAX_SWEEPS + 1):
        rep = find_extremizer(B2 @ (d1[:, None] * B1), m, warm_start=d2, polish=polish)
        new2 = rep.d_star
        degenerate |= rep.degenerate
        evaluate, evaluate_full = _d1_evaluators(B1, B2, new2)
        new1, lam, _, _, deg = _sign_iterate(evaluate, d1, m, maxit)
        degenerate |= deg
        if polish:
            new1, lam, _ = _polish(evaluate, evaluate_full, new1, lam, m, maxit)
        done = np.array_equal(new1, d1) and np.array_equal(new2, d2)
        d1, d2 = new1, new2
        if done:
            return d1, d2, sweep, True, degenerate
    return d1, d2, MAX_SWEEPS, False, degenerate


def joint_extremizer(B1, B2, m, warm=None, polish=True) -> JointExtremizer:
    """Maximize ``mu2(D2 B2 D1 B1)`` over both diagonal boxes.

    Alternates a full one-box search for ``d2`` (``d1`` fixed) with a sign
    iteration for ``d1`` (``d2`` fixed) until a joint fixed point, capped at
    50 sweeps.  Alternation alone can stall at a local maximum.  With
    ``polish`` each one-box search is polished and the alternation restarts
    from the best ``d2`` response to every ``d1`` vertex (from the four
    corner pairs when ``d1`` has more than ``POLISH_MAX_K`` entries); the best
    joint fixed point wins.
    """
    B1 = as_matrix(B1, "B1")
    B2 = as_matrix(B2, "B2")
    k, n = B1.shape[0], B2.shape[0]
    if warm is not None:
        start = (np.asarray(warm[0], dtype=float), np.asarray(warm[1], dtype=float))
    else:
        start = (np.ones(k), np.ones(n))
    d1, d2, total, ok, deg = _alternate(B1, B2, m, *start, polish)
    best = JointExtremizer(d1, d2, _lam_max(_product(B1, B2, d1, d2)), total, ok, deg)
    if not polish:
        return best
    if k <= POLISH_MAX_K:
        cands = []
        for v in itertools.product((m, 1.0), repeat=k):
            e1 = np.array(v)
            rep = find_extremizer(B2 @ (e1[:, None] * B1), m, polish=True)
            cands.append((rep.mu_value, e1, rep.d_star))
        cands.sort(key=lambda c: -c[0])
        starts = [(c[1], c[2]) for c in cands[:1]]
    else:
        starts = [(np.full(k, a), np.full(n, b)) for a, b in itertools.product((1.0, m), repeat=2)]
    for s1, s2 in starts:
        d1, d2, sweeps, ok, deg = _alternate(B1, B2, m, s1, s2, polish)
        total += sweeps
        lam = _lam_max(_product(B1, B2, d1, d2))
        if lam > best.mu_value + 1e-13 * max(1.0, abs(lam)):
            best = JointExtremizer(d1, d2, lam, total, ok, deg)
    best.sweeps = total
    return best


def double_vertex_oracle(B1, B2, m) -> JointExtremizer:
    """Exhaustive search over all vertex pairs (``k + n <= 20``)."""
    B1 = as_matrix(B1, "B1")
    B2 = as_matrix(B2, "B2")
    k, n = B1.shape[0], B2.shape[0]
    if k + n > ORACLE_MAX_N:
        raise CapacityError(f"double vertex enumeration limited to k + n <= {ORACLE_MAX_N}")
    best = None
    for v1 in itertools.product((m, 1.0), repeat=k):
        d1 = np.array(v1)
        C = B2 @ (d1[:, None] * B1)
        for v2 in itertools.product((m, 1.0), repeat=n):
            d2 = np.array(v2)
            lam = _lam_max(d2[:, None] * C)
            if best is None or lam > best[2]:
                best = (d1, d2, lam)
    return JointExtremizer(best[0], best[1], best[2], 2 ** (k + n))


class TwoLayerEvaluation(NamedTuple):
    """Penalty and spectrum at the joint maximizer; ``terms`` holds ``(d1, d2, bundle)``."""

    F: float
    bundle: SpectralBundle
    d1: np.ndarray
    d2: np.ndarray
    terms: tuple = ()
    converged: bool = True


def _spectrum(B1, B2, d1, d2):
    M = _product(B1, B2, d1, d2)
    return symmetric_eig(0.5 * (M + M.T), check=False)


def _check_unit(E, name):
    nrm = frobenius_norm(E)
    if abs(nrm - 1.0) > 1e-10:
        raise ContractViolation(f"{name} must have unit Frobenius norm, got {nrm}")


def eval_two_layer(inst: TwoLayerInstance, eps, E1, E2, warm=None, polish=True, vertices=()) -> TwoLayerEvaluation:
    """Penalty ``1/2 sum (lambda_i - delta)_+^2`` of ``Sym(D2* B2 D1* B1)``.

    Each ``(d1, d2)`` pair in ``vertices`` adds its own penalty term.
    """
    E1 = np.asarray(E1, dtype=float)
    E2 = np.asarray(E2, dtype=float)
    if E1.shape != inst.A1.shape or E2.shape != inst.A2.shape:
        raise DimensionError("perturbation shapes do not match the weights")
    B1, B2 = inst.weights(eps, E1, E2)
    jx = joint_extremizer(B1, B2, inst.m, warm=warm, polish=polish)
    bundle = _spectrum(B1, B2, jx.d1, jx.d2)
    F = penalty(bundle.eigenvalues, inst.delta)
    terms = [(jx.d1, jx.d2, bundle)]
    key = (tuple(jx.d1), tuple(jx.d2))
    for v1, v2 in vertices:
        if (tuple(v1), tuple(v2)) == key:
            continue
        v1, v2 = np.asarray(v1), np.asarray(v2)
        b = _spectrum(B1, B2, v1, v2)
        F += penalty(b.eigenvalues, inst.delta)
        terms.append((v1, v2, b))
    return TwoLayerEvaluation(F, bundle, jx.d1, jx.d2, tuple(terms), jx.converged)


def two_layer_gradients(inst: TwoLayerInstance, eps, E1, E2, bundle: SpectralBundle, d1, d2):
    """Free gradients ``G_k = sum_i gamma_i z_i^k (w_i^k)^T`` over active eigenvalues.

    ``z^1 = D1 B2^T D2 x``, ``w^1 = x``; ``z^2 = D2 x``, ``w^2 = D1 B1 x``.
    """
    B1, B2 = inst.weights(eps, E1, E2)
    d1 = np.asarray(d1, dtype=float)
    d2 = np.asarray(d2, dtype=float)
    gamma = np.maximum(bundle.eigenvalues - inst.delta, 0.0)
    act = gamma > 0
    X = bundle.eigenvectors[:, act] * np.sqrt(gamma[act])
    D2X = d2[:, None] * X
    G1 = (d1[:, None] * (B2.T @ D2X)) @ X.T
    G2 = D2X @ (d1[:, None] * (B1 @ X)).T
    return G1, G2


@dataclass(frozen=True)
class TwoLayerFlowState:
    """Snapshot of the coupled flows on the two unit spheres."""

    E1: np.ndarray
    E2: np.ndarray
    d1_star: np.ndarray
    d2_star: np.ndarray
    F_value: float
    G1: np.ndarray
    G2: np.ndarray
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
    def directions(self):
        return constrained_direction(self.E1, self.G1), constrained_direction(self.E2, self.G2)

    @property
    def gradient_norm(self) -> float:
        """``||G1||_F + ||G2||_F``, i.e. ``-f'`` at a stationary point."""
        return frobenius_norm(self.G1) + frobenius_norm(self.G2)


def _state_at(inst, eps, E1, E2, ev, h, vertices=(), **kw):
    G1 = np.zeros_like(inst.A1)
    G2 = np.zeros_like(inst.A2)
    for d1, d2, b in ev.terms:
        g1, g2 = two_layer_gradients(inst, eps, E1, E2, b, d1, d2)
        G1 += g1
        G2 += g2
    keys = set(vertices)
    new = tuple((tuple(a), tuple(b)) for a, b, _ in ev.terms if (tuple(a), tuple(b)) not in keys)
    return TwoLayerFlowState(
        E1=E1, E2=E2, d1_star=ev.d1, d2_star=ev.d2, F_value=ev.F, G1=G1, G2=G2, h=h,
        bundle=ev.bundle, vertices=tuple(vertices) + new, **kw,
    )


def _initial_state(inst, eps, E1, E2, h0=0.1, warm=None, vertices=()):
    _check_unit(E1, "E1")
    _check_unit(E2, "E2")
    E1 = E1 / frobenius_norm(E1)
    E2 = E2 / frobenius_norm(E2)
    ev = eval_two_layer(inst, eps, E1, E2, warm=warm, polish=True, vertices=vertices)
    return _state_at(inst, eps, E1, E2, ev, h0, vertices=vertices)


def _euler_step(state, inst, eps, theta=2.0):
    R1, R2 = state.directions
    if frobenius_norm(R1) == 0.0 and frobenius_norm(R2) == 0.0:
        return replace(state, stationary=True)
    h = state.h
    rejected = 0
    warm = (state.d1_star, state.d2_star)
    while True:
        T1 = state.E1 + h * R1
        T2 = state.E2 + h * R2
        T1 = T1 / frobenius_norm(T1)
        T2 = T2 / frobenius_norm(T2)
        ev = eval_two_layer(inst, eps, T1, T2, warm=warm, polish=False, vertices=state.vertices)
        if ev.F < state.F_value:
            break
        h /= theta
        rejected += 1
        if h < H_MIN:
            return replace(state, stationary=True, rejections=state.rejections + rejected)
    return _state_at(
        inst, eps, T1, T2, ev, theta * h if rejected == 0 else h, vertices=state.vertices,
        t=state.t + h, steps=state.steps + 1, rejections=state.rejections + rejected, segment=state.segment,
    )


def two_layer_minimize(inst, eps, state: TwoLayerFlowState, theta=2.0, stall_tol=1e-9, max_steps=5000, trace=None):
    """Integrate the coupled flows with a shared step until stationary.

    Stopping rules mirror :func:`logstab.inner.minimize`, with the two
    tangent directions and gradients measured jointly.
    """
    if trace is not None:
        trace.append((state.t, state.h, state.F_value, state.bundle.lambda_max, state.segment))
    while True:
        small = state.F_value <= 1e-14
        if not small:
            R1, R2 = state.directions
            r = np.hypot(frobenius_norm(R1), frobenius_norm(R2))
            g = np.hypot(frobenius_norm(state.G1), frobenius_norm(state.G2))
            small = r <= stall_tol * max(1.0, g)
        if small or state.stationary:
            ev = eval_two_layer(
                inst, eps, state.E1, state.E2, warm=(state.d1_star, state.d2_star),
                polish=True, vertices=state.vertices,
            )
            fresh = (tuple(ev.d1), tuple(ev.d2)) not in set(state.vertices)
            if fresh and ev.F > state.F_value:
                state = _state_at(
                    inst, eps, state.E1, state.E2, ev, state.h, vertices=state.vertices, t=state.t,
                    steps=state.steps, rejections=state.rejections, segment=state.segment + 1,
                )
                continue
            return replace(state, converged=True, stationary=True)
        if state.steps >= max_steps:
            return replace(state, converged=False)
        state = _euler_step(state, inst, eps, theta)
        if trace is not None and not state.stationary:
            trace.append((state.t, state.h, state.F_value, state.bundle.lambda_max, state.segment))


@dataclass
class TwoLayerResult:
    """Perturbed pair ``A_k + epsilon_star E_k`` with its joint certificate."""

    delta: float
    m: float
    epsilon_star: float
    E1_star: np.ndarray
    E2_star: np.ndarray
    A1_hat: np.ndarray
    A2_hat: np.ndarray
    achieved_mu: float
    d1_star: np.ndarray
    d2_star: np.ndarray
    trace: OuterTrace = field(default_factory=OuterTrace)
    converged: bool = True
    already_satisfied: bool = False
    initial_mu: float = 0.0


def two_layer_stabilize(inst: TwoLayerInstance, tol=1e-13, eps0=None, max_outer=200, inner_opts=None) -> TwoLayerResult:
    """Shared-amplitude Newton iteration for the two-layer problem.

    ``f'(eps) = -(||G1||_F + ||G2||_F)`` at an inner minimizer.  Each new
    amplitude restarts the inner flow from the previous unit directions.
    Overshoot (zero penalty) retreats to the midpoint with the last iterate.
    """
    inner_opts = dict(inner_opts or {})
    inner_opts.setdefault("stall_tol", INNER_STALL_TOL)
    h0 = inner_opts.pop("h0", 0.1)
    k, n = inst.sizes
    zero1 = np.zeros_like(inst.A1)
    zero2 = np.zeros_like(inst.A2)
    jx0 = joint_extremizer(inst.A1, inst.A2, inst.m)
    mu0 = jx0.mu_value
    if mu0 <= inst.delta:
        return TwoLayerResult(
            inst.delta, inst.m, 0.0, zero1, zero2, inst.A1.copy(), inst.A2.copy(), mu0,
            jx0.d1, jx0.d2, already_satisfied=True, initial_mu=mu0,
        )

    b0 = _spectrum(inst.A1, inst.A2, jx0.d1, jx0.d2)
    scale = float(np.sqrt(2.0 * penalty(b0.eigenvalues, inst.delta)))
    eps = 0.01 * scale if eps0 is None else float(eps0)
    G1, G2 = two_layer_gradients(inst, 0.0, zero1, zero2, b0, jx0.d1, jx0.d2)
    E1 = -G1 / frobenius_norm(G1) if frobenius_norm(G1) > 0 else np.full_like(G1, 1.0 / np.sqrt(G1.size))
    E2 = -G2 / frobenius_norm(G2) if frobenius_norm(G2) > 0 else np.full_like(G2, 1.0 / np.sqrt(G2.size))

    trace = OuterTrace()

    def solve(eps_, E1_, E2_, warm=None, vertices=()):
        st = _initial_state(inst, eps_, E1_, E2_, h0=h0, warm=warm, vertices=vertices)
        return two_layer_minimize(inst, eps_, st, **inner_opts)

    for _ in range(60):
        state = solve(eps, E1, E2)
        if state.F_value > 0.0:
            break
        trace.restarts += 1
        eps *= 0.5
    else:
        raise ContractViolation("could not find a starting amplitude with positive penalty")
    f, fp = state.F_value, -state.gradient_norm
    trace.append(eps, f, fp, 0, state.steps)

    it = 0
    while it < max_outer:
        if f <= tol:
            extra = _uncovered_pair(inst, eps, state, tol)
            if extra is None:
                break
            # the certificate found a violating vertex pair the flow never met
            state = solve(eps, state.E1, state.E2, warm=(state.d1_star, state.d2_star), vertices=state.vertices + (extra,))
            f, fp = state.F_value, -state.gradient_norm
            trace.augmentations += 1
            trace.replace_last(f, fp, state.steps)
            continue
        it += 1
        eps_new = eps - f / fp
        for _ in range(60):
            new = solve(eps_new, state.E1, state.E2, warm=(state.d1_star, state.d2_star), vertices=state.vertices)
            if new.F_value > 0.0:
                break
            trace.backtracks += 1
            eps_new = 0.5 * (eps + eps_new)
        else:
            break
        eps, state = eps_new, new
        f, fp = state.F_value, -state.gradient_norm
        trace.append(eps, f, fp, 0, state.steps)
    converged = f <= tol

    A1_hat, A2_hat = inst.weights(eps, state.E1, state.E2)
    cert = certify_pair(A1_hat, A2_hat, inst.m)
    return TwoLayerResult(
        inst.delta, inst.m, eps, state.E1.copy(), state.E2.copy(), A1_hat, A2_hat, cert.mu_value,
        cert.d1, cert.d2, trace=trace, converged=converged, initial_mu=mu0,
    )


def certify_pair(A1_hat, A2_hat, m) -> JointExtremizer:
    """Joint worst case by exhaustive search when ``k + n <= 10``, else by :func:`joint_extremizer`."""
    if A1_hat.shape[0] + A2_hat.shape[0] <= CERT_ORACLE_N:
        return double_vertex_oracle(A1_hat, A2_hat, m)
    return joint_extremizer(A1_hat, A2_hat, m)


def _uncovered_pair(inst, eps, state, tol):
    B1, B2 = inst.weights(eps, state.E1, state.E2)
    rep = certify_pair(B1, B2, inst.m)
    key = (tuple(rep.d1), tuple(rep.d2))
    if key in set(state.vertices):
        return None
    if penalty(_spectrum(B1, B2, rep.d1, rep.d2).eigenvalues, inst.delta) <= tol:
        return None
    return key


def format_two_layer_result(res: TwoLayerResult) -> str:
    """Result document in the one-layer layout with both directions and weights."""
    lines = [
        "# logstab two-layer stabilization result",
        f"delta = {float(res.delta)!r}",
        f"m = {float(res.m)!r}",
        "structure = two_layer",
        f"epsilon_star = {float(res.epsilon_star)!r}",
        f"achieved_mu = {float(res.achieved_mu)!r}",
        f"initial_mu = {float(res.initial_mu)!r}",
        f"converged = {str(res.converged).lower()}",
        f"already_satisfied = {str(res.already_satisfied).lower()}",
        f"outer_iterations = {max(len(res.trace) - 1, 0)}",
        f"inner_steps = {sum(res.trace.inner_steps)}",
    ]
    mats = {
        "d1_star": np.asarray(res.d1_star, dtype=float).reshape(1, -1),
        "d2_star": np.asarray(res.d2_star, dtype=float).reshape(1, -1),
        "E1_star": res.E1_star, "E2_star": res.E2_star,
        "A1_hat": res.A1_hat, "A2_hat": res.A2_hat,
    }
    for name, M in mats.items():
        lines += ["", f"[{name}]", format_matrix(M).rstrip("\n")]
    lines += ["", "[trace]", res.trace.to_csv().rstrip("\n")]
    return "\n".join(lines) + "\n"
