"""Outer iteration: Newton on the perturbation size.

``f(eps)`` is the minimized inner penalty at amplitude ``eps``.  It has a
double zero at the optimal amplitude and ``f'(eps) = -||G(eps)||_F`` at an
inner minimizer, so Newton approaches the root monotonically from the left
with error roughly halving per step.  Transitions between amplitudes are
warm-started by integrating the free gradient flow from ``eps_k E_k`` until
its norm reaches ``eps_{k+1}``.
"""

from dataclasses import dataclass, field
import csv
import io
from typing import NamedTuple

import numpy as np

from ._io import atomic_write_text
from .errors import ConfigError, ContractViolation
from .extremal import find_extremizer, vertex_oracle
from .inner import (
    PenaltyFunctional,
    free_gradient,
    initial_state,
    minimize,
    penalty,
    project_structured,
)
from .linalg import as_matrix, format_matrix, frobenius_inner, frobenius_norm, parse_matrix, symmetric_eig

CERT_ORACLE_N = 10
INNER_STALL_TOL = 1e-6

__all__ = [
    "OuterTrace",
    "StabilizationResult",
    "Transition",
    "schur_upper_bound",
    "diagonal_upper_bound",
    "f_and_derivative",
    "warm_start_transition",
    "stabilize",
    "certify",
    "format_result",
    "parse_result",
    "write_result",
    "read_result",
]


@dataclass
class OuterTrace:
    """Per-iteration record of the Newton loop (index ``k`` is the Newton iterate)."""

    epsilons: list = field(default_factory=list)
    f_values: list = field(default_factory=list)
    fprime_values: list = field(default_factory=list)
    warm_start_steps: list = field(default_factory=list)
    inner_steps: list = field(default_factory=list)
    inner_histories: list = field(default_factory=list)
    restarts: int = 0
    backtracks: int = 0
    clamps: int = 0
    augmentations: int = 0

    def append(self, eps, f, fprime, warm, inner, history=None):
        self.epsilons.append(float(eps))
        self.f_values.append(float(f))
        self.fprime_values.append(float(fprime))
        self.warm_start_steps.append(int(warm))
        self.inner_steps.append(int(inner))
        if history is not None:
            self.inner_histories.append(history)

    def replace_last(self, f, fprime, inner, history=None):
        """Overwrite the last record after re-solving at the same amplitude."""
        self.f_values[-1] = float(f)
        self.fprime_values[-1] = float(fprime) if fprime is not None else 0.0
        self.inner_steps[-1] += int(inner)
        if history is not None and self.inner_histories:
            self.inner_histories[-1] = self.inner_histories[-1] + history

    def __len__(self):
        return len(self.epsilons)

    def extrapolated_root(self) -> float:
        """Root estimate ``eps - 2 f / f'`` from the last iterate (double-zero Newton)."""
        if not self.epsilons:
            return 0.0
        f, fp = self.f_values[-1], self.fprime_values[-1]
        if f == 0.0 or fp == 0.0:
            return self.epsilons[-1]
        return self.epsilons[-1] - 2.0 * f / fp

    def gap_ratios(self, last=3, root=None) -> np.ndarray:
        """``|eps_{k+1} - root| / |eps_k - root|`` for the last ``last`` Newton steps."""
        root = self.extrapolated_root() if root is None else root
        eps = np.asarray(self.epsilons)
        gaps = np.abs(root - eps)
        ratios = gaps[1:] / gaps[:-1]
        return ratios[-last:]

    def to_csv(self) -> str:
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(["k", "epsilon", "f", "fprime", "warm_start_steps", "inner_steps"])
        for k, row in enumerate(zip(self.epsilons, self.f_values, self.fprime_values, self.warm_start_steps, self.inner_steps)):
            w.writerow([k, repr(row[0]), repr(row[1]), repr(row[2]), row[3], row[4]])
        return buf.getvalue()


@dataclass
class StabilizationResult:
    """Perturbed weight matrix ``A_hat = A + epsilon_star * E_star`` and its certificate."""

    delta: float
    m: float
    structure: str
    epsilon_star: float
    E_star: np.ndarray
    A_hat: np.ndarray
    achieved_mu: float
    d_star: np.ndarray
    trace: OuterTrace
    converged: bool = True
    already_satisfied: bool = False
    upper_bound: float = 0.0
    initial_mu: float = 0.0

    @property
    def iterations(self) -> int:
        return max(len(self.trace) - 1, 0)

    @property
    def perturbation(self) -> np.ndarray:
        return self.epsilon_star * self.E_star


class Transition(NamedTuple):
    E: np.ndarray
    steps: int
    fallback: bool


def _gradient_at(A, delta, m, X, structure, d_warm=None, polish=False):
    """Penalty, projected free gradient and extremizer at ``A + X`` (X not normalized)."""
    B = A + X
    rep = find_extremizer(B, m, warm_start=d_warm, polish=polish)
    S = rep.d_star[:, None] * B
    bundle = symmetric_eig(0.5 * (S + S.T), check=False)
    P = PenaltyFunctional(A, delta, m, 1.0, structure)
    G = project_structured(free_gradient(P, X, bundle, rep.d_star), structure)
    return penalty(bundle.eigenvalues, delta), G, rep.d_star, bundle


def schur_upper_bound(A, m, delta) -> float:
    """``sqrt(sum (lambda_i(Sym(D* A)) - delta)_+^2)`` at the worst-case ``D*`` of ``A``.

    This is the distance from ``Sym(D* A)`` to the symmetric matrices with
    spectrum below ``delta``.  Since ``||Sym(D* Delta)|| <= ||Delta||`` it
    bounds the optimal amplitude from below, not from above.
    """
    A = as_matrix(A)
    rep = find_extremizer(A, m)
    S = rep.d_star[:, None] * A
    w = np.linalg.eigvalsh(0.5 * (S + S.T))
    return float(np.sqrt(2.0 * penalty(w, delta)))


def diagonal_upper_bound(A, m, delta) -> float:
    """Norm of the scalar shift ``-c I`` with ``c = (mu0 - delta) / m``.

    ``mu2(D (A - c I)) <= mu2(D A) - c m`` for every ``D`` in the box, so the
    shift is feasible for both structures and bounds the optimum from above.
    """
    A = as_matrix(A)
    mu0 = find_extremizer(A, m).mu_value
    if mu0 <= delta:
        return 0.0
    return float(np.sqrt(A.shape[0]) * (mu0 - delta) / m)


def f_and_derivative(P: PenaltyFunctional, state):
    """``f = F(E*)`` and ``f' = -||G(E*)||_F`` at a converged inner minimizer.

    Returns ``(0.0, None)`` when ``f = 0``, where the derivative is undefined.
    """
    f = float(state.F_value)
    if f == 0.0:
        return 0.0, None
    g = frobenius_norm(state.G)
    if g == 0.0:
        raise AssertionError("zero gradient with positive penalty cannot occur at a minimizer")
    return f, -g


def warm_start_transition(E_prev, eps_prev, eps_next, P: PenaltyFunctional, h=None, d_warm=None, max_steps=100) -> Transition:
    """Carry an inner minimizer from ``eps_prev`` to ``eps_next``.

    Integrates the free gradient flow ``dX/dt = -G(X)`` from
    ``X_0 = eps_prev * E_prev`` with constant step ``h`` until the next step
    would reach norm ``eps_next``; the last step length solves
    ``||X - h G||_F^2 = eps_next^2`` by Newton from ``h/2``.  Returns the
    normalized end point.

    The default step makes the first move of ``X`` as long as the larger of
    ``0.05 eps_prev`` and ``(eps_next - eps_prev) / 20``.  A step fixed in
    time would need ever more steps as ``G`` vanishes near the optimum.  If
    the flow stalls (zero penalty, no norm growth, or ``max_steps``) the
    direction of the last iterate is returned with ``fallback`` set.
    """
    E_prev = np.asarray(E_prev, dtype=float)
    if eps_next < eps_prev:
        raise ContractViolation("eps_next must not be smaller than eps_prev")
    if eps_next == eps_prev:
        return Transition(E_prev.copy(), 0, False)
    X = eps_prev * E_prev
    d = d_warm
    taken = 0
    for _ in range(max_steps):
        f, G, d, _ = _gradient_at(P.base, P.delta, P.m, X, P.structure, d_warm=d)
        if h is None:
            g = frobenius_norm(G)
            h = max(0.05 * eps_prev, (eps_next - eps_prev) / 20.0) / (g if g > 0 else 1.0)
        if f == 0.0 or frobenius_inner(X, G) >= 0.0:
            break
        taken += 1
        X_next = X - h * G
        if frobenius_norm(X_next) >= eps_next:
            hs = _final_step(X, G, eps_next, h)
            return Transition((X - hs * G) / eps_next, taken, False)
        X = X_next
    return Transition(X / frobenius_norm(X), taken, True)


def _final_step(X, G, eps, h):
    """Newton on ``g(s) = ||X - s G||^2 - eps^2`` from ``s = h/2``."""
    s = 0.5 * h
    for _ in range(100):
        Y = X - s * G
        g = frobenius_inner(Y, Y) - eps * eps
        dg = -2.0 * frobenius_inner(Y, G)
        if dg == 0.0:
            break
        step = g / dg
        s -= step
        if abs(step) <= 1e-16 * max(1.0, abs(s)):
            break
    return s


def _zero_result(A, delta, m, structure, mu0, rep):
    n = A.shape[0]
    return StabilizationResult(
        delta=delta, m=m, structure=structure, epsilon_star=0.0, E_star=np.zeros((n, n)),
        A_hat=A.copy(), achieved_mu=mu0, d_star=rep.d_star, trace=OuterTrace(),
        converged=True, already_satisfied=True, initial_mu=mu0,
    )


def stabilize(
    A,
    delta,
    m,
    tol=1e-13,
    eps0=None,
    structure="full",
    max_outer=200,
    inner_opts=None,
    keep_histories=False,
    safeguard=True,
) -> StabilizationResult:
    """Smallest Frobenius perturbation enforcing ``max_D mu2(D (A + Delta)) = delta``.

    Parameters
    ----------
    A : array_like, shape (n, n)
    delta : float
        Target worst-case logarithmic norm.
    m : float
        Lower activation slope defining the diagonal box.
    tol : float
        Absolute tolerance on the inner penalty ``f``; with a single active
        eigenvalue the final excess over ``delta`` is at most ``sqrt(2 tol)``.
    eps0 : float, optional
        Starting amplitude below the optimum; defaults to 1% of
        :func:`schur_upper_bound`, which never exceeds the optimum.
    structure : {"full", "diagonal"}
    max_outer : int
        Newton iterations.  With small ``m`` further vertices can turn active
        close to the optimum, each restarting the contraction.
    inner_opts : dict, optional
        Forwarded to :func:`logstab.inner.minimize` (``theta``, ``stall_tol``,
        ``max_steps``, ``h0``).  ``stall_tol`` defaults to 1e-6 here: the
        inner problem grows stiff as ``eps`` nears the optimum and a tighter
        test multiplies the step count without changing the Newton rate.
    keep_histories : bool
        Store the per-step inner trace of every Newton iterate.

    Returns
    -------
    StabilizationResult
        ``converged`` is False if ``max_outer`` was exhausted.
    """
    A = as_matrix(A)
    if A.shape[0] != A.shape[1]:
        raise ContractViolation("A must be square")
    if not (0.0 < m <= 1.0):
        raise ContractViolation(f"m must lie in (0, 1], got {m}")
    inner_opts = dict(inner_opts or {})
    inner_opts.setdefault("stall_tol", INNER_STALL_TOL)
    rep0 = find_extremizer(A, m)
    mu0 = rep0.mu_value
    if mu0 <= delta:
        return _zero_result(A, delta, m, structure, mu0, rep0)

    S0 = rep0.d_star[:, None] * A
    w0 = np.linalg.eigvalsh(0.5 * (S0 + S0.T))
    lower = float(np.sqrt(2.0 * penalty(w0, delta)))
    bound = float(np.sqrt(A.shape[0]) * (mu0 - delta) / m)
    eps = 0.01 * lower if eps0 is None else float(eps0)

    # initial direction: opposite of the normalized gradient at E = 0
    _, G0, _, _ = _gradient_at(A, delta, m, np.zeros_like(A), structure, polish=True)
    E_init = -G0 / frobenius_norm(G0)
    base = PenaltyFunctional(A, delta, m, eps, structure)

    trace = OuterTrace()
    h_inner = inner_opts.pop("h0", 0.1)

    def solve_inner(P, E_start, d_warm=None, vertices=()):
        hist = [] if keep_histories else None
        st = initial_state(P, E_start, h0=h_inner, d_warm=d_warm, vertices=vertices)
        st = minimize(P, state=st, trace=hist, **inner_opts)
        return st, hist

    # ---- first amplitude, halved until strictly below the optimum
    for _ in range(60):
        P = base.at(eps)
        state, hist = solve_inner(P, E_init)
        if state.F_value > 0.0:
            break
        trace.restarts += 1
        eps *= 0.5
    else:
        raise ContractViolation("could not find a starting amplitude with positive penalty")
    f, fp = f_and_derivative(P, state)
    trace.append(eps, f, fp, 0, state.steps, hist)

    k = 0
    while k < max_outer:
        if f <= tol:
            extra = _uncovered_vertex(A + eps * state.E, m, delta, tol, state.vertices)
            if extra is None:
                break
            # the certificate found a violating vertex the flow never met
            state, hist = solve_inner(P, state.E, d_warm=state.d_star, vertices=state.vertices + (extra,))
            f, fp = f_and_derivative(P, state)
            trace.augmentations += 1
            trace.replace_last(f, fp, state.steps, hist)
            continue
        k += 1
        eps_new = eps - f / fp
        if safeguard and eps_new >= bound:
            eps_new = 0.5 * (eps + bound)
            trace.clamps += 1
        for _ in range(60):
            P_new = base.at(eps_new)
            tr = warm_start_transition(state.E, eps, eps_new, P_new, d_warm=state.d_star)
            new_state, hist = solve_inner(P_new, tr.E, d_warm=state.d_star, vertices=state.vertices)
            if new_state.F_value > 0.0:
                break
            # overshoot past the root: retreat toward the last iterate
            trace.backtracks += 1
            eps_new = 0.5 * (eps + eps_new)
        else:
            break
        eps, state, P = eps_new, new_state, P_new
        f, fp = f_and_derivative(P, state)
        trace.append(eps, f, fp, tr.steps, state.steps, hist)

    A_hat = A + eps * state.E
    mu, d_cert = certify(A_hat, m)
    return StabilizationResult(
        delta=delta, m=m, structure=structure, epsilon_star=eps, E_star=state.E.copy(),
        A_hat=A_hat, achieved_mu=mu, d_star=d_cert, trace=trace,
        converged=f <= tol, upper_bound=bound, initial_mu=mu0,
    )


def certify(A_hat, m):
    """Worst-case ``mu2`` of ``A_hat`` from a cold extremizer search, or exhaustively when ``n <= 10``."""
    if A_hat.shape[0] <= CERT_ORACLE_N:
        rep = vertex_oracle(A_hat, m)
    else:
        rep = find_extremizer(A_hat, m)
    return rep.mu_value, rep.d_star


def _uncovered_vertex(B, m, delta, tol, vertices):
    rep = vertex_oracle(B, m) if B.shape[0] <= CERT_ORACLE_N else find_extremizer(B, m)
    key = tuple(rep.d_star)
    if key in set(vertices):
        return None
    S = rep.d_star[:, None] * B
    if penalty(np.linalg.eigvalsh(0.5 * (S + S.T)), delta) <= tol:
        return None
    return key


# ---- result document ---------------------------------------------------------
#
# key = value header lines, then named sections introduced by "[name]".  Matrix
# sections use the text matrix format, the trace section is CSV.


def format_result(res: StabilizationResult, extra_matrices=None) -> str:
    lines = [
        "# logstab stabilization result",
        f"delta = {float(res.delta)!r}",
        f"m = {float(res.m)!r}",
        f"structure = {res.structure}",
        f"epsilon_star = {float(res.epsilon_star)!r}",
        f"achieved_mu = {float(res.achieved_mu)!r}",
        f"initial_mu = {float(res.initial_mu)!r}",
        f"upper_bound = {float(res.upper_bound)!r}",
        f"converged = {str(res.converged).lower()}",
        f"already_satisfied = {str(res.already_satisfied).lower()}",
        f"outer_iterations = {res.iterations}",
        f"inner_steps = {sum(res.trace.inner_steps)}",
        "",
        "[d_star]",
        format_matrix(np.asarray(res.d_star, dtype=float).reshape(1, -1)).rstrip("\n"),
    ]
    mats = {"E_star": res.E_star, "A_hat": res.A_hat}
    mats.update(extra_matrices or {})
    for name, M in mats.items():
        lines += ["", f"[{name}]", format_matrix(M).rstrip("\n")]
    lines += ["", "[trace]", res.trace.to_csv().rstrip("\n")]
    return "\n".join(lines) + "\n"


def parse_result(text: str, source="<string>") -> dict:
    """Parse a result document into header values, matrices and trace rows."""
    header, sections, current = {}, {}, None
    for lineno, raw in enumerate(text.splitlines(), start=1):
        line = raw.strip()
        if line.startswith("[") and line.endswith("]"):
            current = line[1:-1]
            sections[current] = []
            continue
        if current is None:
            if not line or line.startswith("#"):
                continue
            if "=" not in line:
                raise ConfigError(f"{source}:{lineno}: malformed header line {raw!r}")
            k, v = (s.strip() for s in line.split("=", 1))
            header[k] = v
        elif line:
            sections[current].append(raw)
    out = {"header": header, "matrices": {}, "trace": []}
    for name, body in sections.items():
        if name == "trace":
            out["trace"] = list(csv.DictReader(io.StringIO("\n".join(body))))
        else:
            out["matrices"][name] = parse_matrix("\n".join(body), source=f"{source}[{name}]")
    return out


def write_result(path, res: StabilizationResult, extra_matrices=None) -> None:
    atomic_write_text(path, format_result(res, extra_matrices))


def read_result(path) -> dict:
    with open(path) as fh:
        return parse_result(fh.read(), source=str(path))
