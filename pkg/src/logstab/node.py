"""Neural ODE runtime: smoothed LeakyReLU, explicit Euler forward pass and bound checks.

A model integrates ``x' = f(x)`` on ``[0, T]`` with ``N`` explicit Euler
steps, ``x_{k+1} = x_k + (T/N) f(x_k)``.  Supported fields are

* ``"one_layer"``: ``f(x) = sigma(A x + b)``
* ``"two_layer"``: ``f(x) = sigma(A2 sigma(A1 x + b1) + b2)``
* ``"nsd"``: ``f(x) = -A^T sigma(A x + b)`` (monotone by construction)

States may carry leading batch dimensions; the last axis is the state.
"""

from dataclasses import dataclass, field
from functools import lru_cache
import os

import numpy as np
from scipy.optimize import brentq

from ._io import atomic_write_text, parse_key_values
from .errors import ConfigError, ContractViolation, DimensionError, DivergenceError
from .linalg import as_matrix, read_matrix, write_matrix

__all__ = [
    "SmoothedLeakyReLU",
    "NeuralOdeModel",
    "activation",
    "activation_derivative",
    "forward",
    "verify_bound",
    "BoundReport",
    "lipschitz_bound",
    "read_manifest",
    "write_manifest",
    "format_report",
]

KINDS = ("one_layer", "two_layer", "nsd")


@lru_cache(maxsize=None)
def _junction(alpha):
    # 1 - tanh(z)^2 = alpha has a single positive root
    z_bar = brentq(lambda z: 1.0 - np.tanh(z) ** 2 - alpha, 0.0, 50.0, xtol=1e-14, rtol=4 * np.finfo(float).eps)
    beta = np.tanh(-z_bar) + alpha * z_bar
    return float(z_bar), float(beta)


@dataclass(frozen=True)
class SmoothedLeakyReLU:
    """``z`` for ``z >= 0``, ``tanh z`` on ``[-z_bar, 0)``, ``alpha z + beta`` below.

    ``z_bar`` solves ``tanh'(z_bar) = alpha`` and ``beta`` makes the function
    continuous at ``-z_bar``; the derivative then takes values in ``[alpha, 1]``.
    """

    alpha: float = 0.1

    def __post_init__(self):
        if not (0.0 < self.alpha < 1.0):
            raise ContractViolation(f"alpha must lie in (0, 1), got {self.alpha}")

    @property
    def z_bar(self) -> float:
        return _junction(self.alpha)[0]

    @property
    def beta(self) -> float:
        return _junction(self.alpha)[1]

    def __call__(self, z):
        z = np.asarray(z, dtype=float)
        zb, beta = _junction(self.alpha)
        return np.where(z >= 0.0, z, np.where(z >= -zb, np.tanh(z), self.alpha * z + beta))

    def derivative(self, z):
        z = np.asarray(z, dtype=float)
        zb = self.z_bar
        t = np.tanh(np.clip(z, -zb, 0.0))
        return np.where(z >= 0.0, 1.0, np.where(z >= -zb, 1.0 - t * t, self.alpha))


_DEFAULT = SmoothedLeakyReLU()


def activation(z):
    """Smoothed LeakyReLU with ``alpha = 0.1``."""
    return _DEFAULT(z)


def activation_derivative(z):
    return _DEFAULT.derivative(z)


@dataclass
class NeuralOdeModel:
    """Euler-discretized neural ODE.

    Attributes
    ----------
    layers : list of (W, b)
        One pair for ``one_layer`` and ``nsd``, two for ``two_layer``.
    horizon : float
        Final time ``T``.
    steps : int
        Number of Euler steps ``N``.
    """

    layers: list
    activation: SmoothedLeakyReLU = field(default_factory=SmoothedLeakyReLU)
    horizon: float = 1.0
    steps: int = 100
    kind: str = "one_layer"

    def __post_init__(self):
        if self.kind not in KINDS:
            raise ContractViolation(f"unknown model kind {self.kind!r}")
        if self.steps < 1:
            raise ContractViolation("steps must be at least 1")
        if not self.horizon > 0:
            raise ContractViolation("horizon must be positive")
        want = 2 if self.kind == "two_layer" else 1
        if len(self.layers) != want:
            raise DimensionError(f"{self.kind} model needs {want} layer(s), got {len(self.layers)}")
        layers = []
        for W, b in self.layers:
            W = as_matrix(W, "weight")
            b = np.asarray(b, dtype=float).reshape(-1)
            if b.size != W.shape[0]:
                raise DimensionError(f"bias of length {b.size} does not match weight rows {W.shape[0]}")
            layers.append((W, b))
        self.layers = layers
        n = self.dim
        if self.kind == "two_layer":
            (W1, _), (W2, _) = layers
            if W1.shape[1] != n or W2.shape != (n, W1.shape[0]):
                raise DimensionError("two-layer weights must compose to a square map")
        elif layers[0][0].shape[1] != n or (self.kind == "one_layer" and layers[0][0].shape[0] != n):
            raise DimensionError("one-layer weight must be square")

    @property
    def dim(self) -> int:
        return self.layers[0][0].shape[1]

    def field(self, x):
        """Vector field evaluated on the last axis of ``x``."""
        sigma = self.activation
        if self.kind == "one_layer":
            (A, b), = self.layers
            return sigma(x @ A.T + b)
        if self.kind == "two_layer":
            (A1, b1), (A2, b2) = self.layers
            return sigma(sigma(x @ A1.T + b1) @ A2.T + b2)
        (A, b), = self.layers
        return -sigma(x @ A.T + b) @ A


def forward(model: NeuralOdeModel, x0) -> np.ndarray:
    """Explicit Euler trajectory, shape ``(N + 1,) + x0.shape``.

    Raises
    ------
    DivergenceError
        If a state becomes non-finite; ``step`` is the offending index.
    """
    x = np.asarray(x0, dtype=float)
    if x.shape[-1] != model.dim:
        raise DimensionError(f"state has length {x.shape[-1]}, model expects {model.dim}")
    h = model.horizon / model.steps
    out = np.empty((model.steps + 1,) + x.shape)
    out[0] = x
    with np.errstate(over="ignore", invalid="ignore"):
        for k in range(model.steps):
            x = x + h * model.field(x)
            if not np.all(np.isfinite(x)):
                raise DivergenceError(f"non-finite state at step {k + 1}", step=k + 1)
            out[k + 1] = x
    return out


def _final_state(model, x0):
    x = np.asarray(x0, dtype=float)
    h = model.horizon / model.steps
    with np.errstate(over="ignore", invalid="ignore"):
        for k in range(model.steps):
            x = x + h * model.field(x)
            if not np.all(np.isfinite(x)):
                raise DivergenceError(f"non-finite state at step {k + 1}", step=k + 1)
    return x


@dataclass
class BoundReport:
    """Outcome of :func:`verify_bound`.

    ``bound`` is ``exp(delta T)``; a trial counts as a violation when its
    amplification exceeds ``bound * (1 + slack)``.
    """

    max_amplification: float
    bound: float
    violations: int
    trials: int
    slack: float
    delta: float
    horizon: float
    steps: int
    scale: float
    seed: int


def verify_bound(model: NeuralOdeModel, delta, trials=1000, perturbation_scale=1e-3, slack=1e-3, seed=0) -> BoundReport:
    """Monte Carlo check of ``||x1(T) - x2(T)|| <= exp(delta T) ||x1(0) - x2(0)||``.

    Base points are uniform in ``[-1, 1]^n``; perturbations are Gaussian
    directions rescaled to norm ``perturbation_scale``.  All trials are
    integrated together as one batch.
    """
    if trials < 1:
        raise ContractViolation("trials must be at least 1")
    rng = np.random.default_rng(seed)
    n = model.dim
    x1 = rng.uniform(-1.0, 1.0, size=(trials, n))
    v = rng.standard_normal((trials, n))
    v *= perturbation_scale / np.linalg.norm(v, axis=1, keepdims=True)
    x2 = x1 + v
    y1 = _final_state(model, x1)
    y2 = _final_state(model, x2)
    amp = np.linalg.norm(y1 - y2, axis=1) / np.linalg.norm(x1 - x2, axis=1)
    bound = float(np.exp(delta * model.horizon))
    violations = int(np.count_nonzero(amp > bound * (1.0 + slack)))
    return BoundReport(
        float(amp.max()), bound, violations, trials, slack, float(delta), model.horizon,
        model.steps, perturbation_scale, seed,
    )


def format_report(rep: BoundReport) -> str:
    keys = ("max_amplification", "bound", "violations", "trials", "slack", "delta", "horizon", "steps", "scale", "seed")
    lines = ["# logstab bound report"]
    lines += [f"{k} = {getattr(rep, k)!r}" for k in keys]
    return "\n".join(lines) + "\n"


def lipschitz_bound(norms, delta, T) -> float:
    """``prod(norms) * exp(delta T)``: Lipschitz bound of a classifier around the ODE block.

    ``norms`` are the operator 2-norms of the affine maps before and after
    the block; softmax contributes a factor 1.
    """
    norms = np.asarray(norms, dtype=float).reshape(-1)
    if np.any(norms < 0):
        raise ContractViolation("operator norms must be nonnegative")
    return float(np.prod(norms) * np.exp(delta * T))


# ---- manifest ------------------------------------------------------------------
#
#   kind = one_layer            # or two_layer, nsd
#   A1 = weights.txt            # matrix files, relative to the manifest
#   b1 = bias.txt
#   A2 = ...                    # two_layer only
#   b2 = ...
#   alpha = 0.1
#   T = 1.0
#   N = 1000


def read_manifest(path) -> NeuralOdeModel:
    """Load a model from a manifest file; matrix paths are relative to it."""
    path = os.fspath(path)
    with open(path) as fh:
        kv = parse_key_values(fh.read(), source=path)
    base = os.path.dirname(os.path.abspath(path))
    kind = kv.get("kind", "one_layer")
    count = 2 if kind == "two_layer" else 1
    try:
        layers = []
        for i in range(1, count + 1):
            W = read_matrix(os.path.join(base, kv[f"A{i}"]))
            b = read_matrix(os.path.join(base, kv[f"b{i}"])).reshape(-1)
            layers.append((W, b))
        alpha = float(kv.get("alpha", 0.1))
        T = float(kv.get("T", 1.0))
        N = int(kv.get("N", 1000))
    except KeyError as exc:
        raise ConfigError(f"{path}: missing key {exc.args[0]!r}") from None
    except (ValueError, OSError) as exc:
        if isinstance(exc, ConfigError):
            raise
        raise ConfigError(f"{path}: {exc}") from None
    try:
        return NeuralOdeModel(layers, SmoothedLeakyReLU(alpha), T, N, kind)
    except (ContractViolation, DimensionError) as exc:
        raise ConfigError(f"{path}: {exc}") from None


def write_manifest(path, model: NeuralOdeModel) -> None:
    """Write ``model`` as a manifest plus one matrix file per weight and bias."""
    path = os.fspath(path)
    base = os.path.dirname(os.path.abspath(path))
    stem = os.path.splitext(os.path.basename(path))[0]
    lines = [f"kind = {model.kind}"]
    for i, (W, b) in enumerate(model.layers, start=1):
        wname, bname = f"{stem}_A{i}.txt", f"{stem}_b{i}.txt"
        write_matrix(os.path.join(base, wname), W)
        write_matrix(os.path.join(base, bname), b.reshape(-1, 1))
        lines += [f"A{i} = {wname}", f"b{i} = {bname}"]
    lines += [f"alpha = {model.activation.alpha!r}", f"T = {model.horizon!r}", f"N = {model.steps}"]
    atomic_write_text(path, "\n".join(lines) + "\n")
