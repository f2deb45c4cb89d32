"""Command-line entry point ``logstab``.

Exit codes: 0 success, 1 contract or configuration violation (bad flags,
malformed files, capacity limits), 2 non-convergence or a runtime failure
inside a module (divergence).
"""

import argparse
import os
import sys

from ._io import atomic_write_text
from .errors import DivergenceError, LogstabError, NonConvergenceError
from .extremal import find_extremizer, vertex_oracle
from .illustrative import M_SLOPE, schedule_csv, track
from .linalg import read_matrix
from .node import format_report, read_manifest, verify_bound
from .outer import format_result, stabilize
from .robustness import ExperimentConfig, run_experiment
from .two_layer import TwoLayerInstance, format_two_layer_result, two_layer_stabilize

EXIT_OK, EXIT_CONTRACT, EXIT_RUNTIME = 0, 1, 2


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        self.exit(EXIT_CONTRACT, f"{self.prog}: error: {message}\n")


def _vec(d):
    return " ".join(f"{v:.6g}" for v in d)


def cmd_stabilize(args) -> int:
    A = read_matrix(args.input)
    if args.two_layer:
        A2 = read_matrix(args.two_layer)
        inst = TwoLayerInstance(A, A2, args.m, args.delta)
        res = two_layer_stabilize(inst, tol=args.tol, max_outer=args.max_outer)
        text = format_two_layer_result(res)
        iters = max(len(res.trace) - 1, 0)
    else:
        res = stabilize(A, args.delta, args.m, tol=args.tol, structure=args.structure, max_outer=args.max_outer)
        text = format_result(res)
        iters = res.iterations
    atomic_write_text(args.out, text)
    if res.already_satisfied:
        print(f"already satisfied: max mu = {res.initial_mu:.12g} <= delta = {args.delta:.12g}")
        return EXIT_OK
    print(f"epsilon_star = {res.epsilon_star:.15g}")
    print(f"achieved_mu = {res.achieved_mu:.15g}")
    print(f"outer_iterations = {iters}")
    if not res.converged:
        print("outer iteration did not converge", file=sys.stderr)
        return EXIT_RUNTIME
    return EXIT_OK


def cmd_lognorm_max(args) -> int:
    M = read_matrix(args.input)
    rep = find_extremizer(M, args.m)
    print(f"mu = {rep.mu_value:.15g}")
    print(f"d_star = {_vec(rep.d_star)}")
    print(f"method = {rep.method}")
    if args.oracle:
        ora = vertex_oracle(M, args.m)
        print(f"oracle_mu = {ora.mu_value:.15g}")
        print(f"oracle_delta = {ora.mu_value - rep.mu_value:.3e}")
    return EXIT_OK


def cmd_demo_illustrative(args) -> int:
    points, transitions = track()
    text = schedule_csv(points)
    if args.out:
        atomic_write_text(args.out, text)
    else:
        sys.stdout.write(text)
    for tr in transitions:
        print(f"# transition at t = {tr.t:.2f}: d = ({_vec(tr.d_old)}) -> ({_vec(tr.d_new)})")
        print(f"#   gradient under old vertex: ({', '.join(f'{v:.4f}' for v in tr.gradient_old)})")
        print(f"#   gradient under new vertex: ({', '.join(f'{v:.4f}' for v in tr.gradient_new)})")
    print(f"# m = {M_SLOPE}; mu from {points[0].mu:.5f} to {points[-1].mu:.5f}")
    return EXIT_OK


def cmd_verify_bound(args) -> int:
    model = read_manifest(args.manifest)
    rep = verify_bound(model, args.delta, trials=args.trials, perturbation_scale=args.scale, slack=args.slack, seed=args.seed)
    text = format_report(rep)
    if args.out:
        atomic_write_text(args.out, text)
    sys.stdout.write(text)
    return EXIT_OK


def cmd_robustness(args) -> int:
    cfg = ExperimentConfig.read(args.config).with_env_seed()
    out = run_experiment(cfg, args.out)
    for name, delta in out["delta"].items():
        print(f"{name}: delta = {delta!r}")
    print(f"wrote {os.path.join(args.out, 'accuracy.csv')}")
    return EXIT_OK


def build_parser() -> argparse.ArgumentParser:
    p = _Parser(prog="logstab", description="Worst-case logarithmic-norm stabilization of neural ODE weights.")
    sub = p.add_subparsers(dest="command", required=True, parser_class=_Parser)

    s = sub.add_parser("stabilize", help="nearest weights with max_D mu2(D A) = delta")
    s.add_argument("--input", required=True, help="matrix file (A, or A1 with --two-layer)")
    s.add_argument("--delta", type=float, required=True, help="target worst-case log-norm")
    s.add_argument("--m", type=float, required=True, help="lower activation slope, 0 < m <= 1")
    s.add_argument("--structure", choices=("full", "diagonal"), default="full", help="perturbation structure")
    s.add_argument("--two-layer", metavar="PATH2", help="second-layer matrix file A2")
    s.add_argument("--tol", type=float, default=1e-13, help="absolute tolerance on the inner penalty")
    s.add_argument("--max-outer", type=int, default=200, help="Newton iteration cap")
    s.add_argument("--out", required=True, help="result document path")
    s.set_defaults(func=cmd_stabilize)

    s = sub.add_parser("lognorm-max", help="max over the diagonal box of mu2(D M)")
    s.add_argument("--input", required=True, help="matrix file")
    s.add_argument("--m", type=float, required=True, help="lower activation slope")
    s.add_argument("--oracle", action="store_true", help="cross-check by vertex enumeration (n <= 20)")
    s.set_defaults(func=cmd_lognorm_max)

    s = sub.add_parser("demo-illustrative", help="extremizer schedule of the built-in 3x3 example")
    s.add_argument("--out", help="CSV path (default: standard output)")
    s.set_defaults(func=cmd_demo_illustrative)

    s = sub.add_parser("verify-bound", help="empirical check of the exp(delta T) amplification bound")
    s.add_argument("--manifest", required=True, help="model manifest")
    s.add_argument("--delta", type=float, required=True, help="certified log-norm")
    s.add_argument("--trials", type=int, default=1000, help="number of perturbed pairs")
    s.add_argument("--scale", type=float, default=1e-3, help="initial perturbation size")
    s.add_argument("--slack", type=float, default=1e-3, help="relative slack on the bound")
    s.add_argument("--seed", type=int, default=0, help="random seed")
    s.add_argument("--out", help="report path")
    s.set_defaults(func=cmd_verify_bound)

    s = sub.add_parser("robustness", help="adversarial robustness experiment")
    s.add_argument("--config", required=True, help="experiment config (key = value)")
    s.add_argument("--out", default="robustness_out", help="output directory")
    s.set_defaults(func=cmd_robustness)
    return p


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    try:
        return args.func(args)
    except (NonConvergenceError, DivergenceError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_RUNTIME
    except (LogstabError, OSError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_CONTRACT


if __name__ == "__main__":
    sys.exit(main())
