"""Command-line interface: ``heterodispatch <command> ...``.

Exit status: 0 on success, 1 for usage or input errors, 2 when the requested
policy is infeasible or the fixed point cannot be computed.
"""

from __future__ import annotations

import argparse
import csv
import io
import json
import sys
from pathlib import Path

from . import harness
from .core import FAMILIES, ParameterError, SystemParams, problem_size
from .meanfield import GeneralFCFS, InstabilityDetected, NonConvergence, analyze
from .optimizer import Budget, BudgetExhausted, Infeasible
from .simulator import CldRule, Exponential, Hyperexponential, SimConfig, simulate

EXIT_OK, EXIT_USAGE, EXIT_FAIL = 0, 1, 2


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        raise UsageError(message)


def _int_range(text: str):
    """'2..5' -> [2, 3, 4, 5]; '3' -> [3]; '2,4' -> [2, 4]."""
    try:
        if ".." in text:
            lo, hi = text.split("..")
            return list(range(int(lo), int(hi) + 1))
        return [int(x) for x in text.split(",")]
    except ValueError:
        raise argparse.ArgumentTypeError(f"bad integer range {text!r}")


def _floats(text: str):
    try:
        return tuple(float(x) for x in text.split(","))
    except ValueError:
        raise argparse.ArgumentTypeError(f"bad number list {text!r}")


def _emit(rows, fmt, out=None):
    out = out or sys.stdout
    if fmt == "json":
        json.dump(rows, out, indent=2)
        out.write("\n")
        return
    if not rows:
        return
    buf = io.StringIO()
    w = csv.DictWriter(buf, fieldnames=list(rows[0]), lineterminator="\n")
    w.writeheader()
    w.writerows(rows)
    out.write(buf.getvalue())


def _params_from_args(args) -> SystemParams:
    if args.params:
        data = json.loads(Path(args.params).read_text())
        p = SystemParams.from_dict(data.get("params", data))
    elif args.s is not None:
        if args.mu is None or args.q is None or args.lam is None:
            raise UsageError("--s needs --d, --lam, --mu and --q")
        p = SystemParams(args.s, args.d, args.lam, args.mu, args.q,
                         normalized=not args.unnormalized)
    else:
        raise UsageError("give --params FILE or --s/--d/--lam/--mu/--q")
    if args.lam is not None and args.params:
        p = p.with_lambda(args.lam)
    return p


def _add_param_flags(sp):
    sp.add_argument("--params", help="JSON file with s, d, lambda, mu, q")
    sp.add_argument("--s", type=int)
    sp.add_argument("--d", type=int, default=1)
    sp.add_argument("--lam", "--lambda", dest="lam", type=float)
    sp.add_argument("--mu", type=_floats)
    sp.add_argument("--q", type=_floats)
    sp.add_argument("--unnormalized", action="store_true",
                    help="skip the sum(mu*q)=1 check")


# -- commands ---------------------------------------------------------------

def cmd_sizes(args):
    rows = []
    fams = [f.upper() for f in args.families.split(",")] if args.families else list(FAMILIES)
    for fam in fams:
        if fam not in FAMILIES and fam != "FIXEDQR":
            raise UsageError(f"unknown family {fam}")
        for s in args.s:
            for d in args.d:
                size = problem_size(fam, s, d)
                if fam == "DET":
                    for label, ps in (("max", size.max), ("avg", size.avg)):
                        rows.append({"family": f"DET-{label}", "s": s, "d": d,
                                     "vars": ps.vars, "lec": ps.lec, "nec": ps.nec,
                                     "dim": ps.dim, "subproblems": size.subproblems})
                else:
                    rows.append({"family": fam, "s": s, "d": d, "vars": size.vars,
                                 "lec": size.lec, "nec": size.nec, "dim": size.dim,
                                 "subproblems": size.subproblems})
    _emit(rows, args.format)
    return EXIT_OK


def cmd_settings(args):
    settings = harness.generate_settings(args.grid)
    if args.count:
        by_s = {}
        for st in settings:
            by_s[st.s] = by_s.get(st.s, 0) + 1
        rows = [{"s": s, "count": n} for s, n in sorted(by_s.items())]
        rows.append({"s": "total", "count": len(settings)})
    else:
        rows = [{"setting_id": st.setting_id, "s": st.s, "d": st.d, "lambda": st.lam,
                 "R": " ".join(map(str, st.R)), "shares": " ".join(map(str, st.shares)),
                 "mu": " ".join(repr(x) for x in st.mu)} for st in settings]
    _emit(rows, args.format)
    return EXIT_OK


def _service(args):
    if args.service == "exponential":
        return None
    return GeneralFCFS(args.c2)


def cmd_analyze(args):
    pf = harness.load_policy(args.policy)
    params = pf.params
    if args.lam is not None:
        params = params.with_lambda(args.lam)
    if pf.assignment_rule != "CID":
        raise UsageError("analyze handles CID policies only")
    if pf.rule is None:
        raise UsageError("policy file has no querying rule")
    sol = analyze(params, pf.rule, pf.assign, service=_service(args))
    rows = [{"class": i + 1, "lambda_idle": float(sol.lambda_idle[i]),
             "lambda_busy": float(sol.lambda_busy[i]), "rho": float(sol.rho[i]),
             "mean_T": float(sol.per_class_T[i]) if sol.per_class_T is not None else None}
            for i in range(params.s)]
    if args.format == "text":
        print(f"E[T]={sol.mean_T:.6f}")
        for r in rows:
            print(f"class {r['class']}: lambda_I={r['lambda_idle']:.6f} "
                  f"lambda_B={r['lambda_busy']:.6f} rho={r['rho']:.6f}")
    elif args.format == "json":
        _emit({"mean_T": sol.mean_T, "method": sol.method, "iterations": sol.iterations,
               "residual": sol.residual, "classes": rows}, "json")
    else:
        _emit([dict(r, E_T=sol.mean_T) for r in rows], "csv")
    return EXIT_OK


def cmd_optimize(args):
    params = _params_from_args(args)
    budget = Budget(args.starts, args.iters)
    fam = args.family.upper()
    pol = harness.solve_family(fam, params, budget, args.seed)
    doc = harness.policy_to_dict(params, pol.rule, pol.assign, pol.assignment_rule,
                                 pol.objective, pol.family, args.seed)
    text = json.dumps(doc, indent=2) + "\n"
    if args.out:
        Path(args.out).write_text(text)
    if args.format == "json" and not args.out:
        sys.stdout.write(text)
    else:
        _emit([{"family": pol.family, "objective": pol.objective,
                "runtime_s": pol.solver_report.get("runtime")}],
              "csv" if args.format == "csv" else "json")
    return EXIT_OK


def cmd_simulate(args):
    pf = harness.load_policy(args.policy)
    params = pf.params if args.lam is None else pf.params.with_lambda(args.lam)
    service = Hyperexponential() if args.service == "hyperexponential" else Exponential()
    cfg = SimConfig(args.k, args.horizon, args.warmup, args.seed, service)
    kind = (args.assign or pf.assignment_rule).upper()
    if kind == "CID":
        if pf.assign is None:
            raise UsageError("policy has no CID table")
        rule = CldRule("CID", pf.assign)
    else:
        rule = CldRule(kind)
    res = simulate(params, pf.rule, rule, cfg)
    row = {"k": args.k, "horizon": args.horizon, "seed": args.seed,
           "mean_T": res.mean_T, "stderr": res.stderr,
           "rho": " ".join(f"{x:.6f}" for x in res.per_class_rho)}
    _emit([row], "csv" if args.format == "csv" else "json")
    return EXIT_OK


def cmd_sweep(args):
    settings = harness.generate_settings(args.grid)
    if args.sample:
        settings = harness.sample_settings(settings, args.sample, args.seed)
    elif args.limit:
        settings = settings[:args.limit]
    fams = [f.strip() for f in args.families.split(",")]
    out = harness.run_sweep(settings, fams, Budget(args.starts, args.iters), args.out,
                            args.parallel, args.seed)
    rows = harness.read_sweep(out)
    agg = harness.aggregate(rows)
    _emit([dict(family=f, **v) for f, v in agg.items()], args.format)
    return EXIT_OK


def cmd_aggregate(args):
    agg = harness.aggregate(harness.read_sweep(args.file))
    _emit([dict(family=f, **v) for f, v in agg.items()], args.format)
    return EXIT_OK


def build_parser() -> argparse.ArgumentParser:
    p = _Parser(prog="heterodispatch", description=__doc__.splitlines()[0])
    sub = p.add_subparsers(dest="command", parser_class=_Parser)

    sp = sub.add_parser("sizes", help="optimization problem sizes per family")
    sp.add_argument("--s", type=_int_range, default=[2, 3, 4, 5])
    sp.add_argument("--d", type=_int_range, default=[2, 3, 4, 5])
    sp.add_argument("--families")
    sp.add_argument("--format", choices=("csv", "json"), default="csv")
    sp.set_defaults(func=cmd_sizes)

    sp = sub.add_parser("settings", help="emit the parameter-setting design")
    sp.add_argument("--grid", choices=("coarse", "fine"), default="coarse")
    sp.add_argument("--count", action="store_true", help="only print counts per s")
    sp.add_argument("--format", choices=("csv", "json"), default="csv")
    sp.set_defaults(func=cmd_settings)

    sp = sub.add_parser("analyze", help="solve the fixed point of a policy file")
    sp.add_argument("--policy", required=True)
    sp.add_argument("--lam", "--lambda", dest="lam", type=float)
    sp.add_argument("--service", choices=("exponential", "fcfs"), default="exponential")
    sp.add_argument("--c2", type=float, default=1.0)
    sp.add_argument("--format", choices=("text", "csv", "json"), default="text")
    sp.set_defaults(func=cmd_analyze)

    sp = sub.add_parser("optimize", help="optimize a policy family")
    _add_param_flags(sp)
    sp.add_argument("--family", required=True,
                    choices=[f.lower() for f in harness.SWEEP_FAMILIES])
    sp.add_argument("--starts", type=int, default=Budget().starts)
    sp.add_argument("--iters", type=int, default=Budget().iters)
    sp.add_argument("--seed", type=int, default=0)
    sp.add_argument("--out")
    sp.add_argument("--format", choices=("csv", "json"), default="json")
    sp.set_defaults(func=cmd_optimize)

    sp = sub.add_parser("simulate", help="simulate a policy file with k servers")
    sp.add_argument("--policy", required=True)
    sp.add_argument("--k", type=int, default=1000)
    sp.add_argument("--horizon", type=int, default=1_000_000)
    sp.add_argument("--warmup", type=int)
    sp.add_argument("--seed", type=int, default=0)
    sp.add_argument("--lam", "--lambda", dest="lam", type=float)
    sp.add_argument("--assign", help="CID (default) or JSQ, JSQ*, SED, SED*, SEW, SEW*")
    sp.add_argument("--service", choices=("exponential", "hyperexponential"),
                    default="exponential")
    sp.add_argument("--format", choices=("csv", "json"), default="json")
    sp.set_defaults(func=cmd_simulate)

    sp = sub.add_parser("sweep", help="run families over generated settings")
    sp.add_argument("--families", required=True, help="comma-separated, e.g. IID,SRC,BR")
    sp.add_argument("--out", required=True)
    sp.add_argument("--grid", choices=("coarse", "fine"), default="coarse")
    sp.add_argument("--limit", type=int)
    sp.add_argument("--sample", type=int, help="random subset of this size")
    sp.add_argument("--starts", type=int, default=4)
    sp.add_argument("--iters", type=int, default=Budget().iters)
    sp.add_argument("--seed", type=int, default=0)
    sp.add_argument("--parallel", type=int)
    sp.add_argument("--format", choices=("csv", "json"), default="csv")
    sp.set_defaults(func=cmd_sweep)

    sp = sub.add_parser("aggregate", help="summarize a sweep CSV")
    sp.add_argument("file")
    sp.add_argument("--format", choices=("csv", "json"), default="csv")
    sp.set_defaults(func=cmd_aggregate)
    return p


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
        if not getattr(args, "func", None):
            parser.print_help(sys.stderr)
            return EXIT_USAGE
        return args.func(args)
    except UsageError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except (Infeasible, InstabilityDetected, NonConvergence, BudgetExhausted) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_FAIL
    except (ParameterError, ValueError, KeyError, OSError, json.JSONDecodeError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_USAGE


if __name__ == "__main__":
    sys.exit(main())
