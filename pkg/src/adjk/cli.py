"""Command-line interface: ``adjk compile | grad-check | demo | scan | check-access``."""

from __future__ import annotations

import argparse
import dataclasses
import sys
from pathlib import Path

import numpy as np

from . import io, simulators
from .autodiff import AutodiffError
from .frontend import ParseError, parse_file
from .ir import STAGES, IRError, dump_kernel
from .passes import PassError, eliminate_mutable_locals, flatten_branches, lower_program, simplify
from .autodiff import differentiate, make_adjoint
from .runtime import ExecMode, FieldStore, Runtime, check_access_rules, grad_check

EXIT_OK, EXIT_FAILURE, EXIT_USAGE = 0, 1, 2


class UsageError(Exception):
    def __init__(self, message, usage_printed=False):
        super().__init__(message)
        self.usage_printed = usage_printed


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        raise UsageError(f"{self.prog}: error: {message}", usage_printed=True)


def _on_off(text: str) -> bool:
    if text not in ("on", "off"):
        raise argparse.ArgumentTypeError("expected 'on' or 'off'")
    return text == "on"


def _u64(text: str) -> int:
    v = int(text)
    if not 0 <= v < 2 ** 64:
        raise argparse.ArgumentTypeError("seed must be an unsigned 64-bit integer")
    return v


def build_parser() -> argparse.ArgumentParser:
    p = _Parser(prog="adjk", description="Differentiable kernel compiler and simulators.")
    sub = p.add_subparsers(dest="command", metavar="COMMAND", parser_class=_Parser)
    sub.required = True

    c = sub.add_parser("compile", help="parse, lower and print IR")
    c.add_argument("file")
    c.add_argument("--dump-ir", choices=STAGES, help="print kernels at this stage")
    c.add_argument("--kernel", help="only this kernel")

    g = sub.add_parser("grad-check", help="compare adjoints with finite differences")
    g.add_argument("file")
    g.add_argument("--loss", required=True, help="0-D loss field")
    g.add_argument("--input", required=True, help="input field to perturb")
    g.add_argument("--eps", type=float, default=1e-6)
    g.add_argument("--f64", action="store_true", help="double precision (recommended)")
    g.add_argument("--launch", action="append", metavar="KERNEL[:ARG,...]",
                   help="launch sequence (default: every parameterless kernel in order)")
    g.add_argument("--samples", type=int, default=20)
    g.add_argument("--tol", type=float, help="relative error threshold "
                   "(default 1e-5 with --f64, 1e-2 without)")
    g.add_argument("--seed", type=_u64, default=0, help="seed for the random initial fields")

    d = sub.add_parser("demo", help="run a simulator")
    d.add_argument("name", help=", ".join(simulators.NAMES))
    d.add_argument("--iters", type=int)
    d.add_argument("--steps", type=int)
    d.add_argument("--toi", type=_on_off)
    d.add_argument("--segment", type=int, help="segment size for checkpointing (robot only)")
    d.add_argument("--out", help="output directory (default out/<name>)")
    d.add_argument("--seed", type=_u64)
    d.add_argument("--deterministic", action="store_true", help="sequential, reproducible execution")
    d.add_argument("--f64", action="store_true", help="double precision fields")
    d.add_argument("--robot", choices=("robot1", "robot2", "robot3"))
    d.add_argument("--frame-every", type=int, help="write a frame every N iterations")
    d.add_argument("--grads", action="store_true", help="also write grads.csv")

    s = sub.add_parser("scan", help="parameter sweep")
    s.add_argument("name", choices=("billiards", "bouncing_ball"))
    s.add_argument("--param", required=True, help="angle (billiards) or height (bouncing_ball)")
    s.add_argument("--from", dest="lo", type=float, required=True)
    s.add_argument("--to", dest="hi", type=float, required=True)
    s.add_argument("--samples", type=int, required=True)
    s.add_argument("--out", required=True, help="CSV file")
    s.add_argument("--toi", type=_on_off, default=False)

    a = sub.add_parser("check-access", help="run the global data access rule checker")
    a.add_argument("file")
    a.add_argument("--kernel", required=True)
    a.add_argument("--arg", action="append", default=[], help="kernel argument (repeatable)")
    return p


# ----------------------------------------------------------------------------
# compile / grad-check / check-access


def _load(path):
    try:
        return parse_file(path)
    except OSError as exc:
        raise RuntimeError(f"cannot read {path}: {exc.strerror or exc}") from None


def cmd_compile(args) -> int:
    program = _load(args.file)
    names = [args.kernel] if args.kernel else list(program.kernels)
    for n in names:
        program.kernel(n)
    stage = args.dump_ir
    out = []
    for name in names:
        k = program.kernels[name]
        if stage == "parsed":
            out.append(dump_kernel(k))
            continue
        k = flatten_branches(k)
        if stage == "flattened":
            out.append(dump_kernel(k))
            continue
        k = simplify(eliminate_mutable_locals(k))
        if stage == "adjoint":
            out.append(dump_kernel(simplify(make_adjoint(k, program))))
        elif stage == "ssa":
            out.append(dump_kernel(k))
    if stage is None:
        lowered = differentiate(lower_program(program))
        print(f"{args.file}: {len(program.fields)} field(s), {len(names)} kernel(s) compiled")
        for name, why in lowered.adjoint_errors.items():
            print(f"  note: no adjoint for {name}: {why}")
    else:
        print("\n".join(out), end="")
    return EXIT_OK


def _parse_launches(program, specs):
    seq = []
    if not specs:
        for name, k in program.kernels.items():
            if not k.params:
                seq.append((name, ()))
        if not seq:
            raise RuntimeError("no parameterless kernels to launch; use --launch")
        return seq
    for spec in specs:
        name, _, rest = spec.partition(":")
        program.kernel(name)
        vals = tuple(float(v) if any(ch in v for ch in ".eE") else int(v)
                     for v in rest.split(",") if v) if rest else ()
        seq.append((name, vals))
    return seq


def cmd_grad_check(args) -> int:
    program = differentiate(lower_program(_load(args.file)))
    seq = _parse_launches(program, args.launch)
    precision = "f64" if args.f64 else "f32"
    store = FieldStore(program, precision)
    rng = np.random.default_rng(args.seed)
    for name, decl in program.fields.items():
        if decl.elem.name == "F32" and name != args.loss:
            store[name] = rng.uniform(0.5, 1.5, decl.shape)
    loss_init = store.snapshot([args.loss])

    def closure(rt):
        rt.store.restore(loss_init)
        for name, vals in seq:
            rt.launch(name, *vals)

    tol = args.tol if args.tol is not None else (1e-5 if args.f64 else 1e-2)
    eps = args.eps if args.f64 else max(args.eps, 1e-3)
    report = grad_check(program, closure, args.input, args.loss, epsilon=eps,
                        n_samples=args.samples, seed=args.seed, store=store, rel_tol=tol,
                        allow_f32=not args.f64)
    print(report.summary())
    ok = report.passed
    print(f"{'PASS' if ok else 'FAIL'}: threshold rel err < {tol:g} ({precision})")
    return EXIT_OK if ok else EXIT_FAILURE


def cmd_check_access(args) -> int:
    program = lower_program(_load(args.file))
    kernel = program.kernel(args.kernel)
    if len(args.arg) != len(kernel.params):
        raise UsageError(f"kernel {args.kernel} takes {len(kernel.params)} argument(s); "
                         f"pass them with --arg")
    vals = [float(v) if ty.name == "F32" else int(v) for v, (_, ty) in zip(args.arg, kernel.params)]
    violations = check_access_rules(program, FieldStore(program, "f64"), args.kernel, vals)
    for v in violations:
        print(v)
    print(f"{len(violations)} violation(s)")
    return EXIT_OK if not violations else EXIT_FAILURE


# ----------------------------------------------------------------------------
# demo / scan


def _frame_image(name, data):
    data = np.asarray(data, dtype=np.float64)
    if name in ("wave", "smoke"):
        return data
    return io.rasterize_points(data)


def cmd_demo(args) -> int:
    try:
        mod = simulators.get(args.name)
    except KeyError as exc:
        raise UsageError(str(exc.args[0])) from None
    known = {f.name for f in dataclasses.fields(mod.load_config())}
    overrides = {}
    for flag, key in (("iters", "n_iterations"), ("steps", "n_steps"), ("seed", "seed"),
                      ("robot", "robot")):
        value = getattr(args, flag)
        if value is not None:
            if key not in known:
                raise UsageError(f"demo {args.name} has no --{flag} option")
            overrides[key] = value
    if args.segment is not None and args.name != "mass_spring_robot":
        raise UsageError("--segment is only supported by mass_spring_robot")
    if args.toi is not None and args.name not in ("mass_spring_robot", "bouncing_ball"):
        raise UsageError(f"demo {args.name} has no --toi option")
    if args.toi is not None and "toi" in known:
        overrides["toi"] = args.toi
    cfg = mod.load_config(**overrides)
    mode = ExecMode.DETERMINISTIC if args.deterministic else ExecMode.PARALLEL
    precision = "f64" if args.f64 else "f32"
    out = Path(args.out or Path("out") / args.name)
    out.mkdir(parents=True, exist_ok=True)

    if args.name == "bouncing_ball":
        res = mod.run(cfg, toi=True if args.toi is None else args.toi, precision=precision, mode=mode)
        print(f"bouncing_ball toi={'on' if res.extra['toi'] else 'off'}: final height "
              f"{res.extra['final_height']:.6f}, d final/d initial height {res.extra['gradient']:+.6f}")
        io.write_loss_csv(out / "loss.csv", res.losses, {"gradient": [res.extra["gradient"]]})
        traj = res.extra["trajectory"]
        io.write_pgm(out / io.frame_name(0), io.rasterize_points(
            np.stack([np.linspace(0, 1, len(traj)), traj], 1)))
    else:
        iters = getattr(cfg, "n_iterations", 1)
        every = args.frame_every or max(iters // 10, 1)
        kwargs = {"segment_size": args.segment} if args.segment else {}
        res = mod.run(cfg, precision=precision, mode=mode, frame_every=every, **kwargs)
        io.write_loss_csv(out / "loss.csv", res.losses)
        for i, (_, data) in enumerate(res.frames):
            io.write_pgm(out / io.frame_name(i), _frame_image(args.name, data))
        print(f"{args.name}: {len(res.losses)} iteration(s), loss {res.losses[0]:.6g} -> "
              f"{res.losses[-1]:.6g} ({res.wall_clock:.1f} s)")
        if args.name == "mass_spring_simple":
            print("rest lengths: " + ", ".join(f"{v:.4f}" for v in res.params["spring_length"])
                  + f"; final area {res.extra['final_area']:.4f}")
    if args.grads:
        with open(out / "grads.csv", "w") as fh:
            fh.write("field,index,grad\n")
            for name, g in res.grads.items():
                g = np.asarray(g, dtype=np.float64)
                for ix in np.ndindex(g.shape) if g.shape else [()]:
                    fh.write(f"{name},{';'.join(map(str, ix))},{float(g[ix])!r}\n")
    print(f"wrote {out}")
    return EXIT_OK


def cmd_scan(args) -> int:
    if args.samples < 2:
        raise UsageError("--samples must be at least 2")
    if args.name == "billiards":
        if args.param != "angle":
            raise UsageError("billiards scans the 'angle' parameter")
        from .simulators import billiards as mod
        values, losses, grads = mod.scan(lo=args.lo, hi=args.hi, samples=args.samples)
        jumps = mod.jumps(losses)
        extra = f"{len(jumps)} jump(s) in the loss"
    else:
        if args.param != "height":
            raise UsageError("bouncing_ball scans the 'height' parameter")
        from .simulators import bouncing_ball as mod
        values, losses, grads = mod.scan(toi=args.toi, lo=args.lo, hi=args.hi, samples=args.samples)
        extra = f"{mod.sign_changes(losses)} sign change(s) of the discrete derivative"
    Path(args.out).parent.mkdir(parents=True, exist_ok=True)
    io.write_loss_csv(args.out, losses, {args.param: values, "grad": grads})
    print(f"{args.name} scan over {args.param} in [{args.lo}, {args.hi}]: {args.samples} samples, {extra}")
    return EXIT_OK


COMMANDS = {"compile": cmd_compile, "grad-check": cmd_grad_check, "demo": cmd_demo,
            "scan": cmd_scan, "check-access": cmd_check_access}


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
        return COMMANDS[args.command](args)
    except UsageError as exc:
        if not exc.usage_printed:
            parser.print_usage(sys.stderr)
        print(exc, file=sys.stderr)
        return EXIT_USAGE
    except ParseError as exc:
        print(exc, file=sys.stderr)
        return EXIT_FAILURE
    except (IRError, PassError, AutodiffError, RuntimeError, ArithmeticError, ValueError,
            KeyError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_FAILURE


if __name__ == "__main__":
    sys.exit(main())
