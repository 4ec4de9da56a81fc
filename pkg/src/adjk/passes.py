"""IR passes run ahead of differentiation.

The pipeline is fixed: :func:`flatten_branches` removes ``if`` statements,
:func:`eliminate_mutable_locals` turns the kernel into single-assignment form
and :func:`simplify` folds constants and drops dead code.  Each pass is a pure
``Kernel -> Kernel`` function and is idempotent.
"""

from __future__ import annotations

import math

from . import ir, scalar
from .ir import (
    F32, I32, AtomicAdd, BinOp, Cast, ConstF, ConstI, FieldLoad, FieldStore,
    For, If, IRError, Kernel, LocalAssign, LocalDecl, LocalRead, LoopVar,
    NameGen, Param, Select, StageError, UnaryOp,
)


class PassError(IRError):
    """A kernel uses a construct a pass cannot transform."""


def _require(kernel: Kernel, allowed, pass_name):
    if kernel.stage not in allowed:
        raise StageError(f"{pass_name}: kernel {kernel.name!r} is at stage "
                         f"{kernel.stage!r}, expected one of {tuple(allowed)}")


def _all_names(kernel: Kernel) -> set:
    return ir.declared_names(kernel.body) | {p[0] for p in kernel.params}


# ----------------------------------------------------------------------------
# flatten_branches


def _is_simple(e) -> bool:
    """Cheap, load-free expressions may be duplicated instead of hoisted."""
    return expr_is_pure(e) and ir.expr_size(e) <= 3


def expr_is_pure(e) -> bool:
    return not ir.contains(e, lambda n: isinstance(n, FieldLoad))


class _Flattener:
    def __init__(self, kernel: Kernel):
        self.kernel = kernel
        self.names = NameGen(_all_names(kernel))
        self.generated: set = set()

    def fresh(self, base):
        name = self.names.fresh(base)
        self.generated.add(name)
        return name

    def run(self) -> Kernel:
        body = self.block(self.kernel.body, {})
        return self.kernel.with_body(body, stage="flattened")

    def block(self, body, mutables) -> list:
        """Flatten a block outside any branch.

        ``mutables`` maps mutable local names to their types; needed to
        decide which conditions must be hoisted.
        """
        out = []
        mutables = dict(mutables)
        for s in body:
            if isinstance(s, If):
                out.extend(self.flatten_if(s, mutables))
            elif isinstance(s, For):
                out.append(ir.For(s.var, s.lo, s.hi, s.parallel,
                                  tuple(self.block(s.body, mutables)), s.reverse, s.span))
            else:
                if isinstance(s, LocalDecl) and s.mutable:
                    mutables[s.name] = s.init.ty
                out.append(s)
        return out

    def flatten_if(self, s: If, mutables) -> list:
        out = []
        cond = s.cond
        reads_mut = any(n in mutables for n in ir.local_reads(cond))
        if not expr_is_pure(cond) or reads_mut or ir.expr_size(cond) > 3:
            name = self.fresh("cond")
            out.append(LocalDecl(name, False, cond, cond.span))
            cond = LocalRead(name, I32, cond.span)
        # run both arms against the current values of outer mutable locals
        env_t, stmts_t = self.arm(s.then, cond, True, mutables)
        env_e, stmts_e = self.arm(s.orelse, cond, False, mutables)
        out.extend(stmts_t)
        out.extend(stmts_e)
        for name in sorted(set(env_t) | set(env_e), key=lambda n: _first_index(n, env_t, env_e)):
            ty = mutables[name]
            a = env_t.get(name, LocalRead(name, ty))
            b = env_e.get(name, LocalRead(name, ty))
            out.append(LocalAssign(name, Select(cond, a, b, s.span), s.span))
        return out

    def arm(self, body, cond, taken: bool, mutables):
        """Straight-line version of one arm.

        Returns (env, stmts): ``env`` maps each outer mutable local assigned in
        the arm to an expression for its value at the end of the arm.
        """
        env: dict = {}
        rename: dict = {}  # arm-local name -> fresh name
        stmts: list = []
        outer = dict(mutables)

        def cur(e):
            e = ir.substitute_locals(e, {k: LocalRead(v[0], v[1]) for k, v in rename.items()})
            return ir.substitute_locals(e, env)

        def guard(new, old):
            return Select(cond, new, old) if taken else Select(cond, old, new)

        def safe(x):
            # the arm runs even when its condition is false: swap operands
            # that could fault (load indices, integer divisors, float to
            # int casts) for harmless values on that path
            if isinstance(x, FieldLoad):
                index = tuple(i if isinstance(i, ConstI) else guard(i, ConstI(0)) for i in x.index)
                return FieldLoad(x.field, index, x.ty, x.grad, x.span)
            if (isinstance(x, BinOp) and x.op in ("div", "mod") and x.ty is I32
                    and not (isinstance(x.rhs, ConstI) and x.rhs.value != 0)):
                return BinOp(x.op, x.lhs, guard(x.rhs, ConstI(1)), x.span)
            if (isinstance(x, Cast) and x.target is I32 and x.operand.ty is F32
                    and not isinstance(x.operand, ConstF)):
                return Cast(I32, guard(x.operand, ConstF(0.0)), x.span)
            return None

        def spec(e):
            return ir.map_expr(cur(e), safe)

        def hoist(e):
            # values that read an outer mutable must be captured now: the
            # merges run in sequence and would otherwise see updated values
            if _is_simple(e) and not (ir.local_reads(e) & set(outer)):
                return e
            name = self.fresh("br")
            stmts.append(LocalDecl(name, False, e, e.span))
            return LocalRead(name, e.ty, e.span)

        arm_mut = {s.name: s.init.ty for s in body if isinstance(s, LocalDecl) and s.mutable}
        flat_body = []
        for s in body:
            if isinstance(s, If):
                flat_body.extend(self.flatten_if(s, {**outer, **arm_mut}))
            else:
                flat_body.append(s)

        for s in flat_body:
            if isinstance(s, For):
                raise PassError(f"kernel {self.kernel.name!r}: loops inside branches are not supported"
                                + (f" ({s.span})" if s.span else ""))
            if isinstance(s, LocalDecl):
                new = s.name if s.name in self.generated else self.fresh(s.name)
                rename[s.name] = (new, s.init.ty)
                stmts.append(LocalDecl(new, s.mutable, spec(s.init), s.span))
            elif isinstance(s, LocalAssign):
                if s.name in rename:
                    stmts.append(LocalAssign(rename[s.name][0], spec(s.value), s.span))
                elif s.name in outer:
                    env[s.name] = hoist(spec(s.value))
                else:
                    raise PassError(f"assignment to unknown local {s.name!r}")
            elif isinstance(s, FieldStore):
                index = tuple(cur(i) for i in s.index)
                old = FieldLoad(s.field, index, s.value.ty, s.grad)
                stmts.append(FieldStore(s.field, index, guard(spec(s.value), old), s.grad, s.span))
            elif isinstance(s, AtomicAdd):
                index = tuple(cur(i) for i in s.index)
                zero = ir.zero_of(s.value.ty)
                stmts.append(AtomicAdd(s.field, index, guard(spec(s.value), zero), s.grad, s.span))
            else:
                raise PassError(f"unexpected statement {type(s).__name__} in branch")
        return env, stmts


def _first_index(name, env_t, env_e):
    keys = list(env_t) + [k for k in env_e if k not in env_t]
    return keys.index(name)


def flatten_branches(kernel: Kernel) -> Kernel:
    """Replace every ``if`` by select-merged straight-line code.

    Both arms are evaluated unconditionally.  Locals assigned in an arm are
    merged with ``select``; stores write back the old value on the untaken
    arm and atomic adds add zero.  Inside an arm, load indices, integer
    divisors and float-to-int cast operands are replaced by 0, 1 and 0.0 on
    the untaken path so speculation cannot fault.  Store and atomic indices
    are evaluated as written.
    """
    _require(kernel, ("parsed", "flattened"), "flatten_branches")
    return _Flattener(kernel).run()


# ----------------------------------------------------------------------------
# eliminate_mutable_locals


class _Forwarder:
    def __init__(self, kernel: Kernel):
        self.kernel = kernel
        self.names = NameGen(_all_names(kernel))

    def run(self) -> Kernel:
        body = self.block(self.kernel.body, {})
        return self.kernel.with_body(body, stage="ssa")

    def block(self, body, env) -> list:
        """``env`` maps a mutable local to the LocalRead of its current version."""
        env = dict(env)
        out = []
        for s in body:
            sub = lambda e: ir.substitute_locals(e, env)  # noqa: E731
            if isinstance(s, LocalDecl):
                init = sub(s.init)
                if s.mutable:
                    name = self.names.fresh(s.name)
                    out.append(LocalDecl(name, False, init, s.span))
                    env[s.name] = LocalRead(name, init.ty, s.span)
                else:
                    out.append(LocalDecl(s.name, False, init, s.span))
            elif isinstance(s, LocalAssign):
                if s.name not in env:
                    raise PassError(f"assignment to non-mutable or unknown local {s.name!r}")
                value = sub(s.value)
                name = self.names.fresh(s.name)
                out.append(LocalDecl(name, False, value, s.span))
                env[s.name] = LocalRead(name, value.ty, s.span)
            elif isinstance(s, (FieldStore, AtomicAdd)):
                out.append(type(s)(s.field, tuple(sub(i) for i in s.index), sub(s.value), s.grad, s.span))
            elif isinstance(s, For):
                carried = _assigned_outer(s.body)
                carried = sorted(n for n in carried if n in env)
                if carried:
                    kind = "parallel" if s.parallel else "serial"
                    raise PassError(
                        f"kernel {self.kernel.name!r}: {kind} loop over {s.var!r} carries mutable "
                        f"local(s) {', '.join(carried)}; use a global field with atomic adds instead"
                        + (f" ({s.span})" if s.span else ""))
                out.append(For(s.var, sub(s.lo), sub(s.hi), s.parallel,
                               tuple(self.block(s.body, env)), s.reverse, s.span))
            elif isinstance(s, If):
                raise StageError("eliminate_mutable_locals: kernel still contains if statements")
            else:
                raise PassError(f"unexpected statement {type(s).__name__}")
        return out


def _assigned_outer(body) -> set:
    """Names assigned in ``body`` but not declared inside it."""
    declared = set()
    assigned = set()
    for n in ir.walk_block(body):
        if isinstance(n, LocalDecl):
            declared.add(n.name)
        elif isinstance(n, LocalAssign):
            assigned.add(n.name)
    return assigned - declared


def eliminate_mutable_locals(kernel: Kernel) -> Kernel:
    """Store-forward mutable locals into fresh immutable versions."""
    _require(kernel, ("flattened", "ssa"), "eliminate_mutable_locals")
    return _Forwarder(kernel).run()


# ----------------------------------------------------------------------------
# simplify

def _const(e):
    if isinstance(e, (ConstF, ConstI)):
        return e.value
    return None


def _mk(value, ty, span=None):
    if ty is F32:
        return ConstF(float(value), span)
    return ConstI(int(value), span)


def fold_binop(op, a, b, ty):
    """Evaluate a binary op on constants; None if the result is not foldable."""
    try:
        if op == "div":
            r = scalar.idiv(a, b) if ty is I32 else scalar.fdiv(a, b)
        elif op == "mod":
            r = scalar.imod(a, b) if ty is I32 else scalar.fmod(a, b)
        else:
            r = scalar.BINARY[op](a, b)
    except (ArithmeticError, KeyError):
        return None
    return _checked(r, ty if op not in ir.COMPARISONS else I32)


def fold_unary(op, a, ty):
    if ty is I32:
        if op not in ("neg", "abs"):
            return None
        r = -a if op == "neg" else abs(a)
    else:
        r = scalar.UNARY_F[op](a)
    return _checked(r, ty)


def _checked(r, ty):
    if ty is F32:
        return r if math.isfinite(r) else None
    return r if scalar.I32_MIN <= r <= scalar.I32_MAX else None


def _is_zero(e):
    return isinstance(e, (ConstF, ConstI)) and e.value == 0 and not (
        isinstance(e, ConstF) and math.copysign(1.0, e.value) < 0)


def _is_one(e):
    return isinstance(e, (ConstF, ConstI)) and e.value == 1


def _simplify_expr(e):
    def fn(x):
        if isinstance(x, BinOp):
            a, b = _const(x.lhs), _const(x.rhs)
            if a is not None and b is not None:
                r = fold_binop(x.op, a, b, x.lhs.ty)
                if r is not None:
                    return _mk(r, x.ty, x.span)
            op, l, r_ = x.op, x.lhs, x.rhs
            # additive identities: x + 0 keeps -0.0 semantics only when the
            # zero is +0.0 (-0.0 + +0.0 == +0.0), so fold 0 + x / x + 0 for
            # ints, and for floats only x - 0 / x + (-0.0)
            if op == "add":
                if x.ty is I32 and _is_zero(r_):
                    return l
                if x.ty is I32 and _is_zero(l):
                    return r_
                if isinstance(r_, ConstF) and r_.value == 0 and math.copysign(1.0, r_.value) < 0:
                    return l
                if l == r_ and expr_is_pure(l):
                    return BinOp("mul", _mk(2, x.ty), l, x.span)
            if op == "sub" and _is_zero(r_):
                return l
            if op == "mul":
                if _is_one(r_):
                    return l
                if _is_one(l):
                    return r_
                if x.ty is I32 and (_is_zero(l) or _is_zero(r_)) and expr_is_pure(l) and expr_is_pure(r_):
                    return ConstI(0, x.span)
            if op == "div" and _is_one(r_):
                return l
            return None
        if isinstance(x, UnaryOp):
            a = _const(x.operand)
            if a is not None:
                r = fold_unary(x.op, a, x.ty)
                if r is not None:
                    return _mk(r, x.ty, x.span)
            if x.op == "neg" and isinstance(x.operand, UnaryOp) and x.operand.op == "neg":
                return x.operand.operand
            return None
        if isinstance(x, Select):
            c = _const(x.cond)
            if c is not None:
                return x.a if c != 0 else x.b
            if x.a == x.b and expr_is_pure(x.cond):
                return x.a
            return None
        if isinstance(x, Cast):
            a = _const(x.operand)
            if a is not None:
                if x.target is F32:
                    return ConstF(float(a), x.span)
                if x.operand.ty is I32:
                    return ConstI(int(a), x.span)
                if math.isfinite(a) and scalar.I32_MIN <= int(a) <= scalar.I32_MAX:
                    return ConstI(scalar.f2i(a), x.span)
            if x.operand.ty is x.target and isinstance(x.operand, Cast):
                return x.operand
            return None
        return None
    return ir.map_expr(e, fn)


def _propagatable(init) -> bool:
    return isinstance(init, (ConstF, ConstI, Param, LoopVar)) or (
        isinstance(init, LocalRead))


class _Simplifier:
    def __init__(self, kernel: Kernel):
        self.kernel = kernel
        self.mutable = {n.name for n in ir.walk_block(kernel.body)
                        if isinstance(n, LocalDecl) and n.mutable}

    def rewrite(self, body, env) -> list:
        """Fold expressions and copy-propagate trivial immutable locals."""
        env = dict(env)
        out = []
        for s in body:
            sub = lambda e: _simplify_expr(ir.substitute_locals(e, env))  # noqa: E731
            if isinstance(s, LocalDecl):
                init = sub(s.init)
                if not s.mutable and _propagatable(init) and not (
                        isinstance(init, LocalRead) and init.name in self.mutable):
                    env[s.name] = init
                    continue
                out.append(LocalDecl(s.name, s.mutable, init, s.span))
            elif isinstance(s, LocalAssign):
                out.append(LocalAssign(s.name, sub(s.value), s.span))
            elif isinstance(s, (FieldStore, AtomicAdd)):
                value = sub(s.value)
                if isinstance(s, AtomicAdd) and isinstance(value, (ConstF, ConstI)) and value.value == 0:
                    continue
                out.append(type(s)(s.field, tuple(sub(i) for i in s.index), value, s.grad, s.span))
            elif isinstance(s, For):
                lo, hi = sub(s.lo), sub(s.hi)
                body2 = self.rewrite(s.body, env)
                if not body2:
                    continue
                if isinstance(lo, ConstI) and isinstance(hi, ConstI) and hi.value <= lo.value:
                    continue
                out.append(For(s.var, lo, hi, s.parallel, tuple(body2), s.reverse, s.span))
            elif isinstance(s, If):
                c = sub(s.cond)
                out.append(If(c, tuple(self.rewrite(s.then, env)), tuple(self.rewrite(s.orelse, env)), s.span))
            else:
                out.append(s)
        return out

    def dce(self, body) -> list:
        """Drop locals that are never read (iterated to a fixpoint)."""
        while True:
            used = set()
            for n in ir.walk_block(body):
                if isinstance(n, LocalRead):
                    used.add(n.name)
            removed = False

            def sweep(block):
                nonlocal removed
                out = []
                for s in block:
                    if isinstance(s, LocalDecl) and s.name not in used:
                        removed = True
                        continue
                    if isinstance(s, LocalAssign) and s.name not in used:
                        removed = True
                        continue
                    if isinstance(s, For):
                        inner = sweep(s.body)
                        if not inner:
                            removed = True
                            continue
                        s = For(s.var, s.lo, s.hi, s.parallel, tuple(inner), s.reverse, s.span)
                    elif isinstance(s, If):
                        s = If(s.cond, tuple(sweep(s.then)), tuple(sweep(s.orelse)), s.span)
                    out.append(s)
                return out

            body = sweep(body)
            if not removed:
                return body

    def run(self) -> Kernel:
        body = list(self.kernel.body)
        for _ in range(50):
            new = self.dce(self.rewrite(body, {}))
            if new == body:
                break
            body = new
        return self.kernel.with_body(body)


def simplify(kernel: Kernel) -> Kernel:
    """Constant folding, algebraic identities, copy propagation and DCE.

    Floating folds use the same libm functions as the sequential backend so
    results are bit-identical to unfolded execution.  Folds producing a
    non-finite value are left in place.
    """
    _require(kernel, ("ssa", "adjoint"), "simplify")
    return _Simplifier(kernel).run()


def run_pipeline(kernel: Kernel, until: str = "ssa") -> Kernel:
    """Parsed kernel -> flattened -> ssa (+simplify)."""
    k = flatten_branches(kernel)
    if until == "flattened":
        return k
    k = eliminate_mutable_locals(k)
    return simplify(k)


def lower_program(program, until: str = "ssa"):
    """Return a copy of ``program`` with every kernel lowered to ``until``."""
    import dataclasses
    kernels = {}
    for name, k in program.kernels.items():
        if k.stage == "parsed" or (until == "ssa" and k.stage == "flattened"):
            k = run_pipeline(k, until)
        kernels[name] = k
    return dataclasses.replace(program, kernels=kernels, custom_grads=dict(program.custom_grads),
                               routines=dict(program.routines), adjoints={}, adjoint_errors=dict(program.adjoint_errors))
