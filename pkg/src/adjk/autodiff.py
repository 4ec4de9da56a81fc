"""Reverse-mode source transformation of SSA kernels.

:func:`make_adjoint` turns a primal kernel into ``<name>.grad``.  Each block
of the adjoint first recomputes the block's locals and then walks the block
backwards, accumulating local adjoints and emitting atomic adds into the
adjoint buffers of ``needs_grad`` fields:

* a load ``f[I]`` of a ``needs_grad`` field becomes ``f.grad[I] += adj``;
* a store or atomic add into ``g[I]`` reads ``g.grad[I]`` as the incoming
  adjoint of the stored value;
* serial loops are reversed, the top-level parallel loop is kept parallel.

Locals of an enclosing block that receive contributions inside a loop get a
mutable accumulator declared ahead of the loop.  Fields without ``needs_grad``
act as gradient stops.
"""

from __future__ import annotations

import dataclasses
from collections import defaultdict
from dataclasses import dataclass
from typing import Callable

from . import ir
from .ir import (
    F32, I32, AtomicAdd, BinOp, Cast, ConstF, ConstI, FieldLoad, FieldStore,
    For, IRError, Kernel, LocalAssign, LocalDecl, LocalRead, LoopVar, Param,
    Program, Select, StageError, UnaryOp,
)


class AutodiffError(IRError):
    pass


def adjoint_name(name: str) -> str:
    return name + ".grad"


# ----------------------------------------------------------------------------
# derivative rules

def _neg(e):
    return UnaryOp("neg", e)


def _mul(a, b):
    return BinOp("mul", a, b)


def _sel(c, a, b):
    return Select(c, a, b)


_ZERO = ConstF(0.0)


@dataclass(frozen=True)
class DerivativeRule:
    """Local-gradient template for one op kind.

    ``contribs(operands, result, g)`` returns one expression per operand: the
    amount added to that operand's adjoint, or None when the partial is zero.
    """

    op: str
    contribs: Callable
    doc: str = ""


def _r(op, doc):
    def deco(fn):
        RULES[op] = DerivativeRule(op, fn, doc)
        return fn
    return deco


RULES: dict = {}


@_r("add", "(1, 1)")
def _(ops, x, g):
    return g, g


@_r("sub", "(1, -1)")
def _(ops, x, g):
    return g, _neg(g)


@_r("mul", "(b, a)")
def _(ops, x, g):
    a, b = ops
    return _mul(g, b), _mul(g, a)


@_r("div", "(1/b, -a/b^2)")
def _(ops, x, g):
    a, b = ops
    return BinOp("div", g, b), _neg(BinOp("div", _mul(g, x), b))


@_r("mod", "(1, 0): the divisor is treated as non-differentiable")
def _(ops, x, g):
    return g, None


@_r("min", "indicator of the selected operand, ties pick the first")
def _(ops, x, g):
    a, b = ops
    c = BinOp("cmp_le", a, b)
    return _sel(c, g, _ZERO), _sel(c, _ZERO, g)


@_r("max", "indicator of the selected operand, ties pick the first")
def _(ops, x, g):
    a, b = ops
    c = BinOp("cmp_ge", a, b)
    return _sel(c, g, _ZERO), _sel(c, _ZERO, g)


@_r("neg", "-1")
def _(ops, x, g):
    return (_neg(g),)


@_r("sin", "cos(a)")
def _(ops, x, g):
    return (_mul(g, UnaryOp("cos", ops[0])),)


@_r("cos", "-sin(a)")
def _(ops, x, g):
    return (_neg(_mul(g, UnaryOp("sin", ops[0]))),)


@_r("exp", "exp(a), reusing the result")
def _(ops, x, g):
    return (_mul(g, x),)


@_r("sqrt", "1/(2 sqrt(a)), reusing the result")
def _(ops, x, g):
    return (BinOp("div", g, _mul(ConstF(2.0), x)),)


@_r("abs", "sign(a), sign(0) = 0")
def _(ops, x, g):
    a = ops[0]
    return (_sel(BinOp("cmp_gt", a, _ZERO), g, _sel(BinOp("cmp_lt", a, _ZERO), _neg(g), _ZERO)),)


@_r("tanh", "1 - tanh(a)^2, reusing the result")
def _(ops, x, g):
    return (_mul(g, BinOp("sub", ConstF(1.0), _mul(x, x))),)


@_r("floor", "0")
def _(ops, x, g):
    return (None,)


@_r("select", "(0, select(c, g, 0), select(c, 0, g))")
def _(ops, x, g):
    c = ops[0]
    return None, _sel(c, g, _ZERO), _sel(c, _ZERO, g)


@_r("cast", "0: integers carry no gradient")
def _(ops, x, g):
    return (None,)


for _op in ir.COMPARISONS:
    RULES[_op] = DerivativeRule(_op, lambda ops, x, g: (None, None), "0")


def _op_key(e) -> str:
    if isinstance(e, (BinOp, UnaryOp)):
        return e.op
    if isinstance(e, Select):
        return "select"
    if isinstance(e, Cast):
        return "cast"
    raise AutodiffError(f"no derivative rule for {type(e).__name__}")


def _operands(e) -> tuple:
    if isinstance(e, BinOp):
        return (e.lhs, e.rhs)
    if isinstance(e, UnaryOp):
        return (e.operand,)
    if isinstance(e, Select):
        return (e.cond, e.a, e.b)
    if isinstance(e, Cast):
        return (e.operand,)
    return ()


def _rebuild(e, ops):
    if isinstance(e, BinOp):
        return BinOp(e.op, ops[0], ops[1], e.span)
    if isinstance(e, UnaryOp):
        return UnaryOp(e.op, ops[0], e.span)
    if isinstance(e, Select):
        return Select(ops[0], ops[1], ops[2], e.span)
    if isinstance(e, Cast):
        return Cast(e.target, ops[0], e.span)
    raise AssertionError(e)


def _is_leaf(e) -> bool:
    return isinstance(e, (ConstF, ConstI, Param, LoopVar, LocalRead))


def _sum(exprs):
    total = exprs[0]
    for e in exprs[1:]:
        total = BinOp("add", total, e)
    return total


# ----------------------------------------------------------------------------
# transform


@dataclass
class _Decl:
    name: str
    expr: object
    active: bool
    # FieldStore whose value this load reads back within the same block
    source: object = None


@dataclass
class _Write:
    stmt: object  # FieldStore or AtomicAdd with a leaf value
    active: bool


@dataclass
class _Loop:
    stmt: For


class _Adjointer:
    def __init__(self, kernel: Kernel, program: Program):
        self.kernel = kernel
        self.program = program
        self.names = ir.NameGen(ir.declared_names(kernel.body) | {p[0] for p in kernel.params})
        self.active: set = set()

    # -- activity -----------------------------------------------------
    def differentiable_field(self, name) -> bool:
        decl = self.program.fields.get(name)
        return decl is not None and decl.needs_grad

    def is_active(self, e) -> bool:
        if isinstance(e, LocalRead):
            return e.name in self.active
        if isinstance(e, FieldLoad):
            return not e.grad and e.ty is F32 and self.differentiable_field(e.field)
        if e.ty is I32:
            return False
        if isinstance(e, (Cast,)) or (isinstance(e, UnaryOp) and e.op == "floor"):
            return False
        if isinstance(e, Select):
            return self.is_active(e.a) or self.is_active(e.b)
        return any(self.is_active(o) for o in _operands(e))

    def unique(self, base) -> str:
        name, n = base, 1
        while name in self.names.taken:
            n += 1
            name = f"{base}{n}"
        self.names.taken.add(name)
        return name

    # -- linearisation ------------------------------------------------
    def linearize(self, body) -> list:
        items: list = []
        # identical subexpressions share one temp until the next write
        memo: dict = {}
        # (field, index) -> _Write of a plain store still visible to loads
        stored: dict = {}

        def atomize(e):
            if _is_leaf(e):
                return e
            if e in memo:
                return memo[e]
            t = self.names.temp()
            bind(t, e)
            memo[e] = LocalRead(t, e.ty)
            return memo[e]

        def bind(name, e):
            active = self.is_active(e)
            if active and not _is_leaf(e) and not isinstance(e, FieldLoad):
                e = _rebuild(e, [atomize(o) for o in _operands(e)])
            if active:
                self.active.add(name)
            source = stored.get((e.field, e.index)) if isinstance(e, FieldLoad) and active else None
            items.append(_Decl(name, e, active, source))

        def invalidate(field):
            for key in [k for k in stored
                        if k[0] == field or any(ir.contains(i, lambda n: isinstance(n, FieldLoad)
                                                            and n.field == field) for i in k[1])]:
                del stored[key]

        for s in body:
            if isinstance(s, LocalDecl):
                if s.mutable:
                    raise StageError("make_adjoint: kernel contains mutable locals (run the passes first)")
                bind(s.name, s.init)
            elif isinstance(s, (FieldStore, AtomicAdd)):
                active = (self.differentiable_field(s.field) and not s.grad
                          and self.is_active(s.value))
                value = atomize(s.value) if active else s.value
                w = _Write(type(s)(s.field, s.index, value, s.grad, s.span), active)
                items.append(w)
                memo.clear()
                invalidate(s.field)
                if isinstance(s, FieldStore) and not s.grad and self.differentiable_field(s.field):
                    stored[(s.field, s.index)] = w
            elif isinstance(s, For):
                items.append(_Loop(s))
                memo.clear()
                stored.clear()
            else:
                raise StageError(f"make_adjoint: unexpected {type(s).__name__} (kernel must be at stage ssa)")
        return items

    # -- generation ---------------------------------------------------
    def block(self, body, acc: dict) -> list:
        """Adjoint of one block: forward recomputation, then reverse sweep.

        ``acc`` maps outer locals to the accumulator collecting their
        contributions made inside this block.
        """
        items = self.linearize(body)
        fwd = [LocalDecl(it.name, False, it.expr) for it in items if isinstance(it, _Decl)]
        own = {it.name for it in items if isinstance(it, _Decl)}
        contribs: dict = defaultdict(list)
        # adjoint flowing from read-back loads into the store that produced them
        forwarded: dict = defaultdict(list)
        rev: list = []

        def add(target, c):
            if c is not None and isinstance(target, LocalRead) and target.name in self.active:
                contribs[target.name].append(c)

        for it in reversed(items):
            if isinstance(it, _Decl):
                if not it.active or not contribs.get(it.name):
                    continue
                adj = self.unique(it.name + ".adj")
                rev.append(LocalDecl(adj, False, _sum(contribs.pop(it.name))))
                g = LocalRead(adj, F32)
                e = it.expr
                if isinstance(e, FieldLoad) and it.source is not None:
                    if it.source.active:
                        forwarded[id(it.source)].append(g)
                elif isinstance(e, FieldLoad):
                    rev.append(AtomicAdd(e.field, e.index, g, True, e.span))
                elif isinstance(e, LocalRead):
                    add(e, g)
                elif not _is_leaf(e):
                    ops = _operands(e)
                    x = LocalRead(it.name, e.ty)
                    for o, c in zip(ops, RULES[_op_key(e)].contribs(ops, x, g)):
                        add(o, c)
            elif isinstance(it, _Write):
                if not it.active:
                    continue
                s = it.stmt
                gname = self.names.temp()
                incoming = FieldLoad(s.field, s.index, F32, True, s.span)
                extra = forwarded.pop(id(it), [])
                if extra:
                    incoming = BinOp("add", incoming, _sum(extra))
                rev.append(LocalDecl(gname, False, incoming))
                add(s.value, LocalRead(gname, F32))
            else:
                rev.extend(self.loop(it.stmt, contribs))

        for name, cs in contribs.items():
            if name in own:
                continue
            if name not in acc:
                raise AutodiffError(f"internal: contribution to {name!r} has no accumulator")
            a = acc[name]
            rev.append(LocalAssign(a, BinOp("add", LocalRead(a, F32), _sum(cs))))
        return fwd + rev

    def loop(self, s: For, contribs) -> list:
        inner_decl = ir.declared_names(s.body)
        outer = sorted(n for n in ir.local_reads(ir.For(s.var, s.lo, s.hi, s.parallel, s.body))
                       if n in self.active and n not in inner_decl)
        if s.parallel and outer:
            raise AutodiffError(
                f"kernel {self.kernel.name!r}: active local(s) {', '.join(outer)} computed outside "
                f"the parallel loop are read inside it; their adjoint would need a cross-iteration "
                f"reduction (compute them inside the loop or store them in a field)")
        out = []
        acc = {}
        for n in outer:
            acc[n] = self.unique(n + ".acc")
            out.append(LocalDecl(acc[n], True, ConstF(0.0)))
        body = self.block(s.body, acc)
        out.append(For(s.var, s.lo, s.hi, s.parallel, tuple(body), not s.parallel and not s.reverse, s.span))
        for n in outer:
            contribs[n].append(LocalRead(acc[n], F32))
        return out

    def run(self) -> Kernel:
        body = self.block(self.kernel.body, {})
        return Kernel(adjoint_name(self.kernel.name), self.kernel.params, tuple(body),
                      "adjoint", self.kernel.span)


def make_adjoint(kernel: Kernel, program: Program) -> Kernel:
    """Generate the adjoint kernel ``<name>.grad`` of an SSA-stage kernel.

    The result is not simplified; run :func:`adjk.passes.simplify` on it
    (``differentiate`` does this).
    """
    if kernel.stage != "ssa":
        raise StageError(f"make_adjoint: kernel {kernel.name!r} is at stage {kernel.stage!r}, expected 'ssa'")
    return _Adjointer(kernel, program).run()


def is_noop(kernel: Kernel) -> bool:
    """True when a (simplified) adjoint never touches an adjoint buffer."""
    return not any(isinstance(n, AtomicAdd) and n.grad for n in ir.walk_block(kernel.body))


def differentiate(program: Program, names=None) -> Program:
    """Attach simplified adjoints for every SSA kernel (in place, returned).

    Kernels whose adjoint cannot be generated are listed in
    ``program.adjoint_errors``; launching their adjoint raises.
    """
    from .passes import simplify

    for name in names if names is not None else list(program.kernels):
        k = program.kernels[name]
        try:
            program.adjoints[name] = simplify(make_adjoint(k, program))
            program.adjoint_errors.pop(name, None)
        except AutodiffError as exc:
            program.adjoint_errors[name] = str(exc)
            program.adjoints.pop(name, None)
    return program


def register_custom_gradient(program: Program, routine_name: str, forward_id: str,
                             backward_id: str) -> Program:
    """Return a program whose tape replays ``backward_id`` for ``routine_name``.

    Both ids must name routines already defined on the program.
    """
    if routine_name in program.custom_grads:
        raise AutodiffError(f"custom gradient for {routine_name!r} already registered")
    for rid in (forward_id, backward_id):
        if rid not in program.routines:
            raise AutodiffError(f"unknown routine id {rid!r}")
    grads = dict(program.custom_grads)
    grads[routine_name] = (forward_id, backward_id)
    return dataclasses.replace(program, custom_grads=grads)
