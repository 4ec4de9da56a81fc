"""Typed kernel IR: field declarations, expressions, statements, kernels.

Nodes are frozen dataclasses.  Every expression node carries its scalar type
in ``ty``; source spans are attached for diagnostics but excluded from
equality so that structurally identical trees compare equal regardless of
where they came from.

The textual dump produced by :func:`dump_ir` / :func:`dump_program` is the
external IR format.  At the ``parsed`` stage it is valid DSL source, so a
dump can be parsed back (see ``adjk.frontend``).
"""

from __future__ import annotations

import enum
from dataclasses import dataclass, field, fields, is_dataclass
from typing import Callable, Iterator, Optional, Union


class ScalarType(enum.Enum):
    F32 = "f32"
    I32 = "i32"

    def __str__(self) -> str:
        return self.value


F32 = ScalarType.F32
I32 = ScalarType.I32

STAGES = ("parsed", "flattened", "ssa", "adjoint")


def stage_rank(stage: str) -> int:
    return STAGES.index(stage)


class IRError(Exception):
    """Malformed IR handed to an operation that requires well-formed input."""


class StageError(IRError):
    """A kernel has not reached (or has passed) the stage an operation needs."""


@dataclass(frozen=True)
class SourceSpan:
    file: str
    line: int
    column: int
    length: int = 1

    def __str__(self) -> str:
        return f"{self.file}:{self.line}:{self.column}"


def _span():
    return field(default=None, compare=False, repr=False)


# ----------------------------------------------------------------------------
# expressions

BINARY_OPS = (
    "add", "sub", "mul", "div", "mod", "min", "max",
    "cmp_lt", "cmp_le", "cmp_eq", "cmp_gt", "cmp_ge", "cmp_ne",
)
COMPARISONS = ("cmp_lt", "cmp_le", "cmp_eq", "cmp_gt", "cmp_ge", "cmp_ne")
UNARY_OPS = ("neg", "sin", "cos", "exp", "sqrt", "abs", "tanh", "floor")
# Unary ops that only make sense on floating operands.
FLOAT_ONLY_UNARY = ("sin", "cos", "exp", "sqrt", "tanh", "floor")


@dataclass(frozen=True)
class Expr:
    pass


@dataclass(frozen=True)
class ConstF(Expr):
    value: float
    span: Optional[SourceSpan] = _span()

    @property
    def ty(self) -> ScalarType:
        return F32


@dataclass(frozen=True)
class ConstI(Expr):
    value: int
    span: Optional[SourceSpan] = _span()

    @property
    def ty(self) -> ScalarType:
        return I32


@dataclass(frozen=True)
class Param(Expr):
    index: int
    ty: ScalarType
    span: Optional[SourceSpan] = _span()


@dataclass(frozen=True)
class LoopVar(Expr):
    name: str
    span: Optional[SourceSpan] = _span()

    @property
    def ty(self) -> ScalarType:
        return I32


@dataclass(frozen=True)
class LocalRead(Expr):
    name: str
    ty: ScalarType
    span: Optional[SourceSpan] = _span()


@dataclass(frozen=True)
class FieldLoad(Expr):
    """Read of ``field[index...]``; ``grad`` selects the adjoint buffer."""

    field: str
    index: tuple
    ty: ScalarType
    grad: bool = False
    span: Optional[SourceSpan] = _span()


@dataclass(frozen=True)
class BinOp(Expr):
    op: str
    lhs: Expr
    rhs: Expr
    span: Optional[SourceSpan] = _span()

    @property
    def ty(self) -> ScalarType:
        if self.op in COMPARISONS:
            return I32
        return self.lhs.ty


@dataclass(frozen=True)
class UnaryOp(Expr):
    op: str
    operand: Expr
    span: Optional[SourceSpan] = _span()

    @property
    def ty(self) -> ScalarType:
        return self.operand.ty


@dataclass(frozen=True)
class Select(Expr):
    cond: Expr
    a: Expr
    b: Expr
    span: Optional[SourceSpan] = _span()

    @property
    def ty(self) -> ScalarType:
        return self.a.ty


@dataclass(frozen=True)
class Cast(Expr):
    target: ScalarType
    operand: Expr
    span: Optional[SourceSpan] = _span()

    @property
    def ty(self) -> ScalarType:
        return self.target


# ----------------------------------------------------------------------------
# statements


@dataclass(frozen=True)
class Stmt:
    pass


@dataclass(frozen=True)
class LocalDecl(Stmt):
    name: str
    mutable: bool
    init: Expr
    span: Optional[SourceSpan] = _span()


@dataclass(frozen=True)
class LocalAssign(Stmt):
    name: str
    value: Expr
    span: Optional[SourceSpan] = _span()


@dataclass(frozen=True)
class FieldStore(Stmt):
    field: str
    index: tuple
    value: Expr
    grad: bool = False
    span: Optional[SourceSpan] = _span()


@dataclass(frozen=True)
class AtomicAdd(Stmt):
    field: str
    index: tuple
    value: Expr
    grad: bool = False
    span: Optional[SourceSpan] = _span()


@dataclass(frozen=True)
class If(Stmt):
    cond: Expr
    then: tuple
    orelse: tuple = ()
    span: Optional[SourceSpan] = _span()


@dataclass(frozen=True)
class For(Stmt):
    var: str
    lo: Expr
    hi: Expr
    parallel: bool
    body: tuple
    reverse: bool = False
    span: Optional[SourceSpan] = _span()


# ----------------------------------------------------------------------------
# containers


@dataclass(frozen=True)
class FieldDecl:
    name: str
    elem: ScalarType
    shape: tuple = ()
    needs_grad: bool = False
    span: Optional[SourceSpan] = _span()

    @property
    def size(self) -> int:
        n = 1
        for e in self.shape:
            n *= e
        return n


@dataclass(frozen=True)
class Kernel:
    name: str
    params: tuple  # of (name, ScalarType)
    body: tuple
    stage: str = "parsed"
    span: Optional[SourceSpan] = _span()

    def with_body(self, body, stage: Optional[str] = None, name: Optional[str] = None) -> "Kernel":
        return Kernel(name or self.name, self.params, tuple(body),
                      stage or self.stage, self.span)


@dataclass
class Program:
    """Compilation unit: fields, kernels, host routines, custom gradients.

    ``routines`` maps a routine id to a host callable taking a runtime and the
    recorded scalar arguments.  ``custom_grads`` maps a routine name to the
    pair (forward routine id, backward routine id).
    """

    fields: dict = field(default_factory=dict)
    kernels: dict = field(default_factory=dict)
    custom_grads: dict = field(default_factory=dict)
    routines: dict = field(default_factory=dict)
    # generated adjoint kernels keyed by primal name
    adjoints: dict = field(default_factory=dict)
    # kernels whose adjoint could not be generated: name -> reason
    adjoint_errors: dict = field(default_factory=dict)
    # source text when built by compile_source, else ""
    source: str = ""

    def field(self, name: str) -> FieldDecl:
        try:
            return self.fields[name]
        except KeyError:
            raise IRError(f"undeclared field {name!r}") from None

    def kernel(self, name: str) -> Kernel:
        try:
            return self.kernels[name]
        except KeyError:
            raise IRError(f"unknown kernel {name!r}") from None

    def define_routine(self, name: str, fn: Callable) -> None:
        if name in self.routines:
            raise IRError(f"routine {name!r} already defined")
        self.routines[name] = fn


# ----------------------------------------------------------------------------
# traversal helpers


def children(node) -> Iterator:
    """Yield the direct IR children (expressions and statements) of a node."""
    for f in fields(node):
        if f.name == "span":
            continue
        v = getattr(node, f.name)
        if isinstance(v, (Expr, Stmt)):
            yield v
        elif isinstance(v, tuple):
            for item in v:
                if isinstance(item, (Expr, Stmt)):
                    yield item


def walk(node) -> Iterator:
    yield node
    for c in children(node):
        yield from walk(c)


def walk_block(body) -> Iterator:
    for s in body:
        yield from walk(s)


def map_expr(e: Expr, fn: Callable[[Expr], Optional[Expr]]) -> Expr:
    """Rebuild ``e`` bottom-up; ``fn`` may return a replacement or None."""
    if isinstance(e, FieldLoad):
        e = FieldLoad(e.field, tuple(map_expr(i, fn) for i in e.index), e.ty, e.grad, e.span)
    elif isinstance(e, BinOp):
        e = BinOp(e.op, map_expr(e.lhs, fn), map_expr(e.rhs, fn), e.span)
    elif isinstance(e, UnaryOp):
        e = UnaryOp(e.op, map_expr(e.operand, fn), e.span)
    elif isinstance(e, Select):
        e = Select(map_expr(e.cond, fn), map_expr(e.a, fn), map_expr(e.b, fn), e.span)
    elif isinstance(e, Cast):
        e = Cast(e.target, map_expr(e.operand, fn), e.span)
    r = fn(e)
    return e if r is None else r


def substitute_locals(e: Expr, env: dict) -> Expr:
    """Replace ``LocalRead(name)`` by ``env[name]`` where present."""
    def fn(x):
        if isinstance(x, LocalRead) and x.name in env:
            return env[x.name]
        return None
    return map_expr(e, fn)


def expr_size(e: Expr) -> int:
    return sum(1 for _ in walk(e))


def contains(node, pred) -> bool:
    return any(pred(n) for n in walk(node))


def local_reads(node) -> set:
    return {n.name for n in walk(node) if isinstance(n, LocalRead)}


def declared_names(body) -> set:
    names = set()
    for n in walk_block(body):
        if isinstance(n, LocalDecl):
            names.add(n.name)
        elif isinstance(n, For):
            names.add(n.var)
    return names


def zero_of(ty: ScalarType) -> Expr:
    return ConstF(0.0) if ty is F32 else ConstI(0)


def one_of(ty: ScalarType) -> Expr:
    return ConstF(1.0) if ty is F32 else ConstI(1)


class NameGen:
    """Fresh-name source that avoids every name already used in a kernel."""

    def __init__(self, taken=()):
        self.taken = set(taken)
        self.counters: dict = {}

    def fresh(self, base: str) -> str:
        base = base.split(".")[0] if not base.startswith("%") else base
        n = self.counters.get(base, 0)
        while True:
            n += 1
            name = f"{base}.{n}"
            if name not in self.taken:
                break
        self.counters[base] = n
        self.taken.add(name)
        return name

    def temp(self) -> str:
        n = self.counters.get("%", 0)
        while True:
            n += 1
            name = f"%{n}"
            if name not in self.taken:
                break
        self.counters["%"] = n
        self.taken.add(name)
        return name


# ----------------------------------------------------------------------------
# validation


@dataclass(frozen=True)
class Diagnostic:
    kernel: str
    path: str
    message: str
    span: Optional[SourceSpan] = None

    def __str__(self) -> str:
        where = f" ({self.span})" if self.span else ""
        return f"{self.kernel}: {self.path}: {self.message}{where}"


class _Validator:
    def __init__(self, program: Program, kernel: Kernel, out: list):
        self.program = program
        self.kernel = kernel
        self.out = out

    def err(self, path, msg, node=None):
        self.out.append(Diagnostic(self.kernel.name, path, msg, getattr(node, "span", None)))

    def run(self):
        k = self.kernel
        names = [p[0] for p in k.params]
        if len(set(names)) != len(names):
            self.err("params", "duplicate parameter name")
        if k.stage not in STAGES:
            self.err("stage", f"unknown stage {k.stage!r}")
        self.block(k.body, "body", {}, set(), top=True)

    # scope: name -> (ty, mutable); loops: set of loop var names in scope
    def block(self, body, path, scope, loops, top=False):
        scope = dict(scope)
        for i, s in enumerate(body):
            self.stmt(s, f"{path}[{i}]", scope, loops, top)

    def stmt(self, s, path, scope, loops, top):
        stage = self.kernel.stage
        if isinstance(s, LocalDecl):
            t = self.expr(s.init, f"{path}.init", scope, loops)
            if s.name in scope or s.name in loops:
                self.err(path, f"local {s.name!r} redeclared in scope", s)
            if s.mutable and stage in ("ssa",):
                self.err(path, f"mutable local {s.name!r} at stage {stage}", s)
            scope[s.name] = (t, s.mutable)
        elif isinstance(s, LocalAssign):
            t = self.expr(s.value, f"{path}.value", scope, loops)
            if s.name not in scope:
                self.err(path, f"assignment to undeclared local {s.name!r}", s)
            else:
                ty, mut = scope[s.name]
                if not mut:
                    self.err(path, f"assignment to immutable local {s.name!r}", s)
                if t is not None and ty is not None and t is not ty:
                    self.err(path, f"type mismatch assigning {t} to {ty} local {s.name!r}", s)
            if stage == "ssa":
                self.err(path, f"local assignment at stage {stage}", s)
        elif isinstance(s, (FieldStore, AtomicAdd)):
            kind = "store" if isinstance(s, FieldStore) else "atomic add"
            decl = self.access(s.field, s.index, path, scope, loops, s)
            t = self.expr(s.value, f"{path}.value", scope, loops)
            if decl is not None and t is not None and t is not decl.elem:
                self.err(path, f"{kind} of {t} value into {decl.elem} field {s.field!r}", s)
            if s.grad:
                if stage != "adjoint":
                    self.err(path, f"adjoint {kind} outside an adjoint kernel", s)
                if isinstance(s, FieldStore):
                    self.err(path, f"plain store to adjoint of {s.field!r}", s)
                if decl is not None and not decl.needs_grad:
                    self.err(path, f"field {s.field!r} has no adjoint", s)
        elif isinstance(s, If):
            if stage != "parsed":
                self.err(path, f"if statement at stage {stage}", s)
            t = self.expr(s.cond, f"{path}.cond", scope, loops)
            if t is not None and t is not I32:
                self.err(path, "if condition must be i32", s)
            self.block(s.then, f"{path}.then", scope, loops)
            self.block(s.orelse, f"{path}.orelse", scope, loops)
        elif isinstance(s, For):
            for nm, e in (("lo", s.lo), ("hi", s.hi)):
                t = self.expr(e, f"{path}.{nm}", scope, loops)
                if t is not None and t is not I32:
                    self.err(path, f"loop bound {nm} must be i32", s)
            if s.parallel and not top:
                self.err(path, "parallel for is only allowed as an outermost loop", s)
            if s.var in scope or s.var in loops:
                self.err(path, f"loop variable {s.var!r} shadows a name in scope", s)
            self.block(s.body, f"{path}.body", scope, loops | {s.var})
        else:
            self.err(path, f"unknown statement {type(s).__name__}")

    def access(self, name, index, path, scope, loops, node):
        decl = self.program.fields.get(name)
        if decl is None:
            self.err(path, f"undeclared field {name!r}", node)
        elif len(index) != len(decl.shape):
            self.err(path, f"field {name!r} has rank {len(decl.shape)}, indexed with {len(index)}", node)
        for j, ix in enumerate(index):
            t = self.expr(ix, f"{path}.index[{j}]", scope, loops)
            if t is not None and t is not I32:
                self.err(path, f"index {j} of {name!r} is {t}, expected i32", node)
        return decl

    def expr(self, e, path, scope, loops) -> Optional[ScalarType]:
        if isinstance(e, ConstF):
            return F32
        if isinstance(e, ConstI):
            return I32
        if isinstance(e, Param):
            if not 0 <= e.index < len(self.kernel.params):
                self.err(path, f"parameter index {e.index} out of range", e)
                return None
            if self.kernel.params[e.index][1] is not e.ty:
                self.err(path, "parameter type mismatch", e)
            return e.ty
        if isinstance(e, LoopVar):
            if e.name not in loops:
                self.err(path, f"loop variable {e.name!r} not in scope", e)
            return I32
        if isinstance(e, LocalRead):
            if e.name not in scope:
                self.err(path, f"read of undeclared local {e.name!r}", e)
                return e.ty
            if scope[e.name][0] is not None and scope[e.name][0] is not e.ty:
                self.err(path, f"local {e.name!r} read with wrong type", e)
            return e.ty
        if isinstance(e, FieldLoad):
            decl = self.access(e.field, e.index, path, scope, loops, e)
            if decl is not None and decl.elem is not e.ty:
                self.err(path, f"load of {decl.elem} field {e.field!r} typed {e.ty}", e)
            if e.grad:
                if self.kernel.stage != "adjoint":
                    self.err(path, "adjoint load outside an adjoint kernel", e)
                if decl is not None and not decl.needs_grad:
                    self.err(path, f"field {e.field!r} has no adjoint", e)
            return e.ty
        if isinstance(e, BinOp):
            a = self.expr(e.lhs, f"{path}.lhs", scope, loops)
            b = self.expr(e.rhs, f"{path}.rhs", scope, loops)
            if e.op not in BINARY_OPS:
                self.err(path, f"unknown binary op {e.op!r}", e)
            if a is not None and b is not None and a is not b:
                self.err(path, f"operand types differ in {e.op}: {a} vs {b}", e)
            return e.ty
        if isinstance(e, UnaryOp):
            a = self.expr(e.operand, f"{path}.operand", scope, loops)
            if e.op not in UNARY_OPS:
                self.err(path, f"unknown unary op {e.op!r}", e)
            if e.op in FLOAT_ONLY_UNARY and a is I32:
                self.err(path, f"{e.op} requires an f32 operand", e)
            return e.ty
        if isinstance(e, Select):
            c = self.expr(e.cond, f"{path}.cond", scope, loops)
            a = self.expr(e.a, f"{path}.a", scope, loops)
            b = self.expr(e.b, f"{path}.b", scope, loops)
            if c is not None and c is not I32:
                self.err(path, "select condition must be i32", e)
            if a is not None and b is not None and a is not b:
                self.err(path, f"select arms differ: {a} vs {b}", e)
            return e.ty
        if isinstance(e, Cast):
            self.expr(e.operand, f"{path}.operand", scope, loops)
            return e.target
        self.err(path, f"unknown expression {type(e).__name__}")
        return None


def validate(program: Program) -> list:
    """Return diagnostics for every broken type/arity/declaration invariant."""
    out: list = []
    for name, decl in program.fields.items():
        if decl.name != name:
            out.append(Diagnostic("<fields>", name, "field key does not match its name"))
        if any(e < 1 for e in decl.shape):
            out.append(Diagnostic("<fields>", name, "field extents must be >= 1"))
        if decl.needs_grad and decl.elem is not F32:
            out.append(Diagnostic("<fields>", name, "needs_grad requires an f32 field"))
    for name, k in program.kernels.items():
        if k.name != name:
            out.append(Diagnostic(name, "name", "kernel key does not match its name"))
        _Validator(program, k, out).run()
    for name, k in program.adjoints.items():
        _Validator(program, k, out).run()
    for name, (fwd, bwd) in program.custom_grads.items():
        for rid in (fwd, bwd):
            if rid not in program.routines:
                out.append(Diagnostic("<custom_grads>", name, f"unknown routine {rid!r}"))
    return out


def ensure_valid(program: Program) -> Program:
    diags = validate(program)
    if diags:
        raise IRError("invalid program:\n" + "\n".join(str(d) for d in diags))
    return program


# ----------------------------------------------------------------------------
# textual dump

_BIN_SYMBOL = {
    "add": "+", "sub": "-", "mul": "*", "div": "/", "mod": "%",
    "cmp_lt": "<", "cmp_le": "<=", "cmp_eq": "==",
    "cmp_gt": ">", "cmp_ge": ">=", "cmp_ne": "!=",
}
# precedence: comparison 3, additive 4, multiplicative 5, unary 6, atom 7
_BIN_PREC = {
    "add": 4, "sub": 4, "mul": 5, "div": 5, "mod": 5,
    "cmp_lt": 3, "cmp_le": 3, "cmp_eq": 3, "cmp_gt": 3, "cmp_ge": 3, "cmp_ne": 3,
}
_TIGHT = ("mul", "div", "mod")


def format_float(v: float) -> str:
    s = repr(float(v))
    if "inf" in s or "nan" in s:
        # not lexable; only reachable for hand-built IR
        return f"f32({s})"
    return s


class _Printer:
    def __init__(self, kernel: Optional[Kernel]):
        self.kernel = kernel

    def param_name(self, e: Param) -> str:
        if self.kernel is not None and 0 <= e.index < len(self.kernel.params):
            return self.kernel.params[e.index][0]
        return f"$arg{e.index}"

    def prec(self, e: Expr) -> int:
        if isinstance(e, BinOp) and e.op in _BIN_PREC:
            return _BIN_PREC[e.op]
        if isinstance(e, ConstF) and (e.value < 0 or repr(e.value).startswith("-")):
            return 6
        if isinstance(e, ConstI) and e.value < 0:
            return 6
        if isinstance(e, UnaryOp) and e.op == "neg":
            return 6
        return 7

    def wrap(self, e: Expr, min_prec: int) -> str:
        s = self.expr(e)
        return f"({s})" if self.prec(e) < min_prec else s

    def access(self, name, index, grad) -> str:
        ix = ", ".join(self.expr(i) for i in index)
        return f"{name}{'.grad' if grad else ''}[{ix}]"

    def expr(self, e: Expr) -> str:
        if isinstance(e, ConstF):
            return format_float(e.value)
        if isinstance(e, ConstI):
            return str(e.value)
        if isinstance(e, Param):
            return self.param_name(e)
        if isinstance(e, LoopVar):
            return e.name
        if isinstance(e, LocalRead):
            return e.name
        if isinstance(e, FieldLoad):
            return self.access(e.field, e.index, e.grad)
        if isinstance(e, BinOp):
            if e.op in ("min", "max"):
                return f"{e.op}({self.expr(e.lhs)}, {self.expr(e.rhs)})"
            p = _BIN_PREC[e.op]
            lhs_min = p + 1 if p == 3 else p
            sym = _BIN_SYMBOL[e.op]
            sep = sym if e.op in _TIGHT else f" {sym} "
            return f"{self.wrap(e.lhs, lhs_min)}{sep}{self.wrap(e.rhs, p + 1)}"
        if isinstance(e, UnaryOp):
            if e.op == "neg":
                inner = e.operand
                # a bare literal after '-' would re-parse as a negative constant
                if isinstance(inner, (ConstF, ConstI)):
                    return f"-({self.expr(inner)})"
                return f"-{self.wrap(inner, 6)}"
            return f"{e.op}({self.expr(e.operand)})"
        if isinstance(e, Select):
            return f"select({self.expr(e.cond)}, {self.expr(e.a)}, {self.expr(e.b)})"
        if isinstance(e, Cast):
            return f"{e.target.value}({self.expr(e.operand)})"
        raise IRError(f"cannot print {type(e).__name__}")

    def block(self, body, indent: int, lines: list):
        pad = "  " * indent
        for s in body:
            if isinstance(s, LocalDecl):
                mut = "mut " if s.mutable else ""
                lines.append(f"{pad}let {mut}{s.name} = {self.expr(s.init)};")
            elif isinstance(s, LocalAssign):
                lines.append(f"{pad}{s.name} = {self.expr(s.value)};")
            elif isinstance(s, FieldStore):
                lines.append(f"{pad}{self.access(s.field, s.index, s.grad)} = {self.expr(s.value)};")
            elif isinstance(s, AtomicAdd):
                lines.append(f"{pad}{self.access(s.field, s.index, s.grad)} += {self.expr(s.value)};")
            elif isinstance(s, If):
                lines.append(f"{pad}if {self.expr(s.cond)} {{")
                self.block(s.then, indent + 1, lines)
                if s.orelse:
                    lines.append(f"{pad}}} else {{")
                    self.block(s.orelse, indent + 1, lines)
                lines.append(f"{pad}}}")
            elif isinstance(s, For):
                par = "parallel " if s.parallel else ""
                rng = f"{self.expr(s.lo)}..{self.expr(s.hi)}"
                rev = "  # reversed" if s.reverse else ""
                lines.append(f"{pad}{par}for {s.var} in {rng} {{{rev}")
                self.block(s.body, indent + 1, lines)
                lines.append(f"{pad}}}")
            else:
                raise IRError(f"cannot print {type(s).__name__}")


def dump_expr(e: Expr, kernel: Optional[Kernel] = None) -> str:
    return _Printer(kernel).expr(e)


def dump_kernel(kernel: Kernel) -> str:
    pr = _Printer(kernel)
    params = ", ".join(f"{n}: {t.value}" for n, t in kernel.params)
    lines = [f"# stage: {kernel.stage}", f"kernel {kernel.name}({params}) {{"]
    pr.block(kernel.body, 1, lines)
    lines.append("}")
    return "\n".join(lines) + "\n"


def dump_ir(kernel: Kernel, stage: Optional[str] = None) -> str:
    """Render a kernel; ``stage`` (if given) must be the stage it has reached."""
    if stage is not None:
        if stage not in STAGES:
            raise StageError(f"unknown stage {stage!r}")
        if stage_rank(kernel.stage) < stage_rank(stage):
            raise StageError(f"kernel {kernel.name!r} is at stage {kernel.stage!r}, "
                             f"has not reached {stage!r}")
        if kernel.stage != stage:
            raise StageError(f"kernel {kernel.name!r} is at stage {kernel.stage!r}, not {stage!r}")
    return dump_kernel(kernel)


def dump_field(decl: FieldDecl) -> str:
    shape = ", ".join(str(e) for e in decl.shape)
    ng = " needs_grad" if decl.needs_grad else ""
    return f"field {decl.name}: {decl.elem.value}[{shape}]{ng};"


def dump_program(program: Program, kernels: Optional[list] = None) -> str:
    parts = [dump_field(d) for d in program.fields.values()]
    text = "\n".join(parts) + ("\n" if parts else "")
    names = kernels if kernels is not None else list(program.kernels)
    for n in names:
        text += "\n" + dump_kernel(program.kernels[n])
    return text


def structurally_equal(a, b) -> bool:
    """Equality ignoring spans (dataclass eq already excludes them)."""
    return a == b


def replace_kernel(program: Program, kernel: Kernel) -> None:
    program.kernels[kernel.name] = kernel


def is_node(x) -> bool:
    return is_dataclass(x) and isinstance(x, (Expr, Stmt))


ExprLike = Union[Expr, float, int]
