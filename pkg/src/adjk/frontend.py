"""Parser for the ``.dk`` kernel language.

Grammar (statements)::

    program     := (field_decl | kernel_decl)*
    field_decl  := "field" IDENT ":" ("f32"|"i32") "[" (INT ("," INT)*)? "]" ("needs_grad")? ";"
    kernel_decl := "kernel" IDENT "(" (IDENT ":" type ("," IDENT ":" type)*)? ")" block
    stmt        := for_stmt | if_stmt | let_stmt | assign_stmt | atomic_stmt
    for_stmt    := ("parallel")? "for" IDENT "in" expr ".." expr block
    if_stmt     := "if" expr block ("else" (block | if_stmt))?
    let_stmt    := "let" ("mut")? IDENT "=" expr ";"
    assign_stmt := IDENT "=" expr ";" | IDENT "[" args? "]" "=" expr ";"
    atomic_stmt := IDENT "[" args? "]" "+=" expr ";"

Expressions use the usual precedence (``|| && comparison + - * / % unary``),
``&&``/``||``/``!`` lower to integer arithmetic on 0/1 values.  Builtins:
``sin cos exp sqrt abs tanh floor min max select i32 f32``.

Integer and float operands mix by promoting the integer side; integer
literals next to floats become float literals.  ``/`` on two i32 values is
floor division, ``%`` is Euclidean.
"""

from __future__ import annotations

import re
from dataclasses import dataclass
from typing import Optional

from . import ir
from .ir import (
    F32, I32, AtomicAdd, BinOp, Cast, ConstF, ConstI, FieldDecl, FieldLoad,
    FieldStore, For, If, Kernel, LocalAssign, LocalDecl, LocalRead, LoopVar,
    Param, Program, ScalarType, Select, SourceSpan, UnaryOp,
)

KEYWORDS = {"field", "kernel", "parallel", "for", "in", "if", "else", "let", "mut",
            "needs_grad"}
UNARY_BUILTINS = {"sin", "cos", "exp", "sqrt", "abs", "tanh", "floor"}
BUILTINS = UNARY_BUILTINS | {"min", "max", "select", "i32", "f32"}

_TOKEN_RE = re.compile(r"""
    (?P<ws>[ \t\r]+)
  | (?P<nl>\n)
  | (?P<comment>\#[^\n]*)
  | (?P<float>\d+\.\d+(?:[eE][+-]?\d+)?|\d+[eE][+-]?\d+)
  | (?P<int>\d+)
  | (?P<ident>[A-Za-z_][A-Za-z_0-9]*)
  | (?P<op>\.\.|\+=|==|!=|<=|>=|&&|\|\||[-+*/%<>=!(){}\[\],;:])
""", re.VERBOSE)


@dataclass(frozen=True)
class Token:
    kind: str  # ident, int, float, op, eof
    text: str
    span: SourceSpan


@dataclass(frozen=True)
class ParseDiagnostic:
    message: str
    span: SourceSpan

    def __str__(self) -> str:
        return f"{self.span}: {self.message}"


class ParseError(Exception):
    def __init__(self, diagnostics):
        self.diagnostics = list(diagnostics)
        super().__init__("\n".join(str(d) for d in self.diagnostics))


class _Abort(Exception):
    """Internal: syntax error, unwind to the nearest recovery point."""


def tokenize(source: str, filename: str = "<string>") -> list:
    tokens = []
    line, line_start, pos = 1, 0, 0
    while pos < len(source):
        m = _TOKEN_RE.match(source, pos)
        if m is None:
            span = SourceSpan(filename, line, pos - line_start + 1, 1)
            raise ParseError([ParseDiagnostic(f"unexpected character {source[pos]!r}", span)])
        kind = m.lastgroup
        text = m.group()
        span = SourceSpan(filename, line, pos - line_start + 1, len(text))
        if kind == "nl":
            line += 1
            line_start = m.end()
        elif kind not in ("ws", "comment"):
            tokens.append(Token(kind, text, span))
        pos = m.end()
    tokens.append(Token("eof", "", SourceSpan(filename, line, pos - line_start + 1, 0)))
    return tokens


class _Scope:
    def __init__(self, parent: Optional["_Scope"] = None):
        self.parent = parent
        self.names: dict = {}

    def lookup(self, name):
        s = self
        while s is not None:
            if name in s.names:
                return s.names[name]
            s = s.parent
        return None


def _promote(a, b):
    """Bring two operands to a common type (i32 promotes to f32)."""
    if a.ty is b.ty:
        return a, b
    return _to_float(a), _to_float(b)


def _to_float(e):
    if e.ty is F32:
        return e
    if isinstance(e, ConstI):
        return ConstF(float(e.value), e.span)
    return Cast(F32, e, e.span)


def _truth(e):
    """Normalise an i32 condition to 0/1."""
    if isinstance(e, BinOp) and e.op in ir.COMPARISONS:
        return e
    return BinOp("cmp_ne", e, ConstI(0), e.span)


class Parser:
    def __init__(self, source: str, filename: str = "<string>"):
        self.filename = filename
        self.tokens = tokenize(source, filename)
        self.pos = 0
        self.errors: list = []
        self.program = Program()
        self.kernel_params: list = []

    # -- token helpers -------------------------------------------------
    @property
    def tok(self) -> Token:
        return self.tokens[self.pos]

    def peek(self, k=1) -> Token:
        return self.tokens[min(self.pos + k, len(self.tokens) - 1)]

    def at(self, text) -> bool:
        t = self.tok
        return t.kind in ("op", "ident") and t.text == text

    def advance(self) -> Token:
        t = self.tok
        if t.kind != "eof":
            self.pos += 1
        return t

    def syntax(self, msg, tok=None):
        tok = tok or self.tok
        found = "end of input" if tok.kind == "eof" else repr(tok.text)
        self.errors.append(ParseDiagnostic(f"{msg}, found {found}", tok.span))
        raise _Abort()

    def error(self, msg, span):
        self.errors.append(ParseDiagnostic(msg, span))

    def expect(self, text) -> Token:
        if not self.at(text):
            self.syntax(f"expected {text!r}")
        return self.advance()

    def ident(self, what="identifier") -> Token:
        t = self.tok
        if t.kind != "ident" or t.text in KEYWORDS:
            self.syntax(f"expected {what}")
        return self.advance()

    def sync(self, stop=(";", "}")):
        depth = 0
        while self.tok.kind != "eof":
            t = self.tok.text
            if t == "{":
                depth += 1
            elif t == "}":
                if depth == 0:
                    return
                depth -= 1
            elif t == ";" and depth == 0 and ";" in stop:
                self.advance()
                return
            self.advance()

    # -- top level -----------------------------------------------------
    def parse(self) -> Program:
        while self.tok.kind != "eof":
            start = self.pos
            try:
                if self.at("field"):
                    self.field_decl()
                elif self.at("kernel"):
                    self.kernel_decl()
                else:
                    self.syntax("expected 'field' or 'kernel'")
            except _Abort:
                if self.pos == start:
                    self.advance()
                self.sync_toplevel()
        if self.errors:
            raise ParseError(self.errors)
        return self.program

    def sync_toplevel(self):
        while self.tok.kind != "eof" and not (self.at("field") or self.at("kernel")):
            self.advance()

    def scalar_type(self) -> ScalarType:
        t = self.tok
        if t.kind == "ident" and t.text in ("f32", "i32"):
            self.advance()
            return F32 if t.text == "f32" else I32
        self.syntax("expected type 'f32' or 'i32'")

    def field_decl(self):
        kw = self.expect("field")
        name = self.ident("field name")
        self.expect(":")
        elem = self.scalar_type()
        self.expect("[")
        shape = []
        if not self.at("]"):
            while True:
                t = self.tok
                if t.kind != "int":
                    self.syntax("expected integer extent")
                self.advance()
                shape.append(int(t.text))
                if int(t.text) < 1:
                    self.error("field extents must be >= 1", t.span)
                if not self.at(","):
                    break
                self.advance()
        self.expect("]")
        needs_grad = False
        if self.at("needs_grad"):
            self.advance()
            needs_grad = True
        self.expect(";")
        if name.text in self.program.fields:
            self.error(f"field {name.text!r} declared twice", name.span)
        if needs_grad and elem is not F32:
            self.error("needs_grad requires an f32 field", name.span)
        self.program.fields[name.text] = FieldDecl(name.text, elem, tuple(shape), needs_grad, kw.span)

    def kernel_decl(self):
        kw = self.expect("kernel")
        name = self.ident("kernel name")
        self.expect("(")
        params = []
        if not self.at(")"):
            while True:
                p = self.ident("parameter name")
                self.expect(":")
                ty = self.scalar_type()
                if any(q[0] == p.text for q in params):
                    self.error(f"duplicate parameter {p.text!r}", p.span)
                params.append((p.text, ty))
                if not self.at(","):
                    break
                self.advance()
        self.expect(")")
        scope = _Scope()
        for i, (pn, pt) in enumerate(params):
            scope.names[pn] = ("param", i, pt)
        self.kernel_params = params
        body = self.block(scope, top=True)
        if name.text in self.program.kernels:
            self.error(f"kernel {name.text!r} defined twice", name.span)
        self.program.kernels[name.text] = Kernel(name.text, tuple(params), tuple(body), "parsed", kw.span)

    def block(self, parent_scope, top=False) -> list:
        self.expect("{")
        scope = _Scope(parent_scope)
        stmts = []
        while not self.at("}"):
            if self.tok.kind == "eof":
                self.syntax("expected '}'")
            start = self.pos
            try:
                s = self.stmt(scope, top)
                if s is not None:
                    stmts.append(s)
            except _Abort:
                if self.pos == start:
                    self.advance()
                self.sync()
        self.expect("}")
        return stmts

    # -- statements ----------------------------------------------------
    def declare(self, scope, name_tok, entry):
        if scope.lookup(name_tok.text) is not None and scope.lookup(name_tok.text)[0] != "param":
            self.error(f"{name_tok.text!r} is already declared in an enclosing scope", name_tok.span)
        elif scope.lookup(name_tok.text) is not None:
            self.error(f"{name_tok.text!r} shadows a kernel parameter", name_tok.span)
        scope.names[name_tok.text] = entry

    def stmt(self, scope, top):
        t = self.tok
        if self.at("parallel") or self.at("for"):
            return self.for_stmt(scope, top)
        if self.at("if"):
            return self.if_stmt(scope)
        if self.at("let"):
            self.advance()
            mutable = False
            if self.at("mut"):
                self.advance()
                mutable = True
            name = self.ident("local name")
            self.expect("=")
            init = self.expr(scope)
            self.expect(";")
            self.declare(scope, name, ("local", init.ty, mutable))
            return LocalDecl(name.text, mutable, init, name.span)
        if t.kind == "ident" and t.text not in KEYWORDS:
            name = self.advance()
            if self.at("["):
                index = self.index_list(scope)
                if self.at("="):
                    self.advance()
                    kind = "store"
                elif self.at("+="):
                    self.advance()
                    kind = "atomic"
                else:
                    self.syntax("expected '=' or '+='")
                value = self.expr(scope)
                self.expect(";")
                return self.field_write(name, index, value, kind)
            if self.at("="):
                self.advance()
                value = self.expr(scope)
                self.expect(";")
                entry = scope.lookup(name.text)
                if entry is None or entry[0] != "local":
                    self.error(f"assignment to undeclared local {name.text!r}", name.span)
                    return None
                if not entry[2]:
                    self.error(f"local {name.text!r} is immutable (declare with 'let mut')", name.span)
                value = self.coerce(value, entry[1], name.span, f"local {name.text!r}")
                return LocalAssign(name.text, value, name.span)
            self.syntax("expected '=' or '['")
        self.syntax("expected statement")

    def field_write(self, name, index, value, kind):
        decl = self.program.fields.get(name.text)
        if decl is None:
            self.error(f"undeclared field {name.text!r}", name.span)
            return None
        self.check_index(decl, index, name.span)
        value = self.coerce(value, decl.elem, name.span, f"field {name.text!r}")
        cls = FieldStore if kind == "store" else AtomicAdd
        return cls(name.text, tuple(index), value, False, name.span)

    def coerce(self, value, ty, span, what):
        if value.ty is ty:
            return value
        if ty is F32:
            return _to_float(value)
        self.error(f"cannot store f32 value into i32 {what} (use i32(...))", span)
        return Cast(I32, value, span)

    def check_index(self, decl, index, span):
        if len(index) != len(decl.shape):
            self.error(f"field {decl.name!r} has rank {len(decl.shape)}, indexed with {len(index)}", span)
        for ix in index:
            if ix.ty is not I32:
                self.error(f"index into {decl.name!r} must be i32, got f32", ix.span or span)

    def for_stmt(self, scope, top):
        parallel = False
        kw = self.tok
        if self.at("parallel"):
            self.advance()
            parallel = True
            if not top:
                self.error("parallel for is only allowed as the outermost loop of a kernel", kw.span)
        self.expect("for")
        var = self.ident("loop variable")
        self.expect("in")
        lo = self.expr(scope)
        self.expect("..")
        hi = self.expr(scope)
        for b in (lo, hi):
            if b.ty is not I32:
                self.error("loop bounds must be i32", b.span or var.span)
        inner = _Scope(scope)
        self.declare(inner, var, ("loop",))
        body = self.block(inner)
        return For(var.text, lo, hi, parallel, tuple(body), False, kw.span)

    def if_stmt(self, scope):
        kw = self.expect("if")
        cond = self.expr(scope)
        if cond.ty is not I32:
            self.error("if condition must be i32 (a comparison)", cond.span or kw.span)
        then = self.block(scope)
        orelse = []
        if self.at("else"):
            self.advance()
            if self.at("if"):
                orelse = [self.if_stmt(scope)]
            else:
                orelse = self.block(scope)
        return If(cond, tuple(then), tuple(orelse), kw.span)

    def index_list(self, scope) -> list:
        self.expect("[")
        out = []
        if not self.at("]"):
            out.append(self.expr(scope))
            while self.at(","):
                self.advance()
                out.append(self.expr(scope))
        self.expect("]")
        return out

    # -- expressions ---------------------------------------------------
    def expr(self, scope):
        return self.or_expr(scope)

    def or_expr(self, scope):
        e = self.and_expr(scope)
        while self.at("||"):
            op = self.advance()
            r = self.and_expr(scope)
            self.want_int(e, op)
            self.want_int(r, op)
            e = BinOp("max", _truth(e), _truth(r), op.span)
        return e

    def and_expr(self, scope):
        e = self.cmp_expr(scope)
        while self.at("&&"):
            op = self.advance()
            r = self.cmp_expr(scope)
            self.want_int(e, op)
            self.want_int(r, op)
            e = BinOp("mul", _truth(e), _truth(r), op.span)
        return e

    def want_int(self, e, op):
        if e.ty is not I32:
            self.error(f"operands of {op.text!r} must be i32 conditions", op.span)

    _CMP = {"<": "cmp_lt", "<=": "cmp_le", "==": "cmp_eq", ">": "cmp_gt",
            ">=": "cmp_ge", "!=": "cmp_ne"}

    def cmp_expr(self, scope):
        e = self.add_expr(scope)
        if self.tok.kind == "op" and self.tok.text in self._CMP:
            op = self.advance()
            r = self.add_expr(scope)
            a, b = _promote(e, r)
            e = BinOp(self._CMP[op.text], a, b, op.span)
        return e

    def add_expr(self, scope):
        e = self.mul_expr(scope)
        while self.tok.kind == "op" and self.tok.text in ("+", "-"):
            op = self.advance()
            r = self.mul_expr(scope)
            a, b = _promote(e, r)
            e = BinOp("add" if op.text == "+" else "sub", a, b, op.span)
        return e

    def mul_expr(self, scope):
        e = self.unary(scope)
        while self.tok.kind == "op" and self.tok.text in ("*", "/", "%"):
            op = self.advance()
            r = self.unary(scope)
            a, b = _promote(e, r)
            e = BinOp({"*": "mul", "/": "div", "%": "mod"}[op.text], a, b, op.span)
        return e

    def unary(self, scope):
        if self.at("-"):
            op = self.advance()
            t = self.tok
            if t.kind == "int":
                self.advance()
                return ConstI(-int(t.text), op.span)
            if t.kind == "float":
                self.advance()
                return ConstF(-float(t.text), op.span)
            return UnaryOp("neg", self.unary(scope), op.span)
        if self.at("!"):
            op = self.advance()
            e = self.unary(scope)
            self.want_int(e, op)
            return BinOp("cmp_eq", e, ConstI(0), op.span)
        return self.primary(scope)

    def primary(self, scope):
        t = self.tok
        if t.kind == "int":
            self.advance()
            return ConstI(int(t.text), t.span)
        if t.kind == "float":
            self.advance()
            return ConstF(float(t.text), t.span)
        if self.at("("):
            self.advance()
            e = self.expr(scope)
            self.expect(")")
            return e
        if t.kind == "ident" and t.text not in KEYWORDS:
            self.advance()
            if self.at("("):
                return self.call(t, scope)
            if self.at("["):
                index = self.index_list(scope)
                decl = self.program.fields.get(t.text)
                if decl is None:
                    self.error(f"undeclared field {t.text!r}", t.span)
                    return ConstF(0.0, t.span)
                self.check_index(decl, index, t.span)
                return FieldLoad(t.text, tuple(index), decl.elem, False, t.span)
            entry = scope.lookup(t.text)
            if entry is None:
                what = "field used without index" if t.text in self.program.fields else "undeclared identifier"
                self.error(f"{what} {t.text!r}", t.span)
                return ConstF(0.0, t.span)
            if entry[0] == "param":
                return Param(entry[1], entry[2], t.span)
            if entry[0] == "loop":
                return LoopVar(t.text, t.span)
            return LocalRead(t.text, entry[1], t.span)
        self.syntax("expected expression")

    def call(self, name, scope):
        fn = name.text
        self.expect("(")
        args = []
        if not self.at(")"):
            args.append(self.expr(scope))
            while self.at(","):
                self.advance()
                args.append(self.expr(scope))
        self.expect(")")
        arity = {"min": 2, "max": 2, "select": 3, "i32": 1, "f32": 1}.get(fn, 1)
        if fn not in BUILTINS:
            self.error(f"unknown function {fn!r}", name.span)
            return ConstF(0.0, name.span)
        if len(args) != arity:
            self.error(f"{fn} takes {arity} argument(s), got {len(args)}", name.span)
            return ConstF(0.0, name.span)
        if fn in UNARY_BUILTINS:
            a = args[0]
            if fn in ir.FLOAT_ONLY_UNARY:
                a = _to_float(a)
            return UnaryOp(fn, a, name.span)
        if fn in ("min", "max"):
            a, b = _promote(*args)
            return BinOp(fn, a, b, name.span)
        if fn == "select":
            c, a, b = args
            if c.ty is not I32:
                self.error("select condition must be i32", name.span)
            a, b = _promote(a, b)
            return Select(c, a, b, name.span)
        return Cast(F32 if fn == "f32" else I32, args[0], name.span)


def parse_program(source: str, filename: str = "<string>") -> Program:
    """Parse DSL source into a Program with every kernel at stage ``parsed``.

    Raises :class:`ParseError` carrying all diagnostics collected.
    """
    return Parser(source, filename).parse()


def parse_file(path) -> Program:
    with open(path, encoding="utf-8") as f:
        return parse_program(f.read(), str(path))
