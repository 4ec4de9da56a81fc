"""Kernel IR -> Python source.

Two backends share one emitter skeleton:

``sequential``
    Plain Python over flat memoryviews of the field buffers.  Every operator
    goes through :mod:`adjk.scalar`, so results are bit-reproducible and match
    constant folding.  Optionally instrumented with access hooks.

``vector``
    Numpy lockstep execution: the iterations of a parallel loop become array
    lanes.  Inner serial loops must have lane-uniform bounds.  Atomic adds use
    ``np.add.at``; chunks of one loop may run on worker threads.

Both compute F32 values in double precision and round on store.
"""

from __future__ import annotations

import math
import threading
from dataclasses import dataclass

import numpy as np

from . import ir, scalar
from .ir import (
    F32, I32, AtomicAdd, BinOp, Cast, ConstF, ConstI, FieldLoad, FieldStore,
    For, If, Kernel, LocalAssign, LocalDecl, LocalRead, LoopVar, Param, Select,
    UnaryOp,
)


class KernelRuntimeError(RuntimeError):
    """Raised from inside a running kernel (bounds, integer faults)."""


class OutOfBounds(KernelRuntimeError):
    def __init__(self, field, index, shape, iteration):
        self.field, self.index, self.shape, self.iteration = field, tuple(index), tuple(shape), dict(iteration)
        it = ", ".join(f"{k}={v}" for k, v in self.iteration.items()) or "top level"
        super().__init__(f"out-of-bounds access {field}[{', '.join(map(str, self.index))}] "
                         f"(shape {list(self.shape)}) at iteration {it}")


def _oob(field, index, shape, iteration):
    raise OutOfBounds(field, index, shape, iteration)


_CMP_SYM = {"cmp_lt": "<", "cmp_le": "<=", "cmp_eq": "==", "cmp_gt": ">",
            "cmp_ge": ">=", "cmp_ne": "!="}
_ARITH_SYM = {"add": "+", "sub": "-", "mul": "*"}


def _float_literal(v: float) -> str:
    if math.isnan(v):
        return "_NAN"
    if math.isinf(v):
        return "_INF" if v > 0 else "(-_INF)"
    return repr(float(v))


class _Base:
    """Shared statement walker; subclasses supply expression and access code."""

    def __init__(self, program, kernel: Kernel, instrumented=False):
        self.program = program
        self.kernel = kernel
        self.instrumented = instrumented
        self.lines: list = []
        self.depth = 1
        self.loop_stack: list = []  # (ir name, py name)
        self.locals: dict = {}
        self.ntemp = 0
        self.views: dict = {}  # (field, grad) -> py name

    # -- helpers ------------------------------------------------------
    def emit(self, line):
        self.lines.append("    " * self.depth + line)

    def temp(self) -> str:
        self.ntemp += 1
        return f"_t{self.ntemp}"

    def local(self, name) -> str:
        if name not in self.locals:
            self.locals[name] = f"v{len(self.locals)}"
        return self.locals[name]

    def view(self, field, grad) -> str:
        key = (field, grad)
        if key not in self.views:
            self.views[key] = f"{'G' if grad else 'P'}{len(self.views)}"
        return self.views[key]

    def loopvar(self, name) -> str:
        for n, py in reversed(self.loop_stack):
            if n == name:
                return py
        raise KernelRuntimeError(f"loop variable {name!r} not in scope")

    def is_atom(self, s: str) -> bool:
        return s.isidentifier() or _is_number(s)

    def atom(self, e) -> str:
        s = self.expr(e)
        if self.is_atom(s):
            return s
        t = self.temp()
        self.emit(f"{t} = {s}")
        return t

    def iteration_dict(self) -> str:
        return "{" + ", ".join(f"{n!r}: {py}" for n, py in self.loop_stack) + "}"

    # -- statements ---------------------------------------------------
    def block(self, body):
        if not body:
            self.emit("pass")
            return
        for s in body:
            self.stmt(s)

    def stmt(self, s):
        if isinstance(s, (LocalDecl, LocalAssign)):
            value = s.init if isinstance(s, LocalDecl) else s.value
            v = self.expr(value)
            self.emit(f"{self.local(s.name)} = {v}")
        elif isinstance(s, FieldStore):
            self.write(s, atomic=False)
        elif isinstance(s, AtomicAdd):
            self.write(s, atomic=True)
        elif isinstance(s, For):
            self.loop(s)
        elif isinstance(s, If):
            self.branch(s)
        else:
            raise KernelRuntimeError(f"cannot execute {type(s).__name__}")

    def header(self):
        return []

    def generate(self) -> str:
        body_lines = self.lines
        self.block(self.kernel.body)
        pre = []
        for (field, grad), py in self.views.items():
            key = field + (".grad" if grad else "")
            pre.append(f"    {py} = V[{key!r}]")
        n = len(self.kernel.params)
        if n:
            pre.append(f"    {''.join(f'a{i}, ' for i in range(n))}= args")
        src = ["def _kernel(V, args, H, R):"] + self.header() + pre + body_lines
        return "\n".join(src) + "\n"


def _is_number(s: str) -> bool:
    try:
        float(s)
        return True
    except ValueError:
        return False


# ----------------------------------------------------------------------------
# sequential backend


class SequentialCodegen(_Base):
    def expr(self, e) -> str:
        if isinstance(e, ConstF):
            return _float_literal(e.value)
        if isinstance(e, ConstI):
            return str(e.value) if e.value >= 0 else f"({e.value})"
        if isinstance(e, Param):
            return f"a{e.index}"
        if isinstance(e, LoopVar):
            return self.loopvar(e.name)
        if isinstance(e, LocalRead):
            return self.local(e.name)
        if isinstance(e, FieldLoad):
            flat = self.flat_index(e.field, e.index)
            v = self.view(e.field, e.grad)
            if self.instrumented:
                self.emit(f"H.load({e.field!r}, {flat}, {e.grad}, {self.iteration_dict()})")
            t = self.temp()
            self.emit(f"{t} = {v}[{flat}]")
            return t
        if isinstance(e, BinOp):
            a, b = self.expr(e.lhs), self.expr(e.rhs)
            ty = e.lhs.ty
            if e.op in _ARITH_SYM:
                return f"({a} {_ARITH_SYM[e.op]} {b})"
            if e.op == "div":
                return f"_idiv({a}, {b})" if ty is I32 else f"_fdiv({a}, {b})"
            if e.op == "mod":
                return f"_imod({a}, {b})" if ty is I32 else f"_fmod({a}, {b})"
            if e.op in _CMP_SYM:
                return f"({a} {_CMP_SYM[e.op]} {b})"
            a, b = self._atomize_str(a), self._atomize_str(b)
            if e.op == "min":
                return f"({a} if {a} <= {b} else {b})"
            if e.op == "max":
                return f"({a} if {a} >= {b} else {b})"
        if isinstance(e, UnaryOp):
            a = self.expr(e.operand)
            if e.op == "neg":
                return f"(-{a})"
            if e.op == "abs":
                return f"abs({a})"
            return f"_{e.op}({a})"
        if isinstance(e, Select):
            c = self._atomize_str(self.expr(e.cond))
            a = self._atomize_str(self.expr(e.a))
            b = self._atomize_str(self.expr(e.b))
            return f"({a} if {c} else {b})"
        if isinstance(e, Cast):
            a = self.expr(e.operand)
            if e.target is e.operand.ty:
                return a
            return f"float({a})" if e.target is F32 else f"_f2i({a})"
        raise KernelRuntimeError(f"cannot compile {type(e).__name__}")

    def _atomize_str(self, s: str) -> str:
        if self.is_atom(s):
            return s
        t = self.temp()
        self.emit(f"{t} = {s}")
        return t

    def flat_index(self, field, index) -> str:
        shape = self.program.fields[field].shape
        if not shape:
            return "0"
        ts = [self.atom(i) for i in index]
        conds = " and ".join(f"0 <= {t} < {n}" for t, n in zip(ts, shape))
        self.emit(f"if not ({conds}): _oob({field!r}, ({', '.join(ts)},), {tuple(shape)}, "
                  f"{self.iteration_dict()})")
        flat = ts[0]
        for t, n in zip(ts[1:], shape[1:]):
            flat = f"({flat})*{n} + {t}"
        if len(ts) == 1:
            return flat
        t = self.temp()
        self.emit(f"{t} = {flat}")
        return t

    def write(self, s, atomic):
        v = self.expr(s.value)
        flat = self.flat_index(s.field, s.index)
        view = self.view(s.field, s.grad)
        if self.instrumented:
            kind = "atomic" if atomic else "store"
            self.emit(f"H.{kind}({s.field!r}, {flat}, {s.grad}, {self.iteration_dict()})")
        self.emit(f"{view}[{flat}] {'+=' if atomic else '='} {v}")

    def branch(self, s: If):
        # real control flow: lets unflattened kernels serve as a reference
        c = self.atom(s.cond)
        self.emit(f"if {c}:")
        self.depth += 1
        self.block(s.then)
        self.depth -= 1
        if s.orelse:
            self.emit("else:")
            self.depth += 1
            self.block(s.orelse)
            self.depth -= 1

    def loop(self, s: For):
        lo, hi = self.atom(s.lo), self.atom(s.hi)
        py = f"i{len(self.loop_stack)}"
        rng = f"range({hi} - 1, {lo} - 1, -1)" if s.reverse else f"range({lo}, {hi})"
        self.emit(f"for {py} in {rng}:")
        self.loop_stack.append((s.var, py))
        self.depth += 1
        if self.instrumented:
            self.emit(f"H.iteration({s.var!r}, {py})")
        self.block(s.body)
        self.depth -= 1
        self.loop_stack.pop()


SEQ_GLOBALS = {
    "_fdiv": scalar.fdiv, "_idiv": scalar.idiv, "_fmod": scalar.fmod, "_imod": scalar.imod,
    "_sin": scalar.fsin, "_cos": scalar.fcos, "_exp": scalar.fexp, "_sqrt": scalar.fsqrt,
    "_tanh": math.tanh, "_floor": scalar.ffloor, "_f2i": scalar.f2i,
    "_oob": _oob, "_INF": scalar.INF, "_NAN": scalar.NAN,
}


# ----------------------------------------------------------------------------
# vectorised backend

_I = np.int64
_F = np.float64


def _vix(shape, idxs, field, iteration):
    flat = 0
    for ix, n in zip(idxs, shape):
        if isinstance(ix, np.ndarray) and ix.ndim:
            if ix.size and (ix.min() < 0 or ix.max() >= n):
                _vix_fail(shape, idxs, field, iteration)
        elif not 0 <= ix < n:
            _vix_fail(shape, idxs, field, iteration)
        flat = flat * n + ix
    return flat


def _vix_fail(shape, idxs, field, iteration):
    bad = np.zeros((), bool)
    for ix, n in zip(idxs, shape):
        bad = bad | (np.asarray(ix) < 0) | (np.asarray(ix) >= n)
    lane = int(np.argmax(bad)) if np.ndim(bad) else 0
    pick = lambda v: int(v[lane]) if np.ndim(v) else int(v)  # noqa: E731
    _oob(field, tuple(pick(i) for i in idxs), shape,
         {name: pick(v) for name, v in iteration.items()})


def _vload(arr, flat):
    return arr[flat].astype(_F) if arr.dtype.kind == "f" else arr[flat].astype(_I)


def _vstore(arr, flat, val):
    if np.ndim(flat) or np.ndim(val):
        flat, val = np.broadcast_arrays(flat, val)
    arr[flat] = val


class _AtomicLock:
    lock = threading.Lock()


def _vatomic(arr, flat, val):
    with _AtomicLock.lock:
        if not (np.ndim(flat) or np.ndim(val)):
            arr[flat] = arr[flat] + val
            return
        flat, val = np.broadcast_arrays(flat, val)
        flat = flat.ravel()
        val = val.ravel()
        if arr.dtype == np.float64 or arr.dtype.kind == "i":
            np.add.at(arr, flat, val)
            return
        # f32 buffer: round once per element as the sequential backend does
        # when every element is hit at most once
        order = np.sort(flat)
        if not (order[1:] == order[:-1]).any():
            arr[flat] = arr[flat].astype(_F) + val
        else:
            uniq, inv = np.unique(flat, return_inverse=True)
            acc = arr[uniq].astype(_F)
            np.add.at(acc, inv, val)
            arr[uniq] = acc


def _vidiv(a, b):
    if np.any(np.asarray(b) == 0):
        raise scalar.ArithmeticFault("integer division by zero")
    return np.floor_divide(a, b)


def _vimod(a, b):
    if np.any(np.asarray(b) == 0):
        raise scalar.ArithmeticFault("integer modulus by zero")
    return np.mod(a, np.abs(b))


def _vf2i(a):
    if not np.all(np.isfinite(a)):
        raise scalar.ArithmeticFault("cannot convert non-finite value to i32")
    return np.trunc(a).astype(_I)


def _vuniform(v, what):
    if np.ndim(v) == 0:
        return int(v)
    first = v.flat[0] if v.size else 0
    if v.size and np.any(v != first):
        raise KernelRuntimeError(f"{what} of an inner serial loop differs between parallel "
                                 "iterations; not supported in parallel mode (use deterministic mode)")
    return int(first)


def _vcmp(fn):
    return lambda a, b: fn(a, b).astype(_I)


VEC_GLOBALS = {
    "np": np, "_ix": _vix, "_ld": _vload, "_st": _vstore, "_at": _vatomic,
    "_idiv": _vidiv, "_imod": _vimod, "_f2i": _vf2i, "_uni": _vuniform,
    "_fdiv": np.true_divide, "_fmod": lambda a, b: np.mod(a, np.abs(b)),
    "_sin": np.sin, "_cos": np.cos, "_exp": np.exp, "_sqrt": np.sqrt, "_tanh": np.tanh,
    "_floor": np.floor, "_abs": np.abs, "_where": np.where,
    "_lt": _vcmp(np.less), "_le": _vcmp(np.less_equal), "_eq": _vcmp(np.equal),
    "_gt": _vcmp(np.greater), "_ge": _vcmp(np.greater_equal), "_ne": _vcmp(np.not_equal),
    "_tof": lambda a: np.asarray(a, dtype=_F), "_oob": _oob,
    "_INF": scalar.INF, "_NAN": scalar.NAN, "_I": _I,
}
_VCMP = {"cmp_lt": "_lt", "cmp_le": "_le", "cmp_eq": "_eq", "cmp_gt": "_gt",
         "cmp_ge": "_ge", "cmp_ne": "_ne"}


class VectorCodegen(_Base):
    def __init__(self, program, kernel, instrumented=False):
        super().__init__(program, kernel, instrumented)
        self.npar = 0

    def expr(self, e) -> str:
        if isinstance(e, ConstF):
            return _float_literal(e.value)
        if isinstance(e, ConstI):
            return str(e.value) if e.value >= 0 else f"({e.value})"
        if isinstance(e, Param):
            return f"a{e.index}"
        if isinstance(e, LoopVar):
            return self.loopvar(e.name)
        if isinstance(e, LocalRead):
            return self.local(e.name)
        if isinstance(e, FieldLoad):
            flat = self.flat_index(e.field, e.index)
            t = self.temp()
            self.emit(f"{t} = _ld({self.view(e.field, e.grad)}, {flat})")
            return t
        if isinstance(e, BinOp):
            a, b = self.expr(e.lhs), self.expr(e.rhs)
            ty = e.lhs.ty
            if e.op in _ARITH_SYM:
                return f"({a} {_ARITH_SYM[e.op]} {b})"
            if e.op == "div":
                return f"_idiv({a}, {b})" if ty is I32 else f"_fdiv({a}, {b})"
            if e.op == "mod":
                return f"_imod({a}, {b})" if ty is I32 else f"_fmod({a}, {b})"
            if e.op in _VCMP:
                return f"{_VCMP[e.op]}({a}, {b})"
            a, b = self.atom_s(a), self.atom_s(b)
            if e.op == "min":
                return f"_where({a} <= {b}, {a}, {b})"
            if e.op == "max":
                return f"_where({a} >= {b}, {a}, {b})"
        if isinstance(e, UnaryOp):
            a = self.expr(e.operand)
            if e.op == "neg":
                return f"(-{a})"
            return f"_{e.op}({a})"
        if isinstance(e, Select):
            c, a, b = self.expr(e.cond), self.expr(e.a), self.expr(e.b)
            return f"_where({c}, {a}, {b})"
        if isinstance(e, Cast):
            a = self.expr(e.operand)
            if e.target is e.operand.ty:
                return a
            return f"_tof({a})" if e.target is F32 else f"_f2i({a})"
        raise KernelRuntimeError(f"cannot compile {type(e).__name__}")

    def atom_s(self, s):
        if self.is_atom(s):
            return s
        t = self.temp()
        self.emit(f"{t} = {s}")
        return t

    def flat_index(self, field, index) -> str:
        shape = self.program.fields[field].shape
        if not shape:
            return "0"
        ts = [self.atom(i) for i in index]
        t = self.temp()
        self.emit(f"{t} = _ix({tuple(shape)}, ({', '.join(ts)},), {field!r}, {self.iteration_dict()})")
        return t

    def branch(self, s):
        raise KernelRuntimeError("parallel mode needs flattened kernels (no if statements)")

    def write(self, s, atomic):
        v = self.expr(s.value)
        flat = self.flat_index(s.field, s.index)
        self.emit(f"{'_at' if atomic else '_st'}({self.view(s.field, s.grad)}, {flat}, {v})")

    def loop(self, s: For):
        lo, hi = self.atom(s.lo), self.atom(s.hi)
        py = f"i{len(self.loop_stack)}"
        if s.parallel:
            fn = f"_par{self.npar}"
            self.npar += 1
            self.emit(f"def {fn}(_lo, _hi):")
            self.depth += 1
            self.emit(f"{py} = np.arange(_lo, _hi, dtype=_I)")
            self.loop_stack.append((s.var, py))
            self.block(s.body)
            self.loop_stack.pop()
            self.depth -= 1
            self.emit(f"R({fn}, int({lo}), int({hi}))")
            return
        a, b = self.temp(), self.temp()
        self.emit(f"{a} = _uni({lo}, 'lower bound'); {b} = _uni({hi}, 'upper bound')")
        rng = f"range({b} - 1, {a} - 1, -1)" if s.reverse else f"range({a}, {b})"
        self.emit(f"for {py} in {rng}:")
        self.loop_stack.append((s.var, py))
        self.depth += 1
        self.block(s.body)
        self.depth -= 1
        self.loop_stack.pop()


def compile_kernel(program, kernel: Kernel, backend: str = "sequential", instrumented: bool = False):
    """Compile ``kernel`` to a Python function.

    The function takes ``(views, args, hooks, run_parallel)``.
    """
    if backend == "sequential":
        gen = SequentialCodegen(program, kernel, instrumented)
        glb = dict(SEQ_GLOBALS)
    elif backend == "vector":
        if instrumented:
            raise ValueError("instrumentation is only available in the sequential backend")
        gen = VectorCodegen(program, kernel)
        glb = dict(VEC_GLOBALS)
    else:
        raise ValueError(f"unknown backend {backend!r}")
    src = gen.generate()
    code = compile(src, f"<kernel {kernel.name} ({backend})>", "exec")
    exec(code, glb)
    keys = tuple(f + (".grad" if g else "") for f, g in gen.views)
    return CompiledKernel(kernel, backend, instrumented, glb["_kernel"], src, keys)


@dataclass
class CompiledKernel:
    kernel: Kernel
    backend: str
    instrumented: bool
    fn: object
    source: str
    keys: tuple  # buffers the kernel touches ("x", "x.grad", ...)
