"""Field storage, kernel launches, the tape and gradient utilities."""

from __future__ import annotations

import contextlib
import enum
import os
import threading
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from typing import Callable, Optional, Sequence

import numpy as np

from . import ir
from .codegen import CompiledKernel, KernelRuntimeError, compile_kernel
from .ir import F32, I32, IRError, Program, StageError


class ExecMode(enum.Enum):
    DETERMINISTIC = "deterministic"
    PARALLEL = "parallel"


class RuntimeFault(RuntimeError):
    pass


# ----------------------------------------------------------------------------
# storage


class FieldStore:
    """Dense primal buffers plus lazily allocated adjoint buffers.

    ``precision`` is ``"f32"`` (default) or ``"f64"`` and sets the element type
    of every f32 field; i32 fields are always int32.
    """

    def __init__(self, program: Program, precision: str = "f32"):
        if precision not in ("f32", "f64"):
            raise ValueError(f"precision must be 'f32' or 'f64', got {precision!r}")
        self.program = program
        self.precision = precision
        self.float_dtype = np.float32 if precision == "f32" else np.float64
        self._primal = {name: np.zeros(d.shape, self._dtype(d)) for name, d in program.fields.items()}
        self._adjoint: dict = {}
        self._views: dict = {}

    def _dtype(self, decl):
        return self.float_dtype if decl.elem is F32 else np.int32

    # primal access
    def __getitem__(self, name) -> np.ndarray:
        try:
            return self._primal[name]
        except KeyError:
            raise KeyError(f"unknown field {name!r}") from None

    def __setitem__(self, name, value):
        self[name][...] = value

    def __contains__(self, name):
        return name in self._primal

    def names(self):
        return list(self._primal)

    # adjoints
    def grad(self, name) -> np.ndarray:
        decl = self.program.field(name)
        if not decl.needs_grad:
            raise IRError(f"field {name!r} is not declared needs_grad")
        buf = self._adjoint.get(name)
        if buf is None:
            buf = self._adjoint[name] = np.zeros(decl.shape, self.float_dtype)
        return buf

    def has_grad_buffer(self, name) -> bool:
        return name in self._adjoint

    def clear_gradients(self):
        for buf in self._adjoint.values():
            buf[...] = 0

    # buffers for generated code
    def buffer(self, key: str) -> np.ndarray:
        if key.endswith(".grad"):
            return self.grad(key[:-5])
        return self[key]

    def flat(self, key: str) -> np.ndarray:
        return self.buffer(key).reshape(-1)

    def memoryview(self, key: str):
        mv = self._views.get(key)
        if mv is None:
            mv = self._views[key] = memoryview(self.flat(key))
        return mv

    # snapshots
    def snapshot(self, names=None, grads=False) -> dict:
        names = self.names() if names is None else names
        snap = {n: self[n].copy() for n in names}
        if grads:
            snap.update({n + ".grad": b.copy() for n, b in self._adjoint.items() if n in names})
        return snap

    def restore(self, snap: dict):
        for key, value in snap.items():
            self.buffer(key)[...] = value

    def copy(self) -> "FieldStore":
        other = FieldStore(self.program, self.precision)
        other.restore(self.snapshot(grads=True))
        return other


def clear_gradients(store: FieldStore) -> None:
    store.clear_gradients()


# ----------------------------------------------------------------------------
# compilation cache and parallel execution

_CACHE: dict = {}
_CACHE_LOCK = threading.Lock()


def compiled(program, kernel, backend, instrumented=False) -> CompiledKernel:
    key = (id(kernel), id(program.fields), backend, instrumented)
    with _CACHE_LOCK:
        hit = _CACHE.get(key)
        if hit is not None and hit[0] is kernel and hit[1] is program.fields:
            return hit[2]
    ck = compile_kernel(program, kernel, backend, instrumented)
    with _CACHE_LOCK:
        _CACHE[key] = (kernel, program.fields, ck)
    return ck


_CPUS = os.cpu_count() or 1


def max_threads() -> int:
    """Worker cap: ``ADJK_THREADS`` if set, else the CPU count."""
    env = os.environ.get("ADJK_THREADS")
    if env:
        try:
            return max(1, int(env))
        except ValueError:
            pass
    return _CPUS


_POOL: Optional[ThreadPoolExecutor] = None
_POOL_SIZE = 0
_MIN_CHUNK = 4096


def _run_parallel(fn, lo, hi):
    n = hi - lo
    if n <= 0:
        return
    if n < 2 * _MIN_CHUNK or (threads := min(max_threads(), n // _MIN_CHUNK)) <= 1:
        with np.errstate(all="ignore"):
            fn(lo, hi)
        return
    global _POOL, _POOL_SIZE
    if _POOL is None or _POOL_SIZE != threads:
        _POOL = ThreadPoolExecutor(max_workers=threads)
        _POOL_SIZE = threads
    bounds = np.linspace(lo, hi, threads + 1).astype(int)

    def work(a, b):
        with np.errstate(all="ignore"):
            fn(int(a), int(b))

    futures = [_POOL.submit(work, a, b) for a, b in zip(bounds[:-1], bounds[1:]) if b > a]
    for f in futures:
        f.result()


# kernels whose parallel loops all have constant extents below this run the
# sequential code even in parallel mode (a legal schedule; avoids the
# per-operation overhead of the vector backend on a handful of lanes)
VECTOR_MIN_LANES = 32
_NARROW: dict = {}


def _narrow(kernel) -> bool:
    hit = _NARROW.get(id(kernel))
    if hit is not None and hit[0] is kernel:
        return hit[1]
    loops = [s for s in kernel.body if isinstance(s, ir.For) and s.parallel]
    narrow = all(isinstance(s.lo, ir.ConstI) and isinstance(s.hi, ir.ConstI)
                 and s.hi.value - s.lo.value < VECTOR_MIN_LANES for s in loops)
    _NARROW[id(kernel)] = (kernel, narrow)
    return narrow


# ----------------------------------------------------------------------------
# tape


@dataclass(frozen=True)
class TapeEntry:
    kind: str  # "kernel" or "routine"
    name: str
    args: tuple


@dataclass
class Tape:
    entries: list = field(default_factory=list)
    recording: bool = True

    def append(self, entry: TapeEntry):
        if self.recording:
            self.entries.append(entry)

    def __len__(self):
        return len(self.entries)


def _convert_args(kernel, args):
    if len(args) != len(kernel.params):
        raise RuntimeFault(f"kernel {kernel.name!r} takes {len(kernel.params)} argument(s), got {len(args)}")
    out = []
    for (pname, ty), a in zip(kernel.params, args):
        if ty is I32:
            if isinstance(a, float) and not float(a).is_integer():
                raise RuntimeFault(f"argument {pname!r} of {kernel.name!r} must be an integer")
            out.append(int(a))
        else:
            out.append(float(a))
    return tuple(out)


class Runtime:
    """Launches kernels of one program against one store.

    Launches made while a tape is active are recorded.  ``call`` runs a host
    routine; routines with a registered custom gradient are recorded as a
    single entry and their inner launches are not.
    """

    def __init__(self, program: Program, store: Optional[FieldStore] = None,
                 mode: ExecMode = ExecMode.DETERMINISTIC, precision: str = "f32"):
        self.program = program
        self.store = store if store is not None else FieldStore(program, precision)
        self.mode = ExecMode(mode)
        self.active_tape: Optional[Tape] = None
        self._suppress = 0
        self.launch_log: Optional[list] = None  # set to a list to trace launches

    # -- launching ----------------------------------------------------
    @property
    def backend(self) -> str:
        return "sequential" if self.mode is ExecMode.DETERMINISTIC else "vector"

    def _execute(self, kernel, args, hooks=None):
        instrumented = hooks is not None
        backend = self.backend
        if instrumented or (backend == "vector" and _narrow(kernel)):
            backend = "sequential"
        ck = compiled(self.program, kernel, backend, instrumented)
        if ck.backend == "sequential":
            views = {k: self.store.memoryview(k) for k in ck.keys}
            ck.fn(views, args, hooks, None)
        else:
            views = {k: self.store.flat(k) for k in ck.keys}
            with np.errstate(all="ignore"):
                ck.fn(views, args, None, _run_parallel)

    def launch(self, name: str, *args):
        kernel = self.program.kernel(name)
        if kernel.stage == "adjoint":
            raise StageError(f"use launch_grad for adjoint kernels ({name!r})")
        if self.mode is ExecMode.PARALLEL and kernel.stage == "parsed":
            raise StageError(f"kernel {name!r} must be lowered before a parallel launch")
        args = _convert_args(kernel, args)
        self._execute(kernel, args)
        if self.launch_log is not None:
            self.launch_log.append(name)
        if self.active_tape is not None and not self._suppress:
            self.active_tape.append(TapeEntry("kernel", name, args))

    def launch_grad(self, name: str, *args):
        """Run the adjoint of kernel ``name`` (never recorded)."""
        if name in self.program.adjoint_errors:
            raise RuntimeFault(f"no adjoint for kernel {name!r}: {self.program.adjoint_errors[name]}")
        try:
            adj = self.program.adjoints[name]
        except KeyError:
            raise RuntimeFault(f"missing adjoint kernel for {name!r} (was the program differentiated?)") from None
        if self.launch_log is not None:
            self.launch_log.append(ir_adjoint_name(name))
        if not adj.body:
            return
        self._execute(adj, _convert_args(adj, args))

    def call(self, routine: str, *args):
        """Invoke a host routine registered on the program."""
        grads = self.program.custom_grads.get(routine)
        if grads is None:
            fn = self._routine(routine)
            return fn(self, *args)
        fwd = self._routine(grads[0])
        if self.active_tape is not None and not self._suppress:
            self.active_tape.append(TapeEntry("routine", routine, tuple(args)))
        self._suppress += 1
        try:
            return fwd(self, *args)
        finally:
            self._suppress -= 1

    def _routine(self, rid):
        try:
            return self.program.routines[rid]
        except KeyError:
            raise RuntimeFault(f"unknown routine {rid!r}") from None

    # -- tape ---------------------------------------------------------
    @contextlib.contextmanager
    def tape(self, loss: Optional[str] = None):
        """Record launches; with ``loss`` given, run backward on exit."""
        if self.active_tape is not None:
            raise RuntimeFault("tapes cannot be nested")
        t = Tape()
        self.active_tape = t
        try:
            yield t
        finally:
            self.active_tape = None
            t.recording = False
        if loss is not None:
            self.backward(t, loss)

    def backward(self, tape: Tape, loss_field: str):
        tape_backward(self.program, self.store, tape, loss_field, self.mode, runtime=self)

    def replay_adjoints(self, tape: Tape):
        """Replay ``tape`` in reverse without clearing or seeding adjoints."""
        for entry in reversed(tape.entries):
            if entry.kind == "routine":
                self._routine(self.program.custom_grads[entry.name][1])(self, *entry.args)
            else:
                self.launch_grad(entry.name, *entry.args)


def ir_adjoint_name(name):
    return name + ".grad"


def launch(program: Program, store: FieldStore, kernel_name: str, args: Sequence = (),
           mode: ExecMode = ExecMode.DETERMINISTIC, tape: Optional[Tape] = None):
    rt = Runtime(program, store, mode)
    rt.active_tape = tape
    rt.launch(kernel_name, *args)


def tape_backward(program: Program, store: FieldStore, tape: Tape, loss_field: str,
                  mode: ExecMode = ExecMode.DETERMINISTIC, runtime: Optional[Runtime] = None):
    """Clear adjoints, seed ``loss.grad = 1`` and replay ``tape`` in reverse."""
    decl = program.field(loss_field)
    if decl.shape != () or not decl.needs_grad:
        raise RuntimeFault(f"loss field {loss_field!r} must be a 0-D needs_grad field")
    rt = runtime if runtime is not None else Runtime(program, store, mode)
    if rt.store is not store:
        raise RuntimeFault("runtime and store disagree")
    store.clear_gradients()
    store.grad(loss_field)[...] = 1
    saved, rt.active_tape = rt.active_tape, None
    try:
        rt.replay_adjoints(tape)
    finally:
        rt.active_tape = saved


# ----------------------------------------------------------------------------
# global data access rules


@dataclass(frozen=True)
class Violation:
    rule: int  # 1: second non-atomic write, 2: read after accumulation
    field: str
    index: tuple
    iteration: dict = field(compare=False, hash=False, default_factory=dict)

    def __str__(self):
        what = ("plain store to an element already written in this launch" if self.rule == 1
                else "read of an element after an atomic add in the same launch")
        it = ", ".join(f"{k}={v}" for k, v in self.iteration.items()) or "top level"
        return f"rule {self.rule}: {self.field}[{', '.join(map(str, self.index))}]: {what} (iteration {it})"


class _AccessTracker:
    FRESH, WRITTEN, ACCUMULATING, READ = "fresh", "written", "accumulating", "read"

    def __init__(self, program):
        self.program = program
        self.state: dict = {}
        self.violations: list = []
        self.seen: set = set()

    def _key(self, field, grad):
        return field + ".grad" if grad else field

    def _report(self, rule, field, grad, flat, iteration):
        name = self._key(field, grad)
        if (rule, name, flat) in self.seen:
            return
        self.seen.add((rule, name, flat))
        shape = self.program.fields[field].shape
        index = tuple(int(i) for i in np.unravel_index(flat, shape)) if shape else ()
        self.violations.append(Violation(rule, name, index, dict(iteration)))

    def load(self, field, flat, grad, iteration):
        k = (self._key(field, grad), flat)
        st = self.state.get(k, self.FRESH)
        if st == self.ACCUMULATING:
            self._report(2, field, grad, flat, iteration)
        elif st == self.FRESH:
            self.state[k] = self.READ

    def store(self, field, flat, grad, iteration):
        k = (self._key(field, grad), flat)
        if self.state.get(k) in (self.WRITTEN, self.ACCUMULATING):
            self._report(1, field, grad, flat, iteration)
        self.state[k] = self.WRITTEN

    def atomic(self, field, flat, grad, iteration):
        self.state[(self._key(field, grad), flat)] = self.ACCUMULATING

    def iteration(self, var, value):
        pass


class _IterationTrace(_AccessTracker):
    def __init__(self, program):
        super().__init__(program)
        self.trace: list = []

    def iteration(self, var, value):
        self.trace.append((var, value))


def check_access_rules(program: Program, store: FieldStore, kernel_name: str, args: Sequence = ()) -> list:
    """Run one launch instrumented (on a copy of ``store``) and list violations.

    ``kernel_name`` may end in ``.grad`` to check a generated adjoint.
    """
    kernel = _lookup(program, kernel_name)
    tracker = _AccessTracker(program)
    rt = Runtime(program, store.copy(), ExecMode.DETERMINISTIC)
    rt._execute(kernel, _convert_args(kernel, tuple(args)), tracker)
    return tracker.violations


def iteration_trace(program: Program, store: FieldStore, kernel_name: str, args: Sequence = ()) -> list:
    """Loop-variable values in execution order for one (copied) launch."""
    kernel = _lookup(program, kernel_name)
    tracer = _IterationTrace(program)
    rt = Runtime(program, store.copy(), ExecMode.DETERMINISTIC)
    rt._execute(kernel, _convert_args(kernel, tuple(args)), tracer)
    return tracer.trace


def _lookup(program, name):
    if name.endswith(".grad") and name[:-5] in program.adjoints:
        return program.adjoints[name[:-5]]
    return program.kernel(name)


# ----------------------------------------------------------------------------
# gradient checking


@dataclass
class ElementCheck:
    index: tuple
    analytic: float
    numeric: float
    abs_err: float
    rel_err: float
    significant: bool


@dataclass
class GradCheckReport:
    input_field: str
    loss: float
    max_rel_err: float
    max_abs_err: float
    elements: list
    rel_tol: float
    abs_tol: float
    small: float

    @property
    def passed(self) -> bool:
        return all((e.rel_err < self.rel_tol) if e.significant else (e.abs_err < self.abs_tol)
                   for e in self.elements)

    @property
    def worst(self) -> Optional[ElementCheck]:
        if not self.elements:
            return None
        return max(self.elements, key=lambda e: (e.significant, e.rel_err if e.significant else e.abs_err))

    def summary(self) -> str:
        w = self.worst
        where = f"worst {self.input_field}[{', '.join(map(str, w.index))}] analytic={w.analytic:.10g} " \
                f"numeric={w.numeric:.10g}" if w else "no elements"
        return (f"grad-check {self.input_field}: {len(self.elements)} elements, "
                f"max rel err {self.max_rel_err:.3e}, max abs err {self.max_abs_err:.3e}; {where}")


def grad_check(program: Program, sim_closure: Callable, input_field: str, loss_field: str,
               epsilon: float = 1e-6, n_samples: int = 20, seed: int = 0,
               store: Optional[FieldStore] = None, rel_tol: float = 1e-5, abs_tol: float = 1e-8,
               small: float = 1e-6, indices=None, allow_f32: bool = False) -> GradCheckReport:
    """Compare tape gradients with central differences.

    ``sim_closure(rt)`` must run the forward simulation (all launches that
    lead to ``loss_field``) on the given runtime.  The store is restored to
    its initial primal state afterwards; the analytic adjoints stay in it.
    """
    decl = program.field(loss_field)
    if decl.shape != () or not decl.needs_grad:
        raise RuntimeFault(f"loss field {loss_field!r} must be a 0-D needs_grad field")
    if store is None:
        store = FieldStore(program, "f64")
    if store.precision != "f64" and not allow_f32:
        raise RuntimeFault("grad_check requires an f64 store (pass allow_f32=True to override)")
    rt = Runtime(program, store, ExecMode.DETERMINISTIC)
    initial = store.snapshot()

    def run():
        store.restore(initial)
        sim_closure(rt)
        value = float(store[loss_field])
        if not np.isfinite(value):
            raise RuntimeFault(f"non-finite loss {value}")
        return value

    store.restore(initial)
    with rt.tape() as t:
        sim_closure(rt)
    loss0 = float(store[loss_field])
    if not np.isfinite(loss0):
        raise RuntimeFault(f"non-finite loss {loss0}")
    rt.backward(t, loss_field)
    analytic = store.grad(input_field).copy()

    shape = program.field(input_field).shape
    size = int(np.prod(shape)) if shape else 1
    if indices is None:
        rng = np.random.default_rng(seed)
        flats = np.arange(size) if size <= n_samples else np.sort(rng.choice(size, n_samples, replace=False))
    else:
        flats = [int(np.ravel_multi_index(ix, shape)) if shape else 0 for ix in indices]

    elements = []
    for flat in flats:
        flat = int(flat)
        base = initial[input_field].reshape(-1)[flat]
        initial[input_field].reshape(-1)[flat] = base + epsilon
        lp = run()
        initial[input_field].reshape(-1)[flat] = base - epsilon
        lm = run()
        initial[input_field].reshape(-1)[flat] = base
        numeric = (lp - lm) / (2 * epsilon)
        a = float(analytic.reshape(-1)[flat])
        abs_err = abs(a - numeric)
        scale = max(abs(a), abs(numeric))
        significant = scale >= small
        rel = abs_err / scale if scale > 0 else 0.0
        index = tuple(int(i) for i in np.unravel_index(flat, shape)) if shape else ()
        elements.append(ElementCheck(index, a, numeric, abs_err, rel, significant))
    store.restore(initial)
    sig = [e.rel_err for e in elements if e.significant]
    return GradCheckReport(input_field, loss0, max(sig) if sig else 0.0,
                           max((e.abs_err for e in elements), default=0.0),
                           elements, rel_tol, abs_tol, small)


# ----------------------------------------------------------------------------
# segment-wise checkpointing


@dataclass
class SegmentStats:
    n_steps: int
    segment_size: int
    n_segments: int
    window_steps: int
    peak_steps: int
    loss: float


def run_segmented(program: Program, store: FieldStore, step_routine: Callable, n_steps: int,
                  segment_size: int, checkpoint_fields: Sequence[str],
                  window_fields: Sequence[str] = (), loss_routine: Optional[Callable] = None,
                  loss_field: Optional[str] = None, mode: ExecMode = ExecMode.DETERMINISTIC) -> SegmentStats:
    """Forward and backward simulation keeping one snapshot per segment.

    State fields carry a leading time axis of ``segment_size + 1`` slots.
    ``step_routine(rt, slot, t)`` advances slot-1 to slot for global step t.
    ``checkpoint_fields`` are the state tensors carried between segments
    (slot S is copied to slot 0); ``window_fields`` are other per-step
    tensors that must be zeroed before a segment is recomputed (for example
    force accumulators).  ``loss_routine(rt, slot)`` computes ``loss_field``
    from the final slot.  Without a loss routine only the forward pass runs.

    After return the adjoints of slot 0 hold d loss / d initial state and
    every other adjoint buffer outside the window holds its full gradient.
    """
    S = int(segment_size)
    if S <= 0:
        raise ValueError("segment size must be positive")
    if n_steps <= 0:
        raise ValueError("n_steps must be positive")
    for f in list(checkpoint_fields) + list(window_fields):
        shape = program.field(f).shape
        if not shape or shape[0] != S + 1:
            raise ValueError(f"field {f!r} needs a leading window axis of {S + 1} slots, has {shape}")
    rt = Runtime(program, store, mode)
    lengths = [min(S, n_steps - s) for s in range(0, n_steps, S)]
    starts = [s * S for s in range(len(lengths))]
    snapshots = []

    def zero_window():
        for f in window_fields:
            store[f][...] = 0
        for f in checkpoint_fields:
            store[f][1:] = 0

    for k, (start, length) in enumerate(zip(starts, lengths)):
        if k > 0:
            for f in checkpoint_fields:
                store[f][0] = store[f][S]
        snapshots.append({f: store[f][0].copy() for f in checkpoint_fields})
        zero_window()
        for slot in range(1, length + 1):
            step_routine(rt, slot, start + slot)
    last = lengths[-1]
    loss = float("nan")
    if loss_routine is not None:
        if loss_field is None:
            raise ValueError("loss_routine requires loss_field")
        with rt.tape() as lt:
            loss_routine(rt, last)
        loss = float(store[loss_field])
        rt.backward(lt, loss_field)
        for k in range(len(lengths) - 1, -1, -1):
            start, length = starts[k], lengths[k]
            # recompute the segment from its snapshot (deterministic, so the
            # last one reproduces the resident state exactly)
            zero_window()
            for f in checkpoint_fields:
                store[f][0] = snapshots[k][f]
            with rt.tape() as seg_tape:
                for slot in range(1, length + 1):
                    step_routine(rt, slot, start + slot)
            rt.replay_adjoints(seg_tape)
            if k > 0:
                for f in checkpoint_fields:
                    if program.fields[f].needs_grad:
                        g = store.grad(f)
                        carried = g[0].copy()
                        g[...] = 0
                        g[S] = carried
                for f in window_fields:
                    if program.fields[f].needs_grad:
                        store.grad(f)[...] = 0
    return SegmentStats(n_steps, S, len(lengths), S + 1, S + 1 + len(snapshots), loss)
