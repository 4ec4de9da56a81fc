import numpy as np
import pytest

import adjk
from adjk import ExecMode, FieldStore, Runtime, Tape, check_access_rules, grad_check, ir
from adjk.codegen import OutOfBounds
from adjk.runtime import RuntimeFault, iteration_trace, max_threads, run_segmented, tape_backward
from adjk.simulators import mass_spring_simple as ms

from conftest import compile_corpus, default_args, random_store, small_simulator_programs

CHAIN = """field x: f32[2] needs_grad; field y: f32[2] needs_grad; field loss: f32[] needs_grad;
kernel k1() { parallel for i in 0..2 { y[i] = 3.0 * x[i]; } }
kernel k2() { loss[] = y[0] + y[1] * y[1]; }
kernel constant() { loss[] = 4.0; }
kernel pick() { loss[] = x[0]; }"""


@pytest.fixture
def chain():
    return adjk.compile_source(CHAIN)


def test_tape_records_in_order_and_backward_reverses(chain):
    s = FieldStore(chain, "f64")
    s["x"] = [1.0, 2.0]
    rt = Runtime(chain, s)
    rt.launch_log = []
    with rt.tape() as t:
        rt.launch("k1")
        rt.launch("k2")
    assert [e.name for e in t.entries] == ["k1", "k2"]
    rt.launch_log = []
    rt.backward(t, "loss")
    assert rt.launch_log == ["k2.grad", "k1.grad"]
    np.testing.assert_array_equal(s.grad("x"), [3.0, 2 * 6.0 * 3.0])


def test_empty_tape_seeds_only_loss(chain):
    s = FieldStore(chain, "f64")
    s.grad("x")[...] = 5.0
    tape_backward(chain, s, Tape(), "loss")
    assert float(s.grad("loss")) == 1.0
    assert not s.grad("x").any()


def test_backward_twice_gives_same_gradient(chain):
    s = FieldStore(chain, "f64")
    s["x"] = [1.0, 2.0]
    rt = Runtime(chain, s)
    with rt.tape() as t:
        rt.launch("k1")
        rt.launch("k2")
    rt.backward(t, "loss")
    first = s.grad("x").copy()
    rt.backward(t, "loss")
    np.testing.assert_array_equal(s.grad("x"), first)


def test_loss_must_be_0d_needs_grad(chain):
    s = FieldStore(chain, "f64")
    with pytest.raises(RuntimeFault):
        tape_backward(chain, s, Tape(), "x")


def test_nested_tape_rejected(chain):
    rt = Runtime(chain, FieldStore(chain, "f64"))
    with rt.tape():
        with pytest.raises(RuntimeFault):
            with rt.tape():
                pass


def test_clear_gradients(chain):
    s = FieldStore(chain, "f64")
    s["x"] = [1.0, 2.0]
    s.grad("x")[...] = 3.0
    before = s["x"].copy()
    adjk.clear_gradients(s)
    assert not s.grad("x").any()
    np.testing.assert_array_equal(s["x"], before)
    adjk.clear_gradients(s)
    assert not s.grad("x").any()


def test_grad_of_plain_field_rejected():
    p = adjk.compile_source("field w: f32[2];")
    with pytest.raises(ir.IRError):
        FieldStore(p).grad("w")


def test_grad_check_constant_loss(chain):
    rep = grad_check(chain, lambda rt: rt.launch("constant"), "x", "loss")
    assert rep.passed
    assert rep.max_rel_err == 0.0
    assert all(e.analytic == 0 and e.numeric == 0 for e in rep.elements)


def test_grad_check_identity_chain(chain):
    rep = grad_check(chain, lambda rt: rt.launch("pick"), "x", "loss")
    assert rep.passed
    assert rep.elements[0].analytic == 1.0
    assert rep.elements[0].numeric == pytest.approx(1.0, abs=1e-9)
    assert rep.elements[1].analytic == 0.0


def test_grad_check_detects_wrong_gradient(chain):
    # corrupt the adjoint of k1 by scaling the seed inside the closure
    def closure(rt):
        rt.launch("k1")
        rt.launch("k2")

    s = FieldStore(chain, "f64")
    s["x"] = [1.0, 2.0]
    broken = adjk.compile_source(CHAIN.replace("y[i] = 3.0 * x[i];", "y[i] = 3.0 * x[i];"))
    broken.adjoints["k1"] = chain.adjoints["k2"]  # wrong adjoint on purpose
    rep = grad_check(broken, closure, "x", "loss", store=FieldStore(broken, "f64"))
    assert not rep.passed
    assert "worst" in rep.summary()


def test_grad_check_refuses_f32(chain):
    with pytest.raises(RuntimeFault):
        grad_check(chain, lambda rt: rt.launch("pick"), "x", "loss", store=FieldStore(chain, "f32"))


def test_out_of_bounds_reports_index_and_iteration():
    p = adjk.compile_source("field x: f32[3];\nkernel f() { parallel for i in 0..4 { x[i] = 1.0; } }")
    with pytest.raises(OutOfBounds) as err:
        Runtime(p, FieldStore(p)).launch("f")
    assert err.value.index == (3,) and err.value.iteration == {"i": 3}
    with pytest.raises(OutOfBounds):
        Runtime(p, FieldStore(p), ExecMode.PARALLEL).launch("f")


def test_empty_range_changes_nothing():
    p = compile_corpus("control.dk")
    s = random_store(p, np.random.default_rng(3))
    before = s.snapshot()
    Runtime(p, s).launch("empty_range")
    Runtime(p, s).launch("empty")
    for k, v in before.items():
        np.testing.assert_array_equal(s[k], v)


def test_launch_is_deterministic(rng):
    p = compile_corpus("control.dk")
    s1 = random_store(p, rng)
    s2 = s1.copy()
    for s in (s1, s2):
        rt = Runtime(p, s)
        rt.launch("branches", 0.3)
        rt.launch("reduce")
    for k in s1.names():
        assert s1[k].tobytes() == s2[k].tobytes()


def test_wrong_argument_count(chain):
    with pytest.raises(RuntimeFault):
        Runtime(chain, FieldStore(chain)).launch("k1", 3)


def test_adjoint_cannot_be_launched_as_primal(chain):
    rt = Runtime(chain, FieldStore(chain))
    chain.kernels["k1.grad"] = chain.adjoints["k1"]
    with pytest.raises(ir.StageError):
        rt.launch("k1.grad")


@pytest.mark.parametrize("name", ["control.dk", "expressions.dk", "polynomial.dk", "sin_square.dk"])
def test_parallel_matches_deterministic_f64(name):
    p = compile_corpus(name)
    rng = np.random.default_rng(7)
    for _ in range(5):
        s1 = random_store(p, rng)
        s2 = s1.copy()
        for mode, s in ((ExecMode.DETERMINISTIC, s1), (ExecMode.PARALLEL, s2)):
            rt = Runtime(p, s, mode)
            for k in p.kernels.values():
                rt.launch(k.name, *default_args(k))
        for k in s1.names():
            np.testing.assert_allclose(s2[k], s1[k], rtol=1e-12, atol=1e-12)


def test_wide_vector_kernel_matches_sequential():
    src = """field x: f32[5000] needs_grad; field s: f32[] needs_grad; field y: f32[5000];
kernel f() { parallel for i in 0..5000 { y[i] = sin(x[i]) * 2.0; s[] += x[i] * x[i]; } }"""
    p = adjk.compile_source(src)
    rng = np.random.default_rng(0)
    s1 = FieldStore(p, "f64")
    s1["x"] = rng.standard_normal(5000)
    s2 = s1.copy()
    Runtime(p, s1).launch("f")
    Runtime(p, s2, ExecMode.PARALLEL).launch("f")
    np.testing.assert_array_equal(s1["y"], s2["y"])
    assert float(s2["s"]) == pytest.approx(float(s1["s"]), rel=1e-12)


def test_threads_env(monkeypatch):
    monkeypatch.setenv("ADJK_THREADS", "3")
    assert max_threads() == 3
    monkeypatch.setenv("ADJK_THREADS", "junk")
    assert max_threads() >= 1


# access rules

def test_rule1_violation():
    p = compile_corpus("rule1_violation.dk")
    v = check_access_rules(p, FieldStore(p), "overwrite")
    assert len(v) == 1 and v[0].rule == 1 and v[0].field == "f" and v[0].index == (0,)


def test_rule2_violation():
    p = compile_corpus("rule2_violation.dk")
    v = check_access_rules(p, FieldStore(p), "read_after_add")
    assert len(v) == 1 and v[0].rule == 2 and v[0].field == "f"
    assert "rule 2" in str(v[0])


def test_checker_leaves_store_untouched():
    p = compile_corpus("rule1_violation.dk")
    s = FieldStore(p)
    check_access_rules(p, s, "overwrite")
    assert not s["f"].any()


def test_spring_force_kernel_clean():
    cfg = ms.load_config(n_steps=4)
    rt = ms.setup(cfg, "f64", ExecMode.DETERMINISTIC)
    assert check_access_rules(rt.program, rt.store, "apply_spring_force", (1,)) == []
    assert check_access_rules(rt.program, rt.store, "apply_spring_force.grad", (1,)) == []


def test_iteration_trace_serial_reversed():
    p = compile_corpus("polynomial.dk")
    s = FieldStore(p, "f64")
    fwd = [v for _, v in iteration_trace(p, s, "horner")]
    bwd = [v for _, v in iteration_trace(p, s, "horner.grad")]
    assert fwd == list(range(6)) and bwd == fwd[::-1]


# mass-spring physics through the runtime

def test_hooke_force():
    cfg = ms.load_config(n_steps=4)
    rt = ms.setup(cfg, "f64", ExecMode.DETERMINISTIC)
    rt.launch("apply_spring_force", 1)
    x = np.asarray(cfg.points)
    f = rt.store["force"][1]
    expected = np.zeros_like(x)
    for (a, b), l0 in zip(cfg.springs, cfg.rest_lengths):
        d = x[a] - x[b]
        length = np.linalg.norm(d) + 1e-4
        c = (length - l0) * cfg.stiffness / length
        expected[a] -= c * d
        expected[b] += c * d
    np.testing.assert_allclose(f, expected, rtol=1e-12, atol=1e-15)
    np.testing.assert_allclose(f.sum(axis=0), 0, atol=1e-12)


def test_spring_length_gradient_matches_fd():
    cfg = ms.load_config(n_steps=32)
    rt = ms.setup(cfg, "f64", ExecMode.DETERMINISTIC)
    rep = grad_check(rt.program, lambda r: (ms.reset(r, cfg), ms.forward(r, cfg)),
                     "spring_length", "loss", store=rt.store, rel_tol=1e-6)
    assert rep.passed, rep.summary()
    assert np.all(rt.store.grad("spring_length") != 0)


# checkpointing

def _robot(n_steps, window=None):
    from adjk.simulators.mass_spring_robot import Robot, load_config
    return Robot(load_config(n_steps=n_steps), "f64", ExecMode.DETERMINISTIC,
                 window=None if window is None else window + 1)


@pytest.mark.parametrize("S", [1, 4, 12])
def test_segmented_matches_full_tape(S):
    n = 12
    full = _robot(n)
    full.tape_gradients()
    ref = {k: v.copy() for k, v in full.grads().items()}
    seg = _robot(n, window=S)
    stats = seg.segmented_gradients(S)
    for k, v in seg.grads().items():
        assert v.tobytes() == ref[k].tobytes(), k
    n_seg = -(-n // S)
    assert stats.n_segments == n_seg
    assert stats.peak_steps == S + 1 + n_seg
    assert stats.peak_steps <= S + n / S + 1 + (1 if n % S else 0)


def test_segmented_rejects_wrong_window():
    r = _robot(8, window=4)
    with pytest.raises(ValueError):
        run_segmented(r.program, r.store, r.step, 8, 2, ("x", "v"))


def test_snapshot_restore_round_trip(chain):
    s = FieldStore(chain, "f64")
    s["x"] = [1.5, -2.0]
    s.grad("x")[...] = 4.0
    snap = s.snapshot(grads=True)
    s["x"] = 0
    s.grad("x")[...] = 0
    s.restore(snap)
    np.testing.assert_array_equal(s["x"], [1.5, -2.0])
    np.testing.assert_array_equal(s.grad("x"), [4.0, 4.0])


def test_simulator_kernels_have_no_access_violations():
    rng = np.random.default_rng(5)
    for name, p in small_simulator_programs().items():
        store = random_store(p, rng, int_high=2)
        for kname, k in p.kernels.items():
            args = default_args(k)
            assert check_access_rules(p, store, kname, args) == [], (name, kname)
            if kname in p.adjoints:
                assert check_access_rules(p, store, kname + ".grad", args) == [], (name, kname)
