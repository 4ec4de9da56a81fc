import pytest

from adjk import ir
from adjk.ir import (F32, I32, BinOp, ConstF, ConstI, FieldDecl, FieldLoad, FieldStore, For,
                     Kernel, LoopVar, Program, StageError)
from adjk.simulators.mass_spring_simple import build_program, load_config

from conftest import compile_corpus


def _program(*body, fields=None):
    fields = fields or {"x": FieldDecl("x", F32, (4,), True), "y": FieldDecl("y", F32, (4,), True)}
    return Program(fields=fields, kernels={"k": Kernel("k", (), tuple(body))})


def test_mass_spring_program_is_valid():
    assert ir.validate(build_program(load_config(n_steps=4))) == []


def test_undeclared_field_named_in_diagnostic():
    loop = For("i", ConstI(0), ConstI(4), True,
               (FieldStore("y", (LoopVar("i"),), FieldLoad("z", (LoopVar("i"),), F32)),))
    diags = ir.validate(_program(loop))
    assert len(diags) == 1
    assert "z" in str(diags[0])


def test_float_index_is_a_type_error():
    diags = ir.validate(_program(FieldStore("y", (ConstF(1.0),), ConstF(2.0))))
    assert len(diags) == 1
    assert "index" in diags[0].message.lower() or "i32" in diags[0].message


def test_needs_grad_on_integer_field_rejected():
    p = Program(fields={"n": FieldDecl("n", I32, (2,), True)})
    assert len(ir.validate(p)) == 1


def test_wrong_arity_index_rejected():
    diags = ir.validate(_program(FieldStore("y", (ConstI(0), ConstI(1)), ConstF(2.0))))
    assert len(diags) == 1


def test_mixed_operand_types_rejected():
    diags = ir.validate(_program(FieldStore("y", (ConstI(0),), BinOp("add", ConstF(1.0), ConstI(1)))))
    assert diags


def test_dump_flattened_fig3_contains_select():
    p = compile_corpus("fig3.dk")
    from adjk.frontend import parse_file
    from adjk.passes import flatten_branches
    from conftest import corpus
    k = flatten_branches(parse_file(corpus("fig3.dk")).kernels["f"])
    text = ir.dump_ir(k, "flattened")
    assert "select(b > 0, b, 2*b)" in text
    assert p.kernels["f"].stage == "ssa"


def test_empty_kernel_dump():
    text = ir.dump_kernel(Kernel("nothing", (), ()))
    assert text == "# stage: parsed\nkernel nothing() {\n}\n"


def test_dump_is_deterministic():
    p = compile_corpus("control.dk")
    for k in p.kernels.values():
        assert ir.dump_kernel(k) == ir.dump_kernel(k)


def test_dump_ir_stage_mismatch():
    k = Kernel("k", (), ())
    with pytest.raises(StageError):
        ir.dump_ir(k, "ssa")
    with pytest.raises(StageError):
        ir.dump_ir(k, "nonsense")


def test_program_lookup_errors():
    p = Program()
    with pytest.raises(ir.IRError):
        p.field("nope")
    with pytest.raises(ir.IRError):
        p.kernel("nope")


def test_define_routine_twice():
    p = Program()
    p.define_routine("r", lambda rt: None)
    with pytest.raises(ir.IRError):
        p.define_routine("r", lambda rt: None)


def test_spans_do_not_affect_equality():
    a = ConstF(1.0, ir.SourceSpan("a.dk", 1, 1))
    b = ConstF(1.0, ir.SourceSpan("b.dk", 9, 9))
    assert ir.structurally_equal(a, b)


@pytest.mark.parametrize("value,text", [(1.0, "1.0"), (0.1, "0.1"), (1e-4, "0.0001"), (2.5e10, "25000000000.0")])
def test_format_float_round_trips(value, text):
    assert ir.format_float(value) == text
    assert float(ir.format_float(value)) == value


def test_stage_rank_order():
    ranks = [ir.stage_rank(s) for s in ir.STAGES]
    assert ranks == sorted(ranks)
