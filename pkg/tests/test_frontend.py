import pytest

from adjk import ir
from adjk.frontend import ParseError, parse_file, parse_program, tokenize
from adjk.simulators.common import read_resource, render

from conftest import CORPUS_FILES


def test_empty_source():
    p = parse_program("")
    assert p.fields == {} and p.kernels == {}


def test_comments_only():
    p = parse_program("# nothing here\n\n# still nothing\n")
    assert p.kernels == {}


def test_missing_expression_reports_semicolon_span():
    src = "field x: f32[1];\nkernel f() { x[0] = ; }"
    with pytest.raises(ParseError) as err:
        parse_program(src, "t.dk")
    diags = err.value.diagnostics
    assert len(diags) == 1
    span = diags[0].span
    assert (span.line, span.column) == (2, src.splitlines()[1].index(";") + 1)


def test_time_integrate_listing():
    src = """
field x: f32[4, 3, 2]; field v: f32[4, 3, 2]; field force: f32[4, 3, 2];
kernel time_integrate(t: i32) {
  parallel for i in 0..3 {
    for d in 0..2 {
      let s = exp(-0.001 * 5.5);
      v[t, i, d] = s * v[t - 1, i, d] + 0.001 * force[t, i, d];
      x[t, i, d] = x[t - 1, i, d] + 0.001 * v[t, i, d];
    }
  }
}"""
    k = parse_program(src).kernels["time_integrate"]
    tops = [s for s in k.body if isinstance(s, ir.For)]
    assert len(tops) == 1 and tops[0].parallel
    nodes = list(ir.walk_block(k.body))
    assert any(isinstance(n, ir.UnaryOp) and n.op == "exp" for n in nodes)
    assert any(isinstance(n, ir.BinOp) and n.op == "mul" for n in nodes)
    assert any(isinstance(n, ir.BinOp) and n.op == "add" for n in nodes)


@pytest.mark.parametrize("path", CORPUS_FILES, ids=lambda p: p.name)
def test_corpus_parses_and_validates(path):
    p = parse_file(path)
    assert ir.validate(p) == []


@pytest.mark.parametrize("path", CORPUS_FILES, ids=lambda p: p.name)
def test_dump_reparses_to_same_ir(path):
    p = parse_file(path)
    q = parse_program(ir.dump_program(p))
    assert q.kernels == p.kernels
    assert q.fields == p.fields


def test_every_simulator_template_parses():
    from conftest import small_simulator_programs
    for name, prog in small_simulator_programs().items():
        assert prog.source, name
        assert ir.validate(parse_program(prog.source)) == []


@pytest.mark.parametrize("src,needle", [
    ("kernel f() { y[0] = 1.0; }", "undeclared field 'y'"),
    ("field x: f32[2];\nkernel f() { x[0] = q; }", "undeclared identifier 'q'"),
    ("field x: f32[2];\nkernel f() { x[0] = x; }", "field used without index"),
    ("field x: f32[2];\nkernel f() { x[0, 1] = 1.0; }", "index"),
    ("field x: f32[2];\nkernel f() { x[1.0] = 1.0; }", "i32"),
    ("field x: f32[2];\nkernel f() { x[0] = foo(1.0); }", "unknown function"),
    ("field x: f32[2];\nkernel f() { x[0] = min(1.0); }", "takes 2"),
    ("field x: f32[2];\nkernel f() { let a = 1.0; a = 2.0; x[0] = a; }", "immutable"),
    ("field x: f32[2];\nkernel f() { let a = 1.0; let a = 2.0; x[0] = a; }", "already"),
    ("field x: f32[2];\nfield x: f32[2];", "declared twice"),
    ("field x: i32[2] needs_grad;", "needs_grad"),
    ("field x: f32[0];", "extent"),
])
def test_semantic_errors(src, needle):
    with pytest.raises(ParseError) as err:
        parse_program(src)
    assert needle.lower() in str(err.value).lower()


def test_loop_carried_local_rejected():
    src = """field x: f32[4]; field y: f32[1];
kernel f() { let mut s = 0.0; for i in 0..4 { s = s + x[i]; } y[0] = s; }"""
    with pytest.raises((ParseError, ir.IRError)) as err:
        from adjk.passes import lower_program
        lower_program(parse_program(src))
    assert "loop" in str(err.value).lower()


def test_nested_parallel_for_rejected():
    src = """field x: f32[4, 4];
kernel f() { parallel for i in 0..4 { parallel for j in 0..4 { x[i, j] = 1.0; } } }"""
    with pytest.raises(ParseError):
        parse_program(src)


def test_multiple_errors_reported_together():
    src = "field x: f32[2];\nkernel f() { x[0] = q; x[1] = r; }"
    with pytest.raises(ParseError) as err:
        parse_program(src)
    assert len(err.value.diagnostics) == 2


def test_tokenize_float_forms():
    kinds = [t.kind for t in tokenize("1.5 2e3 7 1.0e-4 x") if t.kind != "eof"]
    assert kinds == ["float", "float", "int", "float", "ident"]


def test_integer_literal_promoted_next_to_float():
    k = parse_program("field x: f32[1];\nkernel f() { x[0] = x[0] * 2; }").kernels["f"]
    rhs = k.body[0].value
    assert isinstance(rhs.rhs, ir.ConstF) and rhs.rhs.value == 2.0


def test_render_substitutes_constants():
    text = render("bouncing_ball", steps=5, dt=0.01, ground_height=0.0)
    assert "$" not in text
    assert "$dt" in read_resource("dk", "bouncing_ball.dk")
