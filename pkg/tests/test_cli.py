import pytest

from adjk import io
from adjk.cli import main

from conftest import corpus


def test_compile_fig3_flattened(capsys):
    assert main(["compile", str(corpus("fig3.dk")), "--dump-ir", "flattened"]) == 0
    assert "select(b > 0, b, 2*b)" in capsys.readouterr().out


@pytest.mark.parametrize("stage", ["parsed", "flattened", "ssa", "adjoint"])
def test_compile_every_stage(stage, capsys):
    assert main(["compile", str(corpus("control.dk")), "--dump-ir", stage, "--kernel", "reduce"]) == 0
    out = capsys.readouterr().out
    assert f"# stage: {stage}" in out


def test_compile_summary(capsys):
    assert main(["compile", str(corpus("polynomial.dk"))]) == 0
    assert "2 kernel(s)" in capsys.readouterr().out


def test_compile_syntax_error_exit_1(tmp_path, capsys):
    bad = tmp_path / "bad.dk"
    bad.write_text("field x: f32[1];\nkernel f() { x[0] = ; }\n")
    assert main(["compile", str(bad)]) == 1
    assert "bad.dk:2:" in capsys.readouterr().err


def test_missing_file_exit_1(tmp_path):
    assert main(["compile", str(tmp_path / "none.dk")]) == 1


def test_unknown_kernel_exit_1():
    assert main(["compile", str(corpus("fig3.dk")), "--kernel", "nope"]) == 1


@pytest.mark.parametrize("argv", [
    ["bogus"], [], ["demo", "diffmpm"], ["compile"], ["demo", "wave", "--toi", "maybe"],
    ["demo", "wave", "--segment", "4"], ["scan", "billiards", "--param", "height", "--from", "0",
                                         "--to", "1", "--samples", "3", "--out", "x.csv"],
])
def test_usage_errors_exit_2(argv, capsys):
    assert main(argv) == 2
    assert "usage" in capsys.readouterr().err.lower()


def test_grad_check_passes(capsys):
    code = main(["grad-check", str(corpus("sin_square.dk")), "--loss", "y", "--input", "x", "--f64"])
    # y is not 0-D, so this is a runtime error
    assert code == 1
    code = main(["grad-check", str(corpus("polynomial.dk")), "--loss", "loss", "--input", "coeff",
                 "--f64"])
    out = capsys.readouterr().out
    assert code == 0 and "PASS" in out and "worst" in out


def test_grad_check_f32_mode(capsys):
    code = main(["grad-check", str(corpus("polynomial.dk")), "--loss", "loss", "--input", "xs"])
    assert code == 0
    assert "(f32)" in capsys.readouterr().out


def test_grad_check_threshold_failure(capsys):
    code = main(["grad-check", str(corpus("polynomial.dk")), "--loss", "loss", "--input", "coeff",
                 "--f64", "--tol", "0"])
    assert code == 1
    assert "FAIL" in capsys.readouterr().out


def test_grad_check_explicit_launches(capsys):
    code = main(["grad-check", str(corpus("control.dk")), "--loss", "total", "--input", "x",
                 "--f64", "--launch", "branches:0.4", "--launch", "reduce"])
    assert code == 0, capsys.readouterr().out


def test_check_access_clean_and_violating(capsys):
    assert main(["check-access", str(corpus("control.dk")), "--kernel", "reduce"]) == 0
    assert main(["check-access", str(corpus("rule1_violation.dk")), "--kernel", "overwrite"]) == 1
    out = capsys.readouterr().out
    assert "rule 1" in out
    assert main(["check-access", str(corpus("rule2_violation.dk")), "--kernel", "read_after_add"]) == 1
    assert "rule 2" in capsys.readouterr().out


def test_check_access_with_args(capsys):
    assert main(["check-access", str(corpus("control.dk")), "--kernel", "branches", "--arg", "0.5"]) == 0


def test_demo_iters_zero_writes_one_row(tmp_path, capsys):
    out = tmp_path / "ms"
    assert main(["demo", "mass_spring_simple", "--iters", "0", "--out", str(out)]) == 0
    rows = (out / "loss.csv").read_text().splitlines()
    assert rows[0] == "iteration,loss" and len(rows) == 2
    from adjk.simulators import mass_spring_simple as ms
    cfg = ms.load_config()
    rt = ms.setup(cfg)
    ms.forward(rt, cfg)
    assert float(rows[1].split(",")[1]) == pytest.approx(float(rt.store["loss"]), rel=1e-6)
    assert (out / "frame_0000.pgm").exists()


def test_demo_deterministic_is_byte_identical(tmp_path):
    outs = []
    for k in range(2):
        d = tmp_path / f"run{k}"
        assert main(["demo", "mass_spring_robot", "--iters", "2", "--steps", "32", "--seed", "7",
                     "--deterministic", "--out", str(d)]) == 0
        outs.append((d / "loss.csv").read_bytes())
    assert outs[0] == outs[1]


def test_demo_bouncing_ball_gradients(tmp_path, capsys):
    assert main(["demo", "bouncing_ball", "--toi", "off", "--out", str(tmp_path / "a")]) == 0
    off = capsys.readouterr().out
    assert main(["demo", "bouncing_ball", "--toi", "on", "--out", str(tmp_path / "b")]) == 0
    on = capsys.readouterr().out
    assert "+1.000000" in off and "-1.000000" in on


def test_demo_segment_and_grads(tmp_path):
    d = tmp_path / "robot"
    assert main(["demo", "mass_spring_robot", "--iters", "1", "--steps", "16", "--segment", "4",
                 "--deterministic", "--grads", "--out", str(d)]) == 0
    assert (d / "grads.csv").read_text().startswith("field,index,grad\n")
    assert len(io.read_loss_csv(d / "loss.csv")) == 1


@pytest.mark.parametrize("name", ["wave", "smoke", "billiards", "electric"])
def test_demo_runs(name, tmp_path):
    d = tmp_path / name
    assert main(["demo", name, "--iters", "1", "--out", str(d)]) == 0
    assert (d / "loss.csv").exists()
    assert sorted(p.name for p in d.glob("frame_*.pgm"))[0] == "frame_0000.pgm"


def test_scan_bouncing_ball(tmp_path, capsys):
    out = tmp_path / "scan.csv"
    assert main(["scan", "bouncing_ball", "--param", "height", "--from", "0.4", "--to", "0.5",
                 "--samples", "50", "--out", str(out)]) == 0
    rows = out.read_text().splitlines()
    assert rows[0] == "iteration,loss,height,grad" and len(rows) == 51
    assert "sign change" in capsys.readouterr().out


def test_scan_billiards(tmp_path):
    out = tmp_path / "scan.csv"
    assert main(["scan", "billiards", "--param", "angle", "--from", "0.9", "--to", "1.0",
                 "--samples", "5", "--out", str(out)]) == 0
    assert len(io.read_loss_csv(out)) == 5
