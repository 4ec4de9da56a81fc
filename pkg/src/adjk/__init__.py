"""A small differentiable kernel language with source-transformation autodiff."""

from . import ir
from .autodiff import AutodiffError, differentiate, make_adjoint, register_custom_gradient
from .frontend import ParseError, parse_file, parse_program
from .ir import Program, StageError, dump_ir, validate
from .passes import PassError, eliminate_mutable_locals, flatten_branches, lower_program, simplify
from .runtime import (ExecMode, FieldStore, Runtime, Tape, check_access_rules, clear_gradients,
                      grad_check, launch, run_segmented, tape_backward)

__version__ = "0.1.0"


def compile_source(source: str, filename: str = "<string>", adjoints: bool = True) -> Program:
    """Parse, lower every kernel to SSA and (optionally) attach adjoints."""
    program = lower_program(parse_program(source, filename))
    program.source = source
    if adjoints:
        differentiate(program)
    return program


def compile_file(path, adjoints: bool = True) -> Program:
    from pathlib import Path
    return compile_source(Path(path).read_text(), str(path), adjoints)


__all__ = [
    "AutodiffError", "ExecMode", "FieldStore", "ParseError", "PassError", "Program", "Runtime",
    "StageError", "Tape", "check_access_rules", "clear_gradients", "compile_file", "compile_source",
    "differentiate", "dump_ir", "eliminate_mutable_locals", "flatten_branches", "grad_check", "ir",
    "launch", "lower_program", "make_adjoint", "parse_file", "parse_program",
    "register_custom_gradient", "run_segmented", "simplify", "tape_backward", "validate",
]
