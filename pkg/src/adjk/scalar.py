"""Scalar semantics shared by constant folding and the sequential backend.

Keeping one definition of every operator guarantees that folding a constant
expression gives exactly the value the interpreter would have computed.
Floating operators follow IEEE conventions (no exceptions); integer division
and modulus by zero raise :class:`ArithmeticFault`.
"""

import math

INF = float("inf")
NAN = float("nan")
I32_MIN = -(1 << 31)
I32_MAX = (1 << 31) - 1


class ArithmeticFault(ArithmeticError):
    pass


def fdiv(a, b):
    try:
        return a / b
    except ZeroDivisionError:
        if a != a or a == 0:
            return NAN
        return math.copysign(INF, a) * math.copysign(1.0, b)


def fmod(a, b):
    """Euclidean remainder: result in [0, |b|)."""
    try:
        return a % abs(b)
    except ZeroDivisionError:
        return NAN


def idiv(a, b):
    if b == 0:
        raise ArithmeticFault("integer division by zero")
    return a // b


def imod(a, b):
    if b == 0:
        raise ArithmeticFault("integer modulus by zero")
    return a % abs(b)


def fmin(a, b):
    return a if a <= b else b


def fmax(a, b):
    return a if a >= b else b


def fsqrt(a):
    if a < 0 or a != a:
        return NAN
    return math.sqrt(a)


def fexp(a):
    try:
        return math.exp(a)
    except OverflowError:
        return INF


def fsin(a):
    return math.sin(a) if math.isfinite(a) else NAN


def fcos(a):
    return math.cos(a) if math.isfinite(a) else NAN


def ffloor(a):
    return float(math.floor(a)) if math.isfinite(a) else a


def f2i(a):
    if not math.isfinite(a):
        raise ArithmeticFault(f"cannot convert {a} to i32")
    return int(a)


BINARY = {
    "add": lambda a, b: a + b,
    "sub": lambda a, b: a - b,
    "mul": lambda a, b: a * b,
    "min": fmin,
    "max": fmax,
    "cmp_lt": lambda a, b: int(a < b),
    "cmp_le": lambda a, b: int(a <= b),
    "cmp_eq": lambda a, b: int(a == b),
    "cmp_gt": lambda a, b: int(a > b),
    "cmp_ge": lambda a, b: int(a >= b),
    "cmp_ne": lambda a, b: int(a != b),
}

UNARY_F = {
    "neg": lambda a: -a,
    "abs": abs,
    "sin": fsin,
    "cos": fcos,
    "exp": fexp,
    "sqrt": fsqrt,
    "tanh": math.tanh,
    "floor": ffloor,
}
