"""Scalar reverse-mode tape with nested second-order forward duals.

The tape records every intermediate of a forward evaluation; one reverse
sweep yields derivatives of a scalar output with respect to any recorded
input.  Composition derivatives (first and second, in a single direction)
are carried by ``Dual2`` numbers whose components are themselves tape
nodes, so quantities like d2(g)/dx2 remain differentiable with respect to
model parameters.

All arithmetic is double precision.  A ``Tape`` is single-threaded and
owned by one evaluation; independent tapes may be used concurrently.
"""

from __future__ import annotations

import math
from typing import Callable, Sequence

__all__ = [
    "AutodiffError",
    "Tape",
    "Node",
    "Dual2",
    "gradient",
    "second_directional",
    "finite_difference_check",
    "exp",
    "log",
    "sqrt",
    "sigmoid",
    "silu",
    "softplus",
]


class AutodiffError(RuntimeError):
    pass


class Tape:
    """Arena of nodes for one evaluation; reuse via :meth:`reset`."""

    __slots__ = ("nodes", "swept")

    def __init__(self):
        self.nodes: list[Node] = []
        self.swept = False

    def node(self, value: float, parents=()) -> "Node":
        n = Node(float(value), self, parents)
        self.nodes.append(n)
        return n

    def constant(self, value: float) -> "Node":
        return self.node(value)

    def reset(self) -> None:
        """Zero all adjoints and allow another reverse sweep."""
        for n in self.nodes:
            n.adjoint = 0.0
        self.swept = False

    def clear(self) -> None:
        """Drop all recorded nodes (start a fresh evaluation)."""
        self.nodes.clear()
        self.swept = False

    def __len__(self) -> int:
        return len(self.nodes)


class Node:
    """One recorded scalar; ``parents`` holds (node, local partial) pairs."""

    __slots__ = ("value", "adjoint", "parents", "tape", "index")

    def __init__(self, value: float, tape: Tape, parents=()):
        self.value = value
        self.adjoint = 0.0
        self.parents = parents
        self.tape = tape
        self.index = len(tape.nodes)

    # -- helpers -------------------------------------------------------

    def _lift(self, other) -> "Node":
        if isinstance(other, Node):
            if other.tape is not self.tape:
                raise AutodiffError("nodes from different tapes")
            return other
        return self.tape.node(float(other))

    # -- arithmetic ----------------------------------------------------

    def __add__(self, other):
        other = self._lift(other)
        return self.tape.node(self.value + other.value, ((self, 1.0), (other, 1.0)))

    __radd__ = __add__

    def __sub__(self, other):
        other = self._lift(other)
        return self.tape.node(self.value - other.value, ((self, 1.0), (other, -1.0)))

    def __rsub__(self, other):
        other = self._lift(other)
        return other - self

    def __mul__(self, other):
        other = self._lift(other)
        return self.tape.node(self.value * other.value,
                              ((self, other.value), (other, self.value)))

    __rmul__ = __mul__

    def __truediv__(self, other):
        other = self._lift(other)
        inv = 1.0 / other.value
        return self.tape.node(self.value * inv,
                              ((self, inv), (other, -self.value * inv * inv)))

    def __rtruediv__(self, other):
        other = self._lift(other)
        return other / self

    def __neg__(self):
        return self.tape.node(-self.value, ((self, -1.0),))

    def __pow__(self, n):
        if not isinstance(n, (int, float)):
            raise TypeError("only constant exponents")
        v = self.value ** n
        return self.tape.node(v, ((self, n * self.value ** (n - 1)),))

    def __abs__(self):
        # subgradient at 0 taken from the right
        sign = 1.0 if self.value >= 0.0 else -1.0
        return self.tape.node(abs(self.value), ((self, sign),))

    def __repr__(self):
        return f"Node({self.value!r})"


# -- unary primitives: dispatch on Node vs plain float ------------------
#
# SiLU and sigmoid (and their derivative primitives used by Dual2) are
# first class with hand-written partials: composing them out of exp/log
# on the tape invites cancellation for large |x|.


def _sigmoid(x: float) -> float:
    if x >= 0.0:
        return 1.0 / (1.0 + math.exp(-x))
    e = math.exp(x)
    return e / (1.0 + e)


def _silu(x: float) -> float:
    return x * _sigmoid(x)


def _silu_d(x: float) -> float:
    s = _sigmoid(x)
    return s * (1.0 + x * (1.0 - s))


def _silu_dd(x: float) -> float:
    s = _sigmoid(x)
    return s * (1.0 - s) * (2.0 + x * (1.0 - 2.0 * s))


def _silu_ddd(x: float) -> float:
    s = _sigmoid(x)
    sp = s * (1.0 - s)
    return 3.0 * sp * (1.0 - 2.0 * s) + x * sp * ((1.0 - 2.0 * s) ** 2 - 2.0 * sp)


def _softplus(x: float) -> float:
    # overflow-safe: for large x, ln(1+e^x) = x + ln(1+e^-x) ~ x
    if x > 30.0:
        return x
    return math.log1p(math.exp(x))


def exp(x):
    if isinstance(x, Node):
        v = math.exp(x.value)
        return x.tape.node(v, ((x, v),))
    return math.exp(x)


def log(x):
    if isinstance(x, Node):
        if x.value <= 0.0:
            raise AutodiffError(f"domain: log of non-positive value {x.value}")
        return x.tape.node(math.log(x.value), ((x, 1.0 / x.value),))
    return math.log(x)


def sqrt(x):
    if isinstance(x, Node):
        v = math.sqrt(x.value)
        return x.tape.node(v, ((x, 0.5 / v),))
    return math.sqrt(x)


def sigmoid(x):
    if isinstance(x, Node):
        s = _sigmoid(x.value)
        return x.tape.node(s, ((x, s * (1.0 - s)),))
    return _sigmoid(x)


def silu(x):
    if isinstance(x, Node):
        return x.tape.node(_silu(x.value), ((x, _silu_d(x.value)),))
    return _silu(x)


def silu_d(x):
    """First derivative of SiLU as a primitive (differentiable once more)."""
    if isinstance(x, Node):
        return x.tape.node(_silu_d(x.value), ((x, _silu_dd(x.value)),))
    return _silu_d(x)


def silu_dd(x):
    """Second derivative of SiLU as a primitive."""
    if isinstance(x, Node):
        return x.tape.node(_silu_dd(x.value), ((x, _silu_ddd(x.value)),))
    return _silu_dd(x)


def sigmoid_d(x):
    """First derivative of sigmoid as a primitive."""
    if isinstance(x, Node):
        s = _sigmoid(x.value)
        return x.tape.node(s * (1.0 - s), ((x, s * (1.0 - s) * (1.0 - 2.0 * s)),))
    s = _sigmoid(x)
    return s * (1.0 - s)


def sigmoid_dd(x):
    """Second derivative of sigmoid as a primitive."""
    if isinstance(x, Node):
        s = _sigmoid(x.value)
        sp = s * (1.0 - s)
        return x.tape.node(sp * (1.0 - 2.0 * s),
                           ((x, sp * ((1.0 - 2.0 * s) ** 2 - 2.0 * sp)),))
    s = _sigmoid(x)
    return s * (1.0 - s) * (1.0 - 2.0 * s)


def softplus(x):
    if isinstance(x, Node):
        return x.tape.node(_softplus(x.value), ((x, _sigmoid(x.value)),))
    return _softplus(x)


def gradient(output: Node, inputs: Sequence[Node]) -> list[float]:
    """d(output)/d(input) for each input, by one reverse sweep.

    Adjoints are zeroed again before returning; a second sweep over the
    same tape without an explicit ``tape.reset()`` raises (guards against
    accidental double-backward over stale adjoints).
    """
    tape = output.tape
    for inp in inputs:
        if not isinstance(inp, Node) or inp.tape is not tape:
            raise AutodiffError("detached input: node not on the output's tape")
    if tape.swept:
        raise AutodiffError("tape already swept; call tape.reset() first")
    tape.swept = True

    output.adjoint = 1.0
    nodes = tape.nodes
    for i in range(output.index, -1, -1):
        n = nodes[i]
        a = n.adjoint
        if a != 0.0:
            for parent, partial in n.parents:
                parent.adjoint += a * partial
    grads = [inp.adjoint for inp in inputs]
    for i in range(output.index, -1, -1):
        nodes[i].adjoint = 0.0
    return grads


class Dual2:
    """Second-order dual number: value, first and second directional
    derivative with respect to one scalar direction.

    Components are tape nodes, so the derivatives stay differentiable
    with respect to anything else recorded on the tape.
    """

    __slots__ = ("p", "d1", "d2")

    def __init__(self, p, d1, d2):
        self.p = p
        self.d1 = d1
        self.d2 = d2

    @staticmethod
    def variable(tape: Tape, value: float, direction: float = 1.0) -> "Dual2":
        return Dual2(tape.node(value), tape.node(direction), tape.node(0.0))

    @staticmethod
    def constant_like(x, value) -> "Dual2":
        tape = x.p.tape
        v = value if isinstance(value, Node) else tape.node(float(value))
        return Dual2(v, tape.node(0.0), tape.node(0.0))

    def _lift(self, other) -> "Dual2":
        if isinstance(other, Dual2):
            return other
        return Dual2.constant_like(self, other)

    def __add__(self, other):
        other = self._lift(other)
        return Dual2(self.p + other.p, self.d1 + other.d1, self.d2 + other.d2)

    __radd__ = __add__

    def __sub__(self, other):
        other = self._lift(other)
        return Dual2(self.p - other.p, self.d1 - other.d1, self.d2 - other.d2)

    def __rsub__(self, other):
        return self._lift(other) - self

    def __mul__(self, other):
        other = self._lift(other)
        return Dual2(
            self.p * other.p,
            self.d1 * other.p + self.p * other.d1,
            self.d2 * other.p + 2.0 * (self.d1 * other.d1) + self.p * other.d2,
        )

    __rmul__ = __mul__

    def __truediv__(self, other):
        other = self._lift(other)
        inv = _chain(other, lambda p: 1.0 / p, lambda p: -(p ** -2),
                     lambda p: 2.0 * (p ** -3))
        return self * inv

    def __rtruediv__(self, other):
        return self._lift(other) / self

    def __neg__(self):
        return Dual2(-self.p, -self.d1, -self.d2)

    def __repr__(self):
        return f"Dual2({self.p.value!r}, {self.d1.value!r}, {self.d2.value!r})"


def _chain(x: Dual2, f, fp, fpp) -> Dual2:
    """Apply unary f with derivatives fp, fpp by the second-order chain rule."""
    v = f(x.p)
    d1 = fp(x.p)
    d2 = fpp(x.p)
    return Dual2(v, d1 * x.d1, d2 * (x.d1 * x.d1) + d1 * x.d2)


def dexp(x):
    if isinstance(x, Dual2):
        v = exp(x.p)
        return Dual2(v, v * x.d1, v * (x.d1 * x.d1) + v * x.d2)
    return exp(x)


def dlog(x):
    if isinstance(x, Dual2):
        return _chain(x, log, lambda p: 1.0 / p, lambda p: -(p ** -2))
    return log(x)


def dsqrt(x):
    if isinstance(x, Dual2):
        return _chain(x, sqrt, lambda p: 0.5 * p ** -0.5, lambda p: -0.25 * p ** -1.5)
    return sqrt(x)


def dsigmoid(x):
    if isinstance(x, Dual2):
        return _chain(x, sigmoid, sigmoid_d, sigmoid_dd)
    return sigmoid(x)


def dsilu(x):
    if isinstance(x, Dual2):
        return _chain(x, silu, silu_d, silu_dd)
    return silu(x)


def second_directional(f: Callable, x0: float, direction: float = 1.0,
                       tape: Tape | None = None):
    """Evaluate ``f`` at ``x0`` with first/second directional derivatives.

    ``f`` must be written against the Dual2-aware helpers (dexp, dlog, ...)
    or plain arithmetic.  Returns ``(value, d1, d2)`` as Nodes so a caller
    may keep differentiating them with respect to other tape inputs.
    """
    tape = tape or Tape()
    x = Dual2.variable(tape, x0, direction)
    out = f(x)
    if not isinstance(out, Dual2):
        raise AutodiffError("function did not propagate duals")
    return out.p, out.d1, out.d2


def finite_difference_check(f: Callable[[float], float], x: float,
                            h: float = 1e-6) -> float:
    """Max relative error between tape gradient and a central difference."""
    tape = Tape()
    xn = tape.node(x)
    out = f(xn)
    (g,) = gradient(out, [xn])
    fd = (f(x + h) - f(x - h)) / (2.0 * h)
    scale = max(abs(g), abs(fd), 1e-12)
    return abs(g - fd) / scale
