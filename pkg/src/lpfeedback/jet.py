"""Second-order forward-mode automatic differentiation.

A :class:`Jet2` carries a value together with its gradient and Hessian with
respect to a fixed set of seed variables.  All three parts may carry leading
batch dimensions, so one jet can represent the same expression evaluated at
many points at once::

    value    shape (...,)
    gradient shape (..., d)
    hessian  shape (..., d, d)

Plain floats and numpy arrays mix freely with jets and are treated as
constants.
"""

from __future__ import annotations

import numpy as np


class DomainError(ArithmeticError):
    """Raised when an elementary function is evaluated outside its domain."""


def _outer(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    return a[..., :, None] * b[..., None, :]


class Jet2:
    __slots__ = ("value", "gradient", "hessian")
    __array_priority__ = 100.0

    def __init__(self, value, gradient, hessian):
        self.value = np.asarray(value, dtype=float)
        self.gradient = np.asarray(gradient, dtype=float)
        self.hessian = np.asarray(hessian, dtype=float)

    @classmethod
    def variable(cls, value, index: int, dim: int) -> Jet2:
        value = np.asarray(value, dtype=float)
        grad = np.zeros(value.shape + (dim,))
        grad[..., index] = 1.0
        return cls(value, grad, np.zeros(value.shape + (dim, dim)))

    @classmethod
    def linear(cls, value, gradient) -> Jet2:
        """Jet of an affine function: given value and constant gradient."""
        value = np.asarray(value, dtype=float)
        gradient = np.broadcast_to(np.asarray(gradient, dtype=float), value.shape + np.shape(gradient)[-1:])
        d = gradient.shape[-1]
        return cls(value, np.array(gradient), np.zeros(value.shape + (d, d)))

    @classmethod
    def constant(cls, value, dim: int) -> Jet2:
        value = np.asarray(value, dtype=float)
        return cls(value, np.zeros(value.shape + (dim,)), np.zeros(value.shape + (dim, dim)))

    @property
    def dim(self) -> int:
        return self.gradient.shape[-1]

    def __repr__(self) -> str:
        return f"Jet2(value={self.value!r}, gradient={self.gradient!r}, hessian={self.hessian!r})"

    def _chain(self, f0, f1, f2) -> Jet2:
        """Compose with a scalar function given its value and two derivatives at self.value."""
        f1 = np.asarray(f1, dtype=float)
        f2 = np.asarray(f2, dtype=float)
        grad = f1[..., None] * self.gradient
        hess = f1[..., None, None] * self.hessian + f2[..., None, None] * _outer(self.gradient, self.gradient)
        return Jet2(f0, grad, hess)

    # arithmetic -----------------------------------------------------------

    def __neg__(self) -> Jet2:
        return Jet2(-self.value, -self.gradient, -self.hessian)

    def __pos__(self) -> Jet2:
        return self

    def __add__(self, other) -> Jet2:
        if isinstance(other, Jet2):
            return Jet2(self.value + other.value, self.gradient + other.gradient, self.hessian + other.hessian)
        other = np.asarray(other, dtype=float)
        value = self.value + other
        return Jet2(value, np.broadcast_to(self.gradient, value.shape + (self.dim,)),
                    np.broadcast_to(self.hessian, value.shape + (self.dim, self.dim)))

    __radd__ = __add__

    def __sub__(self, other) -> Jet2:
        return self + (-other)

    def __rsub__(self, other) -> Jet2:
        return (-self) + other

    def __mul__(self, other) -> Jet2:
        if isinstance(other, Jet2):
            u, v = self, other
            value = u.value * v.value
            grad = u.value[..., None] * v.gradient + v.value[..., None] * u.gradient
            cross = _outer(u.gradient, v.gradient)
            hess = (u.value[..., None, None] * v.hessian + v.value[..., None, None] * u.hessian
                    + cross + np.swapaxes(cross, -1, -2))
            return Jet2(value, grad, hess)
        c = np.asarray(other, dtype=float)
        return Jet2(self.value * c, self.gradient * c[..., None], self.hessian * c[..., None, None])

    __rmul__ = __mul__

    def reciprocal(self) -> Jet2:
        v = self.value
        if np.any(v == 0.0):
            raise DomainError("division by zero")
        inv = 1.0 / v
        return self._chain(inv, -inv * inv, 2.0 * inv * inv * inv)

    def __truediv__(self, other) -> Jet2:
        if isinstance(other, Jet2):
            return self * other.reciprocal()
        c = np.asarray(other, dtype=float)
        if np.any(c == 0.0):
            raise DomainError("division by zero")
        return self * (1.0 / c)

    def __rtruediv__(self, other) -> Jet2:
        return self.reciprocal() * other

    def __pow__(self, exponent) -> Jet2:
        if isinstance(exponent, Jet2):
            return exp(exponent * log(self))
        e = float(exponent)
        v = self.value
        if e == int(e):
            n = int(e)
            if n == 0:
                return Jet2.constant(np.ones_like(v), self.dim)
            if n < 0 and np.any(v == 0.0):
                raise DomainError("division by zero")
            f0 = v ** n
            f1 = n * v ** (n - 1) if n != 1 else np.ones_like(v)
            f2 = n * (n - 1) * v ** (n - 2) if n not in (0, 1) else np.zeros_like(v)
            return self._chain(f0, f1, f2)
        if np.any(v < 0.0) or (e < 2.0 and np.any(v == 0.0)):
            raise DomainError("non-integer power of a non-positive base")
        return self._chain(v ** e, e * v ** (e - 1.0), e * (e - 1.0) * v ** (e - 2.0))

    def __rpow__(self, base) -> Jet2:
        return exp(self * np.log(float(base)))


# elementary functions -------------------------------------------------------
# Each accepts a Jet2 or a plain number/array.


def sin(a):
    if not isinstance(a, Jet2):
        return np.sin(a)
    s, c = np.sin(a.value), np.cos(a.value)
    return a._chain(s, c, -s)


def cos(a):
    if not isinstance(a, Jet2):
        return np.cos(a)
    s, c = np.sin(a.value), np.cos(a.value)
    return a._chain(c, -s, -c)


def exp(a):
    if not isinstance(a, Jet2):
        return np.exp(a)
    e = np.exp(a.value)
    return a._chain(e, e, e)


def log(a):
    if not isinstance(a, Jet2):
        if np.any(np.asarray(a) <= 0.0):
            raise DomainError("log of a non-positive value")
        return np.log(a)
    v = a.value
    if np.any(v <= 0.0):
        raise DomainError("log of a non-positive value")
    return a._chain(np.log(v), 1.0 / v, -1.0 / (v * v))


def sqrt(a):
    if not isinstance(a, Jet2):
        if np.any(np.asarray(a) < 0.0):
            raise DomainError("sqrt of a negative value")
        return np.sqrt(a)
    v = a.value
    if np.any(v <= 0.0):
        # the derivative is unbounded at 0
        raise DomainError("sqrt of a non-positive value")
    r = np.sqrt(v)
    return a._chain(r, 0.5 / r, -0.25 / (r * v))


def tanh(a):
    if not isinstance(a, Jet2):
        return np.tanh(a)
    t = np.tanh(a.value)
    d = 1.0 - t * t
    return a._chain(t, d, -2.0 * t * d)


def value_of(a):
    return a.value if isinstance(a, Jet2) else np.asarray(a, dtype=float)


def seed(values, dim: int | None = None, offset: int = 0) -> list[Jet2]:
    """Independent variables: ``values[..., i]`` becomes variable ``offset + i``."""
    values = np.asarray(values, dtype=float)
    k = values.shape[-1]
    dim = k + offset if dim is None else dim
    return [Jet2.variable(values[..., i], offset + i, dim) for i in range(k)]
