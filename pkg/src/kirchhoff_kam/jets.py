"""First-order parameter jets: a value together with its gradient in sigma.

The whole engine evaluates parameter families at finitely many sample
points; every scalar quantity carries its exact d/dsigma alongside the
value so that C^1-style norms (|value| + |grad|_1) and divisor margins
are available without finite differencing.
"""

from __future__ import annotations

import numpy as np

__all__ = ["ParamJet", "jet_abs1"]


class ParamJet:
    """Complex scalar with exact first derivatives w.r.t. the parameter vector.

    Arithmetic follows the product/quotient/chain rules exactly (no
    truncation beyond first order, which is closed under these rules).
    """

    __slots__ = ("value", "grad")

    def __init__(self, value, grad=None, dim=None):
        self.value = complex(value)
        if grad is None:
            if dim is None:
                raise ValueError("ParamJet needs grad or dim")
            self.grad = np.zeros(dim, dtype=np.complex128)
        else:
            self.grad = np.asarray(grad, dtype=np.complex128).copy()

    @property
    def dim(self) -> int:
        return self.grad.shape[0]

    @classmethod
    def variable(cls, value, index: int, dim: int) -> "ParamJet":
        """The coordinate function sigma_index evaluated at `value`."""
        g = np.zeros(dim, dtype=np.complex128)
        g[index] = 1.0
        return cls(value, g)

    @classmethod
    def constant(cls, value, dim: int) -> "ParamJet":
        return cls(value, np.zeros(dim, dtype=np.complex128))

    def _coerce(self, other) -> "ParamJet":
        if isinstance(other, ParamJet):
            if other.dim != self.dim:
                raise ValueError("jet dimension mismatch")
            return other
        return ParamJet.constant(other, self.dim)

    def __add__(self, other):
        o = self._coerce(other)
        return ParamJet(self.value + o.value, self.grad + o.grad)

    __radd__ = __add__

    def __neg__(self):
        return ParamJet(-self.value, -self.grad)

    def __sub__(self, other):
        o = self._coerce(other)
        return ParamJet(self.value - o.value, self.grad - o.grad)

    def __rsub__(self, other):
        return self._coerce(other) - self

    def __mul__(self, other):
        o = self._coerce(other)
        return ParamJet(self.value * o.value, self.value * o.grad + o.value * self.grad)

    __rmul__ = __mul__

    def __truediv__(self, other):
        o = self._coerce(other)
        v = self.value / o.value
        return ParamJet(v, (self.grad - v * o.grad) / o.value)

    def __rtruediv__(self, other):
        return self._coerce(other) / self

    def conj(self) -> "ParamJet":
        return ParamJet(np.conj(self.value), np.conj(self.grad))

    def sqrt(self) -> "ParamJet":
        v = np.sqrt(complex(self.value))
        return ParamJet(v, self.grad / (2.0 * v))

    def abs1(self) -> float:
        """C^1 magnitude |value| + l1-norm of the gradient."""
        return abs(self.value) + float(np.sum(np.abs(self.grad)))

    @property
    def real(self) -> float:
        return self.value.real

    def __repr__(self):
        return f"ParamJet({self.value!r}, grad={self.grad.tolist()!r})"

    def to_array(self) -> np.ndarray:
        """Flat layout [value, grad...] used by the columnar series store."""
        out = np.empty(1 + self.dim, dtype=np.complex128)
        out[0] = self.value
        out[1:] = self.grad
        return out

    @classmethod
    def from_array(cls, a) -> "ParamJet":
        a = np.asarray(a, dtype=np.complex128)
        return cls(a[0], a[1:])


def jet_abs1(rows: np.ndarray) -> np.ndarray:
    """Vectorized C^1 magnitude for an (T, 1+dim) array of flat jets."""
    return np.abs(rows).sum(axis=1)
