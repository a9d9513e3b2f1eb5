"""Closed-form scalar functions used for coefficients, data and manufactured solutions.

Each entry evaluates on coordinate arrays ``(x1, x2[, x3])`` and knows its
own gradient and Hessian, which is all that manufacturing a right-hand side
``f = -d_i(a_ij d_j u) + q u`` requires.  Specs are strings of the form
``name:p1,p2,...`` (axes are 1-based in specs, 0-based internally).
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

TWO_PI = 2.0 * np.pi


class CatalogError(ValueError):
    pass


class ScalarFunction:
    name = "?"

    def __call__(self, *x):
        raise NotImplementedError

    def gradient(self, *x) -> list:
        raise NotImplementedError

    def hessian(self, *x) -> list:
        raise NotImplementedError

    def spec(self) -> str:
        raise NotImplementedError


def _zeros(x):
    return np.zeros(np.broadcast(*x).shape)


@dataclass(frozen=True)
class Constant(ScalarFunction):
    value: float
    name = "const"

    def __call__(self, *x):
        return np.full(np.broadcast(*x).shape, float(self.value))

    def gradient(self, *x):
        return [_zeros(x) for _ in x]

    def hessian(self, *x):
        return [[_zeros(x) for _ in x] for _ in x]

    def spec(self):
        return f"const:{self.value!r}"


@dataclass(frozen=True)
class Sine(ScalarFunction):
    """``offset + amp * sin(2 pi freq x_axis)``."""

    offset: float
    amp: float
    freq: float
    axis: int
    name = "sin"

    def __call__(self, *x):
        return self.offset + self.amp * np.sin(TWO_PI * self.freq * x[self.axis]) + 0.0 * _zeros(x)

    def gradient(self, *x):
        k = TWO_PI * self.freq
        g = [_zeros(x) for _ in x]
        g[self.axis] = g[self.axis] + self.amp * k * np.cos(k * x[self.axis])
        return g

    def hessian(self, *x):
        k = TWO_PI * self.freq
        hs = [[_zeros(x) for _ in x] for _ in x]
        hs[self.axis][self.axis] = hs[self.axis][self.axis] - self.amp * k * k * np.sin(k * x[self.axis])
        return hs

    def spec(self):
        return f"sin:{self.offset!r},{self.amp!r},{self.freq!r},{self.axis + 1}"


@dataclass(frozen=True)
class Polynomial(ScalarFunction):
    """``sum_k coeffs[k] * x_axis**k``."""

    axis: int
    coeffs: tuple
    name = "poly"

    def _eval(self, c, t):
        return np.polynomial.polynomial.polyval(t, c) if len(c) else 0.0 * t

    def __call__(self, *x):
        return self._eval(self.coeffs, x[self.axis]) + _zeros(x)

    def gradient(self, *x):
        d = np.polynomial.polynomial.polyder(self.coeffs) if len(self.coeffs) > 1 else ()
        g = [_zeros(x) for _ in x]
        g[self.axis] = g[self.axis] + self._eval(d, x[self.axis])
        return g

    def hessian(self, *x):
        d = np.polynomial.polynomial.polyder(self.coeffs, 2) if len(self.coeffs) > 2 else ()
        hs = [[_zeros(x) for _ in x] for _ in x]
        hs[self.axis][self.axis] = hs[self.axis][self.axis] + self._eval(d, x[self.axis])
        return hs

    def spec(self):
        return "poly:" + ",".join([str(self.axis + 1)] + [repr(float(c)) for c in self.coeffs])


@dataclass(frozen=True)
class SineProduct(ScalarFunction):
    """``amp * prod_i sin(pi x_i)``, the lowest Dirichlet mode of the box."""

    amp: float = 1.0
    name = "sinprod"

    def __call__(self, *x):
        return self.amp * np.prod([np.sin(np.pi * t) for t in x], axis=0)

    def gradient(self, *x):
        s = [np.sin(np.pi * t) for t in x]
        c = [np.cos(np.pi * t) for t in x]
        out = []
        for i in range(len(x)):
            term = self.amp * np.pi * c[i]
            for k in range(len(x)):
                if k != i:
                    term = term * s[k]
            out.append(term)
        return out

    def hessian(self, *x):
        s = [np.sin(np.pi * t) for t in x]
        c = [np.cos(np.pi * t) for t in x]
        d = len(x)
        hs = [[None] * d for _ in range(d)]
        for i in range(d):
            for j in range(d):
                term = self.amp * np.pi**2 * (-s[i] if i == j else c[i] * c[j])
                for k in range(d):
                    if k != i and k != j:
                        term = term * s[k]
                hs[i][j] = term
        return hs

    def spec(self):
        return f"sinprod:{self.amp!r}"


@dataclass(frozen=True)
class Bubble(ScalarFunction):
    """``amp * prod_i x_i (1 - x_i) * exp(x_1)``; smooth, zero on the box surface."""

    amp: float = 1.0
    name = "bubble"

    def _factors(self, x):
        f = [t * (1 - t) for t in x]
        df = [1 - 2 * t for t in x]
        ddf = [-2.0 + 0 * t for t in x]
        e = np.exp(x[0])
        f[0], df[0], ddf[0] = f[0] * e, df[0] * e + f[0] * e, ddf[0] * e + 2 * df[0] * e + f[0] * e
        return f, df, ddf

    def __call__(self, *x):
        f, _, _ = self._factors(x)
        return self.amp * np.prod(f, axis=0)

    def gradient(self, *x):
        f, df, _ = self._factors(x)
        out = []
        for i in range(len(x)):
            term = self.amp * df[i]
            for k in range(len(x)):
                if k != i:
                    term = term * f[k]
            out.append(term)
        return out

    def hessian(self, *x):
        f, df, ddf = self._factors(x)
        d = len(x)
        hs = [[None] * d for _ in range(d)]
        for i in range(d):
            for j in range(d):
                term = self.amp * (ddf[i] if i == j else df[i] * df[j])
                for k in range(d):
                    if k != i and k != j:
                        term = term * f[k]
                hs[i][j] = term
        return hs

    def spec(self):
        return f"bubble:{self.amp!r}"


def _floats(params, name, count=None):
    try:
        vals = [float(p) for p in params]
    except ValueError as exc:
        raise CatalogError(f"{name}: non-numeric parameter in {params}") from exc
    if count is not None and len(vals) != count:
        raise CatalogError(f"{name} takes {count} parameters, got {len(vals)}")
    return vals


def _axis(value, dim):
    axis = int(value) - 1
    if value != int(value) or not 0 <= axis < dim:
        raise CatalogError(f"axis {value} out of range for dim {dim}")
    return axis


def parse_function(text: str, dim: int) -> ScalarFunction:
    """Parse ``name:p1,p2,...`` into a catalog function."""
    name, _, rest = text.strip().partition(":")
    name = name.strip().lower()
    params = [p for p in (s.strip() for s in rest.split(",")) if p]
    if name == "const":
        return Constant(*_floats(params, name, 1))
    if name == "sin":
        off, amp, freq, ax = _floats(params, name, 4)
        return Sine(off, amp, freq, _axis(ax, dim))
    if name == "poly":
        vals = _floats(params, name)
        if len(vals) < 2:
            raise CatalogError("poly needs an axis and at least one coefficient")
        return Polynomial(_axis(vals[0], dim), tuple(vals[1:]))
    if name == "sinprod":
        return SineProduct(*(_floats(params, name) or [1.0]))
    if name == "bubble":
        return Bubble(*(_floats(params, name) or [1.0]))
    raise CatalogError(f"unknown catalog function {name!r}")


def sup_gradient(func: ScalarFunction, coords) -> float:
    g = func.gradient(*coords)
    return float(np.max(np.sqrt(sum(gi**2 for gi in g))))
