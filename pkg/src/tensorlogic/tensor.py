"""Named-index tensors and the primitive operations equations reduce to.

Every tensor equation is evaluated as a join of its factors, a projection
onto the left-hand side's indices and an optional elementwise nonlinearity.
This module holds those primitives plus normalization and concatenation.

Real values are float64.  Boolean tensors are usually kept as sparse
coordinate sets; dense tensors are read-only numpy arrays.
"""

from __future__ import annotations

import math
import string
from dataclasses import dataclass, field
from typing import Iterable, Mapping, Sequence

import numpy as np

REAL = "real"
BOOL = "bool"

#: Densify a sparse result when more than this fraction of cells is nonzero.
DENSIFY_FILL_RATIO = 0.25


class TensorError(Exception):
    """Base class for tensor-level failures."""


class DomainMismatchError(TensorError):
    pass


class UnknownIndexError(TensorError):
    pass


class NumericError(TensorError):
    pass


@dataclass(frozen=True)
class IndexDomain:
    """A finite index range, optionally labelled by interned symbols."""

    name: str
    cardinality: int
    symbols: tuple = ()

    def __post_init__(self):
        if self.cardinality < 0:
            raise ValueError(f"domain {self.name!r}: negative cardinality")
        syms = tuple(self.symbols)
        object.__setattr__(self, "symbols", syms)
        if len(set(syms)) != len(syms):
            raise ValueError(f"domain {self.name!r}: duplicate symbols")
        if len(syms) > self.cardinality:
            raise ValueError(
                f"domain {self.name!r}: {len(syms)} symbols exceed cardinality {self.cardinality}"
            )

    def index_of(self, symbol) -> int:
        if isinstance(symbol, (int, np.integer)):
            if not 0 <= symbol < self.cardinality:
                raise IndexError(f"{symbol} out of range for domain {self.name!r}")
            return int(symbol)
        try:
            return self.symbols.index(symbol)
        except ValueError:
            raise KeyError(f"unknown constant {symbol!r} in domain {self.name!r}") from None

    def label(self, i: int):
        """Symbol for position ``i`` if one was interned, else the integer."""
        return self.symbols[i] if i < len(self.symbols) else i

    def compatible(self, other: "IndexDomain") -> bool:
        return self.cardinality == other.cardinality and self.symbols == other.symbols


def _as_domain(name: str, dom) -> IndexDomain:
    if isinstance(dom, IndexDomain):
        return dom
    return IndexDomain(name, int(dom))


class TensorValue:
    """Immutable tensor over named indices, stored dense or sparse.

    Sparse storage maps coordinate tuples to nonzero values; every unlisted
    coordinate is 0.
    """

    __slots__ = ("indices", "domains", "dtype", "_dense", "_coords")

    def __init__(self, indices, domains, dtype=REAL, dense=None, coords=None):
        indices = tuple(indices)
        if len(set(indices)) != len(indices):
            raise ValueError(f"repeated index name in {indices}")
        domains = tuple(_as_domain(n, d) for n, d in zip(indices, domains))
        if len(domains) != len(indices):
            raise ValueError("one domain per index required")
        if dtype not in (REAL, BOOL):
            raise ValueError(f"unknown dtype {dtype!r}")
        if (dense is None) == (coords is None):
            raise ValueError("exactly one of dense/coords must be given")
        shape = tuple(d.cardinality for d in domains)
        if dense is not None:
            arr = np.array(dense, dtype=np.float64)
            if arr.shape != shape:
                raise ValueError(f"array shape {arr.shape} does not match domains {shape}")
            if dtype == BOOL and not np.isin(arr, (0.0, 1.0)).all():
                raise ValueError("boolean tensor holds values outside {0,1}")
            arr.setflags(write=False)
            coords = None
        else:
            arr = None
            clean = {}
            for c, v in coords.items():
                c = tuple(int(x) for x in c)
                if len(c) != len(shape) or any(not 0 <= x < n for x, n in zip(c, shape)):
                    raise ValueError(f"coordinate {c} outside shape {shape}")
                v = float(v)
                if dtype == BOOL and v not in (0.0, 1.0):
                    raise ValueError("boolean tensor holds values outside {0,1}")
                if v != 0.0:
                    clean[c] = v
            coords = dict(sorted(clean.items()))
        object.__setattr__(self, "indices", indices)
        object.__setattr__(self, "domains", domains)
        object.__setattr__(self, "dtype", dtype)
        object.__setattr__(self, "_dense", arr)
        object.__setattr__(self, "_coords", coords)

    def __setattr__(self, key, value):
        raise AttributeError("TensorValue is immutable")

    # construction helpers

    @classmethod
    def from_array(cls, array, indices=None, domains=None, dtype=REAL):
        arr = np.asarray(array, dtype=np.float64)
        if indices is None:
            indices = [f"i{k}" for k in range(arr.ndim)]
        if domains is None:
            domains = arr.shape
        return cls(indices, domains, dtype, dense=arr)

    @classmethod
    def from_coords(cls, coords, indices, domains, dtype=BOOL):
        if not isinstance(coords, Mapping):
            coords = {tuple(c): 1.0 for c in coords}
        return cls(indices, domains, dtype, coords=coords)

    @classmethod
    def scalar(cls, value: float):
        return cls((), (), REAL, dense=np.array(float(value)))

    @classmethod
    def zeros(cls, indices, domains, dtype=REAL, sparse=False):
        if sparse:
            return cls(indices, domains, dtype, coords={})
        shape = tuple(_as_domain(n, d).cardinality for n, d in zip(indices, domains))
        return cls(indices, domains, dtype, dense=np.zeros(shape))

    # views

    @property
    def shape(self):
        return tuple(d.cardinality for d in self.domains)

    @property
    def rank(self):
        return len(self.indices)

    @property
    def is_sparse(self):
        return self._coords is not None

    @property
    def is_bool(self):
        return self.dtype == BOOL

    @property
    def array(self) -> np.ndarray:
        """Dense read-only ndarray (materialized for sparse tensors)."""
        if self._dense is not None:
            return self._dense
        arr = np.zeros(self.shape)
        if self._coords and not self.shape:
            arr[()] = self._coords[()]
        elif self._coords:
            idx = np.array(list(self._coords.keys()), dtype=np.int64)
            arr[tuple(idx.T)] = list(self._coords.values())
        arr.setflags(write=False)
        return arr

    def entries(self):
        """Sorted ``(coord, value)`` pairs of the nonzero elements."""
        if self._coords is not None:
            return list(self._coords.items())
        arr = self._dense
        nz = np.argwhere(arr != 0)
        return [(tuple(int(x) for x in c), float(arr[tuple(c)])) for c in nz]

    @property
    def nnz(self) -> int:
        if self._coords is not None:
            return len(self._coords)
        return int(np.count_nonzero(self._dense))

    @property
    def size(self) -> int:
        return int(np.prod(self.shape, dtype=np.int64)) if self.shape else 1

    def fill_ratio(self) -> float:
        return self.nnz / self.size if self.size else 0.0

    def to_dense(self) -> "TensorValue":
        if self._dense is not None:
            return self
        return TensorValue(self.indices, self.domains, self.dtype, dense=self.array)

    def to_sparse(self) -> "TensorValue":
        if self._coords is not None:
            return self
        return TensorValue(self.indices, self.domains, self.dtype, coords=dict(self.entries()))

    def compact(self, threshold: float = DENSIFY_FILL_RATIO) -> "TensorValue":
        """Pick storage by fill ratio: sparse at or below ``threshold``."""
        if self.fill_ratio() > threshold:
            return self.to_dense()
        return self.to_sparse()

    def rename(self, indices) -> "TensorValue":
        indices = tuple(indices)
        if self._coords is not None:
            return TensorValue(indices, self.domains, self.dtype, coords=self._coords)
        return TensorValue(indices, self.domains, self.dtype, dense=self._dense)

    def transpose(self, order) -> "TensorValue":
        """Reorder axes to the index names in ``order``."""
        order = tuple(order)
        if order == self.indices:
            return self
        perm = [self.indices.index(n) for n in order]
        doms = [self.domains[p] for p in perm]
        if self._coords is not None:
            coords = {tuple(c[p] for p in perm): v for c, v in self._coords.items()}
            return TensorValue(order, doms, self.dtype, coords=coords)
        return TensorValue(order, doms, self.dtype, dense=self._dense.transpose(perm))

    def item(self) -> float:
        if self.rank:
            raise ValueError("item() needs a rank-0 tensor")
        return float(self.array)

    def domain_of(self, name: str) -> IndexDomain:
        return self.domains[self.indices.index(name)]

    def as_relation(self):
        """Set of label tuples for the nonzero elements."""
        return {
            tuple(d.label(i) for d, i in zip(self.domains, c)) for c, _ in self.entries()
        }

    def __repr__(self):
        kind = "sparse" if self.is_sparse else "dense"
        idx = ",".join(f"{n}:{d.cardinality}" for n, d in zip(self.indices, self.domains))
        return f"TensorValue<{self.dtype} {kind} [{idx}] nnz={self.nnz}>"


# ---------------------------------------------------------------------------
# nonlinearities

ELEMENTWISE = ("identity", "step", "sigmoid", "relu", "exp", "sqrt", "power", "sin", "cos", "log", "tanh")
NORMALIZING = ("softmax", "lnorm")
LNORM_EPS = 1e-5


@dataclass(frozen=True)
class NonlinearitySpec:
    kind: str = "identity"
    temperature: float | None = None
    normalized: str | None = None
    exponent: float | None = None

    def __post_init__(self):
        if self.kind not in ELEMENTWISE + NORMALIZING:
            raise ValueError(f"unknown nonlinearity {self.kind!r}")
        if self.temperature is not None:
            if self.kind != "sigmoid":
                raise ValueError("temperature applies to sigmoid only")
            if self.temperature <= 0:
                raise ValueError("temperature must be positive")
        if self.kind == "power" and self.exponent is None:
            raise ValueError("power needs an exponent")

    @property
    def is_normalizing(self):
        return self.kind in NORMALIZING


IDENTITY = NonlinearitySpec()


def sigmoid(x, temperature: float | None = None):
    x = np.asarray(x, dtype=np.float64)
    if temperature is not None:
        x = x / temperature
    # split on sign to avoid overflow in exp
    out = np.empty_like(x)
    pos = x >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-x[pos]))
    ex = np.exp(x[~pos])
    out[~pos] = ex / (1.0 + ex)
    return out


def step(x):
    return (np.asarray(x) > 0).astype(np.float64)


def elementwise(spec: NonlinearitySpec, x: np.ndarray) -> np.ndarray:
    k = spec.kind
    if k == "identity":
        return np.asarray(x, dtype=np.float64)
    if k == "step":
        return step(x)
    if k == "sigmoid":
        return sigmoid(x, spec.temperature)
    if k == "relu":
        return np.maximum(x, 0.0)
    if k == "exp":
        return np.exp(x)
    if k == "sqrt":
        return np.sqrt(x)
    if k == "power":
        return np.power(x, spec.exponent)
    if k == "sin":
        return np.sin(x)
    if k == "cos":
        return np.cos(x)
    if k == "log":
        return np.log(x)
    if k == "tanh":
        return np.tanh(x)
    raise ValueError(f"{k} is not elementwise")


def elementwise_derivative(spec: NonlinearitySpec, x: np.ndarray, surrogate_t: float | None = None):
    """Derivative of an elementwise nonlinearity at pre-activation ``x``.

    ``step`` has derivative 0; with ``surrogate_t`` the temperature
    sigmoid's derivative stands in for it.
    """
    k = spec.kind
    x = np.asarray(x, dtype=np.float64)
    if k == "identity":
        return np.ones_like(x)
    if k == "step":
        if surrogate_t is None:
            return np.zeros_like(x)
        s = sigmoid(x, surrogate_t)
        return s * (1 - s) / surrogate_t
    if k == "sigmoid":
        t = spec.temperature or 1.0
        s = sigmoid(x, spec.temperature)
        return s * (1 - s) / t
    if k == "relu":
        return (x > 0).astype(np.float64)
    if k == "exp":
        return np.exp(x)
    if k == "sqrt":
        return 0.5 / np.sqrt(x)
    if k == "power":
        n = spec.exponent
        return n * np.power(x, n - 1)
    if k == "sin":
        return np.cos(x)
    if k == "cos":
        return -np.sin(x)
    if k == "log":
        return 1.0 / x
    if k == "tanh":
        return 1.0 - np.tanh(x) ** 2
    raise ValueError(f"{k} is not elementwise")


def apply_unary(t: TensorValue, f: NonlinearitySpec) -> TensorValue:
    """Apply an elementwise nonlinearity; ``step`` yields a Boolean tensor."""
    if f.is_normalizing:
        raise ValueError(f"{f.kind} needs normalize(), not apply_unary()")
    if f.kind == "sqrt":
        arr = t.array
        bad = np.argwhere(arr < 0)
        if len(bad):
            c = tuple(int(x) for x in bad[0])
            raise NumericError(f"sqrt of negative element {arr[c]} at {c}")
    dtype = BOOL if f.kind == "step" else REAL
    if t.is_sparse and _zero_preserving(f):
        coords = {c: float(elementwise(f, np.array(v))) for c, v in t.entries()}
        return TensorValue(t.indices, t.domains, dtype, coords=coords)
    out = elementwise(f, t.array)
    return TensorValue(t.indices, t.domains, dtype, dense=out)


def _zero_preserving(f: NonlinearitySpec) -> bool:
    if f.kind in ("identity", "step", "relu", "sqrt", "sin", "tanh"):
        return True
    return f.kind == "power" and f.exponent > 0


def normalize(t: TensorValue, over: str, kind: str, eps: float = LNORM_EPS) -> TensorValue:
    """Softmax or layer-normalize every slice along index ``over``."""
    if over not in t.indices:
        raise UnknownIndexError(f"normalized index {over!r} not in {t.indices}")
    axis = t.indices.index(over)
    return TensorValue(t.indices, t.domains, REAL, dense=normalize_array(t.array, axis, kind, eps))


def normalize_array(x: np.ndarray, axis: int, kind: str, eps: float = LNORM_EPS) -> np.ndarray:
    if kind == "softmax":
        if x.shape[axis] == 0:
            return np.zeros_like(x)
        z = x - x.max(axis=axis, keepdims=True)
        e = np.exp(z)
        return e / e.sum(axis=axis, keepdims=True)
    if kind == "lnorm":
        mu = x.mean(axis=axis, keepdims=True)
        var = ((x - mu) ** 2).mean(axis=axis, keepdims=True)
        return (x - mu) / np.sqrt(var + eps)
    raise ValueError(f"unknown normalization {kind!r}")


def lnorm_inv_std(x: np.ndarray, axis: int, eps: float = LNORM_EPS) -> np.ndarray:
    """1/sqrt(var + eps) along ``axis``, with that axis removed."""
    mu = x.mean(axis=axis, keepdims=True)
    var = ((x - mu) ** 2).mean(axis=axis)
    return 1.0 / np.sqrt(var + eps)


# ---------------------------------------------------------------------------
# join / projection

def _check_shared(u: TensorValue, v: TensorValue):
    for n in set(u.indices) & set(v.indices):
        du, dv = u.domain_of(n), v.domain_of(n)
        if not du.compatible(dv):
            raise DomainMismatchError(
                f"index {n!r}: domain {du.name}({du.cardinality}) vs {dv.name}({dv.cardinality})"
            )


def tensor_join(u: TensorValue, v: TensorValue) -> TensorValue:
    """Join on shared index names: the product of elements agreeing on them.

    The result's indices are u's followed by v's unshared ones, so its rank
    is ``rank(u) + rank(v) - #shared``.
    """
    _check_shared(u, v)
    out = list(u.indices) + [n for n in v.indices if n not in u.indices]
    doms = list(u.domains) + [d for n, d in zip(v.indices, v.domains) if n not in u.indices]
    dtype = BOOL if u.is_bool and v.is_bool else REAL
    if u.is_sparse and v.is_sparse:
        coords = _sparse_join(u, v, out)
        return TensorValue(out, doms, dtype, coords=coords)
    arr = contract_arrays([u.array, v.array], [u.indices, v.indices], out)
    return TensorValue(out, doms, dtype, dense=arr)


def _sparse_join(u, v, out):
    shared = [n for n in u.indices if n in v.indices]
    u_pos = [u.indices.index(n) for n in shared]
    v_pos = [v.indices.index(n) for n in shared]
    v_rest = [k for k, n in enumerate(v.indices) if n not in u.indices]
    buckets = {}
    for c, val in v.entries():
        buckets.setdefault(tuple(c[p] for p in v_pos), []).append((c, val))
    coords = {}
    for cu, x in u.entries():
        for cv, y in buckets.get(tuple(cu[p] for p in u_pos), ()):
            coords[cu + tuple(cv[k] for k in v_rest)] = x * y
    return coords


def tensor_project(t: TensorValue, keep: Sequence[str], op: str = "sum") -> TensorValue:
    """Reduce away every index not in ``keep`` with sum, max or avg."""
    keep = tuple(keep)
    for n in keep:
        if n not in t.indices:
            raise UnknownIndexError(f"cannot keep unknown index {n!r}; tensor has {t.indices}")
    if op not in ("sum", "max", "avg"):
        raise ValueError(f"unknown projection {op!r}")
    doms = [t.domain_of(n) for n in keep]
    if t.is_sparse and op == "sum":
        pos = [t.indices.index(n) for n in keep]
        acc = {}
        for c, v in t.entries():
            key = tuple(c[p] for p in pos)
            acc[key] = acc.get(key, 0.0) + v
        return TensorValue(keep, doms, REAL, coords=acc)
    arr = reduce_array(t.array, t.indices, keep, op)
    return TensorValue(keep, doms, REAL, dense=arr)


def reduce_array(arr: np.ndarray, names: Sequence[str], keep: Sequence[str], op: str) -> np.ndarray:
    axes = tuple(k for k, n in enumerate(names) if n not in keep)
    remaining = [n for n in names if n in keep]
    if not axes:
        red = arr
    else:
        count = int(np.prod([arr.shape[a] for a in axes]))
        if count == 0:
            red = np.zeros([arr.shape[k] for k, n in enumerate(names) if n in keep])
        elif op == "sum":
            red = arr.sum(axis=axes)
        elif op == "max":
            red = arr.max(axis=axes)
        else:
            red = arr.sum(axis=axes) / count
    perm = [remaining.index(n) for n in keep]
    return np.transpose(red, perm) if perm else np.asarray(red)


_LETTERS = string.ascii_letters


def contract_arrays(arrays, names_list, out, op="sum") -> np.ndarray:
    """Join dense arrays on shared names and project onto ``out``."""
    symbols = {}
    for names in names_list:
        for n in names:
            if n not in symbols:
                symbols[n] = _LETTERS[len(symbols)]
    for n in out:
        if n not in symbols:
            raise UnknownIndexError(f"output index {n!r} appears in no factor")
    subs = ",".join("".join(symbols[n] for n in names) for names in names_list)
    if op == "sum":
        spec = subs + "->" + "".join(symbols[n] for n in out)
        if len(arrays) <= 2 and sum(a.size for a in arrays) < 65536:
            return np.einsum(spec, *arrays)
        return np.einsum(spec, *arrays, optimize="greedy")
    all_names = list(symbols)
    joined = np.einsum(subs + "->" + "".join(symbols[n] for n in all_names), *arrays)
    return reduce_array(joined, all_names, out, op)


def contract(factors: Sequence[TensorValue], out: Sequence[str], op: str = "sum") -> TensorValue:
    """Multi-way join of ``factors`` followed by projection onto ``out``.

    All-sparse inputs stay on the coordinate path; a single sparse factor
    among dense ones is handled by gathering along its nonzeros.
    """
    out = tuple(out)
    doms = {}
    for f in factors:
        for n, d in zip(f.indices, f.domains):
            if n in doms and not doms[n].compatible(d):
                raise DomainMismatchError(f"index {n!r}: inconsistent domains")
            doms.setdefault(n, d)
    out_doms = [doms[n] for n in out]
    sparse = [f for f in factors if f.is_sparse]
    if factors and len(sparse) == len(factors) and op == "sum":
        acc = factors[0]
        for f in factors[1:]:
            acc = tensor_join(acc, f)
        return tensor_project(acc, out, "sum")
    if len(sparse) == 1 and op == "sum" and len(factors) > 1:
        arr = _gather_contract(sparse[0], [f for f in factors if not f.is_sparse], out)
    else:
        arr = contract_arrays([f.array for f in factors], [f.indices for f in factors], out, op)
    return TensorValue(out, out_doms, REAL, dense=arr)


def _gather_contract(s: TensorValue, dense: Sequence[TensorValue], out) -> np.ndarray:
    """Sparse-times-dense contraction iterating only over ``s``'s nonzeros."""
    shape_out = []
    all_doms = dict(zip(s.indices, s.domains))
    for f in dense:
        all_doms.update(zip(f.indices, f.domains))
    shape_out = [all_doms[n].cardinality for n in out]
    ents = s.entries()
    if not ents:
        return np.zeros(shape_out)
    coords = np.array([c for c, _ in ents], dtype=np.int64).reshape(len(ents), s.rank)
    vals = np.array([v for _, v in ents])
    svars = list(s.indices)
    gathered, names = [vals], [("#z",)]
    for f in dense:
        hit = [n for n in f.indices if n in svars]
        if not hit:
            gathered.append(f.array)
            names.append(f.indices)
            continue
        rest = [n for n in f.indices if n not in svars]
        a = f.transpose(hit + rest).array
        idx = tuple(coords[:, svars.index(n)] for n in hit)
        gathered.append(a[idx])
        names.append(("#z",) + tuple(rest))
    lhs_s = [n for n in out if n in svars]
    lhs_d = [n for n in out if n not in svars]
    # every sparse var missing from the dense factors still indexes via #z
    if lhs_s:
        red = contract_arrays(gathered, names, ["#z"] + lhs_d)
        res = np.zeros([all_doms[n].cardinality for n in lhs_s + lhs_d])
        np.add.at(res, tuple(coords[:, svars.index(n)] for n in lhs_s), red)
        perm = [(lhs_s + lhs_d).index(n) for n in out]
        return np.transpose(res, perm)
    return contract_arrays(gathered, names, list(out))


def concat(t: TensorValue, merge: Sequence[str], into: str) -> TensorValue:
    """Flatten ``merge`` indices (row-major in listed order) into one index."""
    merge = tuple(merge)
    for n in merge:
        if n not in t.indices:
            raise UnknownIndexError(f"cannot merge unknown index {n!r}")
    rest = [n for n in t.indices if n not in merge]
    if into in rest:
        raise ValueError(f"merged index name {into!r} collides with a surviving index")
    first = min(t.indices.index(n) for n in merge)
    order = [n for n in t.indices if n not in merge]
    pos = sum(1 for n in t.indices[:first] if n not in merge)
    order = order[:pos] + list(merge) + order[pos:]
    arr = t.transpose(order).array
    size = int(np.prod([t.domain_of(n).cardinality for n in merge]))
    new_shape = arr.shape[:pos] + (size,) + arr.shape[pos + len(merge):]
    names = rest[:pos] + [into] + rest[pos:]
    doms = [t.domain_of(n) for n in rest[:pos]] + [IndexDomain(into, size)] + [
        t.domain_of(n) for n in rest[pos:]
    ]
    return TensorValue(names, doms, t.dtype, dense=arr.reshape(new_shape))


def allclose(a: TensorValue, b: TensorValue, rtol=1e-12, atol=1e-12) -> bool:
    if set(a.indices) != set(b.indices):
        return False
    b = b.transpose(a.indices)
    return a.shape == b.shape and np.allclose(a.array, b.array, rtol=rtol, atol=atol)
