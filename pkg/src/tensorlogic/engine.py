"""Forward and backward chaining over tensor equations.

Forward chaining treats the program as straight-line code and sweeps it
until no tensor changes.  Backward chaining treats each equation as a
function of the constants bound by the query, memoizes subqueries and
iterates cyclic components to a fixpoint.  Unbound tensor elements are 0.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass, field, replace
from pathlib import Path

import numpy as np

from .desugar import compile_program
from .domains import tensor_domains
from .parser import parse_query
from .syntax import (
    Const,
    Equation,
    IndexFn,
    Offset,
    Program,
    Query,
    ReadFile,
    Scaled,
    Slice,
    TensorRef,
    Term,
    Var,
    Window,
    WriteFile,
    arg_vars,
)
from .tensor import (
    BOOL,
    REAL,
    IndexDomain,
    NonlinearitySpec,
    NumericError,
    TensorValue,
    contract,
    elementwise,
    elementwise_derivative,
    lnorm_inv_std,
    normalize_array,
    reduce_array,
)
from .tensorio import read_tensor, read_text_tensor, write_tensor

log = logging.getLogger(__name__)


class EngineError(Exception):
    pass


class NonConvergenceError(EngineError):
    def __init__(self, sweeps, residual):
        super().__init__(f"no fixpoint after {sweeps} sweeps (residual {residual:.3g})")
        self.sweeps = sweeps
        self.residual = residual


class InconsistentEvidenceError(EngineError):
    pass


class UnknownConstantError(EngineError):
    pass


@dataclass
class FixpointConfig:
    max_sweeps: int = 1000
    epsilon: float = 0.0
    mode: str = "to-fixpoint"  # or "fixed"
    sweeps: int | None = None

    def __post_init__(self):
        if self.max_sweeps < 1:
            raise ValueError("max_sweeps must be positive")
        if self.epsilon < 0:
            raise ValueError("epsilon must be non-negative")
        if self.mode not in ("to-fixpoint", "fixed"):
            raise ValueError(f"unknown mode {self.mode!r}")
        if self.mode == "fixed" and not self.sweeps:
            raise ValueError("fixed mode needs a sweep count")


@dataclass
class Environment:
    bindings: dict = field(default_factory=dict)
    provenance: dict = field(default_factory=dict)
    # name -> (mask, values) of elements supplied as facts/inputs for tensors
    # that equations also extend
    seeds: dict = field(default_factory=dict)
    clamped: set = field(default_factory=set)
    sweeps: int = 0

    def copy(self):
        return Environment(dict(self.bindings), dict(self.provenance), dict(self.seeds), set(self.clamped), self.sweeps)

    def bind(self, name, value: TensorValue, provenance="computed"):
        self.bindings[name] = value
        self.provenance[name] = provenance

    def __getitem__(self, name) -> TensorValue:
        return self.bindings[name]

    def __contains__(self, name):
        return name in self.bindings

    def get(self, name, default=None):
        return self.bindings.get(name, default)


@dataclass
class QueryResult:
    target: TensorRef
    value: TensorValue
    free: tuple = ()

    @property
    def is_relation(self):
        return self.value.dtype == BOOL

    def tuples(self):
        rel = self.value.as_relation()
        if len(self.free) == 1:
            return {t[0] for t in rel}
        return rel

    def scalar(self) -> float:
        return self.value.item()

    def render(self) -> str:
        v = self.value
        if v.dtype == BOOL:
            if not self.free:
                return "1" if v.nnz else "0"
            items = sorted(self.tuples(), key=lambda x: tuple(map(str, x)) if isinstance(x, tuple) else str(x))
            if len(self.free) == 1:
                return "{" + ", ".join(str(x) for x in items) + "}"
            return "{" + ", ".join("(" + ", ".join(str(a) for a in t) + ")" for t in items) + "}"
        if v.rank == 0:
            return _fmt(v.item())
        return np.array2string(v.array, precision=6, separator=", ", threshold=10**6)


def _fmt(x: float) -> str:
    return repr(float(x)) if not float(x).is_integer() else str(int(x))


# ---------------------------------------------------------------------------
# helpers

def _axis_names(n):
    return tuple(f"i{k}" for k in range(n))


def virtual_slots(p: Program) -> dict:
    """tensor name -> position of its virtual (rolling-window) index."""
    out = {}
    for e in p.equations:
        for k, a in enumerate(e.lhs.args):
            if getattr(a, "virtual", False):
                out[e.lhs.name] = k
    return out


def storage_domains(p: Program, name: str, arity: int | None = None):
    doms = tensor_domains(p, name)
    if arity is not None and len(doms) < arity:
        raise EngineError(f"domains of {name!r} are unknown")
    vs = virtual_slots(p).get(name)
    if vs is not None:
        doms = doms[:vs] + doms[vs + 1:]
    return doms


def pad_to(t: TensorValue, doms) -> TensorValue:
    """Zero-pad (or relabel) ``t`` to the given slot domains."""
    names = _axis_names(len(doms))
    if len(doms) != t.rank:
        raise EngineError(f"rank {t.rank} tensor supplied for {len(doms)} slots")
    for d, n in zip(doms, t.shape):
        if n > d.cardinality:
            raise EngineError(f"supplied tensor has extent {n} > domain {d.name}({d.cardinality})")
    if t.is_sparse:
        return TensorValue(names, doms, t.dtype, coords=dict(t.entries()))
    arr = np.zeros([d.cardinality for d in doms])
    arr[tuple(slice(0, n) for n in t.shape)] = t.array
    return TensorValue(names, doms, t.dtype, dense=arr)


def _arith_eval(node, grids):
    k = node[0]
    if k == "num":
        return node[1]
    if k == "var":
        return grids[node[1]]
    if k == "neg":
        return -_arith_eval(node[1], grids)
    a, b = _arith_eval(node[1], grids), _arith_eval(node[2], grids)
    if k == "+":
        return a + b
    if k == "-":
        return a - b
    if k == "*":
        return a * b
    if k == "/":
        return a / b
    if k == "^":
        return np.power(a, b)
    raise EngineError(f"bad arithmetic node {k}")


# ---------------------------------------------------------------------------
# equation evaluation

@dataclass
class WriterRecord:
    """Forward-pass values kept for differentiation."""

    pre: np.ndarray
    covered: np.ndarray
    out: np.ndarray
    argmax: dict = field(default_factory=dict)  # term index -> mask over term vars
    avg_weight: dict = field(default_factory=dict)  # term index -> array over LHS coords
    term_vars: dict = field(default_factory=dict)


class Evaluator:
    """Evaluates equations of one compiled program against an Environment."""

    def __init__(self, program: Program, surrogate_t=None):
        self.p = program
        self.vslots = virtual_slots(program)
        self.eq_index = {id(e): k for k, e in enumerate(program.equations)}
        self.visits = {}
        self.surrogate_t = surrogate_t

    # --- domains ---

    def var_domains(self, eq: Equation) -> dict:
        k = self.eq_index.get(id(eq))
        if k is not None and k < len(self.p.equation_domains):
            return self.p.equation_domains[k]
        return self._fallback_domains(eq)

    def _fallback_domains(self, eq):
        out = {}
        for r in [eq.lhs] + eq.refs():
            doms = tensor_domains(self.p, r.name)
            for k, a in enumerate(r.args):
                if isinstance(a, (Var, Offset)) and k < len(doms):
                    out.setdefault(a.name if isinstance(a, Var) else a.var, doms[k])
        for v, d in self.p.var_domains.items():
            out.setdefault(v, d)
        return out

    def slot_domains(self, name):
        return tensor_domains(self.p, name)

    def lhs_shape(self, ref: TensorRef):
        doms = storage_domains(self.p, ref.name)
        return tuple(d.cardinality for d in doms)

    # --- operands ---

    def operand(self, ref: TensorRef, value: TensorValue | None, vdoms, slice_names, args=None):
        """Turn a bound tensor plus an argument list into (TensorValue over var names)."""
        args = ref.args if args is None else args
        sdoms = self.slot_domains(ref.name)
        vs = self.vslots.get(ref.name)
        if vs is not None and value is not None and value.rank == len(args) - 1 \
                and isinstance(args[vs], Var) and args[vs].virtual:
            # outside its recurrence a virtual index reads the current window
            args = args[:vs] + args[vs + 1:]
        if value is None:
            if len(sdoms) < len(args):
                raise EngineError(f"unknown shape for {ref.name}")
            value = TensorValue.zeros(_axis_names(len(args)), list(sdoms[: len(args)]))
        if value.rank != len(args):
            raise EngineError(f"{ref.name} has rank {value.rank} but is used with {len(args)} indices")
        sdoms = list(value.domains)
        if value.is_sparse and all(isinstance(a, (Var, Const)) for a in args):
            return self._sparse_operand(ref, value, args, sdoms)
        arr = value.array
        names = []
        axes = []
        for k, a in enumerate(args):
            dom = sdoms[k]
            if isinstance(a, Const):
                idx = self._const_index(ref, k, a.value, dom)
                if idx is None:
                    return None
                axes.append(("take", idx))
                continue
            if isinstance(a, Var):
                names.append(a.name)
                axes.append(("keep", None))
            elif isinstance(a, Offset):
                names.append(a.var)
                axes.append(("shift", (a.delta, vdoms[a.var].cardinality)))
            elif isinstance(a, Scaled):
                names.append(a.var)
                axes.append(("scale", (a.divisor, vdoms[a.var].cardinality)))
            elif isinstance(a, Window):
                names += [a.var, a.other]
                axes.append(("window", (vdoms[a.var].cardinality, vdoms[a.other].cardinality)))
            elif isinstance(a, Slice):
                nm = slice_names.pop(0) if slice_names else f"#slice{k}"
                names.append(nm)
                axes.append(("slice", (a.lo, a.hi)))
        # apply axis transforms from last to first so positions stay valid
        out = arr
        for k in reversed(range(len(axes))):
            kind, data = axes[k]
            if kind == "take":
                out = np.take(out, data, axis=k)
            elif kind == "shift":
                delta, n = data
                out = _shift(out, k, delta, n)
            elif kind == "scale":
                div, n = data
                out = np.take(out, np.arange(n) // div, axis=k)
            elif kind == "window":
                na, nb = data
                idx = np.arange(na)[:, None] + np.arange(nb)[None, :]
                valid = idx < out.shape[k]
                out = np.take(out, np.where(valid, idx, 0), axis=k)
                out = out * valid.reshape((1,) * k + valid.shape + (1,) * (out.ndim - k - 2))
            elif kind == "slice":
                lo, hi = data
                sl = [slice(None)] * out.ndim
                sl[k] = slice(lo, min(hi, out.shape[k]))
                out = out[tuple(sl)]
                if out.shape[k] < hi - lo:
                    pad = [(0, 0)] * out.ndim
                    pad[k] = (0, hi - lo - out.shape[k])
                    out = np.pad(out, pad)
        out, names = _diagonalize(out, names)
        doms = [vdoms.get(n) or IndexDomain(n, out.shape[i]) for i, n in enumerate(names)]
        doms = [d if d.cardinality == out.shape[i] else IndexDomain(d.name, out.shape[i]) for i, d in enumerate(doms)]
        return TensorValue(names, doms, value.dtype, dense=out)

    def _const_index(self, ref, k, c, dom):
        if isinstance(c, int):
            return c if 0 <= c < dom.cardinality else None
        try:
            return dom.index_of(c)
        except KeyError:
            raise UnknownConstantError(f"unknown constant {c!r} for {ref.name}") from None

    def _sparse_operand(self, ref, value, args, sdoms):
        fixed = {}
        for k, a in enumerate(args):
            if isinstance(a, Const):
                idx = self._const_index(ref, k, a.value, sdoms[k])
                if idx is None:
                    return None
                fixed[k] = idx
        var_pos = {}
        keep = []
        for k, a in enumerate(args):
            if isinstance(a, Var):
                if a.name in var_pos:
                    continue
                var_pos[a.name] = k
                keep.append(k)
        repeats = [(k, var_pos[a.name]) for k, a in enumerate(args) if isinstance(a, Var) and var_pos[a.name] != k]
        coords = {}
        for c, v in value.entries():
            if any(c[k] != i for k, i in fixed.items()):
                continue
            if any(c[k] != c[j] for k, j in repeats):
                continue
            key = tuple(c[k] for k in keep)
            coords[key] = coords.get(key, 0.0) + v
        names = [args[k].name for k in keep]
        doms = [sdoms[k] for k in keep]
        return TensorValue(names, doms, value.dtype, coords=coords)

    def index_fn(self, f: IndexFn, vdoms):
        names = list(f.vars)
        grids = {}
        for i, n in enumerate(names):
            shape = [1] * len(names)
            shape[i] = vdoms[n].cardinality
            grids[n] = np.arange(vdoms[n].cardinality, dtype=np.float64).reshape(shape)
        val = _arith_eval(f.expr, grids)
        val = np.broadcast_to(np.asarray(val, dtype=np.float64), [vdoms[n].cardinality for n in names])
        val = elementwise(NonlinearitySpec(f.func), val) if f.func != "identity" else np.array(val)
        return TensorValue(names, [vdoms[n] for n in names], REAL, dense=val)

    # --- terms ---

    def term_operands(self, term: Term, vdoms, fetch):
        ops = []
        slices = [f"#slice{k}" for k in range(8)]
        for f in term.factors:
            if isinstance(f, TensorRef):
                value, args = fetch(f)
                op = self.operand(f, value, vdoms, slices, args)
                if op is None:
                    return None
                ops.append(op)
            elif isinstance(f, IndexFn):
                ops.append(self.index_fn(f, vdoms))
            else:
                raise EngineError("nested nonlinearity reached the engine; desugar first")
        return ops

    def eval_writer(self, eq: Equation, fetch, record=False, lhs_args=None, sample=None, vdoms=None):
        """Evaluate one equation; returns (output array over LHS coords, record)."""
        vdoms = vdoms or self.var_domains(eq)
        self.visits[id(eq)] = self.visits.get(id(eq), 0) + 1
        lhs_args = eq.lhs.args if lhs_args is None else lhs_args
        if any(isinstance(a, Const) and not isinstance(a.value, int) for a in lhs_args):
            lhs_args = self._resolve_lhs(eq, lhs_args)
        lhs_vars = _unique([v for a in lhs_args for v in arg_vars(a)])
        lhs_vars += [f"#slice{k}" for k in range(sum(isinstance(a, Slice) for a in lhs_args))]
        shape = self._target_shape(eq, lhs_args)
        if eq.op == "concat":
            return self._eval_concat(eq, fetch, vdoms, lhs_vars, lhs_args, shape, record)
        placement = _Placement(lhs_args, lhs_vars, vdoms, shape)
        pre = np.zeros(shape)
        rec = WriterRecord(pre, placement.covered, None) if record else None
        for ti, term in enumerate(eq.terms):
            if not term.factors:
                arr = np.full([vdoms[v].cardinality for v in lhs_vars], term.coef)
                pre += placement.place(arr, "sum")
                continue
            ops = self.term_operands(term, vdoms, fetch)
            if ops is None:
                continue
            present = {n for o in ops for n in o.indices}
            out_names = [v for v in lhs_vars if v in present]
            if sample is not None:
                arr = self._sampled(ops, out_names, sample)
            else:
                arr = contract(ops, out_names, eq.op).array
            if len(out_names) < len(lhs_vars):
                arr = _broadcast(arr, out_names, lhs_vars, vdoms)
            placed = placement.place(arr, eq.op)
            pre += term.coef * placed
            if record and eq.op == "max":
                rec.argmax[ti], rec.term_vars[ti] = self._argmax_mask(ops, placement, term.coef)
            if record and eq.op == "avg":
                rec.avg_weight[ti] = placement.avg_weight(ops, lhs_vars)
        out = self.activate(eq, pre, placement.covered, lhs_args)
        if record:
            rec.pre = pre
            rec.out = out
        return out, rec

    def _resolve_lhs(self, eq, lhs_args):
        doms = list(self.slot_domains(eq.lhs.name))
        vs = self.vslots.get(eq.lhs.name)
        if vs is not None and len(lhs_args) < len(eq.lhs.args):
            del doms[vs]
        out = []
        for a, d in zip(lhs_args, doms):
            if isinstance(a, Const) and not isinstance(a.value, int):
                out.append(Const(self._const_index(eq.lhs, len(out), a.value, d)))
            else:
                out.append(a)
        return tuple(out)

    def _target_shape(self, eq, lhs_args):
        doms = self.slot_domains(eq.lhs.name)
        shape = []
        for k, a in enumerate(eq.lhs.args):
            if self.vslots.get(eq.lhs.name) == k and len(lhs_args) < len(eq.lhs.args):
                continue
            shape.append(doms[k].cardinality)
        return tuple(shape)

    def activate(self, eq, pre, covered, lhs_args):
        nl = eq.nonlinearity
        if nl.kind == "identity":
            return pre
        if nl.is_normalizing:
            axis = [k for k, a in enumerate(lhs_args) if isinstance(a, Var) and a.name == nl.normalized]
            if not axis:
                raise EngineError(f"normalized index {nl.normalized} not found on {eq.lhs.name}")
            out = normalize_array(pre, axis[0], nl.kind)
        else:
            if nl.kind == "sqrt" and (pre < 0).any():
                c = tuple(int(x) for x in np.argwhere(pre < 0)[0])
                raise NumericError(f"sqrt of negative element in {eq.lhs.name} at {c}")
            out = elementwise(nl, pre)
        if covered is not None and not covered.all():
            out = np.where(covered, out, 0.0)
        return out

    def _eval_concat(self, eq, fetch, vdoms, lhs_vars, lhs_args, shape, record):
        ref = eq.terms[0].factors[0]
        value, args = fetch(ref)
        op = self.operand(ref, value, vdoms, [], args)
        into = [v for v in lhs_vars if v not in op.indices][0]
        merged = [v for v in op.indices if v not in lhs_vars]
        from .tensor import concat

        c = concat(op, merged, into)
        placement = _Placement(lhs_args, lhs_vars, vdoms, shape)
        pre = placement.place(c.transpose(lhs_vars).array * eq.terms[0].coef, "sum")
        rec = WriterRecord(pre, placement.covered, pre) if record else None
        return pre, rec

    def _sampled(self, ops, out_names, sample):
        k, rng = sample
        all_names = _unique([n for o in ops for n in o.indices])
        joined = contract(ops, all_names, "sum")
        return sample_project(joined, out_names, k, rng).array

    def _argmax_mask(self, ops, placement, coef):
        all_names = _unique([n for o in ops for n in o.indices])
        joined = coef * contract(ops, all_names, "sum").array
        target = placement.target_flat(all_names, joined.shape)
        flat = joined.ravel()
        order = np.lexsort((np.arange(flat.size), -flat, target))
        first = np.ones(flat.size, dtype=bool)
        t_sorted = target[order]
        first[1:] = t_sorted[1:] != t_sorted[:-1]
        mask = np.zeros(flat.size)
        chosen = order[first]
        chosen = chosen[target[chosen] >= 0]
        mask[chosen] = 1.0
        return mask.reshape(joined.shape), all_names


def _unique(xs):
    out = []
    for x in xs:
        if x not in out:
            out.append(x)
    return out


def _broadcast(arr, names, target, vdoms):
    """Expand ``arr`` over ``names`` to all of ``target`` (missing axes repeat)."""
    kept = [v for v in target if v in names]
    arr = np.transpose(arr, [names.index(v) for v in kept]) if kept else np.asarray(arr)
    sizes = dict(zip(kept, arr.shape))
    arr = arr.reshape([sizes.get(v, 1) for v in target])
    return np.broadcast_to(arr, [vdoms[v].cardinality for v in target]).copy()


def _shift(arr, axis, delta, n):
    """Return b with b[v] = arr[v + delta] along ``axis`` (0 outside range), length n."""
    src_n = arr.shape[axis]
    out_shape = list(arr.shape)
    out_shape[axis] = n
    out = np.zeros(out_shape)
    lo = max(0, -delta)
    hi = min(n, src_n - delta)
    if hi > lo:
        dst = [slice(None)] * arr.ndim
        src = [slice(None)] * arr.ndim
        dst[axis] = slice(lo, hi)
        src[axis] = slice(lo + delta, hi + delta)
        out[tuple(dst)] = arr[tuple(src)]
    return out


def _diagonalize(arr, names):
    if len(set(names)) == len(names):
        return arr, names
    letters = {}
    for n in names:
        letters.setdefault(n, chr(97 + len(letters)))
    uniq = _unique(names)
    spec = "".join(letters[n] for n in names) + "->" + "".join(letters[n] for n in uniq)
    return np.einsum(spec, arr).copy(), uniq


class _Placement:
    """Maps arrays over LHS variables onto LHS coordinates."""

    def __init__(self, lhs_args, lhs_vars, vdoms, shape):
        self.args = lhs_args
        self.vars = lhs_vars
        self.shape = shape
        self.var_shape = [vdoms[v].cardinality if v in vdoms else None for v in lhs_vars]
        slice_k = 0
        self.trivial = True
        for k, a in enumerate(lhs_args):
            if not (isinstance(a, Var) and k < len(lhs_vars) and lhs_vars[k] == a.name):
                self.trivial = False
        if len(lhs_args) != len(lhs_vars):
            self.trivial = False
        if self.trivial:
            self.covered = None
            return
        # slice vars need their lengths
        for k, a in enumerate(a for a in lhs_args if isinstance(a, Slice)):
            i = lhs_vars.index(f"#slice{k}")
            self.var_shape[i] = a.hi - a.lo
        grids = np.meshgrid(*[np.arange(n) for n in self.var_shape], indexing="ij") if lhs_vars else []
        grid = dict(zip(lhs_vars, grids))
        base_shape = tuple(self.var_shape)
        idx = []
        valid = np.ones(base_shape, dtype=bool)
        slice_k = 0
        for k, a in enumerate(lhs_args):
            n = shape[k]
            if isinstance(a, Const):
                c = a.value
                if not isinstance(c, int):
                    raise EngineError("symbolic constants on the left-hand side must be resolved first")
                ix = np.full(base_shape, c)
            elif isinstance(a, Var):
                ix = grid[a.name]
            elif isinstance(a, Offset):
                ix = grid[a.var] + a.delta
            elif isinstance(a, Scaled):
                ix = grid[a.var] // a.divisor
            elif isinstance(a, Window):
                ix = grid[a.var] + grid[a.other]
            else:
                ix = grid[f"#slice{slice_k}"] + a.lo
                slice_k += 1
            valid &= (ix >= 0) & (ix < n)
            idx.append(ix)
        self.valid = valid
        self.idx = tuple(np.where(valid, i, 0) for i in idx)
        self.flat = np.where(valid, np.ravel_multi_index(self.idx, shape) if shape else 0, -1)
        self.covered = np.zeros(shape, dtype=bool)
        if shape:
            self.covered[tuple(i[valid] for i in self.idx)] = True
        else:
            self.covered = np.array(bool(valid.any()))
        self.counts = np.zeros(shape)
        if shape:
            np.add.at(self.counts, tuple(i[valid] for i in self.idx), 1.0)

    def place(self, arr, op):
        if self.trivial:
            return arr
        out = np.zeros(self.shape)
        sel = tuple(i[self.valid] for i in self.idx)
        vals = arr[self.valid]
        if op == "max":
            out = np.full(self.shape, -np.inf)
            np.maximum.at(out, sel, vals)
            out[~self.covered] = 0.0
            return out
        np.add.at(out, sel, vals)
        if op == "avg":
            out = np.divide(out, self.counts, out=np.zeros_like(out), where=self.counts > 0)
        return out

    def target_flat(self, all_names, joined_shape):
        """Flat LHS coordinate for each element of a joined array (or -1)."""
        if self.trivial:
            flat_lhs = np.arange(int(np.prod(self.shape))).reshape(self.shape) if self.shape else np.array(0)
        else:
            flat_lhs = self.flat
        # broadcast from lhs vars to all term vars
        src = np.asarray(flat_lhs)
        order = [all_names.index(v) for v in self.vars]
        expand = np.moveaxis(src.reshape(src.shape + (1,) * (len(all_names) - len(self.vars))),
                             list(range(len(self.vars))), order) if self.vars else src.reshape((1,) * len(all_names))
        return np.broadcast_to(expand, joined_shape).ravel()

    def avg_weight(self, ops, lhs_vars):
        reduced = 1
        seen = set(lhs_vars)
        for o in ops:
            for n, d in zip(o.indices, o.domains):
                if n not in seen:
                    seen.add(n)
                    reduced *= d.cardinality
        counts = np.ones(self.shape) if self.trivial else self.counts
        total = counts * reduced
        return np.divide(1.0, total, out=np.zeros_like(total), where=total > 0)


def sample_project(t: TensorValue, keep, k: int, seed=None) -> TensorValue:
    """Unbiased selective projection: sum ``k`` uniformly sampled terms.

    For every kept coordinate, ``k`` of the ``count`` reduction terms are
    drawn (without replacement when ``k <= count``) and scaled by
    ``count / k``.  ``seed`` may be an int or a numpy Generator.
    """
    if k < 1:
        raise ValueError("k must be at least 1")
    keep = list(keep)
    rng = seed if isinstance(seed, np.random.Generator) else np.random.default_rng(seed)
    rest = [n for n in t.indices if n not in keep]
    arr = t.transpose(keep + rest).array
    kshape = arr.shape[: len(keep)]
    count = int(np.prod(arr.shape[len(keep):])) if rest else 1
    flat = arr.reshape(int(np.prod(kshape)) if kshape else 1, count)
    rows = flat.shape[0]
    if count == 0:
        out = np.zeros(rows)
    elif k >= count:
        out = flat.sum(axis=1)
    else:
        picks = np.argsort(rng.random((rows, count)), axis=1)[:, :k]
        out = np.take_along_axis(flat, picks, axis=1).sum(axis=1) * (count / k)
    doms = [t.domain_of(n) for n in keep]
    return TensorValue(keep, doms, REAL, dense=out.reshape(kshape))


# ---------------------------------------------------------------------------
# program loading

def load_inputs(p: Program, env: Environment | None = None, inputs=None, base_dir=None) -> Environment:
    """Bind facts, literals, file reads and supplied tensors."""
    env = env or Environment()
    heads = set(p.heads())
    by_name = {}
    for f in p.facts:
        by_name.setdefault(f.ref.name, []).append(f)
    for name, facts in by_name.items():
        doms = storage_domains(p, name)
        coords = {}
        for f in facts:
            c = []
            for k, a in enumerate(f.ref.args):
                v = a.value
                c.append(v if isinstance(v, int) else doms[k].index_of(v))
            coords[tuple(c)] = f.value
        t = TensorValue(_axis_names(len(doms)), doms, BOOL, coords=coords)
        _supply(env, name, t, "fact", name in heads)
    for lit in p.literals:
        doms = storage_domains(p, lit.ref.name)
        arr = np.array(lit.values, dtype=np.float64)
        t = pad_to(TensorValue.from_array(arr), doms)
        _supply(env, lit.ref.name, t, "fact", lit.ref.name in heads)
    for rf in p.directives_of(ReadFile):
        path = Path(rf.path)
        if base_dir is not None and not path.is_absolute():
            path = Path(base_dir) / path
        if path.suffix == ".txt":
            t, _ = read_text_tensor(path)
        else:
            _, t = read_tensor(path)
        doms = storage_domains(p, rf.target.name)
        _supply(env, rf.target.name, _relabel(t, doms), "file", rf.target.name in heads)
    for name, t in (inputs or {}).items():
        if not isinstance(t, TensorValue):
            t = TensorValue.from_array(np.asarray(t, dtype=np.float64))
        doms = storage_domains(p, name) if tensor_domains(p, name) else list(t.domains)
        _supply(env, name, _relabel(t, doms), "data", name in heads)
    return env


def _relabel(t: TensorValue, doms) -> TensorValue:
    # symbols of a read file may be ordered differently from the program's domain
    if all(not d.symbols for d in t.domains) or all(a.symbols == b.symbols for a, b in zip(t.domains, doms)):
        return pad_to(t, doms)
    coords = {}
    for c, v in t.entries():
        new = []
        for k, i in enumerate(c):
            lab = t.domains[k].label(i)
            new.append(doms[k].index_of(lab) if t.domains[k].symbols else i)
        coords[tuple(new)] = v
    return TensorValue(_axis_names(len(doms)), doms, t.dtype, coords=coords)


def _supply(env, name, t, provenance, also_computed):
    prev = env.bindings.get(name)
    if prev is not None and provenance != "data":
        arr = np.maximum(prev.array, t.array) if prev.dtype == BOOL and t.dtype == BOOL else prev.array + t.array
        t = TensorValue(t.indices, t.domains, t.dtype if prev.dtype == t.dtype else REAL, dense=arr)
        if t.dtype == BOOL:
            t = t.compact()
    env.bind(name, t, provenance)
    if also_computed:
        # sparse inputs supply only their listed coordinates
        mask = t.array != 0 if t.dtype == BOOL or t.is_sparse else np.ones(t.shape, dtype=bool)
        env.seeds[name] = (mask, t.array)


# ---------------------------------------------------------------------------
# forward chaining

def dependency_graph(p: Program) -> dict:
    heads = set(p.heads())
    g = {}
    for e in p.equations:
        g.setdefault(e.lhs.name, set()).update(n for n in e.rhs_names if n in heads)
    return g


def strongly_connected(graph: dict):
    """Tarjan's algorithm; components come out in reverse topological order."""
    index, low, stack, on, out = {}, {}, [], set(), []
    counter = [0]

    def visit(v):
        index[v] = low[v] = counter[0]
        counter[0] += 1
        stack.append(v)
        on.add(v)
        for w in graph.get(v, ()):
            if w not in index:
                visit(w)
                low[v] = min(low[v], low[w])
            elif w in on:
                low[v] = min(low[v], index[w])
        if low[v] == index[v]:
            comp = []
            while True:
                w = stack.pop()
                on.discard(w)
                comp.append(w)
                if w == v:
                    break
            out.append(comp)

    import sys

    limit = sys.getrecursionlimit()
    sys.setrecursionlimit(max(limit, 10000))
    try:
        for v in list(graph):
            if v not in index:
                visit(v)
    finally:
        sys.setrecursionlimit(limit)
    return out


def is_cyclic_component(comp, graph):
    return len(comp) > 1 or comp[0] in graph.get(comp[0], ())


class ForwardChainer:
    def __init__(self, p: Program, cfg: FixpointConfig | None = None, record=False, surrogate_t=None):
        self.p = p
        self.cfg = cfg or FixpointConfig()
        self.ev = Evaluator(p, surrogate_t)
        self.record = record
        self.records = {}
        self.schedule = []
        seen = set()
        for e in p.equations:
            if e.lhs.name not in seen:
                seen.add(e.lhs.name)
                self.schedule.append(e.lhs.name)
        self.writers = {n: p.equations_for(n) for n in self.schedule}
        graph = dependency_graph(p)
        pos = {n: k for k, n in enumerate(self.schedule)}
        self.acyclic = all(pos[d] < pos[n] for n, ds in graph.items() for d in ds)
        self.virtual_blocks = self._virtual_blocks()

    def _virtual_blocks(self):
        vs = self.ev.vslots
        blocks = {}
        for n in self.schedule:
            if n in vs:
                var = None
                for e in self.writers[n]:
                    a = e.lhs.args[vs[n]]
                    var = a.name if isinstance(a, Var) else a.var
                blocks.setdefault(var, []).append(n)
        return blocks

    def fetch_from(self, env):
        def fetch(ref):
            return env.bindings.get(ref.name), None
        return fetch

    def compute(self, name, env) -> TensorValue:
        fetch = self.fetch_from(env)
        outs = []
        writers = self.writers[name]
        for w, eq in enumerate(writers):
            out, rec = self.ev.eval_writer(eq, fetch, record=self.record)
            outs.append(out)
            if self.record:
                self.records[(name, w)] = rec
        boolean = all(e.nonlinearity.kind == "step" for e in writers)
        arr = outs[0] if len(outs) == 1 else (np.maximum.reduce(outs) if boolean else np.sum(outs, axis=0))
        seed = env.seeds.get(name)
        if seed is not None:
            mask, vals = seed
            arr = np.where(mask, vals, arr)
        doms = storage_domains(self.p, name)
        t = TensorValue(_axis_names(len(doms)), doms, BOOL if boolean else REAL, dense=arr)
        return t.compact() if boolean else t

    def sweep(self, env) -> float:
        """One pass over the program; returns the max-norm change."""
        residual = 0.0
        done_blocks = set()
        for name in self.schedule:
            if name in env.clamped:
                continue
            if name in self.ev.vslots:
                var = self._block_var(name)
                if var in done_blocks:
                    continue
                done_blocks.add(var)
                residual = max(residual, self._run_recurrence(var, env))
                continue
            new = self.compute(name, env)
            old = env.bindings.get(name)
            residual = max(residual, _change(old, new))
            env.bind(name, new, "computed")
        env.sweeps += 1
        return residual

    def _block_var(self, name):
        for var, names in self.virtual_blocks.items():
            if name in names:
                return var

    def _run_recurrence(self, var, env):
        """Iterate equations carrying virtual index ``var`` over its domain."""
        names = self.virtual_blocks[var]
        vs = self.ev.vslots
        eqs = [e for n in names for e in self.writers[n]]
        vdom = None
        offsets = [0]
        for e in eqs:
            vd = self.ev.var_domains(e)
            vdom = vd.get(var, vdom)
            for r in [e.lhs] + e.refs():
                for a in r.args:
                    if getattr(a, "virtual", False):
                        offsets.append(a.delta if isinstance(a, Offset) else 0)
        steps = vdom.cardinality
        depth = max(offsets) - min(offsets) + 1
        buffers = {}
        initial = {}
        for n in names:
            start = self.p.equations_for(n)[0]
            init = env.seeds.get(n)
            doms = storage_domains(self.p, n)
            if init is not None:
                initial[n] = np.asarray(init[1])
            else:
                initial[n] = np.zeros([d.cardinality for d in doms])
        for n in names:
            lhs_delta = [a.delta if isinstance(a, Offset) else 0 for e in self.writers[n] for a in [e.lhs.args[vs[n]]]]
            buffers[n] = {min(lhs_delta) - 1 if min(lhs_delta) > 0 else 0: initial[n]}
        last = {n: max(buffers[n]) for n in names}
        for s in range(steps):
            for n in names:
                outs = []
                target = None
                for e in self.writers[n]:
                    lhs_a = e.lhs.args[vs[n]]
                    d0 = lhs_a.delta if isinstance(lhs_a, Offset) else 0
                    target = s + d0
                    if not 0 <= target < steps:
                        continue
                    eq2, overlay = _instantiate(e, var, s, vs, buffers)
                    vd = dict(self.ev.var_domains(e))

                    def fetch(ref, overlay=overlay):
                        if ref.name in overlay:
                            return overlay[ref.name]
                        return env.bindings.get(ref.name), None

                    out, _ = self.ev.eval_writer(eq2, fetch, lhs_args=eq2.lhs.args, vdoms=vd)
                    outs.append(out)
                if outs and target is not None and 0 <= target < steps:
                    buffers[n][target] = np.sum(outs, axis=0) if len(outs) > 1 else outs[0]
                    last[n] = target
                    for old in [k for k in buffers[n] if k <= target - depth]:
                        del buffers[n][old]
        residual = 0.0
        for n in names:
            doms = storage_domains(self.p, n)
            t = TensorValue(_axis_names(len(doms)), doms, REAL, dense=buffers[n][last[n]])
            residual = max(residual, _change(env.bindings.get(n), t))
            env.bind(n, t, "computed")
        return residual

    def run(self, env: Environment) -> Environment:
        cfg = self.cfg
        if cfg.mode == "fixed":
            for _ in range(cfg.sweeps):
                self.sweep(env)
            return env
        if self.acyclic:
            self.sweep(env)
            return env
        limit = self.recurrence_length() if cfg.epsilon == 0 else None
        residual = np.inf
        for _ in range(limit or cfg.max_sweeps):
            residual = self.sweep(env)
            if residual <= cfg.epsilon:
                return env
        if limit:
            return env
        raise NonConvergenceError(cfg.max_sweeps, residual)

    def recurrence_length(self):
        """Sweep count for numeric recursion: the length of its offset index.

        Boolean recursion and cycles without an offset index run to an exact
        fixpoint instead (None).
        """
        graph = dependency_graph(self.p)
        n = 0
        for comp in strongly_connected(graph):
            if not is_cyclic_component(comp, graph):
                continue
            for name in comp:
                if name in self.ev.vslots:
                    continue
                for e in self.writers[name]:
                    if e.nonlinearity.kind == "step":
                        continue
                    vd = self.ev.var_domains(e)
                    for r in [e.lhs] + e.refs():
                        for a in r.args:
                            if isinstance(a, Offset) and a.var in vd:
                                n = max(n, vd[a.var].cardinality)
        return n or None


def _instantiate(e: Equation, var, s, vs, buffers):
    """Fix recurrence variable ``var`` to step ``s``; virtual refs read buffers."""
    overlay = {}

    def sub_arg(a):
        if isinstance(a, Window):
            return _sub_window(a, {var: s})
        if isinstance(a, Var) and a.name == var:
            return Const(s)
        if isinstance(a, Offset) and a.var == var:
            return Const(s + a.delta)
        if isinstance(a, Scaled) and a.var == var:
            return Const(s // a.divisor)
        return a

    def sub_ref(r: TensorRef):
        if r.name in vs and len(r.args) > vs[r.name] and getattr(r.args[vs[r.name]], "virtual", False):
            a = r.args[vs[r.name]]
            d = a.delta if isinstance(a, Offset) else 0
            key = f"{r.name}@{d}"
            arr = buffers.get(r.name, {}).get(s + d)
            args = tuple(sub_arg(x) for k, x in enumerate(r.args) if k != vs[r.name])
            if arr is None:
                arr = np.zeros(next(iter(buffers[r.name].values())).shape)
            t = TensorValue.from_array(arr)
            overlay[key] = (t, args)
            return TensorRef(key, args, r.boolean)
        return TensorRef(r.name, tuple(sub_arg(x) for x in r.args), r.boolean)

    def sub_factor(f):
        if isinstance(f, TensorRef):
            return sub_ref(f)
        if isinstance(f, IndexFn):
            def walk(n):
                if n[0] == "var" and n[1] == var:
                    return ("num", float(s))
                if n[0] in ("num", "var"):
                    return n
                if n[0] == "neg":
                    return ("neg", walk(n[1]))
                return (n[0], walk(n[1]), walk(n[2]))
            return IndexFn(f.func, walk(f.expr))
        return f

    terms = tuple(Term(t.coef, tuple(sub_factor(f) for f in t.factors)) for t in e.terms)
    k = vs[e.lhs.name]
    lhs_args = tuple(sub_arg(a) for i, a in enumerate(e.lhs.args) if i != k)
    return replace(e, lhs=TensorRef(e.lhs.name, lhs_args, e.lhs.boolean), terms=terms), overlay


def _sub_window(a: Window, subst):
    if a.var in subst and a.other in subst:
        return Const(subst[a.var] + subst[a.other])
    if a.var in subst:
        return Offset(a.other, subst[a.var])
    if a.other in subst:
        return Offset(a.var, subst[a.other])
    return a


def _change(old: TensorValue | None, new: TensorValue) -> float:
    if old is None:
        return float(np.abs(new.array).max()) if new.size else 0.0
    if old.shape != new.shape:
        return np.inf
    if old.is_sparse and new.is_sparse:
        if old._coords == new._coords:
            return 0.0
    a, b = old.array, new.array
    if not a.size:
        return 0.0
    d = np.abs(a - b)
    with np.errstate(invalid="ignore"):
        return float(np.nanmax(np.where(np.isnan(a) & np.isnan(b), 0.0, d)))


def eval_equation(eq: Equation, env: Environment, p: Program) -> TensorValue:
    """Evaluate one (desugared) equation against ``env``."""
    ev = Evaluator(p)
    out, _ = ev.eval_writer(eq, lambda r: (env.bindings.get(r.name), None))
    doms = storage_domains(p, eq.lhs.name)
    dtype = BOOL if eq.nonlinearity.kind == "step" else REAL
    t = TensorValue(_axis_names(len(doms)), doms, dtype, dense=out)
    return t.compact() if dtype == BOOL else t


def forward_chain(p: Program, env: Environment | None = None, cfg: FixpointConfig | None = None,
                  inputs=None, base_dir=None) -> Environment:
    """Sweep the program until no tensor changes by more than ``cfg.epsilon``."""
    if env is None:
        env = load_inputs(p, inputs=inputs, base_dir=base_dir)
    return ForwardChainer(p, cfg).run(env)


# ---------------------------------------------------------------------------
# backward chaining

class BackwardChainer:
    """Query-driven evaluation with memoization per (tensor, binding)."""

    def __init__(self, p: Program, env: Environment, cfg: FixpointConfig | None = None, sample=None):
        self.p = p
        self.env = env
        self.cfg = cfg or FixpointConfig()
        self.ev = Evaluator(p)
        self.graph = dependency_graph(p)
        self.comp_of = {}
        self.cyclic = set()
        for comp in strongly_connected(self.graph):
            for n in comp:
                self.comp_of[n] = tuple(sorted(comp))
            if is_cyclic_component(comp, self.graph) or any(n in self.ev.vslots for n in comp):
                self.cyclic.add(tuple(sorted(comp)))
        self.memo = {}
        self.solved_components = {}
        self.sample = sample

    @property
    def visits(self):
        return self.ev.visits

    def solve(self, name: str, binding: tuple) -> TensorValue:
        key = (name, binding)
        if key in self.memo:
            return self.memo[key]
        if name in self.env.clamped or name not in self.graph:
            full = self.env.bindings.get(name)
            if full is None:
                doms = storage_domains(self.p, name) if tensor_domains(self.p, name) else []
                full = TensorValue.zeros(_axis_names(len(doms)), doms, BOOL, sparse=True)
            result = _slice(full, binding)
        elif self.comp_of[name] in self.cyclic:
            result = _slice(self._solve_component(self.comp_of[name])[name], binding)
        else:
            result = self._solve_acyclic(name, binding)
        self.memo[key] = result
        return result

    def _solve_component(self, comp):
        if comp in self.solved_components:
            return self.solved_components[comp]
        # inputs of the component come from subqueries
        sub_env = self.env.copy()
        for n in comp:
            for e in self.p.equations_for(n):
                for dep in e.rhs_names:
                    if dep not in comp and dep in self.graph:
                        sub_env.bind(dep, self.solve(dep, (None,) * len(storage_domains(self.p, dep))))
        sub = _restrict(self.p, comp)
        ForwardChainer(sub, self.cfg).run(sub_env)
        out = {n: sub_env.bindings[n] for n in comp}
        self.solved_components[comp] = out
        return out

    def _solve_acyclic(self, name, binding):
        doms = storage_domains(self.p, name)
        writers = self.p.equations_for(name)
        outs = []
        boolean = all(e.nonlinearity.kind == "step" for e in writers)
        for eq in writers:
            bind = list(binding)
            nl = eq.nonlinearity
            if nl.is_normalizing:
                for k, a in enumerate(eq.lhs.args):
                    if isinstance(a, Var) and a.name == nl.normalized:
                        bind[k] = None
            spec_eq, residual_binding = _specialize(eq, bind)
            if spec_eq is None:
                outs.append(None)
                continue
            vd = dict(self.ev.var_domains(eq))

            def fetch(ref):
                sub_binding = []
                rest = []
                for k, a in enumerate(ref.args):
                    if isinstance(a, Const):
                        sd = storage_domains(self.p, ref.name) if ref.name in self.graph or ref.name in self.env.bindings else tensor_domains(self.p, ref.name)
                        idx = self.ev._const_index(ref, k, a.value, sd[k])
                        if idx is None:
                            return None, "empty"
                        sub_binding.append(idx)
                    else:
                        sub_binding.append(None)
                        rest.append(a)
                return self.solve(ref.name, tuple(sub_binding)), tuple(rest)

            out, _ = self.ev.eval_writer(spec_eq, _guard(fetch), lhs_args=spec_eq.lhs.args, vdoms=vd,
                                         sample=self.sample)
            outs.append(_slice_array(out, residual_binding))
        free_doms = [d for d, b in zip(doms, binding) if b is None]
        shape = [d.cardinality for d in free_doms]
        parts = [o for o in outs if o is not None]
        if not parts:
            arr = np.zeros(shape)
        elif len(parts) == 1:
            arr = parts[0]
        else:
            arr = np.maximum.reduce(parts) if boolean else np.sum(parts, axis=0)
        seed = self.env.seeds.get(name)
        if seed is not None:
            mask, vals = seed
            arr = np.where(_slice_array(mask, binding), _slice_array(vals, binding), arr)
        t = TensorValue(_axis_names(len(free_doms)), free_doms, BOOL if boolean else REAL, dense=arr)
        return t.compact() if boolean else t


def _guard(fetch):
    def inner(ref):
        v, args = fetch(ref)
        if args == "empty":
            return TensorValue.zeros((), ()), ()
        return v, args
    return inner


def _slice(t: TensorValue, binding) -> TensorValue:
    if all(b is None for b in binding):
        return t
    if t.is_sparse:
        coords = {}
        for c, v in t.entries():
            if all(b is None or c[k] == b for k, b in enumerate(binding)):
                coords[tuple(x for x, b in zip(c, binding) if b is None)] = v
        doms = [d for d, b in zip(t.domains, binding) if b is None]
        return TensorValue(_axis_names(len(doms)), doms, t.dtype, coords=coords)
    doms = [d for d, b in zip(t.domains, binding) if b is None]
    return TensorValue(_axis_names(len(doms)), doms, t.dtype, dense=_slice_array(t.array, binding))


def _slice_array(arr, binding):
    if arr is None:
        return None
    return np.asarray(arr)[tuple(slice(None) if b is None else b for b in binding)]


def _specialize(eq: Equation, binding):
    """Substitute bound LHS positions into the equation.

    Returns the specialized equation and the binding still to be applied to
    its output (positions that could not be pushed inside).
    """
    subst = {}
    residual = []
    lhs_args = []
    for k, (a, b) in enumerate(zip(eq.lhs.args, binding)):
        if b is None:
            lhs_args.append(a)
            residual.append(None)
            continue
        if isinstance(a, Const):
            if isinstance(a.value, int) and a.value != b:
                return None, None
            if isinstance(a.value, int):
                continue
            lhs_args.append(a)
            residual.append(b)
            continue
        if isinstance(a, Var) and a.name not in subst:
            subst[a.name] = b
            continue
        if isinstance(a, Offset) and a.var not in subst:
            subst[a.var] = b - a.delta
            if subst[a.var] < 0:
                return None, None
            continue
        lhs_args.append(a)
        residual.append(b)
    if not subst:
        return replace(eq, lhs=TensorRef(eq.lhs.name, tuple(lhs_args), eq.lhs.boolean)), residual

    def sub_arg(a):
        if isinstance(a, Window):
            return _sub_window(a, subst)
        if isinstance(a, Var) and a.name in subst:
            return Const(subst[a.name])
        if isinstance(a, Offset) and a.var in subst:
            return Const(subst[a.var] + a.delta)
        if isinstance(a, Scaled) and a.var in subst:
            return Const(subst[a.var] // a.divisor)
        return a

    def sub_factor(f):
        if isinstance(f, TensorRef):
            return TensorRef(f.name, tuple(sub_arg(a) for a in f.args), f.boolean)
        if isinstance(f, IndexFn):
            def walk(n):
                if n[0] == "var" and n[1] in subst:
                    return ("num", float(subst[n[1]]))
                if n[0] in ("num", "var"):
                    return n
                if n[0] == "neg":
                    return ("neg", walk(n[1]))
                return (n[0], walk(n[1]), walk(n[2]))
            return IndexFn(f.func, walk(f.expr))
        return f

    lhs_args = [sub_arg(a) for a in lhs_args]
    # remaining LHS args must not be constants that came from substitution
    final_args, final_res = [], []
    for a, r in zip(lhs_args, residual):
        final_args.append(a)
        final_res.append(r)
    terms = tuple(Term(t.coef, tuple(sub_factor(f) for f in t.factors)) for t in eq.terms)
    nl = eq.nonlinearity
    return replace(eq, lhs=TensorRef(eq.lhs.name, tuple(final_args), eq.lhs.boolean), terms=terms,
                   nonlinearity=nl), final_res


def _restrict(p: Program, names) -> Program:
    eqs = tuple(e for e in p.equations if e.lhs.name in names)
    doms = tuple(p.equation_domains[k] for k, e in enumerate(p.equations) if e.lhs.name in names)
    return replace(p, equations=eqs, equation_domains=doms)


def backward_chain(p: Program, query: TensorRef | Query | str, env: Environment | None = None,
                   cfg: FixpointConfig | None = None, sample=None) -> QueryResult:
    """Answer a query by evaluating only the equations it needs."""
    if isinstance(query, str):
        query = parse_query(query, p.constants)
    if isinstance(query, Query):
        query = query.target
    env = env if env is not None else load_inputs(p)
    if query.name not in p.tensor_names() and query.name not in env.bindings:
        log.warning("query on undefined tensor %s; answering 0", query.name)
    bc = BackwardChainer(p, env, cfg, sample)
    return _answer(bc.solve, p, query, env)


def _binding_for(p: Program, q: TensorRef, env):
    doms = storage_domains(p, q.name) if tensor_domains(p, q.name) else []
    if len(doms) != len(q.args):
        if not doms and not q.args:
            return (), []
        raise EngineError(f"query {q.name} has {len(q.args)} indices; the tensor has {len(doms)}")
    binding, free = [], []
    for k, a in enumerate(q.args):
        if isinstance(a, Const):
            if isinstance(a.value, int):
                binding.append(a.value)
            else:
                try:
                    binding.append(doms[k].index_of(a.value))
                except KeyError:
                    raise UnknownConstantError(f"unknown constant {a.value!r} in query on {q.name}") from None
        else:
            binding.append(None)
            free.append(a.name if isinstance(a, Var) else str(a))
    return tuple(binding), free


def _answer(solve, p, q: TensorRef, env):
    binding, free = _binding_for(p, q, env)
    value = solve(q.name, binding)
    # repeated free variables (e.g. R(x,x)) take the diagonal
    if len(set(free)) != len(free):
        arr, names = _diagonalize(value.array, free)
        doms = [value.domains[free.index(n)] for n in names]
        value = TensorValue(_axis_names(len(names)), doms, value.dtype, dense=arr)
        free = names
    value = value.rename(tuple(free)) if free else value
    return QueryResult(q, value, tuple(free))


def answer_query(p: Program, text: str | Query, env: Environment | None = None, mode: str = "backward",
                 cfg: FixpointConfig | None = None, sample=None) -> QueryResult:
    """Evaluate ``Y?``-style queries, including ``Z? Q | E`` conditionals."""
    q = parse_query(text, p.constants) if isinstance(text, str) else text
    env = env if env is not None else load_inputs(p)
    if q.conditional:
        return _conditional(p, q, env, mode, cfg, sample)
    if mode == "forward":
        fenv = forward_chain(p, env.copy(), cfg)
        return _answer(lambda n, b: _slice(_binding_or_zero(p, fenv, n), b), p, q.target, fenv)
    if mode != "backward":
        raise ValueError(f"unknown mode {mode!r}")
    return backward_chain(p, q.target, env, cfg, sample)


def _binding_or_zero(p, env, name):
    t = env.bindings.get(name)
    if t is None:
        doms = storage_domains(p, name) if tensor_domains(p, name) else []
        t = TensorValue.zeros(_axis_names(len(doms)), doms, BOOL, sparse=True)
    return t


def clamp_evidence(p: Program, env: Environment, facts) -> Environment:
    """Replace each evidence tensor by the indicator of its evidence facts."""
    out = env.copy()
    by_name = {}
    for r in facts:
        by_name.setdefault(r.name, []).append(r)
    for name, refs in by_name.items():
        if name not in p.tensor_names():
            raise EngineError(f"evidence names unknown tensor {name!r}")
        doms = storage_domains(p, name)
        coords = {}
        for r in refs:
            if len(r.args) != len(doms):
                raise EngineError(f"evidence {name} has {len(r.args)} arguments, tensor has rank {len(doms)}")
            c = []
            for k, a in enumerate(r.args):
                v = a.value
                try:
                    c.append(v if isinstance(v, int) else doms[k].index_of(v))
                except KeyError:
                    raise UnknownConstantError(f"unknown constant {v!r} in evidence {name}") from None
            coords[tuple(c)] = 1.0
        out.bind(name, TensorValue(_axis_names(len(doms)), doms, BOOL, coords=coords), "evidence")
        out.clamped.add(name)
        out.seeds.pop(name, None)
    return out


def _conditional(p, q: Query, env, mode, cfg, sample):
    target = q.target
    env_e = clamp_evidence(p, env, q.evidence)
    env_qe = clamp_evidence(p, env, q.query_facts + q.evidence)
    if q.query_facts:
        num = answer_query(p, Query(target), env_qe, mode, cfg, sample)
        den = answer_query(p, Query(target), env_e, mode, cfg, sample)
    else:
        num = answer_query(p, Query(target), env_e, mode, cfg, sample)
        den = answer_query(p, Query(target), env, mode, cfg, sample)
    d = den.value.array
    if np.any(d == 0):
        raise InconsistentEvidenceError(f"evidence has probability 0 ({target.name} = 0 under the evidence)")
    val = TensorValue(num.value.indices, num.value.domains, REAL, dense=num.value.array / d)
    return QueryResult(target, val, num.free)


# ---------------------------------------------------------------------------
# running whole programs

def load_program(path, inputs=None) -> Program:
    path = Path(path)
    return compile_program(path.read_text(encoding="utf-8"), inputs=inputs, base_dir=path.parent)


def run_program(p: Program, inputs=None, cfg=None, base_dir=None, mode="forward"):
    """Forward-chain, answer every query directive and perform file writes.

    Returns ``(env, [(query, result)])``.
    """
    env = load_inputs(p, inputs=inputs, base_dir=base_dir)
    env = ForwardChainer(p, cfg).run(env)
    results = []
    for q in p.directives_of(Query):
        if q.conditional or mode == "backward":
            base = load_inputs(p, inputs=inputs, base_dir=base_dir)
            results.append((q, answer_query(p, q, base, "backward" if mode == "backward" else "forward", cfg)))
        else:
            results.append((q, _answer(lambda n, b: _slice(_binding_or_zero(p, env, n), b), p, q.target, env)))
    for w in p.directives_of(WriteFile):
        path = Path(w.path)
        if base_dir is not None and not path.is_absolute():
            path = Path(base_dir) / path
        write_tensor(path, w.target.name, _binding_or_zero(p, env, w.target.name))
    return env, results
