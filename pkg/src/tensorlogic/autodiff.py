"""Source-to-source reverse mode: the gradient of a program is a program.

``differentiate`` emits one adjoint equation per (equation, RHS tensor)
pair.  Each adjoint joins the upstream gradient at the writer's LHS index
pattern with the sibling factors and projects onto the target's indices,
so offsets, pooling strides and windows are handled by the engine's
ordinary LHS placement.  Quantities the language cannot express (the
nonlinearity derivative at the stored pre-activation, argmax masks, avg
weights, the layer-norm inverse std, concat selectors) are produced by the
recorded forward pass and bound as input tensors of the gradient program.
"""

from __future__ import annotations

from dataclasses import dataclass, field, replace

import numpy as np

from .desugar import compile_program
from .domains import infer_domains, tensor_domains
from .engine import (
    EngineError,
    Environment,
    FixpointConfig,
    ForwardChainer,
    NonConvergenceError,
    _axis_names,
    load_inputs,
    storage_domains,
    strongly_connected,
    virtual_slots,
)
from .printer import pretty_print
from .syntax import (
    ConstantDirective,
    Const,
    Equation,
    IndexFn,
    Offset,
    Program,
    ReadFile,
    TensorRef,
    Term,
    Var,
)
from .tensor import (
    BOOL,
    IDENTITY,
    REAL,
    IndexDomain,
    TensorValue,
    elementwise_derivative,
    lnorm_inv_std,
)


class DifferentiationError(EngineError):
    pass


def grad_name(name: str) -> str:
    return "Grad_" + name


@dataclass(frozen=True)
class LossSpec:
    name: str = "Loss"
    data: frozenset = frozenset()
    constants: frozenset = frozenset()

    @classmethod
    def from_program(cls, p: Program, name=None, data=(), constants=()):
        name = name or p.loss_name or "Loss"
        return cls(name, frozenset(p.data_tensors) | frozenset(data),
                   frozenset(p.fixed_tensors) | frozenset(constants))


@dataclass(frozen=True)
class RecordSpec:
    kind: str  # der | act | invstd | arg | avg | sel | free
    name: str
    tensor: str
    writer: int = 0
    term: int = 0
    meta: tuple = ()


@dataclass
class GradientProgram:
    program: Program
    source: str
    forward: Program  # the differentiated program, virtual indices materialized
    loss: LossSpec
    learned: list
    adjoint: dict  # tensor name -> gradient tensor name
    records: list = field(default_factory=list)
    surrogate: float | None = None

    @property
    def equations(self):
        return self.program.equations


# --- virtual indices -----------------------------------------------------------

def shape_evidence(p: Program, names=None) -> dict:
    """Zero tensors carrying the storage domains of every known tensor."""
    out = {}
    for n in names if names is not None else p.tensor_names():
        try:
            doms = storage_domains(p, n)
        except Exception:
            continue
        if doms or tensor_domains(p, n) == []:
            out[n] = TensorValue.zeros(_axis_names(len(doms)), doms)
    return out


def materialize(p: Program) -> Program:
    """Give every virtual index a real axis so the whole history is kept.

    Reads of ``X[.., *t]`` outside the recurrence become reads of the last
    slot.  Backpropagation through time needs the stored states.
    """
    vs = virtual_slots(p)
    if not vs:
        return p
    vdom = {}
    for k, e in enumerate(p.equations):
        for a in e.lhs.args:
            if getattr(a, "virtual", False):
                v = a.name if isinstance(a, Var) else a.var
                vdom[v] = p.equation_domains[k][v]

    def fix(a, in_rec):
        if isinstance(a, Var) and a.virtual:
            return Var(a.name, False, a.normalized) if in_rec else Const(vdom[a.name].cardinality - 1)
        if isinstance(a, Offset) and a.virtual:
            return Offset(a.var, a.delta)
        return a

    def fix_ref(r, in_rec):
        return replace(r, args=tuple(fix(a, in_rec) for a in r.args))

    eqs = []
    for e in p.equations:
        in_rec = any(getattr(a, "virtual", False) for a in e.lhs.args)
        terms = tuple(
            Term(t.coef, tuple(fix_ref(f, in_rec) if isinstance(f, TensorRef) else f for f in t.factors))
            for t in e.terms
        )
        eqs.append(replace(e, lhs=fix_ref(e.lhs, True), terms=terms))
    evidence = {n: v for n, v in shape_evidence(p).items() if n not in vs}
    return infer_domains(replace(p, equations=tuple(eqs)), inputs=evidence)


# --- analysis ----------------------------------------------------------------------

def _all_deps(p: Program) -> dict:
    g = {}
    for e in p.equations:
        g.setdefault(e.lhs.name, set()).update(e.rhs_names)
    return g


def _closure(g, start):
    seen, todo = set(), [start]
    while todo:
        n = todo.pop()
        for d in g.get(n, ()):
            if d not in seen:
                seen.add(d)
                todo.append(d)
    return seen


def supplied_names(p: Program) -> set:
    out = {f.ref.name for f in p.facts} | {lit.ref.name for lit in p.literals}
    return out | {r.target.name for r in p.directives_of(ReadFile)}


def learned_tensors(p: Program, loss: LossSpec) -> list:
    """Free tensors the loss depends on: not computed, data, constant or facts."""
    heads = set(p.heads())
    reach = _closure(_all_deps(p), loss.name)
    facts = {f.ref.name for f in p.facts}
    out = []
    for n in p.tensor_names():
        if n in reach and n not in heads and n not in loss.data and n not in loss.constants and n not in facts:
            out.append(n)
    return out


# --- emission ----------------------------------------------------------------------

def _plain(a):
    if isinstance(a, Var):
        return Var(a.name)
    return a


def _vars(names):
    return tuple(Var(v) for v in names)


def differentiate(p: Program, loss: LossSpec | None = None, surrogate: float | None = None,
                  seeded=()) -> GradientProgram:
    """Build the gradient program of ``loss`` with respect to the learned tensors.

    ``seeded`` names computed tensors whose elements will also be supplied
    as inputs; supplied elements pass no gradient back.  ``surrogate`` is
    the temperature whose sigmoid derivative stands in for step's.
    """
    loss = loss or LossSpec.from_program(p)
    p = materialize(p)
    heads = p.heads()
    if loss.name not in heads:
        raise DifferentiationError(f"loss tensor {loss.name!r} is not computed by any equation")
    if storage_domains(p, loss.name):
        raise DifferentiationError(f"loss tensor {loss.name!r} must be a scalar")
    deps = _all_deps(p)
    learned = learned_tensors(p, loss)
    reach = _closure(deps, loss.name) | {loss.name}
    active = [h for h in heads if h in reach and (_closure(deps, h) & set(learned))]
    targets = set(active) | set(learned)
    seeded = set(seeded) | supplied_names(p)

    eqs = [Equation(TensorRef(grad_name(loss.name)), (Term(1.0, ()),))]
    records = []
    free_done = set()

    def record(kind, name, y, w=0, t=0, meta=()):
        records.append(RecordSpec(kind, name, y, w, t, meta))
        return name

    for y in reversed(heads):
        if y not in active:
            continue
        rank = len(storage_domains(p, y))
        gv = [f"g{k}" for k in range(rank)]
        upstream = grad_name(y)
        if y in seeded:
            free = record("free", f"Free_{y}", y)
            if y not in free_done:
                free_done.add(y)
                eqs.append(Equation(TensorRef(f"GradFree_{y}", _vars(gv)),
                                    (Term(1.0, (TensorRef(upstream, _vars(gv)), TensorRef(free, _vars(gv)))),)))
            upstream = f"GradFree_{y}"
        for w, eq in enumerate(p.equations_for(y)):
            nl = eq.nonlinearity
            if nl.kind == "step" and surrogate is None:
                raise DifferentiationError(
                    f"{y} uses step on a learned path; pass a sigmoid surrogate temperature to differentiate it"
                )
            gpre = _emit_pre(eqs, record, eq, y, w, gv, upstream, nl)
            up_ref = TensorRef(gpre, tuple(_plain(a) for a in eq.lhs.args))
            for ti, term in enumerate(eq.terms):
                for fi, f in enumerate(term.factors):
                    if not (isinstance(f, TensorRef) and f.name in targets):
                        continue
                    names = [a.name for a in f.args if isinstance(a, Var)]
                    if len(names) != len(set(names)):
                        raise DifferentiationError(f"{f.name}: repeated index {f.args} cannot be differentiated")
                    extra = ()
                    if eq.op == "max":
                        arg = record("arg", f"Arg_{y}_{w}_{ti}", y, w, ti, tuple(term.vars))
                        extra = (TensorRef(arg, _vars(term.vars)),)
                    elif eq.op == "avg":
                        avg = record("avg", f"Avg_{y}_{w}_{ti}", y, w, ti)
                        extra = (TensorRef(avg, tuple(_plain(a) for a in eq.lhs.args)),)
                    elif eq.op == "concat":
                        lhs_vars = eq.lhs.vars
                        merged = tuple(v for v in f.vars if v not in lhs_vars)
                        into = [v for v in lhs_vars if v not in f.vars][0]
                        sel = record("sel", f"Sel_{y}_{w}", y, w, 0, merged + (into,))
                        extra = (TensorRef(sel, _vars(merged + (into,))),)
                    siblings = term.factors[:fi] + term.factors[fi + 1:]
                    lhs = TensorRef(grad_name(f.name), tuple(_plain(a) for a in f.args))
                    eqs.append(Equation(lhs, (Term(term.coef, (up_ref,) + extra + siblings),)))
    eqs = _order(eqs)
    header = [d for d in p.domains] + [d for d in p.directives if isinstance(d, ConstantDirective) and d.value is not None]
    text_prog = Program(equations=tuple(eqs), domains=tuple(d for d in header if not isinstance(d, ConstantDirective)),
                        directives=tuple(d for d in header if isinstance(d, ConstantDirective)))
    source = pretty_print(text_prog)
    evidence = shape_evidence(p)
    for n in targets:
        evidence[grad_name(n)] = TensorValue.zeros(_axis_names(len(storage_domains(p, n))), storage_domains(p, n))
    for r in records:
        evidence[r.name] = _record_placeholder(p, r)
    program = compile_program(source, inputs=evidence, strict=False)
    # uniq records by name (a record may be requested once per factor)
    uniq = list({r.name: r for r in records}.values())
    return GradientProgram(program, source, p, loss, learned, {n: grad_name(n) for n in targets}, uniq, surrogate)


def _emit_pre(eqs, record, eq, y, w, gv, upstream, nl):
    """Emit the gradient with respect to the writer's pre-activation; returns its name."""
    g = TensorRef(upstream, _vars(gv))
    if nl.kind == "identity":
        return upstream
    name = f"Gpre_{y}_{w}"
    if not nl.is_normalizing:
        der = record("der", f"Der_{y}_{w}", y, w)
        eqs.append(Equation(TensorRef(name, _vars(gv)), (Term(1.0, (g, TensorRef(der, _vars(gv)))),)))
        return name
    axis = [k for k, a in enumerate(eq.lhs.args) if isinstance(a, Var) and a.name == nl.normalized][0]
    rest = [v for k, v in enumerate(gv) if k != axis]
    act = TensorRef(record("act", f"Act_{y}_{w}", y, w), _vars(gv))
    if nl.kind == "softmax":
        dot = f"Dot_{y}_{w}"
        eqs.append(Equation(TensorRef(dot, _vars(rest)), (Term(1.0, (g, act)),)))
        eqs.append(Equation(TensorRef(name, _vars(gv)), (
            Term(1.0, (act, g)),
            Term(-1.0, (act, TensorRef(dot, _vars(rest)))),
        )))
        return name
    inv = TensorRef(record("invstd", f"InvStd_{y}_{w}", y, w, 0, (axis,)), _vars(rest))
    m1, m2 = f"MeanG_{y}_{w}", f"MeanGY_{y}_{w}"
    eqs.append(Equation(TensorRef(m1, _vars(rest)), (Term(1.0, (g,)),), "avg"))
    eqs.append(Equation(TensorRef(m2, _vars(rest)), (Term(1.0, (g, act)),), "avg"))
    eqs.append(Equation(TensorRef(name, _vars(gv)), (
        Term(1.0, (inv, g)),
        Term(-1.0, (inv, TensorRef(m1, _vars(rest)))),
        Term(-1.0, (inv, act, TensorRef(m2, _vars(rest)))),
    )))
    return name


def _order(eqs):
    """Order equations so every tensor comes after the ones it reads."""
    names = []
    for e in eqs:
        if e.lhs.name not in names:
            names.append(e.lhs.name)
    heads = set(names)
    g = {n: set() for n in names}
    for e in eqs:
        g[e.lhs.name].update(r.name for r in e.refs() if r.name in heads)
    rank = {}
    for k, comp in enumerate(strongly_connected(g)):
        for n in comp:
            rank[n] = k
    return sorted(eqs, key=lambda e: rank[e.lhs.name])


def _record_placeholder(p, r: RecordSpec) -> TensorValue:
    doms = _record_domains(p, r)
    return TensorValue.zeros(_axis_names(len(doms)), doms)


def _record_domains(p, r: RecordSpec):
    doms = list(storage_domains(p, r.tensor))
    if r.kind in ("der", "act", "free", "avg"):
        return doms
    if r.kind == "invstd":
        return doms[: r.meta[0]] + doms[r.meta[0] + 1:]
    eq = p.equations_for(r.tensor)[r.writer]
    k = list(p.equations).index(eq)
    vd = p.equation_domains[k]
    return [vd[v] for v in r.meta]


# --- evaluation ----------------------------------------------------------------------

def _record_value(p, r: RecordSpec, fc: ForwardChainer, fenv: Environment, surrogate):
    doms = _record_domains(p, r)
    names = _axis_names(len(doms))
    if r.kind == "free":
        mask = fenv.seeds.get(r.tensor)
        arr = np.ones([d.cardinality for d in doms]) if mask is None else 1.0 - mask[0]
        return TensorValue(names, doms, REAL, dense=arr)
    if r.kind == "sel":
        sizes = [d.cardinality for d in doms]
        arr = np.zeros(sizes)
        merged = sizes[:-1]
        for flat, idx in enumerate(np.ndindex(*merged)):
            arr[idx + (flat,)] = 1.0
        return TensorValue(names, doms, REAL, dense=arr)
    rec = fc.records[(r.tensor, r.writer)]
    eq = p.equations_for(r.tensor)[r.writer]
    if r.kind == "der":
        arr = elementwise_derivative(eq.nonlinearity, rec.pre, surrogate)
    elif r.kind == "act":
        arr = rec.out
    elif r.kind == "invstd":
        arr = lnorm_inv_std(rec.pre, r.meta[0])
    elif r.kind == "avg":
        arr = rec.avg_weight[r.term]
    elif r.kind == "arg":
        mask = rec.argmax.get(r.term)
        if mask is None:
            arr = np.zeros([d.cardinality for d in doms])
        else:
            have = list(rec.term_vars[r.term])
            if sorted(have) != sorted(r.meta):
                raise DifferentiationError(f"cannot align argmax of {r.tensor} over {have}")
            arr = np.transpose(mask, [have.index(v) for v in r.meta])
    else:
        raise ValueError(r.kind)
    return TensorValue(names, doms, REAL, dense=np.asarray(arr, dtype=np.float64))


def run_adjoint(program: Program, env: Environment, cfg: FixpointConfig | None = None):
    """Sweep a gradient program until no gradient changes.

    Adjoints of offset recursion settle exactly once the gradient has
    travelled back through every layer, which can take one sweep more than
    the forward pass needed.
    """
    cfg = cfg or FixpointConfig()
    fc = ForwardChainer(program, cfg)
    if fc.acyclic:
        fc.sweep(env)
        return env
    residual = np.inf
    for _ in range(cfg.max_sweeps):
        residual = fc.sweep(env)
        if residual <= cfg.epsilon:
            return env
    raise NonConvergenceError(cfg.max_sweeps, residual)


@dataclass
class GradientResult:
    loss: float
    grads: dict  # learned name -> ndarray
    env: Environment  # forward environment
    genv: Environment  # gradient environment


def evaluate_gradients(gp: GradientProgram, inputs=None, cfg: FixpointConfig | None = None,
                       base_dir=None) -> GradientResult:
    """Run the recorded forward pass, then the gradient program."""
    fwd = gp.forward
    fenv = load_inputs(fwd, inputs=inputs, base_dir=base_dir)
    fc = ForwardChainer(fwd, cfg, record=True, surrogate_t=gp.surrogate)
    fc.run(fenv)
    if not fc.acyclic:
        # one more pass at the fixpoint so records match the final values
        fc.sweep(fenv)
    genv = Environment()
    for n, t in fenv.bindings.items():
        genv.bind(n, t, "forward")
    for r in gp.records:
        genv.bind(r.name, _record_value(fwd, r, fc, fenv, gp.surrogate), "record")
    run_adjoint(gp.program, genv, cfg)
    grads = {}
    for n in gp.learned:
        g = genv.get(grad_name(n))
        if g is None:
            grads[n] = np.zeros([d.cardinality for d in storage_domains(fwd, n)])
        else:
            grads[n] = g.array
    lv = fenv.get(gp.loss.name)
    return GradientResult(lv.item() if lv is not None else 0.0, grads, fenv, genv)


def loss_value(p: Program, loss_name: str, inputs=None, cfg=None) -> float:
    env = load_inputs(p, inputs=inputs)
    ForwardChainer(p, cfg).run(env)
    return env[loss_name].item()


def finite_diff_check(p: Program, loss: LossSpec | None = None, inputs=None, h: float = 1e-4,
                      surrogate=None, params=None, cfg=None):
    """Worst relative error between five-point central differences and the gradient program.

    The error of each learned tensor is max|analytic - numeric| divided by
    the larger of the two gradients' max norms, so tiny entries of a large
    gradient do not dominate.  Returns (worst error, per-tensor errors).
    """
    if h <= 0:
        raise ValueError("h must be positive")
    loss = loss or LossSpec.from_program(p)
    inputs = dict(inputs or {})
    gp = differentiate(p, loss, surrogate, seeded=[n for n in inputs if n in p.heads()])
    fwd = gp.forward
    if params is not None:
        inputs.update(params)
    for n in gp.learned:
        if n not in inputs and n not in supplied_names(fwd):
            raise DifferentiationError(f"no value for learned tensor {n}")
    res = evaluate_gradients(gp, inputs, cfg)
    base_env = load_inputs(fwd, inputs=inputs)
    errors = {}
    for n in gp.learned:
        value = base_env[n].array.astype(np.float64)
        numeric = np.zeros_like(value)
        for idx in np.ndindex(*value.shape):
            f = {}
            for step in (-2, -1, 1, 2):
                moved = value.copy()
                moved[idx] += step * h
                f[step] = loss_value(fwd, loss.name, {**inputs, n: _like(base_env[n], moved)}, cfg)
            numeric[idx] = (8 * (f[1] - f[-1]) - (f[2] - f[-2])) / (12 * h)
        analytic = res.grads[n]
        scale = max(np.abs(analytic).max(initial=0.0), np.abs(numeric).max(initial=0.0))
        diff = np.abs(analytic - numeric).max(initial=0.0)
        errors[n] = 0.0 if scale == 0 else diff / scale
    return max(errors.values(), default=0.0), errors


def _like(t: TensorValue, arr) -> TensorValue:
    return TensorValue(t.indices, t.domains, REAL, dense=arr)
