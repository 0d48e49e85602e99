"""Rewrite a parsed program into the core form the engine evaluates.

* nonlinearities nested inside a term are lifted into auxiliary equations
  over all of their variables (no projection happens inside them);
* equations with the same left-hand side pattern are merged into a single
  accumulation group, renaming variables so the heads agree;
* softmax/lnorm without a marker normalize their single LHS index.
"""

from __future__ import annotations

from dataclasses import replace

from .domains import infer_domains
from .parser import ParseError, parse_program
from .syntax import (
    Const,
    Equation,
    IndexFn,
    Nested,
    Offset,
    Program,
    Scaled,
    Slice,
    TensorRef,
    Term,
    Var,
    Window,
    arg_var,
    arg_vars,
)
from .tensor import NonlinearitySpec


class DesugarError(ParseError):
    pass


def lhs_pattern(ref: TensorRef):
    """Head shape with variables numbered by first occurrence."""
    order = {}
    key = []
    for a in ref.args:
        v = arg_var(a)
        if v is not None:
            order.setdefault(v, len(order))
        if isinstance(a, Var):
            key.append(("var", order[v], a.virtual, a.normalized))
        elif isinstance(a, Offset):
            key.append(("off", order[v], a.delta, a.virtual))
        elif isinstance(a, Scaled):
            key.append(("div", order[v], a.divisor))
        elif isinstance(a, Window):
            order.setdefault(a.other, len(order))
            key.append(("win", order[v], order[a.other]))
        elif isinstance(a, Const):
            key.append(("const", a.value))
        else:
            key.append(("slice", a.lo, a.hi))
    return tuple(key)


def _rename_arg(a, m):
    if isinstance(a, Var):
        return replace(a, name=m.get(a.name, a.name))
    if isinstance(a, (Offset, Scaled)):
        return replace(a, var=m.get(a.var, a.var))
    if isinstance(a, Window):
        return Window(m.get(a.var, a.var), m.get(a.other, a.other))
    return a


def _rename_factor(f, m):
    if isinstance(f, TensorRef):
        return replace(f, args=tuple(_rename_arg(a, m) for a in f.args))
    if isinstance(f, IndexFn):
        def walk(n):
            if n[0] == "var":
                return ("var", m.get(n[1], n[1]))
            if n[0] == "num":
                return n
            if n[0] == "neg":
                return ("neg", walk(n[1]))
            return (n[0], walk(n[1]), walk(n[2]))

        return IndexFn(f.func, walk(f.expr))
    if isinstance(f, Nested):
        return Nested(f.nonlinearity, tuple(_rename_term(t, m) for t in f.terms))
    raise TypeError(f)


def _rename_term(t: Term, m):
    return Term(t.coef, tuple(_rename_factor(f, m) for f in t.factors))


def rename_equation(e: Equation, m) -> Equation:
    nl = e.nonlinearity
    if nl.normalized is not None:
        nl = replace(nl, normalized=m.get(nl.normalized, nl.normalized))
    return replace(
        e,
        lhs=replace(e.lhs, args=tuple(_rename_arg(a, m) for a in e.lhs.args)),
        terms=tuple(_rename_term(t, m) for t in e.terms),
        nonlinearity=nl,
    )


def _all_vars(e: Equation):
    out = list(e.lhs.vars)
    for t in e.terms:
        for v in t.vars:
            if v not in out:
                out.append(v)
    return out


def _lift(e: Equation, counter, out):
    """Replace Nested factors by references to fresh auxiliary tensors."""

    def lift_terms(terms):
        new_terms = []
        for t in terms:
            facs = []
            for f in t.factors:
                if isinstance(f, Nested):
                    counter[0] += 1
                    name = f"{e.lhs.name}__{counter[0]}"
                    inner = tuple(lift_terms(f.terms))
                    vars_ = Nested(f.nonlinearity, inner).vars
                    spec = f.nonlinearity
                    if spec.is_normalizing:
                        if len(vars_) != 1:
                            raise DesugarError(
                                f"nested {spec.kind} needs exactly one index; found {vars_}", e.line, 1
                            )
                        spec = replace(spec, normalized=vars_[0])
                    head = TensorRef(name, tuple(Var(v) for v in vars_))
                    out.append(Equation(head, inner, "sum", spec, False, e.line))
                    facs.append(head)
                else:
                    facs.append(f)
            new_terms.append(Term(t.coef, tuple(facs)))
        return new_terms

    return replace(e, terms=tuple(lift_terms(e.terms)))


def _validate(e: Equation, strict=True):
    lhs_vars = e.lhs.vars
    if len([a for a in e.lhs.args if isinstance(a, Var)]) != len({a.name for a in e.lhs.args if isinstance(a, Var)}):
        raise DesugarError(f"{e.lhs.name}: repeated variable on the left-hand side", e.line, 1)
    if e.op == "concat":
        ref = e.terms[0].factors[0]
        merged_into = [v for v in lhs_vars if v not in ref.vars]
        if len(merged_into) != 1:
            raise DesugarError("concat needs exactly one new index on the left-hand side", e.line, 1)
        return
    # lifted sub-expressions broadcast terms over their missing indices
    for t in ([] if "__" in e.lhs.name or not strict else e.terms):
        if not t.factors:
            continue  # constant terms broadcast
        tv = t.vars
        for v in lhs_vars:
            if v not in tv:
                raise DesugarError(
                    f"{e.lhs.name}: index {v!r} of the left-hand side is missing from a term", e.line, 1
                )
    virtual_lhs = {a.name if isinstance(a, Var) else a.var for a in e.lhs.args if getattr(a, "virtual", False)}
    for r in e.refs():
        for a in r.args:
            if getattr(a, "virtual", False):
                v = a.name if isinstance(a, Var) else a.var
                if v not in virtual_lhs and (virtual_lhs or not isinstance(a, Var)):
                    raise DesugarError(f"virtual index *{v} used outside a recurrence on {v}", e.line, 1)
    nl = e.nonlinearity
    if nl.is_normalizing and nl.normalized not in lhs_vars:
        raise DesugarError(f"normalized index {nl.normalized!r} is not on the left-hand side", e.line, 1)


def _default_normalized(e: Equation) -> Equation:
    nl = e.nonlinearity
    if nl.is_normalizing and nl.normalized is None:
        vs = e.lhs.vars
        if len(vs) != 1:
            raise DesugarError(f"{nl.kind} on a multi-index tensor needs a normalized marker like p'.", e.line, 1)
        return replace(e, nonlinearity=replace(nl, normalized=vs[0]))
    return e


def merge_groups(equations):
    """Merge equations whose heads share name and pattern into one each."""
    groups = {}
    order = []
    for e in equations:
        key = (e.lhs.name, lhs_pattern(e.lhs))
        if key not in groups:
            groups[key] = e
            order.append(key)
            continue
        first = groups[key]
        if first.nonlinearity != e.nonlinearity and not _same_up_to_rename(first, e):
            raise DesugarError(
                f"equations for {e.lhs.name} have different nonlinearities "
                f"({first.nonlinearity.kind} on line {first.line}, {e.nonlinearity.kind} on line {e.line})",
                e.line, 1,
            )
        if first.op != e.op:
            raise DesugarError(f"equations for {e.lhs.name} mix projection operators", e.line, 1)
        # rename e so its head variables match first's, keeping others apart
        head_map = dict(zip(_head_vars(e.lhs), _head_vars(first.lhs)))
        taken = set(_all_vars(first)) | set(head_map.values())
        m = {}
        for v in _all_vars(e):
            if v in head_map:
                m[v] = head_map[v]
            elif v in taken:
                k = 1
                while f"{v}_{k}" in taken:
                    k += 1
                m[v] = f"{v}_{k}"
                taken.add(m[v])
            else:
                taken.add(v)
        e2 = rename_equation(e, m)
        groups[key] = replace(first, terms=first.terms + e2.terms, datalog=first.datalog and e.datalog)
    return [groups[k] for k in order]


def _same_up_to_rename(a: Equation, b: Equation) -> bool:
    na, nb = a.nonlinearity, b.nonlinearity
    if na.normalized is None or nb.normalized is None:
        return False
    m = dict(zip(_head_vars(b.lhs), _head_vars(a.lhs)))
    return replace(nb, normalized=m.get(nb.normalized)) == na


def _head_vars(ref):
    return [v for a in ref.args for v in arg_vars(a)]


def desugar(p: Program, strict=True) -> Program:
    """Lift nested calls and merge groups.  ``strict=False`` lets terms
    broadcast over left-hand side indices they lack."""
    counter = [0]
    lifted = []
    for e in p.equations:
        aux = []
        e2 = _lift(e, counter, aux)
        lifted += aux + [e2]
    lifted = [_default_normalized(e) for e in lifted]
    merged = merge_groups(lifted)
    for e in merged:
        _validate(e, strict)
    # auxiliary tensors get their domains when compile_program re-infers
    return replace(p, equations=tuple(merged))


def compile_program(source: str, inputs=None, base_dir=None, strict=True) -> Program:
    """Parse, infer domains and desugar in one step."""
    p = parse_program(source)
    p = infer_domains(p, inputs=inputs, base_dir=base_dir)
    out = desugar(p, strict)
    return infer_domains(out, inputs=inputs, base_dir=base_dir)
