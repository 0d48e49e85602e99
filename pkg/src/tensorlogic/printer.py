"""Render a Program back to ``.tl`` text.

``parse_program(pretty_print(p)) == p`` holds structurally; numeric
constants are printed already folded into coefficients and indices.
"""

from __future__ import annotations

from .syntax import (
    Const,
    ConstantDirective,
    DataDirective,
    DomainDecl,
    Equation,
    IndexDecl,
    IndexFn,
    LossDirective,
    Nested,
    Offset,
    Program,
    Query,
    ReadFile,
    Scaled,
    Slice,
    TensorRef,
    Term,
    TrainDirective,
    Var,
    Window,
    WriteFile,
)
from .tensor import NonlinearitySpec

_FN_NAMES = {"sigmoid": "sig"}


def fmt_number(v: float) -> str:
    v = float(v)
    if v.is_integer() and abs(v) < 1e15:
        return str(int(v))
    return repr(v)


def fmt_arg(a) -> str:
    if isinstance(a, Var):
        return ("*" if a.virtual else "") + a.name + ("." if a.normalized else "")
    if isinstance(a, Const):
        return str(a.value)
    if isinstance(a, Offset):
        sign = "+" if a.delta >= 0 else "-"
        return ("*" if a.virtual else "") + f"{a.var}{sign}{abs(a.delta)}"
    if isinstance(a, Scaled):
        return f"{a.var}/{a.divisor}"
    if isinstance(a, Window):
        return f"{a.var}+{a.other}"
    if isinstance(a, Slice):
        return f"{a.lo}:{a.hi}"
    raise TypeError(a)


def fmt_ref(r: TensorRef) -> str:
    if not r.args:
        return r.name
    inner = ",".join(fmt_arg(a) for a in r.args)
    return f"{r.name}({inner})" if r.boolean else f"{r.name}[{inner}]"


def _fmt_arith(n) -> str:
    k = n[0]
    if k == "num":
        s = fmt_number(n[1])
        return f"({s})" if n[1] < 0 else s
    if k == "var":
        return n[1]
    if k == "neg":
        return f"(-{_fmt_arith(n[1])})"
    return f"({_fmt_arith(n[1])} {k} {_fmt_arith(n[2])})"


def _fn_name(spec: NonlinearitySpec) -> str:
    return _FN_NAMES.get(spec.kind, spec.kind)


def _fmt_call(spec: NonlinearitySpec, body: str) -> str:
    if spec.kind == "power":
        return f"pow({body}, {fmt_number(spec.exponent)})"
    opts = f", T={fmt_number(spec.temperature)}" if spec.temperature is not None else ""
    return f"{_fn_name(spec)}({body}{opts})"


def fmt_factor(f) -> str:
    if isinstance(f, TensorRef):
        return fmt_ref(f)
    if isinstance(f, IndexFn):
        inner = _fmt_arith(f.expr)
        return inner if f.func == "identity" and f.expr[0] != "num" else f"{f.func}({inner})"
    if isinstance(f, Nested):
        return _fmt_call(f.nonlinearity, fmt_terms(f.terms))
    raise TypeError(f)


def fmt_terms(terms) -> str:
    parts = []
    for k, t in enumerate(terms):
        coef = t.coef
        sign = "-" if coef < 0 else "+"
        mag = abs(coef)
        body = " ".join(fmt_factor(f) for f in t.factors)
        if not body:
            body = fmt_number(mag)
        elif mag != 1.0:
            body = f"{fmt_number(mag)} {body}"
        if k == 0:
            parts.append(("-" if sign == "-" else "") + body)
        else:
            parts.append(f" {sign} {body}")
    return "".join(parts) if parts else "0"


def fmt_equation(e: Equation) -> str:
    if e.datalog and e.nonlinearity.kind == "step" and len(e.terms) == 1 and e.terms[0].coef == 1.0 \
            and all(isinstance(f, TensorRef) for f in e.terms[0].factors) and e.lhs.boolean:
        body = ", ".join(fmt_ref(f) for f in e.terms[0].factors)
        return f"{fmt_ref(e.lhs)} <- {body}"
    op = {"sum": "=", "max": "max=", "avg": "avg=", "concat": "="}[e.op]
    rhs = fmt_terms(e.terms)
    if e.op == "concat":
        rhs = f"concat({rhs})"
    elif e.nonlinearity.kind != "identity":
        rhs = _fmt_call(e.nonlinearity, rhs)
    return f"{fmt_ref(e.lhs)} {op} {rhs}"


def _fmt_nested_tuple(v) -> str:
    if isinstance(v, tuple):
        return "[" + ", ".join(_fmt_nested_tuple(x) for x in v) + "]"
    return fmt_number(v)


def fmt_query(q: Query) -> str:
    s = fmt_ref(q.target) + "?"
    if q.query_facts:
        s += " " + ", ".join(fmt_ref(r) for r in q.query_facts) + " |"
        s += " " + ", ".join(fmt_ref(r) for r in q.evidence)
    elif q.evidence:
        s += " " + ", ".join(fmt_ref(r) for r in q.evidence)
    return s


def fmt_directive(d) -> str:
    if isinstance(d, Query):
        return fmt_query(d)
    if isinstance(d, ReadFile):
        return f'{fmt_ref(d.target)} = "{d.path}"'
    if isinstance(d, WriteFile):
        return f'"{d.path}" = {fmt_ref(d.target)}'
    if isinstance(d, LossDirective):
        return f"@loss {d.name}"
    if isinstance(d, ConstantDirective):
        s = "@const " + ", ".join(d.names)
        return s + (f" = {fmt_number(d.value)}" if d.value is not None else "")
    if isinstance(d, DataDirective):
        return "@data " + ", ".join(d.names)
    if isinstance(d, TrainDirective):
        return "@train " + " ".join(f"{k}={v}" for k, v in d.options)
    if isinstance(d, DomainDecl):
        if d.symbols:
            s = "@domain " + d.name + " = {" + ", ".join(str(x) for x in d.symbols) + "}"
            return s + (f" : {d.size}" if d.size is not None else "")
        return f"@domain {d.name} = {d.size}"
    if isinstance(d, IndexDecl):
        return "@index " + ", ".join(d.vars) + " : " + d.domain
    raise TypeError(d)


def pretty_print(p: Program) -> str:
    lines = [fmt_directive(d) for d in p.domains]
    for d in p.declarations:
        lines.append(fmt_ref(d))
    for f in p.facts:
        lines.append(fmt_ref(f.ref))
    for lit in p.literals:
        lines.append(f"{fmt_ref(lit.ref)} = {_fmt_nested_tuple(lit.values)}")
    for e in p.equations:
        lines.append(fmt_equation(e))
    lines += [fmt_directive(d) for d in p.directives]
    return "\n".join(lines) + "\n"
