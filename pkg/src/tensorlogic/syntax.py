"""AST for tensor logic programs.

Everything here is an immutable value so that programs can be compared
structurally (the printer round-trip relies on this).
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Union

from .tensor import IDENTITY, IndexDomain, NonlinearitySpec


# --- index expressions -------------------------------------------------------

@dataclass(frozen=True)
class Var:
    name: str
    virtual: bool = False
    normalized: bool = False


@dataclass(frozen=True)
class Const:
    value: Union[str, int]


@dataclass(frozen=True)
class Offset:
    """``t+1`` / ``i-1``: a variable shifted by an integer."""

    var: str
    delta: int
    virtual: bool = False


@dataclass(frozen=True)
class Scaled:
    """``x/S``: integer division of a variable by a positive constant."""

    var: str
    divisor: int


@dataclass(frozen=True)
class Slice:
    lo: int
    hi: int


@dataclass(frozen=True)
class Window:
    """``x+dx``: the sum of two index variables, as in a convolution window."""

    var: str
    other: str


IndexExpr = Union[Var, Const, Offset, Scaled, Slice, Window]


def arg_var(a) -> str | None:
    """Name of the variable an index expression mentions, if any."""
    if isinstance(a, Var):
        return a.name
    if isinstance(a, (Offset, Scaled, Window)):
        return a.var
    return None


def arg_vars(a) -> tuple:
    if isinstance(a, Window):
        return (a.var, a.other)
    v = arg_var(a)
    return () if v is None else (v,)


@dataclass(frozen=True)
class TensorRef:
    name: str
    args: tuple = ()
    boolean: bool = False

    @property
    def vars(self) -> tuple:
        out = []
        for a in self.args:
            for v in arg_vars(a):
                if v not in out:
                    out.append(v)
        return tuple(out)

    @property
    def arity(self) -> int:
        return len(self.args)

    @property
    def is_ground(self) -> bool:
        return all(isinstance(a, Const) for a in self.args)

    @property
    def plain(self) -> bool:
        """True when every argument is a distinct unmarked variable."""
        names = [a.name for a in self.args if isinstance(a, Var) and not a.virtual]
        return len(names) == len(self.args) and len(set(names)) == len(names)


# --- right-hand side factors -------------------------------------------------

@dataclass(frozen=True)
class IndexFn:
    """Builtin function of index values, e.g. ``sin(p / L^(d/D_e))``.

    ``expr`` is a nested tuple tree: ``("num", v)``, ``("var", name)``,
    ``("neg", x)`` or ``(op, a, b)`` with op in ``+ - * / ^``.
    """

    func: str
    expr: tuple

    @property
    def vars(self) -> tuple:
        out = []

        def walk(n):
            if n[0] == "var":
                if n[1] not in out:
                    out.append(n[1])
            elif n[0] == "neg":
                walk(n[1])
            elif n[0] != "num":
                walk(n[1])
                walk(n[2])

        walk(self.expr)
        return tuple(out)


@dataclass(frozen=True)
class Nested:
    """A nonlinearity applied to a sub-expression (lifted by desugaring)."""

    nonlinearity: NonlinearitySpec
    terms: tuple

    @property
    def vars(self) -> tuple:
        out = []
        for t in self.terms:
            for v in t.vars:
                if v not in out:
                    out.append(v)
        return tuple(out)


@dataclass(frozen=True)
class Term:
    coef: float
    factors: tuple = ()

    @property
    def vars(self) -> tuple:
        out = []
        for f in self.factors:
            for v in f.vars:
                if v not in out:
                    out.append(v)
        return tuple(out)

    def refs(self):
        return [f for f in self.factors if isinstance(f, TensorRef)]


@dataclass(frozen=True)
class Equation:
    lhs: TensorRef
    terms: tuple
    op: str = "sum"  # sum | max | avg | concat
    nonlinearity: NonlinearitySpec = IDENTITY
    datalog: bool = False
    line: int = field(default=0, compare=False)

    def refs(self):
        return [r for t in self.terms for r in t.refs()]

    @property
    def rhs_names(self):
        out = []
        for r in self.refs():
            if r.name not in out:
                out.append(r.name)
        return out


# --- directives --------------------------------------------------------------

@dataclass(frozen=True)
class Query:
    target: TensorRef
    query_facts: tuple = ()
    evidence: tuple = ()
    line: int = field(default=0, compare=False)

    @property
    def conditional(self) -> bool:
        return bool(self.query_facts or self.evidence)


@dataclass(frozen=True)
class ReadFile:
    target: TensorRef
    path: str


@dataclass(frozen=True)
class WriteFile:
    target: TensorRef
    path: str


@dataclass(frozen=True)
class LossDirective:
    name: str


@dataclass(frozen=True)
class ConstantDirective:
    """``@const D_k = 4`` (value) or ``@const W, V`` (tensors kept fixed)."""

    names: tuple
    value: float | None = None


@dataclass(frozen=True)
class DataDirective:
    names: tuple


@dataclass(frozen=True)
class TrainDirective:
    options: tuple  # (key, value-string) pairs


@dataclass(frozen=True)
class DomainDecl:
    name: str
    size: int | None = None
    symbols: tuple = ()


@dataclass(frozen=True)
class IndexDecl:
    vars: tuple
    domain: str


@dataclass(frozen=True)
class Fact:
    ref: TensorRef
    value: float = 1.0


@dataclass(frozen=True)
class Literal:
    ref: TensorRef
    values: tuple  # nested tuples of floats
    shape: tuple


@dataclass(frozen=True)
class Program:
    equations: tuple = ()
    facts: tuple = ()
    literals: tuple = ()
    declarations: tuple = ()  # relation declarations like Neig(x,y)
    directives: tuple = ()
    domains: tuple = ()  # DomainDecl and IndexDecl
    # filled by infer_domains; excluded from structural equality
    slot_domains: dict = field(default_factory=dict, compare=False)
    var_domains: dict = field(default_factory=dict, compare=False)
    equation_domains: tuple = field(default=(), compare=False)

    def directives_of(self, kind):
        return [d for d in self.directives if isinstance(d, kind)]

    @property
    def constants(self) -> dict:
        out = {}
        for d in self.directives_of(ConstantDirective):
            if d.value is not None:
                for n in d.names:
                    out[n] = d.value
        return out

    @property
    def fixed_tensors(self) -> set:
        return {n for d in self.directives_of(ConstantDirective) if d.value is None for n in d.names}

    @property
    def data_tensors(self) -> set:
        return {n for d in self.directives_of(DataDirective) for n in d.names}

    @property
    def loss_name(self) -> str | None:
        ds = self.directives_of(LossDirective)
        return ds[-1].name if ds else None

    @property
    def train_options(self) -> dict:
        out = {}
        for d in self.directives_of(TrainDirective):
            out.update(dict(d.options))
        return out

    def heads(self) -> list:
        out = []
        for e in self.equations:
            if e.lhs.name not in out:
                out.append(e.lhs.name)
        return out

    def equations_for(self, name: str) -> list:
        return [e for e in self.equations if e.lhs.name == name]

    def tensor_names(self) -> list:
        out = []

        def add(n):
            if n not in out:
                out.append(n)

        for f in self.facts:
            add(f.ref.name)
        for lit in self.literals:
            add(lit.ref.name)
        for d in self.declarations:
            add(d.name)
        for e in self.equations:
            add(e.lhs.name)
            for r in e.refs():
                add(r.name)
        for d in self.directives_of(ReadFile):
            add(d.target.name)
        return out
