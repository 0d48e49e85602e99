"""Index-domain inference.

Every tensor slot (name, position) and every index variable of every
equation is a node in a union-find structure.  Variables are scoped to their
equation; a ``@domain`` or ``@index`` declaration ties a variable name to a
domain in every equation.  Size evidence is then pooled per class.
"""

from __future__ import annotations

import math
from dataclasses import replace
from pathlib import Path

from .parser import ParseError
from .syntax import (
    Const,
    DomainDecl,
    IndexDecl,
    IndexFn,
    Nested,
    Offset,
    Program,
    Query,
    ReadFile,
    Scaled,
    Slice,
    TensorRef,
    Var,
    Window,
)
from .tensor import IndexDomain, TensorValue


class DomainError(ParseError):
    pass


class _UF:
    def __init__(self):
        self.parent = {}

    def find(self, x):
        self.parent.setdefault(x, x)
        while self.parent[x] != x:
            self.parent[x] = self.parent[self.parent[x]]
            x = self.parent[x]
        return x

    def union(self, a, b):
        ra, rb = self.find(a), self.find(b)
        if ra != rb:
            self.parent[rb] = ra


class _Evidence:
    def __init__(self):
        self.declared = []  # (size, site)
        self.exact = []  # (size, site) from literals
        self.lower = []  # (size, site)
        self.symbols = []
        self.declared_symbols = ()
        self.name = None


def _slot(name, k):
    return ("slot", name, k)


def _var(scope, name):
    return ("var", scope, name)


def infer_domains(p: Program, inputs=None, base_dir=None) -> Program:
    """Bind every index variable and tensor slot to an IndexDomain.

    ``inputs`` optionally maps tensor names to TensorValues or shapes that
    will be supplied at run time; they count as size evidence like literals.
    """
    uf = _UF()
    ev = {}
    scaled = []  # (slot-node, var-node, divisor)
    windows = []  # (slot-node, var-node, var-node)
    products = []  # (var-node, [var-nodes]) for concat

    def evid(node):
        return ev.setdefault(node, _Evidence())

    decl_domains = {d.name: d for d in p.domains if isinstance(d, DomainDecl)}
    var_decl = {}
    for d in p.domains:
        if isinstance(d, IndexDecl):
            if d.domain not in decl_domains:
                raise DomainError(f"@index refers to undeclared domain {d.domain!r}")
            for v in d.vars:
                var_decl[v] = d.domain
    for name, d in decl_domains.items():
        node = ("dom", name)
        uf.find(node)
        e = evid(node)
        e.name = name
        if d.size is not None:
            e.declared.append((d.size, f"@domain {name}"))
        if d.symbols:
            e.declared_symbols = d.symbols
            e.declared.append((max(d.size or 0, len(d.symbols)), f"@domain {name}"))

    def bind_var(scope, name):
        node = _var(scope, name)
        uf.find(node)
        evid(node).name = evid(node).name or name
        dn = var_decl.get(name, name if name in decl_domains else None)
        if dn is not None:
            uf.union(("dom", dn), node)
        return node

    def visit_ref(scope, r: TensorRef, site):
        for k, a in enumerate(r.args):
            slot = _slot(r.name, k)
            uf.find(slot)
            if isinstance(a, (Var, Offset)):
                name = a.name if isinstance(a, Var) else a.var
                uf.union(bind_var(scope, name), slot)
            elif isinstance(a, Scaled):
                scaled.append((slot, bind_var(scope, a.var), a.divisor))
            elif isinstance(a, Window):
                windows.append((slot, bind_var(scope, a.var), bind_var(scope, a.other)))
            elif isinstance(a, Const):
                if isinstance(a.value, int):
                    evid(slot).lower.append((a.value + 1, site))
                else:
                    evid(slot).symbols.append(a.value)
            elif isinstance(a, Slice):
                evid(slot).lower.append((a.hi, site))

    def visit_terms(scope, terms, site):
        for t in terms:
            for f in t.factors:
                if isinstance(f, TensorRef):
                    visit_ref(scope, f, site)
                elif isinstance(f, IndexFn):
                    for v in f.vars:
                        bind_var(scope, v)
                elif isinstance(f, Nested):
                    visit_terms(scope, f.terms, site)

    for k, e in enumerate(p.equations):
        site = f"line {e.line}" if e.line else f"equation {k}"
        visit_ref(("eq", k), e.lhs, site)
        visit_terms(("eq", k), e.terms, site)
        if e.op == "concat":
            src = e.terms[0].factors[0]
            into = [v for v in e.lhs.vars if v not in src.vars]
            merged = [v for v in src.vars if v not in e.lhs.vars]
            if len(into) == 1:
                products.append((bind_var(("eq", k), into[0]), [bind_var(("eq", k), v) for v in merged]))
    for k, d in enumerate(p.declarations):
        visit_ref(("decl", k), d, f"declaration {d.name}")
    for f in p.facts:
        visit_ref(("fact",), f.ref, f"fact {f.ref.name}")
    for q in p.directives_of(Query):
        visit_ref(("query",), q.target, "query")
        for r in q.query_facts + q.evidence:
            visit_ref(("query",), r, "evidence")
    for lit in p.literals:
        site = f"literal {lit.ref.name}"
        if lit.ref.args:
            visit_ref(("lit", lit.ref.name), lit.ref, site)
            if len(lit.ref.args) != len(lit.shape):
                raise DomainError(f"{site}: {len(lit.ref.args)} indices but rank-{len(lit.shape)} literal")
        for k, n in enumerate(lit.shape):
            evid(_slot(lit.ref.name, k)).exact.append((n, site))
            uf.find(_slot(lit.ref.name, k))

    def add_tensor_evidence(name, t, site, symbols=True):
        shape = t.shape if hasattr(t, "shape") else tuple(t)
        for k, n in enumerate(shape):
            slot = _slot(name, k)
            uf.find(slot)
            evid(slot).lower.append((n, site))
            if symbols and isinstance(t, TensorValue) and t.domains[k].symbols:
                evid(slot).symbols.extend(t.domains[k].symbols)

    for rf in p.directives_of(ReadFile):
        path = Path(rf.path)
        if base_dir is not None and not path.is_absolute():
            path = Path(base_dir) / path
        if not path.exists():
            continue
        from .tensorio import read_tensor, read_text_tensor

        if path.suffix == ".txt":
            t, _ = read_text_tensor(path)
        else:
            _, t = read_tensor(path)
        add_tensor_evidence(rf.target.name, t, f"file {rf.path}")
        if rf.target.args:
            visit_ref(("file", rf.target.name), rf.target, f"file {rf.path}")

    for name, t in (inputs or {}).items():
        add_tensor_evidence(name, t, f"input {name}")

    # symbolic constants outside declared domains share one universe
    members = {}
    for node in list(uf.parent):
        members.setdefault(uf.find(node), []).append(node)
    universe = None
    for root, nodes in members.items():
        if any(n[0] == "dom" for n in nodes):
            continue
        if any(ev.get(n) is not None and ev[n].symbols for n in nodes):
            if universe is None:
                universe = root
            else:
                uf.union(universe, root)

    # pool evidence per class
    classes = {}
    for node in list(uf.parent):
        classes.setdefault(uf.find(node), []).append(node)
    pooled = {}
    for root, nodes in classes.items():
        e = _Evidence()
        for n in nodes:
            x = ev.get(n)
            if x is None:
                continue
            e.declared += x.declared
            e.exact += x.exact
            e.lower += x.lower
            e.symbols += x.symbols
            if x.declared_symbols:
                if e.declared_symbols and e.declared_symbols != x.declared_symbols:
                    raise DomainError("two declared domains with different symbols are unified")
                e.declared_symbols = x.declared_symbols
            if n[0] == "dom":
                e.name = x.name
        if e.name is None:
            names = [n[2] for n in nodes if n[0] == "var"]
            slots = [n for n in nodes if n[0] == "slot"]
            e.name = names[0] if names else (f"{slots[0][1]}.{slots[0][2]}" if slots else "?")
        pooled[root] = e

    sizes = {}
    for root, e in pooled.items():
        syms = list(e.declared_symbols)
        for s in e.symbols:
            if s not in syms:
                syms.append(s)
        decl = {s for s, _ in e.declared}
        if len(decl) > 1:
            raise DomainError(f"domain {e.name!r} declared with sizes {sorted(decl)}")
        if decl:
            size = decl.pop()
            for n, site in e.exact:
                if n != size:
                    raise DomainError(
                        f"domain {e.name!r}: {site} has length {n} but it is declared with size {size}"
                    )
            for n, site in e.lower:
                if n > size:
                    raise DomainError(f"domain {e.name!r}: {site} needs size {n} > declared {size}")
            if len(syms) > size:
                raise DomainError(f"domain {e.name!r}: {len(syms)} constants exceed declared size {size}")
        else:
            cands = [n for n, _ in e.exact] + [n for n, _ in e.lower] + [len(syms)]
            if not (e.exact or e.lower or syms):
                continue
            size = max(cands)
        sizes[root] = (size, tuple(syms))

    # scaled slots take ceil(var size / divisor)
    changed = True
    while changed:
        changed = False
        for slot, var, div in scaled:
            rs, rv = uf.find(slot), uf.find(var)
            if rv in sizes and rs not in sizes:
                sizes[rs] = (math.ceil(sizes[rv][0] / div), ())
                changed = True
        for node, parts in products:
            rn = uf.find(node)
            if rn not in sizes and all(uf.find(x) in sizes for x in parts):
                sizes[rn] = (math.prod(sizes[uf.find(x)][0] for x in parts), ())
                changed = True
        for slot, a, b in windows:
            rs, ra, rb = uf.find(slot), uf.find(a), uf.find(b)
            if ra in sizes and rb in sizes and rs not in sizes:
                sizes[rs] = (sizes[ra][0] + sizes[rb][0] - 1, ())
                changed = True

    doms = {}

    def domain_of(node, what):
        root = uf.find(node)
        if root not in doms:
            if root not in sizes:
                vars_ = sorted({n[2] for n in classes[root] if n[0] == "var"})
                if vars_ and "variable" not in what:
                    what = f"index variable {vars_[0]!r} ({what})"
                raise DomainError(f"cannot determine the size of {what}: no declaration, literal, constant or file gives it")
            size, syms = sizes[root]
            doms[root] = IndexDomain(pooled[root].name, size, syms)
        return doms[root]

    slot_domains = {}
    for node in list(uf.parent):
        if node[0] == "slot":
            slot_domains[(node[1], node[2])] = domain_of(node, f"index {node[2]} of {node[1]}")
    eq_domains = []
    for k, e in enumerate(p.equations):
        m = {}
        for node in list(uf.parent):
            if node[0] == "var" and node[1] == ("eq", k):
                m[node[2]] = domain_of(node, f"index variable {node[2]!r} (line {e.line})")
        eq_domains.append(m)
    var_domains = {}
    for node in list(uf.parent):
        if node[0] == "var" and node[2] not in var_domains and uf.find(node) in sizes:
            var_domains[node[2]] = domain_of(node, node[2])
    for name in decl_domains:
        if uf.find(("dom", name)) in sizes:
            var_domains.setdefault(name, domain_of(("dom", name), name))
    return replace(p, slot_domains=slot_domains, var_domains=var_domains, equation_domains=tuple(eq_domains))


def tensor_domains(p: Program, name: str, arity: int | None = None):
    """Domains of every slot of tensor ``name``."""
    out = []
    k = 0
    while (name, k) in p.slot_domains:
        out.append(p.slot_domains[(name, k)])
        k += 1
    if arity is not None and len(out) != arity:
        raise DomainError(f"tensor {name!r} has {len(out)} known slots, expected {arity}")
    return out
