"""Parser for ``.tl`` source text.

Statements end at a newline unless brackets are still open.  See
docs/language.md for the grammar.
"""

from __future__ import annotations

import math
import re
from dataclasses import dataclass

from .syntax import (
    Const,
    ConstantDirective,
    DataDirective,
    DomainDecl,
    Equation,
    Fact,
    IndexDecl,
    IndexFn,
    Literal,
    LossDirective,
    Nested,
    Offset,
    Window,
    Program,
    Query,
    ReadFile,
    Scaled,
    Slice,
    TensorRef,
    Term,
    TrainDirective,
    Var,
    WriteFile,
)
from .tensor import NonlinearitySpec

#: PosEnc's wavelength constant when the program does not declare one.
DEFAULT_CONSTANTS = {"L": 10000.0}

NONLINEARITIES = {
    "step": "step",
    "sig": "sigmoid",
    "sigmoid": "sigmoid",
    "relu": "relu",
    "exp": "exp",
    "sqrt": "sqrt",
    "softmax": "softmax",
    "lnorm": "lnorm",
    "sin": "sin",
    "cos": "cos",
    "log": "log",
    "tanh": "tanh",
    "identity": "identity",
}
INDEX_FUNCS = {"sin", "cos", "exp", "sqrt", "log", "tanh", "identity"}


class ParseError(Exception):
    def __init__(self, msg, line=0, col=0):
        super().__init__(f"line {line}, column {col}: {msg}" if line else msg)
        self.msg = msg
        self.line = line
        self.col = col


class ArityError(ParseError):
    pass


_TOKEN = re.compile(
    r"""
     (?P<ws>[ \t\r]+)
    |(?P<comment>\#[^\n]*)
    |(?P<nl>\n)
    |(?P<string>"[^"\n]*")
    |(?P<number>\d+\.\d*(?:[eE][-+]?\d+)?|\.\d+(?:[eE][-+]?\d+)?|\d+(?:[eE][-+]?\d+)?)
    |(?P<ident>[A-Za-z_][A-Za-z0-9_]*'*)
    |(?P<op><-|[-+*/^()\[\],?=:.|{}@])
    """,
    re.X,
)


@dataclass
class Tok:
    kind: str
    text: str
    line: int
    col: int


def tokenize(source: str):
    toks, line, start = [], 1, 0
    pos = 0
    while pos < len(source):
        m = _TOKEN.match(source, pos)
        if not m:
            raise ParseError(f"unexpected character {source[pos]!r}", line, pos - start + 1)
        kind = m.lastgroup
        if kind == "nl":
            toks.append(Tok("nl", "\n", line, pos - start + 1))
            line += 1
            start = m.end()
        elif kind not in ("ws", "comment"):
            toks.append(Tok(kind, m.group(), line, pos - start + 1))
        pos = m.end()
    return toks


def split_statements(toks):
    stmts, cur, depth = [], [], 0
    for t in toks:
        if t.kind == "nl":
            if depth == 0:
                if cur:
                    stmts.append(cur)
                cur = []
            continue
        if t.text in "([{" and t.kind == "op":
            depth += 1
        elif t.text in ")]}" and t.kind == "op":
            depth = max(0, depth - 1)
        cur.append(t)
    if cur:
        stmts.append(cur)
    return stmts


def _is_var_name(s: str) -> bool:
    return s[0].islower()


class _Stmt:
    """Recursive-descent cursor over one statement's tokens."""

    def __init__(self, toks, consts):
        self.toks = toks
        self.i = 0
        self.consts = consts

    def peek(self, k=0):
        j = self.i + k
        return self.toks[j] if j < len(self.toks) else None

    def at(self, text, k=0):
        t = self.peek(k)
        return t is not None and t.kind in ("op", "ident") and t.text == text

    def error(self, msg, tok=None):
        tok = tok or self.peek() or self.toks[-1]
        return ParseError(msg, tok.line, tok.col)

    def next(self):
        t = self.peek()
        if t is None:
            raise self.error("unexpected end of statement")
        self.i += 1
        return t

    def expect(self, text):
        t = self.next()
        if t.text != text:
            raise ParseError(f"expected {text!r}, found {t.text!r}", t.line, t.col)
        return t

    def done(self):
        return self.i >= len(self.toks)

    def expect_end(self):
        if not self.done():
            raise self.error(f"unexpected {self.peek().text!r}")

    # --- tensor references -------------------------------------------------

    def ref(self):
        t = self.next()
        if t.kind != "ident" or _is_var_name(t.text):
            raise ParseError(f"expected tensor name, found {t.text!r}", t.line, t.col)
        if self.at("["):
            return TensorRef(t.text, self.args("[", "]"), False)
        if self.at("("):
            return TensorRef(t.text, self.args("(", ")"), True)
        return TensorRef(t.text, (), False)

    def args(self, open_, close):
        self.expect(open_)
        out = []
        if self.at(close):
            self.next()
            return tuple(out)
        while True:
            out.append(self.arg())
            t = self.next()
            if t.text == close:
                return tuple(out)
            if t.text != ",":
                raise ParseError(f"expected ',' or {close!r} in index list, found {t.text!r}", t.line, t.col)

    def _int_atom(self):
        t = self.next()
        if t.kind == "number" and re.fullmatch(r"\d+", t.text):
            return int(t.text)
        if t.kind == "ident" and not _is_var_name(t.text):
            v = self.consts.get(t.text, DEFAULT_CONSTANTS.get(t.text))
            if v is not None and float(v).is_integer():
                return int(v)
        raise ParseError(f"expected integer, found {t.text!r}", t.line, t.col)

    def arg(self):
        virtual = False
        if self.at("*"):
            self.next()
            virtual = True
        t = self.peek()
        if t is None:
            raise self.error("missing index")
        if t.kind == "ident" and _is_var_name(t.text):
            self.next()
            name = t.text
            nxt = self.peek(1)
            if self.at("+") and nxt is not None and nxt.kind == "ident" and _is_var_name(nxt.text) \
                    and nxt.text not in self.consts:
                self.next()
                other = self.next().text
                if virtual:
                    raise self.error("virtual marker on a window index")
                return Window(name, other)
            if self.at("+") or self.at("-"):
                sign = 1 if self.next().text == "+" else -1
                return Offset(name, sign * self._int_atom(), virtual)
            if self.at("/"):
                self.next()
                d = self._int_atom()
                if d <= 0:
                    raise self.error("index divisor must be positive")
                if virtual:
                    raise self.error("virtual marker on a scaled index")
                return Scaled(name, d)
            normalized = False
            if self.at("."):
                self.next()
                normalized = True
            return Var(name, virtual, normalized)
        if virtual:
            raise self.error("'*' must precede an index variable")
        if t.kind == "number" or (t.kind == "ident" and self.at(":", 1)):
            lo = self._int_atom()
            if self.at(":"):
                self.next()
                hi = self._int_atom()
                if hi <= lo:
                    raise self.error("empty slice")
                return Slice(lo, hi)
            return Const(lo)
        if t.kind == "ident":
            self.next()
            v = self.consts.get(t.text)
            if v is not None and float(v).is_integer():
                return Const(int(v))
            return Const(t.text)
        raise ParseError(f"bad index {t.text!r}", t.line, t.col)

    # --- expressions -------------------------------------------------------

    def expr(self):
        items = []
        sign = 1
        if self.at("-"):
            self.next()
            sign = -1
        elif self.at("+"):
            self.next()
        items.append((sign, self.product()))
        while self.at("+") or self.at("-"):
            s = 1 if self.next().text == "+" else -1
            items.append((s, self.product()))
        if len(items) == 1 and items[0][0] == 1:
            return items[0][1]
        return ("add", items)

    def _starts_factor(self):
        t = self.peek()
        if t is None:
            return False
        return t.kind in ("number", "ident") or (t.kind == "op" and t.text == "(")

    def product(self):
        nodes = [self.unary()]
        while True:
            if self.at("/"):
                self.next()
                nodes.append(("div", self.unary()))
            elif self.at("*"):
                self.next()
                nodes.append(self.unary())
            elif self._starts_factor() and not self._at_option():
                nodes.append(self.unary())
            else:
                break
        return nodes[0] if len(nodes) == 1 else ("mul", nodes)

    def _at_option(self):
        return self.at("T") and self.at("=", 1)

    def unary(self):
        if self.at("-"):
            self.next()
            return ("neg", self.unary())
        return self.power()

    def power(self):
        base = self.atom()
        if self.at("^"):
            self.next()
            if self.at("-"):
                self.next()
                return ("pow", base, ("neg", self.atom()))
            return ("pow", base, self.atom())
        return base

    def atom(self):
        t = self.peek()
        if t is None:
            raise self.error("unexpected end of expression")
        if t.kind == "number":
            self.next()
            return ("num", float(t.text))
        if t.kind == "op" and t.text == "(":
            self.next()
            node = self.expr()
            self.expect(")")
            return node
        if t.kind == "ident" and _is_var_name(t.text):
            if self.at("(", 1):
                return self.call()
            self.next()
            return ("ivar", t.text)
        if t.kind == "ident":
            if self.at("[", 1) or self.at("(", 1):
                return ("ref", self.ref())
            self.next()
            return ("name", t.text)
        raise ParseError(f"unexpected {t.text!r} in expression", t.line, t.col)

    def call(self):
        t = self.next()
        fn = t.text
        if fn not in NONLINEARITIES and fn not in ("concat", "pow"):
            raise ParseError(f"unknown function {fn!r}", t.line, t.col)
        self.expect("(")
        inner = self.expr()
        temperature = None
        exponent = None
        while self.at(","):
            self.next()
            if fn == "pow":
                exponent = self.unary()
                continue
            key = self.next()
            if key.text != "T":
                raise ParseError(f"unknown function option {key.text!r}", key.line, key.col)
            self.expect("=")
            temperature = self.unary()
        self.expect(")")
        if fn == "pow":
            if exponent is None:
                raise ParseError("pow needs an exponent", t.line, t.col)
            return ("pow", inner, exponent)
        return ("call", fn, inner, temperature, t)


# --- tree -> terms -----------------------------------------------------------

def _has_tensor(node, consts) -> bool:
    kind = node[0]
    if kind == "ref":
        return True
    if kind == "name":
        return node[1] not in consts and node[1] not in DEFAULT_CONSTANTS
    if kind in ("num", "ivar"):
        return False
    if kind == "add":
        return any(_has_tensor(n, consts) for _, n in node[1])
    if kind == "mul":
        return any(_has_tensor(n[1] if n[0] == "div" else n, consts) for n in node[1])
    if kind in ("neg", "div"):
        return _has_tensor(node[1], consts)
    if kind == "pow":
        return _has_tensor(node[1], consts) or _has_tensor(node[2], consts)
    if kind == "call":
        return _has_tensor(node[2], consts)
    return True


def _has_ivar(node) -> bool:
    kind = node[0]
    if kind == "ivar":
        return True
    if kind in ("num", "name", "ref"):
        return False
    if kind == "add":
        return any(_has_ivar(n) for _, n in node[1])
    if kind == "mul":
        return any(_has_ivar(n[1] if n[0] == "div" else n) for n in node[1])
    if kind in ("neg", "div"):
        return _has_ivar(node[1])
    if kind == "pow":
        return _has_ivar(node[1]) or _has_ivar(node[2])
    if kind == "call":
        return _has_ivar(node[2])
    return False


def _scalar(node, consts, tok=None) -> float:
    kind = node[0]
    if kind == "num":
        return node[1]
    if kind in ("name", "ivar"):
        if node[1] in consts:
            return float(consts[node[1]])
        if node[1] in DEFAULT_CONSTANTS:
            return DEFAULT_CONSTANTS[node[1]]
        raise ParseError(f"{node[1]!r} is not a declared constant", *(tok or (0, 0)))
    if kind == "neg":
        return -_scalar(node[1], consts, tok)
    if kind == "pow":
        return _scalar(node[1], consts, tok) ** _scalar(node[2], consts, tok)
    if kind == "add":
        return sum(s * _scalar(n, consts, tok) for s, n in node[1])
    if kind == "mul":
        v = 1.0
        for n in node[1]:
            if n[0] == "div":
                v /= _scalar(n[1], consts, tok)
            else:
                v *= _scalar(n, consts, tok)
        return v
    if kind == "call":
        fn, inner = node[1], _scalar(node[2], consts, tok)
        table = {"sqrt": math.sqrt, "exp": math.exp, "log": math.log, "sin": math.sin, "cos": math.cos,
                 "tanh": math.tanh, "identity": lambda x: x}
        if fn in table:
            return table[fn](inner)
    raise ParseError("expected a constant scalar expression", *(tok or (0, 0)))


def _arith(node, consts):
    """Convert an index-arithmetic subtree to the IndexFn tuple form."""
    kind = node[0]
    if kind == "num":
        return ("num", node[1])
    if kind == "name":
        return ("num", _scalar(node, consts))
    if kind == "ivar":
        return ("var", node[1])
    if kind == "neg":
        return ("neg", _arith(node[1], consts))
    if kind == "pow":
        return ("^", _arith(node[1], consts), _arith(node[2], consts))
    if kind == "add":
        acc = None
        for s, n in node[1]:
            sub = _arith(n, consts)
            if acc is None:
                acc = sub if s > 0 else ("neg", sub)
            else:
                acc = ("+" if s > 0 else "-", acc, sub)
        return acc
    if kind == "mul":
        acc = None
        for n in node[1]:
            if n[0] == "div":
                acc = ("/", acc, _arith(n[1], consts))
            else:
                sub = _arith(n, consts)
                acc = sub if acc is None else ("*", acc, sub)
        return acc
    if kind == "call":
        # nested builtin inside index arithmetic is not supported
        raise ParseError(f"function {node[1]!r} nested inside index arithmetic", node[4].line, node[4].col)
    raise ParseError("bad index arithmetic")


def _fold(terms):
    """Drop zero coefficients; keep term order."""
    return [t for t in terms if t.coef != 0.0]


def _spec(fn, temperature=None, normalized=None, exponent=None, tok=None):
    kind = NONLINEARITIES[fn]
    try:
        return NonlinearitySpec(kind, temperature, normalized, exponent)
    except ValueError as e:
        raise ParseError(str(e), *(tok or (0, 0))) from None


def to_terms(node, consts, tok=(0, 0)):
    kind = node[0]
    if kind == "num":
        return [Term(node[1], ())]
    if kind == "name":
        if node[1] in consts:
            return [Term(float(consts[node[1]]), ())]
        return [Term(1.0, (TensorRef(node[1]),))]
    if kind == "ref":
        return [Term(1.0, (node[1],))]
    if kind == "ivar":
        return [Term(1.0, (IndexFn("identity", ("var", node[1])),))]
    if kind == "add":
        out = []
        for s, n in node[1]:
            out += [Term(s * t.coef, t.factors) for t in to_terms(n, consts, tok)]
        return _fold(out)
    if kind == "neg":
        return [Term(-t.coef, t.factors) for t in to_terms(node[1], consts, tok)]
    if kind == "mul":
        acc = [Term(1.0, ())]
        for n in node[1]:
            if n[0] == "div":
                if _has_tensor(n[1], consts) or _has_ivar(n[1]):
                    if not _has_tensor(n[1], consts):
                        # index arithmetic denominator: fold into one index function
                        return [Term(1.0, (IndexFn("identity", _arith(node, consts)),))]
                    raise ParseError("division by a tensor expression is not supported", *tok)
                d = _scalar(n[1], consts, tok)
                acc = [Term(t.coef / d, t.factors) for t in acc]
                continue
            rhs = to_terms(n, consts, tok)
            acc = [Term(a.coef * b.coef, a.factors + b.factors) for a in acc for b in rhs]
        return _fold(acc)
    if kind == "pow":
        if not _has_tensor(node, consts):
            if _has_ivar(node):
                return [Term(1.0, (IndexFn("identity", _arith(node, consts)),))]
            return [Term(_scalar(node, consts, tok), ())]
        n = _scalar(node[2], consts, tok)
        spec = NonlinearitySpec("power", exponent=n)
        return [Term(1.0, (Nested(spec, tuple(to_terms(node[1], consts, tok))),))]
    if kind == "call":
        fn, inner, temp, t = node[1], node[2], node[3], node[4]
        if fn == "concat":
            raise ParseError("concat must be the whole right-hand side", t.line, t.col)
        if not _has_tensor(inner, consts):
            if not _has_ivar(inner):
                return [Term(_scalar(node, consts, (t.line, t.col)), ())]
            if fn not in INDEX_FUNCS:
                raise ParseError(f"{fn} cannot be applied to index arithmetic", t.line, t.col)
            return [Term(1.0, (IndexFn(fn, _arith(inner, consts)),))]
        temperature = _scalar(temp, consts) if temp is not None else None
        spec = _spec(fn, temperature, tok=(t.line, t.col))
        return [Term(1.0, (Nested(spec, tuple(to_terms(inner, consts, (t.line, t.col)))),))]
    raise ParseError(f"unsupported expression {kind}", *tok)


# --- statements --------------------------------------------------------------

def _top_index(toks, text):
    depth = 0
    for k, t in enumerate(toks):
        if t.kind == "op" and t.text in "([{":
            depth += 1
        elif t.kind == "op" and t.text in ")]}":
            depth -= 1
        elif depth == 0 and t.text == text and t.kind == "op":
            return k
    return -1


def _number_value(tok):
    return float(tok.text)


def _parse_literal(cur: _Stmt):
    def level():
        cur.expect("[")
        items = []
        while True:
            if cur.at("["):
                items.append(level())
            else:
                sign = 1.0
                if cur.at("-"):
                    cur.next()
                    sign = -1.0
                t = cur.next()
                if t.kind == "number":
                    items.append(sign * float(t.text))
                elif t.kind == "ident" and t.text in cur.consts:
                    items.append(sign * float(cur.consts[t.text]))
                else:
                    raise ParseError(f"literal element must be a number, found {t.text!r}", t.line, t.col)
            t = cur.next()
            if t.text == "]":
                return tuple(items)
            if t.text != ",":
                raise ParseError("expected ',' or ']' in literal", t.line, t.col)

    vals = level()
    cur.expect_end()

    def shape(v):
        if isinstance(v, tuple):
            subs = {shape(x) for x in v}
            if len(subs) > 1:
                raise cur.error("ragged tensor literal")
            return (len(v),) + (subs.pop() if subs else ())
        return ()

    return vals, shape(vals)


def _parse_directive(cur: _Stmt):
    cur.expect("@")
    kw = cur.next()
    name = kw.text
    if name == "const":
        names = [cur.next().text]
        while cur.at(","):
            cur.next()
            names.append(cur.next().text)
        value = None
        if cur.at("="):
            cur.next()
            sign = 1.0
            if cur.at("-"):
                cur.next()
                sign = -1.0
            t = cur.next()
            if t.kind != "number":
                raise ParseError("constant value must be a number", t.line, t.col)
            value = sign * float(t.text)
        cur.expect_end()
        return ConstantDirective(tuple(names), value)
    if name in ("data", "loss"):
        names = [cur.ref().name]
        while cur.at(","):
            cur.next()
            names.append(cur.ref().name)
        cur.expect_end()
        if name == "loss":
            if len(names) != 1:
                raise cur.error("@loss names exactly one tensor")
            return LossDirective(names[0])
        return DataDirective(tuple(names))
    if name == "domain":
        dn = cur.next().text
        cur.expect("=")
        if cur.at("{"):
            cur.next()
            syms = []
            while not cur.at("}"):
                t = cur.next()
                syms.append(int(t.text) if t.kind == "number" else t.text)
                if cur.at(","):
                    cur.next()
            cur.expect("}")
            size = None
            if cur.at(":"):
                cur.next()
                size = cur._int_atom()
            cur.expect_end()
            return DomainDecl(dn, size, tuple(syms))
        size = cur._int_atom()
        cur.expect_end()
        return DomainDecl(dn, size)
    if name == "index":
        vs = [cur.next().text]
        while cur.at(","):
            cur.next()
            vs.append(cur.next().text)
        cur.expect(":")
        dn = cur.next().text
        cur.expect_end()
        return IndexDecl(tuple(vs), dn)
    if name == "train":
        opts = []
        while not cur.done():
            k = cur.next().text
            cur.expect("=")
            parts = []
            depth = 0
            while not cur.done():
                t = cur.peek()
                if depth == 0 and t.kind == "ident" and cur.at("=", 1):
                    break
                if t.text == "(":
                    depth += 1
                elif t.text == ")":
                    depth -= 1
                parts.append(cur.next().text)
            opts.append((k, "".join(parts)))
        return TrainDirective(tuple(opts))
    raise ParseError(f"unknown directive @{name}", kw.line, kw.col)


def _parse_fact_list(cur: _Stmt):
    refs = [cur.ref()]
    while cur.at(","):
        cur.next()
        refs.append(cur.ref())
    return refs


def _parse_equation(cur: _Stmt, eq_at: int, consts):
    first = cur.peek()
    lhs = cur.ref()
    op = "sum"
    if cur.i < eq_at:
        t = cur.next()
        if t.text in ("max", "avg"):
            op = t.text
        elif t.text != "+":
            raise ParseError(f"unexpected {t.text!r} before '='", t.line, t.col)
    cur.expect("=")
    if cur.at("["):
        vals, shape = _parse_literal(cur)
        return Literal(lhs, vals, shape)
    t = cur.peek()
    if t is not None and t.kind == "string":
        cur.next()
        cur.expect_end()
        return ReadFile(lhs, t.text[1:-1])
    node = cur.expr()
    cur.expect_end()
    tok = (first.line, first.col)
    normalized = [a.name for a in lhs.args if isinstance(a, Var) and a.normalized]
    if len(normalized) > 1:
        raise ParseError("at most one normalized index", *tok)
    norm = normalized[0] if normalized else None
    nonlin = NonlinearitySpec()
    if node[0] == "call" and (_has_tensor(node[2], consts)):
        fn, inner, temp, ct = node[1], node[2], node[3], node[4]
        if fn == "concat":
            if op != "sum":
                raise ParseError("concat cannot be combined with max=/avg=", *tok)
            terms = to_terms(inner, consts, tok)
            if len(terms) != 1 or len(terms[0].factors) != 1 or not isinstance(terms[0].factors[0], TensorRef):
                raise ParseError("concat takes a single tensor", ct.line, ct.col)
            return Equation(lhs, tuple(terms), "concat", NonlinearitySpec(), line=first.line)
        temperature = _scalar(temp, consts) if temp is not None else None
        kind = NONLINEARITIES[fn]
        nonlin = _spec(fn, temperature, norm if kind in ("softmax", "lnorm") else None, tok=(ct.line, ct.col))
        body = inner
    elif node[0] == "pow" and _has_tensor(node[1], consts):
        nonlin = NonlinearitySpec("power", exponent=_scalar(node[2], consts, tok))
        body = node[1]
    else:
        body = node
    if norm is not None and not nonlin.is_normalizing:
        raise ParseError("normalized index marker needs softmax or lnorm", *tok)
    terms = to_terms(body, consts, tok)
    if not terms:
        terms = [Term(0.0, ())]
    return Equation(lhs, tuple(terms), op, nonlin, line=first.line)


def _parse_query(cur: _Stmt, q_at: int):
    first = cur.peek()
    target = cur.ref()
    cur.expect("?")
    qf, ev = [], []
    if not cur.done():
        if cur.at("|"):
            cur.next()
            ev = _parse_fact_list(cur)
        else:
            qf = _parse_fact_list(cur)
            if cur.at("|"):
                cur.next()
                ev = _parse_fact_list(cur)
            else:
                # plain evidence: P(E) = Z(E) / Z
                ev, qf = qf, []
    cur.expect_end()
    for r in qf + ev:
        if not r.is_ground:
            raise ParseError(f"evidence {r.name} must be ground", first.line, first.col)
    return Query(target, tuple(qf), tuple(ev), line=first.line)


def _collect_constants(stmts):
    consts = {}
    for toks in stmts:
        if len(toks) >= 5 and toks[0].text == "@" and toks[1].text == "const" and toks[3].text == "=":
            sign = -1.0 if toks[4].text == "-" else 1.0
            num = toks[5] if sign < 0 else toks[4]
            if num.kind == "number":
                consts[toks[2].text] = sign * float(num.text)
    return consts


def parse_program(source: str) -> Program:
    """Parse ``.tl`` text into a Program (no domain inference yet)."""
    stmts = split_statements(tokenize(source))
    consts = _collect_constants(stmts)
    equations, facts, literals, decls, directives, domains = [], [], [], [], [], []
    for toks in stmts:
        cur = _Stmt(toks, consts)
        if toks[0].text == "@":
            d = _parse_directive(cur)
            (domains if isinstance(d, (DomainDecl, IndexDecl)) else directives).append(d)
            continue
        q_at = _top_index(toks, "?")
        if q_at >= 0:
            directives.append(_parse_query(cur, q_at))
            continue
        rule_at = _top_index(toks, "<-")
        if rule_at >= 0:
            first = cur.peek()
            head = cur.ref()
            cur.expect("<-")
            body = _parse_fact_list(cur)
            cur.expect_end()
            head = TensorRef(head.name, head.args, True)
            equations.append(
                Equation(head, (Term(1.0, tuple(body)),), "sum", NonlinearitySpec("step"), True, first.line)
            )
            continue
        eq_at = _top_index(toks, "=")
        if eq_at >= 0:
            if toks[0].kind == "string":
                cur.next()
                cur.expect("=")
                ref = cur.ref()
                cur.expect_end()
                directives.append(WriteFile(ref, toks[0].text[1:-1]))
                continue
            item = _parse_equation(cur, eq_at, consts)
            if isinstance(item, Literal):
                literals.append(item)
            elif isinstance(item, ReadFile):
                directives.append(item)
            else:
                equations.append(item)
            continue
        refs = _parse_fact_list(cur)
        cur.expect_end()
        for r in refs:
            if r.is_ground:
                facts.append(Fact(r))
            elif all(isinstance(a, Var) for a in r.args):
                decls.append(r)
            else:
                raise ParseError(f"fact {r.name} mixes constants and variables", toks[0].line, toks[0].col)
    prog = Program(tuple(equations), tuple(facts), tuple(literals), tuple(decls), tuple(directives), tuple(domains))
    check_arity(prog)
    return prog


def check_arity(prog: Program):
    seen = {}

    def visit(ref, line):
        prev = seen.setdefault(ref.name, (ref.arity, line))
        if prev[0] != ref.arity:
            raise ArityError(
                f"{ref.name} used with {ref.arity} indices here but {prev[0]} on line {prev[1]}", line, 1
            )

    for f in prog.facts:
        visit(f.ref, 0)
    for lit in prog.literals:
        if lit.ref.args:
            visit(lit.ref, 0)
        else:
            visit(TensorRef(lit.ref.name, (None,) * len(lit.shape)), 0)
    for d in prog.declarations:
        visit(d, 0)
    for e in prog.equations:
        visit(e.lhs, e.line)
        for r in e.refs():
            visit(r, e.line)
        for t in e.terms:
            for f in t.factors:
                if isinstance(f, Nested):
                    _visit_nested(f, visit, e.line)


def _visit_nested(n, visit, line):
    for t in n.terms:
        for f in t.factors:
            if isinstance(f, TensorRef):
                visit(f, line)
            elif isinstance(f, Nested):
                _visit_nested(f, visit, line)


def parse_query(text: str, consts=None) -> Query:
    """Parse a query such as ``Ancestor(Alice,x)?`` or ``Z? E(1) | F(0)``."""
    text = text.strip()
    if not text.endswith("?") and "?" not in text:
        text += "?"
    toks = [t for t in tokenize(text) if t.kind != "nl"]
    cur = _Stmt(toks, consts or {})
    return _parse_query(cur, _top_index(toks, "?"))
