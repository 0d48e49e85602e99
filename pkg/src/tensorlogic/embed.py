"""Reasoning with objects embedded as random unit vectors.

Sets become superpositions of their members' embeddings, relations become
sums of tensor products, and Datalog rules become einsums over embedding
indices.  Decoding multiplies by the transposed embedding matrix.
"""

from __future__ import annotations

import itertools
from dataclasses import dataclass, field

import numpy as np

from .desugar import compile_program
from .engine import (
    Environment,
    ForwardChainer,
    FixpointConfig,
    UnknownConstantError,
    _restrict,
    dependency_graph,
    load_inputs,
)
from .syntax import Const, Program, TensorRef, Var
from .tensor import BOOL, REAL, IndexDomain, TensorValue, sigmoid

DEFAULT_DIMENSION = 1024
MAX_DIRECT_ARITY = 3


class EmbeddingError(ValueError):
    pass


@dataclass(frozen=True, eq=False)
class EmbeddingSpace:
    domain: IndexDomain
    dimension: int
    matrix: np.ndarray  # (objects, dimension), unit rows
    seed: int | None = None

    def index(self, obj) -> int:
        try:
            return self.domain.index_of(obj)
        except (KeyError, IndexError):
            raise UnknownConstantError(f"unknown object {obj!r} in domain {self.domain.name!r}") from None

    def vector(self, obj) -> np.ndarray:
        return self.matrix[self.index(obj)]

    def label(self, i):
        return self.domain.label(i)


def make_embedding_space(domain, D: int = DEFAULT_DIMENSION, seed=0) -> EmbeddingSpace:
    """Random unit embeddings, one row per object of ``domain``.

    ``domain`` may be an IndexDomain, an object count, or a list of symbols.
    """
    if D < 1:
        raise ValueError("embedding dimension must be at least 1")
    if isinstance(domain, (int, np.integer)):
        domain = IndexDomain("obj", int(domain))
    elif not isinstance(domain, IndexDomain):
        syms = tuple(domain)
        domain = IndexDomain("obj", len(syms), syms)
    rng = np.random.default_rng(seed)
    m = rng.standard_normal((domain.cardinality, D))
    m /= np.linalg.norm(m, axis=1, keepdims=True)
    m.setflags(write=False)
    return EmbeddingSpace(domain, D, m, seed)


def gram(E: EmbeddingSpace) -> np.ndarray:
    """Sim[x, x'] = Emb[x, d] Emb[x', d]."""
    return E.matrix @ E.matrix.T


def _members(V, E):
    if isinstance(V, TensorValue):
        return V.array
    V = np.asarray(V) if not isinstance(V, (set, frozenset)) else V
    if isinstance(V, np.ndarray) and V.dtype != object and V.shape == (E.domain.cardinality,):
        return V
    out = np.zeros(E.domain.cardinality)
    for x in V:
        out[E.index(x)] = 1.0
    return out


def embed_set(V, E: EmbeddingSpace) -> np.ndarray:
    """S[d] = V[x] Emb[x, d] for a multi-hot V (array or iterable of objects)."""
    return _members(V, E) @ E.matrix


def membership(S, E: EmbeddingSpace, obj, threshold: float = 0.5):
    """(decision, score) for whether ``obj`` is in the set with superposition S."""
    score = float(np.asarray(S) @ E.vector(obj))
    return (1 if score > threshold else 0), score


# --- relations --------------------------------------------------------------

@dataclass(frozen=True, eq=False)
class EmbeddedRelation:
    name: str
    arity: int
    tensor: np.ndarray  # rank ``arity`` over embedding indices


def _tuples(R, arity=None):
    if isinstance(R, TensorValue):
        return R.rank, [c for c, _ in R.entries()], R.domains
    R = list(R)
    n = arity if arity is not None else (len(R[0]) if R else 0)
    return n, R, None


def embed_relation(R, E: EmbeddingSpace, name: str = "R", arity=None) -> EmbeddedRelation:
    """EmbR = sum over tuples of the tensor product of argument embeddings.

    ``R`` is a Boolean TensorValue or an iterable of object tuples.
    """
    n, tuples, doms = _tuples(R, arity)
    if n > MAX_DIRECT_ARITY:
        raise EmbeddingError(
            f"{name} has arity {n}; reduce it to (relation, argument, value) triples with reify() first"
        )
    out = np.zeros((E.dimension,) * n)
    letters = "abc"[:n]
    spec = ",".join(letters) + "->" + letters
    for t in tuples:
        if doms is not None:
            t = tuple(d.label(i) for d, i in zip(doms, t))
        vecs = [E.vector(x) for x in t]
        out += np.einsum(spec, *vecs) if n else 1.0
    return EmbeddedRelation(name, n, out)


def reify(name: str, tuples):
    """Rewrite an n-ary relation as triples (fact id, argument position, value).

    Returns the triples and the fact ids, which are new objects named
    ``<name>#k``.
    """
    triples, ids = [], []
    for k, t in enumerate(sorted(tuples, key=lambda t: tuple(map(str, t)))):
        fid = f"{name}#{k}"
        ids.append(fid)
        for pos, v in enumerate(t):
            triples.append((fid, pos, v))
    return triples, ids


def decode(tensor: np.ndarray, E: EmbeddingSpace) -> np.ndarray:
    """Score every object tuple: contract each embedding axis with Emb."""
    out = np.asarray(tensor, dtype=np.float64)
    for _ in range(out.ndim):
        # move the decoded object axis to the back so each step hits axis 0
        out = np.tensordot(out, E.matrix, axes=([0], [1]))
    return out


def reembed(weights: np.ndarray, E: EmbeddingSpace) -> np.ndarray:
    """Inverse of decode for a (soft) relation over objects."""
    out = np.asarray(weights, dtype=np.float64)
    for _ in range(out.ndim):
        out = np.tensordot(out, E.matrix, axes=([0], [0]))
    return out


def retrieve(ER: EmbeddedRelation, E: EmbeddingSpace, bound=None) -> TensorValue:
    """Scores for the free positions of ``bound`` (None marks a free slot).

    All slots bound gives a scalar score; no slots bound gives the full
    score tensor over object tuples.
    """
    bound = tuple(bound) if bound is not None else (None,) * ER.arity
    if len(bound) != ER.arity:
        raise EmbeddingError(f"{ER.name} has arity {ER.arity}; got {len(bound)} arguments")
    t = ER.tensor
    free = []
    # contract bound slots from the last axis backwards so positions stay valid
    for k in reversed(range(ER.arity)):
        if bound[k] is not None:
            t = np.tensordot(t, E.vector(bound[k]), axes=([k], [0]))
    for k in range(ER.arity):
        if bound[k] is None:
            free.append(f"x{k}")
    scores = decode(t, E)
    return TensorValue(free, [E.domain] * len(free), REAL, dense=scores)


# --- embedding whole programs -------------------------------------------------

@dataclass
class EmbeddedProgram:
    """A Datalog program rewritten over embedding indices.

    ``program`` is an ordinary compiled program; ``inputs`` binds the
    embedded base relations and constant vectors it reads.
    """

    program: Program
    source: str
    inputs: dict
    space: EmbeddingSpace
    derived: list  # symbolic names of the inferred relations
    arity: dict = field(default_factory=dict)


def emb_name(name: str) -> str:
    return "Emb" + name


def _label_tuples(t: TensorValue):
    return t.as_relation()


def space_for(p: Program, D: int = DEFAULT_DIMENSION, seed=0, env=None) -> EmbeddingSpace:
    """An embedding space over every object the program's relations mention."""
    env = env or load_inputs(p)
    syms = []
    for t in env.bindings.values():
        for d in t.domains:
            for s in d.symbols:
                if s not in syms:
                    syms.append(s)
    for e in p.equations:
        for r in [e.lhs] + e.refs():
            for a in r.args:
                if isinstance(a, Const) and isinstance(a.value, str) and a.value not in syms:
                    syms.append(a.value)
    return make_embedding_space(syms, D, seed)


def _check_datalog(p: Program):
    for e in p.equations:
        if e.nonlinearity.kind != "step" or e.op != "sum":
            raise EmbeddingError(f"{e.lhs.name}: only Boolean (Datalog) equations can be embedded")
        for t in e.terms:
            if t.coef != 1 or not t.factors:
                raise EmbeddingError(f"{e.lhs.name}: only Boolean (Datalog) equations can be embedded")
            for f in t.factors:
                if not isinstance(f, TensorRef) or not all(isinstance(a, (Var, Const)) for a in f.args):
                    raise EmbeddingError(f"{e.lhs.name}: only plain relation atoms can be embedded")


def embed_program(p: Program, E: EmbeddingSpace) -> EmbeddedProgram:
    """Rewrite each rule Cons <- Ant1, ..., Antn as an einsum of embedded tensors."""
    _check_datalog(p)
    env = load_inputs(p)
    heads = p.heads()
    arity = {}
    for e in p.equations:
        for r in [e.lhs] + e.refs():
            arity[r.name] = len(r.args)
    for name, t in env.bindings.items():
        arity.setdefault(name, t.rank)
    for n, k in arity.items():
        if k > MAX_DIRECT_ARITY:
            raise EmbeddingError(f"{n} has arity {k}; reduce it to triples with reify() first")

    inputs = {}
    const_vecs = {}
    counter = itertools.count()

    def fresh():
        return f"e{next(counter)}"

    def const_factor(c, dom_hint=None):
        label = c.value
        idx = E.index(label)
        name = f"Obj{idx}"
        const_vecs[name] = E.matrix[idx]
        ix = fresh()
        return ix, f"{name}[{ix}]"

    lines = []
    uses_all = False
    facts_for = {}
    for name in heads:
        if name in env.seeds:
            mask, vals = env.seeds[name]
            t = env[name]
            facts_for[name] = {tuple(t.domains[k].label(i) for k, i in enumerate(c)) for c in zip(*np.nonzero(mask))}
    for e in p.equations:
        head_ix = []
        lhs_extra = []
        var_ix = {}
        for a in e.lhs.args:
            if isinstance(a, Var):
                var_ix[a.name] = fresh()
                head_ix.append(var_ix[a.name])
            else:
                ix, fac = const_factor(a)
                head_ix.append(ix)
                lhs_extra.append(fac)
        terms = []
        for t in e.terms:
            counts = {}
            for r in t.refs():
                for a in r.args:
                    if isinstance(a, Var):
                        counts[a.name] = counts.get(a.name, 0) + 1
            local = dict(var_ix)
            factors = list(lhs_extra)
            for v, c in counts.items():
                total = c + (1 if v in var_ix else 0)
                if total > 2:
                    raise EmbeddingError(
                        f"{e.lhs.name}: variable {v} occurs {total} times; embedded joins support at most two"
                    )
                if v not in local:
                    local[v] = fresh()
                    if c == 1:
                        # existential variable: sum over all objects
                        factors.append(f"EmbAll[{local[v]}]")
                        uses_all = True
            for r in t.refs():
                ix = []
                for a in r.args:
                    if isinstance(a, Var):
                        ix.append(local[a.name])
                    else:
                        cix, fac = const_factor(a)
                        ix.append(cix)
                        factors.append(fac)
                factors.append(emb_name(r.name) + (f"[{', '.join(ix)}]" if ix else ""))
            terms.append(" ".join(factors))
        if e.lhs.name in facts_for:
            terms.append(emb_name(e.lhs.name + "Facts") + (f"[{', '.join(head_ix)}]" if head_ix else ""))
            inputs[emb_name(e.lhs.name + "Facts")] = embed_relation(
                facts_for.pop(e.lhs.name), E, e.lhs.name, arity[e.lhs.name]).tensor
        lhs = emb_name(e.lhs.name) + (f"[{', '.join(head_ix)}]" if head_ix else "")
        lines.append(f"{lhs} = " + " + ".join(terms))

    base = [n for n in arity if n not in heads]
    for n in base:
        t = env.get(n)
        tuples = _label_tuples(t) if t is not None else set()
        inputs[emb_name(n)] = embed_relation(tuples, E, n, arity[n]).tensor
    inputs.update(const_vecs)
    if uses_all:
        inputs["EmbAll"] = E.matrix.sum(axis=0)
    n_ix = next(counter)
    header = [f"@domain emb = {E.dimension}"]
    if n_ix:
        header.append("@index " + ", ".join(f"e{k}" for k in range(n_ix)) + " : emb")
    source = "\n".join(header + lines) + "\n"
    program = compile_program(source, inputs=inputs)
    return EmbeddedProgram(program, source, inputs, E, list(heads), arity)


# --- reasoning -----------------------------------------------------------------

@dataclass
class ReasonerConfig:
    temperature: float = 0.0
    threshold: float = 0.5
    reembed_interval: int | None = 1  # None: never re-embed
    mode: str = "forward"
    max_sweeps: int = 100

    def __post_init__(self):
        if self.temperature < 0:
            raise ValueError("temperature must be non-negative")
        if self.reembed_interval is not None and self.reembed_interval < 1:
            raise ValueError("re-embed interval must be positive")
        if self.mode not in ("forward", "backward"):
            raise ValueError(f"unknown mode {self.mode!r}")


def soft_decisions(scores: np.ndarray, threshold: float, temperature: float) -> np.ndarray:
    """step(score - threshold) at T = 0, else the temperature sigmoid."""
    if temperature == 0:
        return (scores > threshold).astype(np.float64)
    return sigmoid(scores - threshold, temperature)


def reason_embedded(ep: EmbeddedProgram, cfg: ReasonerConfig | None = None, target: str | None = None) -> Environment:
    """Chain over the embedded rules, re-embedding decoded results.

    The returned environment binds each embedded tensor, each inferred
    relation decoded and thresholded under its own name, and the raw
    decoded scores under ``<name>__score``.  In backward mode only the
    rules ``target`` depends on are evaluated.
    """
    cfg = cfg or ReasonerConfig()
    E = ep.space
    p = ep.program
    derived = list(ep.derived)
    if cfg.mode == "backward":
        if target is None:
            raise ValueError("backward reasoning needs a target relation")
        graph = dependency_graph(p)
        need, todo = set(), [emb_name(target)]
        while todo:
            n = todo.pop()
            if n in need:
                continue
            need.add(n)
            todo += list(graph.get(n, ()))
        p = _restrict(p, need)
        derived = [d for d in derived if emb_name(d) in need]
    env = load_inputs(p, inputs=ep.inputs)
    fc = ForwardChainer(p, FixpointConfig(max_sweeps=cfg.max_sweeps))
    previous = None
    for s in range(1, cfg.max_sweeps + 1):
        fc.sweep(env)
        env.sweeps = s
        decisions = {}
        for d in derived:
            scores = decode(env[emb_name(d)].array, E)
            w = soft_decisions(scores, cfg.threshold, cfg.temperature)
            decisions[d] = (scores, w)
            if cfg.reembed_interval is not None and s % cfg.reembed_interval == 0:
                t = env[emb_name(d)]
                env.bind(emb_name(d), TensorValue(t.indices, t.domains, REAL, dense=reembed(w, E)), "re-embedded")
        current = {d: w > 0.5 for d, (_, w) in decisions.items()}
        if previous is not None and all(np.array_equal(current[d], previous[d]) for d in derived):
            break
        previous = current
    for d, (scores, w) in decisions.items():
        doms = [E.domain] * scores.ndim
        names = [f"x{k}" for k in range(scores.ndim)]
        env.bind(d, TensorValue(names, doms, BOOL, dense=(w > 0.5).astype(np.float64)).compact(), "decoded")
        env.bind(d + "__score", TensorValue(names, doms, REAL, dense=scores), "decoded")
    return env


def membership_trials(N: int, D: int, trials: int, seed=0, batch: int = 200):
    """Membership scores over fresh random spaces.

    Each trial draws N + 1 unit vectors, superposes the first N and scores
    one member and the outsider.  Returns (member scores, outsider scores).
    """
    rng = np.random.default_rng(seed)
    ins, outs = [], []
    left = trials
    while left > 0:
        b = min(batch, left)
        v = rng.standard_normal((b, N + 1, D))
        v /= np.linalg.norm(v, axis=2, keepdims=True)
        s = v[:, :N].sum(axis=1)
        ins.append(np.einsum("bd,bd->b", s, v[:, 0]))
        outs.append(np.einsum("bd,bd->b", s, v[:, N]))
        left -= b
    return np.concatenate(ins), np.concatenate(outs)
