"""Independent reference implementations used by the tests.

Nothing here calls into the package under test.
"""

import itertools

import numpy as np

VARS = "ijklmn"


# --- einsum by nested loops ---------------------------------------------------

def random_equation(rng, max_rank=4, max_size=6, max_factors=3):
    """Random single-term equation: (source text, inputs, lhs vars, factor specs, sizes)."""
    nvars = rng.integers(1, 6)
    names = list(VARS[:nvars])
    sizes = {v: int(rng.integers(1, max_size + 1)) for v in names}
    nf = int(rng.integers(1, max_factors + 1))
    factors = []
    for k in range(nf):
        rank = int(rng.integers(0, max_rank + 1))
        args = [str(a) for a in rng.choice(names, size=min(rank, len(names)), replace=False)]
        factors.append((f"T{k}", args))
    used = sorted({a for _, args in factors for a in args}, key=names.index)
    keep = [v for v in used if rng.random() < 0.5]
    if len(keep) > max_rank:
        keep = keep[:max_rank]
    inputs = {}
    for name, args in factors:
        inputs[name] = rng.normal(size=[sizes[a] for a in args])
    decls = "\n".join(f"@domain {v} = {sizes[v]}" for v in names)
    lhs = "Out" + (f"[{', '.join(keep)}]" if keep else "")
    rhs = " ".join(name + (f"[{', '.join(args)}]" if args else "") for name, args in factors)
    return f"{decls}\n{lhs} = {rhs}\n", inputs, keep, factors, sizes


def nested_loop_einsum(factors, inputs, keep, sizes):
    used = sorted({a for _, args in factors for a in args})
    out = np.zeros([sizes[v] for v in keep])
    for combo in itertools.product(*[range(sizes[v]) for v in used]):
        env = dict(zip(used, combo))
        prod = 1.0
        for name, args in factors:
            prod *= inputs[name][tuple(env[a] for a in args)]
        out[tuple(env[v] for v in keep)] += prod
    return out


# --- Datalog ----------------------------------------------------------------

def _match(atom, tup, binding):
    rel, args = atom
    b = dict(binding)
    for a, v in zip(args, tup):
        if a[0].isupper():
            if a != v:
                return None
        elif a in b:
            if b[a] != v:
                return None
        else:
            b[a] = v
    return b


def _eval_body(body, rels, delta_pos=None, delta=None):
    bindings = [{}]
    for k, atom in enumerate(body):
        src = delta.get(atom[0], set()) if k == delta_pos else rels.get(atom[0], set())
        nxt = []
        for b in bindings:
            for t in src:
                m = _match(atom, t, b)
                if m is not None:
                    nxt.append(m)
        bindings = nxt
        if not bindings:
            break
    return bindings


def _head(head, b):
    rel, args = head
    return tuple(a if a[0].isupper() else b[a] for a in args)


def semi_naive(facts, rules):
    """facts: {rel: set(tuples)}; rules: [(head atom, [body atoms])]."""
    rels = {r: set(ts) for r, ts in facts.items()}
    idb = {h[0] for h, _ in rules}
    delta = {}
    for head, body in rules:
        for b in _eval_body(body, rels):
            t = _head(head, b)
            if t not in rels.get(head[0], set()):
                delta.setdefault(head[0], set()).add(t)
    for r, ts in delta.items():
        rels.setdefault(r, set()).update(ts)
    while any(delta.values()):
        new = {}
        for head, body in rules:
            for pos, atom in enumerate(body):
                if atom[0] not in idb or not delta.get(atom[0]):
                    continue
                for b in _eval_body(body, rels, pos, delta):
                    t = _head(head, b)
                    if t not in rels.get(head[0], set()):
                        new.setdefault(head[0], set()).add(t)
        for r, ts in new.items():
            rels.setdefault(r, set()).update(ts)
        delta = new
    return rels


def random_datalog(rng, n_const=None, n_rules=None):
    """Random function-free program: (source, facts, rules, derived names)."""
    n_const = n_const or int(rng.integers(2, 51))
    consts = [f"K{c}" for c in range(n_const)]
    base = [f"E{k}" for k in range(int(rng.integers(1, 5)))]
    derived = [f"D{k}" for k in range(int(rng.integers(1, 4)))]
    facts = {}
    for r in base:
        n = int(rng.integers(1, 3 * n_const + 1))
        facts[r] = {(consts[rng.integers(n_const)], consts[rng.integers(n_const)]) for _ in range(n)}
    if rng.random() < 0.3:
        facts[derived[0]] = {(consts[0], consts[rng.integers(n_const)])}
    n_rules = n_rules or int(rng.integers(1, 7))
    rules = []
    pool = "xyzw"
    for _ in range(n_rules):
        head = (str(rng.choice(derived)), ("x", "y"))
        nb = int(rng.integers(1, 4))
        body = []
        for k in range(nb):
            rel = str(rng.choice(base + derived))
            a = [str(rng.choice(list(pool))) for _ in range(2)]
            if rng.random() < 0.1:
                a[1] = consts[rng.integers(n_const)]
            body.append((rel, tuple(a)))
        # make the head variables appear in the body
        first = list(body[0][1])
        first[0] = "x"
        body[0] = (body[0][0], tuple(first))
        last = list(body[-1][1])
        last[1] = "y"
        body[-1] = (body[-1][0], tuple(last))
        rules.append((head, body))
    lines = ["@domain obj = {" + ", ".join(consts) + "}", "@index x, y, z, w : obj"]
    for r in base + derived:
        lines.append(f"{r}(x, y)")
    for r, ts in facts.items():
        for a, b in sorted(ts):
            lines.append(f"{r}({a}, {b})")
    for (h, hargs), body in rules:
        rhs = ", ".join(f"{r}({', '.join(a)})" for r, a in body)
        lines.append(f"{h}({', '.join(hargs)}) <- {rhs}")
    return "\n".join(lines) + "\n", facts, rules, derived


def reachability(n, edges):
    """Floyd-Warshall transitive closure on 0..n-1."""
    r = np.zeros((n, n), dtype=bool)
    for a, b in edges:
        r[a, b] = True
    for k in range(n):
        r |= r[:, [k]] & r[[k], :]
    return {(a, b) for a in range(n) for b in range(n) if r[a, b]}


# --- Bayesian networks --------------------------------------------------------

def random_tree_bn(rng, n_vars=None, chain=False):
    """Random binary tree-structured BN: parents list and CPTs (child, parent)."""
    n = n_vars or int(rng.integers(2, 11))
    parents = [None] + [(k - 1 if chain else int(rng.integers(0, k))) for k in range(1, n)]
    cpts = []
    for k in range(n):
        if parents[k] is None:
            p = rng.uniform(0.05, 0.95)
            cpts.append(np.array([1 - p, p]))
        else:
            p = rng.uniform(0.05, 0.95, size=2)
            cpts.append(np.stack([1 - p, p]))  # [x, parent]
    return parents, cpts


def bn_joint(parents, cpts):
    n = len(parents)
    joint = np.zeros([2] * n)
    for x in itertools.product([0, 1], repeat=n):
        v = 1.0
        for k in range(n):
            v *= cpts[k][x[k]] if parents[k] is None else cpts[k][x[k], x[parents[k]]]
        joint[x] = v
    return joint


def bn_program(parents, cpts):
    """Tree BN as a program: marginals P<k>, evidence slots Ev<k>, partition function Z."""
    n = len(parents)
    children = {k: [c for c in range(n) if parents[c] == k] for k in range(n)}
    lines = [f"@domain v{k} = 2" for k in range(n)]
    for k in range(n):
        lines.append(f"CPT{k} = {np.round(cpts[k], 12).tolist()}")
        lines.append(f"Ev{k} = [1, 1]")
    # marginals top-down
    lines.append("P0[v0] = CPT0[v0]")
    for k in range(1, n):
        lines.append(f"P{k}[v{k}] = CPT{k}[v{k}, v{parents[k]}] P{parents[k]}[v{parents[k]}]")
    # messages bottom-up for the partition function
    for k in range(n - 1, 0, -1):
        msgs = " ".join(f"J{c}[v{k}]" for c in children[k])
        lines.append(f"J{k}[v{parents[k]}] = CPT{k}[v{k}, v{parents[k]}] Ev{k}[v{k}] {msgs}".rstrip())
    msgs = " ".join(f"J{c}[v0]" for c in children[0])
    lines.append(f"Z = CPT0[v0] Ev0[v0] {msgs}".rstrip())
    return "\n".join(lines) + "\n"


def bn_conditional(joint, query, evidence):
    """P(query | evidence); both are {var: value}."""
    def mass(assign):
        idx = tuple(assign.get(k, slice(None)) for k in range(joint.ndim))
        return joint[idx].sum()

    return mass({**evidence, **query}) / mass(evidence)


# --- random differentiable programs ---------------------------------------------

_NL = {"identity": "{}", "sigmoid": "sig({})", "relu": "relu({})", "exp": "exp({})"}


def random_diff_program(rng, max_depth=3):
    """Layered program over learned W tensors ending in a squared-error loss.

    Returns (source, inputs, learned names).  Ranks stay <= 3.
    """
    pool = ["a", "b", "c", "d"]
    sizes = {v: int(rng.integers(2, 4)) for v in pool}

    def pick(k):
        return [str(v) for v in rng.choice(pool, size=k, replace=False)]

    def ref(name, vs):
        return f"{name}[{', '.join(vs)}]" if vs else name

    lines = [f"@domain {v} = {n}" for v, n in sizes.items()]
    xv = pick(int(rng.integers(1, 4)))
    inputs = {"X": rng.normal(scale=0.7, size=[sizes[v] for v in xv])}
    avail = [("X", xv)]
    learned = []
    depth = int(rng.integers(1, max_depth + 1))
    out = []
    for layer in range(depth):
        out = pick(int(rng.integers(0, 3)))
        terms = []
        for t in range(int(rng.integers(1, 3))):
            # the first term reads the previous layer so every W reaches the loss
            prev, pv = avail[-1] if t == 0 else avail[int(rng.integers(len(avail)))]
            extra = [v for v in pv if v not in out]
            rng.shuffle(extra)
            wv = out + extra[: 3 - len(out)]
            w = f"W{len(learned)}"
            learned.append(w)
            inputs[w] = rng.normal(scale=0.6, size=[sizes[v] for v in wv])
            coef = float(rng.choice([1.0, -1.0, 0.5, 2.0]))
            body = f"{ref(w, wv)} {ref(prev, pv)}"
            terms.append(body if coef == 1.0 else f"{coef:g} {body}")
        nl = str(rng.choice(list(_NL)))
        h = f"H{layer}"
        rhs = " + ".join(terms).replace("+ -1 ", "- ")
        lines.append(f"{ref(h, out)} = {_NL[nl].format(rhs)}")
        avail.append((h, out))
    inputs["T"] = rng.normal(size=[sizes[v] for v in out])
    lines.append(f"{ref('Err', out)} = {ref(avail[-1][0], out)} - {ref('T', out)}")
    lines.append(f"Loss = {ref('Err', out)} {ref('Err', out)}")
    lines.append("@data X, T")
    return "\n".join(lines) + "\n", inputs, learned
