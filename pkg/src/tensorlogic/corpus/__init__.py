"""Executable example programs with seeded inputs and their checks.

Each entry pairs ``.tl`` source with a generator of input tensors and a list
of named checks that compare the computed environment against direct numpy
or loop oracles.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from importlib import resources
from typing import Callable

import numpy as np

from ..desugar import compile_program
from ..engine import Environment, answer_query, load_inputs, run_program
from ..tensor import BOOL, TensorValue


@dataclass(frozen=True)
class CorpusProgram:
    name: str
    source: str
    inputs: Callable = lambda seed: {}
    checks: tuple = ()
    description: str = ""

    def compile(self, seed=0):
        inputs = self.inputs(seed)
        return compile_program(self.source, inputs=inputs), inputs

    def run(self, seed=0, cfg=None):
        p, inputs = self.compile(seed)
        env, results = run_program(p, inputs=inputs, cfg=cfg)
        return p, env, results, inputs

    def verify(self, seed=0):
        """Run every check; returns ``[(check name, ok, message)]``."""
        p, env, results, inputs = self.run(seed)
        out = []
        for name, fn in self.checks:
            try:
                fn(p, env, inputs)
                out.append((name, True, ""))
            except AssertionError as e:
                out.append((name, False, str(e)))
        return out


def source(name: str) -> str:
    return resources.files(__name__).joinpath(f"{name}.tl").read_text(encoding="utf-8")


def _bool(coords, *sizes):
    names = [f"i{k}" for k in range(len(sizes))]
    return TensorValue.from_coords({tuple(c): 1.0 for c in coords}, names, sizes, BOOL)


def _sig(x):
    return 1.0 / (1.0 + np.exp(-x))


def _close(a, b, tol, what):
    err = float(np.max(np.abs(np.asarray(a) - np.asarray(b)))) if np.size(a) else 0.0
    assert err <= tol, f"{what}: max deviation {err:.3g} > {tol}"


# --- generators ---------------------------------------------------------------

def _mlp_inputs(seed):
    rng = np.random.default_rng(seed)
    x0 = rng.uniform(0.5, 1.5, size=(5, 3))
    coords = {(e, 0, j): x0[e, j] for e in range(5) for j in range(3)}
    X = TensorValue(("e", "i", "j"), (5, 4, 3), "real", coords=coords)
    return {"X": X, "W": rng.normal(size=(4, 3, 3)), "Y": rng.uniform(size=(5, 3))}


def _rnn_inputs(seed):
    rng = np.random.default_rng(seed)
    return {"W": rng.normal(scale=0.5, size=(4, 4)), "V": rng.normal(scale=0.5, size=(4, 4)),
            "U": rng.normal(size=(4, 6)), "Y": rng.uniform(size=4)}


def _cnn_inputs(seed):
    rng = np.random.default_rng(seed)
    return {"Filter": rng.normal(size=(3, 3, 2)), "Image": rng.normal(size=(8, 8, 2))}


def _gnn_inputs(seed):
    rng = np.random.default_rng(seed)
    n = 6
    edges = set()
    for a in range(n):
        edges.add((a, (a + 1) % n))
    while len(edges) < 9:
        a, b = rng.integers(0, n, size=2)
        if a != b:
            edges.add((int(a), int(b)))
    sym = edges | {(b, a) for a, b in edges}
    return {
        "Neig": _bool(sorted(sym), n, n),
        "X": rng.normal(size=(n, 4)),
        "W_P": rng.normal(scale=0.5, size=(3, 4, 4)),
        "W_Agg": np.array(0.3),
        "W_Self": np.array(0.7),
        "W_Out": rng.normal(size=4),
    }


def _transformer_inputs(seed):
    rng = np.random.default_rng(seed)
    tokens = rng.integers(0, 16, size=8)
    s = 0.3
    return {
        "X": _bool([(p, int(t)) for p, t in enumerate(tokens)], 8, 16),
        "Emb": rng.normal(scale=s, size=(16, 16)),
        "W_Q": rng.normal(scale=s, size=(2, 2, 8, 16)),
        "W_K": rng.normal(scale=s, size=(2, 2, 8, 16)),
        "W_V": rng.normal(scale=s, size=(2, 2, 8, 16)),
        "W_S": rng.normal(scale=s, size=(2, 16, 16)),
        "W_P": rng.normal(scale=s, size=(2, 32, 16)),
        "W_M": rng.normal(scale=s, size=(2, 16, 32)),
        "W_O": rng.normal(scale=s, size=(16, 16)),
    }


def _kernel_inputs(seed):
    rng = np.random.default_rng(seed)
    return {"X": rng.normal(size=(6, 3)), "A": rng.uniform(size=6), "Y": rng.choice([-1.0, 1.0], size=6)}


def _tucker_inputs(seed):
    rng = np.random.default_rng(seed)
    return {"M": rng.normal(size=(6, 2)), "M'": rng.normal(size=(6, 2)), "M''": rng.normal(size=(6, 2)),
            "C": rng.normal(size=(2, 2, 2))}


def _embed_inputs(seed):
    from ..embed import make_embedding_space

    space = make_embedding_space(6, 256, seed)
    return {"Emb": space.matrix}


# --- checks -------------------------------------------------------------------

def _check_perceptron(p, env, inputs):
    w, x = np.array([0.2, 1.9, -0.7, 3]), np.array([0, 1, 1, 0])
    pre = sum(a * b for a, b in zip(w, x))
    assert abs(pre - 1.2) < 1e-12
    assert env["Y"].item() == (1.0 if pre > 0 else 0.0)
    assert env["YBias"].item() == (1.0 if pre - 1 > 0 else 0.0)
    _close(env["YElem"].array, (w * x > 0).astype(float), 0, "YElem")


def _check_ancestor(p, env, inputs):
    r = answer_query(p, "Ancestor(Alice, x)?")
    assert r.tuples() == {"Bob", "Charlie"}, r.tuples()


def _check_aunt(p, env, inputs):
    assert env["Aunt"].as_relation() == {("Mary", "Carl")}


def _check_mlp(p, env, inputs):
    X = inputs["X"].array.copy()
    W = inputs["W"]
    for i in range(1, 4):
        X[:, i, :] = _sig(np.einsum("jk,ek->ej", W[i], X[:, i - 1, :]))
    _close(env["X"].array, X, 1e-12, "layers")


def _check_rnn(p, env, inputs):
    s = np.zeros(4)
    for t in range(5):
        s = _sig(inputs["W"] @ s + inputs["V"] @ inputs["U"][:, t])
    _close(env["X"].array, s, 1e-12, "final state")


def _conv_oracle(inputs, relu=True):
    F, img = inputs["Filter"], inputs["Image"]
    out = np.zeros((6, 6))
    for x in range(6):
        for y in range(6):
            acc = 0.0
            for dx in range(3):
                for dy in range(3):
                    for ch in range(2):
                        acc += F[dx, dy, ch] * img[x + dx, y + dy, ch]
            out[x, y] = max(acc, 0.0) if relu else acc
    return out


def _check_cnn(p, env, inputs):
    feats = env["Features"].array
    _close(feats, _conv_oracle(inputs), 1e-12, "convolution")
    pooled = np.zeros((3, 3))
    maxed = np.full((3, 3), -np.inf)
    for x in range(6):
        for y in range(6):
            pooled[x // 2, y // 2] += feats[x, y]
            maxed[x // 2, y // 2] = max(maxed[x // 2, y // 2], feats[x, y])
    assert np.array_equal(env["Pooled"].array, pooled), "sum pooling differs from loop"
    assert np.array_equal(env["MaxPooled"].array, maxed), "max pooling differs from loop"
    # the fused form applies relu after pooling the pre-activations
    pre = _conv_oracle(inputs, relu=False).reshape(3, 2, 3, 2).sum(axis=(1, 3))
    _close(env["PooledConv"].array, np.maximum(pre, 0), 1e-12, "fused conv+pool")


def _check_gnn(p, env, inputs):
    A = inputs["Neig"].array
    emb = [inputs["X"]]
    for l in range(2):
        z = np.maximum(np.einsum("ed,nd->ne", inputs["W_P"][l], emb[l]), 0)
        agg = A @ z
        emb.append(np.maximum(inputs["W_Agg"] * agg + inputs["W_Self"] * emb[l], 0))
    _close(env["Emb"].array[:, 2, :], emb[2], 1e-12, "final embeddings")
    y = env["YEdge"].array
    assert np.array_equal(y, y.T), "edge scores not symmetric"
    _close(env["YNode"].array, _sig(emb[2] @ inputs["W_Out"]), 1e-12, "node head")
    _close(env["YGraph"].item(), _sig((emb[2] @ inputs["W_Out"]).sum()), 1e-12, "graph head")


def _check_transformer(p, env, inputs):
    comp = env["Comp"].array[0]
    _close(comp.sum(axis=-1), 1.0, 1e-6, "Comp rows")
    y = env["Y"].array
    _close(y.sum(axis=-1), 1.0, 1e-6, "Y rows")
    assert env["Merge"].shape == (2, 8, 16), env["Merge"].shape
    assert np.isfinite(y).all()


def _check_kernel_poly(p, env, inputs):
    X = inputs["X"]
    K = (X @ X.T) ** 2
    _close(env["K"].array, K, 1e-9, "kernel")
    pred = _sig(K @ (inputs["A"] * inputs["Y"]) + 0.1)
    _close(env["Pred"].array, pred, 1e-12, "predictions")


def _check_kernel_gauss(p, env, inputs):
    K = env["K"].array
    assert np.array_equal(K, K.T), "Gram matrix not symmetric"
    lo = float(np.linalg.eigvalsh(K).min())
    assert lo >= -1e-8, f"min eigenvalue {lo}"
    X = inputs["X"]
    _close(K, np.exp(-((X[:, None, :] - X[None, :, :]) ** 2).sum(-1) / 2), 1e-12, "kernel")


def _check_tucker(p, env, inputs):
    ref = np.einsum("ip,jq,kr,pqr->ijk", inputs["M"], inputs["M'"], inputs["M''"], inputs["C"])
    _close(env["A"].array, ref, 1e-12, "reconstruction")


def _check_sugar(p, env, inputs):
    assert env["Flat"].array.tolist() == [1, 2, 3, 4, 5, 6]
    assert env["Part"].array.tolist() == [4, 5, 6, 7]
    _close(env["Soft"].array.sum(), 1.0, 1e-12, "softmax")
    L = np.array([[0.5, 0.1], [0.2, 0.3]])
    s = np.ones(2)
    for t in range(5):
        _close(env["Seq"].array[:, t], s, 1e-12, f"Seq[:, {t}]")
        s = L @ s


def _check_bn(p, env, inputs):
    pa = np.array([0.6, 0.4])
    pb = np.array([[0.7, 0.2], [0.3, 0.8]])
    pc = np.array([[0.9, 0.5], [0.1, 0.5]])
    joint = np.einsum("a,ba,cb->abc", pa, pb, pc)
    _close(env["P_B"].array, joint.sum((0, 2)), 1e-12, "P_B")
    _close(env["P_C"].array, joint.sum((0, 1)), 1e-12, "P_C")
    _close(answer_query(p, "Z?").scalar(), 1.0, 1e-9, "Z")
    cond = joint[0, :, 1].sum() / joint[0].sum()
    _close(answer_query(p, "Z? Ev_C(1) | Ev_A(0)").scalar(), cond, 1e-9, "P(C=1 | A=0)")


def _check_embed(p, env, inputs):
    assert abs(env["DSet"].array[0] - 1) < 0.3
    assert abs(env["DPair"].array[0, 1] - 1) < 0.3
    _close(np.diag(env["Sim"].array), 1.0, 1e-12, "Gram diagonal")


_ENTRIES = [
    ("perceptron", "perceptron with literal weights", None, [("Y is 1", _check_perceptron)]),
    ("ancestor", "ancestor closure", None, [("Ancestor(Alice,x)", _check_ancestor)]),
    ("aunt", "aunt rule", None, [("Aunt join", _check_aunt)]),
    ("xor", "2-2-1 sigmoid network for XOR (train with `tl train`)", None, []),
    ("mlp", "recursive multilayer perceptron", _mlp_inputs, [("layers match loop", _check_mlp)]),
    ("rnn", "recurrent network with a virtual time index", _rnn_inputs, [("final state", _check_rnn)]),
    ("cnn", "convolution with sum and max pooling", _cnn_inputs, [("pooling matches loop", _check_cnn)]),
    ("gnn", "graph neural network", _gnn_inputs, [("message passing", _check_gnn)]),
    ("transformer", "one-block transformer", _transformer_inputs, [("softmax rows", _check_transformer)]),
    ("kernel_poly", "polynomial kernel machine", _kernel_inputs, [("kernel values", _check_kernel_poly)]),
    ("kernel_gauss", "gaussian kernel Gram matrix", _kernel_inputs, [("Gram PSD", _check_kernel_gauss)]),
    ("tucker", "Tucker reconstruction", _tucker_inputs, [("einsum oracle", _check_tucker)]),
    ("sugar", "concat, slices, softmax, index offsets", None, [("values", _check_sugar)]),
    ("bn_chain", "chain Bayesian network and its join tree", None, [("marginals and Z", _check_bn)]),
    ("embed_demo", "sets and relations in embedding space", _embed_inputs, [("retrieval", _check_embed)]),
]


def corpus() -> list:
    out = []
    for name, desc, gen, checks in _ENTRIES:
        out.append(CorpusProgram(name, source(name), gen or (lambda seed: {}), tuple(checks), desc))
    return out


def get(name: str) -> CorpusProgram:
    for c in corpus():
        if c.name == name:
            return c
    raise KeyError(name)


def causal_transformer_source() -> str:
    """Transformer with a triangular attention mask joined in as a condition tensor."""
    src = source("transformer")
    old = "softmax(Query[b, h, p, d_k] Key[b, h, p', d_k] / sqrt(D_k))"
    new = "softmax(Query[b, h, p, d_k] Key[b, h, p', d_k] / sqrt(D_k) - 1e9 Future(p, p') Heads(b, h))"
    assert old in src
    lines = ["Future(p, p')", "Heads(b, h)"]
    return src.replace(old, new).replace("@data X, Even, Odd", "\n".join(lines) + "\n@data X, Even, Odd, Future, Heads")


def causal_inputs(seed):
    inputs = _transformer_inputs(seed)
    inputs["Future"] = _bool([(p, q) for p in range(8) for q in range(8) if q > p], 8, 8)
    inputs["Heads"] = _bool([(b, h) for b in range(2) for h in range(2)], 2, 2)
    return inputs
