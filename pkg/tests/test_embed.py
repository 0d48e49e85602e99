import numpy as np
import pytest

from oracles import reachability
from tensorlogic.desugar import compile_program
from tensorlogic.embed import (
    EmbeddingError,
    ReasonerConfig,
    decode,
    embed_program,
    embed_relation,
    embed_set,
    gram,
    make_embedding_space,
    membership,
    membership_trials,
    reason_embedded,
    reify,
    retrieve,
    space_for,
)
from tensorlogic.engine import UnknownConstantError, forward_chain
from tensorlogic.tensor import sigmoid, step


def test_space_rows_are_unit_and_nearly_orthogonal():
    E = make_embedding_space(64, 1024, seed=0)
    g = gram(E)
    np.testing.assert_allclose(np.diag(g), 1.0, atol=1e-12)
    off = g - np.diag(np.diag(g))
    assert np.abs(off).max() < 0.2


def test_space_is_deterministic():
    a = make_embedding_space(10, 32, seed=5)
    b = make_embedding_space(10, 32, seed=5)
    assert np.array_equal(a.matrix, b.matrix)


def test_gram_symmetric_psd():
    g = gram(make_embedding_space(40, 16, seed=1))
    assert np.array_equal(g, g.T)
    assert np.linalg.eigvalsh(g).min() >= -1e-8


def test_embed_set_edge_cases():
    E = make_embedding_space(["A", "B", "C"], 64, seed=0)
    assert not embed_set(set(), E).any()
    np.testing.assert_array_equal(embed_set({"A"}, E), E.vector("A"))
    S = embed_set({"A", "C"}, E)
    assert membership(S, E, "A")[0] == 1
    with pytest.raises(UnknownConstantError):
        membership(S, E, "Z")


def test_membership_statistics():
    ins, outs = membership_trials(32, 1024, 2000, seed=0)
    assert 0.12 <= outs.std() <= 0.24
    assert abs(ins.mean() - 1) < 3 * 0.177
    assert np.mean(outs > 0.5) <= 0.01


def test_relation_embedding_edge_cases():
    E = make_embedding_space(["A", "B"], 16, seed=0)
    assert not embed_relation([], E, arity=2).tensor.any()
    er = embed_relation([("A", "B")], E)
    np.testing.assert_array_equal(er.tensor, np.outer(E.vector("A"), E.vector("B")))


def _random_relation(rng, n_obj, size):
    objs = [f"O{k}" for k in range(n_obj)]
    rel = set()
    while len(rel) < size:
        a, b = rng.integers(0, n_obj, size=2)
        rel.add((objs[a], objs[b]))
    return objs, rel


def test_retrieval_approximates_relation():
    rng = np.random.default_rng(0)
    objs, rel = _random_relation(rng, 30, 20)
    E = make_embedding_space(objs, 1024, seed=1)
    er = embed_relation(rel, E)
    scores = retrieve(er, E).array
    truth = np.array([[(a, b) in rel for b in objs] for a in objs], dtype=float)
    assert np.abs(scores - truth).max() < 0.15
    a, b = sorted(rel)[0]
    assert retrieve(er, E, (a, b)).item() == pytest.approx(1, abs=0.15)


def test_zero_binding_decode_recovers_relation():
    rng = np.random.default_rng(2)
    objs, rel = _random_relation(rng, 30, 20)
    E = make_embedding_space(objs, 2048, seed=3)
    t = retrieve(embed_relation(rel, E), E)
    got = {(objs[i], objs[j]) for i, j in zip(*np.nonzero(t.array > 0.5))}
    assert got == rel


def test_one_free_slot():
    objs = ["A", "B", "C", "D", "E"]
    E = make_embedding_space(objs, 1024, seed=0)
    s = retrieve(embed_relation({("A", "B"), ("A", "C")}, E), E, ("A", None)).array
    assert abs(s[1] - 1) < 0.2 and abs(s[2] - 1) < 0.2
    assert np.abs(s[[0, 3, 4]]).max() < 0.2
    with pytest.raises(UnknownConstantError):
        retrieve(embed_relation({("A", "B")}, E), E, ("Q", None))


def test_decoding_is_linear():
    E = make_embedding_space(8, 64, seed=0)
    r1 = embed_relation({(0, 1), (2, 3)}, E)
    r2 = embed_relation({(4, 5)}, E)
    np.testing.assert_allclose(decode(r1.tensor + r2.tensor, E), decode(r1.tensor, E) + decode(r2.tensor, E),
                               atol=1e-12)


def test_reify_triples():
    triples, ids = reify("R", [("A", "B", "C")])
    assert triples == [("R#0", 0, "A"), ("R#0", 1, "B"), ("R#0", 2, "C")]
    with pytest.raises(EmbeddingError):
        embed_relation([("A", "B", "C", "D")], make_embedding_space(["A", "B", "C", "D"], 4))


ANCESTOR = "Ancestor(x, y) <- Parent(x, y)\nAncestor(x, z) <- Ancestor(x, y), Parent(y, z)\n"


def chain(n):
    return "\n".join(f"Parent(P{k}, P{k + 1})" for k in range(n)) + "\n" + ANCESTOR


def test_ancestor_rules_embed_as_einsums():
    p = compile_program(chain(2))
    ep = embed_program(p, space_for(p, 64))
    (eq,) = ep.program.equations
    assert eq.lhs.name == "EmbAncestor" and len(eq.terms) == 2
    assert [f.name for f in eq.terms[1].factors] == ["EmbAncestor", "EmbParent"]
    assert "EmbParent" in ep.inputs


def test_facts_only_program():
    p = compile_program("Parent(A, B)\nParent(B, C)")
    ep = embed_program(p, space_for(p, 64))
    assert ep.program.equations == ()
    assert ep.inputs["EmbParent"].shape == (64, 64)


def test_non_boolean_program_rejected():
    p = compile_program("W = [1, 2]\nY = sig(W[i])")
    with pytest.raises(EmbeddingError):
        embed_program(p, make_embedding_space(2, 8))


def test_single_join_matches_symbolic():
    src = "Sister(Mary, Ann)\nSister(Ann, Mary)\nParent(Ann, Carl)\nParent(Mary, Dora)\nAunt(x, z) <- Sister(x, y), Parent(y, z)"
    p = compile_program(src)
    ep = embed_program(p, space_for(p, 2048, seed=0))
    env = reason_embedded(ep)
    assert env["Aunt"].as_relation() == forward_chain(p)["Aunt"].as_relation()


def test_embedded_chain_equals_symbolic_closure():
    p = compile_program(chain(6))
    ep = embed_program(p, space_for(p, 2048, seed=0))
    env = reason_embedded(ep, ReasonerConfig(temperature=0, reembed_interval=1))
    expected = {(f"P{a}", f"P{b}") for a, b in reachability(7, [(k, k + 1) for k in range(6)])}
    assert env["Ancestor"].as_relation() == expected
    soft = reason_embedded(ep, ReasonerConfig(temperature=1e-3))
    assert soft["Ancestor"].as_relation() == expected
    back = reason_embedded(ep, ReasonerConfig(mode="backward"), target="Ancestor")
    assert back["Ancestor"].as_relation() == expected


def test_without_reembedding_scores_drift():
    p = compile_program(chain(4))
    ep = embed_program(p, space_for(p, 512, seed=0))
    env = reason_embedded(ep, ReasonerConfig(reembed_interval=None, max_sweeps=6))
    assert np.isfinite(env["Ancestor__score"].array).all()


def test_temperature_limit():
    x = np.concatenate([np.linspace(-5, -0.01, 200), np.linspace(0.01, 5, 200)])
    assert np.abs(sigmoid(x, 1e-4) - step(x)).max() < 1e-8
