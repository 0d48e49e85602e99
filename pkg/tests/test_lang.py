import pytest

from tensorlogic.corpus import corpus
from tensorlogic.desugar import DesugarError, compile_program, desugar
from tensorlogic.domains import DomainError, infer_domains, tensor_domains
from tensorlogic.engine import load_inputs
from tensorlogic.parser import ArityError, ParseError, parse_program, parse_query
from tensorlogic.printer import pretty_print
from tensorlogic.syntax import Const, Offset, Scaled, Slice, TensorRef, Var, Window


def test_perceptron_equation_shape():
    p = parse_program("Y = step(W[i] X[i])")
    (eq,) = p.equations
    assert eq.lhs == TensorRef("Y")
    assert eq.op == "sum"
    assert eq.nonlinearity.kind == "step"
    (term,) = eq.terms
    assert term.coef == 1.0
    assert [f.name for f in term.factors] == ["W", "X"]
    assert term.factors[0].args == (Var("i"),)


def test_datalog_rule_becomes_step_equation():
    p = parse_program("Aunt(x,z) <- Sister(x,y), Parent(y,z)")
    (eq,) = p.equations
    assert eq.datalog and eq.lhs.boolean
    assert eq.nonlinearity.kind == "step"
    assert [f.name for f in eq.terms[0].factors] == ["Sister", "Parent"]
    assert eq.terms[0].factors[1].args == (Var("y"), Var("z"))


def test_facts_form_sparse_boolean_vector():
    p = compile_program("@domain i = 4\nX(i)\nX(1), X(2)\n")
    x = load_inputs(p)["X"]
    assert x.is_sparse
    assert x.array.tolist() == [0, 1, 1, 0]


def test_index_forms():
    p = parse_program("@const S = 2\nA[t+1, x/S, 4:8, *t, p'., x+dx, 3] = softmax(B[t, x, dx, p'])")
    args = p.equations[0].lhs.args
    assert args[0] == Offset("t", 1)
    assert args[1] == Scaled("x", 2)
    assert args[2] == Slice(4, 8)
    assert args[3] == Var("t", virtual=True)
    assert args[4] == Var("p'", normalized=True)
    assert args[5] == Window("x", "dx")
    assert args[6] == Const(3)


def test_syntax_error_has_position():
    with pytest.raises(ParseError) as e:
        parse_program("Z = 1\nY = W[i] X[i]]")
    assert e.value.line == 2


def test_arity_inconsistency():
    with pytest.raises(ArityError):
        parse_program("Y = W[i] X[i]\nZ = X[i,j]")


def test_unknown_directive():
    with pytest.raises(ParseError):
        parse_program("@frobnicate X")


def test_literal_binds_domain():
    p = infer_domains(parse_program("W = [0.2, 1.9, -0.7, 3]\nY = W[i]"))
    assert p.equation_domains[0]["i"].cardinality == 4


def test_constants_make_symbol_domain():
    p = infer_domains(parse_program("Likes(Alice, Bob)\nLikes(Bob, Charlie)\nLikes(x, y)?"))
    (d0, d1) = tensor_domains(p, "Likes")
    assert d0 is d1 or d0 == d1
    assert d0.cardinality == 3
    assert set(d0.symbols) == {"Alice", "Bob", "Charlie"}


def test_conflicting_sizes_rejected():
    with pytest.raises(DomainError) as e:
        infer_domains(parse_program("@domain i = 5\nW[i] = [0.2, 1.9, -0.7, 3]\nY = W[i]"))
    assert "4" in str(e.value) and "5" in str(e.value)


def test_unresolvable_domain_names_variable():
    with pytest.raises(DomainError) as e:
        infer_domains(parse_program("Y[k] = W[k, j] X[j]"))
    assert "'k'" in str(e.value) or "'j'" in str(e.value)


def test_multi_term_keeps_one_group():
    p = compile_program("@const C = -1\nW = [1, 2]\nX = [1, 1]\nY = step(W[i] X[i] + C)")
    (eq,) = p.equations
    assert len(eq.terms) == 2
    assert eq.terms[1].coef == -1 and eq.terms[1].factors == ()
    assert eq.nonlinearity.kind == "step"


def test_same_head_rules_merge():
    src = "Parent(A, B)\nAncestor(x,y) <- Parent(x,y)\nAncestor(x,z) <- Ancestor(x,y), Parent(y,z)"
    p = compile_program(src)
    (eq,) = p.equations
    assert len(eq.terms) == 2
    assert eq.nonlinearity.kind == "step"
    # head variables agree after renaming
    assert all(set(eq.lhs.vars) <= set(t.vars) for t in eq.terms)


def test_single_equation_unchanged():
    p = infer_domains(parse_program("W = [1, 2]\nX = [3, 4]\nY = W[i] X[i]"))
    assert desugar(p).equations == p.equations


def test_mixed_nonlinearities_rejected():
    with pytest.raises(DesugarError):
        compile_program("X = [1, 2]\nY[i] = sig(X[i])\nY[i] = relu(X[i])")


def test_missing_lhs_index_rejected():
    with pytest.raises(DesugarError):
        compile_program("@domain j = 3\nX = [1, 2]\nY[i, j] = X[i]")


def test_nested_call_lifted():
    p = compile_program("X = [[1, 2], [3, 4]]\nY[i] = relu(X[i, j]) ")
    assert len(p.equations) == 1
    p = compile_program("X = [[1, 2], [3, 4]]\nY[i] = 2 sig(X[i, j])")
    names = [e.lhs.name for e in p.equations]
    assert names == ["Y__1", "Y"]
    assert p.equations[0].lhs.vars == ("i", "j")


PERCEPTRON = """
W = [0.2, 1.9, -0.7, 3]
X = [0, 1, 1, 0]
Y = step(W[i] X[i])
Y?
"""

GNN_TABLE = """
Neig(n, n')
Emb[n, 0, d] = X[n, d]
Z[n, l, d'] = relu(W_P[l, d', d] Emb[n, l, d])
Agg[n, l, d] = Neig(n, n') Z[n', l, d]
Emb[n, l+1, d] = relu(W_Agg Agg[n, l, d] + W_Self Emb[n, l, d])
YNode[n] = sig(W_Out[d] Emb[n, L, d])
YEdge[n, n'] = sig(Emb[n, L, d] Emb[n', L, d])
YGraph = sig(W_Out[d] Emb[n, L, d])
"""


@pytest.mark.parametrize("src", [PERCEPTRON, GNN_TABLE])
def test_round_trip(src):
    p = parse_program(src)
    assert parse_program(pretty_print(p)) == p


def test_round_trip_keeps_markers():
    src = "X[i, *t+1] = sig(W[i, j] X[j, *t])\nComp[p, p'.] = softmax(Q[p, k] K[p', k])"
    p = parse_program(src)
    text = pretty_print(p)
    assert "*t+1" in text and "*t]" in text and "p'." in text
    assert parse_program(text) == p


@pytest.mark.parametrize("entry", corpus(), ids=lambda c: c.name)
def test_corpus_parses_and_round_trips(entry):
    p = parse_program(entry.source)
    once = pretty_print(p)
    assert parse_program(once) == p
    assert pretty_print(parse_program(once)) == once
    entry.compile()


def test_parse_query_forms():
    q = parse_query("Ancestor(Alice, x)?")
    assert q.target.args == (Const("Alice"), Var("x"))
    q = parse_query("Z? Ev_C(1) | Ev_A(0)")
    assert q.conditional
    assert q.query_facts[0].name == "Ev_C" and q.evidence[0].name == "Ev_A"
