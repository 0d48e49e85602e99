import itertools
import math

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from tensorlogic.tensor import (
    BOOL,
    DomainMismatchError,
    IndexDomain,
    NonlinearitySpec,
    NumericError,
    TensorValue,
    UnknownIndexError,
    allclose,
    apply_unary,
    concat,
    contract,
    normalize,
    tensor_join,
    tensor_project,
)
from tensorlogic.tensorio import dumps, loads, read_text_tensor


def vec(vals, name="i"):
    return TensorValue.from_array(vals, [name])


def test_join_shared_index_is_elementwise():
    out = tensor_join(vec([1, 2]), vec([3, 4]))
    assert out.indices == ("i",)
    assert out.array.tolist() == [3, 8]


def test_join_disjoint_is_outer_product():
    out = tensor_join(vec([1, 2]), vec([3, 4], "j"))
    assert out.indices == ("i", "j")
    assert out.array.tolist() == [[3, 4], [6, 8]]


def test_sparse_boolean_join_sister_parent():
    person = IndexDomain("person", 3, ("Mary", "Ann", "Carl"))
    sister = TensorValue.from_coords([(0, 1)], ("x", "y"), (person, person))
    parent = TensorValue.from_coords([(1, 2)], ("y", "z"), (person, person))
    out = tensor_join(sister, parent)
    assert out.is_sparse
    # nested-loop oracle over all coordinate triples
    expected = {
        (x, y, z)
        for x, y, z in itertools.product(range(3), repeat=3)
        if sister.array[x, y] and parent.array[y, z]
    }
    assert {c for c, _ in out.entries()} == expected == {(0, 1, 2)}
    assert out.as_relation() == {("Mary", "Ann", "Carl")}


def test_join_domain_mismatch():
    with pytest.raises(DomainMismatchError):
        tensor_join(vec([1, 2]), vec([1, 2, 3]))


def test_project_examples():
    assert tensor_project(vec([0, 1, 1, 0]), []).item() == 2
    m = TensorValue.from_array([[1, 2], [3, 4]], ["i", "j"])
    assert tensor_project(m, ["i"]).array.tolist() == [3, 7]
    assert tensor_project(m, ["i"], "max").array.tolist() == [2, 4]
    assert tensor_project(m, ["j"], "avg").array.tolist() == [2, 3]
    with pytest.raises(UnknownIndexError):
        tensor_project(m, ["k"])


def test_project_empty_reduction_is_zero():
    t = TensorValue.zeros(["i", "j"], [2, 0])
    assert tensor_project(t, ["i"], "max").array.tolist() == [0, 0]
    assert tensor_project(t, ["i"], "avg").array.tolist() == [0, 0]


def test_apply_unary():
    out = apply_unary(vec([1.2, 0, -0.7]), NonlinearitySpec("step"))
    assert out.array.tolist() == [1, 0, 0]
    assert out.dtype == BOOL
    half = apply_unary(TensorValue.scalar(0), NonlinearitySpec("sigmoid", temperature=1.0))
    assert half.item() == 0.5
    cold = apply_unary(TensorValue.scalar(0.3), NonlinearitySpec("sigmoid", temperature=0.01))
    assert abs(cold.item() - 1.0) < 1e-12
    assert abs(cold.item() - 1 / (1 + math.exp(-30))) < 1e-16


def test_sqrt_negative_reports_coordinate():
    with pytest.raises(NumericError, match=r"\(1,\)"):
        apply_unary(vec([1.0, -4.0]), NonlinearitySpec("sqrt"))


def test_normalize():
    sm = normalize(vec([0.0, 0.0]), "i", "softmax")
    assert sm.array.tolist() == [0.5, 0.5]
    rng = np.random.default_rng(0)
    m = TensorValue.from_array(rng.normal(size=(5, 7)) * 10, ["p", "q"])
    rows = normalize(m, "q", "softmax").array.sum(axis=1)
    assert np.all(np.abs(rows - 1) <= 1e-12)
    ln = normalize(TensorValue.from_array([1.0, 3.0], ["d"]), "d", "lnorm", eps=0.0)
    assert ln.array.tolist() == [-1.0, 1.0]


def test_concat():
    t = TensorValue.from_array(np.arange(6).reshape(2, 3), ["h", "d"])
    out = concat(t, ["h", "d"], "m")
    assert out.shape == (6,)
    assert out.array[3] == t.array[1, 0]
    same = concat(vec([5, 6]), ["i"], "k")
    assert same.indices == ("k",) and same.array.tolist() == [5, 6]
    # h heads x d_v values -> d_m = h * d_v
    attn = TensorValue.from_array(np.ones((3, 2, 4, 5)), ["b", "h", "p", "dv"])
    merged = concat(attn, ["h", "dv"], "dm")
    assert merged.indices == ("b", "dm", "p")
    assert merged.domain_of("dm").cardinality == 2 * 5
    with pytest.raises(ValueError):
        concat(attn, ["h", "dv"], "p")


# --- properties -------------------------------------------------------------

NAMES = "abcde"


@st.composite
def tensor_over(draw, names, sizes, boolean=False):
    shape = [sizes[n] for n in names]
    n = int(np.prod(shape)) if shape else 1
    if boolean:
        vals = draw(st.lists(st.sampled_from([0.0, 1.0]), min_size=n, max_size=n))
    else:
        vals = draw(st.lists(st.floats(-3, 3), min_size=n, max_size=n))
    return TensorValue.from_array(np.array(vals).reshape(shape), list(names), shape, BOOL if boolean else "real")


@st.composite
def join_pair(draw, boolean=False):
    sizes = {n: draw(st.integers(1, 3)) for n in NAMES}
    u = draw(st.lists(st.sampled_from(NAMES), unique=True, max_size=3))
    v = draw(st.lists(st.sampled_from(NAMES), unique=True, max_size=3))
    return draw(tensor_over(u, sizes, boolean)), draw(tensor_over(v, sizes, boolean))


@given(join_pair())
@settings(max_examples=60, deadline=None)
def test_join_rank_law_and_commutativity(pair):
    u, v = pair
    uv, vu = tensor_join(u, v), tensor_join(v, u)
    shared = len(set(u.indices) & set(v.indices))
    assert uv.rank == u.rank + v.rank - shared
    assert allclose(uv, vu)


@given(join_pair(boolean=True), st.data())
@settings(max_examples=60, deadline=None)
def test_boolean_join_project_matches_relational_oracle(pair, data):
    u, v = pair
    j = tensor_join(u.to_sparse(), v.to_sparse())
    keep = data.draw(st.lists(st.sampled_from(j.indices), unique=True)) if j.indices else []
    got = apply_unary(tensor_project(j, keep), NonlinearitySpec("step"))
    # tuple-at-a-time oracle: relational join, then projection
    ru = [dict(zip(u.indices, c)) for c, _ in u.entries()]
    rv = [dict(zip(v.indices, c)) for c, _ in v.entries()]
    expected = set()
    for a in ru:
        for b in rv:
            if all(a[n] == b[n] for n in a if n in b):
                row = {**a, **b}
                expected.add(tuple(row[n] for n in keep))
    assert {c for c, _ in got.entries()} == expected


@given(join_pair(), st.data())
@settings(max_examples=60, deadline=None)
def test_sparse_and_dense_paths_agree(pair, data):
    u, v = pair
    names = sorted(set(u.indices) | set(v.indices))
    keep = data.draw(st.lists(st.sampled_from(names), unique=True)) if names else []
    dense = contract([u.to_dense(), v.to_dense()], keep)
    for a, b in [(u.to_sparse(), v.to_sparse()), (u.to_sparse(), v.to_dense()), (u.to_dense(), v.to_sparse())]:
        assert np.allclose(contract([a, b], keep).array, dense.array, rtol=1e-12, atol=1e-12)


def test_multiway_join_order_independence():
    rng = np.random.default_rng(1)
    a = TensorValue.from_array(rng.normal(size=(3, 4)), ["i", "j"])
    b = TensorValue.from_array(rng.normal(size=(4, 5)), ["j", "k"])
    c = TensorValue.from_array(rng.normal(size=(5, 3)), ["k", "i"])
    r1 = tensor_project(tensor_join(tensor_join(a, b), c), ["i"])
    r2 = tensor_project(tensor_join(a, tensor_join(b, c)), ["i"])
    r3 = tensor_project(tensor_join(tensor_join(c, a), b), ["i"])
    assert np.allclose(r1.array, r2.array, rtol=1e-12) and np.allclose(r1.array, r3.array, rtol=1e-12)


@given(join_pair())
@settings(max_examples=40, deadline=None)
def test_serialization_round_trip(pair):
    u, _ = pair
    for t in (u, u.to_sparse()):
        name, back = loads(dumps("T", t))
        assert name == "T" and back.indices == t.indices and back.is_sparse == t.is_sparse
        assert np.array_equal(back.array, t.array)


def test_serialization_keeps_symbols_and_bools():
    person = IndexDomain("person", 3, ("Alice", "Bob", "Charlie"))
    r = TensorValue.from_coords([(0, 1), (1, 2)], ("x", "y"), (person, person))
    _, back = loads(dumps("Parent", r))
    assert back.as_relation() == {("Alice", "Bob"), ("Bob", "Charlie")}
    assert back.dtype == BOOL


def test_read_text_tensor(tmp_path):
    f = tmp_path / "t.txt"
    f.write_text("Alice loves Bob")
    m, vocab = read_text_tensor(f)
    assert m.as_relation() == {(0, "Alice"), (1, "loves"), (2, "Bob")}
    f.write_text("")
    empty, vocab = read_text_tensor(f)
    assert empty.shape == (0, 0)
    f.write_text("a b a")
    m, vocab = read_text_tensor(f)
    assert vocab.symbols == ("a", "b")
    assert {c for c, _ in m.entries()} == {(0, 0), (1, 1), (2, 0)}
