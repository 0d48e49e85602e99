import json

import numpy as np
import pytest

from tensorlogic.corpus import get
from tensorlogic.desugar import compile_program
from tensorlogic.learn import (
    OptimizerConfig,
    TrainingDivergedError,
    init_params,
    parse_surrogate,
    train,
    tucker_fit,
    tucker_reconstruct,
)

LINREG = "Y[e] = W[i] X[e, i]\nErr[e] = Y[e] - T[e]\nLoss = Err[e] Err[e]\n@data X, T\n"


def _linreg_data(n=50, seed=0):
    rng = np.random.default_rng(seed)
    x = rng.normal(size=(n, 2))
    return x, 3 * x[:, 0] - 2 * x[:, 1] + 0.05 * rng.normal(size=n)


def test_xor_reaches_target():
    p = compile_program(get("xor").source)
    env, report = train(p)
    assert report.final_loss < 0.01
    assert report.epochs <= 5000
    y = env["Y"].array
    assert ((y > 0.5) == np.array([0, 1, 1, 0], bool)).all()


def test_linear_regression_recovers_least_squares():
    x, y = _linreg_data()
    p = compile_program(LINREG, inputs={"X": x, "T": y})
    env, _ = train(p, data={"X": x, "T": y}, opt=OptimizerConfig("sgd", lr=0.005, epochs=500))
    closed = np.linalg.lstsq(x, y, rcond=None)[0]
    np.testing.assert_allclose(env["W"].array, closed, atol=1e-2)
    np.testing.assert_allclose(env["W"].array, [3, -2], atol=0.05)


@pytest.mark.parametrize("algorithm", ["sgd", "sgd-momentum", "adam"])
def test_optimizers_decrease_loss(algorithm):
    x, y = _linreg_data()
    p = compile_program(LINREG, inputs={"X": x, "T": y})
    lr = 0.1 if algorithm == "adam" else 0.002
    _, report = train(p, data={"X": x, "T": y}, opt=OptimizerConfig(algorithm, lr=lr, epochs=100))
    assert report.losses[-1] < 0.1 * report.losses[0]


def test_minibatches_on_inferred_example_domain():
    x, y = _linreg_data()
    p = compile_program(LINREG, inputs={"X": x, "T": y})
    env, _ = train(p, data={"X": x, "T": y}, opt=OptimizerConfig("adam", lr=0.05, epochs=300, batch_size=10))
    np.testing.assert_allclose(env["W"].array, np.linalg.lstsq(x, y, rcond=None)[0], atol=1e-2)


def test_training_is_deterministic():
    x, y = _linreg_data()
    p = compile_program(LINREG, inputs={"X": x, "T": y})
    opt = OptimizerConfig("adam", lr=0.05, epochs=20, batch_size=7, seed=3)
    a = train(p, data={"X": x, "T": y}, opt=opt)[1].losses
    b = train(p, data={"X": x, "T": y}, opt=opt)[1].losses
    assert a == b


def test_all_constant_is_a_no_op():
    x, y = _linreg_data()
    w = np.array([0.5, 0.5])
    p = compile_program(LINREG + "@const W\n", inputs={"X": x, "T": y, "W": w})
    env, report = train(p, data={"X": x, "T": y, "W": w}, opt=OptimizerConfig(epochs=10))
    assert report.learned == []
    np.testing.assert_array_equal(env["W"].array, w)


def test_divergence_is_reported():
    x, y = _linreg_data()
    p = compile_program(LINREG, inputs={"X": x, "T": y})
    with pytest.raises(TrainingDivergedError) as e:
        train(p, data={"X": x * 1e3, "T": y}, opt=OptimizerConfig("sgd", lr=10.0, epochs=200))
    assert not np.isfinite(e.value.report.losses[-1])


def test_report_records_are_json_lines():
    x, y = _linreg_data()
    p = compile_program(LINREG, inputs={"X": x, "T": y})
    _, report = train(p, data={"X": x, "T": y}, opt=OptimizerConfig(epochs=3))
    recs = [json.loads(r) for r in report.records()]
    assert [r["epoch"] for r in recs] == [1, 2, 3]


def test_missing_data_is_an_error():
    p = compile_program(LINREG, inputs={"X": np.ones((3, 2)), "T": np.ones(3)})
    with pytest.raises(Exception, match="no data"):
        train(p, data={"X": np.ones((3, 2))})


def test_config_parsing():
    opt = OptimizerConfig.from_options({"optimizer": "momentum", "lr": "0.5", "epochs": "7", "init": "gaussian(0.1)",
                                        "surrogate": "sigmoid:0.25"})
    assert (opt.algorithm, opt.lr, opt.epochs, opt.surrogate) == ("sgd-momentum", 0.5, 7, 0.25)
    with pytest.raises(ValueError):
        OptimizerConfig("rmsprop")
    with pytest.raises(ValueError):
        OptimizerConfig(init="uniform(1)")
    with pytest.raises(ValueError):
        parse_surrogate("tanh:1")


def test_init_schemes():
    p = compile_program("@domain a = 3\n@domain b = 50\nY[a] = W[a, b] X[b]", inputs={"X": np.ones(50)})
    w = init_params(p, ["W"], OptimizerConfig())["W"]
    assert w.shape == (3, 50) and np.abs(w).max() <= 1 / np.sqrt(50)
    assert (init_params(p, ["W"], OptimizerConfig(init="zeros"))["W"] == 0).all()
    a = init_params(p, ["W"], OptimizerConfig(init="uniform(2, 3)", seed=1))["W"]
    assert a.min() >= 2 and a.max() <= 3
    assert (a == init_params(p, ["W"], OptimizerConfig(init="uniform(2, 3)", seed=1))["W"]).all()


# --- Tucker -----------------------------------------------------------------------

def planted_tucker(seed=0):
    rng = np.random.default_rng(seed)
    core = rng.normal(size=(2, 2, 2))
    factors = [np.linalg.qr(rng.normal(size=(6, 2)))[0] for _ in range(3)]
    return np.einsum("ip,jq,kr,pqr->ijk", *factors, core)


def test_tucker_planted_core():
    a = planted_tucker()
    r = tucker_fit(a, (2, 2, 2))
    assert r.mse < 1e-3
    np.testing.assert_allclose(r.reconstruct(), a, atol=0.1)


def test_tucker_identity_init_is_exact():
    a = planted_tucker(1)
    r = tucker_fit(a, a.shape, opt=OptimizerConfig(epochs=0), init="identity")
    assert r.mse == 0.0
    np.testing.assert_array_equal(tucker_reconstruct(r.core, r.factors), a)


def test_tucker_rank_one_matrix():
    rng = np.random.default_rng(2)
    m = np.outer(rng.normal(size=5), rng.normal(size=4))
    r = tucker_fit(m, (1, 1))
    s = np.linalg.svd(m, compute_uv=False)
    assert s[1] < 1e-12
    assert r.mse < 1e-6


def test_tucker_thresholding_gives_boolean_predicates():
    a = planted_tucker()
    r = tucker_fit(a, (2, 2, 2), opt=OptimizerConfig(epochs=50), threshold=0.0)
    for f, b in zip(r.factors, r.predicates):
        assert set(np.unique(b)) <= {0.0, 1.0}
        assert ((f > 0) == (b == 1)).all()


def test_tucker_rejects_oversized_core():
    with pytest.raises(ValueError):
        tucker_fit(np.ones((2, 2)), (3, 1))
