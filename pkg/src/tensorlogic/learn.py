"""Gradient-descent training of a program's free tensors, and Tucker fitting."""

from __future__ import annotations

import json
import logging
import math
import re
from dataclasses import dataclass, field, replace

import numpy as np

from .autodiff import (
    LossSpec,
    differentiate,
    evaluate_gradients,
    supplied_names,
)
from .desugar import compile_program
from .domains import infer_domains
from .engine import EngineError, Environment, FixpointConfig, ForwardChainer, load_inputs, storage_domains
from .syntax import DomainDecl, Program
from .tensor import TensorValue

log = logging.getLogger(__name__)

ALGORITHMS = ("sgd", "sgd-momentum", "adam")
_ALIASES = {"momentum": "sgd-momentum", "sgdm": "sgd-momentum"}


class TrainingDivergedError(EngineError):
    def __init__(self, report):
        self.report = report
        super().__init__(f"loss became non-finite at epoch {len(report.losses)}")


@dataclass
class OptimizerConfig:
    algorithm: str = "adam"
    lr: float = 1e-2
    batch_size: int | None = None
    epochs: int = 100
    seed: int = 0
    init: str = "uniform"  # uniform | uniform(a,b) | gaussian(s) | zeros
    momentum: float = 0.9
    betas: tuple = (0.9, 0.999)
    eps: float = 1e-8
    target: float | None = None  # stop once the epoch loss drops below
    surrogate: float | None = None  # sigmoid temperature standing in for step

    def __post_init__(self):
        self.algorithm = _ALIASES.get(self.algorithm, self.algorithm)
        if self.algorithm not in ALGORITHMS:
            raise ValueError(f"unknown optimizer {self.algorithm!r}; expected one of {', '.join(ALGORITHMS)}")
        if self.lr <= 0:
            raise ValueError("learning rate must be positive")
        if self.epochs < 0:
            raise ValueError("epochs must be non-negative")
        if self.batch_size is not None and self.batch_size < 1:
            raise ValueError("batch size must be positive")
        _parse_init(self.init)

    @classmethod
    def from_options(cls, options: dict, **overrides):
        """Build from ``@train`` key=value strings; ``overrides`` win."""
        kw = {}
        for k, v in options.items():
            if k in ("optimizer", "algorithm"):
                kw["algorithm"] = v
            elif k in ("lr", "momentum", "eps", "target"):
                kw[k] = float(v)
            elif k in ("epochs", "seed"):
                kw[k] = int(v)
            elif k in ("batch", "batch_size"):
                kw["batch_size"] = int(v)
            elif k == "init":
                kw["init"] = v
            elif k == "surrogate":
                kw["surrogate"] = parse_surrogate(v)
            else:
                raise ValueError(f"unknown training option {k!r}")
        kw.update({k: v for k, v in overrides.items() if v is not None})
        return cls(**kw)


def parse_surrogate(text):
    """``sigmoid:T`` -> T."""
    if text is None or isinstance(text, (int, float)):
        return text
    m = re.fullmatch(r"sigmoid:([0-9.eE+-]+)", text.strip())
    if not m or float(m.group(1)) <= 0:
        raise ValueError(f"surrogate must look like sigmoid:T with T > 0, got {text!r}")
    return float(m.group(1))


def _parse_init(spec: str):
    m = re.fullmatch(r"\s*(uniform|gaussian|zeros)\s*(?:\(([^)]*)\))?\s*", spec)
    if not m:
        raise ValueError(f"bad init {spec!r}")
    kind, args = m.group(1), m.group(2)
    vals = tuple(float(a) for a in args.split(",")) if args else ()
    if (kind == "uniform" and len(vals) not in (0, 2)) or (kind == "gaussian" and len(vals) != 1) or (
        kind == "zeros" and vals
    ):
        raise ValueError(f"bad init {spec!r}")
    return kind, vals


def init_params(p: Program, names, opt: OptimizerConfig, rng=None) -> dict:
    """Draw initial values; the default is uniform within 1/sqrt(fan-in)."""
    rng = rng if rng is not None else np.random.default_rng(opt.seed)
    kind, vals = _parse_init(opt.init)
    out = {}
    for n in names:
        shape = tuple(d.cardinality for d in storage_domains(p, n))
        if kind == "zeros":
            arr = np.zeros(shape)
        elif kind == "gaussian":
            arr = rng.normal(scale=vals[0], size=shape)
        elif vals:
            arr = rng.uniform(vals[0], vals[1], size=shape)
        else:
            fan_in = shape[0] if len(shape) == 1 else int(np.prod(shape[1:]))
            a = 1.0 / math.sqrt(max(fan_in, 1))
            arr = rng.uniform(-a, a, size=shape)
        out[n] = arr
    return out


@dataclass
class TrainReport:
    losses: list = field(default_factory=list)
    learned: list = field(default_factory=list)
    reached_target: bool = False
    final: float | None = None  # loss at the returned parameters

    @property
    def epochs(self):
        return len(self.losses)

    @property
    def final_loss(self):
        if self.final is not None:
            return self.final
        return self.losses[-1] if self.losses else None

    def records(self):
        """One JSON line per epoch."""
        return [json.dumps({"epoch": k + 1, "loss": v}) for k, v in enumerate(self.losses)]


class _Adam:
    def __init__(self, opt):
        self.opt, self.m, self.v, self.t = opt, {}, {}, 0

    def step(self, params, grads):
        o = self.opt
        self.t += 1
        b1, b2 = o.betas
        for n, g in grads.items():
            m = self.m[n] = b1 * self.m.get(n, 0.0) + (1 - b1) * g
            v = self.v[n] = b2 * self.v.get(n, 0.0) + (1 - b2) * g * g
            mh, vh = m / (1 - b1 ** self.t), v / (1 - b2 ** self.t)
            params[n] = params[n] - o.lr * mh / (np.sqrt(vh) + o.eps)


class _SGD:
    def __init__(self, opt):
        self.opt, self.vel = opt, {}

    def step(self, params, grads):
        o = self.opt
        for n, g in grads.items():
            if o.algorithm == "sgd-momentum":
                g = self.vel[n] = o.momentum * self.vel.get(n, 0.0) + g
            params[n] = params[n] - o.lr * g


def _example_domain(p: Program, data: dict):
    """The undeclared domain indexing axis 0 of every data tensor, if any."""
    declared = {d.name for d in p.domains if isinstance(d, DomainDecl)}
    names = set()
    for n in data:
        try:
            doms = storage_domains(p, n)
        except Exception:
            return None
        if not doms:
            return None
        names.add(doms[0].name)
    if len(names) != 1:
        return None
    name = names.pop()
    return None if name in declared else name


def _as_inputs(data) -> dict:
    if data is None:
        return {}
    if isinstance(data, Environment):
        return dict(data.bindings)
    return dict(data)


def _rows(value, idx):
    if isinstance(value, TensorValue):
        return value.array[idx]
    return np.asarray(value)[idx]


def train(p: Program, loss: LossSpec | None = None, data=None, opt: OptimizerConfig | None = None,
          params: dict | None = None, cfg: FixpointConfig | None = None):
    """Fit the learned tensors of ``p`` to ``data``; returns (Environment, TrainReport).

    The returned environment is the forward pass at the final parameters,
    with the learned tensors bound under provenance ``learned``.
    """
    opt = opt or OptimizerConfig.from_options(p.train_options)
    loss = loss or LossSpec.from_program(p)
    data = _as_inputs(data)
    missing = [n for n in loss.data if n not in data and n not in supplied_names(p)]
    if missing:
        raise EngineError(f"no data for {', '.join(sorted(missing))}")
    heads = set(p.heads())
    gp = differentiate(p, loss, opt.surrogate, seeded=[n for n in data if n in heads])
    learned = gp.learned
    report = TrainReport(learned=list(learned))
    rng = np.random.default_rng(opt.seed)
    given = {**data, **(params or {})}
    values = init_params(gp.forward, [n for n in learned if n not in given], opt, rng)
    for n in learned:
        if n in given:
            v = given[n]
            values[n] = np.array(v.array if isinstance(v, TensorValue) else v, dtype=np.float64)
    fixed = {k: v for k, v in data.items() if k not in learned}

    batches = _batcher(p, loss, gp, fixed, opt, rng)
    stepper = _Adam(opt) if opt.algorithm == "adam" else _SGD(opt)
    if learned:
        for _ in range(opt.epochs):
            total = 0.0
            for bgp, binputs in batches():
                res = evaluate_gradients(bgp, {**binputs, **values}, cfg)
                total += res.loss
                if not all(np.isfinite(g).all() for g in res.grads.values()) or not np.isfinite(res.loss):
                    report.losses.append(float("nan"))
                    raise TrainingDivergedError(report)
                stepper.step(values, res.grads)
            report.losses.append(float(total))
            if opt.target is not None and total < opt.target:
                report.reached_target = True
                break
    env = load_inputs(gp.forward, inputs={**fixed, **values})
    for n in learned:
        env.provenance[n] = "learned"
    ForwardChainer(gp.forward, cfg).run(env)
    final = env[loss.name].item() if loss.name in env else 0.0
    if not np.isfinite(final):
        report.losses.append(final)
        raise TrainingDivergedError(report)
    report.final = final
    if not report.losses:
        report.losses.append(final)
    if opt.target is not None and final < opt.target:
        report.reached_target = True
    return env, report


def _batcher(p, loss, gp, fixed, opt, rng):
    """Yield (gradient program, inputs) per minibatch for one epoch."""
    data = {k: v for k, v in fixed.items() if k in loss.data}
    ex = _example_domain(gp.forward, data) if opt.batch_size else None
    if opt.batch_size and ex is None:
        log.warning("batch size ignored: no undeclared example domain shared by the data tensors")
    if ex is None:
        return lambda: [(gp, fixed)]
    n = next(storage_domains(gp.forward, k)[0].cardinality for k in data)
    if opt.batch_size >= n:
        return lambda: [(gp, fixed)]
    cache = {}

    def program_for(size, sample):
        if size not in cache:
            evidence = {**fixed, **sample}
            q = infer_domains(_strip_domains(p), inputs=evidence)
            cache[size] = differentiate(q, loss, opt.surrogate, seeded=[k for k in fixed if k in q.heads()])
        return cache[size]

    def epoch():
        order = rng.permutation(n)
        for s in range(0, n, opt.batch_size):
            idx = np.sort(order[s:s + opt.batch_size])
            sample = {k: _rows(v, idx) for k, v in data.items()}
            yield program_for(len(idx), sample), {**fixed, **sample}

    return epoch


def _strip_domains(p: Program) -> Program:
    return replace(p, slot_domains={}, var_domains={}, equation_domains=())


# --- Tucker decomposition ---------------------------------------------------------

@dataclass
class TuckerResult:
    core: np.ndarray
    factors: list
    mse: float
    report: TrainReport
    predicates: list | None = None  # thresholded Boolean factors

    def reconstruct(self):
        return tucker_reconstruct(self.core, self.factors)


def tucker_reconstruct(core, factors):
    out = np.asarray(core)
    for k, m in enumerate(factors):
        out = np.moveaxis(np.tensordot(m, out, axes=([1], [k])), 0, k)
    return out


def tucker_source(shape, core_shape) -> str:
    """Decomposition program: a core joined with one factor matrix per mode."""
    n = len(shape)
    a = [f"a{k}" for k in range(n)]
    c = [f"c{k}" for k in range(n)]
    lines = [f"@domain {a[k]} = {shape[k]}" for k in range(n)]
    lines += [f"@domain {c[k]} = {core_shape[k]}" for k in range(n)]
    factors = " ".join(f"M{k}[{a[k]}, {c[k]}]" for k in range(n))
    idx = ", ".join(a)
    lines.append(f"Approx[{idx}] = {factors} C[{', '.join(c)}]")
    lines.append(f"Err[{idx}] = Approx[{idx}] - A[{idx}]")
    lines.append(f"Loss = Err[{idx}] Err[{idx}]")
    lines.append("@data A")
    lines.append("@loss Loss")
    return "\n".join(lines) + "\n"


def tucker_fit(A, core_shape, opt: OptimizerConfig | None = None, threshold: float | None = None,
               init: str = "random") -> TuckerResult:
    """Fit ``A`` by a core of ``core_shape`` and one factor matrix per mode.

    ``init="identity"`` starts from identity factors and the matching
    leading block of ``A`` as core; with a full-size core that is exact.
    ``threshold`` additionally returns the factors thresholded to 0/1.
    """
    arr = A.array if isinstance(A, TensorValue) else np.asarray(A, dtype=np.float64)
    core_shape = tuple(int(r) for r in core_shape)
    if len(core_shape) != arr.ndim:
        raise ValueError(f"core has {len(core_shape)} modes, tensor has {arr.ndim}")
    if any(r < 1 or r > n for r, n in zip(core_shape, arr.shape)):
        raise ValueError(f"core shape {core_shape} must fit within {arr.shape}")
    opt = opt or OptimizerConfig(algorithm="adam", lr=0.02, epochs=3000)
    p = compile_program(tucker_source(arr.shape, core_shape), inputs={"A": arr})
    params = None
    if init == "identity":
        params = {f"M{k}": np.eye(n, r) for k, (n, r) in enumerate(zip(arr.shape, core_shape))}
        params["C"] = arr[tuple(slice(0, r) for r in core_shape)].copy()
    elif init != "random":
        raise ValueError(f"unknown Tucker init {init!r}")
    env, report = train(p, data={"A": arr}, opt=opt, params=params)
    factors = [env[f"M{k}"].array for k in range(arr.ndim)]
    core = env["C"].array
    mse = float(np.mean(env["Err"].array ** 2))
    preds = [(f > threshold).astype(np.float64) for f in factors] if threshold is not None else None
    return TuckerResult(core, factors, mse, report, preds)
