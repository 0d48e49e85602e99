"""``tl`` command line: run, query, train, grad, embed, reason, repl.

A program argument is a path to a ``.tl`` file or ``corpus:<name>`` for a
bundled example, whose seeded inputs are generated from ``--seed``.
Exit status is 0 on success, 1 on runtime errors and 2 on parse errors.
"""

from __future__ import annotations

import argparse
import json
import sys
from pathlib import Path

from . import corpus as corpus_mod
from .desugar import compile_program
from .engine import FixpointConfig, QueryResult, answer_query, load_inputs, run_program
from .parser import ParseError
from .printer import fmt_query
from .syntax import TensorRef, Var
from .tensor import BOOL
from .tensorio import write_tensor


class UsageError(Exception):
    pass


# --- loading -----------------------------------------------------------------------

def load(spec: str, seed: int = 0, causal: bool = False):
    """Returns (program, inputs, base_dir)."""
    if spec.startswith("corpus:"):
        name = spec.split(":", 1)[1]
        try:
            entry = corpus_mod.get(name)
        except KeyError:
            names = ", ".join(c.name for c in corpus_mod.corpus())
            raise UsageError(f"no corpus program {name!r}; available: {names}") from None
        src, inputs = entry.source, entry.inputs(seed)
        if causal:
            if name != "transformer":
                raise UsageError("--causal applies to corpus:transformer only")
            src, inputs = corpus_mod.causal_transformer_source(), corpus_mod.causal_inputs(seed)
        return compile_program(src, inputs=inputs), inputs, None
    if causal:
        raise UsageError("--causal applies to corpus:transformer only")
    path = Path(spec)
    try:
        text = path.read_text(encoding="utf-8")
    except OSError as e:
        raise UsageError(f"cannot read {spec}: {e.strerror}") from None
    return compile_program(text, base_dir=path.parent), {}, path.parent


def fixpoint_config(args) -> FixpointConfig:
    if args.sweeps is not None and args.epsilon is not None:
        raise UsageError("--sweeps and --epsilon are mutually exclusive")
    if args.sweeps is not None:
        return FixpointConfig(mode="fixed", sweeps=args.sweeps)
    if args.epsilon is not None:
        return FixpointConfig(epsilon=args.epsilon)
    return FixpointConfig()


def render_tensor(name, t) -> str:
    """``Name = value``; relations print as tuple sets."""
    if t.dtype == BOOL:
        ref = TensorRef(name, tuple(Var(f"x{k}") for k in range(t.rank)))
        return f"{name} = " + QueryResult(ref, t, tuple(a.name for a in ref.args)).render()
    return f"{name} = " + QueryResult(TensorRef(name), t).render()


def _write_dir(out, tensors: dict):
    d = Path(out)
    d.mkdir(parents=True, exist_ok=True)
    for name, t in tensors.items():
        write_tensor(d / f"{name}.tns", name, t)


# --- commands ----------------------------------------------------------------------

def cmd_run(args, out):
    p, inputs, base = load(args.program, args.seed, args.causal)
    env, results = run_program(p, inputs=inputs, cfg=fixpoint_config(args), base_dir=base, mode=args.mode or "forward")
    if results:
        for q, r in results:
            print(f"{fmt_query(q)} {r.render()}", file=out)
    else:
        for name in p.heads():
            if name in env and "__" not in name:
                print(render_tensor(name, env[name]), file=out)
    if args.out:
        _write_dir(args.out, {n: env[n] for n in p.heads() if n in env and "__" not in n})


def cmd_query(args, out):
    p, inputs, base = load(args.program, args.seed, args.causal)
    env = load_inputs(p, inputs=inputs, base_dir=base)
    r = answer_query(p, args.query, env, mode=args.mode or "backward", cfg=fixpoint_config(args))
    print(r.render(), file=out)


def cmd_train(args, out):
    from .learn import OptimizerConfig, TrainingDivergedError, parse_surrogate, train

    p, inputs, base = load(args.program, args.seed, args.causal)
    overrides = {"surrogate": parse_surrogate(args.surrogate)}
    if args.seed_given:
        overrides["seed"] = args.seed
    opt = OptimizerConfig.from_options(p.train_options, **overrides)
    try:
        env, report = train(p, data=inputs, opt=opt, cfg=fixpoint_config(args))
    except TrainingDivergedError as e:
        for line in e.report.records():
            print(line, file=out)
        raise
    for line in report.records():
        print(line, file=out)
    print(json.dumps({"final_loss": report.final_loss, "epochs": report.epochs}), file=out)
    if args.out:
        _write_dir(args.out, {n: env[n] for n in report.learned})
        (Path(args.out) / "report.jsonl").write_text("\n".join(report.records()) + "\n", encoding="utf-8")


def cmd_grad(args, out):
    from .autodiff import differentiate
    from .learn import parse_surrogate

    p, inputs, base = load(args.program, args.seed, args.causal)
    gp = differentiate(p, surrogate=parse_surrogate(args.surrogate), seeded=[n for n in inputs if n in p.heads()])
    if args.out:
        Path(args.out).write_text(gp.source, encoding="utf-8")
    else:
        out.write(gp.source)


def cmd_embed(args, out):
    from .embed import embed_program, space_for

    p, inputs, base = load(args.program, args.seed, args.causal)
    ep = embed_program(p, space_for(p, args.D, args.seed))
    if not args.out:
        out.write(ep.source)
        return
    d = Path(args.out)
    env = load_inputs(ep.program, inputs=ep.inputs)
    _write_dir(d, {n: env[n] for n in ep.inputs})
    reads = "".join(f'{n} = "{n}.tns"\n' for n in ep.inputs)
    (d / "program.tl").write_text(reads + ep.source, encoding="utf-8")
    print(f"wrote {d / 'program.tl'} and {len(ep.inputs)} tensor files", file=out)


def cmd_reason(args, out):
    from .embed import ReasonerConfig, embed_program, reason_embedded, space_for

    p, inputs, base = load(args.program, args.seed, args.causal)
    ep = embed_program(p, space_for(p, args.D, args.seed))
    cfg = ReasonerConfig(temperature=args.T, mode=args.mode or "forward", max_sweeps=args.sweeps or 100)
    env = reason_embedded(ep, cfg, target=args.target)
    for name in ep.derived:
        if name in env and (args.target is None or name == args.target):
            print(render_tensor(name, env[name]), file=out)


def cmd_repl(args, out, stdin=None):
    """Read statements line by line; ``X?`` lines are answered at once."""
    stdin = stdin or sys.stdin
    prompt = stdin.isatty() if hasattr(stdin, "isatty") else False
    lines = []
    while True:
        if prompt:
            print("tl> ", end="", file=out, flush=True)
        line = stdin.readline()
        if not line:
            break
        text = line.strip()
        if not text or text.startswith("#"):
            continue
        if text in (":quit", ":q"):
            break
        if text == ":reset":
            lines = []
            continue
        if text == ":program":
            out.write("\n".join(lines) + ("\n" if lines else ""))
            continue
        try:
            if text.endswith("?") or "? " in text:
                p = compile_program("\n".join(lines) + "\n")
                print(answer_query(p, text, mode=args.mode or "backward").render(), file=out)
            else:
                compile_program("\n".join(lines + [text]) + "\n")
                lines.append(text)
        except Exception as e:  # keep the session alive
            print(f"error: {e}", file=out)


# --- entry point -------------------------------------------------------------------

def build_parser():
    ap = argparse.ArgumentParser(prog="tl", description="Tensor logic interpreter.")
    sub = ap.add_subparsers(dest="command", required=True)

    def common(sp):
        sp.add_argument("program", help="a .tl file or corpus:<name>")
        sp.add_argument("--seed", type=int, default=None)
        sp.add_argument("--sweeps", type=int, default=None, help="run exactly N sweeps (or cap reasoning sweeps)")
        sp.add_argument("--epsilon", type=float, default=None, help="fixpoint tolerance")
        sp.add_argument("--mode", choices=["forward", "backward"], default=None)
        sp.add_argument("--out", default=None)
        sp.add_argument("--causal", action="store_true", help="mask future positions in the transformer")
        return sp

    common(sub.add_parser("run", help="forward-chain a program and print its results"))
    q = common(sub.add_parser("query", help="answer one query"))
    q.add_argument("query")
    t = common(sub.add_parser("train", help="fit the program's free tensors"))
    t.add_argument("--surrogate", default=None, help="sigmoid:T stands in for step when differentiating")
    g = common(sub.add_parser("grad", help="print the gradient program"))
    g.add_argument("--surrogate", default=None)
    e = common(sub.add_parser("embed", help="print the program rewritten in embedding space"))
    e.add_argument("--D", type=int, default=1024)
    r = common(sub.add_parser("reason", help="reason in embedding space and decode the results"))
    r.add_argument("target", nargs="?", default=None)
    r.add_argument("--D", type=int, default=1024)
    r.add_argument("--T", type=float, default=0.0)
    rp = sub.add_parser("repl", help="interactive session")
    rp.add_argument("--mode", choices=["forward", "backward"], default=None)
    return ap


COMMANDS = {"run": cmd_run, "query": cmd_query, "train": cmd_train, "grad": cmd_grad, "embed": cmd_embed,
            "reason": cmd_reason, "repl": cmd_repl}


def main(argv=None, out=None, err=None) -> int:
    out = out or sys.stdout
    err = err or sys.stderr
    ap = build_parser()
    args, extra = ap.parse_known_args(argv)
    # argparse cannot take an optional positional after options
    if extra and args.command == "reason" and args.target is None and len(extra) == 1 and not extra[0].startswith("-"):
        args.target = extra[0]
    elif extra:
        ap.error("unrecognized arguments: " + " ".join(extra))
    if hasattr(args, "seed"):
        args.seed_given = args.seed is not None
        args.seed = args.seed or 0
    try:
        COMMANDS[args.command](args, out)
    except ParseError as e:
        print(f"{getattr(args, 'program', 'tl')}: {e}", file=err)
        return 2
    except Exception as e:
        print(f"error: {e}", file=err)
        return 1
    return 0


if __name__ == "__main__":
    sys.exit(main())
