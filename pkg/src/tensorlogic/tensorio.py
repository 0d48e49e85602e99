"""Text serialization of tensors and the text-file reader.

Format::

    Name dtype index:domain:card ...
    symbols domain Sym1 Sym2 ...      (zero or more lines)
    dense
    v0 v1 v2 ...                      (row-major)

or ``sparse`` followed by one ``c0 c1 ... value`` line per nonzero.
Floats are written with ``repr`` so values round-trip exactly.
"""

from __future__ import annotations

from pathlib import Path

import numpy as np

from .tensor import BOOL, REAL, IndexDomain, TensorValue


class TensorFormatError(ValueError):
    pass


def _fmt(v: float, dtype: str) -> str:
    if dtype == BOOL:
        return str(int(v))
    return repr(float(v))


def dumps(name: str, t: TensorValue) -> str:
    head = [name, t.dtype] + [f"{n}:{d.name}:{d.cardinality}" for n, d in zip(t.indices, t.domains)]
    lines = [" ".join(head)]
    seen = set()
    for d in t.domains:
        if d.symbols and d.name not in seen:
            seen.add(d.name)
            lines.append(" ".join(["symbols", d.name] + [str(s) for s in d.symbols]))
    if t.is_sparse:
        lines.append("sparse")
        for c, v in t.entries():
            lines.append(" ".join([str(x) for x in c] + [_fmt(v, t.dtype)]))
    else:
        lines.append("dense")
        lines.append(" ".join(_fmt(v, t.dtype) for v in t.array.ravel()))
    return "\n".join(lines) + "\n"


def loads(text: str) -> tuple[str, TensorValue]:
    lines = [ln for ln in text.splitlines() if ln.strip()]
    if not lines:
        raise TensorFormatError("empty tensor file")
    head = lines[0].split()
    if len(head) < 2 or head[1] not in (REAL, BOOL):
        raise TensorFormatError(f"bad header line: {lines[0]!r}")
    name, dtype = head[0], head[1]
    specs = []
    for tok in head[2:]:
        parts = tok.split(":")
        if len(parts) != 3:
            raise TensorFormatError(f"bad index spec {tok!r}")
        specs.append((parts[0], parts[1], int(parts[2])))
    k = 1
    symbols = {}
    while k < len(lines) and lines[k].startswith("symbols"):
        parts = lines[k].split()
        symbols[parts[1]] = tuple(_sym(s) for s in parts[2:])
        k += 1
    if k >= len(lines):
        raise TensorFormatError("missing storage line")
    doms = [IndexDomain(dn, card, symbols.get(dn, ())) for _, dn, card in specs]
    idx = [n for n, _, _ in specs]
    kind = lines[k].strip()
    body = lines[k + 1:]
    if kind == "dense":
        vals = [float(x) for ln in body for x in ln.split()]
        shape = tuple(d.cardinality for d in doms)
        if len(vals) != int(np.prod(shape, dtype=np.int64)):
            raise TensorFormatError(f"expected {int(np.prod(shape))} values, found {len(vals)}")
        return name, TensorValue(idx, doms, dtype, dense=np.array(vals).reshape(shape))
    if kind == "sparse":
        coords = {}
        for ln in body:
            parts = ln.split()
            if len(parts) != len(idx) + 1:
                raise TensorFormatError(f"bad sparse line {ln!r}")
            coords[tuple(int(x) for x in parts[:-1])] = float(parts[-1])
        return name, TensorValue(idx, doms, dtype, coords=coords)
    raise TensorFormatError(f"unknown storage kind {kind!r}")


def _sym(s: str):
    return int(s) if s.lstrip("-").isdigit() else s


def write_tensor(path, name: str, t: TensorValue) -> None:
    Path(path).write_text(dumps(name, t), encoding="utf-8")


def read_tensor(path) -> tuple[str, TensorValue]:
    return loads(Path(path).read_text(encoding="utf-8"))


def read_text_tensor(path, pos_index="p", word_index="w"):
    """Read a text file as a Boolean (position, word) matrix.

    Tokens are whitespace separated; the vocabulary is interned in order of
    first occurrence.  Returns the tensor and the vocabulary domain.
    """
    words = Path(path).read_text(encoding="utf-8").split()
    vocab = list(dict.fromkeys(words))
    vdom = IndexDomain("vocab", len(vocab), tuple(vocab))
    pdom = IndexDomain("position", len(words))
    index = {w: k for k, w in enumerate(vocab)}
    coords = {(p, index[w]): 1.0 for p, w in enumerate(words)}
    return TensorValue((pos_index, word_index), (pdom, vdom), BOOL, coords=coords), vdom
