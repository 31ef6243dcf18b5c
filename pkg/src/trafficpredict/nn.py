"""Building blocks: embedding, linear projection, LSTM cell, parameters.

Parameters live in a :class:`ParamRegistry` as plain float64 arrays.  A
forward pass binds them to a :class:`~trafficpredict.autodiff.Tape`, and the
light ``*Params`` views below pick their tensors out of the bound mapping.

LSTM gate blocks are stacked in the order input, forget, cell candidate,
output.  Any of the weight tensors may carry a leading group axis (shape
``(G, ...)``); the cell is then evaluated with a per-row group index, which is
how the category-specific cells run as one batched call per frame.
"""

from __future__ import annotations

import io
import json
import zipfile
from dataclasses import dataclass

import numpy as np

from . import autodiff as ad
from .errors import ConfigurationError, DimensionError

CHECKPOINT_FORMAT_VERSION = 1


@dataclass
class EmbeddingParams:
    weight: ad.Tensor
    bias: ad.Tensor | None = None

    @classmethod
    def from_bound(cls, bound, prefix):
        return cls(bound[f"{prefix}.weight"], bound.get(f"{prefix}.bias"))

    @property
    def in_dim(self):
        return self.weight.shape[-1]

    @property
    def out_dim(self):
        return self.weight.shape[-2]


@dataclass
class LstmCellParams:
    w_ih: ad.Tensor
    w_hh: ad.Tensor
    bias: ad.Tensor

    @classmethod
    def from_bound(cls, bound, prefix):
        return cls(bound[f"{prefix}.w_ih"], bound[f"{prefix}.w_hh"], bound[f"{prefix}.bias"])

    @property
    def hidden_size(self):
        return self.w_hh.shape[-1]

    @property
    def input_size(self):
        return self.w_ih.shape[-1]


@dataclass(frozen=True)
class LstmState:
    h: ad.Tensor
    c: ad.Tensor

    @classmethod
    def zeros(cls, tape, hidden_size, rows=None):
        shape = (hidden_size,) if rows is None else (rows, hidden_size)
        return cls(tape.zeros(*shape), tape.zeros(*shape))


def group_stack(bound, prefixes, suffixes):
    """Stack per-group parameters into ``(G, ...)`` tensors on the tape.

    Returns a dict keyed like the first prefix's entries with the group
    prefix removed, e.g. ``{"w_ih": Tensor(G, 4H, in), ...}``.
    """
    return {s: ad.stack([bound[f"{p}.{s}"] for p in prefixes]) for s in suffixes}


def _affine(p, x, groups):
    if p.weight.ndim == 3:
        if groups is None:
            raise DimensionError("grouped parameters need a group index per row")
        return ad.grouped_linear(x, p.weight, p.bias, groups)
    if x.shape[-1] != p.in_dim:
        raise DimensionError(f"expected input length {p.in_dim}, got {x.shape[-1]}")
    return ad.linear(x, p.weight, p.bias)


def linear(p, x, groups=None):
    """Affine projection ``W x + b`` with no activation."""
    return _affine(p, x, groups)


def embed(p, x, groups=None):
    """Embedding function: ``ReLU(W x + b)``."""
    return ad.relu(_affine(p, x, groups))


def lstm_step(p, state, x, groups=None):
    """One LSTM recurrence; returns a new :class:`LstmState`.

    ``x`` is a vector or a row batch; ``state`` must match its batch layout.
    """
    hidden = p.hidden_size
    if state.h.shape[-1] != hidden or state.c.shape != state.h.shape:
        raise DimensionError(f"state {state.h.shape}/{state.c.shape} does not match hidden {hidden}")
    if x.shape[-1] != p.input_size or x.shape[:-1] != state.h.shape[:-1]:
        raise DimensionError(f"input {x.shape} does not fit cell ({p.input_size} -> {hidden}) "
                             f"with state {state.h.shape}")
    if p.w_ih.ndim == 3:
        z = ad.add(ad.grouped_linear(x, p.w_ih, p.bias, groups),
                   ad.grouped_linear(state.h, p.w_hh, None, groups))
    else:
        z = ad.add(ad.linear(x, p.w_ih, p.bias), ad.linear(state.h, p.w_hh))
    i = ad.sigmoid(ad.cols(z, 0, hidden))
    f = ad.sigmoid(ad.cols(z, hidden, 2 * hidden))
    g = ad.tanh(ad.cols(z, 2 * hidden, 3 * hidden))
    o = ad.sigmoid(ad.cols(z, 3 * hidden, 4 * hidden))
    c = ad.add(ad.mul(f, state.c), ad.mul(i, g))
    h = ad.mul(o, ad.tanh(c))
    return LstmState(h, c)


# ---------------------------------------------------------------------------
# parameter specification, initialization and storage

@dataclass(frozen=True)
class ParamSpec:
    name: str
    shape: tuple
    fan_in: int
    forget_bias_hidden: int = 0  # >0 marks an LSTM bias whose forget block starts at 1.0


def embedding_spec(prefix, in_dim, out_dim, bias=True):
    specs = [ParamSpec(f"{prefix}.weight", (out_dim, in_dim), in_dim)]
    if bias:
        specs.append(ParamSpec(f"{prefix}.bias", (out_dim,), in_dim))
    return specs


def lstm_spec(prefix, input_size, hidden_size):
    return [
        ParamSpec(f"{prefix}.w_ih", (4 * hidden_size, input_size), input_size),
        ParamSpec(f"{prefix}.w_hh", (4 * hidden_size, hidden_size), hidden_size),
        ParamSpec(f"{prefix}.bias", (4 * hidden_size,), hidden_size, forget_bias_hidden=hidden_size),
    ]


class ParamRegistry:
    """Ordered ``name -> float64 array`` mapping."""

    def __init__(self, items=()):
        self._params = {}
        for name, value in items:
            self.add(name, value)

    def add(self, name, value):
        if name in self._params:
            raise ConfigurationError(f"duplicate parameter name {name!r}")
        self._params[name] = np.array(value, dtype=np.float64)

    def __getitem__(self, name):
        return self._params[name]

    def __setitem__(self, name, value):
        if name not in self._params:
            raise KeyError(name)
        self._params[name] = value

    def __contains__(self, name):
        return name in self._params

    def __iter__(self):
        return iter(self._params)

    def __len__(self):
        return len(self._params)

    def names(self):
        return list(self._params)

    def items(self):
        return self._params.items()

    def values(self):
        return self._params.values()

    def num_scalars(self):
        return int(sum(v.size for v in self._params.values()))

    def copy(self):
        return ParamRegistry((k, v.copy()) for k, v in self._params.items())

    def flat(self):
        return np.concatenate([v.ravel() for v in self._params.values()])

    def equals(self, other):
        return (self.names() == other.names()
                and all(np.array_equal(self[k], other[k]) for k in self))


def init_params(specs, seed):
    """Uniform ``[-1/sqrt(fan_in), 1/sqrt(fan_in)]`` initialization.

    LSTM forget-gate biases start at 1.0.  Parameters are drawn in spec order
    from a single generator, so the result depends only on ``specs`` and ``seed``.
    """
    rng = np.random.default_rng(seed)
    reg = ParamRegistry()
    for s in specs:
        if s.name in reg:
            raise ConfigurationError(f"duplicate parameter name {s.name!r}")
        bound = 1.0 / np.sqrt(s.fan_in)
        value = rng.uniform(-bound, bound, size=s.shape)
        if s.forget_bias_hidden:
            hid = s.forget_bias_hidden
            value[hid:2 * hid] = 1.0
        reg.add(s.name, value)
    return reg


def save_checkpoint(path, params, meta=None, extra=None):
    """Write parameters (and optional arrays such as optimizer moments) to ``path``.

    The file is an uncompressed zip of ``.npy`` members: one per parameter
    under ``param/``, one per extra array under ``extra/``, plus ``meta.json``
    holding the format version and caller metadata.
    """
    header = {"format_version": CHECKPOINT_FORMAT_VERSION,
              "params": params.names(),
              "extra": list(extra or {}),
              "meta": meta or {}}
    with zipfile.ZipFile(path, "w", compression=zipfile.ZIP_STORED) as zf:
        _write_member(zf, "meta.json", json.dumps(header, sort_keys=True).encode("utf-8"))
        for name, value in params.items():
            _write_member(zf, f"param/{name}.npy", _npy_bytes(value))
        for name, value in (extra or {}).items():
            _write_member(zf, f"extra/{name}.npy", _npy_bytes(np.asarray(value)))


def _write_member(zf, name, data):
    # fixed timestamp so identical contents give identical files
    info = zipfile.ZipInfo(name, date_time=(1980, 1, 1, 0, 0, 0))
    zf.writestr(info, data)


def load_checkpoint(path):
    """Inverse of :func:`save_checkpoint`; returns ``(params, meta, extra)``."""
    with zipfile.ZipFile(path) as zf:
        header = json.loads(zf.read("meta.json"))
        if header.get("format_version") != CHECKPOINT_FORMAT_VERSION:
            raise ConfigurationError(
                f"{path}: unsupported checkpoint format {header.get('format_version')!r}")
        params = ParamRegistry((n, _npy_load(zf.read(f"param/{n}.npy"))) for n in header["params"])
        extra = {n: _npy_load(zf.read(f"extra/{n}.npy")) for n in header["extra"]}
    return params, header["meta"], extra


def _npy_bytes(value):
    buf = io.BytesIO()
    np.save(buf, value, allow_pickle=False)
    return buf.getvalue()


def _npy_load(data):
    return np.load(io.BytesIO(data), allow_pickle=False)
