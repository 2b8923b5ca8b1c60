"""The GCN-LSTM forecaster.

Stacked graph convolutions aggregate each snapshot over the region graph,
one LSTM cell reads the resulting sequence per region, and a dense head
maps the final hidden state to ``u_out`` future counts.

Batches are handled by stacking the ``n`` rows of every sample on top of
each other, so a batch of ``B`` samples is a ``(B*n) x c`` tensor.
"""

from __future__ import annotations

import json
import math
import struct
from dataclasses import asdict, dataclass, field

import numpy as np

from west import autodiff as ad
from west.errors import CorruptCheckpoint, ShapeMismatch, VersionMismatch
from west.graphcore import MinMaxScaler, RenormalizedAdjacency

FORMAT_VERSION = 1
GATES = ("f", "i", "c", "o")


@dataclass(frozen=True)
class WestConfig:
    n_regions: int
    u_in: int = 6
    u_out: int = 6
    k_layers: int = 1
    gcn_hidden: int = 32
    lstm_hidden: int = 64
    seed: int = 0
    encoder_mode: str = "step"  # "step": encoder per input step; "block": one pass over all steps
    head: str = "node"  # "node": head shared across regions; "global": flattened
    use_bias: bool = True

    def __post_init__(self):
        for name in ("n_regions", "u_in", "u_out", "k_layers", "gcn_hidden", "lstm_hidden"):
            v = getattr(self, name)
            if not isinstance(v, (int, np.integer)) or v < 1:
                raise ValueError(f"{name} must be a positive integer, got {v!r}")
        if self.encoder_mode not in ("step", "block"):
            raise ValueError(f"encoder_mode must be 'step' or 'block', got {self.encoder_mode!r}")
        if self.head not in ("node", "global"):
            raise ValueError(f"head must be 'node' or 'global', got {self.head!r}")

    @property
    def encoder_in(self):
        return 1 if self.encoder_mode == "step" else self.u_in

    @property
    def lstm_in(self):
        return self.gcn_hidden if self.encoder_mode == "step" else 1

    def to_dict(self):
        return asdict(self)


@dataclass
class WestParams:
    """Named parameters in a fixed order (encoder, LSTM gates, head)."""

    tensors: dict = field(default_factory=dict)

    def __getitem__(self, name):
        return self.tensors[name]

    def names(self):
        return list(self.tensors)

    def as_list(self):
        return list(self.tensors.values())

    def gcn(self):
        k = 0
        out = []
        while f"gcn_{k}" in self.tensors:
            out.append(self.tensors[f"gcn_{k}"])
            k += 1
        return out

    def has_bias(self):
        return "b_f" in self.tensors

    def copy(self):
        return WestParams({k: ad.Parameter(p.value, k) for k, p in self.tensors.items()})

    def load_values(self, other):
        for k, p in self.tensors.items():
            p.value[...] = other.tensors[k].value


def param_shapes(config):
    """Ordered ``name -> (rows, cols)``; biases are 1-row tensors."""
    c = config
    shapes = {}
    width = c.encoder_in
    for k in range(c.k_layers):
        shapes[f"gcn_{k}"] = (width, c.gcn_hidden)
        width = c.gcn_hidden
    for g in GATES:
        shapes[f"W_{g}"] = (c.lstm_in, c.lstm_hidden)
        shapes[f"U_{g}"] = (c.lstm_hidden, c.lstm_hidden)
        if c.use_bias:
            shapes[f"b_{g}"] = (1, c.lstm_hidden)
    if c.head == "node":
        shapes["dense_w"] = (c.lstm_hidden, c.u_out)
        shapes["dense_b"] = (1, c.u_out)
    else:
        shapes["dense_w"] = (c.n_regions * c.lstm_hidden, c.n_regions * c.u_out)
        shapes["dense_b"] = (1, c.n_regions * c.u_out)
    return shapes


def init_params(config, seed=None):
    """Glorot-uniform weights, zero biases, drawn in declaration order."""
    rng = np.random.default_rng(config.seed if seed is None else seed)
    out = {}
    for name, (r, c) in param_shapes(config).items():
        if name.startswith("b_") or name == "dense_b":
            value = np.zeros((r, c))
        else:
            bound = math.sqrt(6.0 / (r + c))
            value = rng.uniform(-bound, bound, size=(r, c))
        out[name] = ad.Parameter(value, name)
    return WestParams(out)


def _operator(a_norm):
    return a_norm.matrix if isinstance(a_norm, RenormalizedAdjacency) else np.asarray(a_norm)


def gcn_encode(z, a_norm, params, k=None):
    """``h <- relu(M h W_l)`` for ``l = 0..k-1`` starting from ``h = z``."""
    weights = params.gcn()
    k = len(weights) if k is None else k
    if not 1 <= k <= len(weights):
        raise ShapeMismatch(f"{k} layers requested but {len(weights)} are parameterised")
    m = _operator(a_norm)
    h = z if isinstance(z, ad.Tensor) else ad.Tensor(z)
    if h.rows % m.shape[0]:
        raise ShapeMismatch(f"{h.rows} feature rows do not fit {m.shape[0]} nodes")
    for w in weights[:k]:
        h = ad.relu(ad.propagate(m, ad.matmul(h, w)))
    return h


def _gate(x_t, h_prev, params, g, act):
    z = ad.add(ad.matmul(x_t, params[f"W_{g}"]), ad.matmul(h_prev, params[f"U_{g}"]))
    if params.has_bias():
        z = ad.add(z, params[f"b_{g}"])
    return act(z)


def lstm_decode(h_enc, params):
    """Run one LSTM cell over a sequence and return the last hidden state.

    ``h_enc`` is either a list of per-step inputs (each ``rows x in``) or a
    single tensor whose columns are read as successive scalar inputs.
    Hidden and cell states start at zero.
    """
    if isinstance(h_enc, ad.Tensor):
        steps = [ad.slice_cols(h_enc, t, t + 1) for t in range(h_enc.cols)]
    else:
        steps = list(h_enc)
    hidden_size = params["U_f"].rows
    expect = params["W_f"].rows
    rows = steps[0].rows
    hidden = ad.Tensor(np.zeros((rows, hidden_size)))
    cell = ad.Tensor(np.zeros((rows, hidden_size)))
    for x_t in steps:
        if x_t.cols != expect:
            raise ShapeMismatch(f"LSTM input width {x_t.cols} != {expect}")
        forget = _gate(x_t, hidden, params, "f", ad.sigmoid)
        inp = _gate(x_t, hidden, params, "i", ad.sigmoid)
        cand = _gate(x_t, hidden, params, "c", ad.tanh_)
        cell = ad.add(ad.hadamard(forget, cell), ad.hadamard(inp, cand))
        out = _gate(x_t, hidden, params, "o", ad.sigmoid)
        hidden = ad.hadamard(out, ad.tanh_(cell))
    return hidden


def _stack_input(x, config):
    if isinstance(x, ad.Tensor):
        v = x.value
    else:
        v = np.asarray(x, dtype=np.float64)
    if v.ndim == 2 and v.shape == (config.n_regions, config.u_in):
        v = v[None]
    if v.ndim == 2 and v.shape[1] == config.u_in and v.shape[0] % config.n_regions == 0:
        return ad.Tensor(v)
    if v.ndim != 3 or v.shape[1:] != (config.n_regions, config.u_in):
        raise ShapeMismatch(
            f"input of shape {v.shape} does not match (n={config.n_regions}, u_in={config.u_in})"
        )
    return ad.Tensor(v.reshape(-1, config.u_in))


def forward(x, a_norm, params, config):
    """Predictions as a ``(B*n) x u_out`` tensor for input windows ``x``.

    ``x`` is one ``n x u_in`` window, a ``(B, n, u_in)`` batch, or the
    already stacked ``(B*n) x u_in`` tensor.
    """
    z = _stack_input(x, config)
    if config.encoder_mode == "step":
        seq = [
            gcn_encode(ad.slice_cols(z, t, t + 1), a_norm, params, config.k_layers)
            for t in range(config.u_in)
        ]
        hidden = lstm_decode(seq, params)
    else:
        hidden = lstm_decode(gcn_encode(z, a_norm, params, config.k_layers), params)
    if config.head == "node":
        return ad.add(ad.matmul(hidden, params["dense_w"]), params["dense_b"])
    b = hidden.rows // config.n_regions
    flat = ad.reshape(hidden, b, config.n_regions * config.lstm_hidden)
    out = ad.add(ad.matmul(flat, params["dense_w"]), params["dense_b"])
    return ad.reshape(out, b * config.n_regions, config.u_out)


def predict(x, a_norm, params, config):
    """Untaped forward returning an array of shape ``(B, n, u_out)``."""
    v = np.asarray(x, dtype=np.float64)
    single = v.ndim == 2
    out = forward(v, a_norm, params, config).value.reshape(-1, config.n_regions, config.u_out)
    return out[0] if single else out


# -- checkpoints -----------------------------------------------------------------


@dataclass
class Checkpoint:
    config: WestConfig
    adjacency: RenormalizedAdjacency
    params: WestParams
    scaler: MinMaxScaler
    format_version: int = FORMAT_VERSION


_MAGIC = b"WESTCKPT"


def _f(v):
    return repr(float(v))


def save_checkpoint(path, ckpt):
    """Write ``ckpt``; ``*.json`` paths get the JSON container, others binary."""
    if str(path).endswith(".json"):
        doc = {
            "format_version": ckpt.format_version,
            "config": ckpt.config.to_dict(),
            "scaler": {"lo": _f(ckpt.scaler.lo), "hi": _f(ckpt.scaler.hi)},
            "adjacency": {
                "n": ckpt.adjacency.n,
                "matrix": [[_f(v) for v in row] for row in ckpt.adjacency.matrix],
            },
            "params": {
                name: {"shape": list(p.shape), "data": [_f(v) for v in p.value.ravel()]}
                for name, p in ckpt.params.tensors.items()
            },
        }
        with open(path, "w", encoding="utf-8") as fh:
            json.dump(doc, fh, sort_keys=False, separators=(",", ":"))
            fh.write("\n")
        return
    header = {
        "config": ckpt.config.to_dict(),
        "scaler": {"lo": _f(ckpt.scaler.lo), "hi": _f(ckpt.scaler.hi)},
        "n": ckpt.adjacency.n,
        "params": [[name, list(p.shape)] for name, p in ckpt.params.tensors.items()],
    }
    hbytes = json.dumps(header, separators=(",", ":")).encode("utf-8")
    blobs = [np.ascontiguousarray(ckpt.adjacency.matrix, dtype="<f8").tobytes()]
    blobs += [np.ascontiguousarray(p.value, dtype="<f8").tobytes() for p in ckpt.params.as_list()]
    with open(path, "wb") as fh:
        fh.write(_MAGIC)
        fh.write(struct.pack("<IQ", ckpt.format_version, len(hbytes)))
        fh.write(hbytes)
        for b in blobs:
            fh.write(b)


def _check_version(found):
    if found != FORMAT_VERSION:
        raise VersionMismatch(found, FORMAT_VERSION)


def load_checkpoint(path):
    with open(path, "rb") as fh:
        raw = fh.read()
    if raw.startswith(_MAGIC):
        return _load_binary(raw)
    try:
        doc = json.loads(raw.decode("utf-8"))
    except (UnicodeDecodeError, json.JSONDecodeError) as exc:
        raise CorruptCheckpoint(f"{path}: not a readable checkpoint ({exc})") from exc
    try:
        _check_version(doc["format_version"])
        config = WestConfig(**doc["config"])
        scaler = MinMaxScaler(float(doc["scaler"]["lo"]), float(doc["scaler"]["hi"]))
        adj = doc["adjacency"]
        matrix = np.array([[float(v) for v in row] for row in adj["matrix"]], dtype=np.float64)
        tensors = {}
        for name, spec in doc["params"].items():
            data = np.array([float(v) for v in spec["data"]], dtype=np.float64)
            tensors[name] = ad.Parameter(data.reshape(spec["shape"]), name)
    except VersionMismatch:
        raise
    except (KeyError, TypeError, ValueError) as exc:
        raise CorruptCheckpoint(f"{path}: malformed checkpoint ({exc})") from exc
    params = WestParams(tensors)
    _validate(config, params, matrix, path)
    return Checkpoint(config, RenormalizedAdjacency(int(adj["n"]), matrix), params, scaler,
                      doc["format_version"])


def _load_binary(raw):
    head = len(_MAGIC) + struct.calcsize("<IQ")
    if len(raw) < head:
        raise CorruptCheckpoint("truncated checkpoint header")
    version, hlen = struct.unpack_from("<IQ", raw, len(_MAGIC))
    _check_version(version)
    try:
        header = json.loads(raw[head:head + hlen].decode("utf-8"))
    except (UnicodeDecodeError, json.JSONDecodeError) as exc:
        raise CorruptCheckpoint(f"unreadable checkpoint header ({exc})") from exc
    pos = head + hlen
    try:
        n = int(header["n"])
        layout = [(str(name), int(r), int(c)) for name, (r, c) in header["params"]]
        config = WestConfig(**header["config"])
        scaler = MinMaxScaler(float(header["scaler"]["lo"]), float(header["scaler"]["hi"]))
    except (KeyError, TypeError, ValueError) as exc:
        raise CorruptCheckpoint(f"malformed checkpoint header ({exc})") from exc
    sizes = [n * n] + [r * c for _, r, c in layout]
    if len(raw) != pos + 8 * sum(sizes):
        raise CorruptCheckpoint(
            f"checkpoint payload is {len(raw) - pos} bytes, expected {8 * sum(sizes)}"
        )
    data = np.frombuffer(raw, dtype="<f8", offset=pos).astype(np.float64)
    matrix = data[: n * n].reshape(n, n).copy()
    off = n * n
    tensors = {}
    for name, r, c in layout:
        tensors[name] = ad.Parameter(data[off:off + r * c].reshape(r, c), name)
        off += r * c
    params = WestParams(tensors)
    _validate(config, params, matrix, "checkpoint")
    return Checkpoint(config, RenormalizedAdjacency(n, matrix), params, scaler, version)


def _validate(config, params, matrix, where):
    expect = param_shapes(config)
    got = {k: p.shape for k, p in params.tensors.items()}
    if got != expect:
        raise CorruptCheckpoint(f"{where}: parameter shapes {got} do not match config")
    if matrix.shape != (config.n_regions, config.n_regions):
        raise CorruptCheckpoint(f"{where}: adjacency shape {matrix.shape} does not match config")
    if not all(np.isfinite(p.value).all() for p in params.as_list()):
        raise CorruptCheckpoint(f"{where}: non-finite parameter values")
