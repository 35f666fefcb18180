"""Recurrent network core: forward pass, backpropagation through time,
weighted-MAE loss, Adam, and checkpoint serialization.

The architecture is a stack of recurrent layers (LSTM by default; GRU and
vanilla cells share the interface) followed by a single linear layer that
maps the final hidden state to the six state increments. Gate activations
are sigmoid; the input activation is configurable (tanh default). Gradients
are derived by hand for this fixed architecture and verified against finite
differences in the test suite. All math runs at one declared precision.
"""

from __future__ import annotations

import json
import struct
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import NamedTuple

import numpy as np
from scipy.special import expit as _sigmoid

from .errors import CheckpointError, ConfigError, DataError

CELLS = ("lstm", "gru", "vanilla")
ACTIVATIONS = ("tanh", "relu", "sigmoid")
_GATES = {"lstm": 4, "gru": 3, "vanilla": 1}

CHECKPOINT_MAGIC = b"NAVC"
CHECKPOINT_VERSION = 1


@dataclass
class NetworkConfig:
    recurrent_layers: int = 4
    hidden_size: int = 200
    input_size: int = 11
    output_size: int = 6
    cell: str = "lstm"
    input_activation: str = "tanh"
    # the recurrent (gate) activation is fixed to sigmoid

    def __post_init__(self):
        if min(self.recurrent_layers, self.hidden_size, self.input_size, self.output_size) < 1:
            raise ConfigError("network sizes must be positive")
        if self.cell not in CELLS:
            raise ConfigError(f"unknown cell {self.cell!r}")
        if self.input_activation not in ACTIVATIONS:
            raise ConfigError(f"unknown activation {self.input_activation!r}")


def _act(name: str, x: np.ndarray) -> np.ndarray:
    if name == "tanh":
        return np.tanh(x)
    if name == "relu":
        return np.maximum(x, 0.0)
    return _sigmoid(x)


def _act_deriv_from_value(name: str, y: np.ndarray) -> np.ndarray:
    """Derivative of the activation expressed through its output value."""
    if name == "tanh":
        return 1.0 - y * y
    if name == "relu":
        return (y > 0.0).astype(y.dtype)
    return y * (1.0 - y)


@dataclass
class LayerParams:
    wx: np.ndarray  # [gates*h, in]
    wh: np.ndarray  # [gates*h, h]
    b: np.ndarray  # [gates*h]


@dataclass
class DenseParams:
    w: np.ndarray  # [out, h]
    b: np.ndarray  # [out]


@dataclass
class NetworkParams:
    layers: list[LayerParams]
    dense: DenseParams
    cell: str = "lstm"
    input_activation: str = "tanh"

    def arrays(self):
        """(name, array) pairs in canonical serialization order."""
        for i, layer in enumerate(self.layers):
            yield f"layer{i}.wx", layer.wx
            yield f"layer{i}.wh", layer.wh
            yield f"layer{i}.b", layer.b
        yield "dense.w", self.dense.w
        yield "dense.b", self.dense.b

    def copy(self) -> "NetworkParams":
        return NetworkParams(
            layers=[LayerParams(l.wx.copy(), l.wh.copy(), l.b.copy()) for l in self.layers],
            dense=DenseParams(self.dense.w.copy(), self.dense.b.copy()),
            cell=self.cell,
            input_activation=self.input_activation,
        )

    @property
    def dtype(self):
        return self.layers[0].wx.dtype

    @property
    def hidden_size(self) -> int:
        return self.layers[0].wh.shape[1]

    @property
    def input_size(self) -> int:
        return self.layers[0].wx.shape[1]

    @property
    def output_size(self) -> int:
        return self.dense.w.shape[0]

    def to_config(self) -> NetworkConfig:
        return NetworkConfig(
            recurrent_layers=len(self.layers),
            hidden_size=self.hidden_size,
            input_size=self.input_size,
            output_size=self.output_size,
            cell=self.cell,
            input_activation=self.input_activation,
        )


def _orthogonal(rng: np.random.Generator, n: int) -> np.ndarray:
    a = rng.standard_normal((n, n))
    q, r = np.linalg.qr(a)
    return q * np.sign(np.diag(r))


def init_params(cfg: NetworkConfig, seed: int, dtype=np.float32) -> NetworkParams:
    """Deterministic initialization.

    Input kernels are Glorot-uniform over the full gate block, recurrent
    kernels are per-gate orthogonal, biases are zero except the LSTM forget
    gate which starts at 1.
    """
    rng = np.random.default_rng(seed)
    gates = _GATES[cfg.cell]
    layers = []
    in_size = cfg.input_size
    h = cfg.hidden_size
    for _ in range(cfg.recurrent_layers):
        limit = np.sqrt(6.0 / (in_size + gates * h))
        wx = rng.uniform(-limit, limit, size=(gates * h, in_size))
        wh = np.vstack([_orthogonal(rng, h) for _ in range(gates)])
        b = np.zeros(gates * h)
        if cfg.cell == "lstm":
            b[h : 2 * h] = 1.0  # forget gate
        layers.append(LayerParams(wx.astype(dtype), wh.astype(dtype), b.astype(dtype)))
        in_size = h
    limit = np.sqrt(6.0 / (h + cfg.output_size))
    dense = DenseParams(
        rng.uniform(-limit, limit, size=(cfg.output_size, h)).astype(dtype),
        np.zeros(cfg.output_size, dtype=dtype),
    )
    return NetworkParams(layers=layers, dense=dense, cell=cfg.cell, input_activation=cfg.input_activation)


# ---------------------------------------------------------------------------
# single-sample cell steps


def lstm_cell_step(
    x: np.ndarray, h: np.ndarray, c: np.ndarray, layer: LayerParams, input_activation: str = "tanh"
) -> tuple[np.ndarray, np.ndarray]:
    """One LSTM step: gate order i, f, g, o; gates sigmoid, candidate act."""
    x = np.asarray(x)
    hs = len(h)
    z = layer.wx @ x + layer.wh @ h + layer.b
    i = _sigmoid(z[:hs])
    f = _sigmoid(z[hs : 2 * hs])
    g = _act(input_activation, z[2 * hs : 3 * hs])
    o = _sigmoid(z[3 * hs :])
    c_new = f * c + i * g
    h_new = o * _act(input_activation, c_new)
    return h_new, c_new


def gru_cell_step(
    x: np.ndarray, h: np.ndarray, layer: LayerParams, input_activation: str = "tanh"
) -> np.ndarray:
    """One GRU step: gate order r, z, n; the reset gate scales the recurrent
    contribution of the candidate."""
    hs = len(h)
    zx = layer.wx @ np.asarray(x) + layer.b
    zh = layer.wh @ h
    r = _sigmoid(zx[:hs] + zh[:hs])
    z = _sigmoid(zx[hs : 2 * hs] + zh[hs : 2 * hs])
    n = _act(input_activation, zx[2 * hs :] + r * zh[2 * hs :])
    return (1.0 - z) * n + z * h


def vanilla_cell_step(
    x: np.ndarray, h: np.ndarray, layer: LayerParams, input_activation: str = "tanh"
) -> np.ndarray:
    return _act(input_activation, layer.wx @ np.asarray(x) + layer.wh @ h + layer.b)


# ---------------------------------------------------------------------------
# batched forward


@dataclass
class _LayerTape:
    inputs: np.ndarray  # [w, B, in]
    h: np.ndarray  # [w, B, hidden]
    gates: dict = field(default_factory=dict)


@dataclass
class Tape:
    """Per-step activations retained by forward for backpropagation."""

    params: NetworkParams
    layer_tapes: list[_LayerTape]
    h_final: np.ndarray  # [B, hidden]
    y_hat: np.ndarray  # [B, out]
    batched_input: bool = True


def forward(params: NetworkParams, window: np.ndarray, want_tape: bool = True):
    """Run a window (or batch of windows) through the network.

    Input shape [w, input_size] or [B, w, input_size]; features must already
    be normalized. Initial recurrent state is zero for every window. Returns
    (y_hat, tape); tape is None when want_tape is False.
    """
    x = np.asarray(window, dtype=params.dtype)
    batched = x.ndim == 3
    if not batched:
        x = x[None]
    if x.ndim != 3 or x.shape[2] != params.input_size:
        raise DataError(f"window shape {np.asarray(window).shape} does not match input size {params.input_size}")
    B, w, _ = x.shape
    hs = params.hidden_size
    act_name = params.input_activation
    # time-major input to each layer
    seq = np.ascontiguousarray(np.swapaxes(x, 0, 1))  # [w, B, in]
    layer_tapes: list[_LayerTape] = []
    h = np.zeros((B, hs), dtype=params.dtype)

    for layer in params.layers:
        in_size = layer.wx.shape[1]
        pre = seq.reshape(w * B, in_size) @ layer.wx.T + layer.b  # [w*B, gates*h]
        pre = pre.reshape(w, B, -1)
        h = np.zeros((B, hs), dtype=params.dtype)
        H = np.empty((w, B, hs), dtype=params.dtype)
        if params.cell == "lstm":
            c = np.zeros((B, hs), dtype=params.dtype)
            I = np.empty_like(H)
            F = np.empty_like(H)
            G = np.empty_like(H)
            O = np.empty_like(H)
            C = np.empty_like(H)
            CA = np.empty_like(H)
            for t in range(w):
                z = pre[t] + h @ layer.wh.T
                i = _sigmoid(z[:, :hs])
                f = _sigmoid(z[:, hs : 2 * hs])
                g = _act(act_name, z[:, 2 * hs : 3 * hs])
                o = _sigmoid(z[:, 3 * hs :])
                c = f * c + i * g
                ca = _act(act_name, c)
                h = o * ca
                I[t], F[t], G[t], O[t], C[t], CA[t], H[t] = i, f, g, o, c, ca, h
            gates = {"i": I, "f": F, "g": G, "o": O, "c": C, "ca": CA}
        elif params.cell == "gru":
            R = np.empty_like(H)
            Z = np.empty_like(H)
            N = np.empty_like(H)
            RN = np.empty_like(H)  # recurrent contribution to the candidate
            for t in range(w):
                zh = h @ layer.wh.T
                r = _sigmoid(pre[t][:, :hs] + zh[:, :hs])
                zg = _sigmoid(pre[t][:, hs : 2 * hs] + zh[:, hs : 2 * hs])
                rn = zh[:, 2 * hs :]
                n_ = _act(act_name, pre[t][:, 2 * hs :] + r * rn)
                h = (1.0 - zg) * n_ + zg * h
                R[t], Z[t], N[t], RN[t], H[t] = r, zg, n_, rn, h
            gates = {"r": R, "z": Z, "n": N, "rn": RN}
        else:  # vanilla
            for t in range(w):
                h = _act(act_name, pre[t] + h @ layer.wh.T)
                H[t] = h
            gates = {}
        if want_tape:
            layer_tapes.append(_LayerTape(inputs=seq, h=H, gates=gates))
        seq = H

    y = h @ params.dense.w.T + params.dense.b
    tape = None
    if want_tape:
        tape = Tape(params=params, layer_tapes=layer_tapes, h_final=h, y_hat=y, batched_input=batched)
    return (y if batched else y[0]), tape


def predict(params: NetworkParams, windows: np.ndarray, batch_size: int = 256) -> np.ndarray:
    """Tape-free forward over many windows, in fixed-size chunks.

    Chunking changes BLAS blocking, so outputs are reproducible only for a
    fixed batch_size; use batch_size=1 to match streaming inference bit for
    bit.
    """
    windows = np.asarray(windows)
    out = np.empty((len(windows), params.output_size), dtype=params.dtype)
    for start in range(0, len(windows), batch_size):
        chunk = windows[start : start + batch_size]
        y, _ = forward(params, chunk, want_tape=False)
        out[start : start + len(chunk)] = y
    return out


# ---------------------------------------------------------------------------
# loss


@dataclass
class LossSpec:
    kind: str = "weighted_mae"
    weights: np.ndarray | None = None
    huber_delta: float = 1.0

    def __post_init__(self):
        if self.kind not in ("mae", "weighted_mae", "mse", "huber"):
            raise ConfigError(f"unknown loss kind {self.kind!r}")
        if self.weights is not None:
            self.weights = np.asarray(self.weights, dtype=np.float64).reshape(-1)
        if self.kind == "weighted_mae":
            if self.weights is None:
                raise ConfigError("weighted_mae requires weights")
            if np.any(self.weights <= 0):
                raise ConfigError("loss weights must be positive")


def loss(y_hat: np.ndarray, y: np.ndarray, spec: LossSpec) -> float:
    """Per-sample loss averaged over the batch (if one is given)."""
    y_hat = np.asarray(y_hat)
    y = np.asarray(y)
    e = y_hat.astype(np.float64) - y.astype(np.float64)
    n = e.shape[-1]
    if spec.kind == "mae":
        per = np.sum(np.abs(e), axis=-1) / n
    elif spec.kind == "weighted_mae":
        per = np.sum(np.abs(e) * spec.weights, axis=-1) / n
    elif spec.kind == "mse":
        per = np.sum(e * e, axis=-1) / n
    else:
        d = spec.huber_delta
        a = np.abs(e)
        per = np.sum(np.where(a <= d, 0.5 * e * e, d * (a - 0.5 * d)), axis=-1) / n
    return float(np.mean(per))


def loss_grad(y_hat: np.ndarray, y: np.ndarray, spec: LossSpec) -> np.ndarray:
    """Gradient of loss() w.r.t. y_hat; |e| subgradient at 0 taken as 0."""
    y_hat = np.asarray(y_hat)
    e = y_hat.astype(np.float64) - np.asarray(y, dtype=np.float64)
    n = e.shape[-1]
    batch = e.shape[0] if e.ndim == 2 else 1
    if spec.kind == "mae":
        d = np.sign(e) / n
    elif spec.kind == "weighted_mae":
        d = np.sign(e) * spec.weights / n
    elif spec.kind == "mse":
        d = 2.0 * e / n
    else:
        d = np.clip(e, -spec.huber_delta, spec.huber_delta) / n
    return (d / batch).astype(y_hat.dtype)


# ---------------------------------------------------------------------------
# backward (BPTT)


def backward(tape: Tape, y: np.ndarray, spec: LossSpec) -> NetworkParams:
    """Exact gradients of the batch loss w.r.t. every parameter."""
    params = tape.params
    y = np.asarray(y)
    if not tape.batched_input:
        y = y[None]
    dy = loss_grad(tape.y_hat, y, spec)  # [B, out]

    act_name = params.input_activation
    hs = params.hidden_size
    g_dense_w = dy.T @ tape.h_final
    g_dense_b = dy.sum(axis=0)
    d_ext_final = dy @ params.dense.w  # [B, h]

    grads_layers: list[LayerParams | None] = [None] * len(params.layers)
    d_ext: np.ndarray | None = None  # [w, B, h] gradient w.r.t. this layer's output sequence

    for li in range(len(params.layers) - 1, -1, -1):
        layer = params.layers[li]
        lt = tape.layer_tapes[li]
        w, B, _ = lt.h.shape
        dgx = np.zeros((w, B, layer.wx.shape[0]), dtype=params.dtype)
        if params.cell == "gru":
            dgh = np.zeros_like(dgx)
        dh_next = np.zeros((B, hs), dtype=params.dtype)
        if params.cell == "lstm":
            dc_next = np.zeros((B, hs), dtype=params.dtype)
            I, F, G, O, C, CA = (lt.gates[k] for k in ("i", "f", "g", "o", "c", "ca"))
        for t in range(w - 1, -1, -1):
            dh = dh_next.copy()
            if d_ext is not None:
                dh += d_ext[t]
            elif t == w - 1:
                dh += d_ext_final
            if params.cell == "lstm":
                i, f, g, o, c, ca = I[t], F[t], G[t], O[t], C[t], CA[t]
                do = dh * ca
                dc = dc_next + dh * o * _act_deriv_from_value(act_name, ca)
                c_prev = C[t - 1] if t > 0 else 0.0
                dgates = dgx[t]
                dgates[:, :hs] = (dc * g) * (i * (1.0 - i))
                dgates[:, hs : 2 * hs] = (dc * c_prev) * (f * (1.0 - f))
                dgates[:, 2 * hs : 3 * hs] = (dc * i) * _act_deriv_from_value(act_name, g)
                dgates[:, 3 * hs :] = do * (o * (1.0 - o))
                dc_next = dc * f
                dh_next = dgates @ layer.wh
            elif params.cell == "gru":
                r, z, n_, rn = (lt.gates[k][t] for k in ("r", "z", "n", "rn"))
                h_prev = lt.h[t - 1] if t > 0 else np.zeros_like(dh)
                dn = dh * (1.0 - z)
                dz = dh * (h_prev - n_)
                dn_pre = dn * _act_deriv_from_value(act_name, n_)
                dr = dn_pre * rn
                dz_pre = dz * (z * (1.0 - z))
                dr_pre = dr * (r * (1.0 - r))
                dgx[t][:, :hs] = dr_pre
                dgx[t][:, hs : 2 * hs] = dz_pre
                dgx[t][:, 2 * hs :] = dn_pre
                dgh[t][:, :hs] = dr_pre
                dgh[t][:, hs : 2 * hs] = dz_pre
                dgh[t][:, 2 * hs :] = dn_pre * r
                dh_next = dh * z + dgh[t] @ layer.wh
            else:
                dpre = dh * _act_deriv_from_value(act_name, lt.h[t])
                dgx[t] = dpre
                dh_next = dpre @ layer.wh
        flat_x = lt.inputs.reshape(w * B, -1)
        flat_dgx = dgx.reshape(w * B, -1)
        h_prev_seq = np.concatenate([np.zeros((1, B, hs), dtype=params.dtype), lt.h[:-1]], axis=0)
        flat_dgh = dgh.reshape(w * B, -1) if params.cell == "gru" else flat_dgx
        g_wx = flat_dgx.T @ flat_x
        g_wh = flat_dgh.T @ h_prev_seq.reshape(w * B, hs)
        g_b = flat_dgx.sum(axis=0)
        grads_layers[li] = LayerParams(g_wx, g_wh, g_b)
        # gradient w.r.t. this layer's input sequence feeds the layer below
        d_ext = (flat_dgx @ layer.wx).reshape(w, B, -1)

    return NetworkParams(
        layers=grads_layers,
        dense=DenseParams(g_dense_w.astype(params.dtype), g_dense_b.astype(params.dtype)),
        cell=params.cell,
        input_activation=params.input_activation,
    )


# ---------------------------------------------------------------------------
# optimizer


@dataclass
class AdamState:
    m: list[np.ndarray]
    v: list[np.ndarray]
    step: int = 0

    @classmethod
    def zeros_like(cls, params: NetworkParams) -> "AdamState":
        arrays = [a for _, a in params.arrays()]
        return cls(m=[np.zeros_like(a) for a in arrays], v=[np.zeros_like(a) for a in arrays])


def adam_step(
    params: NetworkParams,
    grads: NetworkParams,
    state: AdamState,
    lr: float,
    beta1: float = 0.9,
    beta2: float = 0.999,
    eps: float = 1e-8,
) -> tuple[NetworkParams, AdamState]:
    """Standard bias-corrected Adam update; pure, returns new values."""
    t = state.step + 1
    new_params = params.copy()
    new_m = []
    new_v = []
    p_arrays = [a for _, a in new_params.arrays()]
    g_arrays = [a for _, a in grads.arrays()]
    c1 = 1.0 - beta1**t
    c2 = 1.0 - beta2**t
    for p, g, m, v in zip(p_arrays, g_arrays, state.m, state.v):
        g = g.astype(p.dtype)
        m_new = beta1 * m + (1.0 - beta1) * g
        v_new = beta2 * v + (1.0 - beta2) * (g * g)
        p -= lr * (m_new / c1) / (np.sqrt(v_new / c2) + eps)
        new_m.append(m_new)
        new_v.append(v_new)
    return new_params, AdamState(m=new_m, v=new_v, step=t)


# ---------------------------------------------------------------------------
# checkpoints


class Checkpoint(NamedTuple):
    params: NetworkParams
    config: NetworkConfig
    meta: dict


REQUIRED_META = ("feature_mean", "feature_std", "loss_weights")


def save_checkpoint(params: NetworkParams, cfg: NetworkConfig, meta: dict, path: str | Path) -> None:
    """Serialize params + config + meta.

    Arrays are stored as little-endian float32 (the training precision), so
    the round trip is bit exact for float32 parameters. meta must carry the
    feature normalization and loss weights; inference is self-contained.
    """
    for key in REQUIRED_META:
        if key not in meta:
            raise CheckpointError(f"meta missing required key {key!r}")
    arrays = [(name, np.ascontiguousarray(a, dtype="<f4")) for name, a in params.arrays()]
    header = {
        "config": asdict(cfg),
        "meta": meta,
        "arrays": [{"name": name, "shape": list(a.shape)} for name, a in arrays],
    }
    blob = json.dumps(header, sort_keys=True).encode("utf-8")
    with open(path, "wb") as fh:
        fh.write(CHECKPOINT_MAGIC)
        fh.write(struct.pack("<2I", CHECKPOINT_VERSION, len(blob)))
        fh.write(blob)
        for _, a in arrays:
            fh.write(a.tobytes())


def load_checkpoint(path: str | Path) -> Checkpoint:
    path = Path(path)
    if not path.is_file():
        raise CheckpointError(f"missing checkpoint: {path}")
    with open(path, "rb") as fh:
        magic = fh.read(4)
        if magic != CHECKPOINT_MAGIC:
            raise CheckpointError(f"{path}: bad magic {magic!r}")
        head = fh.read(8)
        if len(head) != 8:
            raise CheckpointError(f"{path}: truncated header")
        version, blob_len = struct.unpack("<2I", head)
        if version != CHECKPOINT_VERSION:
            raise CheckpointError(f"{path}: unsupported version {version}")
        blob = fh.read(blob_len)
        if len(blob) != blob_len:
            raise CheckpointError(f"{path}: truncated JSON header")
        try:
            header = json.loads(blob.decode("utf-8"))
        except (UnicodeDecodeError, json.JSONDecodeError) as exc:
            raise CheckpointError(f"{path}: corrupt header ({exc})") from exc
        payload = fh.read()

    meta = header.get("meta", {})
    for key in REQUIRED_META:
        if key not in meta:
            raise CheckpointError(f"{path}: meta missing {key!r}; refusing to load")
    try:
        cfg = NetworkConfig(**header["config"])
    except (KeyError, TypeError) as exc:
        raise CheckpointError(f"{path}: bad config ({exc})") from exc

    arrays = {}
    offset = 0
    for desc in header.get("arrays", []):
        shape = tuple(desc["shape"])
        count = int(np.prod(shape))
        nbytes = 4 * count
        if offset + nbytes > len(payload):
            raise CheckpointError(f"{path}: truncated array data for {desc['name']}")
        arrays[desc["name"]] = np.frombuffer(payload, dtype="<f4", count=count, offset=offset).reshape(shape).copy()
        offset += nbytes
    if offset != len(payload):
        raise CheckpointError(f"{path}: {len(payload) - offset} trailing bytes")

    layers = []
    for i in range(cfg.recurrent_layers):
        try:
            layers.append(LayerParams(arrays[f"layer{i}.wx"], arrays[f"layer{i}.wh"], arrays[f"layer{i}.b"]))
        except KeyError as exc:
            raise CheckpointError(f"{path}: missing array {exc}") from exc
    if "dense.w" not in arrays or "dense.b" not in arrays:
        raise CheckpointError(f"{path}: missing dense arrays")
    params = NetworkParams(
        layers=layers,
        dense=DenseParams(arrays["dense.w"], arrays["dense.b"]),
        cell=cfg.cell,
        input_activation=cfg.input_activation,
    )
    expected = {
        f"layer{i}.wx": (_GATES[cfg.cell] * cfg.hidden_size, cfg.input_size if i == 0 else cfg.hidden_size)
        for i in range(cfg.recurrent_layers)
    }
    for name, shape in expected.items():
        if arrays[name].shape != shape:
            raise CheckpointError(f"{path}: {name} has shape {arrays[name].shape}, expected {shape}")
    if params.dense.w.shape != (cfg.output_size, cfg.hidden_size):
        raise CheckpointError(f"{path}: dense shape mismatch")
    return Checkpoint(params=params, config=cfg, meta=meta)
