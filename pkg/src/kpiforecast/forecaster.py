"""Stacked LSTM forecaster with exact backpropagation through time.

Architecture (all layers applied per time step after the recurrent stack)::

    LSTM(u) -> LSTM(u) -> LSTM(u) -> FC(4h, relu) -> FC(2h, relu) -> FC(h, relu) -> Linear(C)

Gate parameters of an LSTM layer are stored concatenated along the output
axis in the order input, forget, cell candidate, output: ``W`` is
(in_dim, 4u), ``U`` is (u, 4u), ``b`` is (4u,). :func:`gate_params`
returns the per-gate views.

Everything is float64. Training is plain gradient descent on the mean
squared error of the last ``w_lbl`` output steps.
"""

from __future__ import annotations

import json
import struct
import time
from dataclasses import asdict, dataclass, field
from typing import Callable, Optional

import numpy as np

from .errors import AlignmentError, ConfigError, DivergenceError, NumericalError, ShapeError
from .preprocess import ScalerParams
from .windowing import WindowSet, batch_indices

GATES = ("input", "forget", "cell", "output")
N_LSTM = 3
DIVERGENCE_LIMIT = 1e6
EVAL_CHUNK = 2048

CHECKPOINT_MAGIC = b"KPIFCKPT"
CHECKPOINT_VERSION = 1


@dataclass(frozen=True)
class ModelConfig:
    d: int
    T: int
    u: int = 32
    h: int = 16
    C: int = 1
    eta: float = 1e-3
    epochs: int = 50
    batch_size: int = 4
    seed: int = 0
    shuffle: bool = True

    def __post_init__(self):
        for name in ("d", "T", "u", "h", "C", "batch_size"):
            if getattr(self, name) < 1:
                raise ConfigError(f"{name} must be >= 1, got {getattr(self, name)}")
        if self.epochs < 0:
            raise ConfigError(f"epochs must be >= 0, got {self.epochs}")
        if not self.eta > 0:
            raise ConfigError(f"learning rate must be > 0, got {self.eta}")

    @property
    def n_lstm(self) -> int:
        return N_LSTM

    @property
    def fc_widths(self) -> tuple:
        return (4 * self.h, 2 * self.h, self.h)


def param_shapes(cfg: ModelConfig) -> dict:
    """Ordered name -> shape map of every trainable tensor."""
    shapes = {}
    n_in = cfg.d
    for k in range(N_LSTM):
        shapes[f"lstm{k}.W"] = (n_in, 4 * cfg.u)
        shapes[f"lstm{k}.U"] = (cfg.u, 4 * cfg.u)
        shapes[f"lstm{k}.b"] = (4 * cfg.u,)
        n_in = cfg.u
    for k, width in enumerate(cfg.fc_widths):
        shapes[f"fc{k}.W"] = (n_in, width)
        shapes[f"fc{k}.b"] = (width,)
        n_in = width
    shapes["out.W"] = (n_in, cfg.C)
    shapes["out.b"] = (cfg.C,)
    return shapes


@dataclass
class ModelState:
    params: dict
    config: ModelConfig
    scaler: Optional[ScalerParams] = None
    epochs_done: int = 0

    def copy(self) -> "ModelState":
        return ModelState({k: v.copy() for k, v in self.params.items()},
                          self.config, self.scaler, self.epochs_done)

    @property
    def n_params(self) -> int:
        return sum(v.size for v in self.params.values())


@dataclass
class TrainHistory:
    train_loss: list = field(default_factory=list)
    val_loss: list = field(default_factory=list)
    seconds: list = field(default_factory=list)

    def __len__(self):
        return len(self.train_loss)

    def records(self) -> list:
        return [{"epoch": e + 1, "train_loss": tl, "val_loss": vl}
                for e, (tl, vl) in enumerate(zip(self.train_loss, self.val_loss))]


def gate_params(state: ModelState, layer: int, gate: str):
    """Views ``(W, U, b)`` of one gate of one LSTM layer."""
    g = GATES.index(gate)
    u = state.config.u
    sl = slice(g * u, (g + 1) * u)
    p = state.params
    return p[f"lstm{layer}.W"][:, sl], p[f"lstm{layer}.U"][:, sl], p[f"lstm{layer}.b"][sl]


def init_model(cfg: ModelConfig, scaler: Optional[ScalerParams] = None) -> ModelState:
    """Seeded Glorot-uniform weights, zero biases, forget-gate bias 1."""
    rng = np.random.default_rng(cfg.seed)
    params = {}
    for name, shape in param_shapes(cfg).items():
        if name.endswith(".b"):
            b = np.zeros(shape)
            if name.startswith("lstm"):
                b[cfg.u:2 * cfg.u] = 1.0
            params[name] = b
        elif name.startswith("lstm"):
            # per-gate bound: fan_out of a single gate is u
            limit = np.sqrt(6.0 / (shape[0] + cfg.u))
            params[name] = rng.uniform(-limit, limit, size=shape)
        else:
            limit = np.sqrt(6.0 / (shape[0] + shape[1]))
            params[name] = rng.uniform(-limit, limit, size=shape)
    return ModelState(params, cfg, scaler)


def _sigmoid(x):
    return 0.5 * (1.0 + np.tanh(0.5 * x))


def _check_finite(x, layer):
    if not np.all(np.isfinite(x)):
        raise NumericalError(f"non-finite values in output of layer {layer}")


def _lstm_forward(x, W, U, b, u):
    B, T, _ = x.shape
    xw = x @ W + b
    h = np.zeros((B, u))
    c = np.zeros((B, u))
    H = np.empty((B, T, u))
    Cs = np.empty((B, T, u))
    TC = np.empty((B, T, u))
    A = np.empty((B, T, 4 * u))
    for t in range(T):
        z = xw[:, t] + h @ U
        a = _sigmoid(z)
        a[:, 2 * u:3 * u] = np.tanh(z[:, 2 * u:3 * u])
        i, f, g, o = a[:, :u], a[:, u:2 * u], a[:, 2 * u:3 * u], a[:, 3 * u:]
        c = f * c + i * g
        tc = np.tanh(c)
        h = o * tc
        A[:, t] = a
        Cs[:, t] = c
        TC[:, t] = tc
        H[:, t] = h
    return H, (x, A, Cs, TC, H)


def lstm_layer_forward(x: np.ndarray, W: np.ndarray, U: np.ndarray, b: np.ndarray) -> np.ndarray:
    """Hidden states (B, T, u) of one LSTM layer over inputs (B, T, n_in).

    Gate blocks in ``W``, ``U`` and ``b`` are ordered input, forget, cell, output.
    """
    return _lstm_forward(np.asarray(x, dtype=np.float64), W, U, b, U.shape[0])[0]


def _lstm_backward(dH, cache, W, U, u, need_dx=True):
    x, A, Cs, TC, H = cache
    B, T, n = x.shape
    dZ = np.empty((B, T, 4 * u))
    dh_next = np.zeros((B, u))
    dc_next = np.zeros((B, u))
    zeros = np.zeros((B, u))
    for t in range(T - 1, -1, -1):
        a = A[:, t]
        i, f, g, o = a[:, :u], a[:, u:2 * u], a[:, 2 * u:3 * u], a[:, 3 * u:]
        tc = TC[:, t]
        c_prev = Cs[:, t - 1] if t > 0 else zeros
        dh = dH[:, t] + dh_next
        dc = dh * o * (1.0 - tc * tc) + dc_next
        dz = dZ[:, t]
        dz[:, :u] = dc * g * i * (1.0 - i)
        dz[:, u:2 * u] = dc * c_prev * f * (1.0 - f)
        dz[:, 2 * u:3 * u] = dc * i * (1.0 - g * g)
        dz[:, 3 * u:] = dh * tc * o * (1.0 - o)
        dc_next = dc * f
        dh_next = dz @ U.T
    h_prev = np.concatenate([np.zeros((B, 1, u)), H[:, :-1]], axis=1)
    dz2 = dZ.reshape(B * T, 4 * u)
    dW = x.reshape(B * T, n).T @ dz2
    dU = h_prev.reshape(B * T, u).T @ dz2
    db = dz2.sum(axis=0)
    dx = dZ @ W.T if need_dx else None
    return dx, dW, dU, db


def _head_forward(params, z, n_fc, check=True):
    cache = []
    for k in range(n_fc):
        pre = z @ params[f"fc{k}.W"] + params[f"fc{k}.b"]
        out = np.maximum(pre, 0.0)
        cache.append((z, pre))
        z = out
        if check:
            _check_finite(z, f"fc{k}")
    y = z @ params["out.W"] + params["out.b"]
    cache.append((z, None))
    if check:
        _check_finite(y, "out")
    return y, cache


def _stack_forward(params, cfg, X, check=True):
    z = X
    caches = []
    for k in range(N_LSTM):
        z, cache = _lstm_forward(z, params[f"lstm{k}.W"], params[f"lstm{k}.U"], params[f"lstm{k}.b"], cfg.u)
        caches.append(cache)
        if check:
            _check_finite(z, f"lstm{k}")
    return z, caches


def _as_batch(state, X):
    X = np.asarray(X, dtype=np.float64)
    single = X.ndim == 2
    if single:
        X = X[None]
    cfg = state.config
    if X.ndim != 3 or X.shape[1:] != (cfg.T, cfg.d):
        raise ShapeError(f"expected input of shape (T, d) = ({cfg.T}, {cfg.d}), got {X.shape[-2:]}")
    return X, single


def forward(state: ModelState, X: np.ndarray) -> np.ndarray:
    """Full-sequence output: (T, d) -> (T, C), or batched (B, T, d) -> (B, T, C)."""
    X, single = _as_batch(state, X)
    H, _ = _stack_forward(state.params, state.config, X)
    y, _ = _head_forward(state.params, H, len(state.config.fc_widths))
    return y[0] if single else y


def label_align(Yhat: np.ndarray, w_lbl: int) -> np.ndarray:
    """Last ``w_lbl`` time steps of a (T, C) or (B, T, C) output."""
    T = Yhat.shape[-2]
    if not 1 <= w_lbl <= T:
        raise AlignmentError(f"label width {w_lbl} not in [1, T={T}]")
    return Yhat[..., T - w_lbl:, :]


def mse_loss(pred: np.ndarray, target: np.ndarray) -> float:
    """Mean squared error over batch, time and feature."""
    pred = np.asarray(pred, dtype=np.float64)
    target = np.asarray(target, dtype=np.float64)
    if pred.shape != target.shape:
        raise ShapeError(f"prediction shape {pred.shape} != target shape {target.shape}")
    return float(np.mean((pred - target) ** 2))


def loss_and_grad(state: ModelState, X: np.ndarray, Y: np.ndarray):
    """Loss on the label-aligned output and its exact gradient w.r.t. every parameter.

    ``X`` is (B, T, d), ``Y`` is (B, w_lbl, C). Output steps before the label
    slice receive zero gradient, so the head is only evaluated on label steps.
    """
    params, cfg = state.params, state.config
    X, _ = _as_batch(state, X)
    Y = np.asarray(Y, dtype=np.float64)
    B = X.shape[0]
    if Y.ndim != 3 or Y.shape[0] != B or Y.shape[2] != cfg.C:
        raise ShapeError(f"target shape {Y.shape} incompatible with batch {B} and C={cfg.C}")
    w_lbl = Y.shape[1]
    if not 1 <= w_lbl <= cfg.T:
        raise AlignmentError(f"label width {w_lbl} not in [1, T={cfg.T}]")

    H, lstm_caches = _stack_forward(params, cfg, X)
    H_lbl = H[:, cfg.T - w_lbl:]
    n_fc = len(cfg.fc_widths)
    pred, head_cache = _head_forward(params, H_lbl, n_fc)
    resid = pred - Y
    loss = float(np.mean(resid ** 2))

    grads = {}
    dy = 2.0 * resid / resid.size
    z, _ = head_cache[-1]
    grads["out.W"] = z.reshape(-1, z.shape[-1]).T @ dy.reshape(-1, cfg.C)
    grads["out.b"] = dy.sum(axis=(0, 1))
    dz = dy @ params["out.W"].T
    for k in range(n_fc - 1, -1, -1):
        z_in, pre = head_cache[k]
        dpre = dz * (pre > 0)
        grads[f"fc{k}.W"] = z_in.reshape(-1, z_in.shape[-1]).T @ dpre.reshape(-1, dpre.shape[-1])
        grads[f"fc{k}.b"] = dpre.sum(axis=(0, 1))
        dz = dpre @ params[f"fc{k}.W"].T

    dH = np.zeros_like(H)
    dH[:, cfg.T - w_lbl:] = dz
    for k in range(N_LSTM - 1, -1, -1):
        W, U = params[f"lstm{k}.W"], params[f"lstm{k}.U"]
        dH, dW, dU, db = _lstm_backward(dH, lstm_caches[k], W, U, cfg.u, need_dx=k > 0)
        grads[f"lstm{k}.W"] = dW
        grads[f"lstm{k}.U"] = dU
        grads[f"lstm{k}.b"] = db

    for name, g in grads.items():
        if not np.all(np.isfinite(g)):
            raise NumericalError(f"non-finite gradient for {name}")
    return loss, {name: grads[name] for name in params}


def backward(state: ModelState, X: np.ndarray, Y: np.ndarray) -> dict:
    """Gradient of the label-aligned MSE w.r.t. every parameter tensor."""
    return loss_and_grad(state, X, Y)[1]


def sgd_step(state: ModelState, grads: dict, eta: float) -> ModelState:
    """In-place update ``theta <- theta - eta * grad``."""
    updated = {}
    for name, p in state.params.items():
        g = grads[name]
        if g.shape != p.shape:
            raise ShapeError(f"gradient for {name} has shape {g.shape}, parameter has {p.shape}")
        new = p - eta * g
        if not np.all(np.isfinite(new)):
            raise NumericalError(f"non-finite update for {name}")
        updated[name] = new
    for name, new in updated.items():
        state.params[name][...] = new
    return state


def predict_scaled(state: ModelState, X: np.ndarray, w_lbl: int) -> np.ndarray:
    """Label-aligned predictions (M, w_lbl, C) for stacked inputs (M, T, d)."""
    X, _ = _as_batch(state, X)
    cfg = state.config
    if not 1 <= w_lbl <= cfg.T:
        raise AlignmentError(f"label width {w_lbl} not in [1, T={cfg.T}]")
    out = np.empty((X.shape[0], w_lbl, cfg.C))
    n_fc = len(cfg.fc_widths)
    for lo in range(0, X.shape[0], EVAL_CHUNK):
        H, _ = _stack_forward(state.params, cfg, X[lo:lo + EVAL_CHUNK])
        out[lo:lo + EVAL_CHUNK], _ = _head_forward(state.params, H[:, cfg.T - w_lbl:], n_fc)
    return out


def predict(state: ModelState, windows: WindowSet) -> np.ndarray:
    """Scaled predictions for every window, shape (M, w_lbl, C)."""
    return predict_scaled(state, windows.X, windows.spec.w_lbl)


def evaluate_loss(state: ModelState, windows: WindowSet) -> float:
    return mse_loss(predict(state, windows), windows.Y)


def train(state: ModelState, train_windows: WindowSet, val_windows: WindowSet,
          progress: Optional[Callable[[dict], None]] = None):
    """Plain gradient descent for ``config.epochs`` epochs.

    Each epoch visits every training window once in mini-batches (shuffled
    from ``(seed, epoch)`` when ``config.shuffle``). After each epoch the
    loss over all training and validation windows is recorded; ``progress``
    receives one record per epoch.

    Raises
    ------
    DivergenceError
        If any loss exceeds 1e6 or becomes non-finite.
    """
    cfg = state.config
    if len(train_windows) == 0 or len(val_windows) == 0:
        raise ShapeError("training and validation window sets must be non-empty")
    history = TrainHistory()
    for epoch in range(cfg.epochs):
        t0 = time.perf_counter()
        order = np.arange(len(train_windows))
        if cfg.shuffle:
            order = np.random.default_rng([cfg.seed, state.epochs_done]).permutation(len(train_windows))
        for idx in batch_indices(order, cfg.batch_size):
            loss, grads = loss_and_grad(state, train_windows.X[idx], train_windows.Y[idx])
            _guard(loss, state.epochs_done + 1, "batch")
            sgd_step(state, grads, cfg.eta)
        state.epochs_done += 1
        tl = evaluate_loss(state, train_windows)
        vl = evaluate_loss(state, val_windows)
        _guard(tl, state.epochs_done, "train")
        _guard(vl, state.epochs_done, "validation")
        history.train_loss.append(tl)
        history.val_loss.append(vl)
        history.seconds.append(time.perf_counter() - t0)
        if progress is not None:
            progress({"epoch": state.epochs_done, "train_loss": tl, "val_loss": vl})
    return state, history


def _guard(loss, epoch, what):
    if not np.isfinite(loss) or loss > DIVERGENCE_LIMIT:
        raise DivergenceError(f"{what} loss {loss!r} at epoch {epoch} exceeds {DIVERGENCE_LIMIT:g}; "
                              "lower the learning rate")


def numerical_gradient(state: ModelState, X, Y, eps: float = 1e-5) -> dict:
    """Central finite differences of the label-aligned MSE for every parameter entry."""
    X = np.asarray(X, dtype=np.float64)
    Y = np.asarray(Y, dtype=np.float64)
    w_lbl = Y.shape[1]

    def f():
        return mse_loss(predict_scaled(state, X, w_lbl), Y)

    out = {}
    for name, p in state.params.items():
        g = np.empty_like(p)
        flat, gflat = p.reshape(-1), g.reshape(-1)
        for j in range(flat.size):
            orig = flat[j]
            flat[j] = orig + eps
            lp = f()
            flat[j] = orig - eps
            lm = f()
            flat[j] = orig
            gflat[j] = (lp - lm) / (2 * eps)
        out[name] = g
    return out


def relative_errors(analytic: dict, numeric: dict, floor: float = 1e-7) -> dict:
    """Per-tensor max of ``|a - n| / max(|a|, |n|, floor)``.

    The floor keeps entries whose true gradient is near zero from being
    judged on finite-difference roundoff alone.
    """
    out = {}
    for name, a in analytic.items():
        n = numeric[name]
        denom = np.maximum(np.maximum(np.abs(a), np.abs(n)), floor)
        out[name] = float(np.max(np.abs(a - n) / denom))
    return out


# -- checkpoints --------------------------------------------------------------

def save_checkpoint(state: ModelState, path, scaler_ref: Optional[str] = None) -> None:
    """Write a versioned binary checkpoint.

    Layout: magic, uint32 version, uint64 header length, UTF-8 JSON header,
    then every tensor as little-endian float64 in header order. The output
    is a pure function of the state, so identical states give identical bytes.
    """
    tensors, blobs, offset = [], [], 0
    for name, p in state.params.items():
        blob = np.ascontiguousarray(p, dtype="<f8").tobytes()
        tensors.append({"name": name, "shape": list(p.shape), "dtype": "<f8",
                        "offset": offset, "nbytes": len(blob)})
        blobs.append(blob)
        offset += len(blob)
    header = {
        "format": "kpiforecast-checkpoint",
        "version": CHECKPOINT_VERSION,
        "config": asdict(state.config),
        "seed": state.config.seed,
        "epochs_done": state.epochs_done,
        "scaler_ref": scaler_ref,
        "scaler": state.scaler.to_dict() if state.scaler is not None else None,
        "tensors": tensors,
    }
    hbytes = json.dumps(header, sort_keys=True, separators=(",", ":")).encode("utf-8")
    with open(path, "wb") as f:
        f.write(CHECKPOINT_MAGIC)
        f.write(struct.pack("<IQ", CHECKPOINT_VERSION, len(hbytes)))
        f.write(hbytes)
        for blob in blobs:
            f.write(blob)


def load_checkpoint(path) -> ModelState:
    with open(path, "rb") as f:
        raw = f.read()
    if raw[:8] != CHECKPOINT_MAGIC:
        raise ShapeError(f"{path}: not a kpiforecast checkpoint")
    version, hlen = struct.unpack_from("<IQ", raw, 8)
    if version != CHECKPOINT_VERSION:
        raise ShapeError(f"{path}: unsupported checkpoint version {version}")
    start = 8 + struct.calcsize("<IQ")
    header = json.loads(raw[start:start + hlen].decode("utf-8"))
    data = raw[start + hlen:]
    cfg = ModelConfig(**header["config"])
    params = {}
    for t in header["tensors"]:
        buf = data[t["offset"]:t["offset"] + t["nbytes"]]
        params[t["name"]] = np.frombuffer(buf, dtype="<f8").astype(np.float64).reshape(t["shape"])
    expected = param_shapes(cfg)
    for name, shape in expected.items():
        if name not in params or params[name].shape != tuple(shape):
            raise ShapeError(f"{path}: tensor {name} missing or mis-shaped")
    scaler = ScalerParams.from_dict(header["scaler"]) if header.get("scaler") else None
    return ModelState({n: params[n] for n in expected}, cfg, scaler, header["epochs_done"])
