"""From-scratch numpy regressors: stacked LSTM and dense feed-forward nets.

Both architectures end in a ReLU dense "top" layer and a single linear output
unit.  Training minimizes mean squared error with Adam, global-norm gradient
clipping, and early stopping on validation RMSE.

Training runs in float32; ``gradient_check`` rebuilds the same network in
float64 and compares backprop against central finite differences.
"""

from __future__ import annotations

import json
import math
import struct
import time
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np

KINDS = ("recurrent", "dense")
GATES = ("input", "forget", "candidate", "output")
CKPT_MAGIC = b"CTXM"


class ShapeError(ValueError):
    pass


class DivergenceError(RuntimeError):
    def __init__(self, epoch: int, batch: int, value: float):
        super().__init__(f"non-finite loss {value} at epoch {epoch}, batch {batch}")
        self.epoch = epoch
        self.batch = batch


class UndefinedR2Error(ValueError):
    pass


@dataclass(frozen=True)
class NetworkSpec:
    """Architecture and optimization settings for one network."""

    kind: str = "recurrent"
    layer_dims: tuple = (32,)
    top_dim: int = 32
    dropout: float = 0.0
    recurrent_dropout: float = 0.0
    learning_rate: float = 1e-3
    batch_size: int = 256
    max_epochs: int = 50
    patience: int = 5
    seed: int = 0
    clip_norm: float = 5.0
    beta1: float = 0.9
    beta2: float = 0.999
    adam_eps: float = 1e-8

    def __post_init__(self):
        object.__setattr__(self, "layer_dims", tuple(int(d) for d in self.layer_dims))
        self.validate()

    def validate(self) -> None:
        if self.kind not in KINDS:
            raise ValueError(f"kind must be one of {KINDS}, got {self.kind!r}")
        if not self.layer_dims or min(self.layer_dims) < 1 or self.top_dim < 1:
            raise ValueError("layer_dims and top_dim must be positive")
        if any(b > a for a, b in zip(self.layer_dims, self.layer_dims[1:])):
            raise ValueError(f"layer_dims must be non-increasing, got {self.layer_dims}")
        for name in ("dropout", "recurrent_dropout"):
            v = getattr(self, name)
            if not 0.0 <= v < 1.0:
                raise ValueError(f"{name} must be in [0, 1), got {v}")
        if self.learning_rate < 0 or self.batch_size < 1 or self.max_epochs < 0 or self.patience < 1:
            raise ValueError("invalid optimization settings")

    def to_dict(self) -> dict:
        d = asdict(self)
        d["layer_dims"] = list(self.layer_dims)
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "NetworkSpec":
        return cls(**d)


# ---------------------------------------------------------------------------
# layers


def _sigmoid(z):
    return 0.5 * (1.0 + np.tanh(0.5 * z))


class LSTMLayer:
    """One LSTM layer.

    Gate blocks are stored contiguously as (input, forget, output, candidate)
    so the three sigmoid gates share one slice; checkpoints reorder them.
    """

    MEMORY_ORDER = ("input", "forget", "output", "candidate")

    def __init__(self, in_dim: int, hidden: int, rng, dtype=np.float32):
        self.in_dim, self.hidden = in_dim, hidden
        a_in, a_h = 1.0 / math.sqrt(in_dim), 1.0 / math.sqrt(hidden)
        self.W = rng.uniform(-a_in, a_in, (in_dim, 4 * hidden)).astype(dtype)
        self.U = rng.uniform(-a_h, a_h, (hidden, 4 * hidden)).astype(dtype)
        self.b = np.zeros(4 * hidden, dtype=dtype)
        self.b[hidden:2 * hidden] = 1.0  # forget-gate bias

    @property
    def params(self):
        return [self.W, self.U, self.b]

    def gate_slice(self, gate: str) -> slice:
        k = self.MEMORY_ORDER.index(gate)
        return slice(k * self.hidden, (k + 1) * self.hidden)

    def forward(self, x, mask, in_mask=None, rec_mask=None, return_sequences=False):
        B, T, _ = x.shape
        H = self.hidden
        xd = x * in_mask[:, None, :] if in_mask is not None else x
        xw = (xd.reshape(B * T, xd.shape[2]) @ self.W + self.b).reshape(B, T, 4 * H)
        h = np.zeros((B, H), dtype=x.dtype)
        c = np.zeros((B, H), dtype=x.dtype)
        full = mask.all(axis=0)
        steps = []
        hs = np.empty((B, T, H), dtype=x.dtype) if return_sequences else None
        for t in range(T):
            hr = h * rec_mask if rec_mask is not None else h
            z = xw[:, t] + hr @ self.U
            sg = _sigmoid(z[:, :3 * H])
            g = np.tanh(z[:, 3 * H:])
            c_new = sg[:, H:2 * H] * c + sg[:, :H] * g
            tc = np.tanh(c_new)
            h_new = sg[:, 2 * H:] * tc
            steps.append((hr, c, sg, g, tc))
            if full[t]:
                c, h = c_new, h_new
            else:
                m = mask[:, t:t + 1]
                c = c + m * (c_new - c)
                h = h + m * (h_new - h)
            if return_sequences:
                hs[:, t] = h
        cache = (xd, mask, full, in_mask, rec_mask, steps)
        return (hs if return_sequences else h), cache

    def backward(self, dout, cache, need_dx=True):
        """``dout`` is (B, T, H) for sequence outputs or (B, H) for the last state."""
        xd, mask, full, in_mask, rec_mask, steps = cache
        B, T, D = xd.shape
        H = self.hidden
        seq = dout.ndim == 3
        dh = np.zeros((B, H), dtype=xd.dtype) if seq else dout.copy()
        dc = np.zeros((B, H), dtype=xd.dtype)
        dz_all = np.empty((B, T, 4 * H), dtype=xd.dtype)
        dU = np.zeros_like(self.U)
        UT = self.U.T
        for t in range(T - 1, -1, -1):
            if seq:
                dh = dh + dout[:, t]
            hr, c_prev, sg, g, tc = steps[t]
            i, f, o = sg[:, :H], sg[:, H:2 * H], sg[:, 2 * H:]
            if full[t]:
                dh_new = dh
                dc_new = dc + dh * o * (1.0 - tc * tc)
            else:
                m = mask[:, t:t + 1]
                dh_new = m * dh
                dc_new = m * dc + dh_new * o * (1.0 - tc * tc)
            dz = dz_all[:, t]
            dz[:, :H] = dc_new * g
            dz[:, H:2 * H] = dc_new * c_prev
            dz[:, 2 * H:3 * H] = dh_new * tc
            dz[:, :3 * H] *= sg * (1.0 - sg)
            dz[:, 3 * H:] = dc_new * i * (1.0 - g * g)
            dU += hr.T @ dz
            dhr = dz @ UT
            if rec_mask is not None:
                dhr *= rec_mask
            if full[t]:
                dh = dhr
                dc = dc_new * f
            else:
                dh = (1.0 - m) * dh + dhr
                dc = (1.0 - m) * dc + dc_new * f
        flat = dz_all.reshape(B * T, 4 * H)
        dW = xd.reshape(B * T, D).T @ flat
        db = flat.sum(axis=0)
        if not need_dx:
            return None, [dW, dU, db]
        dx = (flat @ self.W.T).reshape(B, T, D)
        if in_mask is not None:
            dx *= in_mask[:, None, :]
        return dx, [dW, dU, db]


class DenseLayer:
    def __init__(self, in_dim: int, out_dim: int, rng, activation: str = "relu", dtype=np.float32):
        a = 1.0 / math.sqrt(in_dim)
        self.W = rng.uniform(-a, a, (in_dim, out_dim)).astype(dtype)
        self.b = np.zeros(out_dim, dtype=dtype)
        self.activation = activation

    @property
    def params(self):
        return [self.W, self.b]

    def forward(self, x, in_mask=None):
        xd = x * in_mask if in_mask is not None else x
        z = xd @ self.W + self.b
        out = np.maximum(z, 0) if self.activation == "relu" else z
        return out, (xd, z, in_mask)

    def backward(self, dout, cache, need_dx=True):
        xd, z, in_mask = cache
        dz = dout * (z > 0) if self.activation == "relu" else dout
        dW = xd.T @ dz
        db = dz.sum(axis=0)
        if not need_dx:
            return None, [dW, db]
        dx = dz @ self.W.T
        if in_mask is not None:
            dx *= in_mask
        return dx, [dW, db]


# ---------------------------------------------------------------------------
# network


class Network:
    """Stacked LSTM (or dense) body, ReLU top layer, linear output unit.

    Recurrent nets take ``(B, T, D)`` inputs with a ``(B, T)`` validity mask;
    ``dropout`` is variational input dropout on every LSTM layer and
    ``recurrent_dropout`` masks the hidden state fed back into each layer.
    Dense nets take ``(B, D)`` inputs (a ``(B, 1, D)`` input is squeezed) and
    apply ``dropout`` to the input of every hidden layer.
    """

    def __init__(self, spec: NetworkSpec, in_dim: int, dtype=np.float32, seed: int | None = None):
        self.spec, self.in_dim, self.dtype = spec, int(in_dim), np.dtype(dtype)
        rng = np.random.default_rng(spec.seed if seed is None else seed)
        self.body = []
        d = self.in_dim
        for h in spec.layer_dims:
            if spec.kind == "recurrent":
                self.body.append(LSTMLayer(d, h, rng, dtype))
            else:
                self.body.append(DenseLayer(d, h, rng, "relu", dtype))
            d = h
        self.top = DenseLayer(d, spec.top_dim, rng, "relu", dtype)
        self.out = DenseLayer(spec.top_dim, 1, rng, "linear", dtype)

    @property
    def layers(self):
        return self.body + [self.top, self.out]

    @property
    def params(self) -> list:
        return [p for layer in self.layers for p in layer.params]

    def get_params(self) -> list:
        return [p.copy() for p in self.params]

    def set_params(self, values) -> None:
        for p, v in zip(self.params, values):
            p[...] = v

    def n_params(self) -> int:
        return int(sum(p.size for p in self.params))

    def _check(self, x, mask):
        if self.spec.kind == "recurrent":
            if x.ndim != 3 or x.shape[2] != self.in_dim:
                raise ShapeError(f"expected input (batch, steps, {self.in_dim}), got {x.shape}")
            if mask is None:
                mask = np.ones(x.shape[:2], dtype=self.dtype)
            if mask.shape != x.shape[:2]:
                raise ShapeError(f"expected mask {x.shape[:2]}, got {mask.shape}")
            return x, mask.astype(self.dtype, copy=False)
        if x.ndim == 3 and x.shape[1] == 1:
            x = x[:, 0]
        if x.ndim != 2 or x.shape[1] != self.in_dim:
            raise ShapeError(f"expected input (batch, {self.in_dim}), got {x.shape}")
        return x, None

    def sample_masks(self, batch: int, rng) -> dict:
        """Dropout masks for one training batch, fixed across time steps."""
        spec = self.spec
        masks = {"input": [None] * len(self.body), "recurrent": [None] * len(self.body)}

        def draw(p, shape):
            if p <= 0:
                return None
            return ((rng.random(shape) >= p) / (1.0 - p)).astype(self.dtype)

        d = self.in_dim
        for k, layer in enumerate(self.body):
            masks["input"][k] = draw(spec.dropout, (batch, d))
            if spec.kind == "recurrent":
                masks["recurrent"][k] = draw(spec.recurrent_dropout, (batch, layer.hidden))
            d = spec.layer_dims[k]
        return masks

    def forward(self, x, mask=None, masks: dict | None = None):
        """Predictions ``(B,)`` and a cache for ``backward``; no dropout unless ``masks`` given."""
        x = np.asarray(x, dtype=self.dtype)
        x, mask = self._check(x, mask)
        caches = []
        h = x
        n = len(self.body)
        for k, layer in enumerate(self.body):
            im = masks["input"][k] if masks else None
            if self.spec.kind == "recurrent":
                rm = masks["recurrent"][k] if masks else None
                h, c = layer.forward(h, mask, im, rm, return_sequences=k < n - 1)
            else:
                h, c = layer.forward(h, im)
            caches.append(c)
        h, c = self.top.forward(h)
        caches.append(c)
        y, c = self.out.forward(h)
        caches.append(c)
        return y[:, 0], caches

    def predict(self, x, mask=None) -> np.ndarray:
        return self.forward(x, mask)[0]

    def backward(self, dy, caches) -> list:
        """Gradients of ``sum(dy * prediction)`` for every parameter, in ``params`` order."""
        g = np.asarray(dy, dtype=self.dtype)[:, None]
        grads = []
        first = self.layers[0]
        for layer, cache in zip(reversed(self.layers), reversed(caches)):
            g, pg = layer.backward(g, cache, need_dx=layer is not first)
            grads.append(pg)
        return [p for pg in reversed(grads) for p in pg]


def mse_loss(pred, target):
    """Mean squared error and its gradient with respect to ``pred``."""
    r = pred - target
    return float(np.mean(r.astype(np.float64) ** 2)), (2.0 / len(r)) * r


# ---------------------------------------------------------------------------
# metrics


@dataclass(frozen=True)
class Metrics:
    r2: float
    rmse: float
    n: int


def rmse(y, yhat) -> float:
    y = np.asarray(y, dtype=np.float64)
    yhat = np.asarray(yhat, dtype=np.float64)
    return float(np.sqrt(np.mean((y - yhat) ** 2)))


def r2_score(y, yhat) -> float:
    """Coefficient of determination against the mean of ``y`` itself."""
    y = np.asarray(y, dtype=np.float64)
    yhat = np.asarray(yhat, dtype=np.float64)
    ss_tot = float(np.sum((y - y.mean()) ** 2))
    if ss_tot == 0.0:
        raise UndefinedR2Error("R^2 undefined: target has zero variance")
    return 1.0 - float(np.sum((y - yhat) ** 2)) / ss_tot


def metrics(y, yhat) -> Metrics:
    if len(y) == 0:
        raise ValueError("cannot evaluate an empty split")
    return Metrics(r2_score(y, yhat), rmse(y, yhat), len(y))


def fit_linear_probe(X, y):
    """Closed-form least squares with intercept; returns a predict function."""
    X = np.asarray(X, dtype=np.float64)
    A = np.c_[X, np.ones(len(X))]
    coef, *_ = np.linalg.lstsq(A, np.asarray(y, dtype=np.float64), rcond=None)
    return lambda Z: np.c_[np.asarray(Z, dtype=np.float64), np.ones(len(Z))] @ coef


# ---------------------------------------------------------------------------
# data


class ArrayData:
    """In-memory inputs, optional mask, and targets."""

    def __init__(self, x, y, mask=None):
        self.x = np.asarray(x, dtype=np.float32)
        self.y = np.asarray(y, dtype=np.float64)
        self.mask = None if mask is None else np.asarray(mask, dtype=np.float32)
        if len(self.x) != len(self.y):
            raise ShapeError(f"inputs have {len(self.x)} rows but targets {len(self.y)}")

    def __len__(self):
        return len(self.y)

    @property
    def target(self):
        return self.y

    def batch(self, idx):
        return self.x[idx], (None if self.mask is None else self.mask[idx])


def predict(net: Network, data, batch_size: int = 1024) -> np.ndarray:
    out = np.empty(len(data), dtype=np.float64)
    for s in range(0, len(data), batch_size):
        idx = np.arange(s, min(s + batch_size, len(data)))
        x, m = data.batch(idx)
        out[idx] = net.predict(x, m)
    return out


# ---------------------------------------------------------------------------
# training


class Adam:
    def __init__(self, params, lr, beta1=0.9, beta2=0.999, eps=1e-8, clip_norm=None):
        self.params, self.lr = params, lr
        self.b1, self.b2, self.eps, self.clip = beta1, beta2, eps, clip_norm
        self.m = [np.zeros_like(p) for p in params]
        self.v = [np.zeros_like(p) for p in params]
        self.t = 0

    def step(self, grads) -> float:
        norm = math.sqrt(sum(float(np.sum(g.astype(np.float64) ** 2)) for g in grads))
        scale = self.clip / norm if self.clip and norm > self.clip else 1.0
        self.t += 1
        if self.lr == 0:
            return norm
        a = self.lr * math.sqrt(1 - self.b2 ** self.t) / (1 - self.b1 ** self.t)
        for p, g, m, v in zip(self.params, grads, self.m, self.v):
            if scale != 1.0:
                g = g * scale
            m *= self.b1
            m += (1 - self.b1) * g
            v *= self.b2
            v += (1 - self.b2) * (g * g)
            p -= (a * m / (np.sqrt(v) + self.eps)).astype(p.dtype)
        return norm


@dataclass
class TrainedModel:
    spec: NetworkSpec
    network: Network
    trace: list = field(default_factory=list)
    best_epoch: int = 0
    fingerprint: str = ""
    wall_time: float = 0.0

    def predict(self, data, batch_size: int = 1024) -> np.ndarray:
        return predict(self.network, data, batch_size)

    def evaluate(self, data) -> Metrics:
        return evaluate(self, data)


class Trainer:
    """Mini-batch training with early stopping on validation RMSE.

    Subclasses may override ``validation_rmse`` (e.g. to script a validation
    curve) or ``on_epoch_end`` for logging.
    """

    def __init__(self, spec: NetworkSpec, log=None):
        self.spec = spec
        self.log = log

    def validation_rmse(self, net: Network, val, epoch: int) -> float:
        return rmse(val.target, predict(net, val))

    def on_epoch_end(self, record: dict) -> None:
        if self.log is not None:
            self.log(record)

    def fit(self, train, val, in_dim: int | None = None, fingerprint: str = "") -> TrainedModel:
        spec = self.spec
        if len(train) == 0 or len(val) == 0:
            raise ValueError("train and validation splits must be non-empty")
        t0 = time.perf_counter()
        if in_dim is None:
            x0, _ = train.batch(np.arange(1))
            in_dim = x0.shape[-1]
        net = Network(spec, in_dim)
        opt = Adam(net.params, spec.learning_rate, spec.beta1, spec.beta2, spec.adam_eps, spec.clip_norm)
        rng = np.random.default_rng(np.random.SeedSequence(spec.seed, spawn_key=(1,)))
        y_all = np.asarray(train.target, dtype=np.float32)
        best, best_epoch, best_params, since = math.inf, 0, net.get_params(), 0
        trace = []
        for epoch in range(1, spec.max_epochs + 1):
            order = rng.permutation(len(train))
            total, count = 0.0, 0
            for b, s in enumerate(range(0, len(order), spec.batch_size)):
                idx = np.sort(order[s:s + spec.batch_size])
                x, m = train.batch(idx)
                masks = net.sample_masks(len(idx), rng)
                pred, caches = net.forward(x, m, masks)
                loss, dy = mse_loss(pred, y_all[idx])
                if not math.isfinite(loss):
                    raise DivergenceError(epoch, b, loss)
                grads = net.backward(dy, caches)
                opt.step(grads)
                total += loss * len(idx)
                count += len(idx)
            val_rmse = float(self.validation_rmse(net, val, epoch))
            if not math.isfinite(val_rmse):
                raise DivergenceError(epoch, -1, val_rmse)
            rec = {"epoch": epoch, "train_loss": total / count, "val_rmse": val_rmse}
            trace.append(rec)
            self.on_epoch_end(rec)
            if val_rmse < best:
                best, best_epoch, best_params, since = val_rmse, epoch, net.get_params(), 0
            else:
                since += 1
                if since >= spec.patience:
                    break
        net.set_params(best_params)
        return TrainedModel(spec, net, trace, best_epoch, fingerprint, time.perf_counter() - t0)


def train(spec: NetworkSpec, train_data, val_data, fingerprint: str = "", log=None) -> TrainedModel:
    """Train a network with early stopping; returns best-epoch parameters."""
    return Trainer(spec, log).fit(train_data, val_data, fingerprint=fingerprint)


def evaluate(model, data) -> Metrics:
    net = model.network if isinstance(model, TrainedModel) else model
    return metrics(data.target, predict(net, data))


# ---------------------------------------------------------------------------
# gradient check


@dataclass
class GradCheckReport:
    max_rel_error: float
    n_probed: int
    passed: bool
    worst: tuple = ()


def _rel_err(a, n, floor=1e-6):
    return abs(a - n) / max(abs(a), abs(n), floor)


def gradient_check(spec: NetworkSpec, seed: int = 0, in_dim: int = 4, seq_len: int = 5, batch: int = 3,
                   n_probe: int = 100, h: float = 1e-5, tol: float = 1e-4, grad_hook=None) -> GradCheckReport:
    """Compare backprop with central differences in float64.

    Dropout masks are sampled once and frozen, so every dropout mode is
    checkable.  Some leading steps are padded to exercise masking.
    ``grad_hook(grads)`` may alter the analytic gradients (negative controls).
    Relative errors use ``max(|a|, |n|, 1e-6)`` as denominator.
    """
    rng = np.random.default_rng(seed)
    net = Network(spec, in_dim, dtype=np.float64, seed=seed)
    # move weights off the symmetric init so gates are well exercised
    for p in net.params:
        p += rng.normal(0, 0.3, p.shape)
    if spec.kind == "recurrent":
        x = rng.normal(size=(batch, seq_len, in_dim))
        lengths = rng.integers(1, seq_len + 1, batch)
        mask = (np.arange(seq_len)[None, :] >= seq_len - lengths[:, None]).astype(np.float64)
        x *= mask[:, :, None]
    else:
        x = rng.normal(size=(batch, in_dim))
        mask = None
    y = rng.normal(size=batch)
    masks = net.sample_masks(batch, rng)

    def loss():
        return mse_loss(net.forward(x, mask, masks)[0], y)[0]

    pred, caches = net.forward(x, mask, masks)
    _, dy = mse_loss(pred, y)
    grads = net.backward(dy, caches)
    if grad_hook is not None:
        grad_hook(grads)
    params = net.params
    sizes = np.array([p.size for p in params])
    total = int(sizes.sum())
    flat_ids = np.arange(total) if total <= n_probe else np.sort(rng.choice(total, n_probe, replace=False))
    offsets = np.r_[0, np.cumsum(sizes)]
    worst, worst_at = 0.0, ()
    for fid in flat_ids:
        k = int(np.searchsorted(offsets, fid, side="right") - 1)
        j = int(fid - offsets[k])
        p = params[k].reshape(-1)
        old = p[j]
        p[j] = old + h
        lp = loss()
        p[j] = old - h
        lm = loss()
        p[j] = old
        num = (lp - lm) / (2 * h)
        e = _rel_err(float(grads[k].reshape(-1)[j]), num)
        if e > worst:
            worst, worst_at = e, (k, j)
    return GradCheckReport(worst, len(flat_ids), worst < tol, worst_at)


# ---------------------------------------------------------------------------
# checkpoints


def _ordered_blocks(net: Network):
    """Parameter arrays in checkpoint order: layer, then gate, then (W, U, b)."""
    for layer in net.layers:
        if isinstance(layer, LSTMLayer):
            for gate in GATES:
                sl = layer.gate_slice(gate)
                yield layer.W, (slice(None), sl)
                yield layer.U, (slice(None), sl)
                yield layer.b, (sl,)
        else:
            yield layer.W, (slice(None),)
            yield layer.b, (slice(None),)


def save_checkpoint(model: TrainedModel, path) -> None:
    net = model.network
    header = {
        "spec": model.spec.to_dict(),
        "in_dim": net.in_dim,
        "schema_fingerprint": model.fingerprint,
        "best_epoch": model.best_epoch,
        "trace": model.trace,
        "gate_order": list(GATES),
    }
    blob = b"".join(np.ascontiguousarray(arr[sl], dtype="<f4").tobytes() for arr, sl in _ordered_blocks(net))
    hb = json.dumps(header, sort_keys=True).encode()
    with open(path, "wb") as fh:
        fh.write(CKPT_MAGIC + struct.pack("<Q", len(hb)) + hb + blob)


def load_checkpoint(path) -> TrainedModel:
    raw = Path(path).read_bytes()
    if raw[:4] != CKPT_MAGIC:
        raise ValueError(f"{path}: not a model checkpoint")
    n = struct.unpack("<Q", raw[4:12])[0]
    header = json.loads(raw[12:12 + n])
    spec = NetworkSpec.from_dict(header["spec"])
    net = Network(spec, header["in_dim"])
    pos = 12 + n
    for arr, sl in _ordered_blocks(net):
        k = arr[sl].size
        arr[sl] = np.frombuffer(raw, dtype="<f4", count=k, offset=pos).reshape(arr[sl].shape)
        pos += 4 * k
    if pos != len(raw):
        raise ValueError(f"{path}: parameter blob size mismatch")
    return TrainedModel(spec, net, header["trace"], header["best_epoch"], header["schema_fingerprint"])
