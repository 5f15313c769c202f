"""Model assembly, normalization, chronological training, checkpointing.

Training follows a strict chronological discipline: windows are split
70/15/15 by position first, and sliding samples are built inside each split
only, so no sample ever straddles a split boundary or a window gap.
"""

from __future__ import annotations

import csv
import json
import struct
import warnings
from dataclasses import asdict, dataclass
from pathlib import Path

import numpy as np

from . import numeric_core as nc
from .config import ModelConfig, TrainConfig
from .numeric_core import NumericalFault, ShapeError, Tape, Tensor
from .span_graph import SpanGraph, WindowFeatures, graph_from_json, graph_to_json
from .spatial_encoder import GraphOperators, encode, init_encoder_params
from .temporal_decoder import decode_series, init_decoder_params

CHECKPOINT_MAGIC = b"STLGTCK1"
CHECKPOINT_VERSION = 1
STD_FLOOR = 1e-8
GRAD_CLIP_NORM = 1.0
EVAL_BATCH = 256


# --------------------------------------------------------------------------
# loss

def pinball(y, y_hat, q: float):
    """psi_q(y - y_hat) = max(q * u, (q - 1) * u), via two ReLU arms."""
    u = nc.sub(nc.as_tensor(y), nc.as_tensor(y_hat))
    return nc.add(nc.mul(nc.relu(u), q), nc.mul(nc.relu(nc.neg(u)), 1.0 - q))


def batch_loss(predictions, targets, q: float):
    """Mean pinball over every (sample, horizon) element."""
    predictions = nc.as_tensor(predictions)
    targets = nc.as_tensor(targets)
    if predictions.shape != targets.shape:
        raise ShapeError(
            f"batch_loss shapes differ: {predictions.shape} vs {targets.shape}")
    return nc.mean(pinball(targets, predictions, q))


# --------------------------------------------------------------------------
# normalization

@dataclass(frozen=True)
class Normalizer:
    """Train-split z-score statistics for node features, context, and label."""
    x_mean: np.ndarray
    x_std: np.ndarray
    c_mean: np.ndarray
    c_std: np.ndarray
    y_mean: float
    y_std: float

    @classmethod
    def fit(cls, windows: list[WindowFeatures]) -> "Normalizer":
        if not windows:
            raise ValueError("cannot fit a normalizer on an empty window list")
        x = np.concatenate([w.X for w in windows], axis=0)
        c = np.stack([w.c for w in windows])
        y = np.array([w.y for w in windows])
        floor = lambda s: np.maximum(s, STD_FLOOR)
        return cls(x.mean(axis=0), floor(x.std(axis=0)),
                   c.mean(axis=0), floor(c.std(axis=0)),
                   float(y.mean()), float(max(y.std(), STD_FLOOR)))

    def norm_x(self, x: np.ndarray) -> np.ndarray:
        return (x - self.x_mean) / self.x_std

    def norm_c(self, c: np.ndarray) -> np.ndarray:
        return (c - self.c_mean) / self.c_std

    def norm_y(self, y: np.ndarray) -> np.ndarray:
        return (y - self.y_mean) / self.y_std

    def denorm_y(self, y: np.ndarray) -> np.ndarray:
        return y * self.y_std + self.y_mean

    def to_dict(self) -> dict:
        return {"x_mean": self.x_mean.tolist(), "x_std": self.x_std.tolist(),
                "c_mean": self.c_mean.tolist(), "c_std": self.c_std.tolist(),
                "y_mean": self.y_mean, "y_std": self.y_std}

    @classmethod
    def from_dict(cls, obj: dict) -> "Normalizer":
        return cls(np.array(obj["x_mean"]), np.array(obj["x_std"]),
                   np.array(obj["c_mean"]), np.array(obj["c_std"]),
                   float(obj["y_mean"]), float(obj["y_std"]))


# --------------------------------------------------------------------------
# samples

@dataclass
class Samples:
    """Sliding-window supervision arrays (raw milliseconds, unnormalized)."""
    x: np.ndarray         # (n, L, N, d_in)
    c: np.ndarray         # (n, L, d_c)
    y: np.ndarray         # (n, H) future labels
    y_origin: np.ndarray  # (n,) label at the forecast origin window
    origins: np.ndarray   # (n,) origin window indices

    def __len__(self):
        return self.x.shape[0]


def split_windows(windows: list[WindowFeatures], train_frac: float,
                  val_frac: float) -> tuple[list, list, list]:
    """Positional chronological split over t-sorted windows."""
    ws = sorted(windows, key=lambda w: w.t)
    n = len(ws)
    n_train = int(n * train_frac)
    n_val = int(n * val_frac)
    return ws[:n_train], ws[n_train:n_train + n_val], ws[n_train + n_val:]


def make_samples(windows: list[WindowFeatures], l_hist: int, horizon: int) -> Samples:
    """Sliding samples over contiguous window-index runs; none cross a gap."""
    ws = sorted(windows, key=lambda w: w.t)
    xs, cs, ys, y0s, origins = [], [], [], [], []
    run_start = 0
    for i in range(len(ws) + 1):
        contiguous = i < len(ws) and (i == run_start or ws[i].t == ws[i - 1].t + 1)
        if contiguous:
            continue
        run = ws[run_start:i]
        for j in range(l_hist - 1, len(run) - horizon):
            hist = run[j - l_hist + 1:j + 1]
            future = run[j + 1:j + 1 + horizon]
            xs.append(np.stack([w.X for w in hist]))
            cs.append(np.stack([w.c for w in hist]))
            ys.append(np.array([w.y for w in future]))
            y0s.append(run[j].y)
            origins.append(run[j].t)
        run_start = i
    if not xs:
        warnings.warn(
            f"no samples: need at least {l_hist + horizon} contiguous windows")
        d_in = ws[0].X.shape[1] if ws else 0
        n_nodes = ws[0].X.shape[0] if ws else 0
        d_c = ws[0].c.shape[0] if ws else 0
        return Samples(np.zeros((0, l_hist, n_nodes, d_in)),
                       np.zeros((0, l_hist, d_c)), np.zeros((0, horizon)),
                       np.zeros(0), np.zeros(0, dtype=np.int64))
    return Samples(np.stack(xs), np.stack(cs), np.stack(ys),
                   np.array(y0s), np.array(origins, dtype=np.int64))


# --------------------------------------------------------------------------
# model

def init_params(cfg: ModelConfig, seed: int) -> dict[str, Tensor]:
    rng = np.random.default_rng(seed)
    params = init_encoder_params(cfg, rng)
    params.update(init_decoder_params(cfg, rng))
    return params


def forward(params, cfg: ModelConfig, ops: GraphOperators, x, c) -> Tensor:
    """(S, L, N, d_in) + (S, L, d_c), normalized -> (S, H) normalized forecasts."""
    x = nc.as_tensor(x)
    c = nc.as_tensor(c)
    s, l = x.shape[0], x.shape[1]
    scenes_x = nc.reshape(x, (s * l,) + x.shape[2:])
    scenes_c = nc.reshape(c, (s * l, c.shape[-1]))
    g = encode(params, cfg, ops, scenes_x, scenes_c)
    return decode_series(params, cfg, nc.reshape(g, (s, l, g.shape[-1])))


def predict_batches(params, cfg, ops, x_norm, c_norm) -> np.ndarray:
    """Tape-free forward over evaluation-sized chunks; normalized outputs."""
    outs = []
    for lo in range(0, x_norm.shape[0], EVAL_BATCH):
        hi = lo + EVAL_BATCH
        outs.append(forward(params, cfg, ops, x_norm[lo:hi], c_norm[lo:hi]).data)
    return np.concatenate(outs, axis=0) if outs else np.zeros((0, cfg.H))


# --------------------------------------------------------------------------
# optimizer

class AdamW:
    """Adaptive moments with decoupled weight decay.

    The decay term is applied directly to the weights (not scaled by the
    learning rate): theta <- theta - lr * mhat / (sqrt(vhat) + eps) - wd * theta.
    With lr=0 parameters still shrink by exactly (1 - wd) per step.
    """

    def __init__(self, params: dict[str, Tensor], lr: float = 1e-3,
                 weight_decay: float = 1e-4, betas=(0.9, 0.999), eps: float = 1e-8):
        self.params = params
        self.lr = lr
        self.weight_decay = weight_decay
        self.beta1, self.beta2 = betas
        self.eps = eps
        self.t = 0
        self._m = {name: np.zeros_like(p.data) for name, p in params.items()}
        self._v = {name: np.zeros_like(p.data) for name, p in params.items()}

    def zero_grad(self):
        for p in self.params.values():
            p.grad = None

    def step(self):
        self.t += 1
        bc1 = 1.0 - self.beta1 ** self.t
        bc2 = 1.0 - self.beta2 ** self.t
        for name, p in self.params.items():
            g = p.grad
            if g is None:
                continue
            m = self._m[name] = self.beta1 * self._m[name] + (1.0 - self.beta1) * g
            v = self._v[name] = self.beta2 * self._v[name] + (1.0 - self.beta2) * (g * g)
            update = self.lr * (m / bc1) / (np.sqrt(v / bc2) + self.eps)
            p.data = p.data - update - self.weight_decay * p.data


def clip_gradients(params, max_norm: float = GRAD_CLIP_NORM) -> float:
    """Scale all gradients so their global L2 norm is at most max_norm."""
    tensors = list(params.values()) if isinstance(params, dict) else list(params)
    norm = nc.global_grad_norm(tensors)
    if norm > max_norm:
        scale = max_norm / norm
        for p in tensors:
            if p.grad is not None:
                p.grad = p.grad * scale
    return norm


# --------------------------------------------------------------------------
# training

@dataclass
class EpochStats:
    epoch: int
    train_pinball: float
    val_pinball: float
    val_mae_ms: float


@dataclass
class TrainResult:
    params: dict[str, Tensor]
    report: list[EpochStats]
    best_epoch: int
    best_val_mae_ms: float


def train(train_samples: Samples, val_samples: Samples, cfg: ModelConfig,
          tcfg: TrainConfig, ops: GraphOperators,
          normalizer: Normalizer) -> TrainResult:
    """Minimize mean pinball with early stopping on denormalized val MAE."""
    if len(train_samples) == 0:
        raise ValueError("empty train split")
    xn = normalizer.norm_x(train_samples.x)
    cn = normalizer.norm_c(train_samples.c)
    yn = normalizer.norm_y(train_samples.y)
    xv = normalizer.norm_x(val_samples.x)
    cv = normalizer.norm_c(val_samples.c)
    yv_norm = normalizer.norm_y(val_samples.y)

    params = init_params(cfg, tcfg.seed)
    # start the output head at the train-split target quantile, the pinball
    # optimum of a featureless model. Selection is by val MAE; a head that
    # has to climb from the mean to the q-level first would put the MAE
    # minimum mid-climb, where the quantile fit is still poor.
    if cfg.decoder == "linear":
        params["dec.lin.b"].data = np.quantile(yn, tcfg.q, axis=0)
    else:
        params["dec.out.b"].data = np.atleast_1d(np.quantile(yn, tcfg.q))
    opt = AdamW(params, lr=tcfg.lr, weight_decay=tcfg.weight_decay)
    shuffle_rng = np.random.default_rng([tcfg.seed, 1])

    best_state: dict[str, np.ndarray] = {}
    best_mae = np.inf
    best_epoch = 0
    stall = 0
    report: list[EpochStats] = []

    for epoch in range(1, tcfg.max_epochs + 1):
        order = shuffle_rng.permutation(len(train_samples))
        losses = []
        for lo in range(0, len(order), tcfg.batch_size):
            batch = order[lo:lo + tcfg.batch_size]
            try:
                with Tape() as tape:
                    pred = forward(params, cfg, ops, xn[batch], cn[batch])
                    loss = batch_loss(pred, yn[batch], tcfg.q)
                    tape.backward(loss)
            except NumericalFault as err:
                raise NumericalFault(
                    f"training aborted at epoch {epoch}: {err}") from err
            losses.append(loss.item())
            clip_gradients(params)
            opt.step()
            opt.zero_grad()

        if len(val_samples):
            val_pred_norm = predict_batches(params, cfg, ops, xv, cv)
            val_pin = _mean_pinball(yv_norm, val_pred_norm, tcfg.q)
            val_mae = float(np.abs(normalizer.denorm_y(val_pred_norm)
                                   - val_samples.y).mean())
        else:
            val_pin, val_mae = float("nan"), float(np.mean(losses))
        report.append(EpochStats(epoch, float(np.mean(losses)), val_pin, val_mae))

        if val_mae < best_mae:
            best_mae = val_mae
            best_epoch = epoch
            best_state = {name: p.data.copy() for name, p in params.items()}
            stall = 0
        else:
            stall += 1
            if stall >= tcfg.patience:
                break

    for name, p in params.items():
        p.data = best_state[name]
    return TrainResult(params, report, best_epoch, best_mae)


def _mean_pinball(y: np.ndarray, y_hat: np.ndarray, q: float) -> float:
    u = y - y_hat
    return float(np.mean(np.maximum(q * u, (q - 1.0) * u)))


def write_training_report(path, report: list[EpochStats]) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["epoch", "train_pinball", "val_pinball", "val_mae_ms"])
        for row in report:
            w.writerow([row.epoch, repr(row.train_pinball),
                        repr(row.val_pinball), repr(row.val_mae_ms)])


# --------------------------------------------------------------------------
# evaluation

@dataclass
class EvalMetrics:
    pinball_ms: np.ndarray   # (H,) mean pinball per horizon, milliseconds
    mae_ms: np.ndarray       # (H,)

    @property
    def mean_pinball(self) -> float:
        return float(self.pinball_ms.mean())

    @property
    def mean_mae(self) -> float:
        return float(self.mae_ms.mean())


def evaluate(params, cfg: ModelConfig, ops: GraphOperators,
             normalizer: Normalizer, samples: Samples, q: float) -> EvalMetrics:
    pred_norm = predict_batches(params, cfg, ops,
                                normalizer.norm_x(samples.x),
                                normalizer.norm_c(samples.c))
    pred_ms = normalizer.denorm_y(pred_norm)
    return _metrics_from_predictions(samples.y, pred_ms, q)


def persistence_metrics(samples: Samples, q: float) -> EvalMetrics:
    """Naive forecaster: repeat the origin-window label for every horizon."""
    pred = np.repeat(samples.y_origin[:, None], samples.y.shape[1], axis=1)
    return _metrics_from_predictions(samples.y, pred, q)


def _metrics_from_predictions(y: np.ndarray, y_hat: np.ndarray, q: float) -> EvalMetrics:
    u = y - y_hat
    pin = np.maximum(q * u, (q - 1.0) * u)
    return EvalMetrics(pin.mean(axis=0), np.abs(u).mean(axis=0))


# --------------------------------------------------------------------------
# prediction and checkpointing

@dataclass(frozen=True)
class ForecastSeries:
    origin_t: int
    yhat_ms: tuple[float, ...]
    model_version: str = f"checkpoint-v{CHECKPOINT_VERSION}"


def predict(params, cfg: ModelConfig, ops: GraphOperators, normalizer: Normalizer,
            history: list[WindowFeatures]) -> ForecastSeries:
    """Forecast H steps from exactly the last L aggregated windows."""
    if len(history) != cfg.L:
        raise ValueError(f"predict needs exactly L={cfg.L} windows, got {len(history)}")
    if history[0].X.shape[0] != ops.n:
        raise ValueError(
            f"window has {history[0].X.shape[0]} nodes but the graph has {ops.n}")
    if history[0].X.shape[1] != cfg.d_in:
        raise ValueError(
            f"feature width {history[0].X.shape[1]} does not match model ({cfg.d_in})")
    hist = sorted(history, key=lambda w: w.t)
    x = normalizer.norm_x(np.stack([w.X for w in hist]))[None]
    c = normalizer.norm_c(np.stack([w.c for w in hist]))[None]
    pred_norm = forward(params, cfg, ops, x, c).data[0]
    yhat = normalizer.denorm_y(pred_norm)
    return ForecastSeries(hist[-1].t, tuple(float(v) for v in yhat))


def save_checkpoint(path, params: dict[str, Tensor], cfg: ModelConfig,
                    tcfg: TrainConfig, normalizer: Normalizer,
                    graph: SpanGraph) -> None:
    """Magic, u32 manifest length, JSON manifest, little-endian f64 payloads."""
    names = sorted(params)
    entries = []
    offset = 0
    blobs = []
    for name in names:
        data = params[name].data
        blob = data.astype("<f8").tobytes()
        entries.append({"name": name, "shape": list(data.shape), "offset": offset})
        blobs.append(blob)
        offset += len(blob)
    manifest = {
        "format_version": CHECKPOINT_VERSION,
        "model_config": asdict(cfg),
        "train_config": asdict(tcfg),
        "normalizer": normalizer.to_dict(),
        "graph": json.loads(graph_to_json(graph)),
        "params": entries,
    }
    head = json.dumps(manifest, sort_keys=True, separators=(",", ":")).encode("utf-8")
    with open(path, "wb") as fh:
        fh.write(CHECKPOINT_MAGIC)
        fh.write(struct.pack("<I", len(head)))
        fh.write(head)
        for blob in blobs:
            fh.write(blob)


def load_checkpoint(path) -> tuple[dict[str, Tensor], ModelConfig, TrainConfig,
                                   Normalizer, SpanGraph]:
    raw = Path(path).read_bytes()
    if raw[:len(CHECKPOINT_MAGIC)] != CHECKPOINT_MAGIC:
        raise ValueError("not a model checkpoint (bad magic)")
    head_len = struct.unpack_from("<I", raw, len(CHECKPOINT_MAGIC))[0]
    head_start = len(CHECKPOINT_MAGIC) + 4
    manifest = json.loads(raw[head_start:head_start + head_len].decode("utf-8"))
    if manifest["format_version"] != CHECKPOINT_VERSION:
        raise ValueError(f"unsupported checkpoint version {manifest['format_version']}")
    payload = raw[head_start + head_len:]
    params: dict[str, Tensor] = {}
    for entry in manifest["params"]:
        shape = tuple(entry["shape"])
        count = int(np.prod(shape, dtype=np.int64)) if shape else 1
        flat = np.frombuffer(payload, dtype="<f8", count=count,
                             offset=entry["offset"])
        params[entry["name"]] = Tensor(flat.reshape(shape).astype(np.float64),
                                       requires_grad=True)
    cfg = ModelConfig(**manifest["model_config"])
    tcfg = TrainConfig(**manifest["train_config"])
    normalizer = Normalizer.from_dict(manifest["normalizer"])
    graph = graph_from_json(json.dumps(manifest["graph"]))
    return params, cfg, tcfg, normalizer, graph
