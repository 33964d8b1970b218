"""Multitask training: MAE losses, plain SGD, plateau scheduling,
early stopping, denormalized metrics, and checkpoint round-trips.

Targets are normalized to [0, 1]; reported errors are denormalized to
knots (peak wind, range [19, 170]) and nautical miles (radius of peak
wind, range [5, 200]).
"""

from __future__ import annotations

import io
import json
import struct
from dataclasses import asdict, dataclass, field

import numpy as np

from . import ops
from .errors import CheckpointError, ConfigError, ShapeError, TrainingError
from .model import CycloneNet, ModelConfig, build_model
from .tape import Tape, Var
from .tensor import Parameter, Tensor

CKPT_MAGIC = b"KFC1"
CKPT_VERSION = 1

MSW_RANGE = (19.0, 170.0)   # knots
RMW_RANGE = (5.0, 200.0)    # nautical miles
_RANGES = {"msw": MSW_RANGE, "rmw": RMW_RANGE}


@dataclass(frozen=True)
class TrainConfig:
    lr: float = 0.001
    batch: int = 128
    max_epochs: int = 200
    plateau_patience: int = 5
    plateau_factor: float = 0.5
    early_stop_patience: int = 10
    alpha: float = 1.0
    beta: float = 1.0
    seed: int = 0
    improvement_threshold: float = 1e-6

    def __post_init__(self):
        if self.lr <= 0:
            raise ConfigError("lr must be positive")
        if not 0 < self.plateau_factor < 1:
            raise ConfigError("plateau_factor must lie in (0, 1)")
        if self.alpha < 0 or self.beta < 0 or (self.alpha == 0 and self.beta == 0):
            raise ConfigError("task weights must be >= 0 and not both zero")
        if self.batch < 1 or self.max_epochs < 1:
            raise ConfigError("batch and max_epochs must be >= 1")


@dataclass
class Metrics:
    mae_msw_kt: float
    rmse_msw_kt: float
    mae_rmw_nmi: float
    rmse_rmw_nmi: float


# ---------------------------------------------------------------------------
# losses and metrics


def mae(pred, target) -> float:
    pred = np.asarray(pred, dtype=np.float64).ravel()
    target = np.asarray(target, dtype=np.float64).ravel()
    if pred.size == 0:
        raise ShapeError("mae on empty input")
    if pred.shape != target.shape:
        raise ShapeError(f"mae length mismatch: {pred.shape} vs {target.shape}")
    return float(np.abs(pred - target).mean())


def rmse(pred, target) -> float:
    pred = np.asarray(pred, dtype=np.float64).ravel()
    target = np.asarray(target, dtype=np.float64).ravel()
    if pred.size == 0:
        raise ShapeError("rmse on empty input")
    if pred.shape != target.shape:
        raise ShapeError(f"rmse length mismatch: {pred.shape} vs {target.shape}")
    return float(np.sqrt(((pred - target) ** 2).mean()))


def mae_loss(pred: Var, target: Var) -> Var:
    """Mean absolute error as a tape op (subgradient 0 at zero error)."""
    return ops.mean(ops.abs_(ops.sub(pred, target)))


def multitask_loss(y_msw: Var, y_rmw: Var, t_msw: Var, t_rmw: Var,
                   alpha: float = 1.0, beta: float = 1.0) -> Var:
    if alpha < 0 or beta < 0:
        raise ConfigError("task weights must be non-negative")
    return ops.add(ops.scale(mae_loss(y_msw, t_msw), alpha),
                   ops.scale(mae_loss(y_rmw, t_rmw), beta))


def denormalize(y_norm, task: str):
    """Min-max inverse to physical units; extrapolates linearly outside [0,1]."""
    lo, hi = _RANGES[task]
    return lo + np.asarray(y_norm) * (hi - lo)


def normalize(value, task: str):
    lo, hi = _RANGES[task]
    return (np.asarray(value) - lo) / (hi - lo)


def compute_metrics(pred_msw_norm, pred_rmw_norm,
                    t_msw_norm, t_rmw_norm) -> Metrics:
    pm, tm = denormalize(pred_msw_norm, "msw"), denormalize(t_msw_norm, "msw")
    pr, tr = denormalize(pred_rmw_norm, "rmw"), denormalize(t_rmw_norm, "rmw")
    return Metrics(mae(pm, tm), rmse(pm, tm), mae(pr, tr), rmse(pr, tr))


# ---------------------------------------------------------------------------
# optimization


def sgd_step(params: list[Parameter], grads, lr: float) -> list[Parameter]:
    """Plain SGD: p <- p - lr * g (no momentum, no weight decay)."""
    for p in params:
        g = grads.wrt_param(p)
        if g.shape != p.data.shape:
            raise ShapeError(
                f"gradient shape {g.shape} != parameter {p.name} "
                f"shape {p.data.shape}")
        p.data -= lr * g
    return params


class PlateauScheduler:
    """Halve (by `factor`) after `patience` epochs without improvement."""

    def __init__(self, lr: float, patience: int = 5, factor: float = 0.5,
                 threshold: float = 1e-6):
        self.lr = lr
        self.patience = patience
        self.factor = factor
        self.threshold = threshold
        self.best = np.inf
        self.counter = 0

    def update(self, loss: float) -> float:
        if loss < self.best - self.threshold:
            self.best = loss
            self.counter = 0
        else:
            self.counter += 1
            if self.counter >= self.patience:
                self.lr *= self.factor
                self.counter = 0
        return self.lr


class EarlyStopper:
    """Stop after `patience` consecutive epochs without improvement."""

    def __init__(self, patience: int = 10, threshold: float = 1e-6):
        self.patience = patience
        self.threshold = threshold
        self.best = np.inf
        self.counter = 0

    def update(self, loss: float) -> bool:
        if loss < self.best - self.threshold:
            self.best = loss
            self.counter = 0
            return False
        self.counter += 1
        return self.counter >= self.patience


def lr_on_plateau(history, patience: int = 5, factor: float = 0.5,
                  threshold: float = 1e-6) -> tuple[float, list[int]]:
    """Replay a validation history; returns (lr multiplier, reduction epochs).

    Epoch numbers are 1-based positions in the history.
    """
    if len(history) == 0:
        raise ShapeError("lr_on_plateau needs a non-empty history")
    sched = PlateauScheduler(1.0, patience, factor, threshold)
    reductions = []
    for epoch, loss in enumerate(history, start=1):
        before = sched.lr
        sched.update(loss)
        if sched.lr != before:
            reductions.append(epoch)
    return sched.lr, reductions


def early_stop(history, patience: int = 10,
               threshold: float = 1e-6) -> int | None:
    """1-based epoch at which training would stop, or None."""
    stopper = EarlyStopper(patience, threshold)
    for epoch, loss in enumerate(history, start=1):
        if stopper.update(loss):
            return epoch
    return None


# ---------------------------------------------------------------------------
# checkpoints


def save_checkpoint(model: CycloneNet, extra: dict | None = None) -> bytes:
    config = {
        "model": asdict(model.cfg),
        "dtype": model.dtype.name,
    }
    if extra:
        config["run"] = extra
    blob = json.dumps(config, sort_keys=True).encode("utf-8")
    out = io.BytesIO()
    out.write(CKPT_MAGIC)
    out.write(struct.pack("<I", CKPT_VERSION))
    out.write(struct.pack("<I", len(blob)))
    out.write(blob)
    state = model.state()
    out.write(struct.pack("<I", len(state)))
    for name in sorted(state):
        raw = name.encode("utf-8")
        out.write(struct.pack("<H", len(raw)))
        out.write(raw)
        Tensor(state[name]).write(out)
    return out.getvalue()


def write_checkpoint(path, model: CycloneNet, extra: dict | None = None):
    with open(path, "wb") as fp:
        fp.write(save_checkpoint(model, extra))


def load_checkpoint(data: bytes) -> tuple[dict, dict[str, np.ndarray]]:
    fp = io.BytesIO(data)
    magic = fp.read(4)
    if magic != CKPT_MAGIC:
        raise CheckpointError("bad checkpoint magic")
    try:
        (version,) = struct.unpack("<I", fp.read(4))
        if version != CKPT_VERSION:
            raise CheckpointError(f"unsupported checkpoint version {version}")
        (blob_len,) = struct.unpack("<I", fp.read(4))
        config = json.loads(fp.read(blob_len).decode("utf-8"))
        (n_params,) = struct.unpack("<I", fp.read(4))
        state = {}
        for _ in range(n_params):
            (name_len,) = struct.unpack("<H", fp.read(2))
            name = fp.read(name_len).decode("utf-8")
            state[name] = Tensor.read(fp).data
    except (struct.error, json.JSONDecodeError) as exc:
        raise CheckpointError(f"truncated or corrupt checkpoint: {exc}") from exc
    return config, state


def read_checkpoint(path) -> tuple[dict, dict[str, np.ndarray]]:
    with open(path, "rb") as fp:
        return load_checkpoint(fp.read())


def model_from_checkpoint(data_or_path) -> tuple[CycloneNet, dict]:
    if isinstance(data_or_path, (bytes, bytearray)):
        config, state = load_checkpoint(bytes(data_or_path))
    else:
        config, state = read_checkpoint(data_or_path)
    try:
        cfg = ModelConfig(**config["model"])
    except TypeError as exc:
        raise CheckpointError(f"checkpoint/config mismatch: {exc}") from exc
    model = build_model(cfg, seed=0, dtype=np.dtype(config.get("dtype", "float32")))
    try:
        model.load_state(state)
    except ConfigError as exc:
        raise CheckpointError(f"checkpoint/config mismatch: {exc}") from exc
    return model, config


# ---------------------------------------------------------------------------
# training loop


@dataclass
class TrainResult:
    epochs_run: int
    best_epoch: int
    best_val_loss: float
    log_lines: list[str] = field(default_factory=list)
    val_history: list[float] = field(default_factory=list)
    stopped_early: bool = False
    final_metrics: Metrics | None = None

    @property
    def log_text(self) -> str:
        return "\n".join(self.log_lines) + "\n"


def collate(dataset, indices, dtype=np.float32):
    xs = np.stack([dataset[i].x_seq for i in indices]).astype(dtype)
    xi = np.stack([dataset[i].x_img for i in indices]).astype(dtype)
    tm = np.array([[dataset[i].y_msw_norm] for i in indices], dtype=dtype)
    tr = np.array([[dataset[i].y_rmw_norm] for i in indices], dtype=dtype)
    return xs, xi, tm, tr


def predict(model: CycloneNet, dataset, batch: int = 64):
    """Normalized predictions over a dataset, [N] per task."""
    preds_m, preds_r = [], []
    for start in range(0, len(dataset), batch):
        idxs = range(start, min(start + batch, len(dataset)))
        xs, xi, _, _ = collate(dataset, idxs, dtype=model.dtype)
        tape = Tape()
        ym, yr = model.forward(tape, xs, xi)
        preds_m.append(ym.data[:, 0].copy())
        preds_r.append(yr.data[:, 0].copy())
    return np.concatenate(preds_m), np.concatenate(preds_r)


def evaluate(model: CycloneNet, dataset, alpha: float = 1.0,
             beta: float = 1.0, batch: int = 64):
    """(multitask normalized MAE, denormalized Metrics) over a dataset."""
    preds_m, preds_r, tgt_m, tgt_r = [], [], [], []
    for start in range(0, len(dataset), batch):
        idxs = range(start, min(start + batch, len(dataset)))
        xs, xi, tm, tr = collate(dataset, idxs, dtype=model.dtype)
        tape = Tape()
        ym, yr = model.forward(tape, xs, xi)
        preds_m.append(ym.data[:, 0].copy())
        preds_r.append(yr.data[:, 0].copy())
        tgt_m.append(tm[:, 0])
        tgt_r.append(tr[:, 0])
    pm, pr = np.concatenate(preds_m), np.concatenate(preds_r)
    tm, tr = np.concatenate(tgt_m), np.concatenate(tgt_r)
    loss = alpha * mae(pm, tm) + beta * mae(pr, tr)
    return loss, compute_metrics(pm, pr, tm, tr)


def train(model: CycloneNet, train_set, val_set, cfg: TrainConfig,
          log_path=None, checkpoint_path=None, quiet: bool = True,
          checked: bool = False) -> TrainResult:
    """SGD epochs with shuffled batches, plateau scheduling + early stop.

    The best-validation parameter state is restored into the model at
    the end (and written to checkpoint_path when given).  One log line
    per epoch: epoch, train_loss, val_loss, lr, then the four
    denormalized validation metrics.
    """
    if len(train_set) == 0 or len(val_set) == 0:
        raise TrainingError("empty train or validation set")
    rng = np.random.default_rng(cfg.seed)
    params = model.parameters()
    sched = PlateauScheduler(cfg.lr, cfg.plateau_patience, cfg.plateau_factor,
                             cfg.improvement_threshold)
    stopper = EarlyStopper(cfg.early_stop_patience, cfg.improvement_threshold)
    best_val = np.inf
    best_epoch = 0
    best_state = {k: v.copy() for k, v in model.state().items()}
    result = TrainResult(0, 0, np.inf)

    for epoch in range(1, cfg.max_epochs + 1):
        lr = sched.lr
        order = rng.permutation(len(train_set))
        total = 0.0
        for bstart in range(0, len(order), cfg.batch):
            idxs = order[bstart:bstart + cfg.batch]
            xs, xi, tm, tr = collate(train_set, idxs, dtype=model.dtype)
            tape = Tape(checked=checked)
            ym, yr = model.forward(tape, xs, xi)
            loss = multitask_loss(ym, yr, tape.constant(tm),
                                  tape.constant(tr), cfg.alpha, cfg.beta)
            lval = float(loss.data)
            if not np.isfinite(lval):
                raise TrainingError(
                    f"non-finite loss at epoch {epoch}, batch "
                    f"{bstart // cfg.batch} (lr={lr})")
            grads = tape.backprop(loss)
            sgd_step(params, grads, lr)
            tape.release()
            total += lval * len(idxs)
        train_loss = total / len(order)

        val_loss, metrics = evaluate(model, val_set, cfg.alpha, cfg.beta,
                                     batch=cfg.batch)
        line = ",".join(repr(float(v)) for v in (
            train_loss, val_loss, lr, metrics.mae_msw_kt,
            metrics.rmse_msw_kt, metrics.mae_rmw_nmi, metrics.rmse_rmw_nmi))
        result.log_lines.append(f"{epoch},{line}")
        result.val_history.append(val_loss)
        result.final_metrics = metrics
        if not quiet:
            print(result.log_lines[-1], flush=True)

        if val_loss < best_val - cfg.improvement_threshold:
            best_val = val_loss
            best_epoch = epoch
            best_state = {k: v.copy() for k, v in model.state().items()}
        result.epochs_run = epoch
        sched.update(val_loss)
        if stopper.update(val_loss):
            result.stopped_early = True
            break

    result.best_epoch = best_epoch
    result.best_val_loss = float(best_val)
    model.load_state(best_state)
    if log_path is not None:
        with open(log_path, "w") as fp:
            fp.write(result.log_text)
    if checkpoint_path is not None:
        write_checkpoint(checkpoint_path, model)
    return result
