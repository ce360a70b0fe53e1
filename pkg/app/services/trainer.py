import logging
import time
from dataclasses import dataclass, field
from typing import Dict, Iterable, List, Optional, Sequence, Tuple

import numpy as np

from app.engine.rng import Rng
from app.engine.tensor import Tape, Tensor, as_tensor, backward, no_grad
from app.errors import DataError, NumericalError, ShapeError
from app.models.schemas import EpochRecord, LossKind, LrSchedule, MixupConfig, OptimizerConfig, TrainReport
from app.services.augment import MixupAugmenter
from app.services.data_pipeline import BatchLoader, WindowSample, batches
from app.services.forecaster import CMambaModel

logger = logging.getLogger(__name__)

# child stream keys of the run seed
_LOADER_KEY = 2
_DROPOUT_KEY = 3


def loss(kind: LossKind, y_hat: Tensor, y) -> Tensor:
    """Mean absolute (L1) or mean squared (L2) error over every element"""
    y = as_tensor(y)
    if y_hat.shape != y.shape:
        raise ShapeError(f"loss needs equal shapes, got {y_hat.shape} and {y.shape}")
    diff = y_hat - y
    if LossKind(kind) == LossKind.L1:
        return diff.abs().mean()
    return diff.square().mean()


def metrics(y_hat: np.ndarray, y: np.ndarray) -> Tuple[float, float]:
    """(MSE, MAE) averaged over samples, steps and channels"""
    y_hat = np.asarray(y_hat, dtype=np.float64)
    y = np.asarray(y, dtype=np.float64)
    if y.size == 0:
        raise DataError("cannot compute metrics on an empty set")
    if y_hat.shape != y.shape:
        raise ShapeError(f"metrics need equal shapes, got {y_hat.shape} and {y.shape}")
    err = y_hat - y
    return float(np.mean(err * err)), float(np.mean(np.abs(err)))


@dataclass
class AdamState:
    lr: float
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    step: int = 0
    m: Dict[str, np.ndarray] = field(default_factory=dict)
    v: Dict[str, np.ndarray] = field(default_factory=dict)


def adam_step(params: Iterable[Tuple[str, Tensor]], state: AdamState) -> None:
    """Bias-corrected Adam update in place, then zero the gradients"""
    params = list(params)
    for name, p in params:
        if p.grad is not None and not np.isfinite(p.grad).all():
            raise NumericalError(f"non-finite gradient in parameter '{name}'")
    state.step += 1
    c1 = 1.0 - state.beta1 ** state.step
    c2 = 1.0 - state.beta2 ** state.step
    for name, p in params:
        g = p.grad if p.grad is not None else np.zeros_like(p.data)
        m = state.m.get(name)
        v = state.v.get(name)
        if m is None:
            m = np.zeros_like(p.data)
            v = np.zeros_like(p.data)
        m = state.beta1 * m + (1.0 - state.beta1) * g
        v = state.beta2 * v + (1.0 - state.beta2) * g * g
        state.m[name], state.v[name] = m, v
        p.data = p.data - state.lr * (m / c1) / (np.sqrt(v / c2) + state.eps)
        p.zero_grad()


class Adam:
    def __init__(self, named_params: Iterable[Tuple[str, Tensor]], lr: float = 1e-3, betas=(0.9, 0.999), eps: float = 1e-8):
        self.params = list(named_params)
        self.state = AdamState(lr=lr, beta1=betas[0], beta2=betas[1], eps=eps)

    @property
    def lr(self) -> float:
        return self.state.lr

    @lr.setter
    def lr(self, value: float) -> None:
        self.state.lr = value

    def step(self) -> None:
        adam_step(self.params, self.state)

    def zero_grad(self) -> None:
        for _, p in self.params:
            p.zero_grad()


def clip_grad_norm(params: Sequence[Tensor], max_norm: float) -> float:
    """Scale all gradients so their global L2 norm is at most `max_norm`; returns the norm before clipping"""
    grads = [p.grad for p in params if p.grad is not None]
    total = float(np.sqrt(sum(float(np.sum(g * g)) for g in grads)))
    if total > max_norm:
        scale = max_norm / (total + 1e-12)
        for p in params:
            if p.grad is not None:
                p.grad = p.grad * scale
    return total


def evaluate(
    model: CMambaModel,
    samples: Sequence[WindowSample],
    kind: LossKind,
    batch_size: int = 256,
) -> Tuple[float, np.ndarray, np.ndarray]:
    """Loss over `samples` in evaluation mode plus the stacked (y_pred, y_true)"""
    if not samples:
        raise DataError("cannot evaluate on an empty set")
    preds, truths = [], []
    with no_grad():
        for x, y in batches(samples, batch_size, shuffle=False):
            preds.append(model(x, training=False).numpy())
            truths.append(y)
    y_pred = np.concatenate(preds)
    y_true = np.concatenate(truths)
    mse, mae = metrics(y_pred, y_true)
    return (mae if LossKind(kind) == LossKind.L1 else mse), y_pred, y_true


@dataclass
class TrainResult:
    report: TrainReport
    best_state: Dict[str, np.ndarray]
    test_predictions: Optional[Tuple[np.ndarray, np.ndarray]] = None


def _epoch_lr(base: float, schedule: LrSchedule, epoch: int) -> float:
    return base * (0.5 ** epoch) if LrSchedule(schedule) == LrSchedule.HALVING else base


def train(
    model: CMambaModel,
    train_samples: Sequence[WindowSample],
    val_samples: Sequence[WindowSample],
    test_samples: Sequence[WindowSample],
    optim: OptimizerConfig,
    mixup: MixupConfig,
    seed: int,
) -> TrainResult:
    """Adam training with validation-based model selection and early stopping.

    Without validation samples the parameters of the last epoch are kept.
    Test metrics always come from the selected parameters.
    """
    if not train_samples:
        raise DataError("training split has no windows")
    started = time.perf_counter()
    run_rng = Rng(seed)
    augmenter = MixupAugmenter(mixup)
    loader = BatchLoader(
        train_samples,
        optim.batch_size,
        shuffle=True,
        rng=run_rng.child(_LOADER_KEY),
        augmenter=augmenter,
        training=True,
        num_workers=optim.num_workers,
    )
    dropout_rng = run_rng.child(_DROPOUT_KEY)
    optimizer = Adam(model.named_parameters(), lr=optim.lr)
    params = [p for _, p in optimizer.params]

    records: List[EpochRecord] = []
    best_val: Optional[float] = None
    best_epoch = 0
    best_state = model.state_dict()
    bad_epochs = 0
    stopped_early = False

    for epoch in range(optim.epochs):
        optimizer.lr = _epoch_lr(optim.lr, optim.lr_schedule, epoch)
        model.train()
        total, count = 0.0, 0
        for step, (x, y) in enumerate(loader):
            with Tape():
                pred = model(x, training=True, rng=dropout_rng)
                batch_loss = loss(optim.loss, pred, y)
                value = batch_loss.item()
                if not np.isfinite(value):
                    raise NumericalError(f"non-finite training loss at epoch {epoch}, step {step}")
                backward(batch_loss)
            if optim.clip_norm is not None:
                clip_grad_norm(params, optim.clip_norm)
            optimizer.step()
            total += value * x.shape[0]
            count += x.shape[0]
        train_loss = total / count

        model.eval()
        val_loss = evaluate(model, val_samples, optim.loss)[0] if val_samples else None
        records.append(EpochRecord(epoch=epoch, train_loss=train_loss, val_loss=val_loss, lr=optimizer.lr))
        val_text = "n/a" if val_loss is None else f"{val_loss:.6f}"
        logger.info(f"Epoch {epoch}: train {train_loss:.6f}, val {val_text}, lr {optimizer.lr:g}")

        if val_loss is None:
            best_epoch, best_state = epoch, model.state_dict()
            continue
        if best_val is None or val_loss < best_val:
            best_val, best_epoch, best_state = val_loss, epoch, model.state_dict()
            bad_epochs = 0
        else:
            bad_epochs += 1
            if bad_epochs >= optim.patience:
                stopped_early = True
                logger.info(f"Early stop after epoch {epoch}; best epoch {best_epoch} with val {best_val:.6f}")
                break

    model.load_state_dict(best_state)
    model.eval()
    test_mse = test_mae = None
    test_predictions = None
    if test_samples:
        _, y_pred, y_true = evaluate(model, test_samples, optim.loss)
        test_mse, test_mae = metrics(y_pred, y_true)
        test_predictions = (y_pred, y_true)
        logger.info(f"Test at best epoch {best_epoch}: MSE {test_mse:.6f}, MAE {test_mae:.6f}")

    report = TrainReport(
        seed=seed,
        epochs=records,
        best_epoch=best_epoch,
        best_val_loss=best_val,
        stopped_early=stopped_early,
        test_mse=test_mse,
        test_mae=test_mae,
        wall_time=time.perf_counter() - started,
    )
    logger.info(f"Training finished in {report.wall_time:.1f}s")
    return TrainResult(report=report, best_state=best_state, test_predictions=test_predictions)
