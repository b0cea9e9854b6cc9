"""Adam/MSE training, MAE evaluation and three-fold cross-validation."""

from __future__ import annotations

import copy
import csv
import io
import json
import logging
import math
from concurrent.futures import ThreadPoolExecutor
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np

from .nn import ModelConfig, ResNet, build_model, mse_loss, predict
from .nn.functional import ShapeError

log = logging.getLogger(__name__)

N_FOLDS = 3


class NumericalError(FloatingPointError):
    """Non-finite loss or gradient; carries diagnostics for the offending batch."""

    def __init__(self, message: str, diagnostics: dict | None = None):
        super().__init__(message)
        self.diagnostics = diagnostics or {}


class TrainingError(ValueError):
    pass


def mae(pred, target) -> float:
    pred = np.asarray(pred, dtype=np.float64)
    target = np.asarray(target, dtype=np.float64)
    if pred.shape != target.shape:
        raise ShapeError(f"mae: prediction {pred.shape} vs target {target.shape}")
    return float(np.abs(pred - target).mean())


@dataclass
class AdamState:
    lr: float = 0.001
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    t: int = 0
    m: dict[str, np.ndarray] = field(default_factory=dict)
    v: dict[str, np.ndarray] = field(default_factory=dict)


def adam_step(params: dict[str, np.ndarray], grads: dict[str, np.ndarray], state: AdamState) -> AdamState:
    """One Adam update, applied to ``params`` in place."""
    for name, g in grads.items():
        if name not in params:
            raise TrainingError(f"gradient for unknown parameter {name!r}")
        if g.shape != params[name].shape:
            raise ShapeError(f"gradient for {name!r} has shape {g.shape}, parameter {params[name].shape}")
        if not np.isfinite(g).all():
            raise NumericalError(f"non-finite gradient for parameter {name!r}", {"parameter": name})
    state.t += 1
    bc1 = 1.0 - state.beta1**state.t
    bc2 = 1.0 - state.beta2**state.t
    for name, g in grads.items():
        p = params[name]
        if name not in state.m:
            state.m[name] = np.zeros_like(p)
            state.v[name] = np.zeros_like(p)
        m, v = state.m[name], state.v[name]
        m *= state.beta1
        m += (1.0 - state.beta1) * g
        v *= state.beta2
        v += (1.0 - state.beta2) * (g * g)
        p -= (state.lr * (m / bc1) / (np.sqrt(v / bc2) + state.eps)).astype(p.dtype)
    return state


@dataclass
class TrainConfig:
    task: str = "motility"
    epochs: int = 30
    batch_size: int = 16
    seed: int = 0
    dataset_kind: str = "D2"
    lr: float = 0.001
    # regress standardized targets; the model maps its outputs back to the label scale
    target_norm: bool = True
    model: ModelConfig = field(default_factory=ModelConfig)

    def __post_init__(self):
        if isinstance(self.model, dict):
            self.model = ModelConfig(**self.model)
        if self.epochs < 1:
            raise TrainingError(f"epochs must be >= 1, got {self.epochs}")
        if self.batch_size < 1:
            raise TrainingError(f"batch_size must be >= 1, got {self.batch_size}")
        if self.task not in ("motility", "morphology"):
            raise TrainingError(f"unknown task {self.task!r}")
        if self.dataset_kind not in ("D1", "D2"):
            raise TrainingError(f"unknown dataset kind {self.dataset_kind!r}")
        if self.lr < 0:
            raise TrainingError("lr must be non-negative")

    @property
    def method(self) -> str:
        return self.model.head

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, data: dict) -> "TrainConfig":
        data = dict(data)
        unknown = set(data) - {f for f in cls.__dataclass_fields__}
        if unknown:
            raise TrainingError(f"unknown config keys: {', '.join(sorted(unknown))}")
        model = data.pop("model", {}) or {}
        unknown = set(model) - set(ModelConfig.__dataclass_fields__)
        if unknown:
            raise TrainingError(f"unknown model config keys: {', '.join(sorted(unknown))}")
        return cls(model=ModelConfig(**model), **data)


@dataclass
class EpochLog:
    epoch: int
    train_mse: float
    val_mae: float


@dataclass
class TrainResult:
    model: ResNet
    logs: list[EpochLog]
    best_epoch: int
    best_val_mae: float


def _check_kind(dataset, config: TrainConfig):
    if dataset.dataset_kind != config.dataset_kind:
        raise TrainingError(f"dataset kind {dataset.dataset_kind} does not match config {config.dataset_kind}")


def evaluate(model: ResNet, dataset, indices, batch_size: int = 16) -> np.ndarray:
    indices = np.asarray(indices, dtype=np.intp)
    preds = [predict(model, dataset.batch(indices[lo : lo + batch_size]), batch_size)
             for lo in range(0, len(indices), batch_size)]
    return np.concatenate(preds) if preds else np.zeros((0, 3), np.float32)


def _finite_range(a) -> list[float] | None:
    a = np.asarray(a)[np.isfinite(a)]
    return [float(a.min()), float(a.max())] if a.size else None


def train(config: TrainConfig, dataset, train_idx=None, val_idx=None) -> TrainResult:
    """Fit a fresh model on ``train_idx`` samples; validate per epoch on ``val_idx``.

    The parameters of the epoch with the lowest validation MAE are restored at
    the end.  Without a validation set the eval-mode MAE on the training samples
    decides instead, so the retained checkpoint is the one that fits best as used.
    """
    _check_kind(dataset, config)
    train_idx = np.arange(len(dataset)) if train_idx is None else np.asarray(train_idx, dtype=np.intp)
    if len(train_idx) == 0:
        raise TrainingError("empty training fold")
    val_idx = None if val_idx is None or len(val_idx) == 0 else np.asarray(val_idx, dtype=np.intp)

    model_seed, shuffle_seed = np.random.SeedSequence(config.seed).spawn(2)
    model = build_model(config.model, seed=model_seed)
    if config.target_norm:
        y = np.asarray(dataset.targets[train_idx], dtype=np.float64)
        model.set_output_affine(y.mean(axis=0), np.maximum(y.std(axis=0), 1.0))
    model.train()
    shuffle_rng = np.random.default_rng(shuffle_seed)
    state = AdamState(lr=config.lr)
    params = {name: p.data for name, p in model.named_parameters()}

    logs: list[EpochLog] = []
    best = (math.inf, -1, None)
    for epoch in range(1, config.epochs + 1):
        order = train_idx[shuffle_rng.permutation(len(train_idx))]
        total, count = 0.0, 0
        for lo in range(0, len(order), config.batch_size):
            idx = order[lo : lo + config.batch_size]
            x = dataset.batch(idx)
            y = dataset.targets[idx]
            model.zero_grad()
            out = model(x)
            loss = mse_loss(out, y)
            value = float(loss.data)
            if not math.isfinite(value):
                raise NumericalError(
                    f"non-finite loss at epoch {epoch}",
                    {"epoch": epoch, "batch_indices": idx.tolist(),
                     "input_mean": float(np.mean(x)), "input_std": float(np.std(x)),
                     "pred_finite": int(np.isfinite(out.data).sum()),
                     "pred_range": _finite_range(out.data)},
                )
            loss.backward()
            grads = {name: p.grad for name, p in model.named_parameters() if p.grad is not None}
            adam_step(params, grads, state)
            total += value * len(idx)
            count += len(idx)
        train_mse = total / count
        val_mae = mae(evaluate(model, dataset, val_idx), dataset.targets[val_idx]) if val_idx is not None else math.nan
        logs.append(EpochLog(epoch, train_mse, val_mae))
        log.info("epoch %d train_mse %.4f val_mae %.4f", epoch, train_mse, val_mae)
        if val_idx is not None:
            score = val_mae
        else:
            score = mae(evaluate(model, dataset, train_idx), dataset.targets[train_idx])
        if score < best[0]:
            best = (score, epoch, copy.deepcopy(model.state_dict()))

    if best[2] is not None:
        for name, arr in model.state_dict().items():
            arr[...] = best[2][name]
    model.eval()
    return TrainResult(model, logs, best[1], best[0] if val_idx is not None else math.nan)


def aggregate_video_prediction(chunk_preds) -> np.ndarray:
    chunk_preds = np.asarray(chunk_preds, dtype=np.float64)
    if chunk_preds.size == 0:
        raise TrainingError("cannot aggregate an empty list of chunk predictions")
    return chunk_preds.reshape(-1, 3).mean(axis=0)


def per_video(video_ids, preds, targets):
    """Mean chunk prediction and the (shared) target per video, sorted by id."""
    ids = sorted(set(video_ids))
    video_ids = np.asarray(video_ids)
    out_p, out_t = [], []
    for vid in ids:
        mask = video_ids == vid
        out_p.append(aggregate_video_prediction(preds[mask]))
        out_t.append(np.asarray(targets[mask][0], dtype=np.float64))
    return ids, np.array(out_p).reshape(-1, 3), np.array(out_t).reshape(-1, 3)


# -- metrics report --------------------------------------------------------

METRIC_HEADER = ("input", "method", "task", "fold", "mae")


@dataclass
class MetricsReport:
    """Fold MAEs keyed by (input, method, task, fold) with fold in 1..3."""

    entries: dict[tuple[str, str, str, int], float] = field(default_factory=dict)
    chunk_entries: dict[tuple[str, str, str, int], float] = field(default_factory=dict)

    def add(self, input_kind: str, method: str, task: str, fold: int, value: float, chunk_value=None):
        if value < 0:
            raise TrainingError("MAE cannot be negative")
        self.entries[(input_kind, method, task, fold)] = float(value)
        if chunk_value is not None:
            self.chunk_entries[(input_kind, method, task, fold)] = float(chunk_value)

    def cells(self) -> list[tuple[str, str, str]]:
        return sorted({k[:3] for k in self.entries})

    def folds(self, input_kind, method, task, chunk: bool = False) -> list[float]:
        src = self.chunk_entries if chunk else self.entries
        return [src[(input_kind, method, task, f)] for f in range(1, N_FOLDS + 1)]

    def average(self, input_kind, method, task, chunk: bool = False) -> float:
        vals = self.folds(input_kind, method, task, chunk)
        return sum(vals) / len(vals)

    def merge(self, other: "MetricsReport") -> "MetricsReport":
        out = MetricsReport(dict(self.entries), dict(self.chunk_entries))
        out.entries.update(other.entries)
        out.chunk_entries.update(other.chunk_entries)
        return out

    def rows(self, chunk: bool = False):
        for cell in self.cells():
            if chunk and (cell + (1,)) not in self.chunk_entries:
                continue
            vals = self.folds(*cell, chunk=chunk)
            for f, v in enumerate(vals, start=1):
                yield cell + (str(f), v)
            yield cell + ("average", sum(vals) / len(vals))

    def to_csv(self, chunk: bool = False) -> str:
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(METRIC_HEADER)
        for inp, method, task, fold, value in self.rows(chunk):
            w.writerow([inp, method, task, fold, repr(float(value))])
        return buf.getvalue()

    @classmethod
    def from_csv(cls, text: str) -> "MetricsReport":
        reader = csv.reader(io.StringIO(text))
        header = next(reader, None)
        if header is None or tuple(header) != METRIC_HEADER:
            raise TrainingError(f"metrics CSV must start with {','.join(METRIC_HEADER)}")
        report = cls()
        for row in reader:
            if not row:
                continue
            inp, method, task, fold, value = row
            if fold == "average":
                continue
            report.add(inp, method, task, int(fold), float(value))
        return report

    def render(self) -> str:
        """Plain-text tables, one per task, laid out as Fold 1-3 plus Average per input/method."""
        out = []
        for task in sorted({c[2] for c in self.cells()}):
            out.append(f"{task.capitalize()} MAE")
            out.append(f"{'Input':<6} {'Method':<7} {'Fold':<8} {'MAE':>8} {'Average':>8}")
            out.append("-" * 41)
            for inp, method, t in self.cells():
                if t != task:
                    continue
                vals = self.folds(inp, method, task)
                for f, v in enumerate(vals, start=1):
                    out.append(f"{inp:<6} {method:<7} {'Fold ' + str(f):<8} {v:>8.3f} {'':>8}")
                out.append(f"{inp:<6} {method:<7} {'Average':<8} {'':>8} {sum(vals) / len(vals):>8.3f}")
            out.append("")
        return "\n".join(out)


@dataclass
class CrossValidationResult:
    report: MetricsReport
    fold_logs: dict[int, list[EpochLog]]
    fold_videos: dict[int, list[str]]
    train_videos: dict[int, list[str]]
    predictions: dict[str, np.ndarray]
    models: dict[int, ResNet] = field(default_factory=dict, repr=False)


def run_cross_validation(config: TrainConfig, dataset, folds: dict[str, int], threads: int = 1) -> CrossValidationResult:
    """Train on two folds, score the third, for each of the three folds in turn.

    With ``threads > 1`` the folds train concurrently; they share no state and
    the report is assembled in fold order, so results do not depend on it.
    """
    _check_kind(dataset, config)
    video_ids = np.asarray(dataset.video_ids)
    missing = sorted(set(dataset.video_ids) - set(folds))
    if missing:
        raise TrainingError(f"videos without a fold: {', '.join(missing)}")
    sample_fold = np.array([folds[v] for v in dataset.video_ids])
    for f in range(N_FOLDS):
        if not (sample_fold == f).any():
            raise TrainingError(f"fold {f + 1} has no videos")

    def run_fold(f):
        test_idx = np.flatnonzero(sample_fold == f)
        train_idx = np.flatnonzero(sample_fold != f)
        trained = train(config, dataset, train_idx, test_idx)
        return test_idx, train_idx, trained, evaluate(trained.model, dataset, test_idx)

    if threads > 1:
        with ThreadPoolExecutor(max_workers=min(threads, N_FOLDS)) as pool:
            outcomes = list(pool.map(run_fold, range(N_FOLDS)))
    else:
        outcomes = [run_fold(f) for f in range(N_FOLDS)]

    report = MetricsReport()
    result = CrossValidationResult(report, {}, {}, {}, {})
    for f, (test_idx, train_idx, trained, chunk_preds) in enumerate(outcomes):
        ids, vp, vt = per_video(video_ids[test_idx], chunk_preds, dataset.targets[test_idx])
        report.add(config.dataset_kind, config.method, config.task, f + 1,
                   mae(vp, vt), mae(chunk_preds, dataset.targets[test_idx]))
        result.fold_logs[f + 1] = trained.logs
        result.fold_videos[f + 1] = ids
        result.train_videos[f + 1] = sorted(set(video_ids[train_idx]))
        result.models[f + 1] = trained.model
        for vid, p in zip(ids, vp):
            result.predictions[vid] = p
    return result


def write_epoch_log(logs: list[EpochLog], path) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["epoch", "train_mse", "val_mae"])
        for e in logs:
            w.writerow([e.epoch, repr(e.train_mse), repr(e.val_mae)])


def load_config(path) -> TrainConfig:
    return TrainConfig.from_dict(json.loads(Path(path).read_text()))
