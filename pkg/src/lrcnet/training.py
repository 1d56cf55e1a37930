"""Adam, the learning-rate schedule, metrics, the training loop and sweeps."""
import dataclasses
import itertools
import logging
import time
from dataclasses import dataclass, field
from typing import Callable, Dict, List, Optional, Sequence

import numpy as np

from . import autodiff as ad
from . import model as mdl
from .config import ConfigError, ModelConfig, RunConfig, TrainConfig
from .dataio import PointCloud, make_rng

log = logging.getLogger(__name__)


class TrainingError(RuntimeError):
    pass


# ---------------------------------------------------------------------------
# optimizer
# ---------------------------------------------------------------------------

@dataclass
class OptimState:
    m: Dict[str, np.ndarray] = field(default_factory=dict)
    v: Dict[str, np.ndarray] = field(default_factory=dict)
    step: int = 0
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8


def adam_step(params, grads, state, lr):
    """Bias-corrected Adam update applied in place to ``params`` (name -> array)."""
    for name, g in grads.items():
        if not np.isfinite(g).all():
            raise TrainingError(f"non-finite gradient for {name} at step {state.step + 1}")
        if g.shape != params[name].shape:
            raise TrainingError(f"gradient shape {g.shape} != parameter {name} {params[name].shape}")
    state.step += 1
    b1, b2 = state.beta1, state.beta2
    bc1 = 1.0 - b1 ** state.step
    bc2 = 1.0 - b2 ** state.step
    for name, g in grads.items():
        p = params[name]
        if name not in state.m:
            state.m[name] = np.zeros_like(p)
            state.v[name] = np.zeros_like(p)
        m, v = state.m[name], state.v[name]
        m *= b1
        m += (1.0 - b1) * g
        v *= b2
        v += (1.0 - b2) * (g * g)
        p -= (lr * (m / bc1) / (np.sqrt(v / bc2) + state.eps)).astype(p.dtype, copy=False)
    return params, state


def lr_schedule(epoch, base=1e-3, decay=0.3, every=20, floor=1e-5):
    """Step decay: base * decay ** (epoch // every), never below ``floor``."""
    if epoch < 0:
        raise ValueError("epoch must be >= 0")
    return max(base * decay ** (epoch // every), floor)


# ---------------------------------------------------------------------------
# metrics
# ---------------------------------------------------------------------------

def accuracy(pred, truth):
    pred = np.asarray(pred)
    truth = np.asarray(truth)
    return float((pred == truth).sum()) / len(truth) if len(truth) else 0.0


def part_ious(pred, truth, parts):
    """IoU per part of one shape; a part absent from both pred and truth scores 1."""
    pred = np.asarray(pred)
    truth = np.asarray(truth)
    allowed = set(int(p) for p in parts)
    bad = set(np.unique(pred).tolist()) - allowed or set(np.unique(truth).tolist()) - allowed
    if bad:
        raise ValueError(f"labels {sorted(bad)} outside the category part set {sorted(allowed)}")
    out = []
    for p in parts:
        inter = np.sum((pred == p) & (truth == p))
        union = np.sum((pred == p) | (truth == p))
        out.append(1.0 if union == 0 else float(inter / union))
    return out


@dataclass
class MetricsReport:
    accuracy: float = 0.0
    category_iou: Dict[int, float] = field(default_factory=dict)
    instance_miou: Optional[float] = None
    class_accuracy: Dict[int, float] = field(default_factory=dict)

    def lines(self):
        out = [f"instance accuracy\t{self.accuracy:.6f}"]
        for c, a in sorted(self.class_accuracy.items()):
            out.append(f"class {c} accuracy\t{a:.6f}")
        if self.instance_miou is not None:
            out.append(f"instance mIoU\t{self.instance_miou:.6f}")
            for c, v in sorted(self.category_iou.items()):
                out.append(f"category {c} IoU\t{v:.6f}")
        return out


def mean_iou(preds, truths, categories, part_sets):
    """Per-category and instance mean IoU over a set of shapes.

    Shape IoU averages the category's part IoUs, category IoU averages its
    shapes, instance mIoU averages all shapes.
    Returns (category_iou dict, instance_miou, per-shape IoUs).
    """
    shape_iou = []
    per_cat: Dict[int, List[float]] = {}
    for pred, truth, cat in zip(preds, truths, categories):
        s = float(np.mean(part_ious(pred, truth, part_sets[cat])))
        shape_iou.append(s)
        per_cat.setdefault(int(cat), []).append(s)
    cat_iou = {c: float(np.mean(v)) for c, v in per_cat.items()}
    inst = float(np.mean(shape_iou)) if shape_iou else 0.0
    return cat_iou, inst, shape_iou


# ---------------------------------------------------------------------------
# training loop
# ---------------------------------------------------------------------------

@dataclass
class EpochRecord:
    epoch: int
    lr: float
    train_loss: float
    test_acc: float
    test_miou: Optional[float] = None
    seconds: float = 0.0

    def line(self):
        s = f"{self.epoch}\t{self.lr:.6g}\t{self.train_loss:.6f}\t{self.test_acc:.6f}"
        if self.test_miou is not None:
            s += f"\t{self.test_miou:.6f}"
        return s

    @property
    def metric(self):
        return self.test_miou if self.test_miou is not None else self.test_acc


@dataclass
class TrainResult:
    checkpoint: mdl.Checkpoint
    best: mdl.Checkpoint
    history: List[EpochRecord]
    steps: int

    def log_text(self):
        return "".join(r.line() + "\n" for r in self.history)


def _stack(clouds):
    n = {len(c) for c in clouds}
    if len(n) != 1:
        raise TrainingError(f"clouds in a batch must share a point count, got {sorted(n)}")
    return np.stack([c.coords for c in clouds])


def _targets(clouds, cfg):
    if cfg.task == "classify":
        t = np.array([c.class_id for c in clouds], dtype=np.int64)
        if (t < 0).any() or (t >= cfg.num_classes).any():
            raise TrainingError(f"class ids outside [0, {cfg.num_classes})")
        return t
    if any(c.labels is None for c in clouds):
        raise TrainingError("segmentation needs per-point labels")
    t = np.stack([c.labels for c in clouds])
    if (t >= cfg.num_parts).any():
        raise TrainingError(f"part labels outside [0, {cfg.num_parts})")
    return t


def predict(clouds, cfg, params, batch_size=16, part_sets=None):
    """Eval-mode predictions: class ids, or per-point part labels.

    With ``part_sets`` (category -> parts) segmentation predictions are
    restricted to the parts of each cloud's category.
    """
    out = []
    for i in range(0, len(clouds), batch_size):
        chunk = clouds[i:i + batch_size]
        logits = mdl.forward(_stack(chunk), cfg, params, "eval").data
        if cfg.task == "classify":
            out.extend(np.argmax(logits, axis=1).tolist())
            continue
        for c, lg in zip(chunk, logits):
            if part_sets is not None and c.class_id is not None:
                parts = np.asarray(part_sets[c.class_id])
                out.append(parts[np.argmax(lg[:, parts], axis=1)])
            else:
                out.append(np.argmax(lg, axis=1))
    return out


def evaluate(clouds, cfg, params, part_sets=None, batch_size=16):
    if not clouds:
        return MetricsReport()
    preds = predict(clouds, cfg, params, batch_size, part_sets)
    if cfg.task == "classify":
        truth = np.array([c.class_id for c in clouds])
        pred = np.array(preds)
        per_class = {int(k): accuracy(pred[truth == k], truth[truth == k]) for k in np.unique(truth)}
        return MetricsReport(accuracy(pred, truth), class_accuracy=per_class)
    truth = [c.labels for c in clouds]
    point_acc = accuracy(np.concatenate(preds), np.concatenate(truth))
    if part_sets is None:
        part_sets = {c.class_id: list(range(cfg.num_parts)) for c in clouds}
    cat, inst, _ = mean_iou(preds, truth, [c.class_id for c in clouds], part_sets)
    return MetricsReport(point_acc, cat, inst)


def _rng_state(rng):
    return rng.bit_generator.state


def train(train_set, test_set, run, part_sets=None, stop_when=None, on_epoch=None):
    """Mini-batch Adam training with per-epoch evaluation on ``test_set``.

    Returns the final and the best (by test accuracy, or mIoU for
    segmentation) checkpoints plus the epoch history. ``stop_when(record)``
    may end training after any epoch; ``run.train.target_metric`` does the
    same for a plain threshold.
    """
    cfg, tc = run.model, run.train
    tc.validate()
    if not train_set:
        raise TrainingError("training set is empty")
    _targets(train_set, cfg)
    if test_set:
        _targets(test_set, cfg)
    rng = make_rng(run.seed)
    params = mdl.init_params(cfg, run.seed)
    arrays = {k: t.data for k, t in params.items()}
    state = OptimState()
    history = []
    best = None
    best_metric = -1.0
    n = len(train_set)
    steps = 0
    ck = None
    for epoch in range(tc.epochs):
        t0 = time.perf_counter()
        lr = lr_schedule(epoch, tc.lr, tc.lr_decay, tc.decay_every, tc.lr_floor)
        order = rng.permutation(n)
        total, count = 0.0, 0
        for start in range(0, n, tc.batch_size):
            batch = [train_set[i] for i in order[start:start + tc.batch_size]]
            coords = _stack(batch)
            targets = _targets(batch, cfg)
            with ad.Tape() as tape:
                logits = mdl.forward(coords, cfg, params, "train", rng)
                loss = mdl.loss_fn(logits, targets)
            grads = tape.backward(loss, list(params.values()))
            adam_step(arrays, dict(zip(params.keys(), grads)), state, lr)
            steps += 1
            total += float(loss.data) * len(batch)
            count += len(batch)
        report = evaluate(test_set, cfg, params, part_sets, tc.batch_size)
        rec = EpochRecord(epoch, lr, total / count, report.accuracy, report.instance_miou,
                          time.perf_counter() - t0)
        history.append(rec)
        log.info("epoch %s", rec.line())
        ck = _checkpoint(run, params, state, epoch + 1, rng)
        if best is None or rec.metric > best_metric:
            best, best_metric = ck, rec.metric
        if on_epoch is not None:
            on_epoch(rec)
        if tc.target_metric and rec.metric >= tc.target_metric:
            break
        if stop_when is not None and stop_when(rec):
            break
    if ck is None:
        ck = best = _checkpoint(run, params, state, 0, rng)
    return TrainResult(ck, best, history, steps)


def _checkpoint(run, params, state, epoch, rng):
    optim = {}
    for k in params:
        if k in state.m:
            optim[f"m/{k}"] = np.array(state.m[k], dtype=np.float64)
            optim[f"v/{k}"] = np.array(state.v[k], dtype=np.float64)
    return mdl.Checkpoint(dataclasses.replace(run, sweep={}), mdl.params_to_arrays(params), optim,
                          state.step, epoch, _rng_state(rng))


# ---------------------------------------------------------------------------
# sweeps
# ---------------------------------------------------------------------------

AGGREGATION_LABELS = {"intra": "All", "mean": "Mean", "max": "Max", "concat": "Con"}


@dataclass
class SweepRow:
    settings: Dict[str, object]
    metric: float
    epochs: int
    seconds: float

    def label(self):
        parts = []
        for k, v in self.settings.items():
            if k == "aggregation":
                v = AGGREGATION_LABELS.get(v, v)
            elif isinstance(v, tuple):
                v = ",".join(str(x) for x in v)
            parts.append(f"{k}={v}")
        return " ".join(parts) if parts else "base"


def expand_grid(grid):
    keys = list(grid)
    for values in itertools.product(*(grid[k] for k in keys)):
        yield dict(zip(keys, values))


def apply_settings(run, settings):
    model_kw, train_kw = {}, {}
    model_fields = {f.name for f in dataclasses.fields(ModelConfig)}
    for k, v in settings.items():
        (model_kw if k in model_fields else train_kw)[k] = v
    if "scales" in model_kw and "filter_kinds" not in model_kw:
        # window sizes follow the number of scales unless set explicitly
        model_kw["filter_kinds"] = None
    model_cfg = dataclasses.replace(run.model, **model_kw)
    return dataclasses.replace(run, model=model_cfg, train=dataclasses.replace(run.train, **train_kw))


def sweep(train_set, test_set, run, grid, part_sets=None):
    """Train every grid point with the run's seed; rows sorted best first."""
    if not grid or any(not v for v in grid.values()):
        raise ConfigError("sweep grid is empty")
    rows = []
    for settings in expand_grid(grid):
        r = apply_settings(run, settings)
        t0 = time.perf_counter()
        res = train(train_set, test_set, r, part_sets)
        best = max(rec.metric for rec in res.history) if res.history else 0.0
        rows.append(SweepRow(settings, best, len(res.history), time.perf_counter() - t0))
    order = sorted(range(len(rows)), key=lambda i: (-rows[i].metric, i))
    return [rows[i] for i in order]


def format_sweep(rows, metric_name="test_acc"):
    lines = [f"rank\tconfig\t{metric_name}\tepochs\tseconds"]
    for i, r in enumerate(rows, 1):
        lines.append(f"{i}\t{r.label()}\t{r.metric:.4f}\t{r.epochs}\t{r.seconds:.1f}")
    return "\n".join(lines) + "\n"
