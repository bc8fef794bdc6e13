"""Losses, metrics, optimiser, augmentation and the DVNet training loop."""

from __future__ import annotations

import csv
import io
import itertools
import logging
import math
import queue
import threading
import time
from dataclasses import dataclass
from typing import Iterable, List, Optional, Sequence

import numpy as np

from . import tensor as T
from .arch import Network, NetworkConfig, build_network, xavier_uniform
from .tensor import Tensor

logger = logging.getLogger(__name__)

CE_CLAMP = 1e-7


class NonFiniteGradientError(FloatingPointError):
    pass


class TrainingDiverged(FloatingPointError):
    def __init__(self, iteration: int, loss: float):
        super().__init__(f"non-finite loss {loss} at iteration {iteration}")
        self.iteration = iteration


# ---------------------------------------------------------------------------
# samples


@dataclass
class Sample:
    """Grayscale volume in [0, 1] and its integer class labels."""

    volume: np.ndarray
    labels: np.ndarray

    def __post_init__(self):
        if self.volume.shape != self.labels.shape:
            raise ValueError(f"volume {self.volume.shape} and labels {self.labels.shape} disagree")


def one_hot(labels: np.ndarray, num_classes: int, dtype=np.float32) -> np.ndarray:
    """``(*S)`` or ``(B, *S)`` labels to ``(B, C, *S)`` indicators."""
    labels = np.asarray(labels)
    if labels.min(initial=0) < 0 or labels.max(initial=0) >= num_classes:
        raise ValueError(f"labels outside [0, {num_classes})")
    eye = np.eye(num_classes, dtype=dtype)
    oh = np.moveaxis(eye[labels], -1, 1 if labels.ndim > 0 else 0)
    return oh


def _truth_array(truth, like: Tensor) -> np.ndarray:
    g = truth.data if isinstance(truth, Tensor) else np.asarray(truth)
    if g.shape != like.shape:
        raise ValueError(f"prediction {like.shape} and truth {g.shape} shapes differ")
    return g.astype(like.dtype, copy=False)


# ---------------------------------------------------------------------------
# losses


def dice_loss(pred: Tensor, truth, smooth: float = 1.0) -> Tensor:
    """Soft multi-class dice loss, averaged over classes (axis 1).

    Per class ``1 - (2*sum(p*g) + smooth) / (sum(p) + sum(g) + smooth)``.
    """
    if pred.size == 0:
        raise ValueError("dice_loss: empty tensors")
    g = _truth_array(truth, pred)
    p = pred.data
    axes = (0,) + tuple(range(2, p.ndim))
    inter = (p * g).sum(axis=axes, dtype=np.float64)
    denom = p.sum(axis=axes, dtype=np.float64) + g.sum(axis=axes, dtype=np.float64) + smooth
    numer = 2 * inter + smooth
    n_cls = p.shape[1]
    loss = 1.0 - float(np.mean(numer / denom))
    bshape = (1, n_cls) + (1,) * (p.ndim - 2)

    def fn(grad):
        a = (2.0 / denom).reshape(bshape)
        b = (numer / denom**2).reshape(bshape)
        dp = -(float(grad) / n_cls) * (a * g - b)
        return (dp.astype(p.dtype),)

    return T._make(np.asarray(loss, dtype=p.dtype), "dice_loss", (pred,), fn)


def cross_entropy_loss(pred: Tensor, truth, class_weights: Optional[Sequence[float]] = None) -> Tensor:
    """Mean over voxels of ``-sum_c w_c g_c log(p_c)`` with ``p`` clamped to [1e-7, 1]."""
    g = _truth_array(truth, pred)
    p = pred.data
    n_cls = p.shape[1]
    if class_weights is None:
        w = np.ones(n_cls, dtype=p.dtype)
    else:
        w = np.asarray(class_weights, dtype=p.dtype)
        if w.shape != (n_cls,):
            raise ValueError(f"cross_entropy_loss: {w.size} class weights for {n_cls} classes")
    bshape = (1, n_cls) + (1,) * (p.ndim - 2)
    wg = w.reshape(bshape) * g
    pc = np.clip(p, CE_CLAMP, 1.0)
    n_vox = p.size // n_cls
    loss = -float((wg * np.log(pc)).sum(dtype=np.float64)) / n_vox
    inside = (p >= CE_CLAMP) & (p <= 1.0)

    def fn(grad):
        dp = -(float(grad) / n_vox) * wg / pc * inside
        return (dp.astype(p.dtype),)

    return T._make(np.asarray(loss, dtype=p.dtype), "cross_entropy", (pred,), fn)


def class_weights(labels: Iterable[np.ndarray], num_classes: int) -> np.ndarray:
    """Inverse class frequency over ``labels``, normalised to mean 1."""
    counts = np.zeros(num_classes, dtype=np.float64)
    for lab in labels:
        counts += np.bincount(np.asarray(lab).ravel(), minlength=num_classes)[:num_classes]
    inv = np.where(counts > 0, counts.sum() / np.maximum(counts, 1), 0.0)
    present = inv > 0
    inv[present] /= inv[present].mean()
    return inv


# ---------------------------------------------------------------------------
# metrics


def iou_per_class(pred_labels: np.ndarray, truth_labels: np.ndarray, c: int, num_classes: int) -> float:
    pred_labels = np.asarray(pred_labels)
    truth_labels = np.asarray(truth_labels)
    if pred_labels.shape != truth_labels.shape:
        raise ValueError(f"label volumes differ in shape: {pred_labels.shape} vs {truth_labels.shape}")
    if not 0 <= c < num_classes:
        raise ValueError(f"unknown class id {c} (num_classes={num_classes})")
    p = pred_labels == c
    g = truth_labels == c
    union = np.count_nonzero(p | g)
    if union == 0:
        return 1.0
    return np.count_nonzero(p & g) / union


@dataclass
class Metrics:
    per_class_iou: List[float]
    mean_iou: float
    accuracy: float

    def as_dict(self) -> dict:
        return {
            "accuracy": self.accuracy,
            "mean_iou": self.mean_iou,
            **{f"iou_{i}": v for i, v in enumerate(self.per_class_iou)},
        }


def evaluate(pred, truth) -> Metrics:
    """Argmax ``pred`` (``(B, C, *S)`` probabilities) against one-hot or label ``truth``."""
    p = pred.data if isinstance(pred, Tensor) else np.asarray(pred)
    n_cls = p.shape[1]
    pl = p.argmax(axis=1)
    t = truth.data if isinstance(truth, Tensor) else np.asarray(truth)
    tl = t.argmax(axis=1) if t.shape == p.shape else t
    if tl.shape != pl.shape:
        raise ValueError(f"truth shape {t.shape} incompatible with prediction {p.shape}")
    return label_metrics(pl, tl, n_cls)


def label_metrics(pred_labels: np.ndarray, truth_labels: np.ndarray, num_classes: int) -> Metrics:
    ious = [iou_per_class(pred_labels, truth_labels, c, num_classes) for c in range(num_classes)]
    return Metrics(ious, float(np.mean(ious)), float(np.mean(np.asarray(pred_labels) == np.asarray(truth_labels))))


# ---------------------------------------------------------------------------
# optimiser


def xavier_init(shape, fan_in: int, fan_out: int, rng: np.random.Generator) -> Tensor:
    return Tensor(xavier_uniform(shape, fan_in, fan_out, rng), requires_grad=True)


@dataclass
class OptimizerState:
    m: List[np.ndarray]
    v: List[np.ndarray]
    step: int = 0
    base_lr: float = 1e-3
    decay_rate: float = 0.97
    decay_steps: int = 500
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8

    @classmethod
    def for_params(cls, params: Sequence[Tensor], **kw) -> "OptimizerState":
        return cls([np.zeros_like(p.data) for p in params], [np.zeros_like(p.data) for p in params], **kw)

    @property
    def learning_rate(self) -> float:
        return learning_rate(self.step, self.base_lr, self.decay_rate, self.decay_steps)


def learning_rate(step: int, base_lr: float = 1e-3, decay_rate: float = 0.97, decay_steps: int = 500) -> float:
    """Staircase exponential decay."""
    return base_lr * decay_rate ** (step // decay_steps)


def adam_step(state: OptimizerState, params: Sequence[Tensor], grads: Sequence[Optional[np.ndarray]]) -> float:
    """One bias-corrected Adam update in place; returns the rate used."""
    if len(params) != len(grads) or len(params) != len(state.m):
        raise ValueError("params, grads and optimiser state lengths differ")
    for i, g in enumerate(grads):
        if g is not None and not np.all(np.isfinite(g)):
            name = params[i].name or f"#{i}"
            raise NonFiniteGradientError(f"non-finite gradient for parameter {name}; step rejected")
    lr = state.learning_rate
    t = state.step + 1
    b1, b2 = state.beta1, state.beta2
    c1 = 1 - b1**t
    c2 = 1 - b2**t
    for p, g, m, v in zip(params, grads, state.m, state.v):
        if g is None:
            continue
        if g.shape != p.shape:
            raise ValueError(f"gradient shape {g.shape} != parameter shape {p.shape}")
        m *= b1
        m += (1 - b1) * g
        v *= b2
        v += (1 - b2) * (g * g)
        p.data -= (lr * (m / c1) / (np.sqrt(v / c2) + state.eps)).astype(p.dtype)
    state.step = t
    return lr


# ---------------------------------------------------------------------------
# augmentation


def symmetry_elements(shape) -> List[tuple]:
    """All (axis permutation, flips) pairs that map a box of ``shape`` onto itself."""
    r = len(shape)
    out = []
    for perm in itertools.permutations(range(r)):
        if any(shape[perm[i]] != shape[i] for i in range(r)):
            continue
        for flips in itertools.product((False, True), repeat=r):
            out.append((perm, flips))
    return out


def apply_symmetry(arr: np.ndarray, element) -> np.ndarray:
    perm, flips = element
    out = np.transpose(arr, perm)
    axes = tuple(i for i, f in enumerate(flips) if f)
    if axes:
        out = np.flip(out, axes)
    return np.ascontiguousarray(out)


def augment(sample: Sample, rng: np.random.Generator, crop_shape=None, element=None) -> Sample:
    """Random crop to ``crop_shape`` then a random box symmetry (90 degree turns and flips)."""
    shape = sample.volume.shape
    crop_shape = tuple(shape if crop_shape is None else crop_shape)
    if len(crop_shape) != len(shape):
        raise ValueError(f"crop rank {len(crop_shape)} != sample rank {len(shape)}")
    for axis, (c, n) in enumerate(zip(crop_shape, shape)):
        if c > n:
            raise ValueError(f"crop extent {c} exceeds source extent {n} on axis {axis}")
    start = [int(rng.integers(0, n - c + 1)) for c, n in zip(crop_shape, shape)]
    sl = tuple(slice(s, s + c) for s, c in zip(start, crop_shape))
    vol, lab = sample.volume[sl], sample.labels[sl]
    if element is None:
        group = symmetry_elements(crop_shape)
        element = group[int(rng.integers(len(group)))]
    return Sample(apply_symmetry(vol, element), apply_symmetry(lab, element))


# ---------------------------------------------------------------------------
# training loop


@dataclass
class HistoryRow:
    iteration: int
    lr: float
    loss: float
    accuracy: float
    mean_iou: float
    val_mean_iou: float = float("nan")


@dataclass
class TrainResult:
    network: Network
    history: List[HistoryRow]
    best_val_iou: float = float("nan")
    best_iteration: int = -1
    elapsed: float = 0.0

    def history_csv(self) -> str:
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(["iteration", "lr", "loss", "accuracy", "mean_iou", "val_mean_iou"])
        for h in self.history:
            w.writerow([h.iteration, f"{h.lr:.6g}", f"{h.loss:.6g}", f"{h.accuracy:.6g}",
                        f"{h.mean_iou:.6g}", "" if math.isnan(h.val_mean_iou) else f"{h.val_mean_iou:.6g}"])
        return buf.getvalue()

    def save_history(self, path) -> None:
        with open(path, "w") as fh:
            fh.write(self.history_csv())


def make_batch(samples: Sequence[Sample], num_classes: int, dtype=np.float32):
    x = np.stack([s.volume for s in samples])[:, None].astype(dtype)
    y = one_hot(np.stack([s.labels for s in samples]), num_classes, dtype)
    return x, y


class _Prefetcher:
    """Bounded producer/consumer queue feeding augmented batches."""

    def __init__(self, produce, n_batches: int, depth: int = 2):
        self._q: queue.Queue = queue.Queue(maxsize=depth)
        self._produce = produce
        self._n = n_batches
        self._stop = threading.Event()
        self._thread = threading.Thread(target=self._run, daemon=True)
        self._thread.start()

    def _run(self):
        try:
            for _ in range(self._n):
                item = self._produce()
                while not self._stop.is_set():
                    try:
                        self._q.put(item, timeout=0.1)
                        break
                    except queue.Full:
                        continue
                if self._stop.is_set():
                    return
        except BaseException as exc:  # surfaced on the consumer side
            self._q.put(exc)

    def get(self):
        item = self._q.get()
        if isinstance(item, BaseException):
            raise item
        return item

    def close(self):
        self._stop.set()


def validate(net: Network, samples: Sequence[Sample], num_classes: int) -> Metrics:
    """Mean metrics over ``samples`` with an eval-mode forward."""
    ious, accs = [], []
    for s in samples:
        p = net.predict(s.volume[None, None].astype(np.float32))
        m = evaluate(p, s.labels[None])
        ious.append(m.per_class_iou)
        accs.append(m.accuracy)
    per = np.mean(ious, axis=0).tolist()
    return Metrics(per, float(np.mean(per)), float(np.mean(accs)))


def train(
    config: NetworkConfig,
    dataset: Sequence[Sample],
    iterations: int,
    loss_kind: str = "dice",
    seed: int = 0,
    batch_size: int = 2,
    crop_shape=None,
    augment_data: bool = True,
    validation: Optional[Sequence[Sample]] = None,
    val_every: int = 100,
    class_weights_: Optional[Sequence[float]] = None,
    checkpoint_path=None,
    history_path=None,
    prefetch: bool = False,
    network: Optional[Network] = None,
    base_lr: float = 1e-3,
    log_every: int = 0,
) -> TrainResult:
    """Train DVNet with Adam and staircase learning-rate decay.

    Batches of ``batch_size`` samples are drawn with replacement from
    ``dataset`` and (optionally) augmented. With ``validation`` the network is
    scored every ``val_every`` iterations and the best mean-IoU parameters are
    restored at the end (and written to ``checkpoint_path``).
    """
    if not dataset:
        raise ValueError("train: empty dataset")
    if loss_kind not in ("dice", "xent"):
        raise ValueError(f"loss_kind must be 'dice' or 'xent', got {loss_kind!r}")
    from .checkpoint import save_checkpoint

    net = network if network is not None else build_network(config, seed)
    net.dropout_rng = np.random.default_rng([seed, 1])
    params = net.parameters()
    state = OptimizerState.for_params(params, base_lr=base_lr)
    rng = np.random.default_rng([seed, 2])
    c = config.num_classes

    def produce():
        picks = rng.integers(0, len(dataset), size=batch_size)
        chosen = []
        for i in picks:
            s = dataset[int(i)]
            chosen.append(augment(s, rng, crop_shape) if augment_data else _crop_fixed(s, crop_shape))
        return make_batch(chosen, c)

    feeder = _Prefetcher(produce, iterations) if prefetch else None
    history: List[HistoryRow] = []
    best_iou, best_it, best_params = -1.0, -1, None
    t0 = time.perf_counter()
    try:
        for it in range(iterations):
            x, y = feeder.get() if feeder else produce()
            if it == 0:
                _check_bottleneck_statistics(x.shape, net.config)
            graph = T.Graph()
            with T.recording(graph):
                pred = net.forward(x, "train")
                if loss_kind == "dice":
                    loss = dice_loss(pred, y)
                else:
                    loss = cross_entropy_loss(pred, y, class_weights_)
            lval = float(loss.data)
            if not math.isfinite(lval):
                raise TrainingDiverged(it, lval)
            net.zero_grad()
            T.backward(graph, loss)
            graph.clear()
            lr = adam_step(state, params, [p.grad for p in params])
            m = evaluate(pred.data, y)
            row = HistoryRow(it, lr, lval, m.accuracy, m.mean_iou)
            if validation and ((it + 1) % val_every == 0 or it == iterations - 1):
                vm = validate(net, validation, c)
                row.val_mean_iou = vm.mean_iou
                if vm.mean_iou > best_iou:
                    best_iou, best_it = vm.mean_iou, it
                    best_params = [p.data.copy() for p in params]
                    best_stats = [(st.mean.copy(), st.var.copy()) for _, st in net.named_buffers()]
                    if checkpoint_path is not None:
                        save_checkpoint(net, checkpoint_path)
            history.append(row)
            if log_every and (it % log_every == 0 or it == iterations - 1):
                logger.info("it %d lr %.3g loss %.4f acc %.4f miou %.4f", it, lr, lval, m.accuracy, m.mean_iou)
    finally:
        if feeder:
            feeder.close()
    if best_params is not None:
        for p, d in zip(params, best_params):
            p.data = d
        for (_, st), (mu, var) in zip(net.named_buffers(), best_stats):
            st.mean, st.var = mu, var
    elif checkpoint_path is not None:
        save_checkpoint(net, checkpoint_path)
    result = TrainResult(net, history, best_iou if best_it >= 0 else float("nan"), best_it,
                         time.perf_counter() - t0)
    if history_path is not None:
        result.save_history(history_path)
    return result


def _check_bottleneck_statistics(batch_shape, config: NetworkConfig) -> None:
    # one value per channel makes train-mode batch norm output zeros and
    # drives its running variance to 0, so eval-mode inference overflows
    count = batch_shape[0] * int(np.prod([n // config.divisor for n in batch_shape[2:]]))
    if count < 2:
        raise ValueError(
            f"batch of shape {tuple(batch_shape)} leaves one value per channel at the bottleneck "
            f"(divisor {config.divisor}); use batch_size >= 2 or larger crops"
        )


def _crop_fixed(s: Sample, crop_shape) -> Sample:
    if crop_shape is None:
        return s
    sl = tuple(slice(0, c) for c in crop_shape)
    return Sample(s.volume[sl], s.labels[sl])
