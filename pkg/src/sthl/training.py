"""Optimisers, the training loop, metrics and ablation runs."""
import logging
from concurrent.futures import ThreadPoolExecutor
from dataclasses import asdict, dataclass, field

import numpy as np

from .dataset import make_pairs, stack_pairs
from .model import SthlModel, batch_loss, cross_entropy, forward_batch, loss_and_grad

log = logging.getLogger(__name__)

OPTIMIZERS = ("sgd", "adam")
ABLATIONS = ("none", "no_hyperedge", "no_attention")
SPLITS = ("chronological", "shuffled")


class DivergenceError(RuntimeError):
    pass


@dataclass
class TrainConfig:
    epochs: int = 300
    batch_size: int = 16
    learning_rate: float = 1e-3
    optimizer: str = "adam"
    beta1: float = 0.9
    beta2: float = 0.999
    adam_eps: float = 1e-8
    train_fraction: float = 0.6
    val_fraction: float = 0.2
    split: str = "chronological"
    shuffle_seed: int = 0
    ablation: str = "none"
    threads: int = 1

    def __post_init__(self):
        self.validate()

    def validate(self):
        if self.epochs < 0 or self.batch_size < 1:
            raise ValueError("epochs must be >= 0 and batch_size >= 1")
        if self.learning_rate < 0:
            raise ValueError(f"learning_rate must be nonnegative, got {self.learning_rate}")
        if self.optimizer not in OPTIMIZERS:
            raise ValueError(f"optimizer must be one of {OPTIMIZERS}, got {self.optimizer!r}")
        if self.ablation not in ABLATIONS:
            raise ValueError(f"ablation must be one of {ABLATIONS}, got {self.ablation!r}")
        if self.split not in SPLITS:
            raise ValueError(f"split must be one of {SPLITS}, got {self.split!r}")
        if not (0 < self.train_fraction < 1 and 0 < self.val_fraction < 1):
            raise ValueError("train_fraction and val_fraction must lie in (0, 1)")
        if self.train_fraction + self.val_fraction > 1 + 1e-12:
            raise ValueError("train_fraction + val_fraction must not exceed 1")
        if self.threads < 1:
            raise ValueError("threads must be >= 1")

    @property
    def variant(self):
        return "default" if self.ablation == "none" else self.ablation

    def to_dict(self):
        return asdict(self)


# optimisers


class SGD:
    def __init__(self, store, lr):
        self.store, self.lr = store, lr

    def step(self):
        for name, value in self.store.items():
            value -= self.lr * self.store.grad(name)


class Adam:
    def __init__(self, store, lr, beta1=0.9, beta2=0.999, eps=1e-8):
        self.store, self.lr = store, lr
        self.beta1, self.beta2, self.eps = beta1, beta2, eps
        self.t = 0
        self.m = {n: np.zeros_like(v) for n, v in store.items()}
        self.v = {n: np.zeros_like(v) for n, v in store.items()}

    def step(self):
        self.t += 1
        c1 = 1.0 - self.beta1 ** self.t
        c2 = 1.0 - self.beta2 ** self.t
        for name, value in self.store.items():
            g = self.store.grad(name)
            m, v = self.m[name], self.v[name]
            m *= self.beta1
            m += (1.0 - self.beta1) * g
            v *= self.beta2
            v += (1.0 - self.beta2) * g * g
            value -= self.lr * (m / c1) / (np.sqrt(v / c2) + self.eps)


def make_optimizer(store, cfg):
    if cfg.optimizer == "sgd":
        return SGD(store, cfg.learning_rate)
    return Adam(store, cfg.learning_rate, cfg.beta1, cfg.beta2, cfg.adam_eps)


# metrics


@dataclass
class MetricsReport:
    accuracy: float
    weighted_f1: float
    precision: list
    recall: list
    f1: list
    support: list
    confusion: list  # rows = true class, columns = predicted
    loss: float = float("nan")
    loss_curve: list = field(default_factory=list)

    def to_dict(self):
        return asdict(self)


def classification_metrics(y_true, y_pred, num_classes):
    y_true = np.asarray(y_true, dtype=np.int64)
    y_pred = np.asarray(y_pred, dtype=np.int64)
    C = num_classes
    conf = np.zeros((C, C), dtype=np.int64)
    np.add.at(conf, (y_true, y_pred), 1)
    tp = np.diag(conf).astype(float)
    support = conf.sum(axis=1)
    predicted = conf.sum(axis=0)
    with np.errstate(invalid="ignore", divide="ignore"):
        precision = np.where(predicted > 0, tp / predicted, 0.0)
        recall = np.where(support > 0, tp / support, 0.0)
        f1 = np.where(precision + recall > 0,
                      2 * precision * recall / (precision + recall), 0.0)
    n = support.sum()
    return MetricsReport(
        accuracy=float(tp.sum() / n) if n else 0.0,
        weighted_f1=float((support * f1).sum() / n) if n else 0.0,
        precision=precision.tolist(), recall=recall.tolist(), f1=f1.tolist(),
        support=support.tolist(), confusion=conf.tolist())


def _chunks(n, k):
    bounds = np.linspace(0, n, min(k, n) + 1).astype(int)
    return [(a, b) for a, b in zip(bounds[:-1], bounds[1:]) if b > a]


def predict_logits(model, cur, prev, threads=1):
    if threads <= 1 or len(cur) < 2:
        return forward_batch(model, cur, prev)[:2]
    spans = _chunks(len(cur), threads)
    with ThreadPoolExecutor(max_workers=threads) as ex:
        parts = list(ex.map(lambda s: forward_batch(model, cur[s[0]:s[1]], prev[s[0]:s[1]])[:2],
                            spans))
    return (np.concatenate([p[0] for p in parts]), np.concatenate([p[1] for p in parts]))


def evaluate(model, pairs, threads=1):
    """Greedy argmax predictions scored against the pair labels."""
    if not len(pairs):
        raise ValueError("cannot evaluate on an empty set of pairs")
    cur, prev, labels = stack_pairs(pairs)
    return _evaluate_arrays(model, cur, prev, labels, threads)


def _evaluate_arrays(model, cur, prev, labels, threads=1):
    logits, recon = predict_logits(model, cur, prev, threads)
    alpha = model.config.alpha
    loss = float(np.mean(alpha * recon + (1 - alpha) * cross_entropy(logits, labels)))
    report = classification_metrics(labels, logits.argmax(axis=1), model.config.C)
    report.loss = loss
    return report


# training


def split_indices(n, cfg):
    n_train = int(np.floor(cfg.train_fraction * n))
    n_val = int(np.floor(cfg.val_fraction * n))
    order = np.arange(n)
    if cfg.split == "shuffled":
        order = np.random.default_rng(cfg.shuffle_seed).permutation(n)
    parts = {"train": order[:n_train], "val": order[n_train:n_train + n_val],
             "test": order[n_train + n_val:]}
    for name in ("train", "val"):
        if not len(parts[name]):
            raise ValueError(f"{name} split is empty ({n} pairs, fractions "
                             f"{cfg.train_fraction}/{cfg.val_fraction})")
    return parts


def _grad_step(model, cur, prev, labels, threads):
    """Accumulate mean-batch gradients; chunk results are reduced in fixed order."""
    store = model.store
    store.zero_grad()
    if threads <= 1 or len(cur) < 2:
        return loss_and_grad(model, cur, prev, labels)
    B = len(cur)
    spans = _chunks(B, threads)
    shadows = [SthlModel(model.config, store.shadow(), model.variant) for _ in spans]

    def work(i):
        a, b = spans[i]
        return loss_and_grad(shadows[i], cur[a:b], prev[a:b], labels[a:b])

    with ThreadPoolExecutor(max_workers=threads) as ex:
        losses = list(ex.map(work, range(len(spans))))
    total = 0.0
    for (a, b), shadow, loss in zip(spans, shadows, losses):
        w = (b - a) / B
        total += w * loss
        for name in store:
            store.accumulate(name, w * shadow.store.grad(name))
    return total


@dataclass
class TrainResult:
    model: SthlModel
    reports: dict  # split name -> MetricsReport of the returned model
    history: list  # per-epoch rows: epoch, split, loss, accuracy, weighted_f1
    best_epoch: int


def train(model, dataset, cfg, verbose=False):
    """Mini-batch descent on the mean composite loss.

    Returns the parameters from the epoch with the best validation weighted
    F1 (earliest on ties); ``model`` itself ends at the last epoch.
    """
    pairs = make_pairs(dataset)
    cur, prev, labels = stack_pairs(pairs)
    parts = split_indices(len(pairs), cfg)
    if len(parts["train"]) < cfg.batch_size:
        log.warning("train split (%d) smaller than batch_size (%d)",
                    len(parts["train"]), cfg.batch_size)
    data = {k: (cur[idx], prev[idx], labels[idx]) for k, idx in parts.items() if len(idx)}
    tr_cur, tr_prev, tr_lab = data["train"]

    opt = make_optimizer(model.store, cfg)
    rng = np.random.default_rng(cfg.shuffle_seed)
    history = []
    curves = {k: [] for k in data}
    best = (-1.0, -1, model.store.copy())

    def record(epoch):
        nonlocal best
        for name, arrays in data.items():
            rep = _evaluate_arrays(model, *arrays, threads=cfg.threads)
            if not np.isfinite(rep.loss):
                raise DivergenceError(f"non-finite {name} loss at epoch {epoch}")
            curves[name].append(rep.loss)
            history.append({"epoch": epoch, "split": name, "loss": rep.loss,
                            "accuracy": rep.accuracy, "weighted_f1": rep.weighted_f1})
            if name == "val" and rep.weighted_f1 > best[0]:
                best = (rep.weighted_f1, epoch, model.store.copy())
        if verbose:
            row = {h["split"]: h for h in history if h["epoch"] == epoch}
            log.info("epoch %d train loss %.4f acc %.3f | val f1 %.3f", epoch,
                     row["train"]["loss"], row["train"]["accuracy"], row["val"]["weighted_f1"])

    record(0)
    n = len(tr_cur)
    for epoch in range(1, cfg.epochs + 1):
        order = rng.permutation(n)
        for start in range(0, n, cfg.batch_size):
            idx = order[start:start + cfg.batch_size]
            loss = _grad_step(model, tr_cur[idx], tr_prev[idx], tr_lab[idx], cfg.threads)
            if not np.isfinite(loss):
                raise DivergenceError(f"non-finite batch loss at epoch {epoch}")
            opt.step()
        record(epoch)

    best_model = SthlModel(model.config, best[2], model.variant)
    reports = {}
    for name, arrays in data.items():
        rep = _evaluate_arrays(best_model, *arrays, threads=cfg.threads)
        rep.loss_curve = curves[name]
        reports[name] = rep
    return TrainResult(best_model, reports, history, best[1])


def single_step_decreases(model, cur, prev, labels, cfg):
    """Whether one optimiser step lowers the loss on the same batch."""
    before = batch_loss(model, cur, prev, labels)
    opt = make_optimizer(model.store, cfg)
    model.store.zero_grad()
    loss_and_grad(model, cur, prev, labels)
    opt.step()
    return batch_loss(model, cur, prev, labels) <= before
