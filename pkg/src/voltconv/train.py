"""Desk-scale training demo: mini-batch SGD with momentum on the tape.

Two demo models are provided. `LinearModel` is a flat affine classifier
over raw pixels, used for the separable-sanity checks. `ConvHlaModel` is
the small image network the shipped demo config trains: two first-order
3x3 convolutions with pooling, an attention block, global pooling, and an
affine head. Anything exposing forward(x, training) -> logits and
trainables() -> list of tape variables trains under `train_demo`.

The per-epoch log row reports loss and accuracy from a full evaluation
pass in inference mode over the train and test splits (not running batch
averages), so rows are comparable across epochs. `wall_seconds` is the
only nondeterministic column; everything else is reproducible from the
seed.
"""

from __future__ import annotations

import csv
import time
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .autograd import (
    Var,
    affine,
    avg_pool2,
    global_avg_pool,
    relu,
    softmax_cross_entropy,
    volterra_conv,
)
from .data import Dataset, ensure_synthetic_files, load_cifar100, take_per_class
from .geometry import ConvGeometry
from .hla import HlaConfig, HlaParams, hla_forward
from .unique import init_volterra_layer

LOG_COLUMNS = ("epoch", "train_loss", "train_acc", "test_acc",
               "wall_seconds")

# Evaluation chunks trade speed for peak memory: the attention model's
# second-order term matrix is batch x positions x terms, roughly 5 MB
# per image at 8 channels, so 50 keeps a full eval pass under 300 MB.
EVAL_BATCH = 50


class TrainingDivergedError(RuntimeError):
    """The training loss went non-finite."""


@dataclass(frozen=True)
class SgdConfig:
    learning_rate: float
    momentum: float
    weight_decay: float
    epochs: int
    batch_size: int
    seed: int

    def __post_init__(self):
        # Zero is accepted so the no-update diagnostic mode stays runnable;
        # negative rates are always a mistake.
        if self.learning_rate < 0:
            raise ValueError("learning_rate must be >= 0")
        if self.batch_size < 1:
            raise ValueError("batch_size must be >= 1")
        if self.epochs < 0:
            raise ValueError("epochs must be >= 0")
        if not 0 <= self.momentum < 1:
            raise ValueError("momentum must lie in [0, 1)")
        if self.weight_decay < 0:
            raise ValueError("weight_decay must be >= 0")


class SgdOptimizer:
    """Classic momentum: v <- mu*v + (g + wd*p); p <- p - lr*v."""

    def __init__(self, params, cfg: SgdConfig):
        self.params = list(params)
        self.cfg = cfg
        self.velocity = [np.zeros_like(p.value) for p in self.params]

    def step(self) -> None:
        cfg = self.cfg
        for p, v in zip(self.params, self.velocity):
            if p.grad is None:
                continue
            v *= cfg.momentum
            v += p.grad + cfg.weight_decay * p.value
            p.value = p.value - cfg.learning_rate * v

    def zero_grad(self) -> None:
        for p in self.params:
            p.zero_grad()


class LinearModel:
    """Affine classifier on flattened pixels.

    Pixels are centered at 0.5 before the affine map; without centering
    the brightness direction carries a large constant offset that only
    the (much slower) bias can cancel, which drags out convergence.
    """

    def __init__(self, n_classes: int, rng: np.random.Generator,
                 pixels: int = 3 * 32 * 32):
        self.w = Var(rng.uniform(-1, 1, (n_classes, pixels)) * 1e-3)
        self.b = Var(np.zeros(n_classes))

    def forward(self, x: Var, training: bool) -> Var:
        flat = (x - 0.5).reshape(x.value.shape[0], -1)
        return affine(flat, self.w, self.b)

    def trainables(self):
        return [self.w, self.b]


class ConvHlaModel:
    """conv 3->c, pool, conv c->c, pool, attention, global pool, affine.

    Both plain convolutions are first order; the attention block carries
    the second-order convolution. Input images are 3x32x32 and are
    centered at 0.5 on the way in.
    """

    def __init__(self, channels: int, n_classes: int,
                 rng: np.random.Generator, reduction: int = 4,
                 use_input_batchnorm: bool = False):
        def geom(in_c, size):
            return ConvGeometry(kernel_h=3, kernel_w=3, stride_h=1,
                                stride_w=1, pad_h=1, pad_w=1,
                                in_channels=in_c, in_h=size, in_w=size)

        self.geom1 = geom(3, 32)
        self.geom2 = geom(channels, 16)
        l1 = init_volterra_layer(self.geom1, out_channels=channels,
                                 order=1, rng=rng)
        l2 = init_volterra_layer(self.geom2, out_channels=channels,
                                 order=1, rng=rng)
        self.w1 = tuple(Var(w) for w in l1.weights)
        self.b1 = Var(l1.bias)
        self.w2 = tuple(Var(w) for w in l2.weights)
        self.b2 = Var(l2.bias)
        self.hla = HlaParams(
            HlaConfig(channels=channels, reduction_ratio=reduction,
                      use_input_batchnorm=use_input_batchnorm),
            rng,
        )
        self.fc_w = Var(rng.uniform(-1, 1, (n_classes, channels))
                        / np.sqrt(channels))
        self.fc_b = Var(np.zeros(n_classes))

    def forward(self, x: Var, training: bool) -> Var:
        h = relu(volterra_conv(x - 0.5, self.w1, self.b1, self.geom1,
                               order=1))
        h = avg_pool2(h)
        h = relu(volterra_conv(h, self.w2, self.b2, self.geom2, order=1))
        h = avg_pool2(h)
        h = hla_forward(h, self.hla, training=training)
        h = global_avg_pool(h)
        return affine(h, self.fc_w, self.fc_b)

    def trainables(self):
        return [*self.w1, self.b1, *self.w2, self.b2,
                *self.hla.trainables(), self.fc_w, self.fc_b]


def evaluate(model, images: np.ndarray, labels: np.ndarray,
             batch_size: int = EVAL_BATCH) -> tuple[float, float]:
    """Mean loss and accuracy over a split, in inference mode."""
    n = images.shape[0]
    if n == 0:
        raise ValueError("cannot evaluate an empty split")
    loss_sum = 0.0
    correct = 0
    for start in range(0, n, batch_size):
        xb = images[start:start + batch_size]
        yb = labels[start:start + batch_size]
        logits = model.forward(Var(xb), training=False)
        loss = softmax_cross_entropy(logits, yb)
        loss_sum += float(loss.value) * xb.shape[0]
        correct += int((logits.value.argmax(axis=1) == yb).sum())
    return loss_sum / n, correct / n


@dataclass(frozen=True)
class LogRow:
    epoch: int
    train_loss: float
    train_acc: float
    test_acc: float
    wall_seconds: float


def write_log(rows, csv_path) -> None:
    if hasattr(csv_path, "write"):
        _write_log_stream(rows, csv_path)
        return
    with open(csv_path, "w", newline="") as fh:
        _write_log_stream(rows, fh)


def _write_log_stream(rows, fh) -> None:
    writer = csv.writer(fh)
    writer.writerow(LOG_COLUMNS)
    for row in rows:
        writer.writerow([
            row.epoch,
            repr(row.train_loss),
            repr(row.train_acc),
            repr(row.test_acc),
            f"{row.wall_seconds:.3f}",
        ])


def train_demo(model, train_set: Dataset, test_set: Dataset,
               cfg: SgdConfig, csv_path=None) -> list[LogRow]:
    """Run the demo loop; row 0 is the pre-training evaluation.

    With epochs=0 the returned log is exactly that single row. A
    non-finite loss aborts with the batch position and hyperparameters in
    the message.
    """
    rng = np.random.default_rng(cfg.seed)
    opt = SgdOptimizer(model.trainables(), cfg)
    start = time.perf_counter()
    rows: list[LogRow] = []

    def snapshot(epoch: int) -> None:
        tr_loss, tr_acc = evaluate(model, train_set.images,
                                   train_set.labels)
        _, te_acc = evaluate(model, test_set.images, test_set.labels)
        rows.append(LogRow(epoch, tr_loss, tr_acc, te_acc,
                           time.perf_counter() - start))

    snapshot(0)
    n = train_set.count
    for epoch in range(1, cfg.epochs + 1):
        order = rng.permutation(n)
        for s in range(0, n, cfg.batch_size):
            idx = order[s:s + cfg.batch_size]
            x = Var(train_set.images[idx])
            logits = model.forward(x, training=True)
            loss = softmax_cross_entropy(logits, train_set.labels[idx])
            if not np.isfinite(loss.value):
                raise TrainingDivergedError(
                    f"loss became {float(loss.value)!r} in epoch {epoch} "
                    f"at batch offset {s} (learning_rate="
                    f"{cfg.learning_rate}, momentum={cfg.momentum}, "
                    f"batch_size={cfg.batch_size})"
                )
            opt.zero_grad()
            loss.backward()
            opt.step()
        snapshot(epoch)
    if csv_path is not None:
        write_log(rows, csv_path)
    return rows


# -- config file handling -------------------------------------------------

CONFIG_KEYS = {
    "dataset": "synthetic-disks | synthetic-blobs | cifar100",
    "data_dir": "directory for dataset files",
    "classes": "comma-separated fine-label ids, e.g. 0,1",
    "train_per_class": "training records kept per class",
    "test_per_class": "test records kept per class",
    "model": "conv-hla | linear",
    "channels": "conv width of the conv-hla model",
    "hla_reduction": "attention bottleneck divisor",
    "learning_rate": "SGD step size",
    "momentum": "SGD momentum in [0, 1)",
    "weight_decay": "L2 coefficient",
    "epochs": "training epochs",
    "batch_size": "minibatch size",
    "seed": "RNG seed for init and shuffling",
}

_DEFAULTS = {
    "dataset": "synthetic-disks",
    "data_dir": "data",
    "classes": "0,1",
    "train_per_class": "500",
    "test_per_class": "100",
    "model": "conv-hla",
    "channels": "8",
    "hla_reduction": "4",
    "learning_rate": "0.05",
    "momentum": "0.9",
    "weight_decay": "0.0005",
    "epochs": "20",
    "batch_size": "32",
    "seed": "7",
}


def parse_config(path) -> dict:
    """Flat key=value lines; '#' starts a comment; keys must be known and
    appear at most once."""
    conf = {}
    text = Path(path).read_text()
    for lineno, raw in enumerate(text.splitlines(), 1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ValueError(f"{path}:{lineno}: expected key=value, "
                             f"got {raw.strip()!r}")
        key, value = (part.strip() for part in line.split("=", 1))
        if key not in CONFIG_KEYS:
            raise ValueError(
                f"{path}:{lineno}: unknown key {key!r}; valid keys: "
                f"{', '.join(sorted(CONFIG_KEYS))}"
            )
        if key in conf:
            raise ValueError(f"{path}:{lineno}: duplicate key {key!r}")
        conf[key] = value
    return conf


def _load_split(conf: dict, split: str) -> Dataset:
    dataset = conf["dataset"]
    classes = [int(c) for c in conf["classes"].split(",")]
    per_class = int(conf["train_per_class" if split == "train"
                         else "test_per_class"])
    data_dir = Path(conf["data_dir"])
    if dataset == "cifar100":
        path = data_dir / f"{split}.bin"
        if not path.exists():
            raise FileNotFoundError(
                f"{path} not found; dataset=cifar100 expects "
                f"{data_dir}/train.bin and {data_dir}/test.bin in the "
                "CIFAR-100 binary layout (3074-byte records: coarse "
                "label byte, fine label byte, 3072 channel-major pixel "
                "bytes)"
            )
        full = load_cifar100(path, class_filter=set(classes))
    elif dataset in ("synthetic-disks", "synthetic-blobs"):
        kind = dataset.split("-", 1)[1]
        train_path, test_path = ensure_synthetic_files(
            kind, data_dir, classes,
            train_per_class=int(conf["train_per_class"]),
            test_per_class=int(conf["test_per_class"]),
        )
        path = train_path if split == "train" else test_path
        full = load_cifar100(path, class_filter=set(classes))
    else:
        raise ValueError(f"unknown dataset {dataset!r}")
    return take_per_class(full, per_class)


def demo_from_config(conf: dict):
    """Build (model, train split, test split, SgdConfig) from a parsed
    config dictionary; unset keys take the shipped defaults."""
    conf = {**_DEFAULTS, **conf}
    cfg = SgdConfig(
        learning_rate=float(conf["learning_rate"]),
        momentum=float(conf["momentum"]),
        weight_decay=float(conf["weight_decay"]),
        epochs=int(conf["epochs"]),
        batch_size=int(conf["batch_size"]),
        seed=int(conf["seed"]),
    )
    train_set = _load_split(conf, "train")
    test_set = _load_split(conf, "test")
    n_classes = len(train_set.classes)
    rng = np.random.default_rng(cfg.seed)
    if conf["model"] == "linear":
        model = LinearModel(n_classes, rng)
    elif conf["model"] == "conv-hla":
        model = ConvHlaModel(int(conf["channels"]), n_classes, rng,
                             reduction=int(conf["hla_reduction"]))
    else:
        raise ValueError(f"unknown model {conf['model']!r}")
    return model, train_set, test_set, cfg
