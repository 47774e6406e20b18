"""Desk-scale trainer used to exercise the SFP loop end to end.

A two-conv classifier (valid 3x3 convs + ReLU, global average pool, dense
head) with handwritten backprop, SGD with momentum and weight decay, and a
synthetic bars dataset. Everything here is float64; weights are rounded to
float32 only when exported to a :class:`WeightContainer`.
"""
from __future__ import annotations

import csv
import io
import json
import logging
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import kernels
from .accounting import ModelSpec, PrunablePolicy, PruneReport, apply_policy, build_report
from .criteria import Selection
from .sfp import Phase, PruneConfig, SfpSchedule, SfpState, initial_directive, step_epoch
from .tensor_store import Tensor, WeightContainer, write_container

logger = logging.getLogger(__name__)

IMAGE_SIZE = 16
N_CLASSES = 2
CONV1, CONV2, FC = "backbone.conv1", "backbone.conv2", "head.fc"
TOY_POLICY = PrunablePolicy(("backbone.*",), ("head.*",))


def toy_schedule() -> SfpSchedule:
    """Default schedule for the toy task: 40 soft + 10 fine-tune epochs.

    Same shape as the full 200+10 schedule (two x0.1 steps in the soft
    phase, reset then x0.1 in fine-tuning), with rates sized for this task.
    """
    return SfpSchedule(
        soft_epochs=40,
        finetune_epochs=10,
        lr_initial=0.05,
        lr_steps=((10, 0.1), (20, 0.1)),
        finetune_lr=((0, 0.05), (5, 0.005)),
    )


# -- dataset -----------------------------------------------------------------


def make_sample(seed: int, index: int):
    """Image and label for sample ``index``; a pure function of its arguments.

    Even indices are class 0 (horizontal bar), odd are class 1 (vertical).
    """
    rng = np.random.default_rng([seed, index])
    label = index % 2
    img = np.zeros((IMAGE_SIZE, IMAGE_SIZE))
    pos = int(rng.integers(1, IMAGE_SIZE - 3))
    start = int(rng.integers(0, IMAGE_SIZE // 4))
    stop = int(rng.integers(3 * IMAGE_SIZE // 4, IMAGE_SIZE + 1))
    if label == 0:
        img[pos:pos + 2, start:stop] = 1.0
    else:
        img[start:stop, pos:pos + 2] = 1.0
    img += rng.uniform(-0.2, 0.2, size=img.shape)
    return img, label


@dataclass(frozen=True)
class SyntheticDataset:
    seed: int = 0
    n_train: int = 512
    n_test: int = 256

    def __post_init__(self):
        if self.n_train < 2 or self.n_test < 2 or self.n_train % 2 or self.n_test % 2:
            raise ValueError("n_train and n_test must be even and >= 2 (balanced classes)")

    def _build(self, offset, count):
        imgs = np.empty((count, 1, IMAGE_SIZE, IMAGE_SIZE))
        labels = np.empty(count, dtype=np.int64)
        for i in range(count):
            imgs[i, 0], labels[i] = make_sample(self.seed, offset + i)
        return imgs, labels

    def train(self):
        return self._build(0, self.n_train)

    def test(self):
        # test samples live after the training indices in the same stream
        return self._build(self.n_train, self.n_test)


# -- network -----------------------------------------------------------------


@dataclass
class ToyNet:
    """Parameters keyed by their container names (``<layer>`` and ``<layer>.bias``)."""

    params: dict = field(default_factory=dict)

    @classmethod
    def init(cls, seed: int = 0, channels: int = 8) -> "ToyNet":
        rng = np.random.default_rng([seed, 0x70F])
        shapes = [
            (CONV1, (channels, 1, 3, 3)),
            (CONV2, (channels, channels, 3, 3)),
            (FC, (N_CLASSES, channels)),
        ]
        params = {}
        for name, shape in shapes:
            fan_in = int(np.prod(shape[1:]))
            bound = np.sqrt(1.0 / fan_in)
            params[name] = rng.uniform(-bound, bound, size=shape)
            params[name + ".bias"] = rng.uniform(-bound, bound, size=shape[0])
        return cls(params)

    @classmethod
    def zeros(cls, channels: int = 8) -> "ToyNet":
        net = cls.init(0, channels)
        return cls({k: np.zeros_like(v) for k, v in net.params.items()})

    def copy(self) -> "ToyNet":
        return ToyNet({k: v.copy() for k, v in self.params.items()})

    def to_container(self, metadata=None) -> WeightContainer:
        meta = {"model": "toynet", "source": "filterprune.toytrain"}
        meta.update(metadata or {})
        return WeightContainer([(k, Tensor(v)) for k, v in self.params.items()], meta)

    @classmethod
    def from_container(cls, c: WeightContainer) -> "ToyNet":
        return cls({name: np.array(t.array, dtype=np.float64) for name, t in c})


def _forward_cache(net: ToyNet, x):
    p = net.params
    if x.ndim != 4 or x.shape[1] != p[CONV1].shape[1]:
        raise ValueError(f"expected batch of shape (B, {p[CONV1].shape[1]}, H, W), got {x.shape}")
    x = np.ascontiguousarray(x, dtype=np.float64)
    z1 = kernels.conv2d_forward(x, p[CONV1], p[CONV1 + ".bias"])
    a1 = np.maximum(z1, 0.0)
    z2 = kernels.conv2d_forward(a1, p[CONV2], p[CONV2 + ".bias"])
    a2 = np.maximum(z2, 0.0)
    pooled = a2.mean(axis=(2, 3))
    logits = pooled @ p[FC].T + p[FC + ".bias"]
    return logits, (x, z1, a1, z2, a2, pooled)


def forward(net: ToyNet, batch) -> np.ndarray:
    return _forward_cache(net, np.asarray(batch, dtype=np.float64))[0]


def predict(net: ToyNet, batch) -> np.ndarray:
    return forward(net, batch).argmax(axis=1)


def accuracy(net: ToyNet, images, labels) -> float:
    return float((predict(net, images) == labels).mean())


def loss_and_grads(net: ToyNet, batch, labels):
    """Mean softmax cross-entropy and its exact gradient for every parameter."""
    labels = np.asarray(labels)
    if labels.shape != (len(batch),):
        raise ValueError("labels must be a vector with one entry per sample")
    if not np.isin(labels, np.arange(N_CLASSES)).all():
        raise ValueError("labels must be in {0, 1}")
    p = net.params
    logits, (x, z1, a1, z2, a2, pooled) = _forward_cache(net, np.asarray(batch, dtype=np.float64))
    B = len(labels)

    shifted = logits - logits.max(axis=1, keepdims=True)
    logz = np.log(np.exp(shifted).sum(axis=1))
    loss = float(np.mean(logz - shifted[np.arange(B), labels]))

    dlogits = np.exp(shifted - logz[:, None])
    dlogits[np.arange(B), labels] -= 1.0
    dlogits /= B

    grads = {FC: dlogits.T @ pooled, FC + ".bias": dlogits.sum(axis=0)}
    dpooled = dlogits @ p[FC]
    hw = a2.shape[2] * a2.shape[3]
    dz2 = np.ascontiguousarray(np.broadcast_to(dpooled[:, :, None, None] / hw, a2.shape) * (z2 > 0))
    da1, grads[CONV2], grads[CONV2 + ".bias"] = kernels.conv2d_backward(a1, p[CONV2], dz2, True)
    dz1 = np.ascontiguousarray(da1 * (z1 > 0))
    _, grads[CONV1], grads[CONV1 + ".bias"] = kernels.conv2d_backward(x, p[CONV1], dz1, False)
    return loss, grads


backward = loss_and_grads


@dataclass(frozen=True)
class SgdConfig:
    momentum: float = 0.9
    weight_decay: float = 5e-4
    batch_size: int = 32

    def __post_init__(self):
        if not 0.0 <= self.momentum < 1.0:
            raise ValueError("momentum must be in [0, 1)")
        if self.weight_decay < 0:
            raise ValueError("weight_decay must be >= 0")
        if self.batch_size < 1:
            raise ValueError("batch_size must be positive")


def sgd_step(net: ToyNet, grads, cfg: SgdConfig, lr: float, velocity: dict, freeze_mask=None):
    """In-place SGD update; ``velocity`` is updated in place too.

    ``freeze_mask`` maps layer name -> boolean keep vector. Pruned filters of
    those layers end the step with weights and velocities exactly 0.0.
    """
    for name, w in net.params.items():
        g = grads[name]
        v = velocity.get(name)
        if v is None:
            v = velocity[name] = np.zeros_like(w)
        v *= cfg.momentum
        v += g + cfg.weight_decay * w
        w -= lr * v
    if freeze_mask:
        for name, keep in freeze_mask.items():
            dead = ~np.asarray(keep, dtype=bool)
            net.params[name][dead] = 0.0
            velocity[name][dead] = 0.0
    return net


def train_epoch(net, velocity, images, labels, cfg: SgdConfig, lr, rng, freeze_mask=None):
    order = rng.permutation(len(labels))
    total = 0.0
    for start in range(0, len(order), cfg.batch_size):
        idx = order[start:start + cfg.batch_size]
        loss, grads = loss_and_grads(net, images[idx], labels[idx])
        sgd_step(net, grads, cfg, lr, velocity, freeze_mask)
        total += loss * len(idx)
    return total / len(labels)


# -- experiment --------------------------------------------------------------


@dataclass
class ExperimentResult:
    accuracy_history: list
    final_report: PruneReport
    final_weights: WeightContainer
    recoveries: list
    pruned_history: list
    initial_accuracy: float
    seed: int
    config: PruneConfig

    @property
    def final_accuracy(self) -> float:
        return self.accuracy_history[-1]["test_accuracy"]

    @property
    def lr_trace(self):
        return [row["lr"] for row in self.accuracy_history]

    def to_json(self):
        return {
            "seed": self.seed,
            "config": self.config.to_json(),
            "initial_accuracy": self.initial_accuracy,
            "final_accuracy": self.final_accuracy,
            "accuracy_history": self.accuracy_history,
            "recoveries": self.recoveries,
            "final_report": self.final_report.to_json(),
        }

    def history_csv(self) -> str:
        buf = io.StringIO()
        writer = csv.writer(buf, lineterminator="\n")
        writer.writerow(["epoch", "phase", "lr", "test_accuracy"])
        for row in self.accuracy_history:
            writer.writerow([row["epoch"], row["phase"], repr(row["lr"]), repr(row["test_accuracy"])])
        return buf.getvalue()

    def write(self, out_dir, run="toy"):
        """Write ``<run>.result.json``, ``<run>.csv``, ``<run>.pktc`` and ``<run>.report.*``."""
        out = Path(out_dir)
        out.mkdir(parents=True, exist_ok=True)
        paths = {
            "result": out / f"{run}.result.json",
            "history": out / f"{run}.csv",
            "weights": out / f"{run}.pktc",
            "report": out / f"{run}.report.json",
            "table": out / f"{run}.report.txt",
        }
        paths["result"].write_text(json.dumps(self.to_json(), indent=2) + "\n")
        paths["history"].write_text(self.history_csv())
        write_container(self.final_weights, paths["weights"])
        paths["report"].write_text(json.dumps(self.final_report.to_json(), indent=2) + "\n")
        paths["table"].write_text(self.final_report.to_table())
        return paths


def _selections(masks, theta):
    sels = {}
    for name, m in masks.items():
        keep = m.keep_array()
        sels[name] = Selection(
            name,
            tuple(int(i) for i in np.flatnonzero(~keep)),
            tuple(int(i) for i in np.flatnonzero(keep)),
            theta,
        )
    return sels


def run_sfp_experiment(
    config: PruneConfig,
    dataset: SyntheticDataset,
    sgd: SgdConfig | None = None,
    scaled_schedule: SfpSchedule | None = None,
    seed: int = 0,
    on_epoch=None,
) -> ExperimentResult:
    """Train the toy net through the soft and hard fine-tune phases.

    ``scaled_schedule`` overrides ``config.schedule`` when given. ``seed``
    fixes weight init and batch order; the dataset carries its own seed.
    ``on_epoch(state, net, row)`` is called after every boundary.
    """
    sgd = sgd or SgdConfig()
    if scaled_schedule is not None:
        config = PruneConfig(config.theta, config.criterion, config.prunable_layers, scaled_schedule)
    train_x, train_y = dataset.train()
    test_x, test_y = dataset.test()
    net = ToyNet.init(seed)
    velocity = {}
    state = SfpState.start(config)
    directive = initial_directive(state)
    initial_acc = accuracy(net, test_x, test_y)

    history, pruned_history, recoveries = [], [], []
    prev_pruned = None
    while state.phase is not Phase.DONE:
        epoch, phase = state.epoch, state.phase
        rng = np.random.default_rng([seed, 0xE90C, epoch])
        freeze = (
            {n: m.keep_array() for n, m in state.masks.items()} if directive.freeze_pruned else None
        )
        train_epoch(net, velocity, train_x, train_y, sgd, directive.lr, rng, freeze)

        # Masks are scored on the float32 export; zeroing is applied to the
        # float64 parameters directly so training precision is kept.
        lr_used = directive.lr
        state, _, directive = step_epoch(state, net.to_container())
        for name, m in state.masks.items():
            net.params[name][~m.keep_array()] = 0.0

        pruned = {n: list(m.pruned_indices) for n, m in state.masks.items()}
        if phase is Phase.SOFT and prev_pruned is not None:
            for name, idx in prev_pruned.items():
                for j in sorted(set(idx) - set(pruned[name])):
                    recoveries.append({"layer": name, "filter": j, "pruned_at": epoch - 1, "kept_at": epoch})
        if phase is Phase.SOFT:
            prev_pruned = pruned
        pruned_history.append(pruned)

        row = {
            "epoch": epoch,
            "phase": phase.value,
            "lr": lr_used,
            "test_accuracy": accuracy(net, test_x, test_y),
        }
        history.append(row)
        logger.debug("epoch %d %s lr=%g acc=%.4f", epoch, phase.value, lr_used, row["test_accuracy"])
        if on_epoch is not None:
            on_epoch(state, net, row)

    final = net.to_container({"theta": repr(config.theta), "criterion": config.criterion.value})
    spec = apply_policy(ModelSpec.from_container(final, "toynet"), config.prunable_layers)
    report = build_report(spec, _selections(state.masks, config.theta), config)
    return ExperimentResult(
        accuracy_history=history,
        final_report=report,
        final_weights=final,
        recoveries=recoveries,
        pruned_history=pruned_history,
        initial_accuracy=initial_acc,
        seed=seed,
        config=config,
    )


# -- finite-difference harness -------------------------------------------------


def relu_pattern(net: ToyNet, batch):
    """Sign pattern of every ReLU input; gradients are smooth while it is fixed."""
    _, (_, z1, _, z2, _, _) = _forward_cache(net, np.asarray(batch, dtype=np.float64))
    return np.concatenate([(z1 > 0).ravel(), (z2 > 0).ravel()])


@dataclass(frozen=True)
class GradProbe:
    name: str
    index: tuple
    analytic: float
    numeric: float
    smooth: bool

    @property
    def rel_error(self) -> float:
        scale = max(abs(self.analytic), abs(self.numeric))
        return 0.0 if scale == 0.0 else abs(self.analytic - self.numeric) / scale


def probe_gradients(net: ToyNet, batch, labels, probes, h: float = 1e-5):
    """Central differences of the mean loss at ``probes`` [(name, index), ...].

    ``smooth`` is False when the +-h perturbation flips a ReLU, i.e. the
    difference quotient straddles a kink and is not a valid reference.
    """
    _, grads = loss_and_grads(net, batch, labels)
    base = relu_pattern(net, batch)
    out = []
    for name, idx in probes:
        p = net.params[name]
        old = p[idx]
        p[idx] = old + h
        lp, _ = loss_and_grads(net, batch, labels)
        smooth = np.array_equal(relu_pattern(net, batch), base)
        p[idx] = old - h
        lm, _ = loss_and_grads(net, batch, labels)
        smooth = smooth and np.array_equal(relu_pattern(net, batch), base)
        p[idx] = old
        out.append(GradProbe(name, idx, float(grads[name][idx]), (lp - lm) / (2 * h), smooth))
    return out


def random_probes(net: ToyNet, count: int, rng):
    names = list(net.params)
    probes = []
    for _ in range(count):
        name = names[int(rng.integers(len(names)))]
        probes.append((name, tuple(int(rng.integers(s)) for s in net.params[name].shape)))
    return probes
