"""Soft filter pruning driver.

The trainer owns the loop::

    state = SfpState.start(config)
    lr = initial_directive(state).lr
    while state.phase is not Phase.DONE:
        train_one_epoch(weights, lr, freeze=directive.freeze_pruned)
        state, weights, directive = step_epoch(state, weights)
        lr = directive.lr

During the soft phase every boundary re-scores the *current* weights and
zeroes the selected filters; nothing is remembered between boundaries, so a
filter zeroed at one boundary may come back at the next. Once
``soft_epochs`` boundaries have passed, the last masks freeze for the hard
fine-tune phase.
"""
from __future__ import annotations

import enum
import json
from dataclasses import dataclass, field, replace
from pathlib import Path

import numpy as np

from .accounting import PrunablePolicy
from .criteria import Criterion, check_theta, score, select
from .tensor_store import Tensor, WeightContainer, as_filter_bank, read_container, write_container


class NoPrunableLayersError(ValueError):
    pass


@dataclass(frozen=True)
class SfpSchedule:
    soft_epochs: int = 200
    finetune_epochs: int = 10
    lr_initial: float = 1e-3
    lr_steps: tuple[tuple[int, float], ...] = ((50, 0.1), (100, 0.1))
    finetune_lr: tuple[tuple[int, float], ...] = ((0, 1e-3), (5, 1e-4))

    def __post_init__(self):
        object.__setattr__(self, "lr_steps", tuple((int(e), float(f)) for e, f in self.lr_steps))
        object.__setattr__(self, "finetune_lr", tuple((int(e), float(r)) for e, r in self.finetune_lr))
        if self.soft_epochs < 1 or self.finetune_epochs < 1:
            raise ValueError("soft_epochs and finetune_epochs must be positive")
        if self.lr_initial <= 0:
            raise ValueError("lr_initial must be positive")
        _check_steps(self.lr_steps, 1, self.soft_epochs, "lr_steps")
        _check_steps(self.finetune_lr, 0, self.finetune_epochs, "finetune_lr")
        if not self.finetune_lr or self.finetune_lr[0][0] != 0:
            raise ValueError("finetune_lr must start at offset 0")

    @classmethod
    def scaled(cls, factor: int = 5) -> "SfpSchedule":
        """The default schedule with its soft phase shrunk by ``factor``.

        ``scaled(5)`` gives 40 soft epochs with steps at 10 and 20.
        """
        d = cls()
        return cls(
            soft_epochs=d.soft_epochs // factor,
            finetune_epochs=d.finetune_epochs,
            lr_initial=d.lr_initial,
            lr_steps=tuple((e // factor, f) for e, f in d.lr_steps),
            finetune_lr=d.finetune_lr,
        )

    def soft_lr(self, epoch: int) -> float:
        lr = self.lr_initial
        for step, factor in self.lr_steps:
            if epoch >= step:
                lr *= factor
        return lr

    def finetune_lr_at(self, offset: int) -> float:
        lr = self.finetune_lr[0][1]
        for start, rate in self.finetune_lr:
            if offset >= start:
                lr = rate
        return lr

    def lr_trace(self):
        """Learning rate used for every training epoch, soft then fine-tune."""
        return [self.soft_lr(e) for e in range(self.soft_epochs)] + [
            self.finetune_lr_at(o) for o in range(self.finetune_epochs)
        ]

    def to_json(self):
        return {
            "soft_epochs": self.soft_epochs,
            "finetune_epochs": self.finetune_epochs,
            "lr_initial": self.lr_initial,
            "lr_steps": [list(s) for s in self.lr_steps],
            "finetune_lr": [list(s) for s in self.finetune_lr],
        }

    @classmethod
    def from_json(cls, obj):
        return cls(
            soft_epochs=obj["soft_epochs"],
            finetune_epochs=obj["finetune_epochs"],
            lr_initial=obj["lr_initial"],
            lr_steps=tuple(tuple(s) for s in obj["lr_steps"]),
            finetune_lr=tuple(tuple(s) for s in obj["finetune_lr"]),
        )


def _check_steps(steps, lo, hi, label):
    prev = None
    for epoch, value in steps:
        if not lo <= epoch < hi:
            raise ValueError(f"{label}: epoch {epoch} outside [{lo}, {hi})")
        if prev is not None and epoch <= prev:
            raise ValueError(f"{label}: epochs must be strictly increasing")
        if value <= 0:
            raise ValueError(f"{label}: rates and factors must be positive")
        prev = epoch


@dataclass(frozen=True)
class PruneConfig:
    theta: float = 0.1
    criterion: Criterion = Criterion.FPGM
    prunable_layers: PrunablePolicy = field(default_factory=PrunablePolicy)
    schedule: SfpSchedule = field(default_factory=SfpSchedule)

    def __post_init__(self):
        object.__setattr__(self, "theta", check_theta(self.theta))
        object.__setattr__(self, "criterion", Criterion.parse(self.criterion))

    def to_json(self):
        return {
            "theta": self.theta,
            "criterion": self.criterion.value,
            "policy": self.prunable_layers.to_json(),
            "schedule": self.schedule.to_json(),
        }

    @classmethod
    def from_json(cls, obj):
        return cls(
            theta=obj["theta"],
            criterion=obj["criterion"],
            prunable_layers=PrunablePolicy.from_json(obj["policy"]),
            schedule=SfpSchedule.from_json(obj["schedule"]),
        )


@dataclass(frozen=True)
class PruneMask:
    layer_name: str
    keep: tuple[bool, ...]
    epoch: int
    criterion: Criterion
    theta: float

    @property
    def pruned_indices(self):
        return tuple(i for i, k in enumerate(self.keep) if not k)

    @property
    def n(self):
        return len(self.keep)

    def keep_array(self) -> np.ndarray:
        return np.array(self.keep, dtype=bool)


class Phase(str, enum.Enum):
    SOFT = "soft"
    HARD_FINETUNE = "hard_finetune"
    DONE = "done"


@dataclass(frozen=True)
class LrDirective:
    lr: float
    freeze_pruned: bool


@dataclass(frozen=True)
class SfpState:
    phase: Phase
    epoch: int
    masks: dict
    config: PruneConfig

    @classmethod
    def start(cls, config: PruneConfig) -> "SfpState":
        return cls(Phase.SOFT, 0, {}, config)

    @property
    def finetune_offset(self) -> int:
        return self.epoch - self.config.schedule.soft_epochs


def prunable_layer_names(weights: WeightContainer, policy: PrunablePolicy):
    return [name for name, t in weights if len(t.shape) == 4 and policy.matches(name)]


def derive_masks(weights: WeightContainer, config: PruneConfig, epoch: int) -> dict:
    names = prunable_layer_names(weights, config.prunable_layers)
    if not names:
        raise NoPrunableLayersError(
            "no layer matches the prunable policy "
            f"(include={list(config.prunable_layers.include_patterns)}, "
            f"exclude={list(config.prunable_layers.exclude_patterns)})"
        )
    masks = {}
    for name in names:
        bank = as_filter_bank(weights[name], name)
        sel = select(score(bank, config.criterion), config.theta)
        keep = [True] * bank.n
        for i in sel.pruned_indices:
            keep[i] = False
        masks[name] = PruneMask(name, tuple(keep), epoch, config.criterion, config.theta)
    return masks


def apply_masks(weights: WeightContainer, masks: dict) -> WeightContainer:
    updates = {}
    for name, mask in masks.items():
        if name not in weights:
            raise KeyError(f"mask for unknown layer {name!r}")
        t = weights[name]
        if mask.n != t.shape[0]:
            raise ValueError(
                f"mask for {name!r} has {mask.n} entries, layer has {t.shape[0]} filters"
            )
        if all(mask.keep):
            continue
        arr = np.array(t.array)
        arr[~mask.keep_array()] = 0.0
        updates[name] = Tensor(arr)
    return weights.replace(updates) if updates else weights


def initial_directive(state: SfpState) -> LrDirective:
    """Learning rate and freeze flag for the first training epoch."""
    return _directive(state)


def _directive(state: SfpState) -> LrDirective:
    sched = state.config.schedule
    if state.phase is Phase.SOFT:
        return LrDirective(sched.soft_lr(state.epoch), False)
    offset = min(state.finetune_offset, sched.finetune_epochs - 1)
    return LrDirective(sched.finetune_lr_at(offset), True)


def step_epoch(state: SfpState, weights: WeightContainer):
    """Advance one epoch boundary; returns ``(state, weights, directive)``.

    The directive applies to the epoch that starts after this boundary.
    """
    sched = state.config.schedule
    if state.phase is Phase.DONE:
        raise RuntimeError("step_epoch called on a finished SFP run")
    if state.phase is Phase.SOFT:
        masks = derive_masks(weights, state.config, state.epoch)
        weights = apply_masks(weights, masks)
        epoch = state.epoch + 1
        phase = Phase.HARD_FINETUNE if epoch >= sched.soft_epochs else Phase.SOFT
    else:
        masks = state.masks
        weights = apply_masks(weights, masks)
        epoch = state.epoch + 1
        phase = Phase.DONE if epoch >= sched.soft_epochs + sched.finetune_epochs else Phase.HARD_FINETUNE
    new_state = replace(state, phase=phase, epoch=epoch, masks=masks)
    return new_state, weights, _directive(new_state)


def zero_filter_count(weights: WeightContainer, name: str) -> int:
    arr = weights[name].array
    return int((arr.reshape(arr.shape[0], -1) == 0).all(axis=1).sum())


def state_to_json(state: SfpState):
    first = next(iter(state.masks.values()), None)
    return {
        "phase": state.phase.value,
        "epoch": state.epoch,
        "mask_epoch": first.epoch if first else None,
        "masks": {name: list(m.keep) for name, m in state.masks.items()},
        "config": state.config.to_json(),
    }


def state_from_json(obj) -> SfpState:
    config = PruneConfig.from_json(obj["config"])
    masks = {
        name: PruneMask(name, tuple(bool(b) for b in keep), obj["mask_epoch"], config.criterion, config.theta)
        for name, keep in obj["masks"].items()
    }
    return SfpState(Phase(obj["phase"]), int(obj["epoch"]), masks, config)


def save_checkpoint(state: SfpState, weights: WeightContainer, run) -> tuple[Path, Path]:
    """Write ``<run>.sfp.json`` and ``<run>.pktc``; ``run`` is a path stem."""
    run = Path(run)
    state_path = run.with_name(run.name + ".sfp.json")
    weights_path = run.with_name(run.name + ".pktc")
    state_path.write_text(json.dumps(state_to_json(state), indent=2) + "\n")
    write_container(weights, weights_path)
    return state_path, weights_path


def load_checkpoint(run) -> tuple[SfpState, WeightContainer]:
    run = Path(run)
    state = state_from_json(json.loads(run.with_name(run.name + ".sfp.json").read_text()))
    return state, read_container(run.with_name(run.name + ".pktc"))
