"""Model layout, prunability policy, parameter counts and real sparsity."""
from __future__ import annotations

import enum
import fnmatch
import json
import math
from dataclasses import dataclass, field, replace
from pathlib import Path

from .criteria import Criterion, Selection, check_theta


class LayerKind(str, enum.Enum):
    CONV = "conv"
    OTHER = "other"


@dataclass(frozen=True)
class LayerSpec:
    name: str
    shape: tuple[int, ...]
    kind: LayerKind = LayerKind.OTHER
    prunable: bool = False
    # name of the layer consuming this layer's output channels, or its shape
    downstream: str | tuple[int, ...] | None = None

    def __post_init__(self):
        object.__setattr__(self, "shape", tuple(int(s) for s in self.shape))
        object.__setattr__(self, "kind", LayerKind(self.kind))
        if not self.shape or any(s < 1 for s in self.shape):
            raise ValueError(f"layer {self.name!r}: invalid shape {list(self.shape)}")
        if self.kind is LayerKind.CONV and len(self.shape) != 4:
            raise ValueError(f"conv layer {self.name!r} must be 4-D, got {list(self.shape)}")
        if self.prunable and self.kind is not LayerKind.CONV:
            raise ValueError(f"only conv layers can be prunable ({self.name!r})")
        if isinstance(self.downstream, list):
            object.__setattr__(self, "downstream", tuple(self.downstream))

    @property
    def params(self) -> int:
        return math.prod(self.shape)

    @property
    def n(self) -> int:
        return self.shape[0]


@dataclass(frozen=True)
class ModelSpec:
    name: str
    layers: tuple[LayerSpec, ...] = ()

    def __post_init__(self):
        object.__setattr__(self, "layers", tuple(self.layers))
        names = [layer.name for layer in self.layers]
        if len(set(names)) != len(names):
            raise ValueError(f"model {self.name!r} has duplicate layer names")

    def layer(self, name) -> LayerSpec:
        for layer in self.layers:
            if layer.name == name:
                return layer
        raise KeyError(name)

    def prunable_layers(self):
        return [layer for layer in self.layers if layer.prunable]

    def to_json(self):
        rows = []
        for layer in self.layers:
            row = {"name": layer.name, "shape": list(layer.shape), "kind": layer.kind.value}
            if layer.downstream is not None:
                ds = layer.downstream
                row["downstream"] = ds if isinstance(ds, str) else list(ds)
            rows.append(row)
        return {"name": self.name, "layers": rows}

    @classmethod
    def from_json(cls, obj):
        layers = [
            LayerSpec(
                name=row["name"],
                shape=tuple(row["shape"]),
                kind=LayerKind(row.get("kind", "other")),
                downstream=row.get("downstream"),
            )
            for row in obj["layers"]
        ]
        return cls(obj["name"], tuple(layers))

    @classmethod
    def from_container(cls, container, name=None):
        """Describe a weight container: 4-D tensors become conv layers."""
        layers = [
            LayerSpec(n, t.shape, LayerKind.CONV if len(t.shape) == 4 else LayerKind.OTHER)
            for n, t in container
        ]
        return cls(name or container.metadata.get("model", "model"), tuple(layers))


def load_spec(path) -> ModelSpec:
    return ModelSpec.from_json(json.loads(Path(path).read_text()))


def save_spec(spec: ModelSpec, path) -> None:
    Path(path).write_text(json.dumps(spec.to_json(), indent=2) + "\n")


@dataclass(frozen=True)
class PrunablePolicy:
    """Glob include/exclude rules over layer names; exclusion wins."""

    include_patterns: tuple[str, ...] = ("*",)
    exclude_patterns: tuple[str, ...] = ()

    def __post_init__(self):
        object.__setattr__(self, "include_patterns", tuple(self.include_patterns))
        object.__setattr__(self, "exclude_patterns", tuple(self.exclude_patterns))
        for pat in self.include_patterns + self.exclude_patterns:
            if not isinstance(pat, str) or not pat:
                raise ValueError(f"invalid name pattern {pat!r}")

    def matches(self, name: str) -> bool:
        return any(fnmatch.fnmatchcase(name, p) for p in self.include_patterns) and not any(
            fnmatch.fnmatchcase(name, p) for p in self.exclude_patterns
        )

    def to_json(self):
        return {"include": list(self.include_patterns), "exclude": list(self.exclude_patterns)}

    @classmethod
    def from_json(cls, obj):
        return cls(tuple(obj.get("include", ("*",))), tuple(obj.get("exclude", ())))


def count_params(spec: ModelSpec) -> int:
    return sum(layer.params for layer in spec.layers)


def real_sparsity(original_params: int, remaining_params: int) -> float:
    if original_params <= 0:
        raise ValueError("original_params must be positive")
    if not 0 <= remaining_params <= original_params:
        raise ValueError(
            f"remaining_params must lie in [0, {original_params}], got {remaining_params}"
        )
    return (original_params - remaining_params) / original_params


def removed_params_for(layer: LayerSpec, pruned_count: int, downstream=None) -> int:
    """Parameters removed by dropping ``pruned_count`` filters of ``layer``.

    ``downstream`` is the shape of the layer fed by these channels; each
    removed channel also removes ``out * kh * kw`` of its weights.
    """
    if layer.kind is not LayerKind.CONV:
        raise ValueError(f"layer {layer.name!r} is not a conv layer")
    if not 0 <= pruned_count <= layer.n:
        raise ValueError(f"pruned_count {pruned_count} outside [0, {layer.n}] for {layer.name!r}")
    _, c, kh, kw = layer.shape
    removed = pruned_count * c * kh * kw
    if downstream is not None:
        ds = tuple(downstream)
        per_channel = ds[0] * math.prod(ds[2:]) if len(ds) > 2 else ds[0]
        removed += pruned_count * per_channel
    return removed


def apply_policy(spec: ModelSpec, policy: PrunablePolicy) -> ModelSpec:
    layers = tuple(
        replace(layer, prunable=layer.kind is LayerKind.CONV and policy.matches(layer.name))
        for layer in spec.layers
    )
    return replace(spec, layers=layers)


@dataclass(frozen=True)
class LayerRow:
    name: str
    n: int
    pruned_count: int
    layer_params_removed: int

    def to_json(self):
        return {
            "name": self.name,
            "n": self.n,
            "pruned_count": self.pruned_count,
            "layer_params_removed": self.layer_params_removed,
        }


@dataclass(frozen=True)
class PruneReport:
    model: str
    criterion: Criterion
    theta: float
    original_params: int
    remaining_params: int
    real_sparsity: float
    per_layer: tuple[LayerRow, ...] = field(default=())

    def to_json(self):
        return {
            "model": self.model,
            "criterion": self.criterion.value,
            "theta": self.theta,
            "original_params": self.original_params,
            "remaining_params": self.remaining_params,
            "real_sparsity": self.real_sparsity,
            "per_layer": [row.to_json() for row in self.per_layer],
        }

    @classmethod
    def from_json(cls, obj):
        return cls(
            model=obj["model"],
            criterion=Criterion.parse(obj["criterion"]),
            theta=float(obj["theta"]),
            original_params=int(obj["original_params"]),
            remaining_params=int(obj["remaining_params"]),
            real_sparsity=float(obj["real_sparsity"]),
            per_layer=tuple(LayerRow(**row) for row in obj["per_layer"]),
        )

    def method_label(self) -> str:
        return f"{self.criterion.value.upper()} {self.theta * 100:g}%"

    def to_table(self) -> str:
        """Fixed-width text table, one row per report, like a results table."""
        counts = ", ".join(f"{r.name}:{r.pruned_count}/{r.n}" for r in self.per_layer) or "-"
        headers = ("Method", "Pruned filters", "# of Parameters", "Real Sparsity")
        row = (
            self.method_label(),
            counts,
            f"{self.remaining_params:,}",
            f"{self.real_sparsity * 100:.2f}%",
        )
        orig = (f"{self.model} (original)", "-", f"{self.original_params:,}", "0.00%")
        widths = [max(len(a), len(b), len(c)) for a, b, c in zip(headers, row, orig)]

        def fmt(cells):
            return " | ".join(cell.ljust(w) for cell, w in zip(cells, widths)).rstrip()

        rule = "-+-".join("-" * w for w in widths)
        return "\n".join([fmt(headers), rule, fmt(orig), fmt(row)]) + "\n"


def _downstream_shape(spec: ModelSpec, layer: LayerSpec, selections):
    ds = layer.downstream
    if ds is None:
        return None
    if isinstance(ds, str):
        shape = spec.layer(ds).shape
        if ds in selections:
            # the downstream's own pruned filters are already counted whole
            shape = (shape[0] - len(selections[ds].pruned_indices),) + shape[1:]
        return shape
    return ds


def build_report(spec: ModelSpec, selections, config) -> PruneReport:
    """Summarize ``selections`` (layer name -> :class:`Selection`) against ``spec``.

    ``config`` only needs ``theta`` and ``criterion`` attributes. Every
    prunable layer must have a selection and nothing else may.
    """
    criterion = Criterion.parse(config.criterion)
    theta = check_theta(config.theta)
    prunable = {layer.name for layer in spec.prunable_layers()}
    for name in selections:
        if name not in prunable:
            try:
                spec.layer(name)
            except KeyError:
                raise ValueError(f"selection for unknown layer {name!r}") from None
            raise ValueError(f"selection for non-prunable layer {name!r}")
    missing = prunable - set(selections)
    if missing:
        raise ValueError(f"no selection for prunable layers {sorted(missing)}")

    rows = []
    for layer in spec.layers:
        if not layer.prunable:
            continue
        sel: Selection = selections[layer.name]
        if sel.n != layer.n:
            raise ValueError(
                f"selection for {layer.name!r} covers {sel.n} filters, layer has {layer.n}"
            )
        pruned = len(sel.pruned_indices)
        removed = removed_params_for(layer, pruned, _downstream_shape(spec, layer, selections))
        rows.append(LayerRow(layer.name, layer.n, pruned, removed))

    original = count_params(spec)
    remaining = original - sum(r.layer_params_removed for r in rows)
    return PruneReport(
        model=spec.name,
        criterion=criterion,
        theta=theta,
        original_params=original,
        remaining_params=remaining,
        real_sparsity=real_sparsity(original, remaining),
        per_layer=tuple(rows),
    )
