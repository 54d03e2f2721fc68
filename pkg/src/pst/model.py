"""Networks built from layer specs, per-unit views and the segment map.

A *unit* is the smallest thing that can be frozen: one output filter of a
conv layer (its kernel slice, its bias and the matching batch-norm channel)
or one output neuron of a dense/classifier layer (weight row plus bias).
"""
from __future__ import annotations

from dataclasses import dataclass, field
from typing import Iterable, Mapping

import numpy as np

from . import numerics as nx
from .errors import CapacityError, ConfigError, ContractError, DimensionError

LAYER_KINDS = ("conv", "batchnorm", "relu", "pool", "dense", "classifier")
UNIT_KINDS = ("conv", "dense", "classifier")
FREE = -1


@dataclass(frozen=True)
class LayerSpec:
    kind: str
    out: int | None = None
    kernel: int = 3
    stride: int = 1
    padding: int | None = None  # None means "same" for stride 1
    size: int = 2

    @classmethod
    def from_dict(cls, d: Mapping) -> "LayerSpec":
        d = dict(d)
        kind = d.pop("kind", None)
        if kind not in LAYER_KINDS:
            raise ConfigError(f"unknown layer kind {kind!r}")
        try:
            return cls(kind=kind, **d)
        except TypeError as exc:
            raise ConfigError(f"layer {kind}: {exc}") from None

    def to_dict(self) -> dict:
        d = {"kind": self.kind}
        if self.kind in ("conv", "dense"):
            d["out"] = self.out
        if self.kind == "conv":
            d.update(kernel=self.kernel, stride=self.stride, padding=self.padding)
        if self.kind == "pool":
            d["size"] = self.size
        return d


REFERENCE_LAYERS = (
    LayerSpec("conv", out=16), LayerSpec("batchnorm"), LayerSpec("relu"),
    LayerSpec("conv", out=32), LayerSpec("batchnorm"), LayerSpec("relu"),
    LayerSpec("pool", size=2),
    LayerSpec("dense", out=128), LayerSpec("relu"),
    LayerSpec("classifier"),
)


def classifier_width(planned_total_classes: int) -> int:
    """ceil(1.2 * classes), computed in integers to dodge float round-up."""
    return -(-12 * planned_total_classes // 10)


@dataclass
class Layer:
    spec: LayerSpec
    in_shape: tuple[int, ...]
    out_shape: tuple[int, ...]
    params: dict[str, nx.Tensor] = field(default_factory=dict)
    stats: nx.RunningStats | None = None
    owner: int | None = None  # for batchnorm: index of the unit layer it belongs to

    @property
    def units(self) -> int:
        if self.spec.kind == "conv":
            return self.out_shape[0]
        if self.spec.kind in ("dense", "classifier"):
            return self.out_shape[0]
        return 0


@dataclass(frozen=True, order=True)
class UnitRef:
    layer_index: int
    unit_index: int
    kind: str = "neuron"  # "filter" | "neuron"


class Network:
    """An ordered stack of layers with named parameter tensors."""

    def __init__(self, input_shape, layers: list[Layer], planned_total_classes: int):
        self.input_shape = tuple(input_shape)
        self.layers = layers
        self.planned_total_classes = planned_total_classes

    @property
    def specs(self) -> list[LayerSpec]:
        return [l.spec for l in self.layers]

    @property
    def num_outputs(self) -> int:
        return self.layers[-1].out_shape[0]

    @property
    def classifier_index(self) -> int:
        return len(self.layers) - 1

    def unit_layers(self) -> list[int]:
        return [i for i, l in enumerate(self.layers) if l.spec.kind in UNIT_KINDS]

    def bn_of(self, li: int) -> int | None:
        for j, l in enumerate(self.layers):
            if l.spec.kind == "batchnorm" and l.owner == li:
                return j
        return None

    def parameters(self) -> dict[str, nx.Tensor]:
        out = {}
        for l in self.layers:
            out.update(l.params)
        return out

    def param_count(self) -> int:
        return sum(p.size for p in self.parameters().values())


def build_network(layer_specs: Iterable[LayerSpec | Mapping], input_shape,
                  planned_total_classes: int, seed: int | np.random.Generator = 0):
    """Build a network and an all-free segment map.

    The classifier gets ``ceil(1.2 * planned_total_classes)`` rows. Weights
    are He-normal (std ``sqrt(2/fan_in)``), biases and BN shifts zero, BN
    scales one.
    """
    specs = [s if isinstance(s, LayerSpec) else LayerSpec.from_dict(s) for s in layer_specs]
    if not specs or specs[-1].kind != "classifier":
        raise ConfigError("the last layer must be the classifier")
    if sum(s.kind == "classifier" for s in specs) != 1:
        raise ConfigError("exactly one classifier layer is required")
    if planned_total_classes < 1:
        raise ConfigError("planned_total_classes must be positive")
    rng = seed if isinstance(seed, np.random.Generator) else np.random.default_rng(seed)

    shape = tuple(int(s) for s in input_shape)
    layers: list[Layer] = []
    last_unit: int | None = None
    for i, spec in enumerate(specs):
        kind = spec.kind
        if kind == "conv":
            if len(shape) != 3:
                raise ConfigError(f"layer {i}: conv needs a C×H×W input, got {shape}")
            if not spec.out or spec.out < 1:
                raise ConfigError(f"layer {i}: conv needs a positive 'out'")
            c, h, w = shape
            pad = (spec.kernel - 1) // 2 if spec.padding is None else spec.padding
            if spec.kernel > h + 2 * pad or spec.kernel > w + 2 * pad or spec.stride < 1:
                raise ConfigError(f"layer {i}: kernel {spec.kernel} does not fit input {shape}")
            spec = LayerSpec("conv", out=spec.out, kernel=spec.kernel, stride=spec.stride, padding=pad)
            ho = (h + 2 * pad - spec.kernel) // spec.stride + 1
            wo = (w + 2 * pad - spec.kernel) // spec.stride + 1
            out_shape = (spec.out, ho, wo)
            last_unit = i
        elif kind == "batchnorm":
            if last_unit is None or layers[-1].spec.kind not in ("conv", "dense"):
                raise ConfigError(f"layer {i}: batchnorm must directly follow a conv or dense layer")
            out_shape = shape
        elif kind == "relu":
            out_shape = shape
        elif kind == "pool":
            if len(shape) != 3 or shape[1] % spec.size or shape[2] % spec.size:
                raise ConfigError(f"layer {i}: pool size {spec.size} does not divide {shape}")
            out_shape = (shape[0], shape[1] // spec.size, shape[2] // spec.size)
        elif kind == "dense":
            if not spec.out or spec.out < 1:
                raise ConfigError(f"layer {i}: dense needs a positive 'out'")
            out_shape = (spec.out,)
            last_unit = i
        else:  # classifier
            out_shape = (classifier_width(planned_total_classes),)
            last_unit = i
        layer = Layer(spec, shape, out_shape)
        if kind == "batchnorm":
            layer.owner = last_unit
        layers.append(layer)
        shape = out_shape

    net = Network(input_shape, layers, planned_total_classes)
    _init_params(net, rng)
    return net, SegmentMap.for_network(net)


def _fan_in(layer: Layer) -> int:
    return int(np.prod(layer.in_shape))


def _init_params(net: Network, rng: np.random.Generator) -> None:
    for i, layer in enumerate(net.layers):
        kind = layer.spec.kind
        if kind == "conv":
            o, (c, _, _), k = layer.out_shape[0], layer.in_shape, layer.spec.kernel
            std = np.sqrt(2.0 / (c * k * k))
            layer.params = {
                f"{i}.weight": nx.Tensor(rng.standard_normal((o, c, k, k)) * std, True, f"{i}.weight"),
                f"{i}.bias": nx.Tensor(np.zeros(o), True, f"{i}.bias"),
            }
        elif kind in ("dense", "classifier"):
            o, fan = layer.out_shape[0], _fan_in(layer)
            std = np.sqrt(2.0 / fan)
            layer.params = {
                f"{i}.weight": nx.Tensor(rng.standard_normal((o, fan)) * std, True, f"{i}.weight"),
                f"{i}.bias": nx.Tensor(np.zeros(o), True, f"{i}.bias"),
            }
        elif kind == "batchnorm":
            c = layer.in_shape[0]
            layer.params = {
                f"{i}.scale": nx.Tensor(np.ones(c), True, f"{i}.scale"),
                f"{i}.shift": nx.Tensor(np.zeros(c), True, f"{i}.shift"),
            }
            layer.stats = nx.RunningStats.fresh(c)


def reinit_units(net: Network, units: Iterable[UnitRef], rng: np.random.Generator) -> None:
    """Redraw the given units with the same initializer family as ``build_network``."""
    for u in sorted(units):
        layer = net.layers[u.layer_index]
        view = unit_parameters(net, u)
        w = view["weight"]
        if layer.spec.kind == "conv":
            c, k = layer.in_shape[0], layer.spec.kernel
            std = np.sqrt(2.0 / (c * k * k))
        else:
            std = np.sqrt(2.0 / _fan_in(layer))
        w[...] = rng.standard_normal(w.shape) * std
        view["bias"][...] = 0.0
        if "bn_scale" in view:
            view["bn_scale"][...] = 1.0
            view["bn_shift"][...] = 0.0
            bn = net.layers[net.bn_of(u.layer_index)]
            bn.stats.mean[u.unit_index] = 0.0
            bn.stats.var[u.unit_index] = 1.0


def forward(net: Network, batch, mode: str = "eval", segmap: "SegmentMap | None" = None) -> nx.Tensor:
    """Logits over the full reserved classifier width.

    In ``"train"`` mode batch-norm normalizes with batch statistics; when a
    segment map is given, running statistics of frozen channels stay put.
    ``"eval"`` uses running statistics and mutates nothing.
    """
    x = batch if isinstance(batch, nx.Tensor) else nx.Tensor(batch)
    n = x.shape[0]
    if tuple(x.shape[1:]) != net.input_shape:
        if int(np.prod(x.shape[1:])) != int(np.prod(net.input_shape)):
            raise DimensionError(f"batch shape {x.shape[1:]} does not match input {net.input_shape}")
        x = nx.reshape(x, (n,) + net.input_shape)
    for i, layer in enumerate(net.layers):
        kind = layer.spec.kind
        p = layer.params
        if kind == "conv":
            x = nx.conv2d(x, p[f"{i}.weight"], p[f"{i}.bias"],
                          stride=layer.spec.stride, padding=layer.spec.padding)
        elif kind == "batchnorm":
            if mode == "eval":
                x = nx.batchnorm(x, p[f"{i}.scale"], p[f"{i}.shift"], layer.stats, "eval")
            elif segmap is not None:
                x = nx.batchnorm(x, p[f"{i}.scale"], p[f"{i}.shift"], layer.stats,
                                 "stats_frozen", frozen=segmap.frozen(layer.owner))
            else:
                x = nx.batchnorm(x, p[f"{i}.scale"], p[f"{i}.shift"], layer.stats, "train")
        elif kind == "relu":
            x = nx.relu(x)
        elif kind == "pool":
            x = nx.avg_pool2d(x, layer.spec.size)
        else:
            if x.data.ndim != 2:
                x = nx.reshape(x, (n, -1))
            x = nx.dense(x, p[f"{i}.weight"], p[f"{i}.bias"])
    return x


def _check_unit(net: Network, unit: UnitRef) -> Layer:
    if not 0 <= unit.layer_index < len(net.layers):
        raise ContractError(f"layer index {unit.layer_index} out of range")
    layer = net.layers[unit.layer_index]
    if layer.spec.kind not in UNIT_KINDS:
        raise ContractError(f"layer {unit.layer_index} ({layer.spec.kind}) has no units")
    if not 0 <= unit.unit_index < layer.units:
        raise ContractError(f"unit {unit.unit_index} out of range for layer {unit.layer_index}")
    return layer


def unit_ref(net: Network, li: int, ui: int) -> UnitRef:
    return UnitRef(li, ui, "filter" if net.layers[li].spec.kind == "conv" else "neuron")


def unit_parameters(net: Network, unit: UnitRef) -> dict[str, np.ndarray]:
    """Writable numpy views of everything a unit owns."""
    layer = _check_unit(net, unit)
    li, o = unit.layer_index, unit.unit_index
    view = {
        "weight": layer.params[f"{li}.weight"].data[o],
        "bias": layer.params[f"{li}.bias"].data[o:o + 1],
    }
    bi = net.bn_of(li)
    if bi is not None:
        view["bn_scale"] = net.layers[bi].params[f"{bi}.scale"].data[o:o + 1]
        view["bn_shift"] = net.layers[bi].params[f"{bi}.shift"].data[o:o + 1]
    return view


def unit_size(net: Network, li: int) -> int:
    """Number of parameter elements owned by one unit of layer ``li``."""
    return sum(v.size for v in unit_parameters(net, unit_ref(net, li, 0)).values())


class SegmentMap:
    """Per-unit ownership: ``-1`` for free, otherwise the freezing task id."""

    def __init__(self, owners: dict[int, np.ndarray]):
        self.owners = owners

    @classmethod
    def for_network(cls, net: Network) -> "SegmentMap":
        return cls({li: np.full(net.layers[li].units, FREE, dtype=np.int64)
                    for li in net.unit_layers()})

    def copy(self) -> "SegmentMap":
        return SegmentMap({k: v.copy() for k, v in self.owners.items()})

    def frozen(self, li: int) -> np.ndarray:
        return self.owners[li] != FREE

    def free_units(self, li: int) -> np.ndarray:
        return np.flatnonzero(self.owners[li] == FREE)

    def free_count(self, li: int) -> int:
        return int(np.sum(self.owners[li] == FREE))

    def owner(self, unit: UnitRef) -> int:
        return int(self.owners[unit.layer_index][unit.unit_index])

    def units_of(self, task_id: int) -> list[tuple[int, int]]:
        return [(li, int(u)) for li, arr in self.owners.items() for u in np.flatnonzero(arr == task_id)]

    def frozen_fraction(self, li: int | None = None) -> float:
        if li is not None:
            return float(np.mean(self.frozen(li)))
        total = sum(a.size for a in self.owners.values())
        return sum(int(np.sum(a != FREE)) for a in self.owners.values()) / total

    def freeze(self, units: Iterable[UnitRef], task_id: int) -> "SegmentMap":
        if task_id < 0:
            raise ContractError("task ids must be non-negative")
        units = list(units)
        for u in units:
            arr = self.owners.get(u.layer_index)
            if arr is None or not 0 <= u.unit_index < arr.size:
                raise ContractError(f"no such unit {u}")
            if arr[u.unit_index] != FREE:
                raise ContractError(f"unit {u} already frozen by task {arr[u.unit_index]}")
        for u in units:
            self.owners[u.layer_index][u.unit_index] = task_id
        return self

    def __eq__(self, other):
        return (isinstance(other, SegmentMap) and self.owners.keys() == other.owners.keys()
                and all(np.array_equal(v, other.owners[k]) for k, v in self.owners.items()))


def freeze_units(segmap: SegmentMap, units: Iterable[UnitRef], task_id: int) -> SegmentMap:
    return segmap.freeze(units, task_id)


def build_freeze_mask(segmap: SegmentMap, net: Network) -> dict[str, np.ndarray]:
    """Boolean mask per parameter, True where the element belongs to a frozen unit."""
    mask = {name: np.zeros(p.shape, dtype=bool) for name, p in net.parameters().items()}
    for li, owners in segmap.owners.items():
        frozen = owners != FREE
        mask[f"{li}.weight"][frozen] = True
        mask[f"{li}.bias"][frozen] = True
        bi = net.bn_of(li)
        if bi is not None:
            mask[f"{bi}.scale"][frozen] = True
            mask[f"{bi}.shift"][frozen] = True
    return mask


def trainable_only(net: Network, units: Iterable[UnitRef]) -> dict[str, np.ndarray]:
    """A freeze mask that leaves exactly ``units`` trainable and everything else frozen."""
    mask = {name: np.ones(p.shape, dtype=bool) for name, p in net.parameters().items()}
    for u in units:
        li, o = u.layer_index, u.unit_index
        mask[f"{li}.weight"][o] = False
        mask[f"{li}.bias"][o] = False
        bi = net.bn_of(li)
        if bi is not None:
            mask[f"{bi}.scale"][o] = False
            mask[f"{bi}.shift"][o] = False
    return mask


def merge_masks(*masks: Mapping[str, np.ndarray]) -> dict[str, np.ndarray]:
    out = {k: v.copy() for k, v in masks[0].items()}
    for m in masks[1:]:
        for k, v in m.items():
            out[k] |= v
    return out


def all_units(net: Network, layers: Iterable[int] | None = None) -> list[UnitRef]:
    layers = net.unit_layers() if layers is None else layers
    return [unit_ref(net, li, o) for li in layers for o in range(net.layers[li].units)]


def check_rows_available(net: Network, classes: Iterable[int]) -> None:
    width = net.num_outputs
    bad = [c for c in classes if c >= width]
    if bad:
        raise CapacityError(f"classifier has {width} rows; cannot host class indices {bad}")
