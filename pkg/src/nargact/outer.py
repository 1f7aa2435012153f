"""Outer MLP/CNN classifiers hosting the shared activation net, plus parameter accounting."""

from __future__ import annotations

import math
from dataclasses import dataclass, field, replace

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor
from .inner import HIDDEN, InnerNet, apply_activation

MLP_WIDTHS = (64, 64, 64)
CONV_MAPS = (60, 120, 120, 120)


class ConfigurationError(ValueError):
    pass


@dataclass(frozen=True)
class OuterSpec:
    kind: str = "mlp"  # "mlp" | "conv"
    input_shape: tuple[int, ...] = (1, 28, 28)
    classes: int = 10
    widths: tuple[int, ...] = MLP_WIDTHS
    arity: int = 2
    activation: str = "inner"  # "inner" | "relu"
    dropout: float = 0.5
    layer_norm: bool = True

    def __post_init__(self):
        if self.kind not in ("mlp", "conv"):
            raise ConfigurationError(f"unknown network kind {self.kind!r}")
        if self.activation not in ("inner", "relu"):
            raise ConfigurationError(f"unknown activation {self.activation!r}")
        if self.kind == "conv" and len(self.input_shape) != 3:
            raise ConfigurationError(f"conv nets need (C, H, W) input, got {self.input_shape}")
        if not self.widths:
            raise ConfigurationError("at least one hidden layer is required")

    @property
    def input_dim(self) -> int:
        return int(np.prod(self.input_shape))

    @property
    def fan(self) -> int:
        """Preactivations produced per hidden unit."""
        return self.arity if self.activation == "inner" else 1

    @classmethod
    def default_mlp(cls, arity=2, input_shape=(1, 28, 28), **kw) -> "OuterSpec":
        return cls(kind="mlp", input_shape=tuple(input_shape), widths=MLP_WIDTHS, arity=arity, **kw)

    @classmethod
    def default_conv(cls, arity=2, input_shape=(3, 32, 32), **kw) -> "OuterSpec":
        return cls(kind="conv", input_shape=tuple(input_shape), widths=CONV_MAPS, arity=arity, **kw)


def spatial_sizes(spec: OuterSpec) -> list[int]:
    """Side length after each same-padded conv + 2x2/2 pool stage."""
    if spec.kind != "conv":
        return []
    s = spec.input_shape[1]
    out = []
    for _ in spec.widths:
        s = (s - 2) // 2 + 1
        out.append(s)
    return out


@dataclass
class ParamCount:
    input_layer: int
    hidden_stack: int
    output_layer: int
    inner_net: int
    layer_norm: int
    reference_formula: int | None = None

    @property
    def total(self) -> int:
        return self.input_layer + self.hidden_stack + self.output_layer + self.inner_net + self.layer_norm

    @property
    def total_without_layer_norm(self) -> int:
        return self.total - self.layer_norm

    @property
    def formula_deviation(self) -> float | None:
        """|instantiated (no layer norm) - formula| / formula."""
        if self.reference_formula is None:
            return None
        return abs(self.total_without_layer_norm - self.reference_formula) / self.reference_formula

    def as_dict(self) -> dict:
        return {
            "input_layer": self.input_layer,
            "hidden_stack": self.hidden_stack,
            "output_layer": self.output_layer,
            "inner_net": self.inner_net,
            "layer_norm": self.layer_norm,
            "total": self.total,
            "reference_formula": self.reference_formula,
        }


def reference_formula(x: int, widths, y: int, n: int) -> int:
    """x(n h1 + 1) + sum n h_l h_{l+1} + h_L y + (65 n + 4288)."""
    h = list(widths)
    hidden = sum(n * h[i] * h[i + 1] for i in range(len(h) - 1))
    return x * (n * h[0] + 1) + hidden + h[-1] * y + (65 * n + 4288)


def param_count(spec: OuterSpec) -> ParamCount:
    f = spec.fan
    w = list(spec.widths)
    if spec.kind == "mlp":
        sizes = [spec.input_dim] + w
        layers = [sizes[i] * f * w[i] + f * w[i] for i in range(len(w))]
        head = w[-1] * spec.classes + spec.classes
    else:
        chans = [spec.input_shape[0]] + w
        layers = [chans[i] * f * w[i] * 9 + f * w[i] for i in range(len(w))]
        side = spatial_sizes(spec)[-1]
        head = w[-1] * side * side * spec.classes + spec.classes
    ln = sum(2 * f * wi for wi in w) if spec.layer_norm else 0
    inner = InnerNet.count_params(spec.arity) if spec.activation == "inner" else 0
    formula = None
    if spec.kind == "mlp" and spec.activation == "inner":
        formula = reference_formula(spec.input_dim, w, spec.classes, spec.arity)
    return ParamCount(layers[0], sum(layers[1:]), head, inner, ln, formula)


def baseline_widths(widths, arity: int, beta: int) -> tuple[int, ...]:
    return tuple(math.floor(math.sqrt(arity) * h) + beta for h in widths)


@dataclass
class BaselineMatch:
    spec: OuterSpec
    beta: int
    proposed_params: int
    baseline_params: int

    @property
    def rel_mismatch(self) -> float:
        return abs(self.baseline_params - self.proposed_params) / self.proposed_params


def match_baseline(spec: OuterSpec, max_beta: int = 64, tolerance: float = 0.02) -> BaselineMatch:
    """ReLU baseline with widths floor(sqrt(n) h) + beta, beta scanned over [0, max_beta]."""
    if spec.activation != "inner":
        raise ConfigurationError("match_baseline expects a spec with the inner-net activation")
    target = param_count(spec).total
    best = None
    for beta in range(max_beta + 1):
        cand = replace(spec, activation="relu", widths=baseline_widths(spec.widths, spec.arity, beta))
        gap = abs(param_count(cand).total - target)
        if best is None or gap <= best[0]:
            best = (gap, beta, cand)
    gap, beta, cand = best
    match = BaselineMatch(cand, beta, target, param_count(cand).total)
    if match.rel_mismatch >= tolerance:
        raise ConfigurationError(
            f"no beta in [0, {max_beta}] matches {target} parameters within {tolerance:.0%} "
            f"(best beta={beta}, mismatch {match.rel_mismatch:.2%})"
        )
    return match


@dataclass
class Layer:
    weight: Tensor
    bias: Tensor
    ln_gain: Tensor | None = None
    ln_bias: Tensor | None = None

    def parameters(self) -> list[Tensor]:
        return [p for p in (self.weight, self.bias, self.ln_gain, self.ln_bias) if p is not None]


@dataclass
class OuterNet:
    """Instantiated classifier. ``inner`` is a reference to the shared activation net."""

    spec: OuterSpec
    layers: list[Layer]
    head: Layer
    inner: InnerNet | None = None
    training: bool = True
    taps: list | None = field(default=None, repr=False)

    @classmethod
    def build(cls, spec: OuterSpec, rng: np.random.Generator, inner: InnerNet | None = None) -> "OuterNet":
        if spec.activation == "inner":
            if inner is None:
                raise ConfigurationError("inner-net activation requires an InnerNet")
            if inner.arity != spec.arity:
                raise ConfigurationError(f"inner net arity {inner.arity} != spec arity {spec.arity}")
            inner.conv_mode = spec.kind == "conv"
        f = spec.fan
        layers = []
        prev = spec.input_dim if spec.kind == "mlp" else spec.input_shape[0]
        for w in spec.widths:
            shape = (prev, f * w) if spec.kind == "mlp" else (f * w, prev, 3, 3)
            layer = Layer(ad.init_xavier(shape, rng), Tensor(np.zeros(f * w), requires_grad=True))
            if spec.layer_norm:
                layer.ln_gain = Tensor(np.ones(f * w), requires_grad=True)
                layer.ln_bias = Tensor(np.zeros(f * w), requires_grad=True)
            layers.append(layer)
            prev = w
        if spec.kind == "conv":
            side = spatial_sizes(spec)[-1]
            prev = spec.widths[-1] * side * side
        head = Layer(ad.init_xavier((prev, spec.classes), rng), Tensor(np.zeros(spec.classes), requires_grad=True))
        return cls(spec, layers, head, inner if spec.activation == "inner" else None)

    def outer_parameters(self) -> list[Tensor]:
        out = []
        for layer in self.layers:
            out.extend(layer.parameters())
        out.extend(self.head.parameters())
        return out

    def named_outer_parameters(self) -> dict[str, Tensor]:
        named = {}
        for i, layer in enumerate(self.layers):
            named[f"layer{i}.weight"] = layer.weight
            named[f"layer{i}.bias"] = layer.bias
            if layer.ln_gain is not None:
                named[f"layer{i}.ln_gain"] = layer.ln_gain
                named[f"layer{i}.ln_bias"] = layer.ln_bias
        named["head.weight"] = self.head.weight
        named["head.bias"] = self.head.bias
        return named

    def parameters(self) -> list[Tensor]:
        params = self.outer_parameters()
        if self.inner is not None:
            params.extend(self.inner.parameters())
        return params

    def num_params(self) -> int:
        return sum(p.size for p in self.parameters())

    def train(self) -> "OuterNet":
        self.training = True
        return self

    def eval(self) -> "OuterNet":
        self.training = False
        return self

    def _activate(self, z: Tensor) -> Tensor:
        if self.taps is not None:
            self.taps.append(z.data.copy())
        if self.inner is None:
            return ad.relu(z)
        return apply_activation(self.inner, z)

    def forward(self, x, rng: np.random.Generator | None = None, training: bool | None = None) -> Tensor:
        training = self.training if training is None else training
        spec = self.spec
        x = np.asarray(x, dtype=np.float64)
        if spec.kind == "mlp":
            ok = x.ndim >= 2 and int(np.prod(x.shape[1:])) == spec.input_dim
        else:
            ok = x.shape[1:] == tuple(spec.input_shape)
        if not ok:
            raise ad.ShapeError(f"input shape {x.shape[1:]} does not match spec {spec.input_shape}")
        if spec.kind == "mlp":
            h = Tensor(x.reshape(x.shape[0], -1))
        else:
            h = Tensor(x.reshape((x.shape[0],) + tuple(spec.input_shape)))
        for layer in self.layers:
            if spec.kind == "mlp":
                z = ad.matmul(h, layer.weight) + layer.bias
            else:
                z = ad.conv2d(h, layer.weight, layer.bias, stride=1, padding=1)
            if layer.ln_gain is not None:
                z = ad.layernorm(z, layer.ln_gain, layer.ln_bias)
            h = ad.dropout(self._activate(z), spec.dropout, rng, training)
            if spec.kind == "conv":
                h = ad.maxpool2d(h, 2, 2)
        if spec.kind == "conv":
            h = ad.reshape(h, (h.shape[0], -1))
        return ad.matmul(h, self.head.weight) + self.head.bias

    def activation_sites(self) -> int:
        """Largest number of activation calls a single example makes in one layer."""
        if self.spec.kind == "mlp":
            return max(self.spec.widths)
        side = self.spec.input_shape[1]
        sizes = [side] + spatial_sizes(self.spec)[:-1]
        return max(w * s * s for w, s in zip(self.spec.widths, sizes))

    def safe_batch(self, requested: int, budget: int = 2**23) -> int:
        """Cap ``requested`` so one inner-net hidden tensor stays under ``budget`` floats."""
        per_example = self.activation_sites() * (HIDDEN if self.inner is not None else 1)
        return max(1, min(requested, budget // per_example))

    def predict_logits(self, x, batch_size: int = 256) -> np.ndarray:
        batch_size = self.safe_batch(batch_size)
        out = []
        with ad.no_grad():
            for i in range(0, len(x), batch_size):
                out.append(self.forward(x[i : i + batch_size], training=False).data)
        return np.concatenate(out, axis=0) if out else np.zeros((0, self.spec.classes))
