"""U-Net and attention U-Net graphs built on the autodiff engine."""
from __future__ import annotations

import zlib
from dataclasses import asdict, dataclass
from typing import Iterable, Iterator

import numpy as np

from ..autodiff import (
    Tensor,
    add,
    concat_channels,
    conv1x1,
    conv2d,
    maxpool2x2,
    mul,
    relu,
    scale,
    sigmoid,
    upsample2x,
)
from ..errors import ContractError, InvalidShapeError


@dataclass(frozen=True)
class UNetConfig:
    depth: int = 4
    base_filters: int = 8
    in_channels: int = 1
    out_channels: int = 1
    use_attention_gates: bool = False
    seed: int = 0

    def __post_init__(self):
        if self.depth < 2:
            raise ContractError(f"depth must be >= 2, got {self.depth}")
        if self.base_filters < 4:
            raise ContractError(f"base_filters must be >= 4, got {self.base_filters}")
        if self.in_channels < 1 or self.out_channels < 1:
            raise ContractError("channel counts must be positive")

    def channels(self, level: int) -> int:
        return self.base_filters * 2**level

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> "UNetConfig":
        return cls(**d)


@dataclass(frozen=True)
class LayerSpec:
    name: str
    kind: str
    in_channels: int
    out_channels: int


def _he_normal(shape: tuple[int, ...], fan_in: int, seed: int, name: str) -> np.ndarray:
    # Seeded per name so shared layers match between plain and gated variants.
    rng = np.random.default_rng([seed & 0xFFFFFFFFFFFFFFFF, zlib.crc32(name.encode())])
    return (rng.standard_normal(shape) * np.sqrt(2.0 / fan_in)).astype(np.float32)


class ModelGraph:
    """A built network: named parameters, layer list, freeze flags, config."""

    def __init__(self, config: UNetConfig):
        self.config = config
        self.params: dict[str, Tensor] = {}
        self.frozen: dict[str, bool] = {}
        self.topology: list[LayerSpec] = []
        self._build()

    # -- construction -----------------------------------------------------
    def _add_conv(self, name: str, cin: int, cout: int, k: int, bias: bool = True, kind: str = "conv3x3") -> None:
        w = _he_normal((cout, cin, k, k), cin * k * k, self.config.seed, name + ".weight")
        self._register(name + ".weight", w)
        if bias:
            self._register(name + ".bias", np.zeros(cout, dtype=np.float32))
        self.topology.append(LayerSpec(name, kind, cin, cout))

    def _register(self, name: str, value: np.ndarray) -> None:
        if name in self.params:
            raise ContractError(f"duplicate parameter name {name}")
        self.params[name] = Tensor(value, requires_grad=True, name=name)
        self.frozen[name] = False

    def _build(self) -> None:
        cfg = self.config
        cin = cfg.in_channels
        for k in range(cfg.depth):
            c = cfg.channels(k)
            self._add_conv(f"enc{k}.conv1", cin, c, 3)
            self._add_conv(f"enc{k}.conv2", c, c, 3)
            self.topology.append(LayerSpec(f"enc{k}.pool", "maxpool2x2", c, c))
            cin = c
        cb = cfg.channels(cfg.depth)
        self._add_conv("bottleneck.conv1", cin, cb, 3)
        self._add_conv("bottleneck.conv2", cb, cb, 3)
        below = cb
        for k in reversed(range(cfg.depth)):
            c = cfg.channels(k)
            if cfg.use_attention_gates:
                cint = max(c // 2, 1)
                self._add_conv(f"dec{k}.gate.theta", c, cint, 1, bias=False, kind="conv1x1")
                self._add_conv(f"dec{k}.gate.phi", below, cint, 1, kind="conv1x1")
                self._add_conv(f"dec{k}.gate.psi", cint, 1, 1, kind="conv1x1")
            self.topology.append(LayerSpec(f"dec{k}.up", "upsample2x", below, below))
            self._add_conv(f"dec{k}.conv1", c + below, c, 3)
            self._add_conv(f"dec{k}.conv2", c, c, 3)
            below = c
        self._add_conv("head", below, cfg.out_channels, 1, kind="conv1x1")

    # -- inference --------------------------------------------------------
    def check_input(self, shape: tuple[int, ...]) -> None:
        if len(shape) != 4:
            raise InvalidShapeError(f"model input must be (N, C, H, W), got {shape}")
        if shape[1] != self.config.in_channels:
            raise InvalidShapeError(f"model expects {self.config.in_channels} input channels, got {shape[1]}")
        h, w = shape[2:]
        for level in range(self.config.depth):
            if h % 2 or w % 2:
                raise InvalidShapeError(
                    f"spatial size {h}x{w} at encoder level {level} is not divisible by 2 "
                    f"(input must be divisible by {2 ** self.config.depth})"
                )
            h, w = h // 2, w // 2

    def forward(self, x: Tensor) -> Tensor:
        self.check_input(x.shape)
        p = self.params
        skips = []
        h = x
        for k in range(self.config.depth):
            h = relu(conv2d(h, p[f"enc{k}.conv1.weight"], p[f"enc{k}.conv1.bias"]))
            h = relu(conv2d(h, p[f"enc{k}.conv2.weight"], p[f"enc{k}.conv2.bias"]))
            skips.append(h)
            h = maxpool2x2(h)
        h = relu(conv2d(h, p["bottleneck.conv1.weight"], p["bottleneck.conv1.bias"]))
        h = relu(conv2d(h, p["bottleneck.conv2.weight"], p["bottleneck.conv2.bias"]))
        for k in reversed(range(self.config.depth)):
            skip = skips[k]
            if self.config.use_attention_gates:
                skip = attention_gate(
                    skip,
                    h,
                    p[f"dec{k}.gate.theta.weight"],
                    p[f"dec{k}.gate.phi.weight"],
                    p[f"dec{k}.gate.phi.bias"],
                    p[f"dec{k}.gate.psi.weight"],
                    p[f"dec{k}.gate.psi.bias"],
                )
            h = concat_channels(skip, upsample2x(h))
            h = relu(conv2d(h, p[f"dec{k}.conv1.weight"], p[f"dec{k}.conv1.bias"]))
            h = relu(conv2d(h, p[f"dec{k}.conv2.weight"], p[f"dec{k}.conv2.bias"]))
        return sigmoid(conv1x1(h, p["head.weight"], p["head.bias"]))

    __call__ = forward

    def predict(self, x: np.ndarray) -> np.ndarray:
        """Forward pass on a plain array without recording a graph."""
        arr = np.asarray(x, dtype=np.float32)
        squeeze = arr.ndim == 2
        if squeeze:
            arr = arr[None, None]
        saved = {n: t.requires_grad for n, t in self.params.items()}
        try:
            for t in self.params.values():
                t.requires_grad = False
            out = self.forward(Tensor(arr)).data
        finally:
            for n, t in self.params.items():
                t.requires_grad = saved[n]
        return out[0, 0] if squeeze else out

    # -- parameters -------------------------------------------------------
    def parameter_count(self) -> int:
        return sum(t.size for t in self.params.values())

    def trainable(self) -> Iterator[tuple[str, Tensor]]:
        for name, t in self.params.items():
            if not self.frozen[name]:
                yield name, t

    def zero_grad(self) -> None:
        for t in self.params.values():
            t.zero_grad()

    def freeze_all(self) -> None:
        self.set_trainable(self.params, False)

    def unfreeze_all(self) -> None:
        self.set_trainable(self.params, True)

    def set_trainable(self, names: Iterable[str], flag: bool) -> None:
        """Mark parameters trainable or frozen.

        Frozen parameters stop accumulating their own gradient, but gradient
        still flows through them to whatever produced their inputs.
        """
        names = list(names)
        missing = [n for n in names if n not in self.params]
        if missing:
            raise KeyError(f"unknown parameter name(s): {', '.join(missing)}")
        for n in names:
            self.frozen[n] = not flag
            self.params[n].requires_grad = flag
            if not flag:
                self.params[n].zero_grad()

    def state(self) -> dict[str, np.ndarray]:
        return {n: t.data.copy() for n, t in self.params.items()}

    def load_state(self, state: dict[str, np.ndarray]) -> None:
        if set(state) != set(self.params):
            raise KeyError("parameter name sets differ")
        for n, t in self.params.items():
            if state[n].shape != t.shape:
                raise InvalidShapeError(f"{n}: shape {state[n].shape} vs {t.shape}")
            t.data[...] = state[n]


def attention_gate(
    skip: Tensor,
    gating: Tensor,
    theta_weight: Tensor,
    phi_weight: Tensor,
    phi_bias: Tensor | None,
    psi_weight: Tensor,
    psi_bias: Tensor | None,
) -> Tensor:
    """Weight ``skip`` by an additive attention map computed from ``gating``.

    ``gating`` comes from the next-coarser decoder level and has half the
    spatial size of ``skip``. The skip projection uses a stride-2 pointwise
    conv so both projections meet at the coarse resolution; the one-channel
    map is then upsampled back and multiplied into every skip channel.
    """
    if skip.data.ndim != 4 or gating.data.ndim != 4:
        raise InvalidShapeError("attention_gate inputs must be 4-D")
    n, _, h, w = skip.shape
    if h % 2 or w % 2 or gating.shape[0] != n or gating.shape[2:] != (h // 2, w // 2):
        raise InvalidShapeError(
            f"attention_gate: gating {gating.shape} must have half the spatial size of skip {skip.shape}"
        )
    theta = conv1x1(skip, theta_weight, None, stride=2)
    phi = conv1x1(gating, phi_weight, phi_bias)
    attn = sigmoid(conv1x1(relu(add(theta, phi)), psi_weight, psi_bias))
    return mul(skip, upsample2x(attn))


def build_unet(config: UNetConfig) -> ModelGraph:
    if config.use_attention_gates:
        raise ContractError("build_unet expects use_attention_gates=False; use build_attention_unet")
    return ModelGraph(config)


def build_attention_unet(config: UNetConfig) -> ModelGraph:
    if not config.use_attention_gates:
        raise ContractError("build_attention_unet expects use_attention_gates=True")
    return ModelGraph(config)


def build_model(config: UNetConfig) -> ModelGraph:
    return ModelGraph(config)


def soft_binarize(x: Tensor, steepness: float = 10.0) -> Tensor:
    """Differentiable stand-in for thresholding at 0.5: sigmoid(k * (x - 0.5))."""
    return sigmoid(scale(x, steepness, -0.5 * steepness))


class TandemStack:
    """Trainable corrector feeding a frozen predictor."""

    def __init__(self, corrector: ModelGraph, predictor: ModelGraph, steepness: float = 10.0):
        if corrector.config.out_channels != predictor.config.in_channels:
            raise InvalidShapeError(
                f"corrector emits {corrector.config.out_channels} channels, "
                f"predictor expects {predictor.config.in_channels}"
            )
        self.corrector = corrector
        self.predictor = predictor
        self.steepness = steepness

    def forward(self, x: Tensor) -> Tensor:
        corrected = self.corrector.forward(x)
        return self.predictor.forward(soft_binarize(corrected, self.steepness))

    __call__ = forward

    def correct(self, x: np.ndarray) -> np.ndarray:
        return self.corrector.predict(x)

    def predict(self, x: np.ndarray) -> np.ndarray:
        """Predictor output on the soft-binarized correction, without a graph."""
        corrected = self.corrector.predict(x).astype(np.float64)
        soft = 1.0 / (1.0 + np.exp(-self.steepness * (corrected - 0.5)))
        return self.predictor.predict(soft.astype(np.float32))


def compose_tandem(corrector: ModelGraph, predictor: ModelGraph, steepness: float = 10.0) -> TandemStack:
    """Stack ``corrector`` before ``predictor`` and freeze the predictor."""
    stack = TandemStack(corrector, predictor, steepness)
    predictor.freeze_all()
    return stack
