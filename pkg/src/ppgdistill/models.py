"""ResNet-1D and MLP backbones for the capacity sweep, plus parameter counting."""
from __future__ import annotations

import copy
from dataclasses import asdict, dataclass, field
from typing import Iterator

import numpy as np

from .errors import ConfigError, ShapeError, StateError
from .numcore import (
    BatchNorm1d,
    Conv1d,
    Flatten,
    GlobalAvgPool,
    Layer,
    Linear,
    ReLU,
    Tensor,
    check_input,
    kaiming_init,
)

NUM_CLASSES = 180
WINDOW_LENGTH = 200
STEM_CHANNELS = 16
STEM_KERNEL = 7
BLOCK_KERNEL = 5

# Published parameter counts for the sweep sizes (blocks -> params).
REFERENCE_PARAMS = {
    1: 23_292,
    2: 33_724,
    3: 44_156,
    4: 54_588,
    5: 97_852,
    6: 139_196,
    8: 221_884,
    10: 534_460,
    12: 863_676,
}
SWEEP_BLOCKS = tuple(REFERENCE_PARAMS)
TEACHER_BLOCKS = (2, 3, 4, 5, 6, 8, 10, 12)
STUDENT_BLOCKS = (1, 2, 3, 4, 5, 6, 8, 10)


@dataclass(frozen=True)
class ModelSpec:
    backbone: str = "resnet1d"
    num_blocks: int | None = None
    widths: tuple[int, ...] | None = None
    input_channels: int = 1
    input_length: int = WINDOW_LENGTH
    num_classes: int = NUM_CLASSES

    def __post_init__(self):
        if self.widths is not None:
            object.__setattr__(self, "widths", tuple(int(w) for w in self.widths))

    @classmethod
    def resnet(cls, num_blocks: int, **kw) -> "ModelSpec":
        return cls(backbone="resnet1d", num_blocks=num_blocks, **kw)

    @classmethod
    def mlp(cls, widths, **kw) -> "ModelSpec":
        return cls(backbone="mlp", widths=tuple(widths), **kw)

    def to_dict(self) -> dict:
        d = asdict(self)
        if d["widths"] is not None:
            d["widths"] = list(d["widths"])
        return {k: v for k, v in d.items() if v is not None}

    @classmethod
    def from_dict(cls, d: dict) -> "ModelSpec":
        known = {f for f in cls.__dataclass_fields__}
        unknown = set(d) - known
        if unknown:
            raise ConfigError(f"unknown model keys: {sorted(unknown)}")
        return cls(**d)

    @property
    def label(self) -> str:
        if self.backbone == "resnet1d":
            return f"resnet{self.num_blocks}"
        return "mlp" + "x".join(str(w) for w in self.widths or ())


def block_channels(index: int) -> int:
    """Channel width of residual block ``index`` (1-based)."""
    if index <= 4:
        return 32
    if index <= 8:
        return 64
    return 128


class ResidualBlock(Layer):
    """conv-bn-relu-conv-bn plus skip, then relu. 1x1 strided skip conv when the shape changes."""

    def __init__(self, in_channels: int, out_channels: int, stride: int = 1, kernel: int = BLOCK_KERNEL):
        super().__init__()
        self.children["conv1"] = Conv1d(in_channels, out_channels, kernel, stride)
        self.children["bn1"] = BatchNorm1d(out_channels)
        self.children["relu1"] = ReLU()
        self.children["conv2"] = Conv1d(out_channels, out_channels, kernel)
        self.children["bn2"] = BatchNorm1d(out_channels)
        if in_channels != out_channels or stride != 1:
            self.children["skip"] = Conv1d(in_channels, out_channels, 1, stride)
        self.out_relu = ReLU()

    def forward(self, x, training=False):
        c = self.children
        h = c["relu1"].forward(c["bn1"].forward(c["conv1"].forward(x, training), training), training)
        h = c["bn2"].forward(c["conv2"].forward(h, training), training)
        s = c["skip"].forward(x, training) if "skip" in c else x
        return self.out_relu.forward(h + s, training)

    def backward(self, grad):
        c = self.children
        g = self.out_relu.backward(grad)
        gh = c["bn2"].backward(g)
        gh = c["conv2"].backward(gh)
        gh = c["relu1"].backward(gh)
        gh = c["bn1"].backward(gh)
        dx = c["conv1"].backward(gh)
        dx += c["skip"].backward(g) if "skip" in c else g
        return dx


class Model(Layer):
    """A body producing the pooled penultimate features, and a linear head to class logits."""

    def __init__(self, spec: ModelSpec, body: list[tuple[str, Layer]], feature_dim: int):
        super().__init__()
        self.spec = spec
        self.feature_dim = feature_dim
        self._body_order = [name for name, _ in body]
        for name, layer in body:
            self.children[name] = layer
        self.children["head"] = Linear(feature_dim, spec.num_classes)
        self._trained_forward = False

    # -- traversal -------------------------------------------------------
    def named_parameters(self) -> dict[str, Tensor]:
        return dict(self.named_params())

    def named_state(self) -> dict[str, Tensor]:
        return dict(self.named_buffers())

    def zero_grad(self) -> None:
        for t in self.named_parameters().values():
            t.zero_grad()

    def initialize(self, seed: int) -> "Model":
        rng = np.random.default_rng(seed)
        for layer in self.layers():
            if isinstance(layer, (Conv1d, Linear)):
                kaiming_init(layer, rng)
        return self

    def copy(self) -> "Model":
        return copy.deepcopy(self)

    # -- compute ---------------------------------------------------------
    def forward(self, x, training=False):
        """Return ``(logits [B, K], features [B, feature_dim])``."""
        s = self.spec
        h = check_input(x, s.input_channels, s.input_length)
        for name in self._body_order:
            h = self.children[name].forward(h, training)
        features = h
        logits = self.children["head"].forward(features, training)
        self._trained_forward = training
        if not np.isfinite(logits).all():
            raise FloatingPointError("non-finite logits")
        return logits, features

    def __call__(self, x, training=False):
        return self.forward(x, training)

    def backward(self, logit_grad, feature_grad=None):
        """Accumulate parameter gradients; ``feature_grad`` is added at the feature tap."""
        if not self._trained_forward:
            raise StateError("backward requires a preceding training-mode forward pass")
        logit_grad = np.asarray(logit_grad, dtype=np.float64)
        g = self.children["head"].backward(logit_grad)
        if feature_grad is not None:
            if feature_grad.shape != g.shape:
                raise ShapeError(f"feature grad {feature_grad.shape} != features {g.shape}")
            g = g + feature_grad
        for name in reversed(self._body_order):
            g = self.children[name].backward(g)
        return g

    # -- (de)serialisation ----------------------------------------------
    def state_arrays(self) -> dict[str, np.ndarray]:
        out = {f"param/{k}": t.data for k, t in self.named_params()}
        out.update({f"buffer/{k}": t.data for k, t in self.named_buffers()})
        return out

    def load_state_arrays(self, arrays: dict[str, np.ndarray]) -> None:
        expected = self.state_arrays()
        if set(expected) != set(arrays):
            missing = sorted(set(expected) - set(arrays))
            extra = sorted(set(arrays) - set(expected))
            raise ShapeError(f"state mismatch: missing {missing[:3]} extra {extra[:3]}")
        tensors = {f"param/{k}": t for k, t in self.named_params()}
        tensors.update({f"buffer/{k}": t for k, t in self.named_buffers()})
        for k, t in tensors.items():
            a = arrays[k]
            if a.shape != t.shape:
                raise ShapeError(f"{k}: shape {a.shape} != {t.shape}")
            t.data = np.array(a, dtype=np.float64)


def build_resnet(spec: ModelSpec, seed: int | None = 0) -> Model:
    if spec.backbone != "resnet1d":
        raise ConfigError(f"build_resnet needs backbone 'resnet1d', got {spec.backbone!r}")
    if spec.num_blocks is None or int(spec.num_blocks) < 1:
        raise ConfigError(f"num_blocks must be >= 1, got {spec.num_blocks}")
    body: list[tuple[str, Layer]] = [
        ("stem_conv", Conv1d(spec.input_channels, STEM_CHANNELS, STEM_KERNEL)),
        ("stem_bn", BatchNorm1d(STEM_CHANNELS)),
        ("stem_relu", ReLU()),
    ]
    cin = STEM_CHANNELS
    for i in range(1, int(spec.num_blocks) + 1):
        cout = block_channels(i)
        stride = 2 if cout != cin else 1
        body.append((f"block{i}", ResidualBlock(cin, cout, stride)))
        cin = cout
    body.append(("pool", GlobalAvgPool()))
    model = Model(spec, body, feature_dim=cin)
    return model.initialize(seed) if seed is not None else model


def build_mlp(spec: ModelSpec, seed: int | None = 0) -> Model:
    if spec.backbone != "mlp":
        raise ConfigError(f"build_mlp needs backbone 'mlp', got {spec.backbone!r}")
    if not spec.widths or any(w < 1 for w in spec.widths):
        raise ConfigError("mlp widths must be a nonempty list of positive integers")
    body: list[tuple[str, Layer]] = [("flatten", Flatten())]
    fan_in = spec.input_channels * spec.input_length
    for i, w in enumerate(spec.widths):
        body.append((f"fc{i}", Linear(fan_in, w)))
        body.append((f"relu{i}", ReLU()))
        fan_in = w
    model = Model(spec, body, feature_dim=fan_in)
    return model.initialize(seed) if seed is not None else model


def build_model(spec: ModelSpec, seed: int | None = 0) -> Model:
    if spec.backbone == "resnet1d":
        return build_resnet(spec, seed)
    if spec.backbone == "mlp":
        return build_mlp(spec, seed)
    raise ConfigError(f"unknown backbone {spec.backbone!r}")


def count_params(model: Layer) -> int:
    """Trainable scalars only; batchnorm running statistics are excluded."""
    return int(sum(t.size for _, t in model.named_params()))


def param_table(sizes=SWEEP_BLOCKS) -> list[dict]:
    """Built parameter counts next to the reference counts."""
    rows = []
    for n in sizes:
        ours = count_params(build_resnet(ModelSpec.resnet(n), seed=None))
        ref = REFERENCE_PARAMS.get(n)
        rows.append(
            {
                "blocks": n,
                "params": ours,
                "reference_params": ref,
                "delta": None if ref is None else ours - ref,
                "ratio": None if ref is None else round(ref / ours, 4),
            }
        )
    return rows
