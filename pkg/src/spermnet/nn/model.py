"""ResNet-shaped regressors with the M1 (linear) and M2 (dropout MLP) heads."""

from __future__ import annotations

from dataclasses import asdict, dataclass, field

import numpy as np

from . import functional as F
from .layers import BasicBlock, BatchNorm2d, Conv2d, Dropout, Linear, MaxPool2d, Module, ReLU, Sequential
from .tensor import Tensor, no_grad

VARIANTS = {
    "resnet34": ((3, 4, 6, 3), (64, 128, 256, 512)),
    "resnet18": ((2, 2, 2, 2), (64, 128, 256, 512)),
    "tiny": ((1, 1), (8, 16)),
}
HEADS = ("M1", "M2")


class ConfigError(ValueError):
    pass


@dataclass
class ModelConfig:
    variant: str = "resnet34"
    in_channels: int = 9
    head: str = "M1"
    mlp_widths: list[int] = field(default_factory=lambda: [256, 64])
    dropout_probs: list[float] = field(default_factory=lambda: [0.5, 0.5])
    num_outputs: int = 3
    zero_init_residual: bool = False
    zero_init_head: bool = False

    def __post_init__(self):
        self.mlp_widths = [int(w) for w in self.mlp_widths]
        self.dropout_probs = [float(p) for p in self.dropout_probs]
        if self.variant not in VARIANTS:
            raise ConfigError(f"unknown variant {self.variant!r}; choose from {', '.join(VARIANTS)}")
        if self.head not in HEADS:
            raise ConfigError(f"unknown head {self.head!r}; choose M1 or M2")
        if self.in_channels < 1:
            raise ConfigError("in_channels must be positive")
        if len(self.dropout_probs) != len(self.mlp_widths):
            raise ConfigError("dropout_probs and mlp_widths must have the same length")
        if any(not 0.0 <= p < 1.0 for p in self.dropout_probs):
            raise ConfigError("dropout probabilities must lie in [0, 1)")
        if self.num_outputs != 3:
            raise ConfigError("num_outputs must be 3")

    def to_dict(self) -> dict:
        return asdict(self)


class ResNet(Module):
    # fixed output affine: prediction = fc(h) * out_scale + out_shift
    _buffers = ("out_shift", "out_scale")

    def __init__(self, config: ModelConfig, seed: int = 0):
        self.config = config
        root = seed if isinstance(seed, np.random.SeedSequence) else np.random.SeedSequence(seed)
        init_seq, drop_seq = root.spawn(2)
        rng = np.random.default_rng(init_seq)
        blocks, widths = VARIANTS[config.variant]

        self.conv1 = Conv2d(config.in_channels, widths[0], 7, 2, 3, rng)
        self.bn1 = BatchNorm2d(widths[0])
        self.relu = ReLU()
        self.maxpool = MaxPool2d(3, 2, 1)
        in_ch = widths[0]
        for stage, (n, width) in enumerate(zip(blocks, widths), start=1):
            stride = 1 if stage == 1 else 2
            layers = []
            for b in range(n):
                layers.append(BasicBlock(in_ch, width, stride if b == 0 else 1, rng))
                in_ch = width
            setattr(self, f"layer{stage}", Sequential(*layers))
        self.num_stages = len(blocks)

        if config.head == "M1":
            self.mlp = None
            feat = in_ch
        else:
            layers = []
            feat = in_ch
            for width, p in zip(config.mlp_widths, config.dropout_probs):
                layers += [Linear(feat, width, rng), ReLU(), Dropout(p)]
                feat = width
            self.mlp = Sequential(*layers)
        self.fc = Linear(feat, config.num_outputs, rng)
        self.out_shift = np.zeros(config.num_outputs, np.float32)
        self.out_scale = np.ones(config.num_outputs, np.float32)

        if config.zero_init_residual:
            for m in self.modules():
                if isinstance(m, BasicBlock):
                    m.bn2.weight.data[:] = 0.0
        if config.zero_init_head:
            self.fc.weight.data[:] = 0.0
            self.fc.bias.data[:] = 0.0
        self.reseed_dropout(drop_seq)

    def reseed_dropout(self, seed) -> None:
        """Point every dropout layer at one fresh generator derived from ``seed``."""
        rng = np.random.default_rng(seed)
        for m in self.modules():
            if isinstance(m, Dropout):
                m.rng = rng

    def features(self, x):
        x = self.maxpool(self.relu(self.bn1(self.conv1(x))))
        for stage in range(1, self.num_stages + 1):
            x = getattr(self, f"layer{stage}")(x)
        return F.adaptive_avg_pool(x).flatten()

    def forward(self, x):
        x = x if isinstance(x, Tensor) else Tensor(np.asarray(x, dtype=self.fc.weight.dtype))
        if x.ndim != 4 or x.shape[1] != self.config.in_channels:
            raise F.ShapeError(f"expected input (N, {self.config.in_channels}, H, W), got {x.shape}")
        h = self.features(x)
        if self.mlp is not None:
            h = self.mlp(h)
        out = self.fc(h)
        if np.any(self.out_scale != 1) or np.any(self.out_shift != 0):
            out = out * self.out_scale.astype(out.dtype) + self.out_shift.astype(out.dtype)
        return out

    def set_output_affine(self, shift, scale) -> None:
        """Fix the output de-standardization (typically the training-target mean and std)."""
        shift = np.asarray(shift, dtype=np.float64)
        scale = np.asarray(scale, dtype=np.float64)
        if shift.shape != self.out_shift.shape or scale.shape != self.out_scale.shape:
            raise F.ShapeError("output affine must have one entry per output")
        if not (np.all(np.isfinite(shift)) and np.all(np.isfinite(scale)) and np.all(scale > 0)):
            raise ValueError("output scale must be finite and positive")
        self.out_shift[:] = shift
        self.out_scale[:] = scale

    def num_parameters(self) -> int:
        return sum(p.data.size for p in self.parameters())


Model = ResNet


def build_model(config: ModelConfig | None = None, seed: int = 0) -> ResNet:
    return ResNet(config or ModelConfig(), seed)


def forward(model: ResNet, batch) -> Tensor:
    return model(batch)


def predict(model: ResNet, batch, batch_size: int = 16) -> np.ndarray:
    """Eval-mode predictions without recording a graph; restores the previous mode."""
    was_training = model.training
    model.eval()
    try:
        outs = []
        with no_grad():
            for lo in range(0, len(batch), batch_size):
                outs.append(model(batch[lo : lo + batch_size]).data)
        return np.concatenate(outs) if outs else np.zeros((0, model.config.num_outputs), np.float32)
    finally:
        model.train(was_training)


def backward(model: ResNet, output: Tensor, loss_grad) -> dict[str, np.ndarray]:
    """Back-propagate ``loss_grad`` (d loss / d output) and return named parameter gradients."""
    model.zero_grad()
    output.backward(loss_grad)
    return {name: p.grad for name, p in model.named_parameters() if p.grad is not None}
