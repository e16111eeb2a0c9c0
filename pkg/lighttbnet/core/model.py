"""LightTBNet architecture: configuration, construction and forward pass."""

from dataclasses import asdict, dataclass
from typing import Any, Dict, List, Tuple

import numpy as np

from .errors import ConfigError, ShapeError
from .layers import BatchNorm2D, Conv2D, Linear, MaxPool2D, Module, concat_channels
from .tensor import Tensor, get_default_dtype, relu, reshape, softmax
from .utils import logger, make_rng

MIN_BLOCKS = 2
MAX_BLOCKS = 6
TB_CLASS = 1


def default_channel_plan(n_blocks: int) -> List[int]:
    """Block widths 32, 64, 128, then 128 for every further block."""
    return [min(32 * 2 ** i, 128) for i in range(n_blocks)]


@dataclass(frozen=True)
class ModelConfig:
    """
    Architecture hyperparameters.

    Each block emits 2 * channel_plan[i] channels (main and skip paths are
    concatenated), and halves the spatial size.
    """
    n_blocks: int = 4
    channel_plan: Tuple[int, ...] = (32, 64, 128, 128)
    reduce_channels: int = 32
    fc_hidden: int = 128
    input_size: int = 256
    input_channels: int = 1
    n_classes: int = 2
    seed: int = 0

    def __post_init__(self):
        object.__setattr__(self, "channel_plan", tuple(int(c) for c in self.channel_plan))

    @classmethod
    def for_blocks(cls, n_blocks: int, **overrides) -> "ModelConfig":
        """Default config for a given N."""
        overrides.setdefault("channel_plan", tuple(default_channel_plan(n_blocks)))
        return cls(n_blocks=n_blocks, **overrides)

    def validate(self) -> "ModelConfig":
        if not MIN_BLOCKS <= self.n_blocks <= MAX_BLOCKS:
            raise ConfigError(f"n_blocks must be in [{MIN_BLOCKS},{MAX_BLOCKS}], got {self.n_blocks}")
        if len(self.channel_plan) != self.n_blocks:
            raise ConfigError(f"channel_plan has {len(self.channel_plan)} widths for {self.n_blocks} blocks")
        if self.input_size % (2 ** self.n_blocks) != 0:
            raise ConfigError(f"input_size {self.input_size} is not divisible by 2^{self.n_blocks}")
        widths = list(self.channel_plan) + [self.reduce_channels, self.fc_hidden, self.input_size,
                                            self.input_channels]
        if any(w < 1 for w in widths):
            raise ConfigError(f"all widths must be >= 1, got {widths}")
        if self.n_classes != 2:
            raise ConfigError(f"n_classes must be 2, got {self.n_classes}")
        return self

    @property
    def final_size(self) -> int:
        return self.input_size // 2 ** self.n_blocks

    @property
    def flatten_features(self) -> int:
        return self.reduce_channels * self.final_size ** 2

    @property
    def input_shape(self) -> Tuple[int, int, int]:
        return (self.input_channels, self.input_size, self.input_size)

    def to_dict(self) -> Dict[str, Any]:
        data = asdict(self)
        data["channel_plan"] = list(self.channel_plan)
        return data

    @classmethod
    def from_dict(cls, data: Dict[str, Any]) -> "ModelConfig":
        known = {k: v for k, v in data.items() if k in cls.__dataclass_fields__}
        if "channel_plan" not in known and "n_blocks" in known:
            known["channel_plan"] = default_channel_plan(int(known["n_blocks"]))
        try:
            return cls(**known)
        except TypeError as e:
            raise ConfigError(f"invalid model config: {e}", {"config": data})


class ResidualBlock(Module):
    """
    Conv3x3 -> ReLU -> BN -> Conv3x3 -> ReLU -> BN, in parallel with a 1x1
    conv skip; both branches are concatenated and max-pooled 2x2/2.
    """

    def __init__(self, in_channels: int, width: int, rng: np.random.Generator, dtype):
        super().__init__()
        self.in_channels = in_channels
        self.width = width
        self.conv1 = self.add_module("conv1", Conv2D(in_channels, width, 3, padding="same", rng=rng, dtype=dtype))
        self.bn1 = self.add_module("bn1", BatchNorm2D(width, dtype=dtype))
        self.conv2 = self.add_module("conv2", Conv2D(width, width, 3, padding="same", rng=rng, dtype=dtype))
        self.bn2 = self.add_module("bn2", BatchNorm2D(width, dtype=dtype))
        self.skip = self.add_module("skip", Conv2D(in_channels, width, 1, padding=0, rng=rng, dtype=dtype))
        self.pool = self.add_module("pool", MaxPool2D(2, 2))

    @property
    def out_channels(self) -> int:
        return 2 * self.width

    def forward(self, x: Tensor) -> Tensor:
        main = self.bn1(relu(self.conv1(x)))
        main = self.bn2(relu(self.conv2(main)))
        return self.pool(concat_channels(main, self.skip(x)))

    def output_shape(self, input_shape):
        B, _, H, W = self.conv1.output_shape(input_shape)
        return self.pool.output_shape((B, self.out_channels, H, W))


class LightTBNet(Module):
    """N residual blocks, a 1x1 reduction conv and a two-layer MLP head."""

    def __init__(self, config: ModelConfig):
        super().__init__()
        config.validate()
        self.config = config
        dtype = get_default_dtype()
        rng = make_rng(config.seed)

        self.blocks: List[ResidualBlock] = []
        channels = config.input_channels
        for i, width in enumerate(config.channel_plan):
            block = self.add_module(f"blocks.{i}", ResidualBlock(channels, width, rng, dtype))
            self.blocks.append(block)
            channels = block.out_channels
        self.reduce = self.add_module("reduce", Conv2D(channels, config.reduce_channels, 1, padding=0,
                                                       rng=rng, dtype=dtype))
        self.fc1 = self.add_module("fc1", Linear(config.flatten_features, config.fc_hidden, rng=rng, dtype=dtype))
        self.fc2 = self.add_module("fc2", Linear(config.fc_hidden, config.n_classes, rng=rng, dtype=dtype))

    def _check_input(self, x: Tensor) -> None:
        expected = self.config.input_shape
        if x.ndim != 4 or tuple(x.shape[1:]) != expected:
            raise ShapeError(f"LightTBNet expects [B,{expected[0]},{expected[1]},{expected[2]}], got {x.shape}",
                             {"input": list(x.shape), "expected": [None, *expected]})

    def forward_with_activations(self, x: Tensor) -> Tuple[Tensor, Dict[str, Tensor]]:
        """Logits plus the intermediate feature maps keyed by layer name."""
        self._check_input(x)
        activations: Dict[str, Tensor] = {}
        h = x
        for i, block in enumerate(self.blocks):
            h = block(h)
            activations[f"blocks.{i}"] = h
        h = self.reduce(h)
        activations["reduce"] = h
        h = reshape(h, (h.shape[0], self.config.flatten_features))
        h = relu(self.fc1(h))
        activations["fc1"] = h
        logits = self.fc2(h)
        return logits, activations

    def logits(self, x: Tensor) -> Tensor:
        return self.forward_with_activations(x)[0]

    def forward(self, x: Tensor) -> Tensor:
        """Row-stochastic class probabilities; column 1 is the TB score."""
        return softmax(self.logits(x), axis=1)

    def tb_scores(self, x: Tensor) -> np.ndarray:
        return self.forward(x).data[:, TB_CLASS].astype(np.float64)

    def parameter_registry(self) -> List[Tuple[str, Tensor]]:
        return parameter_registry(self)

    def state_registry(self) -> List[Tuple[str, np.ndarray]]:
        return state_registry(self)

    def load_state(self, state: Dict[str, np.ndarray]) -> None:
        """Copy arrays into parameters and buffers by name (shapes must match)."""
        for name, target in state_registry(self):
            source = np.asarray(state[name])
            if source.shape != target.shape:
                raise ShapeError(f"state '{name}' has shape {source.shape}, model expects {target.shape}",
                                 {"name": name})
            target[...] = source

    def layer_profile(self, input_shape) -> List[Dict[str, Any]]:
        """Per-layer shape, parameter and MAC rows for one forward pass."""
        rows: List[Dict[str, Any]] = []
        shape = tuple(input_shape)

        def add(name: str, layer: Module, in_shape):
            try:
                out = layer.output_shape(in_shape)
                macs = layer.macs(in_shape)
            except ShapeError as e:
                raise ShapeError(f"shape inference failed at {name}: {e.message}", {"layer": name, **e.details})
            rows.append({"name": name, "kind": type(layer).__name__, "input_shape": tuple(in_shape),
                         "output_shape": out, "params": layer.param_count() if not layer._children else 0,
                         "macs": macs})
            return out

        for i, block in enumerate(self.blocks):
            prefix = f"blocks.{i}"
            main = add(f"{prefix}.conv1", block.conv1, shape)
            add(f"{prefix}.bn1", block.bn1, main)
            main = add(f"{prefix}.conv2", block.conv2, main)
            add(f"{prefix}.bn2", block.bn2, main)
            skip = add(f"{prefix}.skip", block.skip, shape)
            merged = (main[0], main[1] + skip[1], main[2], main[3])
            shape = add(f"{prefix}.pool", block.pool, merged)
        shape = add("reduce", self.reduce, shape)
        flat = (shape[0], int(np.prod(shape[1:])))
        shape = add("fc1", self.fc1, flat)
        add("fc2", self.fc2, shape)
        return rows


def build(config: ModelConfig) -> LightTBNet:
    """Construct a LightTBNet; same config and seed give bitwise-identical weights."""
    model = LightTBNet(config)
    logger.info(f"Built LightTBNet N={config.n_blocks} plan={list(config.channel_plan)} "
                f"params={model.param_count()} dtype={get_default_dtype().__name__}")
    return model


def parameter_registry(model: LightTBNet) -> List[Tuple[str, Tensor]]:
    """
    Trainable tensors in stable order: blocks in order (conv1, bn1, conv2,
    bn2, skip), then reduce, fc1, fc2; weight before bias, gamma before beta.
    """
    return list(model.named_parameters())


def state_registry(model: LightTBNet) -> List[Tuple[str, np.ndarray]]:
    """
    Everything a checkpoint stores: the parameter registry with each
    BatchNorm's running_mean/running_var placed right after its beta.
    """
    entries: List[Tuple[str, np.ndarray]] = []
    buffers = dict(model.named_buffers())
    for name, tensor in parameter_registry(model):
        entries.append((name, tensor.data))
        if name.endswith(".beta"):
            prefix = name[: -len("beta")]
            entries.append((prefix + "running_mean", buffers[prefix + "running_mean"]))
            entries.append((prefix + "running_var", buffers[prefix + "running_var"]))
    return entries
