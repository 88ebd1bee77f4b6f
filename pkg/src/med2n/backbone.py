"""Four-block convolutional embedding net with gate-insertion sites.

Each block is conv3x3 -> batch-norm -> relu -> [gate] -> pool. Blocks 1-3
max-pool by 2, block 4 pools globally, so the embedding length equals the
last block's channel count regardless of input size.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import autodiff as ad
from .autodiff import BatchNormState, Tensor
from .errors import ConfigError, DimensionError

DEFAULT_CHANNELS = (16, 32, 64, 128)
NUM_BLOCKS = 4


@dataclass(frozen=True)
class BlockSpec:
    in_channels: int
    out_channels: int
    kernel_size: int = 3
    stride: int = 1
    gated: bool = False

    def __post_init__(self):
        for name in ("in_channels", "out_channels", "kernel_size", "stride"):
            if getattr(self, name) < 1:
                raise ConfigError(f"BlockSpec.{name} must be positive, got {getattr(self, name)}")


class ConvBlock:
    def __init__(self, spec: BlockSpec, rng: np.random.Generator, dtype=np.float32):
        self.spec = spec
        fan_in = spec.in_channels * spec.kernel_size ** 2
        w = rng.normal(0.0, np.sqrt(2.0 / fan_in),
                       (spec.out_channels, spec.in_channels, spec.kernel_size, spec.kernel_size))
        self.kernel = Tensor(w.astype(dtype), requires_grad=True)
        self.gamma = Tensor(np.ones(spec.out_channels, dtype=dtype), requires_grad=True)
        self.beta = Tensor(np.zeros(spec.out_channels, dtype=dtype), requires_grad=True)
        self.bn = BatchNormState(spec.out_channels, dtype=dtype)

    def activate(self, x: Tensor, training: bool, update_stats: bool = True) -> Tensor:
        pad = self.spec.kernel_size // 2
        h = ad.conv2d(x, self.kernel, stride=self.spec.stride, padding=pad)
        h = ad.batch_norm_2d(h, self.gamma, self.beta, self.bn, training, update_stats)
        return ad.relu(h)

    def parameters(self) -> list[Tensor]:
        return [self.kernel, self.gamma, self.beta]


class EmbeddingNet:
    def __init__(self, specs: list[BlockSpec], input_shape=(3, 32, 32), seed: int = 0, dtype=np.float32):
        if len(specs) != NUM_BLOCKS:
            raise ConfigError(f"embedding net needs {NUM_BLOCKS} blocks, got {len(specs)}")
        rng = np.random.default_rng(seed)
        self.specs = list(specs)
        self.blocks = [ConvBlock(s, rng, dtype) for s in specs]
        self.input_shape = tuple(input_shape)
        self.dtype = np.dtype(dtype)
        self.training = True
        # batch-statistics mode without touching running estimates (frozen teachers)
        self.update_stats = True

    @property
    def feature_dim(self) -> int:
        return self.specs[-1].out_channels

    @property
    def gated_blocks(self) -> list[int]:
        return [i for i, s in enumerate(self.specs) if s.gated]

    @property
    def gated_filter_count(self) -> int:
        return sum(s.out_channels for s in self.specs if s.gated)

    @property
    def decompose_depth(self) -> int:
        return len(self.gated_blocks)

    def train(self) -> "EmbeddingNet":
        self.training = True
        self.update_stats = True
        return self

    def eval(self) -> "EmbeddingNet":
        self.training = False
        return self

    def batch_stats(self) -> "EmbeddingNet":
        """Normalize with each batch's statistics but leave running estimates untouched."""
        self.training = True
        self.update_stats = False
        return self

    def parameters(self) -> list[Tensor]:
        return [p for b in self.blocks for p in b.parameters()]

    def state_arrays(self) -> dict[str, np.ndarray]:
        out = {}
        for i, b in enumerate(self.blocks):
            out[f"block{i}.kernel"] = b.kernel.data
            out[f"block{i}.gamma"] = b.gamma.data
            out[f"block{i}.beta"] = b.beta.data
            out[f"block{i}.running_mean"] = b.bn.running_mean
            out[f"block{i}.running_var"] = b.bn.running_var
        return out

    def load_state_arrays(self, arrays: dict[str, np.ndarray]) -> None:
        for name, target in self.state_arrays().items():
            src = arrays[name]
            if src.shape != target.shape:
                raise DimensionError(f"{name}: expected shape {target.shape}, got {src.shape}")
            target[...] = src

    def _check_input(self, images: Tensor) -> None:
        if images.ndim != 4 or images.shape[1:] != self.input_shape:
            raise DimensionError(f"expected images [b x {' x '.join(map(str, self.input_shape))}], "
                                 f"got {images.shape}")

    def _run(self, images: Tensor, masks: dict[int, Tensor] | None, keep: int | None = None):
        self._check_input(images)
        x = images
        kept = None
        last = len(self.blocks) - 1
        for i, block in enumerate(self.blocks):
            x = block.activate(x, self.training, self.update_stats)
            if masks is not None and i in masks:
                x = ad.mul(x, masks[i])
            if i == keep:
                kept = x
            x = ad.global_avg_pool(x) if i == last else ad.max_pool_2d(x, 2)
        return x, kept


def build_embedding(channels=DEFAULT_CHANNELS, decompose_depth: int = 2, input_shape=(3, 32, 32),
                    seed: int = 0, dtype=np.float32) -> EmbeddingNet:
    """Build the embedding net and mark the last ``decompose_depth`` blocks as gated."""
    channels = list(channels)
    if len(channels) != NUM_BLOCKS:
        raise ConfigError(f"expected {NUM_BLOCKS} channel counts, got {channels}")
    if not isinstance(decompose_depth, (int, np.integer)) or not 0 <= decompose_depth <= NUM_BLOCKS:
        raise ConfigError(f"decompose_depth must be in [0, {NUM_BLOCKS}], got {decompose_depth!r}")
    ins = [input_shape[0]] + channels[:-1]
    specs = [BlockSpec(ci, co, gated=i >= NUM_BLOCKS - decompose_depth)
             for i, (ci, co) in enumerate(zip(ins, channels))]
    return EmbeddingNet(specs, input_shape=input_shape, seed=seed, dtype=dtype)


def _as_images(net: EmbeddingNet, images) -> Tensor:
    if isinstance(images, Tensor):
        return images
    return Tensor(np.asarray(images, dtype=net.dtype))


def forward_std(net: EmbeddingNet, images) -> Tensor:
    """The ungated (standard) path: [b x feature_dim] embeddings."""
    return net._run(_as_images(net, images), None)[0]


def _mask_tensors(net: EmbeddingNet, masks) -> dict[int, Tensor]:
    gated = net.gated_blocks
    if isinstance(masks, dict):
        items = masks
    else:
        masks = list(masks)
        if len(masks) != len(gated):
            raise DimensionError(f"expected {len(gated)} gate masks, got {len(masks)}")
        items = dict(zip(gated, masks))
    out = {}
    for i in gated:
        if i not in items:
            raise DimensionError(f"missing gate mask for block {i}")
        m = items[i]
        m = m if isinstance(m, Tensor) else Tensor(np.asarray(m, dtype=net.dtype))
        c = net.specs[i].out_channels
        if m.size != c:
            raise DimensionError(f"block {i} has {c} filters but its mask has {m.size} entries")
        out[i] = ad.reshape(m, (1, c, 1, 1))
    return out


def forward_gated(net: EmbeddingNet, images, masks) -> Tensor:
    """Gated path: after each gated block's relu, channel i is multiplied by mask[i].

    ``masks`` is either a list aligned with ``net.gated_blocks`` or a dict keyed
    by block index; entries may be Tensors (to carry gate gradients) or arrays.
    """
    return net._run(_as_images(net, images), _mask_tensors(net, masks))[0]


def block_activation(net: EmbeddingNet, images, block: int, masks=None) -> Tensor:
    """Post-gate activation map of one block, shape [b x channels x h x w]."""
    m = None if masks is None else _mask_tensors(net, masks)
    return net._run(_as_images(net, images), m, keep=block)[1]


class Linear:
    """Fully connected layer, weight stored [in x out]."""

    def __init__(self, in_dim: int, out_dim: int, rng: np.random.Generator | None = None,
                 dtype=np.float32, zero: bool = False):
        if zero:
            w = np.zeros((in_dim, out_dim))
        else:
            rng = rng if rng is not None else np.random.default_rng(0)
            bound = 1.0 / np.sqrt(in_dim)
            w = rng.uniform(-bound, bound, (in_dim, out_dim))
        self.weight = Tensor(w.astype(dtype), requires_grad=True)
        self.bias = Tensor(np.zeros(out_dim, dtype=dtype), requires_grad=True)

    @property
    def out_dim(self) -> int:
        return self.weight.shape[1]

    def __call__(self, x: Tensor) -> Tensor:
        return ad.linear(x, self.weight, self.bias)

    def parameters(self) -> list[Tensor]:
        return [self.weight, self.bias]


def pretrain_forward(net: EmbeddingNet, head: Linear, images, num_classes: int | None = None) -> Tensor:
    """Logits over the source training classes for plain classification pretraining."""
    if num_classes is not None and head.out_dim != num_classes:
        raise ConfigError(f"pretraining head has {head.out_dim} outputs but the source split has "
                          f"{num_classes} classes")
    if head.weight.shape[0] != net.feature_dim:
        raise ConfigError(f"head expects {head.weight.shape[0]}-d features, net emits {net.feature_dim}")
    return head(forward_std(net, images))
