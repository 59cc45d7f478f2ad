"""Generator and discriminator assembly on top of the tensor primitives.

The generator is an encoder/decoder without a bottleneck: two stride-2
convolutions, a block of exponentially dilated convolutions, then three
decoder convolutions of which the last two are preceded by nearest
neighbour 2x upsampling. Every convolution except the final one is
followed by batch normalization and an ELU. Dilated layers start as the
identity map; all other layers use Xavier initialization.

The discriminator is a fully convolutional patch critic: five 3x3 layers
with LeakyReLU(0.2) between them, emitting one logit per patch. Its
judgements are averaged by the loss module.

The mask is never fed to the network as an extra channel: the generator
sees a 3-channel corrupted image whose holes were filled by the data
module, and ground-truth pixels are restored by ``composite`` outside of
it. This is also the convention under which the reference parameter
count of 1,041,152 is exactly reproducible.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .tensor_ops import (
    BatchNormCache,
    BatchNormState,
    ConvSpec,
    batchnorm,
    batchnorm_backward,
    conv2d_forward,
    conv2d_backward,
    elu,
    elu_backward,
    leaky_relu,
    leaky_relu_backward,
    same_padding,
    upsample_nearest_x2,
    upsample_nearest_x2_backward,
)

# Reference design figures the default configuration must reproduce.
REFERENCE_RECEPTIVE_FIELDS = (3, 7, 23, 55, 119, 247)
REFERENCE_GENERATOR_PARAMS = 1_041_152
REFERENCE_DISCRIMINATOR_PARAMS = 1_556_416


def default_dilation_schedule(n_dilated: int) -> tuple[int, ...]:
    return tuple(2 ** (i + 1) for i in range(n_dilated))


@dataclass(frozen=True)
class GeneratorConfig:
    base_filters: int = 128
    kernel: int = 3
    downsample_layers: int = 2
    n_dilated: int = 4
    dilation_schedule: tuple[int, ...] | None = None
    decoder_layers: int = 3
    in_channels: int = 3
    out_channels: int = 3

    def __post_init__(self):
        if self.base_filters < 1:
            raise ValueError("base_filters must be >= 1")
        if self.kernel % 2 == 0 or self.kernel < 1:
            raise ValueError("kernel must be odd")
        if self.n_dilated < 1:
            raise ValueError("n_dilated must be >= 1")
        if self.dilation_schedule is None:
            object.__setattr__(
                self, "dilation_schedule", default_dilation_schedule(self.n_dilated)
            )
        if len(self.dilation_schedule) != self.n_dilated:
            raise ValueError(
                f"dilation schedule {self.dilation_schedule} does not cover "
                f"n_dilated = {self.n_dilated} layers"
            )
        if self.decoder_layers != self.downsample_layers + 1:
            raise ValueError(
                "decoder must have one layer at encoder resolution plus one "
                "per upsampling step "
                f"(expected {self.downsample_layers + 1}, got {self.decoder_layers})"
            )

    @property
    def encoder_depth(self) -> int:
        return self.downsample_layers + self.n_dilated

    @property
    def downsample_factor(self) -> int:
        return 2**self.downsample_layers


@dataclass(frozen=True)
class DiscriminatorConfig:
    layers: int = 5
    kernel: int = 3
    channel_schedule: tuple[int, ...] = (64, 128, 256, 512, 1)
    alpha: float = 0.2
    strides: tuple[int, ...] = (2, 2, 2, 2, 1)
    in_channels: int = 3

    def __post_init__(self):
        if len(self.channel_schedule) != self.layers:
            raise ValueError("channel_schedule must list one width per layer")
        if len(self.strides) != self.layers:
            raise ValueError("strides must list one stride per layer")
        if self.channel_schedule[-1] != 1:
            raise ValueError("final layer must emit a single judgement channel")
        for a, b in zip(self.channel_schedule, self.channel_schedule[1:-1]):
            if b != 2 * a:
                raise ValueError(
                    f"channel schedule must double up to the final layer, "
                    f"got {self.channel_schedule}"
                )


@dataclass
class ConvLayer:
    """One convolution with optional upsampling, normalization, activation."""

    name: str
    spec: ConvSpec
    weight: np.ndarray
    bias: np.ndarray | None = None
    bn: BatchNormState | None = None
    activation: str | None = None  # "elu" | "lrelu" | None
    alpha: float = 0.0
    upsample_before: bool = False


@dataclass
class GeneratorModel:
    config: GeneratorConfig
    layers: list[ConvLayer] = field(default_factory=list)


@dataclass
class DiscriminatorModel:
    config: DiscriminatorConfig
    layers: list[ConvLayer] = field(default_factory=list)


def identity_init(weights: np.ndarray, dilation: int = 1) -> np.ndarray:
    """Filter bank that passes its input through unchanged.

    Sets the centre tap to 1 on the matching in/out channel and zeroes
    everything else, so a stride-1 convolution with size-preserving
    padding computes the identity map regardless of ``dilation``.
    """
    out_ch, in_ch, kh, kw = weights.shape
    if out_ch != in_ch:
        raise ValueError(
            f"identity initialization needs matching channels, "
            f"got in={in_ch} out={out_ch}"
        )
    bank = np.zeros_like(weights)
    centre = kh // 2
    for c in range(out_ch):
        bank[c, c, centre, kw // 2] = 1.0
    return bank


def xavier_init(weights: np.ndarray, rng: np.random.Generator | int) -> np.ndarray:
    """Uniform samples in +-sqrt(6 / (fan_in + fan_out))."""
    if isinstance(rng, (int, np.integer)):
        rng = np.random.default_rng(rng)
    out_ch, in_ch, kh, kw = weights.shape
    fan_in = in_ch * kh * kw
    fan_out = out_ch * kh * kw
    bound = np.sqrt(6.0 / (fan_in + fan_out))
    return rng.uniform(-bound, bound, size=weights.shape).astype(weights.dtype)


def build_generator(
    config: GeneratorConfig, seed: int, dtype=np.float32
) -> GeneratorModel:
    """Assemble the inpainting generator; deterministic under ``seed``.

    Convolutions followed by batch norm carry no bias (absorbed by the BN
    shift); the final RGB convolution carries none either, matching the
    documented parameter-counting convention.
    """
    rng = np.random.default_rng(seed)
    f = config.base_filters
    k = config.kernel
    layers: list[ConvLayer] = []

    def conv(name, cin, cout, stride, dilation, init, up=False, last=False):
        spec = ConvSpec(
            in_channels=cin,
            out_channels=cout,
            kernel=k,
            stride=stride,
            dilation=dilation,
            padding=same_padding(k, dilation),
        )
        w = np.empty(spec.weight_shape(), dtype=dtype)
        w = identity_init(w, dilation) if init == "identity" else xavier_init(w, rng)
        layers.append(
            ConvLayer(
                name=name,
                spec=spec,
                weight=w,
                bn=None if last else BatchNormState.create(cout, dtype=dtype),
                activation=None if last else "elu",
                upsample_before=up,
            )
        )

    cin = config.in_channels
    for i in range(config.downsample_layers):
        conv(f"enc{i + 1}", cin, f, stride=2, dilation=1, init="xavier")
        cin = f
    for i, d in enumerate(config.dilation_schedule):
        conv(f"dil{i + 1}", f, f, stride=1, dilation=d, init="identity")
    conv("dec1", f, f, stride=1, dilation=1, init="xavier")
    for i in range(config.downsample_layers):
        last = i == config.downsample_layers - 1
        conv(
            f"dec{i + 2}",
            f,
            config.out_channels if last else f,
            stride=1,
            dilation=1,
            init="xavier",
            up=True,
            last=last,
        )
    return GeneratorModel(config=config, layers=layers)


def build_discriminator(
    config: DiscriminatorConfig, seed: int, dtype=np.float32
) -> DiscriminatorModel:
    """Assemble the patch critic; Xavier weights, zero biases."""
    rng = np.random.default_rng(seed)
    layers: list[ConvLayer] = []
    cin = config.in_channels
    for i, (cout, stride) in enumerate(zip(config.channel_schedule, config.strides)):
        last = i == config.layers - 1
        spec = ConvSpec(
            in_channels=cin,
            out_channels=cout,
            kernel=config.kernel,
            stride=stride,
            dilation=1,
            padding=same_padding(config.kernel, 1),
        )
        w = xavier_init(np.empty(spec.weight_shape(), dtype=dtype), rng)
        layers.append(
            ConvLayer(
                name=f"d{i + 1}",
                spec=spec,
                weight=w,
                bias=np.zeros(cout, dtype=dtype),
                activation=None if last else "lrelu",
                alpha=config.alpha,
            )
        )
        cin = cout
    return DiscriminatorModel(config=config, layers=layers)


def receptive_field(depth: int, config: GeneratorConfig) -> int:
    """Encoder receptive field after ``depth`` layers.

    RF grows by (kernel - 1) * dilation * (product of earlier strides)
    per layer, starting from RF = kernel at depth 1.
    """
    if not 1 <= depth <= config.encoder_depth:
        raise ValueError(
            f"depth must be in [1, {config.encoder_depth}], got {depth}"
        )
    dilations = [1] * config.downsample_layers + list(config.dilation_schedule)
    strides = [2] * config.downsample_layers + [1] * config.n_dilated
    rf = 1
    stride_product = 1
    for layer in range(depth):
        rf += (config.kernel - 1) * dilations[layer] * stride_product
        stride_product *= strides[layer]
    return rf


def encoder_dilations(config: GeneratorConfig) -> list[int]:
    """Dilation per encoder layer, in depth order."""
    return [1] * config.downsample_layers + list(config.dilation_schedule)


@dataclass(frozen=True)
class CountingConvention:
    conv_bias: bool
    bn_affine: bool
    mask_channel: bool

    def describe(self) -> str:
        return (
            f"conv_bias={'on' if self.conv_bias else 'off'}, "
            f"bn_affine={'on' if self.bn_affine else 'off'}, "
            f"mask_channel={'on' if self.mask_channel else 'off'}"
        )


# Convention under which the generator reference figure is reproduced
# exactly; confirmed by enumerating all eight combinations.
DOCUMENTED_CONVENTION = CountingConvention(
    conv_bias=False, bn_affine=True, mask_channel=False
)


def count_parameters(
    model: GeneratorModel | DiscriminatorModel,
    convention: CountingConvention = DOCUMENTED_CONVENTION,
) -> int:
    """Sum of parameter elements under the given counting convention.

    ``mask_channel`` counts the first convolution as if the mask were
    concatenated to its input (one extra input channel); ``conv_bias``
    counts one bias per output channel on every convolution; ``bn_affine``
    counts scale and shift for every batch-normalized layer.
    """
    total = 0
    for i, layer in enumerate(model.layers):
        spec = layer.spec
        cin = spec.in_channels + (1 if convention.mask_channel and i == 0 else 0)
        total += spec.out_channels * cin * spec.kernel * spec.kernel
        if convention.conv_bias:
            total += spec.out_channels
        if convention.bn_affine and layer.bn is not None:
            total += 2 * spec.out_channels
    return total


def enumerate_conventions(
    model: GeneratorModel | DiscriminatorModel,
) -> dict[CountingConvention, int]:
    """Parameter count for all eight counting conventions."""
    counts = {}
    for conv_bias in (False, True):
        for bn_affine in (False, True):
            for mask_channel in (False, True):
                convention = CountingConvention(conv_bias, bn_affine, mask_channel)
                counts[convention] = count_parameters(model, convention)
    return counts


@dataclass
class LayerCache:
    """Intermediates of one layer's forward pass, for its backward."""

    conv_input: np.ndarray
    pre_bn: np.ndarray
    bn_cache: BatchNormCache | None
    pre_act: np.ndarray | None
    upsampled: bool


def _layer_forward(
    layer: ConvLayer, x: np.ndarray, mode: str, want_cache: bool
) -> tuple[np.ndarray, LayerCache | None]:
    if layer.upsample_before:
        x = upsample_nearest_x2(x)
    y = conv2d_forward(x, layer.weight, layer.spec)
    if layer.bias is not None:
        y += layer.bias[None, :, None, None]
    pre_bn = y
    bn_cache = None
    if layer.bn is not None:
        y, bn_cache = batchnorm(y, layer.bn, mode)
    pre_act = None
    if layer.activation is not None:
        pre_act = y
        y = elu(y) if layer.activation == "elu" else leaky_relu(y, layer.alpha)
    cache = None
    if want_cache:
        cache = LayerCache(x, pre_bn, bn_cache, pre_act, layer.upsample_before)
    return y, cache


def _layer_backward(
    layer: ConvLayer, cache: LayerCache, grad_out: np.ndarray
) -> tuple[np.ndarray, dict[str, np.ndarray]]:
    grads: dict[str, np.ndarray] = {}
    g = grad_out
    if layer.activation is not None:
        if layer.activation == "elu":
            g = elu_backward(cache.pre_act, g)
        else:
            g = leaky_relu_backward(cache.pre_act, g, layer.alpha)
    if layer.bn is not None:
        g, g_gamma, g_beta = batchnorm_backward(cache.bn_cache, g)
        grads[f"{layer.name}/gamma"] = g_gamma
        grads[f"{layer.name}/beta"] = g_beta
    if layer.bias is not None:
        grads[f"{layer.name}/bias"] = g.sum(axis=(0, 2, 3))
    g_in, g_w = conv2d_backward(cache.conv_input, layer.weight, g, layer.spec)
    grads[f"{layer.name}/weight"] = g_w
    if cache.upsampled:
        g_in = upsample_nearest_x2_backward(g_in)
    return g_in, grads


def generator_forward(
    model: GeneratorModel, x_corrupt: np.ndarray, mode: str = "eval",
    want_cache: bool = False,
) -> tuple[np.ndarray, list[LayerCache] | None]:
    """Run the corrupted image through the generator.

    Train mode updates BN running statistics; pass ``want_cache=True`` to
    collect the intermediates ``generator_backward`` needs.
    """
    caches = [] if want_cache else None
    y = x_corrupt
    for layer in model.layers:
        y, cache = _layer_forward(layer, y, mode, want_cache)
        if want_cache:
            caches.append(cache)
    return y, caches


def generator_backward(
    model: GeneratorModel, caches: list[LayerCache], grad_out: np.ndarray
) -> dict[str, np.ndarray]:
    """Parameter gradients from a cached train-mode forward."""
    grads: dict[str, np.ndarray] = {}
    g = grad_out
    for layer, cache in zip(reversed(model.layers), reversed(caches)):
        g, layer_grads = _layer_backward(layer, cache, g)
        grads.update(layer_grads)
    return grads


def discriminator_forward(
    model: DiscriminatorModel, x: np.ndarray, want_cache: bool = False
) -> tuple[np.ndarray, list[LayerCache] | None]:
    """Per-patch judgement logits for a batch of images."""
    caches = [] if want_cache else None
    y = x
    for layer in model.layers:
        y, cache = _layer_forward(layer, y, "eval", want_cache)
        if want_cache:
            caches.append(cache)
    return y, caches


def discriminator_backward(
    model: DiscriminatorModel, caches: list[LayerCache], grad_logits: np.ndarray
) -> tuple[dict[str, np.ndarray], np.ndarray]:
    """Parameter gradients plus the gradient w.r.t. the input image."""
    grads: dict[str, np.ndarray] = {}
    g = grad_logits
    for layer, cache in zip(reversed(model.layers), reversed(caches)):
        g, layer_grads = _layer_backward(layer, cache, g)
        grads.update(layer_grads)
    return grads, g


def composite(y: np.ndarray, x: np.ndarray, mask: np.ndarray) -> np.ndarray:
    """Restore ground-truth pixels outside the mask: mask*y + (1-mask)*x.

    Selection is bit-exact: pixels where the mask is 0 are copied from
    ``x`` unchanged.
    """
    if y.shape != x.shape:
        raise ValueError(f"output shape {y.shape} != ground truth shape {x.shape}")
    if mask.shape[-2:] != x.shape[-2:]:
        raise ValueError(
            f"mask spatial dims {mask.shape[-2:]} != image dims {x.shape[-2:]}"
        )
    return np.where(mask > 0.5, y, x)


def named_parameters(
    model: GeneratorModel | DiscriminatorModel,
) -> dict[str, np.ndarray]:
    """Trainable arrays keyed by the same names the backward passes emit."""
    params: dict[str, np.ndarray] = {}
    for layer in model.layers:
        params[f"{layer.name}/weight"] = layer.weight
        if layer.bias is not None:
            params[f"{layer.name}/bias"] = layer.bias
        if layer.bn is not None:
            params[f"{layer.name}/gamma"] = layer.bn.gamma
            params[f"{layer.name}/beta"] = layer.bn.beta
    return params


def set_parameter(
    model: GeneratorModel | DiscriminatorModel, name: str, value: np.ndarray
) -> None:
    layer_name, kind = name.split("/")
    for layer in model.layers:
        if layer.name != layer_name:
            continue
        if kind == "weight":
            layer.weight = value
        elif kind == "bias":
            layer.bias = value
        elif kind == "gamma":
            layer.bn.gamma = value
        elif kind == "beta":
            layer.bn.beta = value
        else:
            raise KeyError(name)
        return
    raise KeyError(name)


def named_buffers(
    model: GeneratorModel | DiscriminatorModel,
) -> dict[str, np.ndarray]:
    """Non-trainable state: batch-norm running statistics and counters."""
    buffers: dict[str, np.ndarray] = {}
    for layer in model.layers:
        if layer.bn is not None:
            buffers[f"{layer.name}/running_mean"] = layer.bn.running_mean
            buffers[f"{layer.name}/running_var"] = layer.bn.running_var
            buffers[f"{layer.name}/batches_seen"] = np.array(
                layer.bn.batches_seen, dtype=np.int64
            )
    return buffers


def set_buffer(
    model: GeneratorModel | DiscriminatorModel, name: str, value: np.ndarray
) -> None:
    layer_name, kind = name.split("/")
    for layer in model.layers:
        if layer.name != layer_name or layer.bn is None:
            continue
        if kind == "running_mean":
            layer.bn.running_mean = value
        elif kind == "running_var":
            layer.bn.running_var = value
        elif kind == "batches_seen":
            layer.bn.batches_seen = int(value)
        else:
            raise KeyError(name)
        return
    raise KeyError(name)
