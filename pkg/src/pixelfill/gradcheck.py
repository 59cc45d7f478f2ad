"""Finite-difference verification of every analytic backward pass.

Each suite draws randomized small cases, builds a scalar loss around one
primitive (or a small composite), and compares the analytic gradient
against central differences in float64. Inputs are nudged away from the
non-differentiable points of elu / leaky_relu / |x| so the two-sided
difference stays on one branch.

The suites double as the ``gradcheck`` CLI subcommand and as the
acceptance evidence that backpropagation through every layer type is
correct.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .loss import (
    discriminator_loss_from_logits,
    generator_adv_loss_from_logits,
    masked_l1,
    masked_l1_grad,
)
from .model import (
    DiscriminatorConfig,
    GeneratorConfig,
    build_discriminator,
    build_generator,
    discriminator_backward,
    discriminator_forward,
    generator_backward,
    generator_forward,
    named_parameters,
)
from .tensor_ops import (
    BatchNormState,
    ConvSpec,
    batchnorm,
    batchnorm_backward,
    conv2d_backward,
    conv2d_forward,
    elu,
    elu_backward,
    leaky_relu,
    leaky_relu_backward,
    same_padding,
    upsample_nearest_x2,
    upsample_nearest_x2_backward,
)

DEFAULT_EPS = 1e-6
DEFAULT_CASES = 24


def numerical_grad(loss_fn, x: np.ndarray, eps: float = DEFAULT_EPS) -> np.ndarray:
    """Central-difference gradient of a scalar loss w.r.t. ``x``.

    ``loss_fn`` takes no arguments and must re-read ``x``, which is
    perturbed in place one element at a time and restored afterwards.
    """
    if x.dtype != np.float64:
        raise ValueError(f"finite differences need float64 inputs, got {x.dtype}")
    grad = np.zeros_like(x)
    flat = x.reshape(-1)
    gflat = grad.reshape(-1)
    for i in range(flat.size):
        orig = flat[i]
        flat[i] = orig + eps
        f_plus = loss_fn()
        flat[i] = orig - eps
        f_minus = loss_fn()
        flat[i] = orig
        gflat[i] = (f_plus - f_minus) / (2.0 * eps)
    return grad


def numerical_grad_sampled(
    loss_fn, x: np.ndarray, indices, eps: float = DEFAULT_EPS
) -> np.ndarray:
    """Central differences at a subset of flat indices (others zero)."""
    grad = np.zeros_like(x)
    flat = x.reshape(-1)
    gflat = grad.reshape(-1)
    for i in indices:
        orig = flat[i]
        flat[i] = orig + eps
        f_plus = loss_fn()
        flat[i] = orig - eps
        f_minus = loss_fn()
        flat[i] = orig
        gflat[i] = (f_plus - f_minus) / (2.0 * eps)
    return grad


def relative_error(analytic: np.ndarray, numeric: np.ndarray) -> float:
    """max |a - n| / max(|a| + |n|, 1), elementwise."""
    a = np.asarray(analytic, dtype=np.float64)
    n = np.asarray(numeric, dtype=np.float64)
    denom = np.maximum(np.abs(a) + np.abs(n), 1.0)
    return float(np.max(np.abs(a - n) / denom))


def _away_from_kink(x: np.ndarray, margin: float = 0.05) -> np.ndarray:
    """Shift values within ``margin`` of 0 outward so finite differences
    never straddle a piecewise boundary."""
    return np.where(np.abs(x) < margin, x + 2.0 * margin * np.where(x >= 0, 1.0, -1.0), x)


# ---------------------------------------------------------------------------
# Per-primitive cases; each returns the worst relative error it saw
# ---------------------------------------------------------------------------


def _case_conv(
    rng: np.random.Generator, stride: int | None = None, dilation: int | None = None
) -> float:
    if stride is None:
        stride = int(rng.integers(1, 3))
    if dilation is None:
        dilation = int(rng.choice([1, 1, 2, 4, 8, 16]))
    cin = int(rng.integers(1, 4))
    cout = int(rng.integers(1, 4))
    n = int(rng.integers(1, 3))
    size = int(rng.integers(4, 9))
    spec = ConvSpec(
        in_channels=cin,
        out_channels=cout,
        kernel=3,
        stride=stride,
        dilation=dilation,
        padding=same_padding(3, dilation),
    )
    x = rng.standard_normal((n, cin, size, size))
    w = rng.standard_normal(spec.weight_shape())
    out = conv2d_forward(x, w, spec)
    weights = rng.standard_normal(out.shape)

    def loss():
        return float((conv2d_forward(x, w, spec) * weights).sum())

    gx, gw = conv2d_backward(x, w, weights, spec)
    return max(
        relative_error(gx, numerical_grad(loss, x)),
        relative_error(gw, numerical_grad(loss, w)),
    )


def _case_elu(rng: np.random.Generator) -> float:
    shape = (int(rng.integers(1, 3)), int(rng.integers(1, 5)), 4, 4)
    x = _away_from_kink(rng.standard_normal(shape))
    weights = rng.standard_normal(shape)

    def loss():
        return float((elu(x) * weights).sum())

    return relative_error(elu_backward(x, weights), numerical_grad(loss, x))


def _case_leaky_relu(rng: np.random.Generator) -> float:
    shape = (int(rng.integers(1, 3)), int(rng.integers(1, 5)), 4, 4)
    alpha = float(rng.uniform(0.05, 0.5))
    x = _away_from_kink(rng.standard_normal(shape))
    weights = rng.standard_normal(shape)

    def loss():
        return float((leaky_relu(x, alpha) * weights).sum())

    return relative_error(
        leaky_relu_backward(x, weights, alpha), numerical_grad(loss, x)
    )


def _case_batchnorm(rng: np.random.Generator) -> float:
    n = int(rng.integers(2, 4))
    c = int(rng.integers(1, 4))
    h = int(rng.integers(2, 5))
    x = rng.standard_normal((n, c, h, h))
    state = BatchNormState.create(c, dtype=np.float64)
    state.gamma = rng.standard_normal(c)
    state.beta = rng.standard_normal(c)
    weights = rng.standard_normal(x.shape)

    def loss():
        return float((batchnorm(x, state, "train")[0] * weights).sum())

    _, cache = batchnorm(x, state, "train")
    gx, ggamma, gbeta = batchnorm_backward(cache, weights)
    return max(
        relative_error(gx, numerical_grad(loss, x)),
        relative_error(ggamma, numerical_grad(loss, state.gamma)),
        relative_error(gbeta, numerical_grad(loss, state.beta)),
    )


def _case_upsample(rng: np.random.Generator) -> float:
    shape = (int(rng.integers(1, 3)), int(rng.integers(1, 4)), 3, 3)
    x = rng.standard_normal(shape)
    weights = rng.standard_normal((shape[0], shape[1], 6, 6))

    def loss():
        return float((upsample_nearest_x2(x) * weights).sum())

    return relative_error(
        upsample_nearest_x2_backward(weights), numerical_grad(loss, x)
    )


def _case_masked_l1(rng: np.random.Generator) -> float:
    n, c, s = int(rng.integers(1, 3)), 3, int(rng.integers(3, 6))
    target = rng.standard_normal((n, c, s, s))
    y = rng.standard_normal((n, c, s, s))
    # keep |y - target| off the absolute-value kink
    y = target + _away_from_kink(y - target)
    mask = (rng.random((n, 1, s, s)) < 0.5).astype(np.float64)
    if mask.sum() == 0:
        mask[0, 0, 0, 0] = 1.0

    def loss():
        return masked_l1(y, target, mask)

    return relative_error(masked_l1_grad(y, target, mask), numerical_grad(loss, y))


def _tiny_discriminator(rng: np.random.Generator):
    config = DiscriminatorConfig(channel_schedule=(2, 4, 8, 16, 1))
    disc = build_discriminator(config, seed=int(rng.integers(0, 2**31)), dtype=np.float64)
    return disc


def _case_gan_loss(rng: np.random.Generator) -> float:
    """Adversarial losses, differentiated through a small critic."""
    disc = _tiny_discriminator(rng)
    s = 8
    real = rng.standard_normal((1, 3, s, s))
    fake = rng.standard_normal((1, 3, s, s))
    variant = "non_saturating" if rng.random() < 0.5 else "minimax"

    def gen_loss():
        logits, _ = discriminator_forward(disc, fake)
        return generator_adv_loss_from_logits(logits, variant)[0]

    logits, caches = discriminator_forward(disc, fake, want_cache=True)
    _, g_logits = generator_adv_loss_from_logits(logits, variant)
    _, g_fake = discriminator_backward(disc, caches, g_logits)
    err = relative_error(g_fake, numerical_grad(gen_loss, fake))

    def d_loss():
        rl, _ = discriminator_forward(disc, real)
        fl, _ = discriminator_forward(disc, fake)
        return discriminator_loss_from_logits(rl, fl)[0]

    rl, rcaches = discriminator_forward(disc, real, want_cache=True)
    fl, fcaches = discriminator_forward(disc, fake, want_cache=True)
    _, g_real, g_fake_d = discriminator_loss_from_logits(rl, fl)
    grads_r, _ = discriminator_backward(disc, rcaches, g_real)
    grads_f, _ = discriminator_backward(disc, fcaches, g_fake_d)
    params = named_parameters(disc)
    for name in ("d1/weight", "d3/bias", "d5/weight"):
        analytic = grads_r[name] + grads_f[name]
        arr = params[name]
        k = min(8, arr.size)
        idx = rng.choice(arr.size, size=k, replace=False)
        numeric = numerical_grad_sampled(d_loss, arr, idx)
        picked = np.zeros_like(arr)
        picked.reshape(-1)[idx] = analytic.reshape(-1)[idx]
        err = max(err, relative_error(picked, numeric))
    return err


def _case_generator(rng: np.random.Generator) -> float:
    """End-to-end parameter gradients through a miniature generator."""
    config = GeneratorConfig(base_filters=3, n_dilated=2)
    gen = build_generator(config, seed=int(rng.integers(0, 2**31)), dtype=np.float64)
    x = rng.standard_normal((2, 3, 8, 8))
    y, _ = generator_forward(gen, x, mode="train", want_cache=True)
    weights = rng.standard_normal(y.shape)

    def loss():
        out, _ = generator_forward(gen, x, mode="train", want_cache=False)
        return float((out * weights).sum())

    _, caches = generator_forward(gen, x, mode="train", want_cache=True)
    grads = generator_backward(gen, caches, weights)
    params = named_parameters(gen)
    err = 0.0
    names = list(params)
    for name in rng.choice(names, size=4, replace=False):
        arr = params[name]
        k = min(6, arr.size)
        idx = rng.choice(arr.size, size=k, replace=False)
        numeric = numerical_grad_sampled(loss, arr, idx)
        picked = np.zeros_like(arr)
        picked.reshape(-1)[idx] = grads[name].reshape(-1)[idx]
        err = max(err, relative_error(picked, numeric))
    return err


SUITES = {
    "conv": _case_conv,
    "elu": _case_elu,
    "leaky_relu": _case_leaky_relu,
    "batchnorm": _case_batchnorm,
    "upsample": _case_upsample,
    "masked_l1": _case_masked_l1,
    "gan_loss": _case_gan_loss,
    "generator": _case_generator,
}


@dataclass
class SuiteResult:
    name: str
    cases: int
    max_rel_err: float

    def passed(self, tolerance: float = 1e-5) -> bool:
        return self.max_rel_err <= tolerance


def run_suite(name: str, cases: int = DEFAULT_CASES, seed: int = 0) -> SuiteResult:
    if name not in SUITES:
        raise ValueError(f"unknown gradcheck suite {name!r}; have {sorted(SUITES)}")
    case_fn = SUITES[name]
    worst = 0.0
    for i in range(cases):
        rng = np.random.default_rng([seed, i])
        worst = max(worst, case_fn(rng))
    return SuiteResult(name=name, cases=cases, max_rel_err=worst)


def run_all(cases: int = DEFAULT_CASES, seed: int = 0) -> list[SuiteResult]:
    return [run_suite(name, cases=cases, seed=seed) for name in SUITES]
