"""Adversarial training loop for the inpainting generator.

Every random decision is drawn from a generator seeded with
``[seed, step, slot]``, so a given step always sees the same batch,
augmentation, and mask placement regardless of history. Resuming from a
checkpoint therefore only needs the step counter to reproduce the run
that would have happened without the interruption.

Each step: corrupt a batch, run the generator in train mode, restore the
ground-truth context pixels on the output, update the critic on the
real/composited pair, then update the generator on
``lambda * masked_l1 + (1 - lambda) * adversarial``. With
``lambda == 1`` the critic gives the generator no gradient, so the fast
path skips the critic update entirely and only evaluates it (forward
only) on logging steps.
"""

from __future__ import annotations

import json
import time
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np

from .checkpoint import load_checkpoint, save_checkpoint
from .data import (
    center_crop,
    corrupt,
    dataset_channel_means,
    hflip,
    image_to_tensor,
    load_image,
    make_mask,
    random_crop,
    resize_bilinear,
    rmse,
    psnr,
    tensor_to_image,
)
from .errors import DataError, NumericError
from .loss import (
    discriminator_loss,
    discriminator_loss_from_logits,
    generator_adv_loss,
    generator_adv_loss_from_logits,
    masked_l1,
    masked_l1_grad,
)
from .model import (
    DiscriminatorConfig,
    DiscriminatorModel,
    GeneratorConfig,
    GeneratorModel,
    build_discriminator,
    build_generator,
    composite,
    discriminator_backward,
    discriminator_forward,
    generator_backward,
    generator_forward,
    named_buffers,
    named_parameters,
    set_buffer,
    set_parameter,
)

# rng stream ids: one independent stream per kind of decision per step
SLOT_SAMPLE = 0  # which corpus entries form the batch
SLOT_AUG = 1  # crop placement and flip coins
SLOT_MASK = 2  # random mask placement
SLOT_EVAL = 3  # per-image masks during evaluation

TASKS = ("center", "random", "extrapolate")
FILL_MODES = ("mean", "zero")


def step_rng(seed: int, step: int, slot: int) -> np.random.Generator:
    """The rng stream for one decision slot of one training step."""
    return np.random.default_rng([seed, step, slot])


# ---------------------------------------------------------------------------
# Configuration
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class TrainConfig:
    task: str = "center"
    image_size: int = 256
    region_size: int = 128
    overlap: int = 4
    fill: str = "mean"
    lambda_weight: float = 0.999
    gan_variant: str = "non_saturating"
    lr: float = 2e-4
    beta1: float = 0.5
    beta2: float = 0.999
    eps: float = 1e-8
    batch_size: int = 4
    max_steps: int = 1000
    seed: int = 0
    base_filters: int = 128
    n_dilated: int = 4
    disc_filters: int = 64
    augment: bool = True
    log_every: int = 10
    checkpoint_every: int = 500
    plateau_window: int = 0  # 0 disables early stopping
    plateau_threshold: float = 0.005

    def __post_init__(self):
        if self.task not in TASKS:
            raise ValueError(f"task must be one of {TASKS}, got {self.task!r}")
        if self.fill not in FILL_MODES:
            raise ValueError(f"fill must be one of {FILL_MODES}, got {self.fill!r}")
        if self.image_size % 4 != 0 or self.image_size < 8:
            raise ValueError(
                f"image_size must be a multiple of 4 and >= 8 "
                f"(two stride-2 encoder layers), got {self.image_size}"
            )
        if not 0.0 <= self.lambda_weight <= 1.0:
            raise ValueError(f"lambda_weight must be in [0, 1], got {self.lambda_weight}")
        if self.batch_size < 1:
            raise ValueError("batch_size must be >= 1")
        if self.max_steps < 0:
            raise ValueError("max_steps must be >= 0")
        if self.log_every < 1:
            raise ValueError("log_every must be >= 1")

    def generator_config(self) -> GeneratorConfig:
        return GeneratorConfig(
            base_filters=self.base_filters, n_dilated=self.n_dilated
        )

    def discriminator_config(self) -> DiscriminatorConfig:
        f = self.disc_filters
        return DiscriminatorConfig(channel_schedule=(f, 2 * f, 4 * f, 8 * f, 1))


# ---------------------------------------------------------------------------
# Dataset and batching
# ---------------------------------------------------------------------------


class ImageDataset:
    """A corpus of file paths and/or preloaded uint8 (h, w, 3) images.

    ``example`` yields a fixed-size training image: shortest side scaled
    to ``image_size``, then a random crop and flip coin drawn from the
    given rng (or a centre crop with augmentation off).
    """

    def __init__(self, sources, image_size: int, augment: bool = True):
        self.sources = list(sources)
        self.image_size = image_size
        self.augment = augment

    def __len__(self) -> int:
        return len(self.sources)

    def raw(self, index: int) -> np.ndarray:
        src = self.sources[index]
        return src if isinstance(src, np.ndarray) else load_image(src)

    def example(self, index: int, rng: np.random.Generator) -> np.ndarray:
        img = self.raw(index)
        if min(img.shape[:2]) != self.image_size:
            img = resize_bilinear(img, self.image_size)
        if self.augment:
            img = random_crop(img, self.image_size, rng)
            return hflip(img, bool(rng.integers(0, 2)))
        return center_crop(img, self.image_size)

    def channel_means(self, limit: int | None = 512) -> np.ndarray:
        subset = self.sources if limit is None else self.sources[:limit]
        if not subset:
            raise DataError("cannot compute channel means of an empty dataset")
        arrays = [s for s in subset if isinstance(s, np.ndarray)]
        if len(arrays) == len(subset):
            stacked = [a.reshape(-1, 3).mean(axis=0) for a in arrays]
            return (np.mean(stacked, axis=0) / 255.0).astype(np.float32)
        return dataset_channel_means(subset, limit=None)


@dataclass
class Batch:
    x_real: np.ndarray  # (n, 3, s, s) float32 in [0, 1]
    x_corrupt: np.ndarray  # same, masked pixels replaced by the fill
    mask: np.ndarray  # (n, 1, s, s) float32, 1 on missing pixels


def assemble_batch(
    dataset: ImageDataset, config: TrainConfig, step: int, fill: np.ndarray
) -> Batch:
    """Deterministic batch for ``step``; independent of all other steps."""
    if len(dataset) == 0:
        raise DataError("cannot assemble a batch from an empty dataset")
    rng_sample = step_rng(config.seed, step, SLOT_SAMPLE)
    rng_aug = step_rng(config.seed, step, SLOT_AUG)
    rng_mask = step_rng(config.seed, step, SLOT_MASK)
    indices = rng_sample.integers(0, len(dataset), size=config.batch_size)
    images = [dataset.example(int(i), rng_aug) for i in indices]
    x_real = np.stack([image_to_tensor(im) for im in images])
    masks = []
    for _ in range(config.batch_size):
        masks.append(
            make_mask(
                config.task,
                config.image_size,
                config.region_size,
                config.overlap,
                rng=rng_mask if config.task == "random" else None,
            )
        )
    mask = np.stack(masks)[:, None].astype(np.float32)
    x_corrupt = corrupt(x_real, mask, fill)
    return Batch(x_real=x_real, x_corrupt=x_corrupt, mask=mask)


# ---------------------------------------------------------------------------
# Optimizer
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class AdamConfig:
    lr: float = 2e-4
    beta1: float = 0.5
    beta2: float = 0.999
    eps: float = 1e-8


class AdamState:
    """First/second moment estimates, one pair per parameter."""

    def __init__(self, params: dict[str, np.ndarray], config: AdamConfig):
        self.config = config
        self.t = 0
        self.m = {k: np.zeros_like(v) for k, v in params.items()}
        self.v = {k: np.zeros_like(v) for k, v in params.items()}


def adam_step(
    params: dict[str, np.ndarray], grads: dict[str, np.ndarray], state: AdamState
) -> None:
    """One bias-corrected update, applied to the parameters in place.

    A non-finite gradient aborts the run before it can poison the
    moments; the error names the offending parameter.
    """
    state.t += 1
    c = state.config
    bc1 = 1.0 - c.beta1**state.t
    bc2 = 1.0 - c.beta2**state.t
    for name in grads:
        g = grads[name]
        if not np.isfinite(g).all():
            raise NumericError(
                f"non-finite gradient for parameter {name!r} at optimizer "
                f"step {state.t}"
            )
        if name not in params:
            raise KeyError(f"gradient for unknown parameter {name!r}")
        m, v = state.m[name], state.v[name]
        m *= c.beta1
        m += (1.0 - c.beta1) * g
        v *= c.beta2
        v += (1.0 - c.beta2) * g * g
        params[name] -= c.lr * (m / bc1) / (np.sqrt(v / bc2) + c.eps)


# ---------------------------------------------------------------------------
# Trainer state and steps
# ---------------------------------------------------------------------------


@dataclass
class StepStats:
    step: int
    l1: float
    adv: float | None
    d_loss: float | None


@dataclass
class TrainerState:
    config: TrainConfig
    gen: GeneratorModel
    disc: DiscriminatorModel
    adam_gen: AdamState
    adam_disc: AdamState
    dataset: ImageDataset
    fill: np.ndarray  # (3,) float32 per-channel fill value in [0, 1]
    step: int = 0
    l1_history: list = field(default_factory=list)


def create_trainer(
    config: TrainConfig, sources, fill: np.ndarray | None = None
) -> TrainerState:
    """Fresh models and optimizers; ``fill`` defaults to the corpus mean."""
    dataset = ImageDataset(sources, config.image_size, augment=config.augment)
    if fill is None:
        if config.fill == "zero":
            fill = np.zeros(3, dtype=np.float32)
        else:
            fill = dataset.channel_means()
    fill = np.asarray(fill, dtype=np.float32).reshape(3)
    gen = build_generator(config.generator_config(), seed=config.seed)
    disc = build_discriminator(config.discriminator_config(), seed=config.seed + 1)
    adam_cfg = AdamConfig(
        lr=config.lr, beta1=config.beta1, beta2=config.beta2, eps=config.eps
    )
    return TrainerState(
        config=config,
        gen=gen,
        disc=disc,
        adam_gen=AdamState(named_parameters(gen), adam_cfg),
        adam_disc=AdamState(named_parameters(disc), adam_cfg),
        dataset=dataset,
        fill=fill,
    )


def _update_discriminator(
    state: TrainerState, real: np.ndarray, fake_comp: np.ndarray
) -> float:
    disc = state.disc
    real_logits, real_caches = discriminator_forward(disc, real, want_cache=True)
    fake_logits, fake_caches = discriminator_forward(disc, fake_comp, want_cache=True)
    loss, g_real, g_fake = discriminator_loss_from_logits(real_logits, fake_logits)
    grads_r, _ = discriminator_backward(disc, real_caches, g_real)
    grads_f, _ = discriminator_backward(disc, fake_caches, g_fake)
    grads = {k: grads_r[k] + grads_f[k] for k in grads_r}
    adam_step(named_parameters(disc), grads, state.adam_disc)
    return loss


def _update_generator(
    state: TrainerState,
    batch: Batch,
    y: np.ndarray,
    caches,
    comp: np.ndarray,
    want_adv: bool,
) -> tuple[float, float | None]:
    cfg = state.config
    lam = cfg.lambda_weight
    l1 = masked_l1(y, batch.x_real, batch.mask)
    g_y = lam * masked_l1_grad(y, batch.x_real, batch.mask)
    if lam >= 1.0:
        adv = (
            generator_adv_loss(state.disc, comp, cfg.gan_variant)
            if want_adv
            else None
        )
    else:
        fake_logits, fake_caches = discriminator_forward(
            state.disc, comp, want_cache=True
        )
        adv, g_logits = generator_adv_loss_from_logits(fake_logits, cfg.gan_variant)
        _, g_comp = discriminator_backward(state.disc, fake_caches, g_logits)
        # d comp / d y is the mask: context pixels come straight from x
        g_y = g_y + (1.0 - lam) * g_comp * batch.mask
    grads = generator_backward(state.gen, caches, g_y.astype(y.dtype, copy=False))
    adam_step(named_parameters(state.gen), grads, state.adam_gen)
    return l1, adv


def train_step(
    state: TrainerState,
    step: int,
    want_adv: bool = True,
    batch: Batch | None = None,
) -> StepStats:
    """One alternating critic/generator update on the batch for ``step``.

    ``batch`` overrides the deterministic per-step assembly, e.g. to hold
    the input fixed while overfitting.
    """
    cfg = state.config
    if batch is None:
        batch = assemble_batch(state.dataset, cfg, step, state.fill)
    y, caches = generator_forward(state.gen, batch.x_corrupt, "train", want_cache=True)
    comp = composite(y, batch.x_real, batch.mask)
    if cfg.lambda_weight >= 1.0:
        d_loss = (
            discriminator_loss(state.disc, batch.x_real, comp) if want_adv else None
        )
    else:
        d_loss = _update_discriminator(state, batch.x_real, comp)
    l1, adv = _update_generator(state, batch, y, caches, comp, want_adv)
    return StepStats(step=step, l1=l1, adv=adv, d_loss=d_loss)


def detect_plateau(history, window: int, threshold: float = 0.005) -> bool:
    """True when the trailing window improved on the one before it by
    less than ``threshold`` (relative), measured on mean train L1."""
    if window < 1 or len(history) < 2 * window:
        return False
    prev = float(np.mean(history[-2 * window : -window]))
    last = float(np.mean(history[-window:]))
    if prev <= 0.0:
        return True
    return (prev - last) / prev < threshold


# ---------------------------------------------------------------------------
# Checkpointing
# ---------------------------------------------------------------------------


def trainer_tensors(state: TrainerState) -> dict[str, np.ndarray]:
    tensors: dict[str, np.ndarray] = {"data/fill": state.fill}
    for name, arr in named_parameters(state.gen).items():
        tensors[f"gen/{name}"] = arr
    for name, arr in named_buffers(state.gen).items():
        tensors[f"gen_buf/{name}"] = arr
    for name, arr in named_parameters(state.disc).items():
        tensors[f"disc/{name}"] = arr
    for prefix, adam in (("adam_gen", state.adam_gen), ("adam_disc", state.adam_disc)):
        for name, arr in adam.m.items():
            tensors[f"{prefix}/m/{name}"] = arr
        for name, arr in adam.v.items():
            tensors[f"{prefix}/v/{name}"] = arr
        tensors[f"{prefix}/t"] = np.array(adam.t, dtype=np.int64)
    return tensors


def save_trainer_checkpoint(state: TrainerState, path) -> None:
    config = {"kind": "trainer", "train": asdict(state.config)}
    save_checkpoint(path, config, state.step, trainer_tensors(state))


def load_trainer(path, sources=()) -> TrainerState:
    """Rebuild a trainer from a checkpoint; batches resume at its step."""
    config_dict, step, tensors = load_checkpoint(path)
    if config_dict.get("kind") != "trainer" or "train" not in config_dict:
        raise DataError(f"{path}: checkpoint does not hold trainer state")
    try:
        config = TrainConfig(**config_dict["train"])
    except (TypeError, ValueError) as exc:
        raise DataError(f"{path}: bad train config in checkpoint: {exc}") from exc
    state = create_trainer(config, sources, fill=tensors["data/fill"])
    for key, arr in tensors.items():
        scope, _, rest = key.partition("/")
        if scope == "gen":
            set_parameter(state.gen, rest, arr)
        elif scope == "gen_buf":
            set_buffer(state.gen, rest, arr)
        elif scope == "disc":
            set_parameter(state.disc, rest, arr)
        elif scope in ("adam_gen", "adam_disc"):
            adam = state.adam_gen if scope == "adam_gen" else state.adam_disc
            if rest == "t":
                adam.t = int(arr)
                continue
            kind, _, pname = rest.partition("/")
            store = adam.m if kind == "m" else adam.v
            if pname not in store:
                raise DataError(f"{path}: optimizer moment for unknown {pname!r}")
            store[pname] = arr
        elif key != "data/fill":
            raise DataError(f"{path}: unrecognised tensor {key!r}")
    state.step = step
    return state


# ---------------------------------------------------------------------------
# Loop
# ---------------------------------------------------------------------------


def train_loop(state: TrainerState, out_dir) -> dict:
    """Run from the current step to ``max_steps`` (or a plateau).

    Appends one JSON record per logging step to ``train_log.jsonl`` and
    keeps ``checkpoint.bin`` fresh at the configured cadence plus at
    exit. ``max_steps == 0`` writes the initial checkpoint and returns.
    Plateau detection looks at the in-memory L1 history of this run
    only, so a resumed run restarts its window.
    """
    cfg = state.config
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    ckpt_path = out_dir / "checkpoint.bin"
    log_path = out_dir / "train_log.jsonl"
    start = state.step
    if start >= cfg.max_steps:
        save_trainer_checkpoint(state, ckpt_path)
        return {
            "steps_run": 0,
            "stop_reason": "max_steps",
            "final_l1": None,
            "checkpoint": str(ckpt_path),
            "log": str(log_path),
        }
    t0 = time.monotonic()
    stop_reason = "max_steps"
    with open(log_path, "a", encoding="utf-8") as log:
        for step in range(start, cfg.max_steps):
            is_log = (
                step == start
                or step == cfg.max_steps - 1
                or (step + 1) % cfg.log_every == 0
            )
            stats = train_step(
                state, step, want_adv=is_log or cfg.lambda_weight < 1.0
            )
            state.step = step + 1
            state.l1_history.append(stats.l1)
            if is_log:
                record = {
                    "step": state.step,
                    "l1": stats.l1,
                    "adv": stats.adv,
                    "d_loss": stats.d_loss,
                    "wall_time": time.monotonic() - t0,
                }
                log.write(json.dumps(record) + "\n")
                log.flush()
            if (
                cfg.checkpoint_every > 0
                and state.step % cfg.checkpoint_every == 0
            ):
                save_trainer_checkpoint(state, ckpt_path)
            if detect_plateau(
                state.l1_history, cfg.plateau_window, cfg.plateau_threshold
            ):
                stop_reason = "plateau"
                break
    save_trainer_checkpoint(state, ckpt_path)
    return {
        "steps_run": state.step - start,
        "stop_reason": stop_reason,
        "final_l1": state.l1_history[-1] if state.l1_history else None,
        "checkpoint": str(ckpt_path),
        "log": str(log_path),
    }


# ---------------------------------------------------------------------------
# Inference and evaluation
# ---------------------------------------------------------------------------


def prepare_eval_image(img: np.ndarray, image_size: int) -> np.ndarray:
    """Deterministic sizing for inference: scale shortest side, centre crop."""
    if img.shape[0] != image_size or img.shape[1] != image_size:
        img = center_crop(resize_bilinear(img, image_size), image_size)
    return img


def infer_images(
    gen: GeneratorModel,
    img: np.ndarray,
    mask: np.ndarray,
    fill: np.ndarray,
) -> dict[str, np.ndarray]:
    """Run one prepared image through the generator in eval mode.

    Returns uint8 images: the corrupted input, the raw network output,
    and the composite with context pixels restored.
    """
    x = image_to_tensor(img)[None]
    m = mask[None, None].astype(np.float32)
    xc = corrupt(x, m, fill)
    y, _ = generator_forward(gen, xc, mode="eval")
    comp = composite(y, x, m)
    return {
        "corrupted": tensor_to_image(xc[0]),
        "output": tensor_to_image(np.clip(y[0], 0.0, 1.0)),
        "composite": tensor_to_image(comp[0]),
        "mask": (mask * 255).astype(np.uint8),
    }


def evaluate(
    paths,
    config: TrainConfig,
    fill: np.ndarray,
    infer_fn,
    seed: int = 0,
    keep_records: bool = False,
) -> dict:
    """Corpus reconstruction quality on the configured task.

    ``infer_fn`` maps a corrupted (1, 3, s, s) tensor to the network
    output; metrics are pooled over images on the 0-255 scale, inside
    the corrupted region and over the full image, alongside the
    fill-only baseline. Unreadable files are skipped and counted.
    """
    s = config.image_size
    skipped = 0
    evaluated = 0
    records = []
    sq_region = sq_full = sq_base = 0.0
    n_region = n_full = 0
    for idx, p in enumerate(paths):
        try:
            img = prepare_eval_image(load_image(p) if not isinstance(p, np.ndarray) else p, s)
        except DataError:
            skipped += 1
            continue
        if config.task == "random":
            mask = make_mask(
                "random", s, config.region_size, config.overlap,
                rng=step_rng(seed, idx, SLOT_EVAL),
            )
        else:
            mask = make_mask(config.task, s, config.region_size, config.overlap)
        x = image_to_tensor(img)[None]
        m = mask[None, None].astype(np.float32)
        xc = corrupt(x, m, fill)
        y = infer_fn(xc)
        comp = composite(y, x, m)
        out_img = tensor_to_image(comp[0])
        base_img = tensor_to_image(xc[0])
        sel = mask > 0
        diff = out_img.astype(np.float64) - img.astype(np.float64)
        bdiff = base_img.astype(np.float64) - img.astype(np.float64)
        sq_region += float((diff[sel] ** 2).sum())
        sq_base += float((bdiff[sel] ** 2).sum())
        sq_full += float((diff**2).sum())
        n_region += int(sel.sum()) * 3
        n_full += diff.size
        evaluated += 1
        if keep_records:
            r = rmse(out_img, img, mask)
            records.append(
                {"path": str(p) if not isinstance(p, np.ndarray) else f"array:{idx}",
                 "rmse_region": r, "psnr_region": psnr(r)}
            )
    if n_region == 0:
        raise DataError("no images could be evaluated")
    rmse_region = float(np.sqrt(sq_region / n_region))
    rmse_full = float(np.sqrt(sq_full / n_full))
    rmse_base = float(np.sqrt(sq_base / n_region))
    result = {
        "count": evaluated,
        "skipped": skipped,
        "rmse_region": rmse_region,
        "psnr_region": psnr(rmse_region),
        "rmse_full": rmse_full,
        "psnr_full": psnr(rmse_full),
        "baseline_rmse_region": rmse_base,
        "baseline_psnr_region": psnr(rmse_base),
    }
    if keep_records:
        result["images"] = records
    return result


def generator_infer_fn(gen: GeneratorModel):
    """Wrap a trained generator as the ``infer_fn`` evaluate expects."""

    def run(x_corrupt: np.ndarray) -> np.ndarray:
        y, _ = generator_forward(gen, x_corrupt, mode="eval")
        return y

    return run
