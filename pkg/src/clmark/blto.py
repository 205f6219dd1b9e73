"""Bi-level trigger optimization.

The inner loop trains a surrogate contrastive encoder on the poisoned set;
the outer loop performs gradient ascent on a bounded additive perturbation
field, maximizing cosine similarity between encoded augmented generator
outputs and encoded augmented reference images, with the surrogate frozen.
"""

from __future__ import annotations

from dataclasses import dataclass, field, replace

import numpy as np

from clmark.cltrain import (
    EncoderModel,
    TrainConfig,
    _backward,
    _forward,
    aug_plan_backward,
    apply_aug_plan,
    pretrain,
    sample_aug_plan,
)
from clmark.errors import InvalidInputError
from clmark.imagecore import ImageTensor


@dataclass(frozen=True)
class TriggerGenerator:
    """Bounded additive perturbation field: clamp(img + clamp(delta, +-eps))."""

    shape: tuple[int, int, int]
    params: np.ndarray  # flat delta field, h*w*c
    linf_bound: float = 0.15

    def __post_init__(self):
        h, w, c = self.shape
        params = np.asarray(self.params, dtype=np.float64)
        if params.shape != (h * w * c,):
            raise InvalidInputError("generator params must match shape h*w*c")
        if not np.all(np.isfinite(params)):
            raise InvalidInputError("generator params contain non-finite values")
        if self.linf_bound <= 0:
            raise InvalidInputError("linf_bound must be > 0")
        params.setflags(write=False)
        object.__setattr__(self, "params", params)
        object.__setattr__(self, "shape", tuple(int(d) for d in self.shape))

    def delta(self) -> np.ndarray:
        """The effective perturbation field, clamped to +-eps."""
        return np.clip(self.params.reshape(self.shape), -self.linf_bound, self.linf_bound)


@dataclass(frozen=True)
class BltoConfig:
    inner_steps: int = 200
    outer_steps: int = 20
    alternations: int = 2
    inner_lr: float = 0.5
    outer_lr: float = 1.0
    seed: int = 0
    surrogate: TrainConfig = field(default_factory=TrainConfig)
    linf_bound: float = 0.15
    probe_batch: int = 32

    def __post_init__(self):
        if min(self.inner_steps, self.outer_steps) < 1:
            raise InvalidInputError("inner_steps and outer_steps must be >= 1")
        if self.alternations < 0:
            raise InvalidInputError("alternations must be >= 0")
        if self.inner_lr <= 0 or self.outer_lr <= 0:
            raise InvalidInputError("learning rates must be > 0")


def init_generator(shape: tuple[int, int, int], linf_bound: float, seed: int) -> TriggerGenerator:
    rng = np.random.default_rng(seed)
    h, w, c = shape
    params = rng.uniform(-0.1 * linf_bound, 0.1 * linf_bound, size=h * w * c)
    return TriggerGenerator(shape, params, linf_bound)


def apply_generator(gen: TriggerGenerator, img: ImageTensor) -> ImageTensor:
    """clamp(img + clamp(delta, +-eps), [0, 1])."""
    if img.data.shape != gen.shape:
        raise InvalidInputError(
            f"image shape {img.data.shape} does not match generator {gen.shape}"
        )
    return img.with_data(img.data + gen.delta())


def inner_train(
    dataset: list[ImageTensor],
    refs: list[ImageTensor],
    gen: TriggerGenerator,
    cfg: BltoConfig,
) -> EncoderModel:
    """Train the surrogate on dataset union generator-transformed refs."""
    if not refs:
        raise InvalidInputError("refs must be non-empty")
    poisoned = dataset + [apply_generator(gen, r) for r in refs]
    surrogate_cfg = replace(
        cfg.surrogate, seed=cfg.seed, learning_rate=cfg.inner_lr, epochs=max(1, cfg.surrogate.epochs)
    )
    model, _trace = pretrain(poisoned, surrogate_cfg, max_steps=cfg.inner_steps)
    return model


def blto_objective(
    gen: TriggerGenerator,
    surrogate: EncoderModel,
    probe_imgs: list[ImageTensor],
    refs: list[ImageTensor],
    cfg: BltoConfig,
    rng,
) -> tuple[float, np.ndarray]:
    """Mean cosine similarity objective and its gradient w.r.t. the raw
    generator parameters (through the frozen surrogate)."""
    h, w, c = gen.shape
    aug = cfg.surrogate.augmentation
    delta = gen.delta()
    raw = gen.params.reshape(gen.shape)
    inner_mask = (np.abs(raw) < gen.linf_bound).astype(np.float64)

    n = len(probe_imgs)
    ref_feats = []
    for r in refs:
        plan = sample_aug_plan(h, w, c, aug, rng)
        view = apply_aug_plan(plan, r.data).ravel()
        out, _ = _forward(surrogate.arch, surrogate.params, surrogate.activation, view[None, :])
        ref_feats.append(out[0])
    ref_feats = np.stack(ref_feats)
    ref_hat = ref_feats / np.linalg.norm(ref_feats, axis=1, keepdims=True)
    ref_mean = ref_hat.mean(axis=0)

    total = 0.0
    grad = np.zeros_like(raw)
    for img in probe_imgs:
        poisoned = img.data + delta
        clip_mask = ((poisoned > 0.0) & (poisoned < 1.0)).astype(np.float64)
        poisoned = np.clip(poisoned, 0.0, 1.0)
        plan = sample_aug_plan(h, w, c, aug, rng)
        view = apply_aug_plan(plan, poisoned).ravel()
        z, cache = _forward(surrogate.arch, surrogate.params, surrogate.activation, view[None, :])
        z = z[0]
        nz = np.linalg.norm(z)
        if nz == 0:
            continue
        zh = z / nz
        # objective term: mean over refs of cos(z, ref) = zh . ref_mean
        total += float(zh @ ref_mean)
        g_z = (ref_mean - (zh @ ref_mean) * zh) / nz
        _, g_view = _backward(surrogate.arch, surrogate.activation, cache, g_z[None, :])
        g_poisoned = aug_plan_backward(plan, poisoned, g_view.reshape(h, w, c))
        grad += g_poisoned * clip_mask
    total /= n
    grad = grad * inner_mask / n
    return total, grad.ravel()


def outer_step(
    gen: TriggerGenerator,
    surrogate: EncoderModel,
    probe_imgs: list[ImageTensor],
    refs: list[ImageTensor],
    cfg: BltoConfig,
    rng=None,
) -> tuple[TriggerGenerator, float, float]:
    """One gradient-ascent step on the generator; surrogate held fixed.

    Returns (new generator, objective before, objective after). The same
    augmentation draws are reused for the after-measurement so the pair is
    comparable.
    """
    if rng is None:
        rng = np.random.default_rng(cfg.seed)
    state = rng.bit_generator.state
    before, grad = blto_objective(gen, surrogate, probe_imgs, refs, cfg, rng)
    new_params = gen.params + cfg.outer_lr * grad
    new_gen = TriggerGenerator(gen.shape, new_params, gen.linf_bound)
    rng_replay = np.random.default_rng()
    rng_replay.bit_generator.state = state
    after, _ = blto_objective(new_gen, surrogate, probe_imgs, refs, cfg, rng_replay)
    return new_gen, before, after


@dataclass(frozen=True)
class BltoResult:
    generator: TriggerGenerator
    trace: list[float]
    surrogate: "EncoderModel"
    initial_objective: float
    final_objective: float


def run_blto(
    dataset: list[ImageTensor],
    refs: list[ImageTensor],
    cfg: BltoConfig,
) -> "BltoResult":
    """Alternate inner surrogate training and outer generator ascent.

    The objective trace restarts whenever the surrogate is retrained, so
    cross-alternation comparisons use :attr:`BltoResult.initial_objective` /
    :attr:`final_objective`, both measured under the final surrogate with the
    same probe batch.
    """
    if not dataset:
        raise InvalidInputError("dataset is empty")
    if not refs:
        raise InvalidInputError("refs must be non-empty")
    shape = dataset[0].data.shape
    gen0 = init_generator(shape, cfg.linf_bound, cfg.seed)
    gen = gen0
    trace: list[float] = []
    rng = np.random.default_rng(np.random.SeedSequence([cfg.seed, 0xB170]))
    surrogate = None
    probe_imgs = dataset[: cfg.probe_batch]
    for _round in range(cfg.alternations):
        surrogate = inner_train(dataset, refs, gen, cfg)
        probe_idx = rng.choice(len(dataset), size=min(cfg.probe_batch, len(dataset)), replace=False)
        probe_imgs = [dataset[i] for i in probe_idx]
        for _step in range(cfg.outer_steps):
            gen, before, after = outer_step(gen, surrogate, probe_imgs, refs, cfg, rng)
            if not trace:
                trace.append(before)
            trace.append(after)
    if surrogate is None:
        surrogate = inner_train(dataset, refs, gen, cfg)
    state = rng.bit_generator.state
    initial, _ = blto_objective(gen0, surrogate, probe_imgs, refs, cfg, rng)
    rng.bit_generator.state = state
    final, _ = blto_objective(gen, surrogate, probe_imgs, refs, cfg, rng)
    return BltoResult(
        generator=gen,
        trace=trace,
        surrogate=surrogate,
        initial_objective=float(initial),
        final_objective=float(final),
    )
