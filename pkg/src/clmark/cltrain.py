"""Miniature contrastive-learning trainer.

A small fully-connected encoder with hand-written analytic gradients, the
NT-Xent and SimSiam objectives, a deterministic augmentation pipeline, and
a plain-SGD pretraining loop. Everything is seeded and single-threaded so
identical seeds yield bit-identical parameters.
"""

from __future__ import annotations

from dataclasses import dataclass, field, replace

import numpy as np

from clmark.errors import InvalidInputError
from clmark.imagecore import ImageTensor

FRAMEWORK_SIMCLR = "simclr"
FRAMEWORK_SIMSIAM = "simsiam"

_LUMA = np.array([0.299, 0.587, 0.114])


@dataclass(frozen=True)
class AugConfig:
    crop_scale: tuple[float, float] = (0.9, 1.0)
    flip_prob: float = 0.5
    color_jitter_strength: float = 0.8
    grayscale_prob: float = 0.2

    def __post_init__(self):
        lo, hi = self.crop_scale
        if not (0 < lo <= hi <= 1):
            raise InvalidInputError("crop_scale must lie in (0, 1] and be ordered")
        for p in (self.flip_prob, self.grayscale_prob):
            if not (0 <= p <= 1):
                raise InvalidInputError("probabilities must lie in [0, 1]")
        if self.color_jitter_strength < 0:
            raise InvalidInputError("color_jitter_strength must be >= 0")


@dataclass(frozen=True)
class TrainConfig:
    framework: str = FRAMEWORK_SIMCLR
    temperature: float = 1.0
    batch_size: int = 64
    epochs: int = 100
    learning_rate: float = 2.0
    seed: int = 0
    augmentation: AugConfig = field(default_factory=AugConfig)
    arch: tuple[int, ...] = (768, 256, 64)
    activation: str = "relu"

    def __post_init__(self):
        if self.framework not in (FRAMEWORK_SIMCLR, FRAMEWORK_SIMSIAM):
            raise InvalidInputError(f"unknown framework {self.framework!r}")
        if self.temperature <= 0:
            raise InvalidInputError("temperature must be > 0")
        if self.framework == FRAMEWORK_SIMCLR and self.batch_size < 2:
            raise InvalidInputError("SimCLR needs batch_size >= 2 for negatives")


@dataclass(frozen=True)
class EncoderModel:
    """Flat-parameter fully-connected encoder: input -> hidden dims -> features."""

    arch: tuple[int, ...]
    params: np.ndarray
    activation: str = "relu"

    def __post_init__(self):
        if len(self.arch) < 2:
            raise InvalidInputError("arch needs at least input and output dims")
        if self.activation not in ("relu", "tanh"):
            raise InvalidInputError(f"unknown activation {self.activation!r}")
        params = np.asarray(self.params, dtype=np.float64)
        if params.shape != (param_count(self.arch),):
            raise InvalidInputError(
                f"params length {params.size} does not match arch {self.arch}"
            )
        if not np.all(np.isfinite(params)):
            raise InvalidInputError("params contain non-finite values")
        params.setflags(write=False)
        object.__setattr__(self, "params", params)
        object.__setattr__(self, "arch", tuple(int(d) for d in self.arch))

    @property
    def feature_dim(self) -> int:
        return self.arch[-1]


def param_count(arch) -> int:
    return sum(arch[i] * arch[i + 1] + arch[i + 1] for i in range(len(arch) - 1))


def init_params(arch, seed: int, scale: float | None = None) -> np.ndarray:
    """He-style initialization. Biases start at a small positive constant so
    an all-zero input (e.g. a fully clipped dark augmented view) still maps to
    a nonzero feature vector, keeping the cosine losses well defined."""
    rng = np.random.default_rng(seed)
    chunks = []
    for i in range(len(arch) - 1):
        fan_in, fan_out = arch[i], arch[i + 1]
        std = scale if scale is not None else np.sqrt(2.0 / fan_in)
        chunks.append(rng.standard_normal(fan_in * fan_out) * std)
        chunks.append(np.full(fan_out, 0.01))
    return np.concatenate(chunks)


def _unpack(arch, params):
    layers = []
    off = 0
    for i in range(len(arch) - 1):
        fan_in, fan_out = arch[i], arch[i + 1]
        w = params[off : off + fan_in * fan_out].reshape(fan_in, fan_out)
        off += fan_in * fan_out
        b = params[off : off + fan_out]
        off += fan_out
        layers.append((w, b))
    return layers


def _forward(arch, params, activation, x):
    """Forward pass returning output and per-layer pre-activation cache."""
    layers = _unpack(arch, params)
    acts = [x]
    h = x
    for i, (w, b) in enumerate(layers):
        h = h @ w + b
        if i < len(layers) - 1:
            h = np.maximum(h, 0.0) if activation == "relu" else np.tanh(h)
        acts.append(h)
    return h, (layers, acts)


def _backward(arch, activation, cache, grad_out):
    """Gradients of a scalar loss w.r.t. flat params and the input batch."""
    layers, acts = cache
    grads = [None] * len(layers)
    g = grad_out
    for i in range(len(layers) - 1, -1, -1):
        w, _ = layers[i]
        if i < len(layers) - 1:
            h = acts[i + 1]
            if activation == "relu":
                g = g * (h > 0)
            else:
                g = g * (1.0 - h * h)
        x_in = acts[i]
        gw = x_in.T @ g
        gb = g.sum(axis=0)
        grads[i] = (gw, gb)
        g = g @ w.T
    flat = np.concatenate([np.concatenate([gw.ravel(), gb]) for gw, gb in grads])
    return flat, g


def encode(model: EncoderModel, img: ImageTensor) -> np.ndarray:
    """Deterministic feature vector for one image."""
    x = img.flat()
    if x.size != model.arch[0]:
        raise InvalidInputError(
            f"image has {x.size} scalars, encoder expects {model.arch[0]}"
        )
    out, _ = _forward(model.arch, model.params, model.activation, x[np.newaxis, :])
    return out[0]


def encode_batch(model: EncoderModel, batch: np.ndarray) -> np.ndarray:
    if batch.ndim != 2 or batch.shape[1] != model.arch[0]:
        raise InvalidInputError("batch must be (N, input_dim)")
    out, _ = _forward(model.arch, model.params, model.activation, batch)
    return out


def _check_nonzero(name, v):
    norms = np.linalg.norm(v, axis=-1)
    if np.any(norms == 0):
        raise InvalidInputError(f"{name} contains a zero vector; cosine undefined")


def ntxent_loss(z1: np.ndarray, z2: np.ndarray, temperature: float):
    """NT-Xent over a batch of paired views.

    Negatives for anchor i are all other in-batch views; the loss is
    averaged over both view directions. Returns (loss, (grad_z1, grad_z2)).
    """
    z1 = np.atleast_2d(np.asarray(z1, dtype=np.float64))
    z2 = np.atleast_2d(np.asarray(z2, dtype=np.float64))
    if z1.shape != z2.shape:
        raise InvalidInputError("z1 and z2 must have identical shapes")
    n = z1.shape[0]
    if n < 2:
        raise InvalidInputError("NT-Xent needs N >= 2 (no negatives otherwise)")
    if temperature <= 0:
        raise InvalidInputError("temperature must be > 0")
    _check_nonzero("z1", z1)
    _check_nonzero("z2", z2)

    z = np.vstack([z1, z2])
    norms = np.linalg.norm(z, axis=1, keepdims=True)
    zh = z / norms
    m = 2 * n
    sim = (zh @ zh.T) / temperature
    np.fill_diagonal(sim, -np.inf)  # exclude self from candidates
    partner = np.concatenate([np.arange(n, m), np.arange(0, n)])

    row_max = sim.max(axis=1, keepdims=True)
    expd = np.exp(sim - row_max)
    denom = expd.sum(axis=1)
    logsumexp = row_max[:, 0] + np.log(denom)
    pos = sim[np.arange(m), partner]
    loss = float(np.mean(logsumexp - pos))

    softmax = expd / denom[:, np.newaxis]
    g_sim = softmax
    g_sim[np.arange(m), partner] -= 1.0
    g_sim /= m
    g_zh = ((g_sim + g_sim.T) @ zh) / temperature
    # Through the normalization: dz = (g - (g . zh) zh) / ||z||
    proj = np.sum(g_zh * zh, axis=1, keepdims=True)
    g_z = (g_zh - proj * zh) / norms
    return loss, (g_z[:n], g_z[n:])


def _cos_and_grad_first(a: np.ndarray, b: np.ndarray):
    """Row-wise cosine and its gradient w.r.t. the first argument."""
    na = np.linalg.norm(a, axis=1, keepdims=True)
    nb = np.linalg.norm(b, axis=1, keepdims=True)
    ah, bh = a / na, b / nb
    cos = np.sum(ah * bh, axis=1, keepdims=True)
    grad = (bh - cos * ah) / na
    return cos[:, 0], grad


def simsiam_loss(p1, p2, z1, z2):
    """Symmetric negative cosine loss with stop-gradient on the z slots.

    Returns (loss, (grad_p1, grad_p2, grad_z1, grad_z2)); the z gradients
    are identically zero.
    """
    arrs = [np.atleast_2d(np.asarray(v, dtype=np.float64)) for v in (p1, p2, z1, z2)]
    p1a, p2a, z1a, z2a = arrs
    if not (p1a.shape == p2a.shape == z1a.shape == z2a.shape):
        raise InvalidInputError("all four inputs must have identical shapes")
    for name, v in zip(("p1", "p2", "z1", "z2"), arrs):
        _check_nonzero(name, v)
    n = p1a.shape[0]
    c1, g1 = _cos_and_grad_first(p1a, z2a)
    c2, g2 = _cos_and_grad_first(p2a, z1a)
    loss = float(-0.5 * np.mean(c1 + c2))
    scale = -0.5 / n
    gp1 = scale * g1
    gp2 = scale * g2
    if np.asarray(p1).ndim == 1:
        gp1, gp2 = gp1[0], gp2[0]
        return loss, (gp1, gp2, np.zeros_like(gp1), np.zeros_like(gp2))
    return loss, (gp1, gp2, np.zeros(z1a.shape), np.zeros(z2a.shape))


@dataclass(frozen=True)
class AugPlan:
    """A sampled augmentation as an explicit linear-then-clip pipeline."""

    index_map: np.ndarray  # flat source pixel index per output pixel
    channel_matrix: np.ndarray  # (C, C), includes contrast scale
    bias: np.ndarray  # (C,)


def sample_aug_plan(h: int, w: int, c: int, cfg: AugConfig, rng) -> AugPlan:
    # random resized crop (nearest-neighbor resample back)
    s = rng.uniform(cfg.crop_scale[0], cfg.crop_scale[1])
    side = np.sqrt(s)
    ch_ = max(1, int(round(h * side)))
    cw_ = max(1, int(round(w * side)))
    y0 = int(rng.integers(0, h - ch_ + 1))
    x0 = int(rng.integers(0, w - cw_ + 1))
    src_y = y0 + np.minimum((np.arange(h) * ch_) // h, ch_ - 1)
    src_x = x0 + np.minimum((np.arange(w) * cw_) // w, cw_ - 1)
    flip = rng.random() < cfg.flip_prob
    if flip:
        src_x = src_x[::-1]
    index_map = (src_y[:, np.newaxis] * w + src_x[np.newaxis, :]).ravel()

    # color jitter: contrast around mid-gray plus brightness shift
    sj = cfg.color_jitter_strength
    contrast = rng.uniform(1.0 - sj, 1.0 + sj)
    brightness = rng.uniform(-sj, sj)
    gray = rng.random() < cfg.grayscale_prob
    if gray and c == 3:
        mix = np.tile(_LUMA, (3, 1))
    else:
        mix = np.eye(c)
    channel_matrix = contrast * mix
    bias = np.full(c, (1.0 - contrast) * 0.5 + brightness)
    return AugPlan(index_map, channel_matrix, bias)


def apply_aug_plan(plan: AugPlan, data: np.ndarray) -> np.ndarray:
    """Apply a plan to HxWxC data, returning the clipped HxWxC view."""
    h, w, c = data.shape
    gathered = data.reshape(h * w, c)[plan.index_map]
    out = gathered @ plan.channel_matrix.T + plan.bias
    return np.clip(out, 0.0, 1.0).reshape(h, w, c)


def aug_plan_backward(plan: AugPlan, data: np.ndarray, grad_view: np.ndarray) -> np.ndarray:
    """Gradient of a scalar loss w.r.t. the input data, given the gradient
    w.r.t. the (clipped) augmented view. Clip uses the pass-through subgradient."""
    h, w, c = data.shape
    gathered = data.reshape(h * w, c)[plan.index_map]
    pre_clip = gathered @ plan.channel_matrix.T + plan.bias
    mask = (pre_clip > 0.0) & (pre_clip < 1.0)
    g = grad_view.reshape(h * w, c) * mask
    g = g @ plan.channel_matrix
    out = np.zeros((h * w, c))
    np.add.at(out, plan.index_map, g)
    return out.reshape(h, w, c)


def augment(img: ImageTensor, cfg: AugConfig, seed: int) -> ImageTensor:
    """One deterministic augmented view of ``img``."""
    rng = np.random.default_rng(seed)
    plan = sample_aug_plan(img.height, img.width, img.channels, cfg, rng)
    return img.with_data(apply_aug_plan(plan, img.data))


@dataclass(frozen=True)
class TrainState:
    """Internal training state: encoder params plus SimSiam predictor params."""

    encoder: EncoderModel
    predictor: np.ndarray | None = None  # flat (d*d + d) linear head


def pretrain(
    dataset: list[ImageTensor],
    cfg: TrainConfig,
    max_steps: int | None = None,
) -> tuple[EncoderModel, list[float]]:
    """SGD contrastive pretraining; returns the encoder and per-epoch mean loss."""
    if not dataset:
        raise InvalidInputError("dataset is empty")
    if cfg.batch_size > len(dataset):
        raise InvalidInputError(
            f"batch_size {cfg.batch_size} exceeds dataset size {len(dataset)}"
        )
    dim = dataset[0].flat().size
    if dim != cfg.arch[0]:
        raise InvalidInputError(f"images have {dim} scalars, arch expects {cfg.arch[0]}")
    h, w, c = dataset[0].data.shape
    stacked = np.stack([im.data for im in dataset])

    params = init_params(cfg.arch, cfg.seed)
    d = cfg.arch[-1]
    pred_arch = (d, d)
    predictor = (
        init_params(pred_arch, cfg.seed + 1, scale=1.0 / np.sqrt(d))
        if cfg.framework == FRAMEWORK_SIMSIAM
        else None
    )
    rng = np.random.default_rng(np.random.SeedSequence([cfg.seed, 0xA06]))
    trace: list[float] = []
    steps = 0
    for _epoch in range(cfg.epochs):
        order = rng.permutation(len(dataset))
        losses = []
        for start in range(0, len(dataset) - cfg.batch_size + 1, cfg.batch_size):
            if max_steps is not None and steps >= max_steps:
                break
            idx = order[start : start + cfg.batch_size]
            x1 = np.empty((len(idx), dim))
            x2 = np.empty((len(idx), dim))
            for k, i in enumerate(idx):
                plan1 = sample_aug_plan(h, w, c, cfg.augmentation, rng)
                plan2 = sample_aug_plan(h, w, c, cfg.augmentation, rng)
                x1[k] = apply_aug_plan(plan1, stacked[i]).ravel()
                x2[k] = apply_aug_plan(plan2, stacked[i]).ravel()
            if cfg.framework == FRAMEWORK_SIMCLR:
                params, loss = _simclr_step(cfg, params, x1, x2)
            else:
                params, predictor, loss = _simsiam_step(cfg, params, predictor, x1, x2)
            losses.append(loss)
            steps += 1
        if losses:
            trace.append(float(np.mean(losses)))
        if max_steps is not None and steps >= max_steps:
            break
    return EncoderModel(cfg.arch, params, cfg.activation), trace


def _simclr_step(cfg, params, x1, x2):
    z1, cache1 = _forward(cfg.arch, params, cfg.activation, x1)
    z2, cache2 = _forward(cfg.arch, params, cfg.activation, x2)
    loss, (g1, g2) = ntxent_loss(z1, z2, cfg.temperature)
    gp1, _ = _backward(cfg.arch, cfg.activation, cache1, g1)
    gp2, _ = _backward(cfg.arch, cfg.activation, cache2, g2)
    return params - cfg.learning_rate * (gp1 + gp2), loss


def _simsiam_step(cfg, params, predictor, x1, x2):
    d = cfg.arch[-1]
    pred_arch = (d, d)
    z1, cache1 = _forward(cfg.arch, params, cfg.activation, x1)
    z2, cache2 = _forward(cfg.arch, params, cfg.activation, x2)
    p1, pcache1 = _forward(pred_arch, predictor, cfg.activation, z1)
    p2, pcache2 = _forward(pred_arch, predictor, cfg.activation, z2)
    loss, (gp1, gp2, _gz1, _gz2) = simsiam_loss(p1, p2, z1, z2)
    gpred1, gz1_via_p = _backward(pred_arch, cfg.activation, pcache1, gp1)
    gpred2, gz2_via_p = _backward(pred_arch, cfg.activation, pcache2, gp2)
    genc1, _ = _backward(cfg.arch, cfg.activation, cache1, gz1_via_p)
    genc2, _ = _backward(cfg.arch, cfg.activation, cache2, gz2_via_p)
    new_params = params - cfg.learning_rate * (genc1 + genc2)
    new_pred = predictor - cfg.learning_rate * (gpred1 + gpred2)
    return new_params, new_pred, loss


def with_seed(cfg: TrainConfig, seed: int) -> TrainConfig:
    return replace(cfg, seed=seed)
