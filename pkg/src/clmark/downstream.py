"""Linear probe on a frozen encoder: soft- and hard-label outputs."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from clmark.cltrain import EncoderModel, encode, encode_batch
from clmark.errors import InvalidInputError
from clmark.imagecore import ImageTensor


@dataclass(frozen=True)
class LinearProbe:
    """Multinomial logistic classifier over encoder features."""

    weights: np.ndarray  # (d, K)
    bias: np.ndarray  # (K,)
    class_names: tuple[str, ...]

    def __post_init__(self):
        w = np.asarray(self.weights, dtype=np.float64)
        b = np.asarray(self.bias, dtype=np.float64)
        if w.ndim != 2 or w.shape[1] < 2:
            raise InvalidInputError("probe weights must be (d, K) with K >= 2")
        if b.shape != (w.shape[1],):
            raise InvalidInputError("probe bias must be (K,)")
        if len(self.class_names) != w.shape[1]:
            raise InvalidInputError("class_names length must equal K")
        w.setflags(write=False)
        b.setflags(write=False)
        object.__setattr__(self, "weights", w)
        object.__setattr__(self, "bias", b)
        object.__setattr__(self, "class_names", tuple(self.class_names))

    @property
    def n_classes(self) -> int:
        return self.weights.shape[1]


def _softmax(logits: np.ndarray) -> np.ndarray:
    shifted = logits - logits.max(axis=-1, keepdims=True)
    e = np.exp(shifted)
    return e / e.sum(axis=-1, keepdims=True)


def train_probe(
    encoder: EncoderModel,
    labeled: list[tuple[ImageTensor, str]],
    epochs: int = 200,
    lr: float = 0.5,
    seed: int = 0,
) -> LinearProbe:
    """Gradient-descent logistic regression on frozen encoder features.

    Weights start at zero (so epochs=0 yields uniform soft labels); the
    encoder is never mutated.
    """
    if not labeled:
        raise InvalidInputError("labeled dataset is empty")
    class_names = tuple(sorted({label for _, label in labeled}))
    if len(class_names) < 2:
        raise InvalidInputError("probe training needs at least 2 classes")
    label_idx = {name: i for i, name in enumerate(class_names)}
    feats = encode_batch(encoder, np.stack([img.flat() for img, _ in labeled]))
    y = np.array([label_idx[label] for _, label in labeled])
    n, d = feats.shape
    k = len(class_names)
    onehot = np.zeros((n, k))
    onehot[np.arange(n), y] = 1.0

    rng = np.random.default_rng(seed)
    w = np.zeros((d, k))
    b = np.zeros(k)
    for _ in range(epochs):
        order = rng.permutation(n)  # kept for seed-stable extension to SGD
        probs = _softmax(feats[order] @ w + b)
        g = probs - onehot[order]
        w -= lr * (feats[order].T @ g) / n
        b -= lr * g.sum(axis=0) / n
    return LinearProbe(w, b, class_names)


def predict_soft(probe: LinearProbe, encoder: EncoderModel, img: ImageTensor) -> np.ndarray:
    """Softmax probability vector over the probe's classes."""
    feat = encode(encoder, img)
    if feat.shape[0] != probe.weights.shape[0]:
        raise InvalidInputError("probe feature dimension does not match encoder")
    return _softmax(feat @ probe.weights + probe.bias)


def predict_hard(probe: LinearProbe, encoder: EncoderModel, img: ImageTensor):
    """Argmax class index plus its one-hot vector; ties break to lowest index."""
    soft = predict_soft(probe, encoder, img)
    idx = int(np.argmax(soft))  # argmax returns the first (lowest) index on ties
    onehot = np.zeros(probe.n_classes)
    onehot[idx] = 1.0
    return idx, onehot
