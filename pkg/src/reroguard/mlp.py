"""Small MLP classifier with hand-written backprop and per-example gradients.

Parameters live in one flat vector so DP-SGD can clip, noise and step them
as plain arrays. Layer ``l`` stores ``W`` with shape ``(in, out)``
row-major, followed by its bias.

Most functions accept a leading "stack" axis: ``params`` of shape
``(S, P)`` with inputs ``(S, B, d)`` evaluates ``S`` models at once, which
the attacks use to score candidates against every recorded step.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Sequence

import numpy as np

from .errors import InvalidParameterError

ACTIVATIONS = ("elu", "linear")


@dataclass(frozen=True)
class MlpModel:
    """Architecture only; parameters are passed around as flat vectors."""

    widths: tuple
    activation: str = "elu"

    def __post_init__(self):
        widths = tuple(int(w) for w in self.widths)
        if len(widths) < 2 or any(w < 1 for w in widths):
            raise InvalidParameterError(f"need at least input and output widths >= 1, got {widths}")
        if self.activation not in ACTIVATIONS:
            raise InvalidParameterError(f"unknown activation {self.activation!r}")
        object.__setattr__(self, "widths", widths)

    @classmethod
    def classifier(cls, d_in: int, hidden: Sequence[int] = (10,), classes: int = 10, activation="elu"):
        return cls((d_in, *hidden, classes), activation)

    @property
    def d_in(self):
        return self.widths[0]

    @property
    def classes(self):
        return self.widths[-1]

    @property
    def n_params(self):
        return sum(a * b + b for a, b in zip(self.widths[:-1], self.widths[1:]))

    def init_params(self, rng: np.random.Generator) -> np.ndarray:
        """Glorot-uniform weights, zero biases."""
        parts = []
        for a, b in zip(self.widths[:-1], self.widths[1:]):
            limit = np.sqrt(6.0 / (a + b))
            parts.append(rng.uniform(-limit, limit, a * b))
            parts.append(np.zeros(b))
        return np.concatenate(parts)

    def layers(self, params):
        """Split ``params`` (..., P) into ``[(W, b), ...]`` views."""
        params = np.asarray(params, dtype=float)
        if params.shape[-1] != self.n_params:
            raise InvalidParameterError(
                f"expected {self.n_params} parameters, got {params.shape[-1]}"
            )
        lead = params.shape[:-1]
        out, pos = [], 0
        for a, b in zip(self.widths[:-1], self.widths[1:]):
            w = params[..., pos : pos + a * b].reshape(*lead, a, b)
            pos += a * b
            out.append((w, params[..., pos : pos + b]))
            pos += b
        return out

    def _act(self, a):
        if self.activation == "linear":
            return a
        return np.where(a > 0, a, np.expm1(np.minimum(a, 0.0)))

    def _act_grad(self, a):
        if self.activation == "linear":
            return np.ones_like(a)
        return np.where(a > 0, 1.0, np.exp(np.minimum(a, 0.0)))

    def _check_inputs(self, x, labels):
        x = np.asarray(x, dtype=float)
        if x.shape[-1] != self.d_in:
            raise InvalidParameterError(f"expected inputs of width {self.d_in}, got {x.shape[-1]}")
        labels = np.asarray(labels)
        if labels.shape != x.shape[:-1]:
            raise InvalidParameterError("labels must match the input batch shape")
        if labels.size and (labels.min() < 0 or labels.max() >= self.classes):
            raise InvalidParameterError("label out of range")
        return x, labels.astype(int)

    def _forward(self, params, x):
        acts, pre = [x], []
        layers = self.layers(params)
        h = x
        for i, (w, b) in enumerate(layers):
            a = np.einsum("...bi,...io->...bo", h, w) + b[..., None, :]
            pre.append(a)
            h = a if i == len(layers) - 1 else self._act(a)
            acts.append(h)
        return layers, pre, acts

    def logits(self, params, x):
        """Logits for ``x`` of shape (..., B, d)."""
        return self._forward(params, np.asarray(x, dtype=float))[2][-1]

    def loss(self, params, x, labels):
        """Per-example cross-entropy, shape (..., B)."""
        x, labels = self._check_inputs(x, labels)
        z = self.logits(params, x)
        z = z - z.max(-1, keepdims=True)
        log_norm = np.log(np.exp(z).sum(-1))
        picked = np.take_along_axis(z, labels[..., None], -1)[..., 0]
        return log_norm - picked

    def per_example_grads(self, params, x, labels):
        """Gradients of each example's loss, shape (..., B, P)."""
        x, labels = self._check_inputs(x, labels)
        layers, pre, acts = self._forward(params, x)
        z = acts[-1]
        probs = np.exp(z - z.max(-1, keepdims=True))
        probs /= probs.sum(-1, keepdims=True)
        delta = probs
        np.put_along_axis(delta, labels[..., None], np.take_along_axis(delta, labels[..., None], -1) - 1.0, -1)

        grads = [None] * len(layers)
        for i in range(len(layers) - 1, -1, -1):
            w, _ = layers[i]
            h_in = acts[i]
            gw = h_in[..., :, None] * delta[..., None, :]
            grads[i] = (gw.reshape(*gw.shape[:-2], -1), delta)
            if i > 0:
                delta = np.einsum("...bo,...io->...bi", delta, w) * self._act_grad(pre[i - 1])
        return np.concatenate([part for gw_gb in grads for part in gw_gb], axis=-1)


def per_example_grad(model: MlpModel, params, z, label):
    """Gradient of the cross-entropy loss at a single example."""
    z = np.asarray(z, dtype=float)
    return model.per_example_grads(params, z[None, :], np.asarray([label]))[0]


def finite_diff_grad(model: MlpModel, params, z, label, h: float = 1e-5):
    """Central-difference gradient in parameter space (test oracle)."""
    if not h > 0:
        raise InvalidParameterError(f"h must be > 0, got {h}")
    params = np.asarray(params, dtype=float)
    z = np.asarray(z, dtype=float)[None, :]
    label = np.asarray([label])
    bumps = np.eye(len(params)) * h
    plus = model.loss(params + bumps, np.broadcast_to(z, (len(params), 1, z.shape[1])), np.broadcast_to(label, (len(params), 1)))
    minus = model.loss(params - bumps, np.broadcast_to(z, (len(params), 1, z.shape[1])), np.broadcast_to(label, (len(params), 1)))
    return (plus[:, 0] - minus[:, 0]) / (2.0 * h)


def clip(v, c: float):
    """Scale rows of ``v`` down to L2 norm at most ``c``: ``v / max(1, |v|/c)``."""
    if not c > 0:
        raise InvalidParameterError(f"clipping norm must be > 0, got {c}")
    v = np.asarray(v, dtype=float)
    norms = np.linalg.norm(v, axis=-1, keepdims=True)
    return v / np.maximum(1.0, norms / c)
