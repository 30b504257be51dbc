"""DP-SGD training with a full per-step transcript for reconstruction attacks."""

from __future__ import annotations

import json
from dataclasses import dataclass
from pathlib import Path
from typing import Optional

import numpy as np

from . import __version__
from .accountant import PrivacyParams
from .bounds import PriorSpec
from .errors import InvalidParameterError
from .mlp import MlpModel, clip

TRANSCRIPT_SCHEMA = "reroguard-transcript/1"
PRIOR_MODES = ("data", "noise")


@dataclass(frozen=True)
class ClusterData:
    """Gaussian-cluster classification generator (stand-in for image data)."""

    d_in: int = 32
    classes: int = 10
    spread: float = 1.0
    seed: int = 0

    def means(self):
        rng = np.random.default_rng(self.seed)
        return rng.normal(0.0, 2.0 / np.sqrt(self.d_in), (self.classes, self.d_in)) * np.sqrt(self.d_in)

    def sample(self, rng: np.random.Generator, n: int):
        labels = rng.integers(0, self.classes, n)
        x = self.means()[labels] + rng.normal(0.0, self.spread, (n, self.d_in))
        return x, labels

    def sample_noise(self, rng: np.random.Generator, n: int):
        """Random-noise points with random labels."""
        return rng.normal(0.0, 1.0, (n, self.d_in)), rng.integers(0, self.classes, n)


@dataclass(frozen=True)
class DatasetSplit:
    """Known points ``D-`` plus a prior whose ``target_index`` entry is trained on."""

    fixed_points: np.ndarray
    fixed_labels: np.ndarray
    prior: PriorSpec
    target_index: int
    disjoint: bool = True

    def __post_init__(self):
        if self.prior.labels is None:
            raise InvalidParameterError("classification prior needs labels")
        if not 0 <= self.target_index < self.prior.n:
            raise InvalidParameterError(f"target_index {self.target_index} outside prior of size {self.prior.n}")
        fixed = np.asarray(self.fixed_points, dtype=float).reshape(-1, self.prior.candidates.shape[1])
        object.__setattr__(self, "fixed_points", fixed)
        object.__setattr__(self, "fixed_labels", np.asarray(self.fixed_labels, dtype=int).reshape(-1))

    @property
    def target(self):
        return self.prior.candidates[self.target_index], int(self.prior.labels[self.target_index])

    def training_set(self):
        """Known points followed by the target (last row)."""
        z, y = self.target
        return np.vstack([self.fixed_points, z[None]]), np.append(self.fixed_labels, y)


def make_dataset_split(
    rng: np.random.Generator,
    n_known: int,
    n_prior: int,
    data: ClusterData = ClusterData(),
    prior_mode: str = "data",
) -> DatasetSplit:
    """Draw ``D-`` from the generator and a fresh prior with a uniform target."""
    if prior_mode not in PRIOR_MODES:
        raise InvalidParameterError(f"unknown prior mode {prior_mode!r}")
    if n_prior < 1 or n_known < 0:
        raise InvalidParameterError("need n_prior >= 1 and n_known >= 0")
    fixed_x, fixed_y = data.sample(rng, n_known)
    draw = data.sample if prior_mode == "data" else data.sample_noise
    prior_x, prior_y = draw(rng, n_prior)
    prior = PriorSpec(prior_x, labels=prior_y)
    return DatasetSplit(fixed_x, fixed_y, prior, int(rng.integers(n_prior)))


@dataclass
class Transcript:
    """Everything released (and some ground truth) for each DP-SGD step.

    ``thetas[t]`` is the parameter vector before step ``t``; ``grads[t]``
    the privatized gradient sum. ``membership[t, i]`` marks which training
    rows (known points first, target last) were sampled.
    """

    model: MlpModel
    params: PrivacyParams
    lr: float
    seed: int
    thetas: np.ndarray
    grads: np.ndarray
    membership: np.ndarray
    preclip_norms: np.ndarray
    final_theta: np.ndarray

    @property
    def steps(self):
        return len(self.thetas)

    def replay(self):
        """Parameter trajectory recomputed from ``thetas[0]`` and the gradients."""
        out = np.empty((self.steps + 1, self.model.n_params))
        out[0] = self.thetas[0]
        for t in range(self.steps):
            out[t + 1] = out[t] - self.lr * self.grads[t]
        return out

    def to_dict(self):
        return {
            "schema": TRANSCRIPT_SCHEMA,
            "software_version": __version__,
            "model": {"widths": list(self.model.widths), "activation": self.model.activation},
            "privacy": self.params.to_dict(),
            "lr": self.lr,
            "seed": self.seed,
            "arrays": {
                name: {"shape": list(arr.shape), "data": arr.ravel().tolist()}
                for name, arr in (
                    ("thetas", self.thetas),
                    ("grads", self.grads),
                    ("membership", self.membership.astype(int)),
                    ("preclip_norms", self.preclip_norms),
                    ("final_theta", self.final_theta),
                )
            },
        }

    @classmethod
    def from_dict(cls, d):
        if d.get("schema") != TRANSCRIPT_SCHEMA:
            raise InvalidParameterError(f"unsupported transcript schema {d.get('schema')!r}")
        arrays = {
            name: np.asarray(v["data"], dtype=float).reshape(v["shape"]) for name, v in d["arrays"].items()
        }
        return cls(
            model=MlpModel(tuple(d["model"]["widths"]), d["model"]["activation"]),
            params=PrivacyParams.from_dict(d["privacy"]),
            lr=float(d["lr"]),
            seed=int(d["seed"]),
            thetas=arrays["thetas"],
            grads=arrays["grads"],
            membership=arrays["membership"].astype(bool),
            preclip_norms=arrays["preclip_norms"],
            final_theta=arrays["final_theta"],
        )

    def save(self, path):
        path = Path(path)
        try:
            path.write_text(json.dumps(self.to_dict()))
        except OSError as exc:
            raise OSError(f"cannot write transcript to {path}: {exc}") from exc

    @classmethod
    def load(cls, path):
        return cls.from_dict(json.loads(Path(path).read_text()))


def dpsgd_train(
    params: PrivacyParams,
    data: DatasetSplit,
    model: MlpModel,
    lr: float,
    seed: int,
    theta0: Optional[np.ndarray] = None,
) -> Transcript:
    """Run ``params.steps_t`` steps of DP-SGD on ``data.training_set()``.

    Each step Poisson-samples every row with probability ``q`` (all rows at
    q=1), sums the clipped per-example gradients, adds ``N(0, (sigma C)^2 I)``
    and takes a plain gradient step. ``theta0`` defaults to a Glorot init
    drawn from the run's seed.
    """
    if not lr > 0:
        raise InvalidParameterError(f"lr must be > 0, got {lr}")
    x, y = data.training_set()
    if x.shape[1] != model.d_in:
        raise InvalidParameterError(f"model expects width {model.d_in}, data has {x.shape[1]}")
    init_rng, member_rng, noise_rng = (np.random.default_rng(s) for s in np.random.SeedSequence(seed).spawn(3))
    theta = model.init_params(init_rng) if theta0 is None else np.array(theta0, dtype=float)
    steps, m = params.steps_t, len(x)
    noise_std = params.sigma * params.clip_c

    thetas = np.empty((steps, model.n_params))
    grads = np.empty((steps, model.n_params))
    membership = np.empty((steps, m), dtype=bool)
    norms = np.empty((steps, m))
    for t in range(steps):
        thetas[t] = theta
        per_ex = model.per_example_grads(theta, x, y)
        norms[t] = np.linalg.norm(per_ex, axis=1)
        membership[t] = True if params.q == 1.0 else member_rng.random(m) < params.q
        g = clip(per_ex[membership[t]], params.clip_c).sum(0)
        if noise_std > 0:
            g = g + noise_rng.normal(0.0, noise_std, model.n_params)
        grads[t] = g
        theta = theta - lr * g
    return Transcript(model, params, float(lr), int(seed), thetas, grads, membership, norms, theta)
