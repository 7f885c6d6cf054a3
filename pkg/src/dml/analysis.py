"""Post-training diagnostics: minima flatness, posterior entropy, rank profiles, ensembles."""

from __future__ import annotations

from dataclasses import dataclass
from typing import Callable, Sequence

import numpy as np

from .losses import LOG_FLOOR, cross_entropy, softmax_np
from .model import NetworkParams, perturb, predict_logits
from .tensor import ShapeError

__all__ = [
    "FlatnessRow",
    "FlatnessTable",
    "posteriors",
    "dataset_loss",
    "accuracy",
    "entropy_of",
    "avg_posterior_entropy",
    "topk_mass_profile",
    "rank_profile_of",
    "ensemble_accuracy",
    "flatness_probe",
    "trial_seed",
]


def posteriors(params: NetworkParams, features: np.ndarray) -> np.ndarray:
    return softmax_np(predict_logits(params, features))


def dataset_loss(params: NetworkParams, features: np.ndarray, labels: np.ndarray) -> float:
    """Mean cross-entropy over the given samples."""
    return cross_entropy(posteriors(params, features), labels).item()


def accuracy(probs: np.ndarray, labels: np.ndarray) -> float:
    # argmax picks the lowest index among ties
    return float(np.mean(np.argmax(probs, axis=1) == np.asarray(labels)))


def entropy_of(probs: np.ndarray) -> float:
    p = np.asarray(probs, dtype=np.float64)
    return float(np.mean(-np.sum(p * np.log(np.clip(p, LOG_FLOOR, None)), axis=1)))


def avg_posterior_entropy(params: NetworkParams, features: np.ndarray) -> float:
    """Mean over samples of the predictive entropy, in nats."""
    if len(features) == 0:
        raise ValueError("entropy of an empty dataset is undefined")
    return entropy_of(posteriors(params, features))


def rank_profile_of(probs: np.ndarray, k: int) -> np.ndarray:
    probs = np.asarray(probs, dtype=np.float64)
    if k > probs.shape[1]:
        raise ValueError(f"k={k} exceeds the number of classes {probs.shape[1]}")
    # stable sort on the negated values keeps ascending class index among ties
    order = np.argsort(-probs, axis=1, kind="stable")[:, :k]
    ranked = np.take_along_axis(probs, order, axis=1)
    profile = ranked.mean(axis=0)
    assert np.all(np.diff(profile) <= 1e-15), "rank profile must be non-increasing"
    return profile


def topk_mass_profile(params: NetworkParams, features: np.ndarray, k: int) -> np.ndarray:
    """Average probability mass at each of the top ``k`` posterior ranks."""
    return rank_profile_of(posteriors(params, features), k)


def ensemble_accuracy(member_params: Sequence[NetworkParams], features: np.ndarray, labels: np.ndarray) -> float:
    """Top-1 accuracy of the averaged member posteriors."""
    if not member_params:
        raise ValueError("an ensemble needs at least one member")
    widths = {(p.input_dim, p.num_classes) for p in member_params}
    if len(widths) != 1:
        raise ShapeError(f"ensemble members disagree on input/output dims: {sorted(widths)}")
    mean_probs = np.mean([posteriors(p, features) for p in member_params], axis=0)
    return accuracy(mean_probs, labels)


@dataclass(frozen=True)
class FlatnessRow:
    sigma: float
    mean_loss: float
    std_loss: float
    trials: int
    noise_seed: int

    def as_dict(self) -> dict:
        return {
            "sigma": self.sigma,
            "mean_loss": self.mean_loss,
            "std_loss": self.std_loss,
            "trials": self.trials,
            "noise_seed": self.noise_seed,
        }


@dataclass(frozen=True)
class FlatnessTable:
    base_loss: float
    rows: tuple[FlatnessRow, ...]

    def increase(self, sigma: float) -> float:
        """Mean perturbed loss minus the unperturbed loss at ``sigma``."""
        for row in self.rows:
            if row.sigma == sigma:
                return row.mean_loss - self.base_loss
        raise KeyError(sigma)


def trial_seed(noise_seed: int, sigma_index: int, trial: int) -> int:
    """Deterministic per-trial noise seed derived from the three indices."""
    return int(np.random.SeedSequence([noise_seed, sigma_index, trial]).generate_state(1, np.uint64)[0])


def flatness_probe(
    params: NetworkParams,
    features: np.ndarray,
    labels: np.ndarray,
    sigmas: Sequence[float],
    trials: int,
    noise_seed: int = 0,
    loss_fn: Callable[[NetworkParams, np.ndarray, np.ndarray], float] = dataset_loss,
    relative: bool = False,
) -> FlatnessTable:
    """Training loss after adding Gaussian noise of each std in ``sigmas``.

    ``sigma == 0`` is evaluated once on the unperturbed parameters, so its
    row equals the base loss exactly.
    """
    if trials < 1:
        raise ValueError("trials must be >= 1")
    base = loss_fn(params, features, labels)
    rows = []
    for si, sigma in enumerate(sigmas):
        if sigma == 0:
            rows.append(FlatnessRow(float(sigma), base, 0.0, trials, noise_seed))
            continue
        losses = np.array([
            loss_fn(perturb(params, sigma, trial_seed(noise_seed, si, t), relative), features, labels)
            for t in range(trials)
        ])
        rows.append(FlatnessRow(float(sigma), float(losses.mean()), float(losses.std()), trials, noise_seed))
    return FlatnessTable(base, tuple(rows))
