"""Dirichlet evidential classification math.

Evidence vectors become Dirichlet parameters through a class-frequency
weighted prior; losses combine a variance-decomposed mean squared error
with an annealed KL pull toward that prior for misleading evidence.
All loss functions run on autodiff tensors so gradients flow back into
whatever produced the evidence.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import autodiff as ad


class DegenerateDistributionError(ValueError):
    """A class-count vector that would force a zero prior weight."""


class ContractError(ValueError):
    """Input violates a documented precondition."""


@dataclass(frozen=True)
class ClassPrior:
    """Per-class prior weights derived from local label counts."""

    W: np.ndarray
    class_counts: np.ndarray
    N: int

    @property
    def num_classes(self) -> int:
        return int(self.W.shape[0])


@dataclass(frozen=True)
class DirichletOpinion:
    """One sample's evidence recast as a subjective-logic opinion."""

    evidence: np.ndarray
    W: np.ndarray
    alpha: np.ndarray
    strength: float
    belief: np.ndarray
    vacuity: float
    p_hat: np.ndarray


def weighted_prior(class_counts) -> ClassPrior:
    """Prior weights W_k = K/(K-1) * (1 - N_k/N), summing to K.

    Rejects count vectors where one class holds every sample, because
    that class's weight would be zero and Dirichlet parameters must
    stay positive.
    """
    counts = np.asarray(class_counts)
    if counts.ndim != 1 or counts.shape[0] < 2:
        raise ContractError("class_counts must be a vector over K >= 2 classes")
    if np.any(counts < 0) or not np.all(counts == np.floor(counts)):
        raise ContractError("class_counts must be non-negative integers")
    counts = counts.astype(np.int64)
    total = int(counts.sum())
    if total <= 0:
        raise ContractError("class_counts must contain at least one sample")
    k = counts.shape[0]
    if np.any(counts == total):
        idx = int(np.argmax(counts == total))
        raise DegenerateDistributionError(
            f"class {idx} holds all {total} samples; its prior weight would be 0"
        )
    w = (k / (k - 1.0)) * (1.0 - counts / total)
    return ClassPrior(W=w, class_counts=counts, N=total)


def uniform_prior(num_classes: int) -> ClassPrior:
    """The classical all-ones prior, kept for the uniform-case identities."""
    if num_classes < 2:
        raise ContractError("need at least two classes")
    w = np.ones(num_classes)
    counts = np.zeros(num_classes, dtype=np.int64)
    return ClassPrior(W=w, class_counts=counts, N=0)


def opinion(evidence, prior: ClassPrior) -> DirichletOpinion:
    """Evidence + prior -> alpha, strength, beliefs, vacuity, expected probs.

    Beliefs are (alpha_k - W_k)/S so that vacuity + total belief = 1
    holds under weighted priors too (it reduces to (alpha_k - 1)/S when
    W is uniform).
    """
    e = np.asarray(evidence, dtype=np.float64)
    if e.shape != prior.W.shape:
        raise ContractError(f"evidence shape {e.shape} != prior shape {prior.W.shape}")
    if np.any(e < 0):
        raise ContractError("evidence must be non-negative")
    alpha = e + prior.W
    s = float(alpha.sum())
    k = prior.num_classes
    return DirichletOpinion(
        evidence=e,
        W=prior.W.copy(),
        alpha=alpha,
        strength=s,
        belief=(alpha - prior.W) / s,
        # K/S mathematically never exceeds 1 (S >= sum(W) = K), but the
        # float sum of W can land an ulp below K, so clamp
        vacuity=min(1.0, k / s),
        p_hat=alpha / s,
    )


def vacuity(op: DirichletOpinion) -> float:
    """K/S, the uncertainty mass; 1 means total lack of evidence."""
    return op.vacuity


def _check_one_hot(y: np.ndarray) -> None:
    ok = np.all((y == 0.0) | (y == 1.0)) and np.all(y.sum(axis=-1) == 1.0)
    if not ok:
        raise ContractError("labels must be one-hot rows")


def _as_tensor(x) -> ad.Tensor:
    return x if isinstance(x, ad.Tensor) else ad.Tensor(np.asarray(x, dtype=np.float64))


def evidential_mse(y, alpha) -> ad.Tensor:
    """Sum_k (y_k - alpha_k/S)^2 + alpha_k(S - alpha_k)/(S^2 (S+1)).

    This is the closed form of the expected squared error under
    Dir(alpha): a fit term plus a variance term. `alpha` may carry
    gradients; `y` is a constant one-hot vector (or batch of rows).
    Batched inputs reduce by arithmetic mean over rows.
    """
    y_arr = np.asarray(y, dtype=np.float64)
    _check_one_hot(y_arr)
    a = _as_tensor(alpha)
    if a.shape != y_arr.shape:
        raise ContractError(f"alpha shape {a.shape} != labels shape {y_arr.shape}")
    if np.any(a.data <= 0):
        raise ContractError("alpha entries must be positive")
    yt = ad.Tensor(y_arr)
    s = ad.sum_(a, axis=-1, keepdims=True)
    fit = ad.sum_(ad.power(ad.sub(yt, ad.div(a, s)), 2.0), axis=-1)
    var = ad.div(ad.mul(a, ad.sub(s, a)), ad.mul(ad.mul(s, s), ad.add(s, 1.0)))
    per_sample = ad.add(fit, ad.sum_(var, axis=-1))
    return per_sample if y_arr.ndim == 1 else ad.mean(per_sample)


def kl_to_prior(alpha_tilde, W) -> ad.Tensor:
    """KL( Dir(alpha_tilde) || Dir(W) ) in the general two-parameter form.

    log G(S~) - log G(Sw) + sum_k [log G(w_k) - log G(a~_k)]
    + sum_k (a~_k - w_k) (psi(a~_k) - psi(S~)).
    Works on single vectors or batches of rows (batch reduces by mean).
    """
    at = _as_tensor(alpha_tilde)
    w_arr = np.asarray(W, dtype=np.float64)
    if np.any(at.data <= 0) or np.any(w_arr <= 0):
        raise ContractError("Dirichlet parameters must be positive")
    if at.shape[-1] != w_arr.shape[-1]:
        raise ContractError("alpha_tilde and W disagree on class count")
    wt = ad.Tensor(np.broadcast_to(w_arr, at.shape).copy())
    s_at = ad.sum_(at, axis=-1)
    s_w = ad.sum_(wt, axis=-1)
    term_gamma = ad.add(
        ad.sub(ad.lgamma(s_at), ad.lgamma(s_w)),
        ad.sum_(ad.sub(ad.lgamma(wt), ad.lgamma(at)), axis=-1),
    )
    psi_gap = ad.sub(ad.digamma(at), ad.reshape(ad.digamma(s_at), s_at.shape + (1,)))
    term_psi = ad.sum_(ad.mul(ad.sub(at, wt), psi_gap), axis=-1)
    per_sample = ad.add(term_gamma, term_psi)
    return per_sample if at.ndim == 1 else ad.mean(per_sample)


def masked_alpha(y, alpha, W) -> ad.Tensor:
    """y*W + (1-y) . alpha: the true class keeps only its prior weight.

    Gradients therefore never reach the true-class evidence through the
    KL term; only misleading evidence is pulled down.
    """
    y_arr = np.asarray(y, dtype=np.float64)
    _check_one_hot(y_arr)
    a = _as_tensor(alpha)
    if a.shape != y_arr.shape:
        raise ContractError(f"alpha shape {a.shape} != labels shape {y_arr.shape}")
    w_arr = np.broadcast_to(np.asarray(W, dtype=np.float64), a.shape)
    const = ad.Tensor(y_arr * w_arr)
    mask = ad.Tensor(1.0 - y_arr)
    return ad.add(const, ad.mul(mask, a))


def kl_annealing(t: float) -> float:
    """min(1, t/10) for cumulative epoch index t."""
    if t < 0:
        raise ContractError("epoch counter must be non-negative")
    return min(1.0, t / 10.0)


def evidential_loss(y, alpha, W, t) -> ad.Tensor:
    """evidential_mse + min(1, t/10) * KL(masked alpha || prior)."""
    lam = kl_annealing(t)
    mse = evidential_mse(y, alpha)
    if lam == 0.0:
        return mse
    kl = kl_to_prior(masked_alpha(y, alpha, W), W)
    return ad.add(mse, ad.mul(kl, lam))
