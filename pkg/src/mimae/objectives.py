"""Reconstruction, InfoNCE maximization, CLUB minimization and approximation losses."""
from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from mimae.autodiff import Tensor, activation, logsumexp, stack
from mimae.errors import ContractError
from mimae.model import GaussianPosterior, gaussian_log_prob


@dataclass(frozen=True)
class LossWeights:
    lambda1: float = 1.0
    lambda2: float = 1.0
    lambda3: float = 10.0
    tau: float = 0.07
    eps_l: float = 0.5

    def __post_init__(self):
        if not self.tau > 0:
            raise ContractError(f"temperature must be positive, got {self.tau}")
        for name in ("lambda1", "lambda2", "lambda3"):
            if getattr(self, name) < 0:
                raise ContractError(f"{name} must be non-negative")


@dataclass
class LossReport:
    rec: float
    max_mi: float
    min_mi: float
    approx: float
    gate_open: bool
    total: float


def _value(x) -> float:
    return float(x.data) if isinstance(x, Tensor) else float(x)


# ------------------------------------------------------------ reconstruction
def rec_loss(pred: Tensor, target, mask) -> Tensor:
    """Mean squared error over the pixels of masked patches only.

    ``pred`` and ``target`` are (B, P, K); ``mask`` is (B, P) or (P,) with 1
    on masked patches.
    """
    target = np.asarray(getattr(target, "data", target))
    if pred.shape != target.shape:
        raise ContractError(f"prediction {pred.shape} and target {target.shape} differ")
    mask = np.broadcast_to(np.asarray(mask), pred.shape[:2])
    count = int(mask.sum())
    if count == 0:
        raise ContractError("reconstruction loss needs at least one masked patch")
    weight = (mask[..., None] * (1.0 / (count * pred.shape[2]))).astype(pred.dtype)
    diff = pred - target.astype(pred.dtype, copy=False)
    return (diff * diff * weight).sum()


def normalize_patches(patches: np.ndarray, eps: float = 1e-6) -> np.ndarray:
    """Per-patch standardization of pixel targets."""
    mean = patches.mean(axis=-1, keepdims=True)
    var = patches.var(axis=-1, keepdims=True)
    return (patches - mean) / np.sqrt(var + eps)


# ---------------------------------------------------------- MI maximization
def _unit_rows(z: Tensor) -> Tensor:
    norms = np.sqrt((z.data.astype(np.float64) ** 2).sum(axis=-1))
    if (norms == 0).any():
        raise ContractError("cosine similarity of a zero-norm latent")
    return z / (z * z).sum(axis=-1, keepdims=True).sqrt()


def similarity_logits(latents: Tensor, tau: float) -> Tensor:
    """Cosine-similarity matrix of the rows of ``latents`` divided by ``tau``."""
    u = _unit_rows(latents)
    return (u @ u.T) * (1.0 / tau)


def info_nce_pair(latents: Tensor, i: int, k: int, tau: float) -> Tensor:
    """-log softmax of row ``i`` at column ``k`` with column ``i`` excluded from the denominator.

    ``latents`` holds all NB latents of the batch (every mask of every image).
    """
    n = latents.shape[0]
    if i == k:
        raise ContractError("positive index must differ from anchor index")
    if not (0 <= i < n and 0 <= k < n):
        raise ContractError(f"indices ({i}, {k}) out of range for {n} latents")
    u = _unit_rows(latents)
    row = (u @ u[i:i + 1, :].T).reshape(1, n) * (1.0 / tau)  # sim(z_i, z_c) / tau
    include = np.ones((1, n), dtype=bool)
    include[0, i] = False
    return logsumexp(row, include=include)[0] - row[0, k]


def max_mi_loss(latents: Tensor, num_masks: int, tau: float) -> Tensor:
    """InfoNCE between every ordered pair of distinct masks of the same image.

    ``latents`` is (N*B, L), mask-major: row ``j*B + b`` is mask ``j`` of
    image ``b``. Each image contributes ``(1/N^2) sum_{i != k} l_{i,k}``; the
    result is the batch mean.
    """
    N = int(num_masks)
    if N < 2:
        raise ContractError(f"MI maximization needs at least 2 masks per image, got {N}")
    NB = latents.shape[0]
    if NB % N:
        raise ContractError(f"{NB} latents do not split into {N} masks per image")
    B = NB // N
    logits = similarity_logits(latents, tau)
    lse = logsumexp(logits, include=~np.eye(NB, dtype=bool))  # (NB,)
    image = np.arange(NB) % B
    positive = (image[:, None] == image[None, :]) & ~np.eye(NB, dtype=bool)
    # sum over positive pairs of lse_r - logits[r, c]
    pos_w = positive.astype(latents.dtype)
    total = (lse * pos_w.sum(axis=1)).sum() - (logits * pos_w).sum()
    return total * (1.0 / (N * N * B))


# ---------------------------------------------------------- MI minimization
def _stack_posteriors(posteriors) -> GaussianPosterior:
    if isinstance(posteriors, GaussianPosterior):
        return posteriors
    return GaussianPosterior(stack([p.mu for p in posteriors]), stack([p.sigma for p in posteriors]))


def approx_loss(posteriors, latents) -> Tensor:
    """Negative log-likelihood of the (detached) latents under q.

    ``posteriors`` has mu/sigma of shape (N, B, L) (or is a list of N
    per-mask posteriors); ``latents`` is (N, B, L). Latents are detached
    here, so only the approximation network receives gradient.
    """
    post = _stack_posteriors(posteriors)
    z = latents.detach() if isinstance(latents, Tensor) else Tensor(np.asarray(latents, post.mu.dtype))
    nll = gaussian_log_prob(post, z) * -1.0  # (N, B)
    return nll.mean()


def min_mi_loss(posteriors, latents: Tensor, clamp: bool = False) -> Tensor:
    """Sampled CLUB upper bound between each view and its latent.

    For image b and mask j: ``log q(z_j | X_j) - (1/N) sum_k log q(z_k | X_j)``,
    averaged over j and the batch. q is held constant (mu/sigma detached), so
    gradient flows only into the latents. With ``clamp`` each term is floored
    at 0, so the encoder gains nothing from pushing a latent below what a
    lagging q predicts.
    """
    post = _stack_posteriors(posteriors)
    mu, sigma = post.mu.detach(), post.sigma.detach()
    N = mu.shape[0]
    if latents.shape != mu.shape:
        raise ContractError(f"latents {latents.shape} and posterior {mu.shape} differ")
    lq = gaussian_log_prob(GaussianPosterior(mu.reshape((N, 1) + mu.shape[1:]),
                                             sigma.reshape((N, 1) + mu.shape[1:])),
                           latents.reshape((1,) + latents.shape))  # (N_j, N_k, B)
    eye = np.eye(N, dtype=mu.dtype)[:, :, None]
    positive = (lq * eye).sum(axis=1)  # (N, B): log q(z_j | X_j)
    contrast = lq.mean(axis=1)  # (N, B)
    terms = positive - contrast
    return (activation(terms, "relu") if clamp else terms).mean()


# ---------------------------------------------------------------- combined
def combined_loss(parts: dict, weights: LossWeights, gate_open: bool):
    """Weighted total with gating; returns (LossReport, total).

    ``parts`` maps rec / max_mi / min_mi / approx to tensors or floats. With
    the gate closed only the reconstruction term counts. The approximation
    loss is reported but never part of the total.
    """
    for name in ("rec", "max_mi", "min_mi", "approx"):
        if not math.isfinite(_value(parts[name])):
            raise ContractError(f"loss part {name} is not finite")
    total = weights.lambda1 * parts["rec"]
    if gate_open:
        total = total + weights.lambda2 * parts["max_mi"] + weights.lambda3 * parts["min_mi"]
    report = LossReport(
        rec=_value(parts["rec"]),
        max_mi=_value(parts["max_mi"]),
        min_mi=_value(parts["min_mi"]),
        approx=_value(parts["approx"]),
        gate_open=bool(gate_open),
        total=_value(total),
    )
    return report, total
