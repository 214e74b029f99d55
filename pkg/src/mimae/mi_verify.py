"""Check the MI estimators on correlated Gaussians, where the true MI is known in closed form."""
from __future__ import annotations

import csv
import math
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from mimae.autodiff import (
    OptimizerState,
    Tensor,
    activation,
    adamw_step,
    logsumexp,
    no_grad,
    zero_grads,
)
from mimae.errors import ContractError
from mimae.model import LOG_2PI, ApproxNet, GaussianPosterior, Linear, Module, approx_forward
from mimae.objectives import approx_loss

REPORT_COLUMNS = ("rho", "dim", "true_mi", "club", "infonce", "pass_club", "pass_infonce")


@dataclass(frozen=True)
class GaussianPairSpec:
    dim: int = 1
    rho: float = 0.5
    n: int = 10_000
    seed: int = 0

    def __post_init__(self):
        if not -1.0 < self.rho < 1.0:
            raise ContractError(f"correlation must satisfy |rho| < 1, got {self.rho}")
        if self.n < 100:
            raise ContractError(f"need at least 100 samples, got {self.n}")
        if self.dim < 1:
            raise ContractError("dim must be positive")


def gen_correlated_gaussian(spec: GaussianPairSpec) -> tuple[np.ndarray, np.ndarray]:
    """``z = rho * x + sqrt(1 - rho^2) * noise`` per dimension, both (n, dim) float32."""
    rng = np.random.default_rng([spec.seed, 17])
    x = rng.standard_normal((spec.n, spec.dim))
    noise = rng.standard_normal((spec.n, spec.dim))
    z = spec.rho * x + math.sqrt(1.0 - spec.rho ** 2) * noise
    return x.astype(np.float32), z.astype(np.float32)


def true_gaussian_mi(rho: float, dim: int = 1) -> float:
    """``-(d/2) ln(1 - rho^2)`` nats."""
    if not -1.0 < rho < 1.0:
        raise ContractError(f"correlation must satisfy |rho| < 1, got {rho}")
    return -0.5 * dim * math.log1p(-rho * rho)


def club_of_true_conditional(rho: float, dim: int = 1) -> float:
    """Expected CLUB value when q is the exact conditional N(rho x, 1 - rho^2).

    The contrast term averages over independent pairs, giving
    ``d * rho^2 / (1 - rho^2)``, which exceeds the true MI for rho != 0.
    """
    return dim * rho * rho / (1.0 - rho * rho)


def true_conditional(rho: float, x: np.ndarray) -> GaussianPosterior:
    x = np.asarray(x, dtype=np.float64)
    return GaussianPosterior(rho * x, np.full_like(x, math.sqrt(1.0 - rho * rho)))


# ------------------------------------------------------------------- CLUB
@dataclass
class ApproxFit:
    net: ApproxNet
    nll_history: list = field(default_factory=list)
    converged: bool = False


def fit_approx(x: np.ndarray, z: np.ndarray, *, hidden: int = 64, epochs: int = 200, batch_size: int = 256,
               lr: float = 3e-3, seed: int = 0, patience: int = 10, rel_tol: float = 2e-3,
               sigma_floor: float = 1e-4) -> ApproxFit:
    """Train q(z | x) by minimizing its negative log-likelihood.

    Stops once the best epoch NLL has not improved by ``rel_tol`` (relative)
    for ``patience`` epochs; ``converged`` records whether that happened
    before ``epochs`` ran out.
    """
    x = np.asarray(x, np.float32)
    z = np.asarray(z, np.float32)
    net = ApproxNet(x.shape[1], hidden, z.shape[1], sigma_floor, seed=seed)
    opt = OptimizerState(weight_decay=0.0)
    params = net.parameters()
    rng = np.random.default_rng([seed, 19])
    fit = ApproxFit(net)
    best, stale = math.inf, 0
    steps = max(1, len(x) // batch_size)
    total = epochs * steps
    t = 0
    for _ in range(epochs):
        perm = rng.permutation(len(x))
        acc = 0.0
        for s in range(steps):
            idx = perm[s * batch_size:(s + 1) * batch_size]
            post = approx_forward(net, x[idx])
            loss = approx_loss(GaussianPosterior(post.mu[None], post.sigma[None]), z[idx][None])
            loss.backward()
            adamw_step(params, opt, lr * 0.5 * (1 + math.cos(math.pi * t / total)))
            zero_grads(params)
            acc += loss.item()
            t += 1
        nll = acc / steps
        fit.nll_history.append(nll)
        if nll < best - rel_tol * max(1.0, abs(best) if math.isfinite(best) else 1.0):
            best, stale = nll, 0
        else:
            stale += 1
            if stale >= patience:
                fit.converged = True
                break
    return fit


@dataclass(frozen=True)
class ClubEstimate:
    value: float
    reliable: bool
    nll: float  # mean NLL of q on the samples
    marginal_nll: float  # NLL of the best x-independent diagonal Gaussian


def club_from_posterior(mu: np.ndarray, sigma: np.ndarray, z: np.ndarray) -> float:
    """``mean_i [log q(z_i|x_i) - mean_k log q(z_k|x_i)]`` over all n^2 pairs, in O(n d).

    The contrast term only needs the first two moments of z:
    ``mean_k (z_k - mu_i)^2 = E[z^2] - 2 mu_i E[z] + mu_i^2``.
    """
    mu, sigma, z = (np.asarray(a, np.float64) for a in (mu, sigma, z))
    inv = 1.0 / (sigma * sigma)
    positive = -0.5 * ((z - mu) ** 2 * inv).sum(axis=1)
    m1, m2 = z.mean(axis=0), (z * z).mean(axis=0)
    contrast = -0.5 * ((m2 - 2.0 * mu * m1 + mu * mu) * inv).sum(axis=1)
    # normalizers cancel between the two terms
    return float((positive - contrast).mean())


def club_estimate(fit, x: np.ndarray, z: np.ndarray) -> ClubEstimate:
    """CLUB upper bound under a trained q (an :class:`ApproxFit` or a bare net).

    Flagged unreliable when training did not plateau, or when q explains z
    worse than a Gaussian that ignores x.
    """
    net = fit.net if isinstance(fit, ApproxFit) else fit
    converged = fit.converged if isinstance(fit, ApproxFit) else False
    with no_grad():
        post = approx_forward(net, np.asarray(x, np.float32))
    mu, sigma = post.mu.data.astype(np.float64), post.sigma.data.astype(np.float64)
    z64 = np.asarray(z, np.float64)
    nll = float((0.5 * ((z64 - mu) ** 2 / sigma ** 2 + 2 * np.log(sigma) + LOG_2PI)).sum(axis=1).mean())
    marginal = float((0.5 * (np.log(z64.var(axis=0)) + 1.0 + LOG_2PI)).sum())
    value = club_from_posterior(mu, sigma, z64)
    reliable = converged and nll <= marginal + 1e-2 and math.isfinite(value)
    return ClubEstimate(value, reliable, nll, marginal)


# ---------------------------------------------------------------- InfoNCE
class _Projection(Module):
    def __init__(self, in_dim: int, hidden: int, out_dim: int, rng):
        self.fc1 = Linear(in_dim, hidden, rng)
        self.fc2 = Linear(hidden, out_dim, rng)

    def __call__(self, x: Tensor) -> Tensor:
        h = self.fc2(activation(self.fc1(x), "gelu"))
        return h / (h * h).sum(axis=-1, keepdims=True).sqrt()


class Critic(Module):
    """``cos(g(x), h(z)) / tau`` with two small projection heads."""

    def __init__(self, x_dim: int, z_dim: int, tau: float, hidden: int = 64, out_dim: int = 16, seed: int = 0):
        if not tau > 0:
            raise ContractError("temperature must be positive")
        rng = np.random.default_rng([seed, 23])
        self.tau = tau
        self.gx = _Projection(x_dim, hidden, out_dim, rng)
        self.hz = _Projection(z_dim, hidden, out_dim, rng)

    def scores(self, x, z) -> Tensor:
        gx = self.gx(Tensor(np.asarray(x, np.float32)))
        hz = self.hz(Tensor(np.asarray(z, np.float32)))
        return (gx @ hz.T) * (1.0 / self.tau)


def info_nce_batch_loss(scores: Tensor) -> Tensor:
    """Mean over rows of ``-log softmax(scores)[i, i]``."""
    n = scores.shape[0]
    diag = (scores * np.eye(n, dtype=scores.dtype)).sum(axis=1)
    return (logsumexp(scores) - diag).mean()


@dataclass(frozen=True)
class InfoNceEstimate:
    value: float
    bound: float  # log(batch)
    train_loss: float


def infonce_estimate(x: np.ndarray, z: np.ndarray, *, tau: float = 0.5, batch: int = 128, epochs: int = 40,
                     lr: float = 3e-3, seed: int = 0, holdout: float = 0.5) -> InfoNceEstimate:
    """InfoNCE lower bound ``log(batch) - mean loss`` with a learned cosine critic.

    The critic is trained on one part of the samples and evaluated on the
    held-out rest, so a critic that memorizes noise cannot inflate the value.
    """
    if batch < 2:
        raise ContractError("InfoNCE needs a batch of at least 2")
    x = np.asarray(x, np.float32)
    z = np.asarray(z, np.float32)
    n = len(x)
    rng = np.random.default_rng([seed, 29])
    order = rng.permutation(n)
    n_eval = int(round(n * holdout))
    ev, tr = order[:n_eval], order[n_eval:]
    if len(tr) < batch or len(ev) < batch:
        raise ContractError(f"{n} samples cannot fill a batch of {batch} in both halves")
    critic = Critic(x.shape[1], z.shape[1], tau, seed=seed)
    params = critic.parameters()
    opt = OptimizerState(weight_decay=0.0)
    steps = len(tr) // batch
    total = epochs * steps
    t, last = 0, math.nan
    for _ in range(epochs):
        perm = tr[rng.permutation(len(tr))]
        acc = 0.0
        for s in range(steps):
            idx = perm[s * batch:(s + 1) * batch]
            loss = info_nce_batch_loss(critic.scores(x[idx], z[idx]))
            loss.backward()
            adamw_step(params, opt, lr * 0.5 * (1 + math.cos(math.pi * t / total)))
            zero_grads(params)
            acc += loss.item()
            t += 1
        last = acc / steps
    losses = []
    with no_grad():
        for s in range(len(ev) // batch):
            idx = ev[s * batch:(s + 1) * batch]
            losses.append(info_nce_batch_loss(critic.scores(x[idx], z[idx])).item())
    bound = math.log(batch)
    return InfoNceEstimate(min(bound, bound - float(np.mean(losses))), bound, last)


# --------------------------------------------------------------- sandwich
@dataclass(frozen=True)
class SandwichRow:
    rho: float
    dim: int
    true_mi: float
    club: float
    infonce: float
    pass_club: bool
    pass_infonce: bool
    club_reliable: bool = True

    def failures(self) -> list[str]:
        out = []
        if not self.pass_club:
            out.append(f"rho={self.rho}: CLUB {self.club:.4f} < true MI {self.true_mi:.4f} - slack")
        if not self.pass_infonce:
            out.append(f"rho={self.rho}: InfoNCE {self.infonce:.4f} > true MI {self.true_mi:.4f} + slack")
        return out


def sandwich_report(rhos, *, dim: int = 1, n: int = 10_000, tau: float = 0.5, batch: int = 128,
                    delta: float = 0.1, data_seed: int = 0, train_seed: int = 0) -> list[SandwichRow]:
    """Run both estimators per correlation and test ``infonce - delta <= MI <= club + delta``.

    Failures are recorded in the rows (see :meth:`SandwichRow.failures`), not raised.
    """
    rows = []
    for rho in rhos:
        spec = GaussianPairSpec(dim, float(rho), n, data_seed)
        x, z = gen_correlated_gaussian(spec)
        truth = true_gaussian_mi(spec.rho, dim)
        club = club_estimate(fit_approx(x, z, seed=train_seed), x, z)
        nce = infonce_estimate(x, z, tau=tau, batch=batch, seed=train_seed)
        rows.append(SandwichRow(spec.rho, dim, truth, club.value, nce.value,
                                club.value >= truth - delta, nce.value - delta <= truth, club.reliable))
    return rows


def write_report(path, rows) -> Path:
    path = Path(path)
    try:
        path.parent.mkdir(parents=True, exist_ok=True)
        with path.open("w", newline="", encoding="utf-8") as fh:
            w = csv.writer(fh, lineterminator="\n")
            w.writerow(REPORT_COLUMNS)
            for r in rows:
                w.writerow([repr(r.rho), r.dim, repr(r.true_mi), repr(r.club), repr(r.infonce),
                            int(r.pass_club), int(r.pass_infonce)])
    except OSError as exc:
        raise OSError(f"{path}: cannot write report: {exc.strerror or exc}") from exc
    return path
