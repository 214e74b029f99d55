"""Pretraining loop with routed gradients, gate handling and linear probing."""
from __future__ import annotations

import logging
import math
from dataclasses import asdict, dataclass, field, replace
from pathlib import Path
from typing import Callable

import numpy as np

from mimae.autodiff import (
    LrSchedule,
    OptimizerState,
    adamw_step,
    concat,
    cosine_lr,
    getitem,
    no_grad,
    zero_grads,
)
from mimae.errors import ContractError, NonFiniteError, TrainingDiverged
from mimae.masking import gen_batch, mask_count
from mimae.model import MAE, ApproxNet, ModelConfig, masked_inputs, patchify
from mimae.objectives import (
    LossReport,
    LossWeights,
    approx_loss,
    combined_loss,
    max_mi_loss,
    min_mi_loss,
    normalize_patches,
    rec_loss,
)

log = logging.getLogger(__name__)

GATE_MODES = ("latch", "batch", "open")
METRIC_COLUMNS = ("epoch", "step", "lr", "rec", "max_mi", "min_mi", "approx", "gate_open", "probe_acc")


@dataclass(frozen=True)
class TrainConfig:
    epochs: int = 50
    batch_size: int = 64
    mask_ratio: float = 0.75
    mask_count_strategy: str = "complete"  # complete | fixed4
    mask_strategy: str = "orthogonal"  # orthogonal | independent
    weights: LossWeights = field(default_factory=LossWeights)
    gate_mode: str = "latch"
    base_lr: float = 1.5e-3
    min_lr: float = 0.0
    warmup_fraction: float = 0.1
    weight_decay: float = 0.05
    beta1: float = 0.9
    beta2: float = 0.95
    approx_lr: float = 1e-3
    approx_weight_decay: float = 0.0
    norm_pix: bool = False
    club_clamp: bool = False
    approx_steps: int = 1
    seed: int = 0
    checkpoint_every: int = 0
    probe_every: int = 0

    def __post_init__(self):
        if self.batch_size < 2:
            raise ContractError("batch_size must be >= 2 so InfoNCE has negatives")
        if self.gate_mode not in GATE_MODES:
            raise ContractError(f"gate_mode must be one of {GATE_MODES}, got {self.gate_mode!r}")
        if self.mask_strategy not in ("orthogonal", "independent"):
            raise ContractError(f"unknown mask_strategy {self.mask_strategy!r}")
        if self.approx_steps < 1:
            raise ContractError("approx_steps must be >= 1")
        if not 0 <= self.warmup_fraction <= 1:
            raise ContractError("warmup_fraction must lie in [0, 1]")
        mask_count(self.mask_ratio, self.mask_count_strategy)

    @property
    def num_masks(self) -> int:
        return mask_count(self.mask_ratio, self.mask_count_strategy)

    def visible_per_mask(self, num_patches: int) -> int | None:
        """Fixed visible count when the mask count does not tile the image, else None."""
        if self.mask_count_strategy == "complete" and self.mask_strategy == "orthogonal":
            return None
        return max(1, int(round(num_patches * (1.0 - self.mask_ratio))))

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> "TrainConfig":
        d = dict(d)
        d["weights"] = LossWeights(**d["weights"])
        return cls(**d)


@dataclass(eq=False)
class TrainState:
    model_config: ModelConfig
    train_config: TrainConfig
    model: MAE
    approx: ApproxNet
    opt_main: OptimizerState
    opt_approx: OptimizerState
    steps_per_epoch: int
    epoch: int = 0  # completed epochs
    global_step: int = 0
    gate_open: bool = False
    running_rec_loss: float = math.nan  # mean rec loss of the last completed epoch
    rec_sum: float = 0.0
    rec_count: int = 0
    gate_epoch: int | None = None  # first epoch trained with the gate open
    history: list = field(default_factory=list)

    @property
    def schedule(self) -> LrSchedule:
        c = self.train_config
        total = max(1, c.epochs * self.steps_per_epoch)
        return LrSchedule(c.base_lr, int(round(c.warmup_fraction * total)), total, c.min_lr)

    def lr(self, step: int | None = None) -> float:
        step = self.global_step if step is None else step
        return cosine_lr(min(step, self.schedule.total_steps), self.schedule)

    def approx_lr(self, step: int | None = None) -> float:
        c = self.train_config
        if c.base_lr == 0:
            return c.approx_lr
        return self.lr(step) * c.approx_lr / c.base_lr


def _no_decay(params: dict) -> frozenset:
    return frozenset(k for k, p in params.items() if p.ndim <= 1 or k in ("cls_token", "mask_token"))


def init_state(model_config: ModelConfig, train_config: TrainConfig, steps_per_epoch: int) -> TrainState:
    seed = train_config.seed
    model = MAE(model_config, seed=seed)
    approx = ApproxNet(model_config.input_dim, model_config.approx_hidden_dim, model_config.latent_dim,
                       model_config.sigma_floor, seed=seed + 1)
    c = train_config
    opt_main = OptimizerState(c.beta1, c.beta2, c.weight_decay, no_decay=_no_decay(model.parameters()))
    opt_approx = OptimizerState(c.beta1, c.beta2, c.approx_weight_decay,
                                no_decay=_no_decay(approx.parameters()))
    if steps_per_epoch < 1:
        raise ContractError("dataset too small for one batch")
    return TrainState(model_config, train_config, model, approx, opt_main, opt_approx, steps_per_epoch)


# ------------------------------------------------------------------ losses
def reconstruction_targets(images: np.ndarray, patch_size: int, norm_pix: bool) -> np.ndarray:
    target = patchify(images, patch_size)
    return normalize_patches(target) if norm_pix else target


def compute_losses(model: MAE, approx: ApproxNet, images: np.ndarray, masks: np.ndarray,
                   weights: LossWeights, norm_pix: bool = False, club_clamp: bool = False) -> dict:
    """Forward every masked view and evaluate the four losses.

    ``masks`` is (B, N, P). Views are processed mask-major: row ``j*B + b``
    of the latent matrix belongs to mask ``j`` of image ``b``. Returns a
    dict with tensors ``rec``, ``max_mi``, ``min_mi``, ``approx`` plus the
    latents ``z`` (N*B, L) and the posterior.
    """
    B, N, P = masks.shape
    dtype = model.patch_proj.weight.dtype
    images = np.asarray(images, dtype=dtype)
    target = reconstruction_targets(images, model.config.patch_size, norm_pix).astype(dtype)
    embedded = model.patch_embed(images)

    # views sharing a visible count are encoded as one batch
    vis_counts = (masks == 0).sum(axis=2)  # (B, N)
    groups: dict[int, list[int]] = {}
    for j in range(N):
        cnt = vis_counts[:, j]
        if (cnt != cnt[0]).any():
            raise ContractError(f"mask {j} has different visible counts across the batch")
        groups.setdefault(int(cnt[0]), []).append(j)

    z_parts, order, rec = [], [], None
    for js in groups.values():
        view_masks = masks[:, js, :].transpose(1, 0, 2).reshape(len(js) * B, P)
        emb = embedded if len(js) == 1 else concat([embedded] * len(js), axis=0)
        latent, pred, _ = model.forward_view(emb, view_masks)
        tgt = np.concatenate([target] * len(js), axis=0)
        part = rec_loss(pred, tgt, view_masks) * (len(js) / N)
        rec = part if rec is None else rec + part
        z_parts.append(latent.z_vec)
        order.extend(j * B + b for j in js for b in range(B))

    z = z_parts[0] if len(z_parts) == 1 else concat(z_parts, axis=0)
    if order != list(range(N * B)):
        z = getitem(z, np.argsort(np.asarray(order)))

    x_views = masked_inputs(images, masks, model.config.patch_size).reshape(N * B, -1)
    post = approx(x_views)
    L = z.shape[-1]
    post3 = type(post)(post.mu.reshape(N, B, L), post.sigma.reshape(N, B, L))
    z3 = z.reshape(N, B, L)
    return {
        "rec": rec,
        "max_mi": max_mi_loss(z, N, weights.tau),
        "min_mi": min_mi_loss(post3, z3, clamp=club_clamp),
        "approx": approx_loss(post3, z3),
        "z": z,
        "posterior": post3,
        "x_views": x_views,
    }


def routed_objective(parts: dict, weights: LossWeights, gate_open: bool):
    """Scalar whose single backward pass yields the three routed gradients.

    Encoder: grad of lambda1*rec + gate*(lambda2*max_mi + lambda3*min_mi).
    Decoder: grad of lambda1*rec (the MI terms never reach the decoder).
    Approximation net: grad of approx (latents detached, q detached in min_mi).
    """
    report, total = combined_loss(parts, weights, gate_open)
    return report, total + parts["approx"]


# -------------------------------------------------------------- train step
def step_masks(state: TrainState, batch: int) -> np.ndarray:
    c = state.train_config
    rng = np.random.default_rng([c.seed, 5, state.global_step])
    P = state.model_config.num_patches
    return gen_batch(batch, P, c.num_masks, c.mask_ratio, rng, c.mask_strategy, c.visible_per_mask(P))


def train_step(state: TrainState, images: np.ndarray, masks: np.ndarray | None = None) -> LossReport:
    """One iteration: forward all views, route gradients, update both optimizers."""
    if len(images) == 0:
        raise ContractError("empty batch")
    c = state.train_config
    if masks is None:
        masks = step_masks(state, len(images))
    lr, lr_approx = state.lr(), state.approx_lr()
    try:
        parts = compute_losses(state.model, state.approx, images, masks, c.weights, c.norm_pix, c.club_clamp)
        report, objective = routed_objective(parts, c.weights, state.gate_open)
    except (NonFiniteError, ContractError) as exc:
        if isinstance(exc, ContractError) and "not finite" not in str(exc):
            raise
        snapshot = {
            "epoch": state.epoch, "global_step": state.global_step, "lr": lr,
            "gate_open": state.gate_open, "error": str(exc),
            "param_norms": {k: float(np.linalg.norm(p.data)) for k, p in state.model.parameters().items()},
        }
        raise TrainingDiverged(f"non-finite loss at step {state.global_step}: {exc}", snapshot) from exc

    objective.backward()
    main_params = state.model.parameters()
    approx_params = state.approx.parameters()
    adamw_step(main_params, state.opt_main, lr)
    adamw_step(approx_params, state.opt_approx, lr_approx)
    zero_grads(main_params)
    zero_grads(approx_params)
    if c.approx_steps > 1:
        refit_approx(state, parts, lr_approx, c.approx_steps - 1)

    state.global_step += 1
    state.rec_sum += report.rec
    state.rec_count += 1
    if c.gate_mode == "batch":
        state.gate_open = report.rec < c.weights.eps_l
    return report


def refit_approx(state: TrainState, parts: dict, lr: float, steps: int) -> None:
    """Extra approximation-net updates on this step's (detached) latents."""
    N = state.train_config.num_masks
    z = parts["z"].data.reshape(N, -1, parts["z"].shape[-1])
    params = state.approx.parameters()
    for _ in range(steps):
        post = state.approx(parts["x_views"])
        loss = approx_loss(type(post)(post.mu.reshape(z.shape), post.sigma.reshape(z.shape)), z)
        loss.backward()
        adamw_step(params, state.opt_approx, lr)
        zero_grads(params)


def end_epoch(state: TrainState) -> None:
    """Close the epoch window: record the running rec mean and update the gate."""
    c = state.train_config
    state.running_rec_loss = state.rec_sum / max(1, state.rec_count)
    state.rec_sum, state.rec_count = 0.0, 0
    state.epoch += 1
    if c.gate_mode == "open":
        state.gate_open = True
    elif c.gate_mode == "latch" and not state.gate_open and state.running_rec_loss < c.weights.eps_l:
        state.gate_open = True
        state.gate_epoch = state.epoch + 1
        log.info("gate opened after epoch %d (running rec %.4f)", state.epoch, state.running_rec_loss)


# ----------------------------------------------------------------- pretrain
def run_pretrain(model_config: ModelConfig, train_config: TrainConfig, dataset, *,
                 state: TrainState | None = None, out_dir=None, stop_after: int | None = None,
                 probe_dataset=None, on_epoch: Callable | None = None) -> TrainState:
    """Train for ``train_config.epochs`` epochs (or until ``stop_after`` epochs are done).

    Pass a restored ``state`` to resume. Periodic probes use
    ``probe_dataset`` (default: the training set). When ``out_dir`` is given the
    metrics CSV is rewritten after every epoch and a checkpoint is saved
    every ``checkpoint_every`` epochs (and at the end).
    """
    from mimae.io.checkpoint import save_checkpoint
    from mimae.io.metrics import write_metrics

    if len(dataset) == 0:
        raise ContractError("empty dataset")
    c = train_config
    spe = dataset.steps_per_epoch(c.batch_size)
    if state is None:
        state = init_state(model_config, train_config, spe)
        if c.gate_mode == "open":
            state.gate_open = True
            state.gate_epoch = 1
    out = Path(out_dir) if out_dir is not None else None
    probe_dataset = dataset if probe_dataset is None else probe_dataset
    last = c.epochs if stop_after is None else min(c.epochs, stop_after)

    while state.epoch < last:
        gate_during = state.gate_open
        totals = {"rec": 0.0, "max_mi": 0.0, "min_mi": 0.0, "approx": 0.0}
        n = 0
        lr = state.lr()
        for idx in dataset.batches(c.batch_size, c.seed, state.epoch):
            lr = state.lr()
            report = train_step(state, dataset.images[idx])
            for k in totals:
                totals[k] += getattr(report, k)
            n += 1
        end_epoch(state)
        row = {"epoch": state.epoch, "step": state.global_step, "lr": lr,
               **{k: v / max(1, n) for k, v in totals.items()},
               "gate_open": int(gate_during if c.gate_mode != "batch" else state.gate_open),
               "probe_acc": ""}
        if c.probe_every and state.epoch % c.probe_every == 0:
            row["probe_acc"] = linear_probe(state.model, probe_dataset, seed=c.seed)
        state.history.append(row)
        log.info("epoch %d rec %.4f max_mi %.4f min_mi %.4f approx %.4f gate %s", state.epoch,
                 row["rec"], row["max_mi"], row["min_mi"], row["approx"], row["gate_open"])
        if out is not None:
            write_metrics(out / "metrics.csv", state.history)
            if (c.checkpoint_every and state.epoch % c.checkpoint_every == 0) or state.epoch == last:
                save_checkpoint(out / "checkpoint.mimae", state)
        if on_epoch is not None:
            on_epoch(state, row)
    return state


# ------------------------------------------------------------ linear probe
def extract_features(model: MAE, images: np.ndarray, batch_size: int = 256) -> np.ndarray:
    """Pooled latents of unmasked images from the frozen encoder."""
    out = []
    with no_grad():
        for start in range(0, len(images), batch_size):
            out.append(model.features(images[start:start + batch_size]).data)
    return np.concatenate(out, axis=0)


def fit_linear_probe(train_x: np.ndarray, train_y: np.ndarray, test_x: np.ndarray, test_y: np.ndarray,
                     *, epochs: int = 100, lr: float = 0.1, batch_size: int = 64, momentum: float = 0.9,
                     seed: int = 0) -> float:
    """Softmax regression by SGD with cosine decay on standardized features; returns test accuracy."""
    classes = np.unique(train_y)
    if classes.size < 2:
        raise ContractError("linear probing needs at least two classes")
    k = int(max(train_y.max(), test_y.max())) + 1
    mu = train_x.mean(axis=0)
    sd = train_x.std(axis=0) + 1e-6
    xtr = ((train_x - mu) / sd).astype(np.float64)
    xte = ((test_x - mu) / sd).astype(np.float64)
    rng = np.random.default_rng([seed, 13])
    W = np.zeros((xtr.shape[1], k))
    b = np.zeros(k)
    vW, vb = np.zeros_like(W), np.zeros_like(b)
    n = len(xtr)
    steps_per_epoch = max(1, math.ceil(n / batch_size))
    total = epochs * steps_per_epoch
    step = 0
    onehot = np.eye(k)[train_y]
    for _ in range(epochs):
        perm = rng.permutation(n)
        for start in range(0, n, batch_size):
            idx = perm[start:start + batch_size]
            logits = xtr[idx] @ W + b
            logits -= logits.max(axis=1, keepdims=True)
            p = np.exp(logits)
            p /= p.sum(axis=1, keepdims=True)
            g = (p - onehot[idx]) / len(idx)
            cur = lr * 0.5 * (1.0 + math.cos(math.pi * step / total))
            vW = momentum * vW + xtr[idx].T @ g
            vb = momentum * vb + g.sum(axis=0)
            W -= cur * vW
            b -= cur * vb
            step += 1
    pred = (xte @ W + b).argmax(axis=1)
    return float((pred == test_y).mean())


def linear_probe(model: MAE, dataset, *, test_fraction: float = 0.25, seed: int = 0, **kwargs) -> float:
    """Top-1 accuracy of a linear classifier on frozen class-token features (held-out split)."""
    if np.unique(dataset.labels).size < 2:
        raise ContractError("linear probing needs at least two classes")
    train, test = dataset.split(test_fraction, seed)
    ftr = extract_features(model, train.images)
    fte = extract_features(model, test.images)
    return fit_linear_probe(ftr, train.labels, fte, test.labels, seed=seed, **kwargs)


def with_weights(config: TrainConfig, **weights) -> TrainConfig:
    """Copy of ``config`` with some loss weights replaced."""
    return replace(config, weights=replace(config.weights, **weights))
