"""
Training objectives: L1 task loss, pairwise feature loss, RBF-kernel MMD
(quadratic U-statistic and the linear-time estimator) and the composite
losses that combine them.
"""
import enum
import logging
from dataclasses import dataclass
from typing import Optional

import numpy as np
from scipy.spatial.distance import cdist, pdist

from transfer import net
from utils.errors import EmptyInputError, RegimeMismatchError, ShapeError

logger = logging.getLogger(__name__)

SIGMA_FLOOR = 1e-8


@dataclass(frozen=True)
class LossWeights:
    alpha: float = 1.0
    beta: float = 0.1
    gamma: float = 0.1

    def __post_init__(self):
        if min(self.alpha, self.beta, self.gamma) < 0:
            raise ValueError(f"loss weights must be >= 0, got {self}")


@dataclass(frozen=True)
class KernelConfig:
    """kind selects an entry of KERNELS; bandwidth is 'median' or a fixed sigma."""
    kind: str = "rbf"
    bandwidth: str = "median"
    max_points: int = 256

    def __post_init__(self):
        if self.kind not in KERNELS:
            raise ValueError(f"unknown kernel kind {self.kind!r}, expected one of {sorted(KERNELS)}")
        if not self.uses_median:
            try:
                sigma = float(self.bandwidth)
            except ValueError:
                raise ValueError(f"bandwidth must be 'median' or a number, got {self.bandwidth!r}") from None
            if not sigma > 0:
                raise ValueError(f"fixed bandwidth must be > 0, got {sigma}")

    @property
    def uses_median(self) -> bool:
        return str(self.bandwidth).lower() == "median"

    @classmethod
    def fixed(cls, sigma: float) -> "KernelConfig":
        return cls(bandwidth=repr(float(sigma)))


class RBFKernel:
    """k(x, y) = exp(-||x - y||^2 / (2 sigma^2))"""

    def __init__(self, sigma: float):
        if not sigma > 0:
            raise ValueError(f"sigma must be > 0, got {sigma}")
        self.sigma = float(sigma)

    def matrix(self, x, y) -> np.ndarray:
        return np.exp(-cdist(x, y, "sqeuclidean") / (2.0 * self.sigma ** 2))

    def rowwise(self, x, y) -> np.ndarray:
        diff = x - y
        return np.exp(-np.sum(diff * diff, axis=1) / (2.0 * self.sigma ** 2))

    def grad_first(self, x, y, k) -> np.ndarray:
        # d k(x, y) / dx, row by row, given k = rowwise(x, y)
        return -(k / self.sigma ** 2)[:, None] * (x - y)


KERNELS = {"rbf": RBFKernel}


def _as_batch(batch, name) -> np.ndarray:
    batch = np.asarray(batch, dtype=np.float64)
    if batch.ndim != 2:
        raise ShapeError(f"{name} must be a 2-d batch of feature vectors, got shape {batch.shape}")
    return batch


def median_heuristic(batch_p, batch_q, max_points: int = 256) -> float:
    """
    Median pairwise Euclidean distance over the joint batch.

    The joint batch is subsampled to at most max_points evenly spaced rows;
    the result is floored at 1e-8.
    """
    joint = np.vstack([_as_batch(batch_p, "batch_p"), _as_batch(batch_q, "batch_q")])
    if len(joint) < 2:
        raise EmptyInputError("median heuristic needs at least 2 vectors")
    if len(joint) > max_points:
        rows = np.unique(np.linspace(0, len(joint) - 1, max_points).round().astype(int))
        joint = joint[rows]
    return max(float(np.median(pdist(joint))), SIGMA_FLOOR)


def make_kernel(config: KernelConfig, batch_p, batch_q):
    # Bandwidth is recomputed per call and treated as a constant for gradients
    if config.uses_median:
        sigma = median_heuristic(batch_p, batch_q, config.max_points)
    else:
        sigma = float(config.bandwidth)
    return KERNELS[config.kind](sigma)


def task_loss_l1(predictions, labels):
    """Sum of |pred - label| and its gradient sign(pred - label), sign(0) = 0."""
    predictions = np.asarray(predictions, dtype=np.float64).ravel()
    labels = np.asarray(labels, dtype=np.float64).ravel()
    if predictions.shape != labels.shape:
        raise ShapeError(f"{len(predictions)} predictions vs {len(labels)} labels")
    if len(labels) == 0:
        raise EmptyInputError("task loss needs at least one prediction")
    diff = predictions - labels
    return float(np.abs(diff).sum()), np.sign(diff)


def pairwise_loss(features_source, features_target):
    """
    Sum over pairs of ||f_S,i - f_T,i||_2 (not squared).

    Returns:
        (loss, gradient wrt source batch, gradient wrt target batch);
        pairs with identical features get a zero gradient.
    """
    fs = _as_batch(features_source, "features_source")
    ft = _as_batch(features_target, "features_target")
    if fs.shape != ft.shape:
        raise ShapeError(f"paired batches differ in shape: {fs.shape} vs {ft.shape}")
    diff = fs - ft
    norms = np.linalg.norm(diff, axis=1)
    nonzero = norms > 0
    grad = np.zeros_like(diff)
    grad[nonzero] = diff[nonzero] / norms[nonzero, None]
    return float(norms.sum()), grad, -grad


def mmd_quadratic(batch_p, batch_q, kernel) -> float:
    """
    Unbiased quadratic-time estimate of the squared MMD.

    Within-batch means skip i == j. With equal batch sizes the cross mean
    skips i == j too, so batch_q == batch_p gives exactly 0.
    """
    p = _as_batch(batch_p, "batch_p")
    q = _as_batch(batch_q, "batch_q")
    m, n = len(p), len(q)
    if m < 2 or n < 2:
        raise EmptyInputError(f"mmd_quadratic needs at least 2 vectors per batch, got {m} and {n}")
    if p.shape[1] != q.shape[1]:
        raise ShapeError(f"feature lengths differ: {p.shape[1]} vs {q.shape[1]}")
    k_pp = kernel.matrix(p, p)
    k_qq = kernel.matrix(q, q)
    k_pq = kernel.matrix(p, q)
    within_p = (k_pp.sum() - np.trace(k_pp)) / (m * (m - 1))
    within_q = (k_qq.sum() - np.trace(k_qq)) / (n * (n - 1))
    if m == n:
        cross = (k_pq.sum() - np.trace(k_pq)) / (m * (m - 1))
    else:
        cross = k_pq.mean()
    return float(within_p + within_q - 2.0 * cross)


def mmd_linear(batch_p, batch_q, kernel):
    """
    Linear-time unbiased squared-MMD estimate over consecutive row pairs.

    (2/n) * sum_i [k(p_2i-1, p_2i) + k(q_2i-1, q_2i) - k(p_2i-1, q_2i) - k(p_2i, q_2i-1)]

    Rows are consumed in the given order. Returns (estimate, grad_p, grad_q).
    """
    p = _as_batch(batch_p, "batch_p")
    q = _as_batch(batch_q, "batch_q")
    if p.shape != q.shape:
        raise ShapeError(f"mmd_linear needs equal batch shapes, got {p.shape} and {q.shape}")
    n = len(p)
    if n < 2 or n % 2:
        raise ShapeError(f"mmd_linear needs an even batch size >= 2, got {n}")

    p1, p2, q1, q2 = p[0::2], p[1::2], q[0::2], q[1::2]
    k_pp = kernel.rowwise(p1, p2)
    k_qq = kernel.rowwise(q1, q2)
    k_pq = kernel.rowwise(p1, q2)
    k_qp = kernel.rowwise(p2, q1)
    scale = 2.0 / n
    value = scale * float(np.sum(k_pp + k_qq - k_pq - k_qp))

    grad_p = np.empty_like(p)
    grad_q = np.empty_like(q)
    grad_p[0::2] = scale * (kernel.grad_first(p1, p2, k_pp) - kernel.grad_first(p1, q2, k_pq))
    grad_p[1::2] = scale * (kernel.grad_first(p2, p1, k_pp) - kernel.grad_first(p2, q1, k_qp))
    grad_q[0::2] = scale * (kernel.grad_first(q1, q2, k_qq) - kernel.grad_first(q1, p2, k_qp))
    grad_q[1::2] = scale * (kernel.grad_first(q2, q1, k_qq) - kernel.grad_first(q2, p1, k_pq))
    return value, grad_p, grad_q


# ---------------------------------------------------------------------------
# Composite losses
# ---------------------------------------------------------------------------

class LossMode(str, enum.Enum):
    TASK = "task"            # alpha * task(source) + beta * task(target)
    PAIRWISE = "pairwise"    # ... + gamma * pairwise(pool3 features)
    MMD = "mmd"              # alpha * task(source) + gamma * MMD^2(conv1 hook)


@dataclass
class TrainBatch:
    """
    One minibatch. Target rows line up with pair_source_images row by row;
    mmd_target_images are unlabeled and unpaired.
    """
    source_images: Optional[np.ndarray] = None
    source_actions: Optional[np.ndarray] = None
    source_labels: Optional[np.ndarray] = None
    target_images: Optional[np.ndarray] = None
    target_actions: Optional[np.ndarray] = None
    target_labels: Optional[np.ndarray] = None
    pair_source_images: Optional[np.ndarray] = None
    mmd_target_images: Optional[np.ndarray] = None

    @property
    def num_source(self) -> int:
        return 0 if self.source_labels is None else len(self.source_labels)

    @property
    def num_target(self) -> int:
        return 0 if self.target_labels is None else len(self.target_labels)


@dataclass(frozen=True)
class LossTerms:
    """Per-term means (raw) plus the weights that combine them."""
    task_source: float = 0.0
    task_target: float = 0.0
    alignment: float = 0.0
    weights: LossWeights = LossWeights()

    @property
    def weighted_task_source(self) -> float:
        return self.weights.alpha * self.task_source

    @property
    def weighted_task_target(self) -> float:
        return self.weights.beta * self.task_target

    @property
    def weighted_alignment(self) -> float:
        return self.weights.gamma * self.alignment

    @property
    def total(self) -> float:
        return self.weighted_task_source + self.weighted_task_target + self.weighted_alignment


def _add_into(total: dict, grads: dict):
    for name, value in grads.items():
        total[name] += value


def check_batch(mode: LossMode, batch: TrainBatch):
    mode = LossMode(mode)
    if batch.num_source == 0 and batch.num_target == 0:
        raise RegimeMismatchError("batch has neither source nor target rows")
    if mode is LossMode.PAIRWISE:
        if batch.num_target == 0 or batch.pair_source_images is None:
            raise RegimeMismatchError("pairwise mode needs labeled target rows and their paired source images")
        if len(batch.pair_source_images) != batch.num_target:
            raise RegimeMismatchError(
                f"{len(batch.pair_source_images)} paired source images for {batch.num_target} target rows")
    elif batch.pair_source_images is not None:
        raise RegimeMismatchError(f"{mode.value} mode does not take paired source images")
    if mode is LossMode.MMD:
        if batch.num_source == 0 or batch.mmd_target_images is None:
            raise RegimeMismatchError("mmd mode needs labeled source rows and unlabeled target images")
        if len(batch.mmd_target_images) != batch.num_source:
            raise RegimeMismatchError(
                f"mmd mode needs as many target images ({len(batch.mmd_target_images)}) as source rows ({batch.num_source})")
        if batch.num_target:
            raise RegimeMismatchError("mmd mode does not take labeled target rows")
    elif batch.mmd_target_images is not None:
        raise RegimeMismatchError(f"{mode.value} mode does not take unlabeled target images")
    return mode


def composite_loss(mode, batch: TrainBatch, params: dict, arch: net.Architecture,
                   weights: LossWeights, kernel: KernelConfig = KernelConfig()):
    """
    Weighted training objective and its full parameter gradient.

    Each term is a mean over its own rows (task sums divided by row count,
    pairwise sum divided by pair count; the linear MMD estimate already is
    a mean), so the weights keep their meaning at any batch size.

    Returns:
        (total, gradients dict, LossTerms)
    """
    mode = check_batch(mode, batch)
    grads = net.zeros_like_params(params)
    task_source = task_target = alignment = 0.0

    if batch.num_source:
        n_s = batch.num_source
        feats_s, cache_s = net.forward_features(batch.source_images, batch.source_actions, params, arch)
        pred_s, head_s = net.forward_head(feats_s, params, arch)
        loss_s, sign_s = task_loss_l1(pred_s, batch.source_labels)
        task_source = loss_s / n_s
        d_pred_s = weights.alpha * sign_s / n_s

        if mode is LossMode.MMD:
            hook_s, hook_cache_s = net.forward_mmd_hook(cache_s, params, arch)
            zero_actions = np.zeros((len(batch.mmd_target_images), 2))
            _, cache_t = net.forward_features(batch.mmd_target_images, zero_actions, params, arch)
            hook_t, hook_cache_t = net.forward_mmd_hook(cache_t, params, arch)
            kern = make_kernel(kernel, hook_s, hook_t)
            alignment, grad_hook_s, grad_hook_t = mmd_linear(hook_s, hook_t, kern)
            _add_into(grads, net.backward(params, arch, cache_s, d_pred=d_pred_s, head_cache=head_s,
                                          d_hook=weights.gamma * grad_hook_s, hook_cache=hook_cache_s))
            _add_into(grads, net.backward(params, arch, cache_t,
                                          d_hook=weights.gamma * grad_hook_t, hook_cache=hook_cache_t))
        else:
            _add_into(grads, net.backward(params, arch, cache_s, d_pred=d_pred_s, head_cache=head_s))

    if batch.num_target:
        n_t = batch.num_target
        feats_t, cache_t = net.forward_features(batch.target_images, batch.target_actions, params, arch)
        pred_t, head_t = net.forward_head(feats_t, params, arch)
        loss_t, sign_t = task_loss_l1(pred_t, batch.target_labels)
        task_target = loss_t / n_t
        d_pred_t = weights.beta * sign_t / n_t
        d_feat_t = None

        if mode is LossMode.PAIRWISE:
            # Paired source image seen with the same action as its target row
            feats_ps, cache_ps = net.forward_features(batch.pair_source_images, batch.target_actions, params, arch)
            pair_sum, grad_ps, grad_t = pairwise_loss(feats_ps, feats_t)
            alignment = pair_sum / n_t
            d_feat_t = weights.gamma * grad_t / n_t
            _add_into(grads, net.backward(params, arch, cache_ps, d_features=weights.gamma * grad_ps / n_t))
        _add_into(grads, net.backward(params, arch, cache_t, d_pred=d_pred_t, head_cache=head_t,
                                      d_features=d_feat_t))

    terms = LossTerms(task_source, task_target, alignment, weights)
    return terms.total, grads, terms
