"""Loss-based hard-sample mining.

Per modality, a two-component Gaussian mixture is fit to the per-sample
cross-entropy losses; samples whose posterior under the smaller-mean
("easy") component falls below a threshold are that modality's hard set.
The joint hard set keeps candidates that (1) put a lot of fused probability
on some wrong class and (2) rank their top classes differently across
modalities, with both thresholds realized as quantiles of the observed
statistics so a target fraction of candidates survives.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .errors import ContractError, MixtureDegeneracyError


@dataclass
class MixtureFit:
    """Two-component 1-d GMM, components ordered by ascending mean."""

    means: np.ndarray
    variances: np.ndarray
    weights: np.ndarray
    iterations: int
    converged: bool
    loglik_path: np.ndarray = field(repr=False, default_factory=lambda: np.empty(0))


def _log_normal_pdf(x, mean, var):
    return -0.5 * (np.log(2.0 * np.pi * var) + (x - mean) ** 2 / var)


def fit_gmm2(
    losses: np.ndarray,
    tol: float = 1e-8,
    max_iter: int = 200,
    var_floor: float = 1e-6,
) -> MixtureFit:
    """EM fit initialized by a median split; log-likelihood is tracked per
    iteration (it is monotone up to the variance floor)."""
    x = np.asarray(losses, dtype=np.float64)
    if x.ndim != 1 or x.size < 4:
        raise ContractError(f"need >= 4 one-dimensional losses, got shape {x.shape}")
    if np.ptp(x) == 0.0:
        raise MixtureDegeneracyError("all losses identical; no mixture structure")

    median = np.median(x)
    lower = x[x <= median]
    upper = x[x > median]
    if upper.size == 0:  # ties at the median can empty the upper half
        lower = x[x < median]
        upper = x[x >= median]
    means = np.array([lower.mean(), upper.mean()])
    variances = np.maximum(np.array([lower.var(), upper.var()]), var_floor)
    weights = np.array([lower.size, upper.size], dtype=np.float64) / x.size

    loglik_path = []
    prev_ll = -np.inf
    converged = False
    iterations = 0
    for iterations in range(1, max_iter + 1):
        # E-step
        log_joint = np.stack(
            [np.log(weights[k]) + _log_normal_pdf(x, means[k], variances[k]) for k in range(2)]
        )                                                       # [2, n]
        shift = log_joint.max(axis=0, keepdims=True)
        log_total = shift[0] + np.log(np.exp(log_joint - shift).sum(axis=0))
        resp = np.exp(log_joint - log_total)                     # responsibilities
        ll = float(log_total.sum())
        loglik_path.append(ll)

        # M-step
        nk = resp.sum(axis=1)
        nk = np.maximum(nk, 1e-12)
        means = (resp * x).sum(axis=1) / nk
        variances = np.maximum((resp * (x - means[:, None]) ** 2).sum(axis=1) / nk, var_floor)
        weights = nk / x.size

        if ll - prev_ll < tol and np.isfinite(prev_ll):
            converged = True
            break
        prev_ll = ll

    order = np.argsort(means)
    return MixtureFit(
        means=means[order],
        variances=variances[order],
        weights=weights[order],
        iterations=iterations,
        converged=converged,
        loglik_path=np.asarray(loglik_path),
    )


def posterior_small(fit: MixtureFit, loss) -> np.ndarray | float:
    """P(easy component | loss): Bayes responsibility of the smaller mean."""
    x = np.asarray(loss, dtype=np.float64)
    log_joint = np.stack(
        [np.log(fit.weights[k]) + _log_normal_pdf(x, fit.means[k], fit.variances[k])
         for k in range(2)]
    )
    shift = log_joint.max(axis=0)
    total = np.exp(log_joint - shift).sum(axis=0)
    post = np.exp(log_joint[0] - shift) / total
    return float(post) if np.isscalar(loss) or np.ndim(loss) == 0 else post


def select_modality_hard(losses: np.ndarray, p: float, fit: MixtureFit | None = None) -> np.ndarray:
    """Indices whose easy-component posterior is strictly below p.

    Degenerate loss distributions yield the empty set (no hard samples this
    epoch) rather than an error.
    """
    losses = np.asarray(losses, dtype=np.float64)
    if fit is None:
        try:
            fit = fit_gmm2(losses)
        except MixtureDegeneracyError:
            return np.empty(0, dtype=int)
    post = posterior_small(fit, losses)
    return np.flatnonzero(post < p)


def topk_indices(logits: np.ndarray, k: int) -> np.ndarray:
    """Top-k class indices by logit, ties broken toward the smaller index."""
    logits = np.asarray(logits)
    if k > logits.shape[-1]:
        raise ContractError(f"k={k} exceeds {logits.shape[-1]} classes")
    order = np.lexsort((np.arange(logits.shape[-1]), -logits))
    return order[:k]


def topk_overlap(f2: np.ndarray, f3: np.ndarray, k: int) -> int:
    """|top-k(f2) intersect top-k(f3)|."""
    a = set(topk_indices(f2, k).tolist())
    b = set(topk_indices(f3, k).tolist())
    return len(a & b)


@dataclass
class SelectionReport:
    """One mining epoch: per-modality hard sets, the joint set, thresholds."""

    d2: np.ndarray
    d3: np.ndarray
    d_joint: np.ndarray
    r1: float
    r2: int
    p2: float
    p3: float
    epoch: int

    def to_record(self) -> dict:
        return {
            "d2": [int(i) for i in self.d2],
            "d3": [int(i) for i in self.d3],
            "d_joint": [int(i) for i in self.d_joint],
            "r1": float(self.r1),
            "r2": int(self.r2),
            "p2": float(self.p2),
            "p3": float(self.p3),
            "epoch": int(self.epoch),
        }


def wrong_class_confidence(probs2: np.ndarray, probs3: np.ndarray, labels: np.ndarray) -> np.ndarray:
    """max over non-ground-truth classes of p2 + p3, per sample."""
    summed = np.asarray(probs2) + np.asarray(probs3)
    masked = summed.copy()
    masked[np.arange(len(labels)), labels] = -np.inf
    return masked.max(axis=1)


def select_joint_hard(
    candidates: np.ndarray,
    probs2: np.ndarray,
    probs3: np.ndarray,
    labels: np.ndarray,
    rho: float,
    k: int,
    d2: np.ndarray | None = None,
    d3: np.ndarray | None = None,
    p2: float = float("nan"),
    p3: float = float("nan"),
    epoch: int = -1,
) -> SelectionReport:
    """Joint hard samples among candidates, with quantile-derived thresholds.

    probs2/probs3 are softmax-normalized branch outputs indexed like labels
    (the full epoch arrays); `candidates` holds indices into them. r1 is the
    (1-rho) quantile of the wrong-class confidence over candidates; r2 is
    the overlap cutoff whose selected fraction is closest to rho (smallest
    such cutoff on ties). A candidate must pass both tests.
    """
    if not (0.0 < rho <= 1.0):
        raise ContractError(f"rho must lie in (0, 1], got {rho}")
    candidates = np.asarray(candidates, dtype=int)
    if candidates.size == 0:
        raise ContractError("candidate set is empty")
    probs2, probs3, labels = np.asarray(probs2), np.asarray(probs3), np.asarray(labels)
    num_classes = probs2.shape[1]
    k = min(k, num_classes - 1)

    s1 = wrong_class_confidence(probs2[candidates], probs3[candidates], labels[candidates])
    r1 = float(np.quantile(s1, 1.0 - rho))

    overlaps = np.array(
        [topk_overlap(probs2[i], probs3[i], k) for i in candidates], dtype=int
    )
    cutoffs = np.arange(0, k + 2)
    fractions = np.array([(overlaps < c).mean() for c in cutoffs])
    r2 = int(cutoffs[np.argmin(np.abs(fractions - rho))])

    keep = (s1 > r1) & (overlaps < r2)
    d_joint = np.sort(candidates[keep])
    return SelectionReport(
        d2=np.sort(np.asarray(d2 if d2 is not None else [], dtype=int)),
        d3=np.sort(np.asarray(d3 if d3 is not None else [], dtype=int)),
        d_joint=d_joint,
        r1=r1,
        r2=r2,
        p2=p2,
        p3=p3,
        epoch=epoch,
    )


def mining_schedule(epoch: int, warmup: int, period: int) -> bool:
    """Mine at epochs warmup, warmup+period, warmup+2*period, ..."""
    if warmup < 1 or period < 1:
        raise ContractError("warmup and period must be >= 1")
    return epoch >= warmup and (epoch - warmup) % period == 0
