"""The named finite-difference battery behind `invgate gradcheck`.

Each check re-derives gradients of one loss (or one representative pipeline)
by central differences on randomized small inputs and compares them with
the tape's output. The theta check compares the closed-form inner
derivative of the invariance risk against differencing the risk in theta,
at a much tighter tolerance since both sides are exact to O(eps^2).
"""

from __future__ import annotations

import numpy as np

from . import tensor as T
from .gradcheck import check_gradients
from .losses import (
    ContrastiveBatch,
    IRMConfig,
    cross_entropy,
    irm_grad_theta,
    mm_rex,
    modality_irm_loss,
    nt_xent_align,
    sup_infonce,
    v_rex,
)

N, D, C = 6, 4, 3  # pool size, feature dim, classes


def _labels(rng, n=N, c=C):
    labels = rng.integers(0, c, size=n)
    labels[0] = labels[1]                 # guarantee a positive pair
    labels[2] = (labels[0] + 1) % c       # guarantee a negative
    return labels


def _loss_builders(seed: int):
    rng = np.random.default_rng(seed)
    labels = _labels(rng)
    labels_b = _labels(rng)

    def ce(leaves):
        return T.mean_(cross_entropy(leaves[0], labels))

    def infonce(leaves):
        return sup_infonce(ContrastiveBatch(leaves[0], labels), theta=1.0)

    def penalty(leaves):
        return T.square(irm_grad_theta(ContrastiveBatch(leaves[0], labels)))

    def inv_irmv1(leaves):
        envs = {
            "2d": ContrastiveBatch(leaves[0], labels),
            "3d": ContrastiveBatch(leaves[1], labels_b),
        }
        return modality_irm_loss(envs, IRMConfig(lam=5.0))

    gate_feats_2d = rng.normal(size=(N, D))
    gate_feats_3d = rng.normal(size=(N, D))

    def inv_through_gate(leaves):
        mask = T.sigmoid(leaves[0])
        envs = {
            "2d": ContrastiveBatch(T.mul(mask, T.constant(gate_feats_2d)), labels),
            "3d": ContrastiveBatch(T.mul(mask, T.constant(gate_feats_3d)), labels_b),
        }
        return modality_irm_loss(envs, IRMConfig(lam=5.0))

    def align(leaves):
        return nt_xent_align(leaves[0], leaves[1], tau=3.0)

    def rex_mm(leaves):
        risks = [sup_infonce(ContrastiveBatch(leaves[0], labels)),
                 sup_infonce(ContrastiveBatch(leaves[1], labels_b))]
        return mm_rex(risks, lambda_min=0.25)

    def rex_v(leaves):
        risks = [sup_infonce(ContrastiveBatch(leaves[0], labels)),
                 sup_infonce(ContrastiveBatch(leaves[1], labels_b))]
        return v_rex(risks, beta=2.0)

    feat = rng.uniform(-2, 2, size=(N, D))
    feat_b = rng.uniform(-2, 2, size=(N, D))
    logits = rng.uniform(-2, 2, size=(N, C))
    gate_logits = rng.uniform(-2, 2, size=D)
    return [
        ("cross_entropy", ce, [logits]),
        ("sup_infonce", infonce, [feat]),
        ("irm_penalty", penalty, [feat]),
        ("invariance_irmv1", inv_irmv1, [feat, feat_b]),
        ("invariance_gate_path", inv_through_gate, [gate_logits]),
        ("nt_xent_align", align, [feat, feat_b]),
        ("mm_rex", rex_mm, [feat, feat_b]),
        ("v_rex", rex_v, [feat, feat_b]),
    ]


def _pipeline_builder(seed: int):
    """Encoder -> gate -> head -> CE, differentiated through every stage."""
    rng = np.random.default_rng(seed)
    labels = rng.integers(0, C, size=5)
    x = rng.uniform(-2, 2, size=(5, D))

    def pipeline(leaves):
        w, b, mask_logits, protos = leaves
        feats = T.add(T.matmul(T.constant(x), w), b)
        gated = T.mul(T.sigmoid(mask_logits), feats)
        logits = T.matmul(gated, T.transpose2d(protos))
        return T.mean_(cross_entropy(logits, labels))

    return pipeline, [
        rng.uniform(-1, 1, size=(D, D)),
        rng.uniform(-1, 1, size=D),
        rng.uniform(-2, 2, size=D),
        rng.uniform(-1, 1, size=(C, D)),
    ]


def theta_check(seed: int) -> float:
    """Relative gap between analytic and differenced theta derivatives."""
    rng = np.random.default_rng(seed)
    feats = rng.uniform(-2, 2, size=(N, D))
    labels = _labels(rng)
    batch = ContrastiveBatch(T.constant(feats), labels)
    eps = 1e-5
    hi = sup_infonce(ContrastiveBatch(T.constant(feats), labels), theta=1 + eps).item()
    lo = sup_infonce(ContrastiveBatch(T.constant(feats), labels), theta=1 - eps).item()
    fd = (hi - lo) / (2 * eps)
    analytic = irm_grad_theta(batch).item()
    return abs(analytic - fd) / max(abs(fd), 1e-3)


def run_suite(n_configs: int = 20, tol: float = 1e-4, theta_tol: float = 1e-6):
    """Returns [(check name, passed, worst relative error)]."""
    worst: dict[str, float] = {}
    for seed in range(n_configs):
        for name, build, arrays in _loss_builders(seed):
            err, _, _ = check_gradients(build, arrays)
            worst[name] = max(worst.get(name, 0.0), err)
        pipeline, arrays = _pipeline_builder(seed)
        err, _, _ = check_gradients(pipeline, arrays)
        worst["full_pipeline"] = max(worst.get("full_pipeline", 0.0), err)
        worst["theta_derivative"] = max(worst.get("theta_derivative", 0.0),
                                        theta_check(seed))
    results = []
    for name, err in worst.items():
        bound = theta_tol if name == "theta_derivative" else tol
        results.append((name, err < bound, err))
    return results
