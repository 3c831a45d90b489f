"""Toy modality encoders, the shared soft gate, and classification heads.

Each branch is a stack of affine layers with ReLU between stages (no
activation after the last), standing in for a real backbone plus the
trainable projection/adapter. Both branches project to the same output
dimension so their features live in one space; a single sigmoid-squashed
mask gates that space for both modalities.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import tensor as T
from .errors import ContractError, NumericError, ShapeError
from .tensor import Tensor

MODALITIES = ("2d", "3d", "2.5d")


@dataclass
class ViewSet:
    """The per-sample bag of 2D view feature vectors."""

    views: list[np.ndarray]

    def __post_init__(self):
        if len(self.views) < 1:
            raise ContractError("ViewSet needs at least one view")
        dims = {np.asarray(v).shape for v in self.views}
        if len(dims) != 1 or len(next(iter(dims))) != 1:
            raise ContractError(f"views must share a single vector shape, got {dims}")
        self.views = [np.asarray(v, dtype=np.float64) for v in self.views]

    @property
    def n(self) -> int:
        return len(self.views)

    @property
    def dim(self) -> int:
        return self.views[0].shape[0]

    def as_array(self) -> np.ndarray:
        return np.stack(self.views, axis=0)


def _affine_params(dims, init, rng, prefix):
    if init not in ("identity", "random"):
        raise ContractError(f"unknown init {init!r}")
    weights, biases = [], []
    for i, (din, dout) in enumerate(zip(dims[:-1], dims[1:])):
        if init == "identity":
            if din != dout:
                raise ContractError(
                    f"identity init needs square stages, got {din}x{dout}"
                )
            w = np.eye(din)
        else:
            w = rng.normal(0.0, 1.0 / np.sqrt(din), size=(din, dout))
        weights.append(T.parameter(w, name=f"{prefix}.w{i}"))
        biases.append(T.parameter(np.zeros(dout), name=f"{prefix}.b{i}"))
    return weights, biases


class ModalityEncoder:
    """Affine(+ReLU) stack for one modality; shared across that branch."""

    def __init__(
        self,
        modality: str,
        dims: list[int],
        init: str = "random",
        rng: np.random.Generator | None = None,
        name: str | None = None,
    ):
        if modality not in MODALITIES:
            raise ContractError(f"modality must be one of {MODALITIES}")
        if len(dims) < 2:
            raise ContractError("dims must list input and output sizes")
        if init == "random" and rng is None:
            raise ContractError("random init requires an rng")
        self.modality = modality
        self.dims = list(dims)
        name = name or f"enc{modality.replace('.', '')}"
        self.weights, self.biases = _affine_params(dims, init, rng, name)

    @property
    def input_dim(self) -> int:
        return self.dims[0]

    @property
    def output_dim(self) -> int:
        return self.dims[-1]

    @property
    def params(self) -> list[Tensor]:
        return [*self.weights, *self.biases]

    def __call__(self, x: Tensor | np.ndarray) -> Tensor:
        x = T.as_tensor(x)
        if x.shape[-1] != self.input_dim:
            raise ShapeError(
                f"{self.modality} encoder expects last dim {self.input_dim}, got {x.shape}"
            )
        h = x
        last = len(self.weights) - 1
        for i, (w, b) in enumerate(zip(self.weights, self.biases)):
            h = T.add(T.matmul(h, w), b)
            if i != last:
                h = T.relu(h)
        return h


def encode_3d(encoder: ModalityEncoder, features: Tensor | np.ndarray) -> Tensor:
    return encoder(features)


def encode_2d(adapter: ModalityEncoder, views: ViewSet) -> tuple[list[Tensor], Tensor]:
    """Per-view features plus their mean as the aggregated 2D feature."""
    per_view = [adapter(v) for v in views.views]
    total = per_view[0]
    for v in per_view[1:]:
        total = T.add(total, v)
    return per_view, T.mul(total, T.constant(1.0 / views.n))


def encode_view_batch(adapter: ModalityEncoder, views: np.ndarray) -> tuple[Tensor, Tensor]:
    """Batched form: [B, N, d_in] -> (per-view [B, N, d_out], mean [B, d_out])."""
    if views.ndim != 3:
        raise ShapeError(f"expected [B, N, d] views, got {views.shape}")
    feats = adapter(T.constant(views))
    return feats, T.mean_(feats, axis=1)


class GateMask:
    """Learnable per-dimension soft mask shared by both modalities."""

    def __init__(self, dim: int, name: str = "gate"):
        self.dim = dim
        self.mask_logits = T.parameter(np.zeros(dim), name=f"{name}.mask_logits")

    @property
    def params(self) -> list[Tensor]:
        return [self.mask_logits]

    def mask(self, learn: bool = True) -> Tensor:
        """sigmoid(mask_logits); `learn=False` detaches it so gradients pass
        through the product to the features but never reach the logits."""
        m = T.sigmoid(self.mask_logits)
        return m if learn else m.detach()

    def apply(self, x: Tensor | np.ndarray, learn: bool = True) -> Tensor:
        x = T.as_tensor(x)
        if x.shape[-1] != self.dim:
            raise ShapeError(f"gate of dim {self.dim} applied to {x.shape}")
        return T.mul(self.mask(learn=learn), x)

    def values(self) -> np.ndarray:
        with T.no_grad():
            return T.sigmoid(self.mask_logits).data.copy()


class ClassHead:
    """Class-prototype head; cosine mode mirrors similarity-based logits."""

    def __init__(
        self,
        num_classes: int,
        dim: int,
        mode: str = "cosine",
        rng: np.random.Generator | None = None,
        scale: float = 1.0,
        name: str = "head",
    ):
        if mode not in ("cosine", "affine"):
            raise ContractError(f"head mode must be cosine or affine, got {mode!r}")
        if rng is None:
            raise ContractError("ClassHead requires an rng for prototype init")
        self.mode = mode
        self.num_classes = num_classes
        self.dim = dim
        protos = rng.normal(0.0, scale / np.sqrt(dim), size=(num_classes, dim))
        self.prototypes = T.parameter(protos, name=f"{name}.prototypes")

    @property
    def params(self) -> list[Tensor]:
        return [self.prototypes]

    def logits(self, features: Tensor | np.ndarray) -> Tensor:
        features = T.as_tensor(features)
        if features.shape[-1] != self.dim:
            raise ShapeError(f"head of dim {self.dim} got features {features.shape}")
        if self.mode == "cosine":
            norms = np.linalg.norm(features.data.reshape(-1, self.dim), axis=-1)
            if np.any(norms == 0.0):
                raise NumericError("cosine head got a zero-norm feature")
            f = T.l2_normalize(features, axis=-1)
            p = T.l2_normalize(self.prototypes, axis=-1)
        else:
            f, p = features, self.prototypes
        return T.matmul(f, T.transpose2d(p))


def classify(features: Tensor | np.ndarray, head: ClassHead) -> Tensor:
    return head.logits(features)


def average_view_logits(per_view_logits: Tensor) -> Tensor:
    """[B, N, C] per-view logits -> [B, C] branch logits."""
    if per_view_logits.ndim != 3:
        raise ShapeError(f"expected [B, N, C], got {per_view_logits.shape}")
    return T.mean_(per_view_logits, axis=1)


class MultiViewAggregator:
    """Opt-in replacement for mean view pooling.

    Global path: two affine maps with a ReLU between, over the concatenated
    views. View path: views reweighted by the softmax of the row-means of
    their cosine affinity matrix, projected, summed, ReLU'd. The output is
    the delta-blend of the two paths.
    """

    def __init__(
        self,
        num_views: int,
        dim: int,
        hidden: int,
        rng: np.random.Generator,
        name: str = "mva",
    ):
        self.num_views = num_views
        self.dim = dim
        cat = num_views * dim
        self.f1_w = T.parameter(rng.normal(0, 1 / np.sqrt(cat), (cat, hidden)), name=f"{name}.f1.w")
        self.f1_b = T.parameter(np.zeros(hidden), name=f"{name}.f1.b")
        self.f2_w = T.parameter(rng.normal(0, 1 / np.sqrt(hidden), (hidden, dim)), name=f"{name}.f2.w")
        self.f2_b = T.parameter(np.zeros(dim), name=f"{name}.f2.b")
        self.proj_w = T.parameter(np.eye(dim), name=f"{name}.proj.w")
        self.proj_b = T.parameter(np.zeros(dim), name=f"{name}.proj.b")

    @property
    def params(self) -> list[Tensor]:
        return [self.f1_w, self.f1_b, self.f2_w, self.f2_b, self.proj_w, self.proj_b]

    def __call__(self, per_view: Tensor, delta: float, return_parts: bool = False):
        if not (0.0 <= delta <= 1.0):
            raise ContractError(f"delta must lie in [0, 1], got {delta}")
        if per_view.ndim == 2:
            per_view = T.reshape(per_view, (1,) + per_view.shape)
            squeeze = True
        else:
            squeeze = False
        b, n, d = per_view.shape
        if n != self.num_views or d != self.dim:
            raise ShapeError(f"aggregator built for {self.num_views}x{self.dim}, got {per_view.shape}")

        flat = T.reshape(per_view, (b, n * d))
        f_global = T.add(
            T.matmul(T.relu(T.add(T.matmul(flat, self.f1_w), self.f1_b)), self.f2_w),
            self.f2_b,
        )

        vn = T.l2_normalize(per_view, axis=-1)
        affinity = T.matmul(vn, T.swap_last2(vn))            # [B, N, N]
        weights = T.softmax(T.mean_(affinity, axis=2), axis=-1)  # [B, N]
        projected = T.add(T.matmul(per_view, self.proj_w), self.proj_b)
        weighted = T.mul(projected, T.reshape(weights, (b, n, 1)))
        f_view = T.relu(T.sum_(weighted, axis=1))

        out = T.add(
            T.mul(T.constant(1.0 - delta), f_global), T.mul(T.constant(delta), f_view)
        )
        if squeeze:
            out = T.reshape(out, (d,))
            f_global = T.reshape(f_global, (d,))
            f_view = T.reshape(f_view, (d,))
        if return_parts:
            return out, f_global, f_view
        return out


def multi_view_aggregate(
    aggregator: MultiViewAggregator, per_view: Tensor, delta: float, return_parts: bool = False
):
    return aggregator(per_view, delta, return_parts=return_parts)


class CrossAttention:
    """Bidirectional single-token cross-attention producing a blended feature.

    Forward pass queries with the 3D feature over the 2D key/value; the
    reverse pass swaps roles; outputs are averaged. Used only as an extra
    invariance environment, so its weights stay frozen.
    """

    def __init__(self, dim: int, rng: np.random.Generator | None = None, identity: bool = False,
                 name: str = "xattn"):
        def init(tag):
            w = np.eye(dim) if identity else rng.normal(0, 1 / np.sqrt(dim), (dim, dim))
            return T.parameter(w, name=f"{name}.{tag}")

        if not identity and rng is None:
            raise ContractError("random init requires an rng")
        self.dim = dim
        self.wq, self.wk, self.wv = init("wq"), init("wk"), init("wv")
        self.wq2, self.wk2, self.wv2 = init("wq2"), init("wk2"), init("wv2")

    @property
    def params(self) -> list[Tensor]:
        return [self.wq, self.wk, self.wv, self.wq2, self.wk2, self.wv2]

    def __call__(self, x2: Tensor | np.ndarray, x3: Tensor | np.ndarray) -> Tensor:
        x2, x3 = T.as_tensor(x2), T.as_tensor(x3)
        if x2.shape != x3.shape or x2.shape[-1] != self.dim:
            raise ShapeError(f"cross-attention dim {self.dim}, got {x2.shape} / {x3.shape}")
        squeeze = x2.ndim == 1
        if squeeze:
            x2 = T.reshape(x2, (1, self.dim))
            x3 = T.reshape(x3, (1, self.dim))

        def one_way(q_in, kv_in, wq, wk, wv):
            q = T.matmul(q_in, wq)
            k = T.matmul(kv_in, wk)
            v = T.matmul(kv_in, wv)
            score = T.sum_(T.mul(q, k), axis=-1, keepdims=True)  # [B, 1]
            attn = T.softmax(score, axis=-1)                     # single key -> 1
            return T.mul(attn, v)

        fwd = one_way(x3, x2, self.wq, self.wk, self.wv)
        rev = one_way(x2, x3, self.wq2, self.wk2, self.wv2)
        out = T.mul(T.add(fwd, rev), T.constant(0.5))
        if squeeze:
            out = T.reshape(out, (self.dim,))
        return out


def cross_attention_fuse(attn: CrossAttention, x2, x3) -> Tensor:
    return attn(x2, x3)
