"""Margin-based softmax losses and the Inter-Prototype penalty.

All losses return a :class:`LossResult` carrying analytic gradients with
respect to the *raw* features and prototypes: the chain rule runs through
both column normalizations, so callers can feed the gradients straight
into backpropagation and SGD.
"""

import math
from dataclasses import dataclass, field
from typing import Mapping, Optional

import numpy as np

from .core_math import COS_CLAMP, as_matrix, column_norms, log_sum_exp_columns

KINDS = ("softmax", "cosface", "arcface")


@dataclass
class MarginConfig:
    """Hyperparameters of the combined objective.

    ``per_class_margin_override`` maps identity index to a margin that
    replaces ``margin`` for that class (raised-margin baseline).
    ``per_sample_weight`` maps the child flag (True/False) to a weight on
    that sample's cross-entropy term (re-weighting baseline).
    ``easy_margin`` is kept for completeness and defaults to off; the
    plain ``cos(theta + m)`` form is used unless it is switched on.
    """

    kind: str = "arcface"
    scale: float = 64.0
    margin: float = 0.5
    lambda_ip: float = 1.0
    per_class_margin_override: Optional[Mapping[int, float]] = None
    per_sample_weight: Optional[Mapping[bool, float]] = None
    easy_margin: bool = False

    def __post_init__(self):
        if self.kind not in KINDS:
            raise ValueError(f"unknown loss kind {self.kind!r}; expected one of {KINDS}")
        if not self.scale > 0:
            raise ValueError("scale must be positive")
        if self.margin < 0:
            raise ValueError("margin must be >= 0")
        if self.lambda_ip < 0:
            raise ValueError("lambda_ip must be >= 0")
        margins = [self.margin]
        if self.per_class_margin_override:
            margins += list(self.per_class_margin_override.values())
        if any(m < 0 for m in margins):
            raise ValueError("margins must be >= 0")
        if self.kind == "arcface" and any(m >= math.pi / 2 for m in margins):
            raise ValueError("arcface margin must be < pi/2")
        if self.per_sample_weight:
            if any(not w > 0 for w in self.per_sample_weight.values()):
                raise ValueError("per-sample weights must be positive")


@dataclass
class LossResult:
    loss: float
    grad_features: np.ndarray
    grad_prototypes: np.ndarray
    parts: dict = field(default_factory=dict)


def _normalize_backward(grad_unit, unit, norms):
    """Pull a gradient w.r.t. unit columns back to the raw columns."""
    radial = np.sum(grad_unit * unit, axis=0)
    return (grad_unit - unit * radial) / norms


def _class_margins(cfg, labels, n):
    m = np.full(labels.shape, float(cfg.margin))
    if cfg.per_class_margin_override:
        for cls, value in cfg.per_class_margin_override.items():
            if not 0 <= cls < n:
                raise ValueError(f"margin override for class {cls} outside [0, {n})")
            m[labels == cls] = float(value)
    return m


def _target_logit(kind, cos_t, m, easy_margin):
    """Margin-adjusted target cosine psi and its derivative d psi / d cos."""
    if kind == "softmax":
        return cos_t.copy(), np.ones_like(cos_t)
    if kind == "cosface":
        return cos_t - m, np.ones_like(cos_t)
    c = np.clip(cos_t, -1.0 + COS_CLAMP, 1.0 - COS_CLAMP)
    theta = np.arccos(c)
    psi = np.cos(theta + m)
    dpsi = np.sin(theta + m) / np.sin(theta)
    clipped = c != cos_t
    dpsi[clipped] = 0.0
    if easy_margin:
        keep = cos_t <= 0
        psi[keep] = cos_t[keep]
        dpsi[keep] = 1.0
    return psi, dpsi


def _as_stack(a, name):
    """Float64 array of shape (..., rows, cols); finite entries only."""
    a = np.asarray(a, dtype=np.float64)
    if a.ndim < 2:
        raise ValueError(f"{name} must be at least 2-D, got shape {a.shape}")
    if not np.isfinite(a).all():
        raise ValueError(f"{name} contains non-finite entries")
    return a


def _unit_stack(a, name):
    norms = np.sqrt(np.einsum("...ij,...ij->...j", a, a))
    if not norms.all():
        raise ValueError(f"{name} has a zero-norm column")
    return a / norms[..., None, :], norms


def _margin_setup(x, w, labels, cfg, is_child):
    """Validate shapes and labels; return labels, per-sample margins and weights."""
    if x.shape[-2] != w.shape[-2]:
        raise ValueError(f"feature dim {x.shape[-2]} != prototype dim {w.shape[-2]}")
    labels = np.asarray(labels, dtype=np.int64).reshape(-1)
    batch, n = x.shape[-1], w.shape[-1]
    if batch < 1 or labels.size != batch:
        raise ValueError(f"need one label per sample: {labels.size} labels, {batch} samples")
    if labels.min() < 0 or labels.max() >= n:
        bad = np.flatnonzero((labels < 0) | (labels >= n))
        raise ValueError(f"label {int(labels[bad[0]])} at sample {int(bad[0])} outside [0, {n})")
    weights = np.ones(batch)
    if cfg.per_sample_weight:
        if is_child is None:
            raise ValueError("per_sample_weight requires is_child flags")
        flags = np.asarray(is_child, dtype=bool).reshape(-1)
        weights = np.array([float(cfg.per_sample_weight.get(bool(f), 1.0)) for f in flags])
    return labels, _class_margins(cfg, labels, n), weights


def _margin_forward(xu, wu, labels, m, weights, cfg):
    """Loss over unit features (..., d, N) and unit prototypes (..., d, n).

    Leading axes broadcast, so one call can score a stack of instances.
    """
    cols = np.arange(labels.size)
    cos = np.swapaxes(wu, -1, -2) @ xu  # (..., n, N)
    psi, dpsi = _target_logit(cfg.kind, cos[..., labels, cols], m, cfg.easy_margin)
    logits = cfg.scale * cos
    logits[..., labels, cols] = cfg.scale * psi
    lse = log_sum_exp_columns(logits)
    per_sample = lse - logits[..., labels, cols]
    loss = np.sum(weights * per_sample, axis=-1) / labels.size
    return loss, logits, lse, dpsi


def margin_cross_entropy(features, prototypes, labels, cfg, is_child=None):
    """Batch-mean margin softmax cross-entropy over scaled cosines.

    Parameters
    ----------
    features : (d, N) array
    prototypes : (d, n) array
    labels : N identity indices in ``[0, n)``
    cfg : MarginConfig
    is_child : optional N booleans, consulted only when
        ``cfg.per_sample_weight`` is set.
    """
    x = as_matrix(features, "features")
    w = as_matrix(prototypes, "prototypes")
    labels, m, weights = _margin_setup(x, w, labels, cfg, is_child)
    x_norm = column_norms(x, "features")
    w_norm = column_norms(w, "prototypes")
    xu = x / x_norm
    wu = w / w_norm
    loss, logits, lse, dpsi = _margin_forward(xu, wu, labels, m, weights, cfg)
    loss = float(loss)

    # d loss / d logits = softmax - onehot, then through the scale and psi
    cols = np.arange(labels.size)
    probs = np.exp(logits - lse)
    probs[labels, cols] -= 1.0
    g_cos = cfg.scale * probs * (weights / labels.size)
    g_cos[labels, cols] *= dpsi

    g_xu = wu @ g_cos
    g_wu = xu @ g_cos.T
    return LossResult(
        loss=loss,
        grad_features=_normalize_backward(g_xu, xu, x_norm),
        grad_prototypes=_normalize_backward(g_wu, wu, w_norm),
        parts={"margin": loss},
    )


def margin_loss_values(features, prototypes, labels, cfg, is_child=None):
    """Margin loss for stacks of instances, without gradients.

    ``features`` (..., d, N) and ``prototypes`` (..., d, n) broadcast over
    their leading axes; the result has the broadcast leading shape. Used to
    run finite-difference checks in a single call.
    """
    x = _as_stack(features, "features")
    w = _as_stack(prototypes, "prototypes")
    labels, m, weights = _margin_setup(x, w, labels, cfg, is_child)
    xu, _ = _unit_stack(x, "features")
    wu, _ = _unit_stack(w, "prototypes")
    return _margin_forward(xu, wu, labels, m, weights, cfg)[0]


def _child_index(child_ids, n):
    ids = np.asarray(list(child_ids), dtype=np.int64).reshape(-1)
    if ids.size < 2:
        raise ValueError(f"inter-prototype loss needs >= 2 child identities, got {ids.size}")
    if np.unique(ids).size != ids.size:
        raise ValueError("duplicate indices in child_ids")
    if np.any((ids < 0) | (ids >= n)):
        raise ValueError(f"child_ids must lie in [0, {n})")
    return ids


def _child_cosines(sub):
    """Off-diagonal cosines of (..., d, k) columns, diagonal zeroed.

    Taken from the Gram matrix as G_ij / sqrt(G_ii G_jj), so two identical
    columns give exactly 1.
    """
    gram = np.einsum("...ki,...kj->...ij", sub, sub)
    diag = np.diagonal(gram, axis1=-2, axis2=-1)
    c = gram / np.sqrt(diag[..., :, None] * diag[..., None, :])
    k = np.arange(sub.shape[-1])
    c[..., k, k] = 0.0
    return c


def inter_prototype_loss(prototypes, child_ids):
    """Sum of squared off-diagonal cosines among the child prototype columns.

    Every ordered pair is counted, so the value equals
    ``||C||_F^2 - n_child`` for the child cosine matrix ``C``.
    Gradient rows of non-child columns are exactly zero.
    """
    w = as_matrix(prototypes, "prototypes")
    ids = _child_index(child_ids, w.shape[1])
    sub = w[:, ids]
    norms = column_norms(sub, "child prototypes")
    unit = sub / norms
    c = _child_cosines(sub)
    loss = float(np.sum(c * c))
    # dL/dC_ij = 2 C_ij off the diagonal; C symmetric in the unit columns
    g_unit = 4.0 * (unit @ c)
    grad = np.zeros_like(w)
    grad[:, ids] = _normalize_backward(g_unit, unit, norms)
    return LossResult(
        loss=loss,
        grad_features=None,
        grad_prototypes=grad,
        parts={"ip": loss},
    )


def inter_prototype_loss_values(prototypes, child_ids):
    """Inter-Prototype loss for a stack of (..., d, n) prototype matrices."""
    w = _as_stack(prototypes, "prototypes")
    ids = _child_index(child_ids, w.shape[-1])
    sub = w[..., ids]
    _unit_stack(sub, "child prototypes")
    c = _child_cosines(sub)
    return np.sum(c * c, axis=(-2, -1))


def total_loss(features, prototypes, labels, child_ids, cfg, is_child=None):
    """Margin loss plus ``cfg.lambda_ip`` times the Inter-Prototype loss.

    With ``lambda_ip == 0`` the margin result is returned untouched and
    ``child_ids`` is ignored.
    """
    margin = margin_cross_entropy(features, prototypes, labels, cfg, is_child=is_child)
    if cfg.lambda_ip == 0:
        margin.parts = {"margin": margin.loss, "ip": 0.0}
        return margin
    ip = inter_prototype_loss(prototypes, child_ids)
    return LossResult(
        loss=margin.loss + cfg.lambda_ip * ip.loss,
        grad_features=margin.grad_features,
        grad_prototypes=margin.grad_prototypes + cfg.lambda_ip * ip.grad_prototypes,
        parts={"margin": margin.loss, "ip": ip.loss},
    )


def total_loss_values(features, prototypes, labels, child_ids, cfg, is_child=None):
    """Stacked counterpart of :func:`total_loss` (values only)."""
    margin = margin_loss_values(features, prototypes, labels, cfg, is_child=is_child)
    if cfg.lambda_ip == 0:
        return margin
    return margin + cfg.lambda_ip * inter_prototype_loss_values(prototypes, child_ids)
