"""Loss terms: dice overlap, latent shape distance, adversarial BCE, and
their weighted combination."""

from __future__ import annotations

import warnings
from dataclasses import dataclass

import numpy as np

from . import autodiff as ad
from .autodiff import ShapeError, Tensor

DICE_EPS = 1e-6
BCE_CLAMP = 1e-7
ACD_NORM_FLOOR = 1e-12


@dataclass
class LossWeights:
    """Weighting and schedule knobs for the combined objective."""

    lambda_enc: float = 0.001
    lambda_adv_max: float = 0.001
    alpha: float = 0.1          # ramp growth factor per epoch
    e_adv: int = 10             # ramp start epoch
    distance: str = "acd"       # "l2" or "acd"

    def __post_init__(self):
        if self.lambda_enc < 0 or self.lambda_adv_max < 0 or self.alpha < 0:
            raise ValueError("loss weights must be non-negative")
        if self.distance not in ("l2", "acd"):
            raise ValueError(f"unknown latent distance {self.distance!r}")


def dice_loss(pred, target):
    """Soft dice loss 1 - (2*sum(y*yhat)+eps)/(sum(y^2)+sum(yhat^2)+eps).

    ``pred`` holds probabilities in [0,1]; ``target`` is a binary mask.
    Differentiable w.r.t. pred.
    """
    if pred.shape != target.shape:
        raise ShapeError(f"dice_loss: {pred.shape} vs {target.shape}")
    inter = ad.dot(pred, target)
    norm = ad.add(ad.tsum(ad.square(pred)), ad.tsum(ad.square(target)))
    ratio = ad.div(inter * 2.0 + DICE_EPS, norm + DICE_EPS)
    return 1.0 - ratio


def latent_distance(p, q, kind):
    """Distance between two latent code tensors of equal length.

    l2: squared euclidean norm of the difference.
    acd: angular cosine distance 1 - <p,q>/(|p||q|); returns 1 with a
    warning if either norm underflows.
    """
    if p.shape != q.shape:
        raise ShapeError(f"latent_distance: {p.shape} vs {q.shape}")
    if kind == "l2":
        return ad.tsum(ad.square(ad.sub(p, q)))
    if kind != "acd":
        raise ValueError(f"unknown latent distance {kind!r}")
    np_ = float(np.linalg.norm(p.data))
    nq_ = float(np.linalg.norm(q.data))
    if np_ < ACD_NORM_FLOOR or nq_ < ACD_NORM_FLOOR:
        warnings.warn("ACD on (near-)zero latent code; returning maximal uncertainty 1")
        return Tensor(np.asarray(1.0, dtype=p.dtype))
    if np.array_equal(p.data, q.data):
        # identical codes: distance and its gradient are exactly zero
        return Tensor(np.asarray(0.0, dtype=p.dtype))
    norm_p = ad.sqrt(ad.tsum(ad.square(p)))
    norm_q = ad.sqrt(ad.tsum(ad.square(q)))
    return 1.0 - ad.div(ad.dot(p, q), ad.mul(norm_p, norm_q))


def shape_loss(encode_fn, ae_params, target, pred, kind):
    """Latent distance between encodings of ground truth and prediction.

    ``ae_params`` must be frozen so gradients only reach the segmenter
    through ``pred``.
    """
    if not ae_params.frozen:
        raise ad.FrozenParamsError(
            f"shape_loss requires frozen autoencoder params, {ae_params.name!r} is not")
    z_true = encode_fn(ae_params, target)
    z_pred = encode_fn(ae_params, pred)
    return latent_distance(z_true, z_pred, kind)


def binary_cross_entropy(pred, target):
    """Mean BCE with probability clamping to [1e-7, 1-1e-7]."""
    if pred.shape != target.shape:
        raise ShapeError(f"binary_cross_entropy: {pred.shape} vs {target.shape}")
    p = ad.clamp(pred, BCE_CLAMP, 1.0 - BCE_CLAMP)
    term = ad.add(ad.mul(target, ad.log(p)),
                  ad.mul(1.0 - target, ad.log(1.0 - p)))
    return -ad.tmean(term)


def adversarial_loss(pred, labels):
    """Mean binary cross-entropy of domain predictions vs labels in
    {0 (source), 1 (target)}."""
    return binary_cross_entropy(pred, labels)


def combined_loss(l_seg, l_enc, l_adv, lambda_enc, lambda_adv):
    """L = L_seg + lambda_enc * L_enc - lambda_adv * L_adv.

    The adversarial term enters negatively: the segmenter benefits from a
    confused domain classifier. Weight regularization is handled by the
    optimizer, not here.
    """
    if lambda_enc < 0 or lambda_adv < 0:
        raise ValueError("combined_loss: lambdas must be non-negative")
    out = l_seg
    if lambda_enc:
        out = ad.add(out, ad.mul(Tensor(np.asarray(lambda_enc, dtype=l_enc.dtype)), l_enc))
    if lambda_adv:
        out = ad.sub(out, ad.mul(Tensor(np.asarray(lambda_adv, dtype=l_adv.dtype)), l_adv))
    return out
