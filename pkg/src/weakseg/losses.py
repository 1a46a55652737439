"""Label algebra for partial annotations and the training objectives.

Per-pixel labels are stored as small integer codes so whole slices can be
handled as arrays:

    0..4   Strong(c)   pixel annotated as class c
    5..9   Weak(c)     pixel annotated as "not class c"  (code = 5 + c)
    -1     Ignore      outside the lung or unannotated

Strong pixels contribute ordinary cross-entropy ``-ln p_c``.  Weak pixels are
encoded with the same one-hot vector as their strong counterpart and
contribute the *negated*, ``lambda``-weighted cross-entropy ``lambda * ln p_c``,
which rewards pushing probability away from the forbidden class.
"""

from __future__ import annotations

from dataclasses import dataclass
from enum import IntEnum

import numpy as np

from . import tensor as T
from .errors import ContractError, DimensionError

IGNORE = -1
WEAK_OFFSET = 5


class ClassId(IntEnum):
    CON = 0
    GGO = 1
    HCM = 2
    EMP = 3
    NOR = 4


CLASS_NAMES = [c.name for c in ClassId]


@dataclass(frozen=True)
class PixelLabel:
    kind: str  # "strong" | "weak" | "ignore"
    cls: ClassId | None = None

    @classmethod
    def strong(cls, c) -> "PixelLabel":
        return cls("strong", ClassId(c))

    @classmethod
    def weak(cls, c) -> "PixelLabel":
        return cls("weak", ClassId(c))

    @classmethod
    def ignore(cls) -> "PixelLabel":
        return cls("ignore")

    @property
    def code(self) -> int:
        if self.kind == "strong":
            return int(self.cls)
        if self.kind == "weak":
            return WEAK_OFFSET + int(self.cls)
        return IGNORE

    @classmethod
    def from_code(cls, code: int) -> "PixelLabel":
        if code == IGNORE:
            return cls.ignore()
        if 0 <= code < WEAK_OFFSET:
            return cls.strong(code)
        if WEAK_OFFSET <= code < 2 * WEAK_OFFSET:
            return cls.weak(code - WEAK_OFFSET)
        raise ContractError(f"invalid label code {code}")


MODES = ("proposed", "supervised_only", "semi_supervised")


@dataclass(frozen=True)
class LossConfig:
    lam: float = 0.1
    mode: str = "proposed"
    prob_floor: float = 1e-7

    def __post_init__(self):
        if self.mode not in MODES:
            raise ContractError(f"unknown loss mode {self.mode!r}; expected one of {MODES}")
        if not self.lam >= 0:
            raise ContractError(f"lambda must be >= 0, got {self.lam}")
        if not 0 < self.prob_floor < 1:
            raise ContractError(f"prob_floor must lie in (0, 1), got {self.prob_floor}")

    @property
    def weak_weight(self) -> float:
        """Multiplier on the cross-entropy of weak pixels (negative for the proposed loss)."""
        if self.mode == "supervised_only" or self.lam == 0:
            return 0.0
        return -self.lam


def encode_label(label: PixelLabel) -> np.ndarray:
    """One-hot vector; Weak(c) encodes exactly like Strong(c)."""
    if label.kind == "ignore":
        raise ContractError("Ignore pixels have no encoding; filter them out first")
    v = np.zeros(len(ClassId))
    v[int(label.cls)] = 1.0
    return v


def pixel_loss(label: PixelLabel, yhat, cfg: LossConfig) -> float:
    """Scalar loss for one pixel given its softmax output."""
    if label.kind == "ignore":
        return 0.0
    yhat = np.asarray(yhat, dtype=np.float64)
    if yhat.shape != (len(ClassId),) or abs(yhat.sum() - 1.0) > 1e-6:
        raise ContractError(f"yhat must be a normalized 5-vector, got {yhat!r}")
    p = np.clip(yhat, cfg.prob_floor, 1.0)
    ce = -float(np.dot(encode_label(label), np.log(p)))
    if label.kind == "strong":
        return ce
    if cfg.mode == "semi_supervised":
        return semi_supervised_pixel_loss(label, yhat, cfg)
    return cfg.weak_weight * ce


def pseudo_label(probs: np.ndarray, forbidden: np.ndarray) -> np.ndarray:
    """Argmax over classes other than ``forbidden`` (ties to the lowest index)."""
    masked = probs.copy()
    np.put_along_axis(masked, forbidden[..., None], -np.inf, axis=-1)
    return masked.argmax(axis=-1)


def semi_supervised_pixel_loss(label: PixelLabel, yhat, cfg: LossConfig) -> float:
    yhat = np.asarray(yhat, dtype=np.float64)
    if label.kind == "strong":
        return -float(np.log(max(yhat[int(label.cls)], cfg.prob_floor)))
    if label.kind == "ignore":
        return 0.0
    target = int(pseudo_label(yhat, np.array(int(label.cls))))
    return -float(np.log(max(yhat[target], cfg.prob_floor)))


def _check_labels(logits: T.Tensor, labels: np.ndarray) -> np.ndarray:
    labels = np.asarray(labels)
    if logits.data.ndim != 4 or logits.shape[0] != 1 or logits.shape[-1] != len(ClassId):
        raise DimensionError(f"logits must be (1, H, W, 5), got {logits.shape}")
    if labels.shape != logits.shape[1:3]:
        raise DimensionError(f"label map {labels.shape} does not match logits spatial shape {logits.shape[1:3]}")
    return labels


def _labels_and_mask(annotation) -> np.ndarray:
    labels = np.asarray(annotation.labels if hasattr(annotation, "labels") else annotation)
    lung = getattr(annotation, "lung_mask", None)
    if lung is not None:
        labels = np.where(np.asarray(lung, dtype=bool), labels, IGNORE)
    return labels


def _weighted_nll(logits: T.Tensor, targets: np.ndarray, weights: np.ndarray, floored: np.ndarray, floor: float) -> T.Tensor:
    """``sum_i w_i * -ln p_i[t_i] / #{w_i != 0}`` through softmax.

    Pixels flagged in ``floored`` read ``ln max(p, floor)``; the others use the
    exact log-softmax so a badly wrong strong pixel keeps its gradient.
    """
    n = np.count_nonzero(weights)
    coef = np.zeros(logits.shape)
    np.put_along_axis(coef[0], targets[..., None], weights[..., None], axis=-1)
    if n:
        coef /= -n
    exact = np.where(floored[None, ..., None], 0.0, coef)
    loss = T.sum_all(T.mul(T.log_softmax_channels(logits), exact))
    if floored.any():
        clamped = np.where(floored[None, ..., None], coef, 0.0)
        logp = T.log(T.clamp_min(T.softmax_channels(logits), floor))
        loss = T.add(loss, T.sum_all(T.mul(logp, clamped)))
    return loss


def batch_loss(logits: T.Tensor, annotation, cfg: LossConfig) -> T.Tensor:
    """Mean loss over contributing pixels of one slice.

    A pixel contributes when it is inside the lung, not Ignore, and carries a
    nonzero weight; with ``lambda == 0`` weak pixels therefore drop out of the
    denominator too, making the result identical to deleting them.
    ``annotation`` is a :class:`~weakseg.dataset.PartialAnnotation` or a bare
    label-code map.
    """
    if cfg.mode == "semi_supervised":
        return semi_supervised_loss(logits, annotation, cfg)
    labels = _check_labels(logits, _labels_and_mask(annotation))
    strong = (labels >= 0) & (labels < WEAK_OFFSET)
    weak = labels >= WEAK_OFFSET
    targets = np.where(weak, labels - WEAK_OFFSET, np.where(strong, labels, 0))
    weights = np.where(strong, 1.0, np.where(weak, cfg.weak_weight, 0.0))
    return _weighted_nll(logits, targets, weights, weak & (weights != 0), cfg.prob_floor)


def semi_supervised_loss(logits: T.Tensor, annotation, cfg: LossConfig) -> T.Tensor:
    """Cross-entropy on strong pixels plus pseudo-labels on weak ones.

    A Weak(c) pixel is trained toward the most probable class other than c
    under the current (detached) prediction.
    """
    labels = _check_labels(logits, _labels_and_mask(annotation))
    strong = (labels >= 0) & (labels < WEAK_OFFSET)
    weak = labels >= WEAK_OFFSET
    forbidden = np.where(weak, labels - WEAK_OFFSET, 0)
    probs = T.softmax_channels(logits).data[0]
    pseudo = pseudo_label(probs, forbidden)
    targets = np.where(weak, pseudo, np.where(strong, labels, 0))
    weights = np.where(strong | weak, 1.0, 0.0)
    return _weighted_nll(logits, targets, weights, np.zeros(labels.shape, dtype=bool), cfg.prob_floor)


def strong_pixel_loss(logits: T.Tensor, annotation, prob_floor: float = 1e-7) -> T.Tensor:
    """Mean cross-entropy over strong pixels only (the validation score)."""
    return batch_loss(logits, annotation, LossConfig(lam=0.0, mode="supervised_only", prob_floor=prob_floor))

