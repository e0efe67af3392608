"""Balanced error rate (BER) over whole image, shadow and non-shadow regions."""

import math
from dataclasses import dataclass

import numpy as np

from .errors import RequestError


@dataclass
class BERReport:
    ber: float
    ber_s: float  # shadow-region error; NaN when the image has no shadow pixels
    ber_ns: float  # non-shadow-region error; NaN when all pixels are shadow
    counts: tuple  # (Tp, Tn, Np, Nn)


def binarize(prob_mask, threshold=0.5):
    """Threshold a probability mask; pixels >= threshold become 1."""
    if not 0.0 < threshold < 1.0:
        raise RequestError("threshold must lie in (0,1)")
    return (np.asarray(prob_mask) >= threshold).astype(np.uint8)


def ber_compute(pred_mask, gt_mask):
    """BER of a binary prediction against a binary ground truth.

    When one class is absent from the ground truth, its term is dropped and
    the BER is computed from the remaining term alone.
    """
    pred = np.asarray(pred_mask)
    gt = np.asarray(gt_mask)
    if pred.shape != gt.shape:
        raise RequestError(
            f"pred shape {pred.shape} != gt shape {gt.shape}"
        )
    for name, m in (("pred", pred), ("gt", gt)):
        if not np.isin(m, (0, 1)).all():
            raise RequestError(f"{name} mask must be strictly binary")
    np_ = int((gt == 1).sum())
    nn = int((gt == 0).sum())
    tp = int(((pred == 1) & (gt == 1)).sum())
    tn = int(((pred == 0) & (gt == 0)).sum())
    ber_s = (1.0 - tp / np_) * 100.0 if np_ > 0 else math.nan
    ber_ns = (1.0 - tn / nn) * 100.0 if nn > 0 else math.nan
    terms = [t for t in (tp / np_ if np_ > 0 else None, tn / nn if nn > 0 else None) if t is not None]
    ber = (1.0 - sum(terms) / len(terms)) * 100.0
    return BERReport(ber=ber, ber_s=ber_s, ber_ns=ber_ns, counts=(tp, tn, np_, nn))


def aggregate_ber(reports, pixel_pooled=False):
    """Dataset-level BER: mean of per-image BERs (default) or pixel-pooled."""
    if not reports:
        raise RequestError("no reports to aggregate")
    if not pixel_pooled:
        ber = float(np.mean([r.ber for r in reports]))
        ber_s = float(np.nanmean([r.ber_s for r in reports]))
        ber_ns = float(np.nanmean([r.ber_ns for r in reports]))
        tp = sum(r.counts[0] for r in reports)
        tn = sum(r.counts[1] for r in reports)
        np_ = sum(r.counts[2] for r in reports)
        nn = sum(r.counts[3] for r in reports)
        return BERReport(ber, ber_s, ber_ns, (tp, tn, np_, nn))
    tp = sum(r.counts[0] for r in reports)
    tn = sum(r.counts[1] for r in reports)
    np_ = sum(r.counts[2] for r in reports)
    nn = sum(r.counts[3] for r in reports)
    ber_s = (1.0 - tp / np_) * 100.0 if np_ > 0 else math.nan
    ber_ns = (1.0 - tn / nn) * 100.0 if nn > 0 else math.nan
    terms = [t for t in (tp / np_ if np_ > 0 else None, tn / nn if nn > 0 else None) if t is not None]
    ber = (1.0 - sum(terms) / len(terms)) * 100.0
    return BERReport(ber, ber_s, ber_ns, (tp, tn, np_, nn))
