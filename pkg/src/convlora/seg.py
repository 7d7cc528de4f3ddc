"""Mask decoder with a classification branch, matching, losses and metrics."""

from __future__ import annotations

import csv
from dataclasses import dataclass, field
from typing import Sequence

import numpy as np
from scipy import special
from scipy.optimize import linear_sum_assignment

from . import tensor as T
from .errors import ConfigError, DataError, DimensionError
from .nn import MLP, LayerNorm, Linear, Module, parameter
from .tensor import Tensor


@dataclass
class MaskDecoderOutput:
    mask_logits: Tensor  # B x N x H x W
    class_logits: Tensor | None  # B x N x (K + 1); index K is "no object"

    @property
    def n_classes(self) -> int:
        return 0 if self.class_logits is None else self.class_logits.shape[-1] - 1


@dataclass
class Matching:
    pred_idx: np.ndarray
    gt_idx: np.ndarray
    cost: float

    def as_dict(self) -> dict[int, int]:
        """gt segment -> prediction slot."""
        return {int(g): int(p) for p, g in zip(self.pred_idx, self.gt_idx)}


@dataclass
class LossWeights:
    mask: float = 1.0
    cls: float = 2.0
    moe: float = 2.0
    ce: float = 5.0
    dice: float = 5.0

    def __post_init__(self):
        for k, v in vars(self).items():
            if v < 0:
                raise ConfigError(f"loss weight {k} must be nonnegative, got {v}")


@dataclass
class Segment:
    label: int
    mask: np.ndarray  # H x W, {0, 1}


class CrossBlock(Module):
    """Tokens attend to image features, then a token-wise MLP."""

    def __init__(self, dim: int, rng: np.random.Generator):
        self.norm_t = LayerNorm(dim)
        self.norm_f = LayerNorm(dim)
        self.q = Linear(dim, dim, rng)
        self.k = Linear(dim, dim, rng)
        self.v = Linear(dim, dim, rng)
        self.out = Linear(dim, dim, rng)
        self.norm_m = LayerNorm(dim)
        self.mlp = MLP([dim, 2 * dim, dim], rng, act=T.gelu)

    def forward(self, tokens: Tensor, feats: Tensor) -> Tensor:
        d = tokens.shape[-1]
        f = self.norm_f(feats)
        q = self.q(self.norm_t(tokens))
        scores = T.matmul(q, T.transpose(self.k(f), (0, 2, 1))) * (1.0 / np.sqrt(d))
        ctx = T.matmul(T.softmax(scores, axis=-1), self.v(f))
        tokens = tokens + self.out(ctx)
        return tokens + self.mlp(self.norm_m(tokens))


class MaskDecoder(Module):
    """N output tokens -> N mask logit maps and N x (K+1) class logits.

    Frozen constant prompt tokens join the output tokens in both cross-attention
    blocks.  Masks are the dot product between each token's hypernetwork
    embedding and bilinearly upscaled, projected image features.
    """

    def __init__(self, dim: int, n_tokens: int, n_classes: int, image_size: int,
                 rng: np.random.Generator, n_prompt: int = 2, mask_dim: int | None = None,
                 class_head: bool = True):
        if n_tokens < 1:
            raise ConfigError(f"decoder needs at least one output token, got {n_tokens}")
        mask_dim = mask_dim or dim
        self.image_size = image_size
        self.n_tokens = n_tokens
        self.tokens = parameter(rng.normal(0.0, 1.0, (n_tokens, dim)))
        self._prompt = Tensor(rng.normal(0.0, 1.0, (n_prompt, dim)))
        self.blocks = [CrossBlock(dim, rng) for _ in range(2)]
        self.feat_proj = Linear(dim, mask_dim, rng, bias=False)
        self.hyper = MLP([dim, dim, mask_dim], rng)
        self.cls_head = MLP([dim, dim, dim, n_classes + 1], rng) if class_head else None

    def forward(self, features: Tensor) -> MaskDecoderOutput:
        return decode_masks(features, self)


def decode_masks(features: Tensor, dec: MaskDecoder, tokens: Tensor | None = None) -> MaskDecoderOutput:
    B, d, gh, gw = features.shape
    tokens = dec.tokens if tokens is None else tokens
    N = tokens.shape[0]
    S = dec.image_size
    feats = T.transpose(T.reshape(features, (B, d, gh * gw)), (0, 2, 1))  # B x L x d
    seq = T.concat([tokens, dec._prompt], axis=0)
    t = T.reshape(seq, (1,) + seq.shape) + T.Tensor(np.zeros((B, 1, 1)))
    for blk in dec.blocks:
        t = blk(t, feats)
    out_tok = t[:, :N, :]
    proj = dec.feat_proj(feats)  # B x L x m
    m = proj.shape[-1]
    pmap = T.reshape(T.transpose(proj, (0, 2, 1)), (B, m, gh, gw))
    up = T.interpolate_bilinear(pmap, size=(S, S))
    masks = T.matmul(dec.hyper(out_tok), T.reshape(up, (B, m, S * S)))
    cls = dec.cls_head(out_tok) if dec.cls_head is not None else None
    return MaskDecoderOutput(T.reshape(masks, (B, N, S, S)), cls)


# ----------------------------------------------------------------------------
# matching


def _np_bce(logits: np.ndarray, target: np.ndarray) -> np.ndarray:
    """Mean BCE between every prediction row and every target row -> P x G."""
    pos = np.logaddexp(0.0, -logits)
    neg = np.logaddexp(0.0, logits)
    return (pos @ target.T + neg @ (1.0 - target).T) / logits.shape[1]


def _np_dice(logits: np.ndarray, target: np.ndarray) -> np.ndarray:
    p = special.expit(logits)
    num = 2.0 * p @ target.T
    den = p.sum(-1)[:, None] + target.sum(-1)[None, :]
    return 1.0 - (num + 1.0) / (den + 1.0)


def sample_points(hw: int, num_points: int | None, rng: np.random.Generator | None) -> np.ndarray:
    if num_points is None or num_points >= hw:
        return np.arange(hw)
    rng = rng or np.random.default_rng(0)
    return rng.choice(hw, num_points, replace=False)


def match_cost(mask_logits: np.ndarray, class_logits: np.ndarray, segments: Sequence[Segment],
               weights: LossWeights = LossWeights(), num_points: int | None = 1024,
               rng: np.random.Generator | None = None) -> np.ndarray:
    """N x M matching cost for one image.

    Mask terms are evaluated on a shared random subset of pixel positions.
    """
    N = mask_logits.shape[0]
    M = len(segments)
    if M > N:
        raise DataError(f"{M} ground-truth segments exceed {N} prediction slots")
    if M == 0:
        return np.zeros((N, 0))
    pts = sample_points(mask_logits[0].size, num_points, rng)
    pred = mask_logits.reshape(N, -1)[:, pts]
    tgt = np.stack([s.mask.reshape(-1)[pts] for s in segments]).astype(np.float64)
    probs = special.softmax(class_logits, axis=-1)
    cls = -probs[:, [s.label for s in segments]]
    return weights.ce * _np_bce(pred, tgt) + weights.dice * _np_dice(pred, tgt) + weights.cls * cls


def hungarian_match(cost: np.ndarray) -> Matching:
    cost = np.asarray(cost, dtype=np.float64)
    if not np.isfinite(cost).all():
        raise ValueError("matching cost contains non-finite entries")
    rows, cols = linear_sum_assignment(cost)
    return Matching(rows, cols, float(cost[rows, cols].sum()))


# ----------------------------------------------------------------------------
# losses


def dice_loss(logits: Tensor, target: np.ndarray) -> Tensor:
    """1 - (2 sum(p t) + 1) / (sum p + sum t + 1) over the last axis."""
    p = T.sigmoid(logits)
    num = T.tsum(p * target, axis=-1) * 2.0 + 1.0
    den = T.tsum(p, axis=-1) + target.sum(-1) + 1.0
    return 1.0 - num / den


def multiclass_loss(pred: MaskDecoderOutput, gt: Sequence[Sequence[Segment]],
                    matchings: Sequence[Matching], weights: LossWeights = LossWeights(),
                    moe_loss: Tensor | None = None, num_points: int | None = 1024,
                    rng: np.random.Generator | None = None) -> Tensor:
    """Matched mask BCE + dice, slot classification CE, plus the MoE term.

    Unmatched slots are trained toward "no object" and get no mask loss.
    """
    B, N = pred.class_logits.shape[:2]
    K = pred.n_classes
    targets = np.full((B, N), K, dtype=np.intp)
    bce_terms, dice_terms = [], []
    for b in range(B):
        match = matchings[b]
        if len(match.pred_idx) == 0:
            continue
        targets[b, match.pred_idx] = [gt[b][g].label for g in match.gt_idx]
        pts = sample_points(pred.mask_logits.shape[2] * pred.mask_logits.shape[3], num_points, rng)
        flat = T.reshape(pred.mask_logits[b], (N, -1))
        logits = T.take_rows(flat, match.pred_idx)[:, pts]
        tgt = np.stack([gt[b][g].mask.reshape(-1)[pts] for g in match.gt_idx]).astype(np.float64)
        bce_terms.append(T.mean(T.bce_with_logits(logits, tgt), axis=1))
        dice_terms.append(dice_loss(logits, tgt))
    logp = T.log_softmax(pred.class_logits, axis=-1)
    onehot = np.zeros(pred.class_logits.shape)
    np.put_along_axis(onehot, targets[..., None], 1.0, axis=-1)
    l_cls = -T.tsum(logp * onehot) * (1.0 / (B * N))
    total = l_cls * weights.cls
    if bce_terms:
        l_ce = T.mean(T.concat(bce_terms, axis=0))
        l_dice = T.mean(T.concat(dice_terms, axis=0))
        total = total + (l_ce * weights.ce + l_dice * weights.dice) * weights.mask
    if moe_loss is not None:
        total = total + moe_loss * weights.moe
    return total


def _box_mean(x: np.ndarray, size: int) -> np.ndarray:
    """Mean over a size x size window clipped at the border (per-pixel valid count)."""
    r = size // 2
    H, W = x.shape[-2:]
    c = np.pad(x, [(0, 0)] * (x.ndim - 2) + [(1, 0), (1, 0)]).cumsum(-2).cumsum(-1)
    i0 = np.clip(np.arange(H) - r, 0, H)
    i1 = np.clip(np.arange(H) + r + 1, 0, H)
    j0 = np.clip(np.arange(W) - r, 0, W)
    j1 = np.clip(np.arange(W) + r + 1, 0, W)
    s = (c[..., i1[:, None], j1[None, :]] - c[..., i0[:, None], j1[None, :]]
         - c[..., i1[:, None], j0[None, :]] + c[..., i0[:, None], j0[None, :]])
    count = (i1 - i0)[:, None] * (j1 - j0)[None, :]
    return s / count


def structure_weights(gt: np.ndarray, window: int = 15) -> np.ndarray:
    return 1.0 + 5.0 * np.abs(_box_mean(gt, window) - gt)


def structure_loss(pred_logits: Tensor, gt: np.ndarray, window: int = 15) -> Tensor:
    """Boundary-weighted BCE plus weighted IoU loss, averaged over the batch."""
    gt = np.asarray(gt, dtype=np.float64)
    if pred_logits.shape != gt.shape:
        raise DimensionError(f"prediction {pred_logits.shape} vs target {gt.shape}")
    if not np.isin(gt, (0.0, 1.0)).all():
        raise DataError("structure loss needs a binary target")
    w = structure_weights(gt, window)
    wsum = w.sum(axis=(2, 3))
    wbce = T.tsum(T.bce_with_logits(pred_logits, gt) * w, axis=(2, 3)) / wsum
    p = T.sigmoid(pred_logits)
    inter = T.tsum(p * (gt * w), axis=(2, 3))
    union = T.tsum((p + gt) * w, axis=(2, 3))
    wiou = 1.0 - (inter + 1.0) / (union - inter + 1.0)
    return T.mean(wbce + wiou)


# ----------------------------------------------------------------------------
# inference and metrics


def semantic_inference(out: MaskDecoderOutput) -> np.ndarray:
    """Per-pixel argmax of sum_j sigmoid(mask_j) * softmax(class_j)[c] over real classes."""
    probs = special.softmax(out.class_logits.data, axis=-1)[..., :-1]
    masks = special.expit(out.mask_logits.data)
    scores = np.einsum("bnc,bnhw->bchw", probs, masks)
    return scores.argmax(axis=1)


@dataclass
class MetricsRecord:
    values: dict = field(default_factory=dict)

    def __getitem__(self, key):
        return self.values[key]

    def rows(self, run_id: str, epoch: int, split: str) -> list[tuple]:
        return [(run_id, epoch, split, k, v) for k, v in self.values.items()]


METRIC_FIELDS = ("run_id", "epoch", "split", "metric", "value")


def write_metrics_csv(path, rows: Sequence[tuple], append: bool = False) -> None:
    mode = "a" if append else "w"
    with open(path, mode, newline="") as fh:
        w = csv.writer(fh)
        if not append or fh.tell() == 0:
            w.writerow(METRIC_FIELDS)
        for r in rows:
            w.writerow([r[0], r[1], r[2], r[3], repr(float(r[4]))])


def binary_scores(pred: np.ndarray, gt: np.ndarray) -> dict:
    pred = np.asarray(pred, dtype=bool)
    gt = np.asarray(gt, dtype=bool)
    tp = np.sum(pred & gt)
    fp = np.sum(pred & ~gt)
    fn = np.sum(~pred & gt)
    tn = np.sum(~pred & ~gt)
    union = tp + fp + fn
    if union == 0:
        iou = dice = 1.0
    else:
        iou = tp / union
        dice = 2 * tp / (2 * tp + fp + fn)
    fnr = fn / (tp + fn) if tp + fn else 0.0
    fpr = fp / (tn + fp) if tn + fp else 0.0
    return {"IoU": float(iou), "Dice": float(dice), "Acc": float((tp + tn) / pred.size),
            "BER": float(50.0 * (fnr + fpr))}


def compute_metrics(pred, gt, prob=None, n_classes: int | None = None) -> MetricsRecord:
    """Per-image metrics averaged over the batch.

    Binary mode (``n_classes`` is None): ``pred``/``gt`` are B x H x W masks and
    ``prob`` optional foreground probabilities for MAE.  Multi-class mode:
    label maps, reporting mIoU over classes present in prediction or target
    plus pixel accuracy.
    """
    pred = np.asarray(pred)
    gt = np.asarray(gt)
    if pred.shape != gt.shape:
        raise DimensionError(f"prediction {pred.shape} vs target {gt.shape}")
    if pred.ndim == 2:
        pred, gt = pred[None], gt[None]
        prob = None if prob is None else np.asarray(prob)[None]
    if n_classes is None:
        per = [binary_scores(p, g) for p, g in zip(pred, gt)]
        values = {k: float(np.mean([s[k] for s in per])) for k in per[0]}
        p = pred.astype(np.float64) if prob is None else np.asarray(prob, dtype=np.float64)
        values["MAE"] = float(np.mean(np.abs(p - gt)))
        return MetricsRecord(values)
    ious = []
    for p, g in zip(pred, gt):
        present = np.union1d(np.unique(p), np.unique(g))
        ious.append(np.mean([binary_scores(p == c, g == c)["IoU"] for c in present]))
    return MetricsRecord({"mIoU": float(np.mean(ious)), "Acc": float(np.mean(pred == gt))})
