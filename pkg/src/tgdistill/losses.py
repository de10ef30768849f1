"""All objective terms.

Per modality the pseudo-label (FixMatch-style) objective is a supervised
cross-entropy on labeled clips plus a thresholded cross-entropy on strongly
augmented unlabeled clips against pseudo-labels fused across the two
modalities. On top of that sit the block-wise dense alignment loss that
pulls RGB features toward gradient-blocked TG features, and a symmetric
cross-modal InfoNCE over projection embeddings. ``total_loss`` combines
everything with configurable weights.
"""
from __future__ import annotations

from dataclasses import dataclass

import torch
import torch.nn.functional as F

LOG_EPS = 1e-12  # floor inside every log so saturated predictions stay finite

ALIGNMENT_KINDS = ("l1", "l2", "cosine")
PSEUDO_LABEL_METRICS = ("average", "rgb_only", "tg_only", "self")


class TrainingFaultError(RuntimeError):
    """A loss term became non-finite; carries the offending term's name."""

    def __init__(self, term: str, value: float):
        super().__init__(f"non-finite loss term {term!r}: {value}")
        self.term = term


@dataclass
class LossWeights:
    """Weights and knobs for every objective term."""

    w_fm: float = 0.5
    w_kd: float = 1.0
    w_clr: float = 1.0
    gamma: float = 0.3
    tau: float = 0.5
    lambda_u: float = 1.0
    alignment_kind: str = "cosine"
    aligned_blocks: tuple[int, ...] = (1, 2, 3, 4)
    pseudo_label_metric: str = "average"
    stop_gradient: bool = True
    symmetric_infonce: bool = True

    def __post_init__(self) -> None:
        if not 0.0 < self.gamma <= 1.0:
            raise ValueError("gamma must be in (0, 1]")
        if self.tau <= 0:
            raise ValueError("tau must be > 0")
        if min(self.w_fm, self.w_kd, self.w_clr, self.lambda_u) < 0:
            raise ValueError("loss weights must be >= 0")
        if self.alignment_kind not in ALIGNMENT_KINDS:
            raise ValueError(f"alignment_kind must be one of {ALIGNMENT_KINDS}")
        if self.pseudo_label_metric not in PSEUDO_LABEL_METRICS:
            raise ValueError(f"pseudo_label_metric must be one of {PSEUDO_LABEL_METRICS}")
        self.aligned_blocks = tuple(sorted(set(int(b) for b in self.aligned_blocks)))
        if any(b not in (1, 2, 3, 4) for b in self.aligned_blocks):
            raise ValueError("aligned_blocks must be a subset of {1, 2, 3, 4}")
        if self.w_kd > 0 and not self.aligned_blocks:
            raise ValueError("aligned_blocks must be non-empty when w_kd > 0")


@dataclass
class PseudoLabelSet:
    """Confidence mask, one-hot class picks, and the fused probabilities."""

    mask: torch.Tensor        # bool [B_u]
    labels: torch.Tensor      # long [B_u], valid where mask is true
    fused_probs: torch.Tensor  # [B_u, K]

    @property
    def mask_fraction(self) -> float:
        return float(self.mask.float().mean()) if self.mask.numel() else 0.0


def _check_simplex(probs: torch.Tensor, name: str) -> None:
    if probs.dim() != 2:
        raise ValueError(f"{name} must be [B, K], got shape {tuple(probs.shape)}")
    rows = probs.sum(dim=1)
    if not torch.allclose(rows, torch.ones_like(rows), atol=1e-4):
        raise ValueError(f"{name} rows must sum to 1")


def supervised_ce(probs: torch.Tensor, labels_onehot: torch.Tensor) -> torch.Tensor:
    """Mean cross-entropy of probability rows against one-hot labels."""
    _check_simplex(probs, "probs")
    if probs.shape != labels_onehot.shape:
        raise ValueError(f"shape mismatch {tuple(probs.shape)} vs {tuple(labels_onehot.shape)}")
    log_p = torch.log(probs.clamp_min(LOG_EPS))
    return -(labels_onehot * log_p).sum(dim=1).mean()


def fuse_pseudo_labels(probs_rgb: torch.Tensor, probs_tg: torch.Tensor,
                       gamma: float, metric: str = "average") -> PseudoLabelSet:
    """Threshold the fused prediction of the two modality models.

    ``average`` takes the elementwise mean of the two probability rows;
    ``rgb_only`` / ``tg_only`` keep a single modality. A sample enters the
    confident set iff its fused max probability reaches ``gamma``, and its
    pseudo-label is the fused argmax.
    """
    if probs_rgb.shape != probs_tg.shape:
        raise ValueError(
            f"shape mismatch {tuple(probs_rgb.shape)} vs {tuple(probs_tg.shape)}")
    _check_simplex(probs_rgb, "probs_rgb")
    _check_simplex(probs_tg, "probs_tg")
    if metric == "average":
        fused = (probs_rgb + probs_tg) / 2.0
    elif metric == "rgb_only":
        fused = probs_rgb
    elif metric == "tg_only":
        fused = probs_tg
    else:
        raise ValueError(
            f"metric must be one of ('average', 'rgb_only', 'tg_only'); "
            f"resolve 'self' into one per-modality call. Got {metric!r}")
    fused = fused.detach()
    conf, labels = fused.max(dim=1)
    mask = conf >= gamma
    return PseudoLabelSet(mask=mask, labels=labels, fused_probs=fused)


def pseudo_labels_for_modalities(probs_rgb: torch.Tensor, probs_tg: torch.Tensor,
                                 gamma: float, metric: str = "average",
                                 ) -> tuple[PseudoLabelSet, PseudoLabelSet]:
    """Targets for (RGB model, TG model) under any Table-4d style metric.

    ``self`` gives each model its own modality's thresholded prediction; every
    other metric produces one shared set.
    """
    if metric == "self":
        return (fuse_pseudo_labels(probs_rgb, probs_tg, gamma, "rgb_only"),
                fuse_pseudo_labels(probs_rgb, probs_tg, gamma, "tg_only"))
    shared = fuse_pseudo_labels(probs_rgb, probs_tg, gamma, metric)
    return shared, shared


def unsupervised_ce(probs_strong: torch.Tensor, pseudo: PseudoLabelSet) -> torch.Tensor:
    """Cross-entropy on confident pseudo-labels, divided by the full batch size.

    The divisor is B_u, not the confident count, so low-confidence batches
    contribute proportionally less.
    """
    _check_simplex(probs_strong, "probs_strong")
    b = probs_strong.shape[0]
    if pseudo.mask.shape[0] != b:
        raise ValueError("pseudo-label set does not match batch size")
    if not bool(pseudo.mask.any()):
        return probs_strong.sum() * 0.0
    log_p = torch.log(probs_strong.clamp_min(LOG_EPS))
    picked = log_p.gather(1, pseudo.labels.view(-1, 1)).squeeze(1)
    return -(picked * pseudo.mask.to(picked.dtype)).sum() / b


def _block_distance(a: torch.Tensor, b: torch.Tensor, kind: str) -> torch.Tensor:
    if a.shape != b.shape:
        raise ValueError(f"feature shape mismatch {tuple(a.shape)} vs {tuple(b.shape)}")
    if kind == "l1":
        return (a - b).abs().mean()
    if kind == "l2":
        return (a - b).pow(2).mean()
    # cosine: compare channel vectors at each (sample, t, h, w) location.
    # sqrt(s_a * s_b) instead of sqrt(s_a) * sqrt(s_b) so identical inputs
    # give exactly 1 (IEEE sqrt(s * s) == s).
    num = (a * b).sum(dim=1)
    denom = torch.sqrt((a * a).sum(dim=1) * (b * b).sum(dim=1)).clamp_min(1e-12)
    return -(num / denom).mean()


def dense_alignment_loss(rgb_feats, tg_feats, weights: LossWeights) -> torch.Tensor:
    """Block-wise feature distance, averaged over the selected blocks.

    ``rgb_feats`` / ``tg_feats`` are per-block feature lists (wrapped in a
    BlockFeatureSet or plain sequences), each entry [B, C, T, H, W]. The TG
    side is expected to be gradient-blocked by the caller; this function is
    pure math on whatever tensors it receives. Cosine distance is computed
    per spatial-temporal location over the channel axis.
    """
    feats_r = getattr(rgb_feats, "features", rgb_feats)
    feats_t = getattr(tg_feats, "features", tg_feats)
    if len(feats_r) != len(feats_t):
        raise ValueError("feature sets have different block counts")
    if not weights.aligned_blocks:
        raise ValueError("aligned_blocks is empty")
    terms = []
    for block in weights.aligned_blocks:
        a, b = feats_r[block - 1], feats_t[block - 1]
        terms.append(_block_distance(a, b, weights.alignment_kind))
    return torch.stack(terms).mean()


def cross_modal_infonce(proj_rgb: torch.Tensor, proj_tg: torch.Tensor,
                        tau: float, symmetric: bool = True) -> torch.Tensor:
    """InfoNCE over cross-modal pairs of the same batch of clips.

    For each anchor the positive is the other modality's embedding of the
    same clip and the negatives are the other modality's embeddings of every
    other clip. With ``symmetric`` both modalities serve as anchors.
    """
    if proj_rgb.shape != proj_tg.shape:
        raise ValueError("projection shape mismatch")
    b = proj_rgb.shape[0]
    if b < 2:
        raise ValueError("need at least 2 clips for in-batch negatives")
    for name, p in (("proj_rgb", proj_rgb), ("proj_tg", proj_tg)):
        norms = p.norm(dim=1)
        if not torch.allclose(norms, torch.ones_like(norms), atol=1e-4):
            raise ValueError(f"{name} rows must be l2-normalized")
    targets = torch.arange(b, device=proj_rgb.device)
    logits_r = proj_rgb @ proj_tg.t() / tau
    loss = F.cross_entropy(logits_r, targets)
    if symmetric:
        logits_t = proj_tg @ proj_rgb.t() / tau
        loss = (loss + F.cross_entropy(logits_t, targets)) / 2.0
    return loss


@dataclass
class LossTerms:
    """Per-step scalar loss terms, pre-weighting."""

    l_l_rgb: torch.Tensor
    l_u_rgb: torch.Tensor
    l_l_tg: torch.Tensor
    l_u_tg: torch.Tensor
    l_kd: torch.Tensor
    l_clr: torch.Tensor

    def named(self):
        return vars(self).items()


def total_loss(terms: LossTerms, weights: LossWeights) -> torch.Tensor:
    """Weighted sum: w_fm (L_fm^RGB + L_fm^TG) + w_kd L_kd + w_clr L_clr,
    where L_fm^m = L_l^m + lambda_u * L_u^m."""
    for name, value in terms.named():
        if not torch.isfinite(value):
            raise TrainingFaultError(name, float(value))
    fm_rgb = terms.l_l_rgb + weights.lambda_u * terms.l_u_rgb
    fm_tg = terms.l_l_tg + weights.lambda_u * terms.l_u_tg
    return (weights.w_fm * (fm_rgb + fm_tg)
            + weights.w_kd * terms.l_kd
            + weights.w_clr * terms.l_clr)
