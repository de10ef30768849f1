"""The optimization loop: schedules, warm-ups, dual-model updates, checkpoints.

Each step forwards the weak views of both modalities without gradient to
fuse pseudo-labels, then runs one gradient forward per modality over the
concatenated (labeled weak, unlabeled weak, unlabeled strong) views. The
weak slices feed the dense alignment (TG side detached) and the cross-modal
contrastive pool; a single backward of the weighted total updates both
models through their own SGD optimizers.
"""
from __future__ import annotations

import json
import logging
import math
import time
from dataclasses import dataclass
from pathlib import Path
from typing import TYPE_CHECKING

import numpy as np
import torch

from .data import DatasetManifest, SemiBatch, SemiBatchSampler
from .losses import (
    LossTerms,
    LossWeights,
    cross_modal_infonce,
    dense_alignment_loss,
    pseudo_labels_for_modalities,
    supervised_ce,
    total_loss,
    unsupervised_ce,
)
from .model import (
    ActionModel,
    BackboneConfig,
    precise_bn_recompute,
    prepare_input,
    save_checkpoint,
    weight_decay_param_groups,
)

if TYPE_CHECKING:
    from .config import RunConfig

logger = logging.getLogger(__name__)

VARIANTS = ("full", "rgb_only", "tg_only")


@dataclass
class TrainConfig:
    base_lr: float = 0.02
    momentum: float = 0.9
    weight_decay: float = 1e-4
    total_epochs: int = 8
    lr_warmup_epochs: int = 1
    supervised_warmup_epochs: int = 2
    precise_bn_batches: int = 8
    batch_labeled: int = 5
    batch_unlabeled: int = 5
    variant: str = "full"
    eval_every_epochs: int = 0  # 0 = final evaluation only
    checkpoint_every_epochs: int = 0

    def __post_init__(self) -> None:
        if self.variant not in VARIANTS:
            raise ValueError(f"variant must be one of {VARIANTS}")
        if self.lr_warmup_epochs + self.supervised_warmup_epochs >= self.total_epochs:
            raise ValueError("warm-up epochs must leave room for the main schedule")
        if min(self.batch_labeled, self.batch_unlabeled) < 1:
            raise ValueError("batch sizes must be >= 1")


def lr_at(step: int, config: TrainConfig, steps_per_epoch: int) -> float:
    """Linear ramp to base_lr, then cosine decay to zero over the remainder."""
    total = config.total_epochs * steps_per_epoch
    warmup = config.lr_warmup_epochs * steps_per_epoch
    if not 0 <= step < total:
        raise ValueError(f"step {step} outside schedule [0, {total})")
    if step < warmup:
        return config.base_lr * step / warmup
    progress = (step - warmup) / (total - warmup)
    return config.base_lr * 0.5 * (1.0 + math.cos(math.pi * progress))


@dataclass
class TrainState:
    models: dict[str, ActionModel]
    optimizers: dict[str, torch.optim.Optimizer]
    weights: LossWeights
    config: TrainConfig
    steps_per_epoch: int


def build_models(backbone: BackboneConfig, variant: str) -> dict[str, ActionModel]:
    """Independent per-modality models; architectures match, parameters do not."""
    if variant == "rgb_only":
        return {"rgb": ActionModel(backbone, "rgb")}
    if variant == "tg_only":
        return {"tg": ActionModel(backbone, "tg")}
    return {"rgb": ActionModel(backbone, "rgb"), "tg": ActionModel(backbone, "tg")}


def build_state(backbone: BackboneConfig, weights: LossWeights, config: TrainConfig,
                steps_per_epoch: int) -> TrainState:
    models = build_models(backbone, config.variant)
    optimizers = {
        name: torch.optim.SGD(
            weight_decay_param_groups(m, config.weight_decay),
            lr=config.base_lr, momentum=config.momentum)
        for name, m in models.items()
    }
    return TrainState(models, optimizers, weights, config, steps_per_epoch)


def _pseudo_pass(model: ActionModel, x_weak: torch.Tensor) -> torch.Tensor:
    """No-gradient weak-view probabilities with eval-mode normalization stats."""
    was_training = model.training
    model.eval()
    with torch.no_grad():
        probs = model(x_weak).probabilities
    model.train(was_training)
    return probs


def forward_losses(state: TrainState, batch: SemiBatch,
                   supervised_only: bool = False) -> tuple[LossTerms, dict]:
    """All loss terms plus diagnostics for one batch. No parameter update."""
    if state.config.variant == "full":
        return _forward_losses_full(state, batch, supervised_only)
    return _forward_losses_single(state, batch, supervised_only)


def _forward_losses_single(state: TrainState, batch: SemiBatch, supervised_only: bool):
    modality = "rgb" if state.config.variant == "rgb_only" else "tg"
    model = state.models[modality]
    model.train()
    if modality == "rgb":
        x_l = prepare_input(batch.labeled_rgb_weak)
        x_uw = prepare_input(batch.unlabeled_rgb_weak)
        x_us = prepare_input(batch.unlabeled_rgb_strong)
    else:
        x_l = prepare_input(batch.labeled_tg_weak)
        x_uw = prepare_input(batch.unlabeled_tg_weak)
        x_us = prepare_input(batch.unlabeled_tg_strong)
    labels = torch.from_numpy(batch.labels_onehot).float()

    zero = torch.zeros(())
    aux = {"mask_fraction": 0.0, "pseudo_accuracy": None}
    if supervised_only:
        out = model(x_l)
        l_l = supervised_ce(out.probabilities, labels)
        l_u = zero
    else:
        probs_w = _pseudo_pass(model, x_uw)
        pseudo, _ = pseudo_labels_for_modalities(probs_w, probs_w, state.weights.gamma,
                                                 "rgb_only")
        out = model(torch.cat([x_l, x_us]))
        b_l = x_l.shape[0]
        l_l = supervised_ce(out.probabilities[:b_l], labels)
        l_u = unsupervised_ce(out.probabilities[b_l:], pseudo)
        aux.update(_pseudo_diagnostics(pseudo, batch))
    if modality == "rgb":
        terms = LossTerms(l_l, l_u, zero, zero, zero, zero)
    else:
        terms = LossTerms(zero, zero, l_l, l_u, zero, zero)
    return terms, aux


def _forward_losses_full(state: TrainState, batch: SemiBatch, supervised_only: bool):
    m_rgb, m_tg = state.models["rgb"], state.models["tg"]
    m_rgb.train()
    m_tg.train()
    w = state.weights
    labels = torch.from_numpy(batch.labels_onehot).float()
    b_l, b_u = batch.batch_labeled, batch.batch_unlabeled

    x_rgb_l = prepare_input(batch.labeled_rgb_weak)
    x_tg_l = prepare_input(batch.labeled_tg_weak)
    zero = torch.zeros(())
    aux = {"mask_fraction": 0.0, "pseudo_accuracy": None}

    if supervised_only:
        out_rgb = m_rgb(x_rgb_l)
        out_tg = m_tg(x_tg_l)
        terms = LossTerms(
            l_l_rgb=supervised_ce(out_rgb.probabilities, labels),
            l_u_rgb=zero,
            l_l_tg=supervised_ce(out_tg.probabilities, labels),
            l_u_tg=zero,
            l_kd=zero,
            l_clr=zero,
        )
        return terms, aux

    x_rgb_uw = prepare_input(batch.unlabeled_rgb_weak)
    x_rgb_us = prepare_input(batch.unlabeled_rgb_strong)
    x_tg_uw = prepare_input(batch.unlabeled_tg_weak)
    x_tg_us = prepare_input(batch.unlabeled_tg_strong)

    pseudo_rgb, pseudo_tg = pseudo_labels_for_modalities(
        _pseudo_pass(m_rgb, x_rgb_uw), _pseudo_pass(m_tg, x_tg_uw),
        w.gamma, w.pseudo_label_metric)

    out_rgb = m_rgb(torch.cat([x_rgb_l, x_rgb_uw, x_rgb_us]))
    out_tg = m_tg(torch.cat([x_tg_l, x_tg_uw, x_tg_us]))
    n_weak = b_l + b_u

    rgb_weak_feats = [f[:n_weak] for f in out_rgb.block_features.features]
    tg_weak_feats = [f[:n_weak] for f in out_tg.block_features.features]
    if w.stop_gradient:
        tg_weak_feats = [f.detach() for f in tg_weak_feats]

    terms = LossTerms(
        l_l_rgb=supervised_ce(out_rgb.probabilities[:b_l], labels),
        l_u_rgb=unsupervised_ce(out_rgb.probabilities[n_weak:], pseudo_rgb),
        l_l_tg=supervised_ce(out_tg.probabilities[:b_l], labels),
        l_u_tg=unsupervised_ce(out_tg.probabilities[n_weak:], pseudo_tg),
        l_kd=dense_alignment_loss(rgb_weak_feats, tg_weak_feats, w) if w.w_kd > 0 else zero,
        l_clr=cross_modal_infonce(out_rgb.projection[:n_weak], out_tg.projection[:n_weak],
                                  w.tau, w.symmetric_infonce) if w.w_clr > 0 else zero,
    )
    aux.update(_pseudo_diagnostics(pseudo_rgb, batch))
    return terms, aux


def _pseudo_diagnostics(pseudo, batch: SemiBatch) -> dict:
    mask = pseudo.mask
    frac = float(mask.float().mean())
    acc = None
    if bool(mask.any()):
        truth = torch.from_numpy(batch.unlabeled_true_labels)
        hits = (pseudo.labels[mask] == truth[mask]).float()
        acc = float(hits.mean())
    return {"mask_fraction": frac, "pseudo_accuracy": acc}


def train_step(state: TrainState, batch: SemiBatch, step: int) -> dict:
    """One optimization step; returns the metrics record that was applied."""
    epoch = step // state.steps_per_epoch
    supervised_only = epoch < state.config.supervised_warmup_epochs
    lr = lr_at(step, state.config, state.steps_per_epoch)
    for opt in state.optimizers.values():
        for group in opt.param_groups:
            group["lr"] = lr
        opt.zero_grad(set_to_none=True)
    terms, aux = forward_losses(state, batch, supervised_only)
    loss = total_loss(terms, state.weights)
    loss.backward()
    for opt in state.optimizers.values():
        opt.step()
    record = {"step": step, "epoch": epoch, "lr": lr}
    record.update({name: float(value.detach()) for name, value in terms.named()})
    record["total"] = float(loss.detach())
    record["mask_fraction"] = aux["mask_fraction"]
    record["pseudo_accuracy"] = aux["pseudo_accuracy"]
    return record


def _bn_input_stream(sampler: SemiBatchSampler, modality: str, variant: str):
    """Model inputs shaped like training forwards, for statistics refresh."""
    while True:
        batch = sampler.next_batch()
        if modality == "rgb":
            parts = [batch.labeled_rgb_weak, batch.unlabeled_rgb_weak, batch.unlabeled_rgb_strong]
        else:
            parts = [batch.labeled_tg_weak, batch.unlabeled_tg_weak, batch.unlabeled_tg_strong]
        if variant != "full":
            parts = [parts[0], parts[2]]
        yield prepare_input(np.concatenate(parts))


def refresh_bn_statistics(state: TrainState, manifest: DatasetManifest,
                          clip_spec, augment, seed: int) -> None:
    if state.config.precise_bn_batches <= 0:
        return
    for name, model in state.models.items():
        sampler = SemiBatchSampler(manifest, clip_spec, augment,
                                   state.config.batch_labeled,
                                   state.config.batch_unlabeled, seed=seed)
        precise_bn_recompute(model, _bn_input_stream(sampler, name, state.config.variant),
                             state.config.precise_bn_batches)


@dataclass
class FitResult:
    checkpoint_path: Path
    metrics_path: Path
    final_eval: dict | None


def fit(run: "RunConfig", train_manifest: DatasetManifest,
        eval_manifest: DatasetManifest | None = None) -> FitResult:
    """Run the full schedule and leave a checkpoint plus a JSONL metrics log."""
    from .evaluation import evaluate  # local import to avoid a module cycle

    out_dir = Path(run.out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    torch.manual_seed(run.seed)
    backbone = run.backbone_for(train_manifest.num_classes)
    sampler = SemiBatchSampler(train_manifest, run.clip, run.augment,
                               run.train.batch_labeled, run.train.batch_unlabeled,
                               seed=run.seed + 1)
    state = build_state(backbone, run.loss, run.train, sampler.steps_per_epoch)
    total_steps = run.train.total_epochs * sampler.steps_per_epoch
    eval_model = "tg" if run.train.variant == "tg_only" else "rgb"
    eval_modality = eval_model

    metrics_path = out_dir / "metrics.jsonl"
    checkpoint_path = out_dir / "checkpoint.pt"
    final_eval = None
    start = time.time()
    with open(metrics_path, "w") as log:
        for step in range(total_steps):
            batch = sampler.next_batch()
            record = train_step(state, batch, step)
            log.write(json.dumps(record) + "\n")
            epoch_end = (step + 1) % sampler.steps_per_epoch == 0
            epoch = step // sampler.steps_per_epoch
            if epoch_end and run.train.eval_every_epochs and eval_manifest is not None \
                    and (epoch + 1) % run.train.eval_every_epochs == 0 \
                    and step + 1 < total_steps:
                refresh_bn_statistics(state, train_manifest, run.clip, run.augment,
                                      seed=run.seed + 100 + epoch)
                result = evaluate(state.models[eval_model], eval_manifest, run.eval,
                                  run.clip, modality=eval_modality)
                log.write(json.dumps({"step": step, "kind": "eval", **result}) + "\n")
            if epoch_end and run.train.checkpoint_every_epochs \
                    and (epoch + 1) % run.train.checkpoint_every_epochs == 0:
                save_checkpoint(checkpoint_path, state.models, step + 1,
                                extra_config={"variant": run.train.variant})
        refresh_bn_statistics(state, train_manifest, run.clip, run.augment,
                              seed=run.seed + 999)
        if eval_manifest is not None:
            final_eval = evaluate(state.models[eval_model], eval_manifest, run.eval,
                                  run.clip, modality=eval_modality)
            log.write(json.dumps({"step": total_steps - 1, "kind": "eval", **final_eval}) + "\n")
    save_checkpoint(checkpoint_path, state.models, total_steps,
                    metrics=final_eval or {}, extra_config={"variant": run.train.variant})
    logger.info("fit done in %.1fs: %s", time.time() - start, final_eval)
    return FitResult(checkpoint_path, metrics_path, final_eval)
