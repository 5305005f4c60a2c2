"""Dual action+reasoning objective over label ranges, and the offline
metrics (accuracies, de-discretized action L1) tracked during training."""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Any

import torch
import torch.nn.functional as F

from .data_model import ACTION_DIMS
from .tokenizer import IGNORE_LABEL, Vocabulary, decode_action

DEFAULT_LAMBDA_R = 0.3  # best average success in the ablation sweep


class ObjectiveError(ValueError):
    """Shape or argument violation."""


@dataclass(frozen=True)
class LossBreakdown:
    """Scalar losses of one batch; total = action + lambda_r * reasoning."""

    loss_total: float
    loss_action: float
    loss_reasoning: float
    n_action_tokens: int
    n_reasoning_tokens: int
    lambda_r: float

    def __post_init__(self):
        if self.lambda_r < 0:
            raise ObjectiveError("lambda_r must be >= 0")
        if self.loss_action < 0 or self.loss_reasoning < 0:
            raise ObjectiveError("group losses must be non-negative")
        if self.loss_total != self.loss_action + self.lambda_r * self.loss_reasoning:
            raise ObjectiveError("loss_total must equal loss_action + lambda_r * loss_reasoning")

    def to_dict(self) -> dict[str, Any]:
        return {
            "loss_total": self.loss_total,
            "loss_action": self.loss_action,
            "loss_reasoning": self.loss_reasoning,
            "n_action_tokens": self.n_action_tokens,
            "n_reasoning_tokens": self.n_reasoning_tokens,
            "lambda_r": self.lambda_r,
        }


@dataclass(frozen=True)
class MetricSet:
    """Supervised-position accuracies and action L1; NaN flags a vacuous group."""

    action_accuracy: float
    reasoning_accuracy: float
    action_l1: float

    def to_dict(self) -> dict[str, Any]:
        return {
            "action_accuracy": self.action_accuracy,
            "reasoning_accuracy": self.reasoning_accuracy,
            "action_l1": self.action_l1,
        }


@dataclass
class MetricCounts:
    """Raw tallies behind a MetricSet; mergeable across batches."""

    action_correct: int = 0
    action_total: int = 0
    reasoning_correct: int = 0
    reasoning_total: int = 0
    l1_sum: float = 0.0
    l1_groups: int = 0

    def merge(self, other: "MetricCounts") -> None:
        self.action_correct += other.action_correct
        self.action_total += other.action_total
        self.reasoning_correct += other.reasoning_correct
        self.reasoning_total += other.reasoning_total
        self.l1_sum += other.l1_sum
        self.l1_groups += other.l1_groups

    def finalize(self) -> MetricSet:
        return MetricSet(
            action_accuracy=self.action_correct / self.action_total if self.action_total else math.nan,
            reasoning_accuracy=(
                self.reasoning_correct / self.reasoning_total if self.reasoning_total else math.nan),
            action_l1=self.l1_sum / self.l1_groups if self.l1_groups else math.nan,
        )


def split_masks(shifted_labels: torch.Tensor, v: Vocabulary) -> tuple[torch.Tensor, torch.Tensor]:
    """Partition already-shifted labels into action and reasoning masks.

    Action positions carry a label inside the action-token interval; every
    other non-IGNORE position is reasoning. The masks are disjoint and IGNORE
    positions belong to neither.
    """
    labels = torch.as_tensor(shifted_labels)
    action = (labels >= v.translation_token_start_idx) & (labels <= v.gripper_token_end_idx)
    reasoning = (labels != IGNORE_LABEL) & ~action
    return action, reasoning


def _shift(logits: torch.Tensor, labels: torch.Tensor) -> tuple[torch.Tensor, torch.Tensor]:
    if logits.shape[:-1] != labels.shape:
        raise ObjectiveError(
            f"logits {tuple(logits.shape)} and labels {tuple(labels.shape)} do not align")
    if logits.ndim == 2:
        logits = logits.unsqueeze(0)
        labels = labels.unsqueeze(0)
    if logits.ndim != 3:
        raise ObjectiveError("logits must be (T, vocab) or (batch, T, vocab)")
    return logits[:, :-1, :], labels[:, 1:]


def _group_mean_ce(logits: torch.Tensor, labels: torch.Tensor, mask: torch.Tensor) -> torch.Tensor:
    if not bool(mask.any()):
        return logits.new_zeros(())  # empty group contributes nothing
    return F.cross_entropy(logits[mask], labels[mask])


def loss_tensors(
    logits: torch.Tensor,
    labels: torch.Tensor,
    v: Vocabulary,
    lambda_r: float = DEFAULT_LAMBDA_R,
) -> tuple[torch.Tensor, torch.Tensor, torch.Tensor]:
    """Differentiable (total, action, reasoning) mean cross-entropies."""
    if lambda_r < 0:
        raise ObjectiveError("lambda_r must be >= 0")
    shift_logits, shift_labels = _shift(logits, torch.as_tensor(labels))
    action_mask, reasoning_mask = split_masks(shift_labels, v)
    loss_action = _group_mean_ce(shift_logits, shift_labels, action_mask)
    loss_reasoning = _group_mean_ce(shift_logits, shift_labels, reasoning_mask)
    return loss_action + lambda_r * loss_reasoning, loss_action, loss_reasoning


def compute_losses(
    logits: torch.Tensor,
    labels: torch.Tensor,
    v: Vocabulary,
    lambda_r: float = DEFAULT_LAMBDA_R,
) -> LossBreakdown:
    """Shift, mask by label range, and mean-reduce cross-entropy per group."""
    _, action_t, reasoning_t = loss_tensors(logits, labels, v, lambda_r)
    shift_labels = _shift(logits, torch.as_tensor(labels))[1]
    action_mask, reasoning_mask = split_masks(shift_labels, v)
    loss_action = float(action_t)
    loss_reasoning = float(reasoning_t)
    return LossBreakdown(
        loss_total=loss_action + lambda_r * loss_reasoning,
        loss_action=loss_action,
        loss_reasoning=loss_reasoning,
        n_action_tokens=int(action_mask.sum()),
        n_reasoning_tokens=int(reasoning_mask.sum()),
        lambda_r=lambda_r,
    )


def _action_groups(mask_row: torch.Tensor) -> list[list[int]]:
    """Chunk a row's action positions into consecutive runs of 7."""
    positions = torch.nonzero(mask_row, as_tuple=False).flatten().tolist()
    runs: list[list[int]] = []
    current: list[int] = []
    for pos in positions:
        if current and pos != current[-1] + 1:
            runs.append(current)
            current = []
        current.append(pos)
    if current:
        runs.append(current)
    groups = []
    for run in runs:
        for i in range(0, len(run) - ACTION_DIMS + 1, ACTION_DIMS):
            groups.append(run[i : i + ACTION_DIMS])
    return groups


def _ids_in_range(ids: list[int], v: Vocabulary) -> bool:
    bins = v.bins_per_dim
    start = v.translation_token_start_idx
    return all(0 <= tid - start - d * bins < bins for d, tid in enumerate(ids))


def metric_counts(logits: torch.Tensor, labels: torch.Tensor, v: Vocabulary) -> MetricCounts:
    """Tally greedy-prediction hits per group and action-group L1 errors.

    A complete 7-token action group whose argmax strays outside its dimension
    intervals scores the diameter of the action box (2.0 per dim) instead of
    being decoded.
    """
    shift_logits, shift_labels = _shift(logits, torch.as_tensor(labels))
    action_mask, reasoning_mask = split_masks(shift_labels, v)
    preds = shift_logits.argmax(dim=-1)
    counts = MetricCounts(
        action_correct=int((preds[action_mask] == shift_labels[action_mask]).sum()),
        action_total=int(action_mask.sum()),
        reasoning_correct=int((preds[reasoning_mask] == shift_labels[reasoning_mask]).sum()),
        reasoning_total=int(reasoning_mask.sum()),
    )
    for b in range(shift_labels.shape[0]):
        for group in _action_groups(action_mask[b]):
            pred_ids = [int(preds[b, t]) for t in group]
            label_ids = [int(shift_labels[b, t]) for t in group]
            if not _ids_in_range(pred_ids, v):
                counts.l1_sum += 2.0
            else:
                pred_vec = decode_action(pred_ids, v).as_vector()
                label_vec = decode_action(label_ids, v).as_vector()
                counts.l1_sum += sum(abs(p - l) for p, l in zip(pred_vec, label_vec)) / ACTION_DIMS
            counts.l1_groups += 1
    return counts


def compute_metrics(logits: torch.Tensor, labels: torch.Tensor, v: Vocabulary) -> MetricSet:
    """Greedy-prediction accuracies per group plus de-discretized action L1.

    Vacuous groups report NaN, never a fake 0.
    """
    return metric_counts(logits, labels, v).finalize()
