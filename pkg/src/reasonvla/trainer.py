"""Training loop: shuffled mini-batches over tokenized demonstrations, joint
action+reasoning loss on the unfrozen parameter subset, JSONL metric logs,
periodic checkpoints, and offline evaluation."""

from __future__ import annotations

import dataclasses
import json
import math
import random
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any, Callable, Sequence

import numpy as np
import torch

from .data_model import ContinuousAction, Episode, Observation, Step
from .model import PolicyModel, freeze_lower_layers, save_checkpoint, trainable_parameters
from .objective import (
    DEFAULT_LAMBDA_R,
    MetricCounts,
    MetricSet,
    compute_losses,
    loss_tensors,
    metric_counts,
)
from .tokenizer import (
    DEFAULT_REASONING_BUDGET,
    IGNORE_LABEL,
    N_SPECIALS,
    PAD_ID,
    Segment,
    TokenizedSample,
    Vocabulary,
    assemble_sample,
    build_text_vocab,
    build_vocabulary,
    decode_action,
    prompt_prefix,
    render_trace,
)

DEFAULT_LEARNING_RATE = 2e-4  # the reference 2e-5 underfits the toy model on desk budgets


class TrainerError(ValueError):
    """Configuration or dataset violation."""


@dataclass(frozen=True)
class TrainConfig:
    """Hyperparameters of one fine-tuning run."""

    out_dir: str
    lambda_r: float = DEFAULT_LAMBDA_R
    learning_rate: float = DEFAULT_LEARNING_RATE
    batch_size: int = 32
    epochs: int = 1
    freeze_layers: int = 0
    seed: int = 0
    save_steps: int = 500
    eval_steps: int = 0
    early_stop_patience: int = 0
    shuffle_buffer: int = 0
    reasoning_budget: int = DEFAULT_REASONING_BUDGET

    def __post_init__(self):
        if self.lambda_r < 0:
            raise TrainerError("lambda_r must be >= 0")
        if self.learning_rate <= 0:
            raise TrainerError("learning_rate must be positive")
        for name in ("batch_size", "epochs", "save_steps"):
            if getattr(self, name) < 1:
                raise TrainerError(f"{name} must be >= 1")
        for name in ("freeze_layers", "eval_steps", "early_stop_patience", "shuffle_buffer", "reasoning_budget"):
            if getattr(self, name) < 0:
                raise TrainerError(f"{name} must be >= 0")

    def to_dict(self) -> dict[str, Any]:
        return dataclasses.asdict(self)

    @classmethod
    def from_dict(cls, d: dict[str, Any]) -> "TrainConfig":
        return cls(**d)


@dataclass
class TrainState:
    """Mutable loop state; the optimizer only ever sees trainable params."""

    step: int
    optimizer: torch.optim.Optimizer
    rng: random.Random
    best_metric: float = -math.inf
    evals_since_best: int = 0


def vocabulary_for_episodes(episodes: Sequence[Episode], bins_per_dim: int = 32) -> Vocabulary:
    """Vocabulary covering every instruction and rendered trace in a dataset."""
    texts = []
    for ep in episodes:
        texts.append(ep.instruction)
        for step in ep.steps:
            if step.trace is not None:
                texts.append(render_trace(step.trace))
    return build_vocabulary(bins_per_dim=bins_per_dim, text_vocab=build_text_vocab(texts))


def strip_traces(episodes: Sequence[Episode]) -> list[Episode]:
    """Copies of the episodes with every trace removed."""
    return [
        dataclasses.replace(
            ep, steps=tuple(Step(s.observation, s.action, None) for s in ep.steps))
        for ep in episodes
    ]


def tokenize_dataset(
    episodes: Sequence[Episode],
    vocab: Vocabulary,
    lambda_r: float,
    reasoning_budget: int,
) -> list[TokenizedSample]:
    """Flatten episodes into training samples. With lambda_r = 0 the traces
    are dropped before assembly, so a trace-free run never reads them."""
    if lambda_r == 0:
        episodes = strip_traces(episodes)
    else:
        for ep in episodes:
            if not ep.enriched:
                raise TrainerError(
                    f"episode '{ep.episode_id}' lacks reasoning traces but lambda_r > 0")
    return [
        assemble_sample(step, vocab, reasoning_budget=reasoning_budget)
        for ep in episodes
        for step in ep.steps
    ]


def collate(batch: Sequence[TokenizedSample]) -> tuple[torch.Tensor, torch.Tensor, torch.Tensor, torch.Tensor]:
    """Pad to the batch max length: PAD ids, IGNORE labels, SPECIAL segments."""
    if not batch:
        raise TrainerError("cannot collate an empty batch")
    views, grid = batch[0].n_views, batch[0].patch_grid
    for sample in batch:
        if (sample.n_views, sample.patch_grid) != (views, grid):
            raise TrainerError("samples in one batch must share view count and grid size")
    width = max(s.length for s in batch)
    ids = torch.full((len(batch), width), PAD_ID, dtype=torch.long)
    labels = torch.full((len(batch), width), IGNORE_LABEL, dtype=torch.long)
    segments = torch.full((len(batch), width), int(Segment.SPECIAL), dtype=torch.long)
    for i, sample in enumerate(batch):
        ids[i, : sample.length] = torch.from_numpy(sample.input_ids)
        labels[i, : sample.length] = torch.from_numpy(sample.labels)
        segments[i, : sample.length] = torch.from_numpy(sample.segment).long()
    patches = torch.from_numpy(np.stack([s.patches for s in batch])).long()
    return ids, patches, segments, labels


def _shuffled_order(n: int, rng: random.Random, buffer_size: int) -> list[int]:
    """Full Fisher-Yates when buffer_size is 0, else a windowed shuffle."""
    if buffer_size == 0 or buffer_size >= n:
        order = list(range(n))
        rng.shuffle(order)
        return order
    out: list[int] = []
    buffer: list[int] = []
    for i in range(n):
        buffer.append(i)
        if len(buffer) > buffer_size:
            out.append(buffer.pop(rng.randrange(len(buffer))))
    while buffer:
        out.append(buffer.pop(rng.randrange(len(buffer))))
    return out


def _json_line(record: dict[str, Any]) -> str:
    clean = {k: (None if isinstance(v, float) and math.isnan(v) else v) for k, v in record.items()}
    return json.dumps(clean, sort_keys=True)


def _check_vocab(model: PolicyModel, vocab: Vocabulary) -> None:
    if model.cfg.vocab_size != vocab.vocab_size:
        raise TrainerError(
            f"model expects vocab of {model.cfg.vocab_size}, got {vocab.vocab_size}")


def evaluate_offline(
    model: PolicyModel,
    vocab: Vocabulary,
    episodes: Sequence[Episode],
    cfg: TrainConfig,
) -> MetricSet:
    """Teacher-forced metrics over a dataset; mutates nothing."""
    _check_vocab(model, vocab)
    if not episodes:
        raise TrainerError("cannot evaluate an empty dataset")
    samples = tokenize_dataset(episodes, vocab, cfg.lambda_r, cfg.reasoning_budget)
    totals = MetricCounts()
    with torch.no_grad():
        for start in range(0, len(samples), cfg.batch_size):
            ids, patches, segments, labels = collate(samples[start : start + cfg.batch_size])
            logits, _ = model(ids, patches, segments)
            totals.merge(metric_counts(logits, labels, vocab))
    return totals.finalize()


def train(
    model: PolicyModel,
    vocab: Vocabulary,
    episodes: Sequence[Episode],
    cfg: TrainConfig,
    eval_episodes: Sequence[Episode] | None = None,
) -> tuple[PolicyModel, Path]:
    """Run the fine-tuning loop; returns the model and the metrics log path.

    Deterministic for a fixed seed on one thread: the sample order, batch
    contents, metric log bytes, and final parameters all replay exactly.
    """
    _check_vocab(model, vocab)
    if not episodes:
        raise TrainerError("cannot train on an empty dataset")
    samples = tokenize_dataset(episodes, vocab, cfg.lambda_r, cfg.reasoning_budget)

    out_dir = Path(cfg.out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    metrics_path = out_dir / "metrics.jsonl"
    eval_path = out_dir / "eval.jsonl"

    freeze_lower_layers(model, cfg.freeze_layers)
    state = TrainState(
        step=0,
        optimizer=torch.optim.Adam(trainable_parameters(model), lr=cfg.learning_rate),
        rng=random.Random(cfg.seed),
    )
    vocab_hash = vocab.content_hash()

    def run_eval(log) -> bool:
        """Evaluate, log one line, and report whether to stop early."""
        metrics = evaluate_offline(model, vocab, eval_episodes, cfg)
        log.write(_json_line({"step": state.step, **metrics.to_dict()}) + "\n")
        log.flush()
        score = metrics.action_accuracy
        if math.isnan(score):
            return False
        if score > state.best_metric:
            state.best_metric = score
            state.evals_since_best = 0
        else:
            state.evals_since_best += 1
        return 0 < cfg.early_stop_patience <= state.evals_since_best

    stop = False
    with open(metrics_path, "w", encoding="utf-8") as metrics_log:
        eval_log = open(eval_path, "w", encoding="utf-8") if eval_episodes is not None else None
        try:
            if eval_log is not None:
                run_eval(eval_log)
            for _ in range(cfg.epochs):
                order = _shuffled_order(len(samples), state.rng, cfg.shuffle_buffer)
                for start in range(0, len(order), cfg.batch_size):
                    batch = [samples[i] for i in order[start : start + cfg.batch_size]]
                    ids, patches, segments, labels = collate(batch)
                    logits, _ = model(ids, patches, segments)
                    total_t, _, _ = loss_tensors(logits, labels, vocab, cfg.lambda_r)
                    state.optimizer.zero_grad()
                    total_t.backward()
                    state.optimizer.step()
                    state.step += 1

                    with torch.no_grad():
                        breakdown = compute_losses(logits, labels, vocab, cfg.lambda_r)
                        metrics = metric_counts(logits, labels, vocab).finalize()
                    # LossBreakdown construction re-asserts the Eq.-style identity
                    line = {
                        "step": state.step,
                        "loss_total": breakdown.loss_total,
                        "loss_action": breakdown.loss_action,
                        "loss_reasoning": breakdown.loss_reasoning,
                        **metrics.to_dict(),
                    }
                    metrics_log.write(_json_line(line) + "\n")

                    if state.step % cfg.save_steps == 0:
                        save_checkpoint(model, out_dir / f"ckpt_{state.step}.bin", vocab_hash)
                    if eval_log is not None and cfg.eval_steps and state.step % cfg.eval_steps == 0:
                        stop = run_eval(eval_log)
                        if stop:
                            break
                if stop:
                    break
            if eval_log is not None and not stop:
                run_eval(eval_log)
        finally:
            if eval_log is not None:
                eval_log.close()

    save_checkpoint(model, out_dir / f"ckpt_{state.step}.bin", vocab_hash)
    return model, metrics_path


def _masked_action_argmax(logits_row: torch.Tensor, vocab: Vocabulary, dim: int) -> int:
    lo = vocab.translation_token_start_idx + dim * vocab.bins_per_dim
    hi = lo + vocab.bins_per_dim
    return lo + int(torch.argmax(logits_row[lo:hi]))


def predict_action(
    model: PolicyModel,
    vocab: Vocabulary,
    observation: Observation,
    max_reasoning_tokens: int = 64,
) -> ContinuousAction:
    """Greedy rollout of one decision: free-run reasoning tokens until the
    model reaches for an action id (or the budget runs out), then decode the
    seven action dimensions with per-dimension vocabulary masking."""
    placeholder = ContinuousAction((0.0, 0.0, 0.0), (0.0, 0.0, 0.0), 0.0)
    prompt = prompt_prefix(assemble_sample(Step(observation, placeholder), vocab))
    ids = list(prompt.input_ids)
    segments = list(prompt.segment)
    patches = torch.from_numpy(prompt.patches).long().unsqueeze(0)
    budget = min(max_reasoning_tokens, model.cfg.max_seq_len - len(ids) - 7)
    if budget < 0:
        raise TrainerError("prompt leaves no room for an action")

    def last_logits() -> torch.Tensor:
        ids_t = torch.tensor(ids, dtype=torch.long).unsqueeze(0)
        seg_t = torch.tensor(segments, dtype=torch.long).unsqueeze(0)
        logits, _ = model(ids_t, patches, seg_t)
        return logits[0, -1]

    action_ids: list[int] = []
    with torch.no_grad():
        while True:
            row = last_logits()
            next_id = int(torch.argmax(row))
            done = (
                vocab.is_action_id(next_id)
                or next_id < N_SPECIALS  # EOS and friends end the free run
                or len(ids) - prompt.length >= budget
            )
            if done:
                break
            ids.append(next_id)
            segments.append(int(Segment.REASONING))
        for dim in range(7):
            if dim > 0:
                row = last_logits()
            token = _masked_action_argmax(row, vocab, dim)
            action_ids.append(token)
            ids.append(token)
            segments.append(int(Segment.ACTION))

    return decode_action(action_ids, vocab)


def build_policy(
    model: PolicyModel,
    vocab: Vocabulary,
    max_reasoning_tokens: int = 64,
) -> Callable[[Observation], ContinuousAction]:
    """Wrap a trained model as an observation -> action callable for rollouts."""

    def policy(observation: Observation) -> ContinuousAction:
        return predict_action(model, vocab, observation, max_reasoning_tokens)

    return policy
