from __future__ import annotations

import dataclasses
import json
import math

import numpy as np
import pytest
import torch

from reasonvla.data_model import ContinuousAction, Step
from reasonvla.model import (
    ModelConfig,
    init_model,
    load_checkpoint,
    parameter_checksum,
)
from reasonvla.simenv import generate_demonstrations, ground_truth_trace, reset, rollout
from reasonvla.tokenizer import IGNORE_LABEL, PAD_ID, Segment, assemble_sample
from reasonvla.trainer import (
    TrainConfig,
    TrainerError,
    build_policy,
    collate,
    evaluate_offline,
    predict_action,
    strip_traces,
    tokenize_dataset,
    train,
    vocabulary_for_episodes,
    _shuffled_order,
)

GRID = 12


def enrich(episodes):
    """Attach privileged traces to scripted demos (no teacher round trip)."""
    from reasonvla.simenv import task_from_instruction, world_from_image

    out = []
    for ep in episodes:
        task = task_from_instruction(ep.instruction)
        steps = []
        for step in ep.steps:
            world = world_from_image(step.observation.images[0], task)
            steps.append(Step(step.observation, step.action, ground_truth_trace(world, task)))
        out.append(dataclasses.replace(ep, steps=tuple(steps)))
    return out


@pytest.fixture(scope="module")
def dataset():
    return enrich(generate_demonstrations(4, families=("pick",), seed=0, grid_size=GRID))


@pytest.fixture(scope="module")
def vocab(dataset):
    return vocabulary_for_episodes(dataset, bins_per_dim=16)


def tiny_cfg(tmp_path, **overrides):
    defaults = dict(
        out_dir=str(tmp_path / "run"),
        lambda_r=0.3,
        learning_rate=1e-3,
        batch_size=4,
        epochs=1,
        freeze_layers=0,
        seed=0,
        save_steps=500,
        reasoning_budget=64,
    )
    defaults.update(overrides)
    return TrainConfig(**defaults)


def tiny_model(vocab, seed=0):
    cfg = ModelConfig(
        vocab_size=vocab.vocab_size,
        max_seq_len=256,
        d_model=16,
        n_layers=2,
        n_heads=2,
        n_views=1,
        patch_grid=GRID,
        seed=seed,
    )
    return init_model(cfg)


class TestTrainConfig:
    def test_defaults(self):
        cfg = TrainConfig(out_dir="x")
        assert cfg.lambda_r == 0.3
        assert cfg.batch_size == 32
        assert cfg.epochs == 1
        assert cfg.save_steps == 500

    @pytest.mark.parametrize(
        "bad",
        [
            dict(lambda_r=-0.1),
            dict(learning_rate=0.0),
            dict(batch_size=0),
            dict(epochs=0),
            dict(save_steps=0),
            dict(freeze_layers=-1),
        ],
    )
    def test_validation(self, bad):
        with pytest.raises(TrainerError):
            TrainConfig(out_dir="x", **bad)

    def test_dict_roundtrip(self):
        cfg = TrainConfig(out_dir="x", lambda_r=0.0, seed=9)
        assert TrainConfig.from_dict(cfg.to_dict()) == cfg


class TestTokenizeDataset:
    def test_lambda_zero_never_reads_traces(self, dataset, vocab):
        class Poison:
            def __getattr__(self, name):
                raise AssertionError("trace was read during a lambda_r=0 run")

        poisoned = [
            dataclasses.replace(
                ep, steps=tuple(Step(s.observation, s.action, Poison()) for s in ep.steps))
            for ep in dataset
        ]
        samples = tokenize_dataset(poisoned, vocab, lambda_r=0.0, reasoning_budget=64)
        assert all((s.segment != int(Segment.REASONING)).all() for s in samples)

    def test_missing_traces_rejected_when_supervised(self, dataset, vocab):
        bare = strip_traces(dataset)
        with pytest.raises(TrainerError, match="lacks reasoning traces"):
            tokenize_dataset(bare, vocab, lambda_r=0.3, reasoning_budget=64)

    def test_sample_count(self, dataset, vocab):
        samples = tokenize_dataset(dataset, vocab, 0.3, 64)
        assert len(samples) == sum(len(ep.steps) for ep in dataset)


class TestCollate:
    def test_padding(self, dataset, vocab):
        samples = tokenize_dataset(dataset, vocab, 0.3, 64)[:3]
        ids, patches, segments, labels = collate(samples)
        width = max(s.length for s in samples)
        assert ids.shape == (3, width) and labels.shape == (3, width)
        assert patches.shape == (3, 1, GRID, GRID)
        for i, sample in enumerate(samples):
            pad = slice(sample.length, width)
            assert (ids[i, pad] == PAD_ID).all()
            assert (labels[i, pad] == IGNORE_LABEL).all()
            assert (segments[i, pad] == int(Segment.SPECIAL)).all()
            assert (ids[i, : sample.length].numpy() == sample.input_ids).all()

    def test_empty_batch_rejected(self):
        with pytest.raises(TrainerError, match="empty"):
            collate([])

    def test_mismatched_grids_rejected(self, dataset, vocab):
        a = tokenize_dataset(dataset, vocab, 0.3, 64)[0]
        other = generate_demonstrations(1, families=("pick",), seed=5, grid_size=14)
        b = assemble_sample(strip_traces(other)[0].steps[0], vocab)
        with pytest.raises(TrainerError, match="grid"):
            collate([a, b])


class TestShuffle:
    def test_full_shuffle_is_permutation(self):
        import random

        order = _shuffled_order(100, random.Random(0), 0)
        assert sorted(order) == list(range(100))
        assert order != list(range(100))

    def test_windowed_shuffle_is_permutation(self):
        import random

        order = _shuffled_order(100, random.Random(0), 8)
        assert sorted(order) == list(range(100))
        # an element can leave the buffer late but never before it arrives
        assert all(idx - pos <= 8 for pos, idx in enumerate(order))


class TestTrain:
    def test_step_count_and_log_lines(self, dataset, vocab, tmp_path):
        eight = tokenize_dataset(dataset, vocab, 0.3, 64)[:8]
        assert len(eight) >= 8, "fixture must provide at least 8 samples"
        episodes = dataset[:2]
        n_samples = sum(len(ep.steps) for ep in episodes)
        cfg = tiny_cfg(tmp_path, batch_size=4, epochs=1)
        model = tiny_model(vocab)
        _, metrics_path = train(model, vocab, episodes, cfg)
        lines = [json.loads(l) for l in metrics_path.read_text().splitlines()]
        assert len(lines) == math.ceil(n_samples / 4)
        assert [l["step"] for l in lines] == list(range(1, len(lines) + 1))
        for line in lines:
            assert set(line) == {
                "step", "loss_total", "loss_action", "loss_reasoning",
                "action_accuracy", "reasoning_accuracy", "action_l1"}

    def test_deterministic_across_runs(self, dataset, vocab, tmp_path):
        cfg_a = tiny_cfg(tmp_path / "a")
        cfg_b = tiny_cfg(tmp_path / "b")
        model_a, path_a = train(tiny_model(vocab), vocab, dataset, cfg_a)
        model_b, path_b = train(tiny_model(vocab), vocab, dataset, cfg_b)
        assert path_a.read_bytes() == path_b.read_bytes()
        assert parameter_checksum(model_a) == parameter_checksum(model_b)

    def test_seed_changes_trajectory(self, dataset, vocab, tmp_path):
        _, path_a = train(tiny_model(vocab), vocab, dataset, tiny_cfg(tmp_path / "a", seed=0, epochs=2))
        _, path_b = train(tiny_model(vocab), vocab, dataset, tiny_cfg(tmp_path / "b", seed=1, epochs=2))
        assert path_a.read_bytes() != path_b.read_bytes()

    def test_loss_descends_over_micro_run(self, dataset, vocab, tmp_path):
        cfg = tiny_cfg(tmp_path, epochs=25, batch_size=8, learning_rate=3e-3)
        model = tiny_model(vocab)
        _, metrics_path = train(model, vocab, dataset, cfg)
        losses = [json.loads(l)["loss_total"] for l in metrics_path.read_text().splitlines()]
        n_samples = sum(len(ep.steps) for ep in dataset)
        assert len(losses) == 25 * math.ceil(n_samples / 8)
        first = sum(losses[:10]) / 10
        last = sum(losses[-10:]) / 10
        assert last < 0.5 * first

    def test_frozen_parameters_bit_identical(self, dataset, vocab, tmp_path):
        model = tiny_model(vocab)
        before = {
            n: p.detach().clone()
            for n, p in model.named_parameters()
            if n.startswith("blocks.0.") or "emb" in n
        }
        cfg = tiny_cfg(tmp_path, freeze_layers=1, epochs=2)
        train(model, vocab, dataset, cfg)
        for name, old in before.items():
            now = dict(model.named_parameters())[name]
            assert torch.equal(now, old), f"{name} drifted"
            assert now.grad is None

    def test_optimizer_state_only_for_trainable(self, dataset, vocab, tmp_path):
        model = tiny_model(vocab)
        cfg = tiny_cfg(tmp_path, freeze_layers=2)
        train(model, vocab, dataset, cfg)
        trainable_names = {n for n, p in model.named_parameters() if p.requires_grad}
        assert trainable_names == {"head.weight", "final_norm.weight", "final_norm.bias"}

    def test_checkpoints_written(self, dataset, vocab, tmp_path):
        cfg = tiny_cfg(tmp_path, save_steps=2, epochs=2)
        model = tiny_model(vocab)
        n_samples = sum(len(ep.steps) for ep in dataset)
        steps = 2 * math.ceil(n_samples / cfg.batch_size)
        train(model, vocab, dataset, cfg)
        out = tmp_path / "run"
        assert (out / f"ckpt_{steps}.bin").exists()
        assert (out / "ckpt_2.bin").exists()
        loaded, _ = load_checkpoint(out / f"ckpt_{steps}.bin")
        assert parameter_checksum(loaded) == parameter_checksum(model)

    def test_checkpoint_vocab_hash_stamped(self, dataset, vocab, tmp_path):
        cfg = tiny_cfg(tmp_path)
        model = tiny_model(vocab)
        train(model, vocab, dataset, cfg)
        ckpts = sorted((tmp_path / "run").glob("ckpt_*.bin"))
        _, header = load_checkpoint(ckpts[0], expected_vocab_hash=vocab.content_hash())
        assert header["frozen_prefix"] == 0

    def test_eval_log_first_and_last(self, dataset, vocab, tmp_path):
        cfg = tiny_cfg(tmp_path, epochs=2)
        model = tiny_model(vocab)
        train(model, vocab, dataset, cfg, eval_episodes=dataset[:1])
        evals = [json.loads(l) for l in (tmp_path / "run" / "eval.jsonl").read_text().splitlines()]
        assert evals[0]["step"] == 0
        assert evals[-1]["step"] > 0
        assert len(evals) == 2
        assert set(evals[0]) == {"step", "action_accuracy", "reasoning_accuracy", "action_l1"}

    def test_periodic_eval(self, dataset, vocab, tmp_path):
        cfg = tiny_cfg(tmp_path, epochs=2, eval_steps=2)
        model = tiny_model(vocab)
        train(model, vocab, dataset, cfg, eval_episodes=dataset[:1])
        evals = [json.loads(l)["step"] for l in (tmp_path / "run" / "eval.jsonl").read_text().splitlines()]
        assert 0 in evals and 2 in evals

    def test_empty_dataset_rejected(self, vocab, tmp_path):
        with pytest.raises(TrainerError, match="empty"):
            train(tiny_model(vocab), vocab, [], tiny_cfg(tmp_path))

    def test_vocab_size_mismatch_rejected(self, dataset, vocab, tmp_path):
        model = tiny_model(vocab)
        bad_vocab = vocabulary_for_episodes(dataset, bins_per_dim=8)
        with pytest.raises(TrainerError, match="vocab"):
            train(model, bad_vocab, dataset, tiny_cfg(tmp_path))

    def test_freeze_beyond_depth_rejected(self, dataset, vocab, tmp_path):
        from reasonvla.model import ModelError

        with pytest.raises(ModelError, match="out of range"):
            train(tiny_model(vocab), vocab, dataset, tiny_cfg(tmp_path, freeze_layers=3))


class TestEvaluateOffline:
    def test_pure_and_repeatable(self, dataset, vocab, tmp_path):
        model = tiny_model(vocab)
        cfg = tiny_cfg(tmp_path)
        checksum = parameter_checksum(model)
        a = evaluate_offline(model, vocab, dataset, cfg)
        b = evaluate_offline(model, vocab, dataset, cfg)
        assert a == b
        assert parameter_checksum(model) == checksum

    def test_checkpoint_roundtrip_matches(self, dataset, vocab, tmp_path):
        model = tiny_model(vocab)
        cfg = tiny_cfg(tmp_path, epochs=1)
        train(model, vocab, dataset, cfg)
        ckpts = sorted((tmp_path / "run").glob("ckpt_*.bin"), key=lambda p: int(p.stem.split("_")[1]))
        loaded, _ = load_checkpoint(ckpts[-1])
        assert evaluate_offline(loaded, vocab, dataset, cfg) == evaluate_offline(model, vocab, dataset, cfg)

    def test_empty_dataset_rejected(self, vocab, tmp_path):
        with pytest.raises(TrainerError, match="empty"):
            evaluate_offline(tiny_model(vocab), vocab, [], tiny_cfg(tmp_path))

    def test_batch_size_does_not_change_result(self, dataset, vocab, tmp_path):
        model = tiny_model(vocab)
        a = evaluate_offline(model, vocab, dataset, tiny_cfg(tmp_path, batch_size=2))
        b = evaluate_offline(model, vocab, dataset, tiny_cfg(tmp_path, batch_size=7))
        assert a.action_accuracy == b.action_accuracy
        assert a.reasoning_accuracy == b.reasoning_accuracy
        assert abs(a.action_l1 - b.action_l1) < 1e-12


class TestPolicy:
    def test_predict_action_always_valid(self, dataset, vocab):
        model = tiny_model(vocab)
        obs = dataset[0].steps[0].observation
        action = predict_action(model, vocab, obs, max_reasoning_tokens=8)
        vec = action.as_vector()
        assert len(vec) == 7 and all(-1 <= v <= 1 for v in vec)

    def test_policy_deterministic(self, dataset, vocab):
        model = tiny_model(vocab)
        policy = build_policy(model, vocab, max_reasoning_tokens=8)
        obs = dataset[0].steps[0].observation
        assert policy(obs) == policy(obs)

    def test_policy_runs_rollout(self, dataset, vocab):
        model = tiny_model(vocab)
        policy = build_policy(model, vocab, max_reasoning_tokens=4)
        stats = rollout(policy, "pick", n_episodes=2, seed=0, max_steps=4, grid_size=GRID)
        assert stats.n_episodes == 2
        assert all(r.error is None for r in stats.results)

    def test_prompt_too_long_rejected(self, dataset, vocab):
        cfg = ModelConfig(
            vocab_size=vocab.vocab_size, max_seq_len=GRID * GRID + 5,
            d_model=16, n_layers=1, n_heads=2, patch_grid=GRID)
        model = init_model(cfg)
        with pytest.raises(TrainerError, match="room"):
            predict_action(model, vocab, dataset[0].steps[0].observation)


class TestVocabularyForEpisodes:
    def test_covers_instructions_and_traces(self, dataset):
        v = vocabulary_for_episodes(dataset, bins_per_dim=16)
        unk = v.unk_id
        for ep in dataset:
            ids = v.encode_text(ep.instruction)
            assert unk not in ids
        sample = tokenize_dataset(dataset, v, 0.3, 64)[0]
        assert unk not in sample.input_ids.tolist()

    def test_trace_free_dataset(self, dataset):
        v = vocabulary_for_episodes(strip_traces(dataset), bins_per_dim=16)
        assert v.vocab_size > 4 + 7 * 16
