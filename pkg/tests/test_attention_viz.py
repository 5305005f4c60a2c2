from __future__ import annotations

import json

import numpy as np
import pytest
import torch

from reasonvla.attention_viz import (
    DEFAULT_TOP_K,
    FusedAttentionMap,
    VizError,
    _PALETTE_RGB,
    export_heatmap,
    fuse_attention_map,
    topk_aggregate,
)
from reasonvla.data_model import ContinuousAction, Observation, ReasoningTrace, Step
from reasonvla.model import AttentionRecord, ModelConfig, forward, init_model
from reasonvla.tokenizer import Segment, assemble_sample, build_text_vocab, build_vocabulary

P = 4


@pytest.fixture(scope="module")
def vocab():
    return build_vocabulary(bins_per_dim=8, text_vocab=build_text_vocab([
        "pick up the can",
        "observation : situation : spatial : plan : next :",
        "move to the can , grasp the can",
    ]))


@pytest.fixture(scope="module")
def record(vocab):
    """Genuine attention from a tiny 3-layer, 2-head model forward."""
    rng = np.random.default_rng(7)
    obs = Observation(images=(rng.integers(0, 8, size=(P, P)),), instruction="pick up the can")
    trace = ReasoningTrace(
        observation="the can",
        situation_analysis="grasp the can",
        spatial_reasoning="move to the can",
        task_planning="",
        logical_steps=("move to the can", "grasp the can"),
        sub_action="grasp the can",
    )
    step = Step(obs, ContinuousAction((0.25, -0.5, 0.0), (0.0, 0.0, 0.0), 1.0), trace)
    sample = assemble_sample(step, vocab)
    cfg = ModelConfig(
        vocab_size=vocab.vocab_size, max_seq_len=sample.length, d_model=24,
        n_layers=3, n_heads=2, patch_grid=P, seed=3)
    _, rec = forward(init_model(cfg), sample, record_attention=True)
    return rec


def sort_oracle(stack, k, method):
    """Brute force: per source position, sort all layer-head values and
    reduce the k largest."""
    arr = np.asarray(stack, dtype=np.float64)
    out = np.empty(arr.shape[1])
    for j in range(arr.shape[1]):
        top = sorted(arr[:, j], reverse=True)[:k]
        out[j] = max(top) if method == "max" else sum(top) / k
    return out


def synthetic_record(target_row, n_layers=2, n_heads=2):
    """Build a causal record where every query attends uniformly over its
    prefix, except the last position which uses target_row."""
    t = len(target_row)
    weights = torch.zeros((n_layers, n_heads, t, t), dtype=torch.float64)
    for q in range(t - 1):
        weights[:, :, q, : q + 1] = 1.0 / (q + 1)
    weights[:, :, t - 1, :] = torch.as_tensor(target_row, dtype=torch.float64)
    # layout: BOS, 4 image patches (P=2), one instruction token, the target
    segments = np.array([0, 1, 1, 1, 1, 2, 4], dtype=np.int64)
    ids = np.arange(t, dtype=np.int64)
    return AttentionRecord(weights, ids, segments, n_views=1, patch_grid=2)


class TestTopkAggregate:
    def test_single_candidate_is_identity(self):
        row = torch.rand(1, 9, dtype=torch.float64)
        assert torch.equal(topk_aggregate(row, k=1, method="max"), row[0])
        assert torch.equal(topk_aggregate(row, k=1, method="mean"), row[0])

    def test_full_k_mean_is_plain_mean(self):
        stack = torch.rand(6, 11, dtype=torch.float64)
        fused = topk_aggregate(stack, k=6, method="mean")
        assert torch.allclose(fused, stack.mean(dim=0), atol=1e-12)

    @pytest.mark.parametrize("k", [1, 3, 6])
    @pytest.mark.parametrize("method", ["max", "mean"])
    def test_matches_sort_oracle(self, k, method):
        for seed in range(5):
            gen = torch.Generator().manual_seed(seed)
            stack = torch.rand(6, 17, generator=gen, dtype=torch.float64)
            fused = topk_aggregate(stack, k=k, method=method)
            np.testing.assert_allclose(fused.numpy(), sort_oracle(stack, k, method), rtol=1e-12)

    def test_k_one_max_equals_mean(self):
        stack = torch.rand(6, 13, dtype=torch.float64)
        assert torch.equal(
            topk_aggregate(stack, k=1, method="max"),
            topk_aggregate(stack, k=1, method="mean"))

    def test_permutation_invariant_across_layer_heads(self):
        gen = torch.Generator().manual_seed(0)
        stack = torch.rand(6, 10, generator=gen, dtype=torch.float64)
        base = topk_aggregate(stack, k=3, method="mean")
        for seed in range(4):
            perm = torch.randperm(6, generator=torch.Generator().manual_seed(seed))
            assert torch.equal(topk_aggregate(stack[perm], k=3, method="mean"), base)

    @pytest.mark.parametrize("method", ["max", "mean"])
    def test_monotone_in_any_entry(self, method):
        gen = torch.Generator().manual_seed(1)
        stack = torch.rand(6, 8, generator=gen, dtype=torch.float64)
        before = topk_aggregate(stack, k=3, method=method)
        for i in range(6):
            for j in range(8):
                bumped = stack.clone()
                bumped[i, j] += 0.37
                after = topk_aggregate(bumped, k=3, method=method)
                assert after[j] >= before[j]
                others = torch.cat([after[:j], after[j + 1:]])
                assert torch.equal(others, torch.cat([before[:j], before[j + 1:]]))

    def test_bounded_by_global_max(self):
        stack = torch.rand(6, 10, dtype=torch.float64)
        for method in ("max", "mean"):
            fused = topk_aggregate(stack, k=4, method=method)
            assert fused.max() <= stack.max()

    @pytest.mark.parametrize("k", [0, -1, 7])
    def test_k_out_of_range(self, k):
        with pytest.raises(VizError, match="out of range"):
            topk_aggregate(torch.rand(6, 4), k=k)

    def test_unknown_method(self):
        with pytest.raises(ValueError, match="method"):
            topk_aggregate(torch.rand(6, 4), k=2, method="median")

    def test_rejects_non_stack_input(self):
        with pytest.raises(VizError, match="stack"):
            topk_aggregate(torch.rand(2, 3, 4), k=1)


class TestFuseAttentionMap:
    def test_delta_row_lights_one_patch(self):
        row = [0.0] * 7
        row[3] = 1.0  # patch (1, 0) of a 2x2 grid sits at position 3
        rec = synthetic_record(row)
        (fmap,) = fuse_attention_map(rec, [6], k=2, method="max")
        expected = np.zeros((1, 2, 2))
        expected[0, 1, 0] = 1.0
        np.testing.assert_array_equal(fmap.grid, expected)
        assert not fmap.flat

    def test_constant_attention_flags_flat(self):
        rec = synthetic_record([0.0, 0.25, 0.25, 0.25, 0.25, 0.0, 0.0])
        (fmap,) = fuse_attention_map(rec, [6], k=1)
        assert fmap.flat
        np.testing.assert_array_equal(fmap.grid, np.zeros((1, 2, 2)))

    def test_positional_bookkeeping_oracle(self, record):
        """Restriction + reshape agrees with index-by-index arithmetic."""
        k, method = 3, "max"
        targets = [record.length - 3, record.length - 1]
        maps = fuse_attention_map(record, targets, k=k, method=method)
        image_pos = np.flatnonzero(record.segments == int(Segment.IMAGE))
        np.testing.assert_array_equal(image_pos, 1 + np.arange(P * P))
        for fmap, t in zip(maps, targets):
            stack = record.weights[:, :, t, :].reshape(-1, record.length)
            fused = sort_oracle(stack, k, method)
            scores = fused[image_pos]
            expected = (scores - scores.min()) / (scores.max() - scores.min())
            for i in range(P):
                for j in range(P):
                    assert fmap.grid[0, i, j] == pytest.approx(expected[i * P + j], abs=1e-9)

    def test_text_attention_raw_scores(self, record):
        (fmap,) = fuse_attention_map(record, [record.length - 1], k=2)
        text_mask = (record.segments == int(Segment.INSTRUCTION)) | (
            record.segments == int(Segment.REASONING))
        assert fmap.text_attention.shape == (int(text_mask.sum()),)
        stack = record.weights[:, :, record.length - 1, :].reshape(-1, record.length)
        fused = sort_oracle(stack, 2, "max")
        np.testing.assert_allclose(fmap.text_attention, fused[text_mask], rtol=1e-6)

    def test_prenormalization_bounded_by_one(self, record):
        # raw fused scores never exceed the largest attention weight
        t = record.length - 1
        stack = record.weights[:, :, t, :].reshape(-1, record.length)
        for method in ("max", "mean"):
            fused = topk_aggregate(stack, k=DEFAULT_TOP_K, method=method)
            assert fused.max().item() <= record.weights.max().item() <= 1.0 + 1e-6

    def test_one_map_per_target(self, record):
        targets = list(range(record.length - 4, record.length))
        maps = fuse_attention_map(record, targets)
        assert [m.target_token_index for m in maps] == targets
        assert all(m.k == DEFAULT_TOP_K and m.method == "max" for m in maps)

    def test_target_out_of_range(self, record):
        with pytest.raises(VizError, match="outside recorded range"):
            fuse_attention_map(record, [record.length])
        with pytest.raises(VizError, match="outside recorded range"):
            fuse_attention_map(record, [-1])

    def test_incomplete_image_segment_rejected(self):
        weights = torch.eye(3, dtype=torch.float64).reshape(1, 1, 3, 3)
        rec = AttentionRecord(
            weights, np.zeros(3, dtype=np.int64), np.zeros(3, dtype=np.int64),
            n_views=1, patch_grid=2)
        with pytest.raises(VizError, match="image positions"):
            fuse_attention_map(rec, [2])

    def test_grid_values_validated(self):
        with pytest.raises(VizError, match="normalized"):
            FusedAttentionMap(
                grid=np.full((1, 2, 2), 1.5), target_token_index=0, k=1,
                method="max", text_attention=np.zeros(1), flat=False)


def read_ppm(path):
    data = path.read_bytes()
    magic, dims, maxval, raster = data.split(b"\n", 3)
    assert magic == b"P6" and maxval == b"255"
    width, height = map(int, dims.split())
    return np.frombuffer(raster, dtype=np.uint8).reshape(height, width, 3)


class TestExportHeatmap:
    def base_image(self, fmap, seed=0):
        rng = np.random.default_rng(seed)
        return rng.integers(0, 8, size=(fmap.patch_grid, fmap.patch_grid))

    def zero_map(self, p=2):
        return FusedAttentionMap(
            grid=np.zeros((1, p, p)), target_token_index=5, k=2, method="max",
            text_attention=np.array([0.5]), flat=True)

    def test_zero_grid_is_dimmed_copy(self, tmp_path):
        fmap = self.zero_map()
        base = self.base_image(fmap)
        _, ppm = export_heatmap(fmap, base, tmp_path / "zero", scale=1)
        pixels = read_ppm(ppm)
        expected = np.rint(0.5 * _PALETTE_RGB[base]).astype(np.uint8)
        np.testing.assert_array_equal(pixels, expected)

    def test_delta_grid_one_hot_cell(self, tmp_path):
        grid = np.zeros((1, 2, 2))
        grid[0, 0, 1] = 1.0
        fmap = FusedAttentionMap(
            grid=grid, target_token_index=5, k=2, method="max",
            text_attention=np.zeros(0), flat=False)
        base = np.zeros((2, 2), dtype=np.int64)
        _, ppm = export_heatmap(fmap, base, tmp_path / "delta", scale=1)
        pixels = read_ppm(ppm)
        dimmed = np.rint(0.5 * _PALETTE_RGB[0]).astype(np.uint8)
        hot = np.rint(0.5 * _PALETTE_RGB[0] + 0.5 * np.array([255.0, 0, 0])).astype(np.uint8)
        np.testing.assert_array_equal(pixels[0, 1], hot)
        for (i, j) in [(0, 0), (1, 0), (1, 1)]:
            np.testing.assert_array_equal(pixels[i, j], dimmed)

    def test_redness_monotone_in_score(self, tmp_path):
        grid = np.linspace(0, 1, 4).reshape(1, 2, 2)
        fmap = FusedAttentionMap(
            grid=grid, target_token_index=0, k=1, method="max",
            text_attention=np.zeros(0), flat=False)
        _, ppm = export_heatmap(fmap, np.zeros((2, 2), dtype=np.int64), tmp_path / "mono", scale=1)
        reds = read_ppm(ppm)[:, :, 0].reshape(-1)
        order = grid.reshape(-1).argsort()
        assert list(reds[order]) == sorted(reds)

    def test_json_roundtrip(self, tmp_path, record):
        (fmap,) = fuse_attention_map(record, [record.length - 1])
        base = np.zeros((P, P), dtype=np.int64)
        json_path, _ = export_heatmap(fmap, base, tmp_path / "map")
        loaded = json.loads(json_path.read_text())
        assert loaded["target"] == fmap.target_token_index
        assert loaded["k"] == DEFAULT_TOP_K
        assert loaded["method"] == "max"
        assert loaded["flat"] == fmap.flat
        np.testing.assert_allclose(np.array(loaded["grid"]), fmap.grid[0], atol=1e-9)
        np.testing.assert_allclose(
            np.array(loaded["text_attention"]), fmap.text_attention, atol=1e-9)

    def test_cell_scale(self, tmp_path):
        fmap = self.zero_map()
        _, ppm = export_heatmap(fmap, self.base_image(fmap), tmp_path / "scaled", scale=16)
        assert read_ppm(ppm).shape == (32, 32, 3)

    def test_multi_view_side_by_side(self, tmp_path):
        fmap = FusedAttentionMap(
            grid=np.zeros((2, 3, 3)), target_token_index=0, k=1, method="max",
            text_attention=np.zeros(0), flat=True)
        base = np.zeros((2, 3, 3), dtype=np.int64)
        _, ppm = export_heatmap(fmap, base, tmp_path / "views", scale=2)
        assert read_ppm(ppm).shape == (6, 12, 3)

    def test_dimension_mismatch(self, tmp_path):
        fmap = self.zero_map(p=2)
        with pytest.raises(VizError, match="does not match"):
            export_heatmap(fmap, np.zeros((3, 3), dtype=np.int64), tmp_path / "bad")

    def test_end_to_end_from_model_record(self, tmp_path, record):
        maps = fuse_attention_map(record, [record.length - 2, record.length - 1])
        rng = np.random.default_rng(7)
        base = rng.integers(0, 8, size=(P, P))
        for i, fmap in enumerate(maps):
            json_path, ppm_path = export_heatmap(fmap, base, tmp_path / f"target_{i}")
            assert json_path.exists() and ppm_path.exists()
