"""Decoder-only multimodal transformer over token streams with image patches
scattered in at IMG positions, with attention recording, prefix freezing, and
a self-describing checkpoint format."""

from __future__ import annotations

import hashlib
import json
import math
import struct
from dataclasses import dataclass
from pathlib import Path
from typing import Any

import numpy as np
import torch
from torch import nn

from .tokenizer import EOS_ID, IGNORE_LABEL, N_SPECIALS, Segment, TokenizedSample, Vocabulary

CHECKPOINT_MAGIC = b"RVLA"
COLOR_TABLE_SIZE = 256  # grids carry byte-valued color indices


class ModelError(ValueError):
    """Configuration or shape violation."""


class CheckpointError(RuntimeError):
    """Unreadable or incompatible checkpoint file."""


@dataclass(frozen=True)
class ModelConfig:
    """Architecture hyperparameters; d_head and patch_count are derived."""

    vocab_size: int
    max_seq_len: int
    d_model: int = 64
    n_layers: int = 4
    n_heads: int = 4
    n_views: int = 1
    patch_grid: int = 16
    seed: int = 0

    def __post_init__(self):
        if self.d_model % self.n_heads != 0:
            raise ModelError(f"d_model={self.d_model} not divisible by n_heads={self.n_heads}")
        for name in ("vocab_size", "max_seq_len", "d_model", "n_layers", "n_heads", "n_views", "patch_grid"):
            if getattr(self, name) < 1:
                raise ModelError(f"{name} must be positive")

    @property
    def d_head(self) -> int:
        return self.d_model // self.n_heads

    @property
    def patch_count(self) -> int:
        return self.n_views * self.patch_grid * self.patch_grid

    def to_dict(self) -> dict[str, Any]:
        return {
            "vocab_size": self.vocab_size,
            "max_seq_len": self.max_seq_len,
            "d_model": self.d_model,
            "n_layers": self.n_layers,
            "n_heads": self.n_heads,
            "n_views": self.n_views,
            "patch_grid": self.patch_grid,
            "seed": self.seed,
        }

    @classmethod
    def from_dict(cls, d: dict[str, Any]) -> "ModelConfig":
        return cls(**d)


class SelfAttention(nn.Module):
    def __init__(self, d_model: int, n_heads: int):
        super().__init__()
        self.n_heads = n_heads
        self.d_head = d_model // n_heads
        self.qkv = nn.Linear(d_model, 3 * d_model)
        self.proj = nn.Linear(d_model, d_model)

    def forward(self, x: torch.Tensor, record: bool = False):
        B, T, C = x.shape
        q, k, v = self.qkv(x).split(C, dim=-1)
        q = q.view(B, T, self.n_heads, self.d_head).transpose(1, 2)
        k = k.view(B, T, self.n_heads, self.d_head).transpose(1, 2)
        v = v.view(B, T, self.n_heads, self.d_head).transpose(1, 2)
        scores = q @ k.transpose(-2, -1) / math.sqrt(self.d_head)
        causal = torch.ones(T, T, dtype=torch.bool, device=x.device).tril()
        scores = scores.masked_fill(~causal, float("-inf"))
        weights = torch.softmax(scores, dim=-1)
        out = (weights @ v).transpose(1, 2).reshape(B, T, C)
        return self.proj(out), (weights if record else None)


class Block(nn.Module):
    """Pre-norm transformer block: attention then a GELU feed-forward."""

    def __init__(self, d_model: int, n_heads: int):
        super().__init__()
        self.norm1 = nn.LayerNorm(d_model)
        self.attn = SelfAttention(d_model, n_heads)
        self.norm2 = nn.LayerNorm(d_model)
        self.mlp = nn.Sequential(
            nn.Linear(d_model, 4 * d_model),
            nn.GELU(),
            nn.Linear(4 * d_model, d_model),
        )

    def forward(self, x: torch.Tensor, record: bool = False):
        attn_out, weights = self.attn(self.norm1(x), record=record)
        x = x + attn_out
        x = x + self.mlp(self.norm2(x))
        return x, weights


class PolicyModel(nn.Module):
    """Single shared stream for vision and text; logits at every position."""

    def __init__(self, cfg: ModelConfig):
        super().__init__()
        self.cfg = cfg
        self.frozen_prefix = 0
        self.tok_emb = nn.Embedding(cfg.vocab_size, cfg.d_model)
        self.pos_emb = nn.Embedding(cfg.max_seq_len, cfg.d_model)
        self.color_emb = nn.Embedding(COLOR_TABLE_SIZE, cfg.d_model)
        self.row_emb = nn.Embedding(cfg.patch_grid, cfg.d_model)
        self.col_emb = nn.Embedding(cfg.patch_grid, cfg.d_model)
        self.view_emb = nn.Embedding(cfg.n_views, cfg.d_model)
        self.blocks = nn.ModuleList(Block(cfg.d_model, cfg.n_heads) for _ in range(cfg.n_layers))
        self.final_norm = nn.LayerNorm(cfg.d_model)
        self.head = nn.Linear(cfg.d_model, cfg.vocab_size, bias=False)

    def embedding_modules(self) -> tuple[nn.Module, ...]:
        return (self.tok_emb, self.pos_emb, self.color_emb, self.row_emb, self.col_emb, self.view_emb)

    def patch_features(self, patches: torch.Tensor) -> torch.Tensor:
        """(B, V, P, P) color grids -> (B, V*P*P, d_model), view-major row-major."""
        B, V, P, _ = patches.shape
        rows = torch.arange(P, device=patches.device)
        views = torch.arange(V, device=patches.device)
        feats = (
            self.color_emb(patches)
            + self.row_emb(rows)[None, None, :, None, :]
            + self.col_emb(rows)[None, None, None, :, :]
            + self.view_emb(views)[None, :, None, None, :]
        )
        return feats.reshape(B, V * P * P, self.cfg.d_model)

    def forward(self, ids: torch.Tensor, patches: torch.Tensor, segments: torch.Tensor, record: bool = False):
        """Batched core: ids/segments (B, T), patches (B, V, P, P).

        Returns (logits (B, T, vocab), attention (L, B, H, T, T) or None).
        """
        B, T = ids.shape
        cfg = self.cfg
        if T > cfg.max_seq_len:
            raise ModelError(f"sequence length {T} exceeds max_seq_len {cfg.max_seq_len}")
        if patches.shape != (B, cfg.n_views, cfg.patch_grid, cfg.patch_grid):
            raise ModelError(
                f"patches shape {tuple(patches.shape)} does not match "
                f"(B, {cfg.n_views}, {cfg.patch_grid}, {cfg.patch_grid})")
        img_mask = segments == int(Segment.IMAGE)
        counts = img_mask.sum(dim=1)
        if not bool((counts == cfg.patch_count).all()):
            raise ModelError(
                f"sample has {counts.tolist()} IMG positions, model expects {cfg.patch_count}")
        positions = torch.arange(T, device=ids.device)
        x = self.tok_emb(ids) + self.pos_emb(positions)[None, :, :]
        feats = self.patch_features(patches)
        x = x.clone()
        x[img_mask] = feats.reshape(-1, cfg.d_model).to(x.dtype)  # inject vision before block 0
        recorded = []
        for block in self.blocks:
            x, weights = block(x, record=record)
            if record:
                recorded.append(weights)
        logits = self.head(self.final_norm(x))
        return logits, (torch.stack(recorded) if record else None)


@dataclass(frozen=True)
class AttentionRecord:
    """Full causal attention of one sequence: weights (L, H, T, T) plus the
    ids and segment tags of what was attended over."""

    weights: torch.Tensor
    input_ids: np.ndarray
    segments: np.ndarray
    n_views: int
    patch_grid: int

    def __post_init__(self):
        L, H, T, T2 = self.weights.shape
        if T != T2 or self.input_ids.shape != (T,) or self.segments.shape != (T,):
            raise ModelError("attention record shapes disagree")
        if not torch.all(self.weights.triu(diagonal=1).abs() == 0):
            raise ModelError("attention record is not strictly causal")
        sums = self.weights.sum(dim=-1)
        if not torch.all((sums - 1.0).abs() <= 1e-6):
            raise ModelError("attention rows must sum to 1")

    @property
    def n_layers(self) -> int:
        return int(self.weights.shape[0])

    @property
    def n_heads(self) -> int:
        return int(self.weights.shape[1])

    @property
    def length(self) -> int:
        return int(self.weights.shape[2])

    def matrix(self, layer: int, head: int) -> torch.Tensor:
        return self.weights[layer, head]


def init_model(cfg: ModelConfig) -> PolicyModel:
    """Build and deterministically initialize from cfg.seed: scaled uniform
    for projection weights, ones for norm gains, zeros for biases."""
    model = PolicyModel(cfg)
    gen = torch.Generator().manual_seed(cfg.seed)
    with torch.no_grad():
        for name, param in model.named_parameters():
            if param.ndim >= 2:
                bound = 1.0 / math.sqrt(param.shape[-1])
                param.uniform_(-bound, bound, generator=gen)
            elif name.endswith(".bias"):
                param.zero_()
            else:
                param.fill_(1.0)  # norm gains
    return model


def forward(model: PolicyModel, sample: TokenizedSample, record_attention: bool = False):
    """Single-sample forward: returns (logits (T, vocab), AttentionRecord | None)."""
    ids = torch.from_numpy(sample.input_ids).long().unsqueeze(0)
    segments = torch.from_numpy(sample.segment).long().unsqueeze(0)
    patches = torch.from_numpy(sample.patches).long().unsqueeze(0)
    logits, weights = model(ids, patches, segments, record=record_attention)
    record = None
    if record_attention:
        record = AttentionRecord(
            weights=weights[:, 0].detach(),
            input_ids=sample.input_ids.copy(),
            segments=sample.segment.copy(),
            n_views=sample.n_views,
            patch_grid=sample.patch_grid,
        )
    return logits[0], record


def _segment_of_generated(token_id: int, vocab: Vocabulary | None) -> int:
    if vocab is not None and vocab.is_action_id(token_id):
        return int(Segment.ACTION)
    if token_id < N_SPECIALS:
        return int(Segment.SPECIAL)
    return int(Segment.REASONING)


def generate(
    model: PolicyModel,
    prompt: TokenizedSample,
    max_new: int,
    record_attention: bool = False,
    vocab: Vocabulary | None = None,
    eos_id: int = EOS_ID,
):
    """Greedy decoding from a prompt sample; stops at EOS or max_new.

    Returns (generated ids (n,) int64, AttentionRecord | None). The record is
    taken from one forward over the final sequence, so row t holds exactly the
    attention the t-th token paid to its prefix when it was emitted.
    """
    if max_new < 0:
        raise ModelError("max_new must be >= 0")
    if prompt.length + max_new > model.cfg.max_seq_len:
        raise ModelError(
            f"prompt length {prompt.length} + max_new {max_new} exceeds "
            f"max_seq_len {model.cfg.max_seq_len}")
    if max_new == 0:
        return np.zeros(0, dtype=np.int64), None

    ids = list(prompt.input_ids)
    segments = list(prompt.segment)
    patches = torch.from_numpy(prompt.patches).long().unsqueeze(0)
    generated: list[int] = []
    with torch.no_grad():
        for _ in range(max_new):
            ids_t = torch.tensor(ids, dtype=torch.long).unsqueeze(0)
            seg_t = torch.tensor(segments, dtype=torch.long).unsqueeze(0)
            logits, _ = model(ids_t, patches, seg_t)
            next_id = int(torch.argmax(logits[0, -1]))
            generated.append(next_id)
            ids.append(next_id)
            segments.append(_segment_of_generated(next_id, vocab))
            if next_id == eos_id:
                break

    record = None
    if record_attention:
        final = TokenizedSample(
            input_ids=np.array(ids, dtype=np.int64),
            labels=np.full(len(ids), IGNORE_LABEL, dtype=np.int64),
            segment=np.array(segments, dtype=np.int8),
            patches=prompt.patches,
        )
        _, record = forward(model, final, record_attention=True)
    return np.array(generated, dtype=np.int64), record


def freeze_lower_layers(model: PolicyModel, k: int) -> None:
    """Exclude blocks [0, k) from the trainable set; embeddings freeze along
    with them whenever k > 0. Output head and final norm stay trainable."""
    n_layers = model.cfg.n_layers
    if not 0 <= k <= n_layers:
        raise ModelError(f"frozen prefix {k} out of range [0, {n_layers}]")
    for param in model.parameters():
        param.requires_grad = True
    if k > 0:
        for module in model.embedding_modules():
            for param in module.parameters():
                param.requires_grad = False
    for block in list(model.blocks)[:k]:
        for param in block.parameters():
            param.requires_grad = False
    model.frozen_prefix = k


def trainable_parameters(model: PolicyModel) -> list[torch.nn.Parameter]:
    return [p for p in model.parameters() if p.requires_grad]


def parameter_checksum(model: PolicyModel) -> str:
    """SHA-256 over parameter names and exact bytes; bit-level identity probe."""
    digest = hashlib.sha256()
    for name, param in sorted(model.named_parameters()):
        digest.update(name.encode("utf-8"))
        digest.update(param.detach().cpu().contiguous().numpy().tobytes())
    return digest.hexdigest()


_DTYPES = {"float32": np.float32, "float64": np.float64}


def save_checkpoint(model: PolicyModel, path: str | Path, vocab_hash: str) -> None:
    """MAGIC | u32 header length | JSON header | raw little-endian params."""
    params = [(name, p.detach().cpu().contiguous().numpy()) for name, p in model.named_parameters()]
    header = {
        "format_version": 1,
        "config": model.cfg.to_dict(),
        "vocab_hash": vocab_hash,
        "frozen_prefix": model.frozen_prefix,
        "params": [{"name": n, "shape": list(a.shape), "dtype": a.dtype.name} for n, a in params],
    }
    blob = json.dumps(header, sort_keys=True).encode("utf-8")
    with open(path, "wb") as fh:
        fh.write(CHECKPOINT_MAGIC)
        fh.write(struct.pack("<I", len(blob)))
        fh.write(blob)
        for _, array in params:
            fh.write(array.astype(array.dtype.newbyteorder("<"), copy=False).tobytes())


def load_checkpoint(path: str | Path, expected_vocab_hash: str | None = None) -> tuple[PolicyModel, dict[str, Any]]:
    """Rebuild the model from a checkpoint; verifies the vocabulary hash."""
    try:
        data = Path(path).read_bytes()
    except OSError as exc:
        raise CheckpointError(f"cannot read checkpoint: {exc}") from exc
    if data[:4] != CHECKPOINT_MAGIC:
        raise CheckpointError(f"not a checkpoint file: {path}")
    (header_len,) = struct.unpack("<I", data[4:8])
    try:
        header = json.loads(data[8 : 8 + header_len].decode("utf-8"))
    except (UnicodeDecodeError, json.JSONDecodeError) as exc:
        raise CheckpointError(f"corrupt checkpoint header: {exc}") from exc
    if expected_vocab_hash is not None and header["vocab_hash"] != expected_vocab_hash:
        raise CheckpointError(
            f"checkpoint was trained with vocabulary {header['vocab_hash'][:12]}..., "
            f"got {expected_vocab_hash[:12]}...")
    cfg = ModelConfig.from_dict(header["config"])
    model = init_model(cfg)
    offset = 8 + header_len
    state = dict(model.named_parameters())
    saved = {spec["name"] for spec in header["params"]}
    if saved != set(state):
        raise CheckpointError("checkpoint parameter set does not match the architecture")
    with torch.no_grad():
        for spec in header["params"]:
            if spec["name"] not in state:
                raise CheckpointError(f"unknown parameter in checkpoint: {spec['name']}")
            if spec["dtype"] not in _DTYPES:
                raise CheckpointError(f"unsupported dtype {spec['dtype']}")
            shape = tuple(spec["shape"])
            count = int(np.prod(shape)) if shape else 1
            dtype = np.dtype(_DTYPES[spec["dtype"]]).newbyteorder("<")
            nbytes = count * dtype.itemsize
            if offset + nbytes > len(data):
                raise CheckpointError("checkpoint truncated")
            array = np.frombuffer(data, dtype=dtype, count=count, offset=offset).reshape(shape)
            offset += nbytes
            param = state[spec["name"]]
            if tuple(param.shape) != shape:
                raise CheckpointError(f"shape mismatch for {spec['name']}")
            # .data swap (not copy_) so the saved dtype survives the roundtrip
            param.data = torch.from_numpy(np.array(array, dtype=_DTYPES[spec["dtype"]]))
    if offset != len(data):
        raise CheckpointError("checkpoint has trailing bytes")
    freeze_lower_layers(model, int(header["frozen_prefix"]))
    return model, header
