"""Vocabulary, action discretization, and training-sample assembly.

Token id layout is fixed: specials 0..3 (PAD, BOS, EOS, IMG), then text
words in list order, then 7 x bins_per_dim action bins in dimension-major
order (tx, ty, tz, rx, ry, rz, gripper). Supervision labels use -100
(IGNORE_LABEL) outside the reasoning and action segments.
"""

from __future__ import annotations

import hashlib
import json
import re
from dataclasses import dataclass
from enum import IntEnum
from pathlib import Path
from typing import Iterable

import numpy as np

from .data_model import ACTION_DIMS, ContinuousAction, ReasoningTrace, Step

PAD_ID = 0
BOS_ID = 1
EOS_ID = 2
IMG_ID = 3
N_SPECIALS = 4

IGNORE_LABEL = -100
UNK_WORD = "<unk>"

# Lowercased word runs, single punctuation marks otherwise. The UNK_WORD
# sentinel contains '<' and '>' so no real token can ever collide with it.
_TOKEN_RE = re.compile(r"[a-z0-9]+|[^\sa-z0-9]")

DEFAULT_REASONING_BUDGET = 244


class Segment(IntEnum):
    SPECIAL = 0
    IMAGE = 1
    INSTRUCTION = 2
    REASONING = 3
    ACTION = 4


class VocabError(ValueError):
    """Raised for vocabulary construction or codec misuse."""


def tokenize_text(text: str) -> list[str]:
    return _TOKEN_RE.findall(text.lower())


@dataclass(frozen=True)
class Vocabulary:
    """Closed token vocabulary with a dimension-major action-bin block."""

    words: tuple[str, ...]
    bins_per_dim: int

    def __post_init__(self) -> None:
        if self.bins_per_dim < 2:
            raise VocabError(f"bins_per_dim must be >= 2, got {self.bins_per_dim}")
        if len(set(self.words)) != len(self.words):
            dupes = sorted({w for w in self.words if list(self.words).count(w) > 1})
            raise VocabError(f"duplicate words in vocabulary: {dupes}")

    @property
    def translation_token_start_idx(self) -> int:
        return N_SPECIALS + len(self.words)

    @property
    def gripper_token_end_idx(self) -> int:
        return self.translation_token_start_idx + ACTION_DIMS * self.bins_per_dim - 1

    @property
    def vocab_size(self) -> int:
        return self.gripper_token_end_idx + 1

    @property
    def unk_id(self) -> int | None:
        try:
            return N_SPECIALS + self.words.index(UNK_WORD)
        except ValueError:
            return None

    def word_id(self, word: str) -> int:
        try:
            return N_SPECIALS + self.words.index(word)
        except ValueError:
            unk = self.unk_id
            if unk is None:
                raise VocabError(f"word {word!r} not in vocabulary and no {UNK_WORD} entry exists")
            return unk

    def encode_text(self, text: str) -> list[int]:
        table = self._word_table()
        unk = self.unk_id
        ids = []
        for tok in tokenize_text(text):
            idx = table.get(tok)
            if idx is None:
                if unk is None:
                    raise VocabError(f"word {tok!r} not in vocabulary and no {UNK_WORD} entry exists")
                idx = unk
            ids.append(idx)
        return ids

    def _word_table(self) -> dict[str, int]:
        # words is immutable, so cache the lookup table on first use
        table = getattr(self, "_table", None)
        if table is None:
            table = {w: N_SPECIALS + i for i, w in enumerate(self.words)}
            object.__setattr__(self, "_table", table)
        return table

    def is_action_id(self, token_id: int) -> bool:
        return self.translation_token_start_idx <= token_id <= self.gripper_token_end_idx

    def to_dict(self) -> dict:
        return {
            "words": list(self.words),
            "bins_per_dim": self.bins_per_dim,
            "action_dims": ACTION_DIMS,
            "ranges": {
                "special": [0, N_SPECIALS - 1],
                "text": [N_SPECIALS, N_SPECIALS + len(self.words) - 1],
                "action": [self.translation_token_start_idx, self.gripper_token_end_idx],
            },
        }

    def content_hash(self) -> str:
        payload = json.dumps(self.to_dict(), sort_keys=True, separators=(",", ":"))
        return hashlib.sha256(payload.encode("utf-8")).hexdigest()


def build_vocabulary(bins_per_dim: int, text_vocab: Iterable[str]) -> Vocabulary:
    """Assemble a vocabulary from an ordered, duplicate-free word list."""
    return Vocabulary(words=tuple(text_vocab), bins_per_dim=int(bins_per_dim))


def build_text_vocab(texts: Iterable[str]) -> list[str]:
    """Collect a sorted closed word list from a text corpus, with the UNK
    sentinel in front so encoding is total on unseen words."""
    seen: set[str] = set()
    for text in texts:
        seen.update(tokenize_text(text))
    return [UNK_WORD] + sorted(seen)


def save_vocabulary(v: Vocabulary, path: str | Path) -> None:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text(json.dumps(v.to_dict(), indent=2) + "\n", encoding="utf-8")


def load_vocabulary(path: str | Path) -> Vocabulary:
    d = json.loads(Path(path).read_text(encoding="utf-8"))
    for key in ("words", "bins_per_dim", "action_dims", "ranges"):
        if key not in d:
            raise VocabError(f"vocabulary file missing field '{key}'")
    if d["action_dims"] != ACTION_DIMS:
        raise VocabError(f"vocabulary has action_dims={d['action_dims']}, expected {ACTION_DIMS}")
    v = Vocabulary(words=tuple(d["words"]), bins_per_dim=int(d["bins_per_dim"]))
    if d["ranges"] != v.to_dict()["ranges"]:
        raise VocabError("vocabulary ranges are inconsistent with the word list and bin count")
    return v


def _bin_of(value: float, bins: int) -> int:
    if not -1.0 <= value <= 1.0:
        raise VocabError(f"action component out of [-1, 1]: {value!r}")
    b = int((value + 1.0) / 2.0 * bins)
    return min(b, bins - 1)


def _center_of(b: int, bins: int) -> float:
    return -1.0 + (b + 0.5) * 2.0 / bins


def encode_action(a: ContinuousAction, v: Vocabulary) -> list[int]:
    """Discretize a 7-dof action into 7 token ids, dimension-major."""
    start, bins = v.translation_token_start_idx, v.bins_per_dim
    return [start + dim * bins + _bin_of(value, bins) for dim, value in enumerate(a.as_vector())]


def decode_action(ids: Iterable[int], v: Vocabulary) -> ContinuousAction:
    """Map 7 action token ids back to the bin-center continuous action."""
    ids = list(ids)
    if len(ids) != ACTION_DIMS:
        raise VocabError(f"decode_action needs {ACTION_DIMS} ids, got {len(ids)}")
    start, bins = v.translation_token_start_idx, v.bins_per_dim
    values = []
    for dim, tok in enumerate(ids):
        lo = start + dim * bins
        if not lo <= tok < lo + bins:
            raise VocabError(
                f"token id {tok} outside dimension {dim} bin interval [{lo}, {lo + bins - 1}]"
            )
        values.append(_center_of(tok - lo, bins))
    return ContinuousAction.from_vector(values)


def render_trace(trace: ReasoningTrace) -> str:
    """Flatten a trace to the fixed-order text fed to the model."""
    plan_parts = []
    if trace.task_planning.strip():
        plan_parts.append(trace.task_planning.strip())
    plan_parts.extend(s.strip() for s in trace.logical_steps if s.strip())
    plan = " , ".join(plan_parts)
    return (
        f"observation : {trace.observation} "
        f"situation : {trace.situation_analysis} "
        f"spatial : {trace.spatial_reasoning} "
        f"plan : {plan} "
        f"next : {trace.sub_action}"
    )


@dataclass(frozen=True, eq=False)
class TokenizedSample:
    """One flattened training sequence with labels and segment tags."""

    input_ids: np.ndarray   # (T,) int64
    labels: np.ndarray      # (T,) int64, IGNORE_LABEL off the supervised segments
    segment: np.ndarray     # (T,) int8 of Segment values
    patches: np.ndarray     # (views, P, P) int64 color indices

    def __post_init__(self) -> None:
        assert self.input_ids.shape == self.labels.shape == self.segment.shape

    @property
    def length(self) -> int:
        return int(self.input_ids.shape[0])

    @property
    def n_views(self) -> int:
        return int(self.patches.shape[0])

    @property
    def patch_grid(self) -> int:
        return int(self.patches.shape[1])


def assemble_sample(
    step: Step,
    v: Vocabulary,
    reasoning_budget: int = DEFAULT_REASONING_BUDGET,
) -> TokenizedSample:
    """Build [BOS][IMG x views*P^2][instruction][trace][action x 7][EOS].

    The reasoning segment is empty when the step has no trace; otherwise the
    rendered trace is truncated tail-first to ``reasoning_budget`` tokens.
    Labels are IGNORE_LABEL everywhere except the reasoning and action
    segments, which carry their own token ids.
    """
    if reasoning_budget < 0:
        raise VocabError(f"reasoning_budget must be >= 0, got {reasoning_budget}")
    obs = step.observation
    p = obs.grid_size
    n_img = len(obs.images) * p * p

    instr_ids = v.encode_text(obs.instruction)
    trace_ids: list[int] = []
    if step.trace is not None:
        trace_ids = v.encode_text(render_trace(step.trace))[:reasoning_budget]
    action_ids = encode_action(step.action, v)

    ids = [BOS_ID] + [IMG_ID] * n_img + instr_ids + trace_ids + action_ids + [EOS_ID]
    seg = (
        [Segment.SPECIAL]
        + [Segment.IMAGE] * n_img
        + [Segment.INSTRUCTION] * len(instr_ids)
        + [Segment.REASONING] * len(trace_ids)
        + [Segment.ACTION] * len(action_ids)
        + [Segment.SPECIAL]
    )
    input_ids = np.array(ids, dtype=np.int64)
    segment = np.array(seg, dtype=np.int8)
    labels = np.full_like(input_ids, IGNORE_LABEL)
    supervised = (segment == Segment.REASONING) | (segment == Segment.ACTION)
    labels[supervised] = input_ids[supervised]

    patches = np.stack([np.asarray(img, dtype=np.int64) for img in obs.images])
    return TokenizedSample(input_ids=input_ids, labels=labels, segment=segment, patches=patches)


def prompt_prefix(sample: TokenizedSample) -> TokenizedSample:
    """Slice a sample down to its generation prompt: everything before the
    first supervised (reasoning or action) position."""
    supervised = (sample.segment == Segment.REASONING) | (sample.segment == Segment.ACTION)
    if not supervised.any():
        raise VocabError("sample has no supervised positions to cut at")
    cut = int(np.argmax(supervised))
    return TokenizedSample(
        input_ids=sample.input_ids[:cut].copy(),
        labels=sample.labels[:cut].copy(),
        segment=sample.segment[:cut].copy(),
        patches=sample.patches.copy(),
    )
