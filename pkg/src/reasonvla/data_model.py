"""Core dataset types for demonstration episodes and reasoning traces.

Episodes are stored as JSON-Lines (one episode per line); per-episode
reasoning traces live in sidecar files named ``<episode_id>.json`` and are
attached with :func:`attach_traces`.
"""

from __future__ import annotations

import dataclasses
import json
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any, Iterable

import numpy as np

ACTION_DIMS = 7

TRACE_KEYS = (
    "observation",
    "situation_analysis",
    "spatial_reasoning",
    "task_planning",
    "logical_steps",
    "sub_action",
)


class DatasetError(ValueError):
    """Raised for any malformed episode or trace input."""


def _require(cond: bool, msg: str) -> None:
    if not cond:
        raise DatasetError(msg)


@dataclass(frozen=True, slots=True)
class ContinuousAction:
    """A 7-dof action: 3 translation + 3 rotation components and a gripper
    command, every component finite and in [-1, 1]."""

    translation: tuple[float, float, float]
    rotation: tuple[float, float, float]
    gripper: float

    def __post_init__(self) -> None:
        object.__setattr__(self, "translation", tuple(float(v) for v in self.translation))
        object.__setattr__(self, "rotation", tuple(float(v) for v in self.rotation))
        object.__setattr__(self, "gripper", float(self.gripper))
        if len(self.translation) != 3 or len(self.rotation) != 3:
            raise DatasetError(
                "action must have 3 translation and 3 rotation components, got "
                f"{len(self.translation)} and {len(self.rotation)}"
            )
        for name, value in zip(self.component_names(), self.as_vector()):
            if not np.isfinite(value):
                raise DatasetError(f"action component {name} is not finite: {value!r}")
            if not -1.0 <= value <= 1.0:
                raise DatasetError(f"action component {name} out of [-1, 1]: {value!r}")

    @staticmethod
    def component_names() -> tuple[str, ...]:
        return ("tx", "ty", "tz", "rx", "ry", "rz", "gripper")

    def as_vector(self) -> tuple[float, ...]:
        return (*self.translation, *self.rotation, self.gripper)

    @classmethod
    def from_vector(cls, values: Iterable[float]) -> "ContinuousAction":
        vec = [float(v) for v in values]
        if len(vec) != ACTION_DIMS:
            raise DatasetError(f"action length must be {ACTION_DIMS}, got {len(vec)}")
        return cls(translation=tuple(vec[0:3]), rotation=tuple(vec[3:6]), gripper=vec[6])


@dataclass(frozen=True, eq=False)
class Observation:
    """One or more square color-index image grids plus the task instruction."""

    images: tuple[np.ndarray, ...]
    instruction: str

    def __post_init__(self) -> None:
        imgs = tuple(np.asarray(img, dtype=np.int64) for img in self.images)
        object.__setattr__(self, "images", imgs)
        _require(len(imgs) >= 1, "observation needs at least one image")
        size = None
        for i, img in enumerate(imgs):
            if img.ndim != 2 or img.shape[0] != img.shape[1]:
                raise DatasetError(f"image {i} is not a square 2-D grid: shape {img.shape}")
            if size is None:
                size = img.shape[0]
            elif img.shape[0] != size:
                raise DatasetError(
                    f"image {i} has size {img.shape[0]}, expected {size} (all views share one size)"
                )
            if img.size and (img.min() < 0 or img.max() > 255):
                raise DatasetError(f"image {i} has color indices outside [0, 255]")
        _require(bool(self.instruction.strip()), "instruction must be non-empty")

    @property
    def grid_size(self) -> int:
        return int(self.images[0].shape[0])


@dataclass(frozen=True, slots=True)
class ReasoningTrace:
    """Structured step-wise reasoning: four narrative sections plus an
    ordered plan and the immediate next action."""

    observation: str
    situation_analysis: str
    spatial_reasoning: str
    task_planning: str
    logical_steps: tuple[str, ...]
    sub_action: str

    def __post_init__(self) -> None:
        object.__setattr__(self, "logical_steps", tuple(str(s) for s in self.logical_steps))
        for name in ("observation", "situation_analysis", "spatial_reasoning"):
            _require(bool(getattr(self, name).strip()), f"trace section {name} must be non-empty")
        # Plan content may live in the prose, the step list, or both.
        _require(
            bool(self.task_planning.strip()) or len(self.logical_steps) > 0,
            "trace needs task_planning text or at least one logical step",
        )

    def to_dict(self) -> dict[str, Any]:
        return {
            "observation": self.observation,
            "situation_analysis": self.situation_analysis,
            "spatial_reasoning": self.spatial_reasoning,
            "task_planning": self.task_planning,
            "logical_steps": list(self.logical_steps),
            "sub_action": self.sub_action,
        }

    @classmethod
    def from_dict(cls, d: dict[str, Any]) -> "ReasoningTrace":
        missing = [k for k in TRACE_KEYS if k not in d]
        _require(not missing, f"trace entry missing keys: {missing}")
        steps = d["logical_steps"]
        _require(isinstance(steps, (list, tuple)), "trace logical_steps must be a list")
        return cls(
            observation=str(d["observation"]),
            situation_analysis=str(d["situation_analysis"]),
            spatial_reasoning=str(d["spatial_reasoning"]),
            task_planning=str(d["task_planning"]),
            logical_steps=tuple(str(s) for s in steps),
            sub_action=str(d["sub_action"]),
        )


@dataclass(frozen=True, eq=False)
class Step:
    """A single (observation, action) pair, optionally enriched with a trace."""

    observation: Observation
    action: ContinuousAction
    trace: ReasoningTrace | None = None


@dataclass(frozen=True, eq=False)
class Episode:
    """An ordered demonstration with one shared instruction across steps."""

    episode_id: str
    task_name: str
    steps: tuple[Step, ...]
    metadata: dict[str, str] = field(default_factory=dict)

    def __post_init__(self) -> None:
        object.__setattr__(self, "steps", tuple(self.steps))
        _require(bool(self.episode_id), "episode_id must be non-empty")
        _require(len(self.steps) >= 1, f"episode '{self.episode_id}' has no steps")
        instr = self.steps[0].observation.instruction
        for i, step in enumerate(self.steps):
            if step.observation.instruction != instr:
                raise DatasetError(
                    f"episode '{self.episode_id}' step {i} instruction differs from step 0"
                )
        for k, v in self.metadata.items():
            if not isinstance(k, str) or not isinstance(v, str):
                raise DatasetError(
                    f"episode '{self.episode_id}' metadata must map str to str, got {k!r}: {v!r}"
                )

    @property
    def instruction(self) -> str:
        return self.steps[0].observation.instruction

    @property
    def enriched(self) -> bool:
        return all(step.trace is not None for step in self.steps)


def episode_to_dict(episode: Episode) -> dict[str, Any]:
    """Plain-JSON form of an episode (instruction hoisted to the top level)."""
    steps = []
    for step in episode.steps:
        entry: dict[str, Any] = {
            "images": [img.tolist() for img in step.observation.images],
            "action": list(step.action.as_vector()),
        }
        if step.trace is not None:
            entry["trace"] = step.trace.to_dict()
        steps.append(entry)
    return {
        "episode_id": episode.episode_id,
        "task_name": episode.task_name,
        "instruction": episode.instruction,
        "steps": steps,
        "metadata": dict(episode.metadata),
    }


def episode_from_dict(d: dict[str, Any]) -> Episode:
    for key in ("episode_id", "task_name", "instruction", "steps"):
        _require(key in d, f"episode record missing field '{key}'")
    eid = str(d["episode_id"])
    raw_steps = d["steps"]
    _require(isinstance(raw_steps, list) and raw_steps, f"episode '{eid}': steps must be a non-empty array")
    steps: list[Step] = []
    for i, entry in enumerate(raw_steps):
        ctx = f"episode '{eid}' step {i}"
        _require(isinstance(entry, dict), f"{ctx}: step must be an object")
        _require("images" in entry, f"{ctx}: missing field 'images'")
        _require("action" in entry, f"{ctx}: missing field 'action'")
        action_values = entry["action"]
        if not isinstance(action_values, list) or len(action_values) != ACTION_DIMS:
            got = len(action_values) if isinstance(action_values, list) else type(action_values).__name__
            raise DatasetError(f"{ctx}: action length must be {ACTION_DIMS}, got {got}")
        try:
            obs = Observation(images=tuple(entry["images"]), instruction=str(d["instruction"]))
            action = ContinuousAction.from_vector(action_values)
            trace = ReasoningTrace.from_dict(entry["trace"]) if "trace" in entry else None
        except DatasetError as exc:
            raise DatasetError(f"{ctx}: {exc}") from exc
        steps.append(Step(observation=obs, action=action, trace=trace))
    metadata = d.get("metadata", {})
    _require(isinstance(metadata, dict), f"episode '{eid}': metadata must be an object")
    return Episode(
        episode_id=eid,
        task_name=str(d["task_name"]),
        steps=tuple(steps),
        metadata={str(k): str(v) for k, v in metadata.items()},
    )


def save_episodes(episodes: Iterable[Episode], path: str | Path) -> None:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with path.open("w", encoding="utf-8") as fh:
        for episode in episodes:
            fh.write(json.dumps(episode_to_dict(episode)) + "\n")


def load_episodes(path: str | Path) -> list[Episode]:
    """Load a JSON-Lines episode file.

    Total over its input: any malformed line raises :class:`DatasetError`
    naming the line number and, where known, the episode id and field.
    """
    path = Path(path)
    if not path.exists():
        raise DatasetError(f"episode file not found: {path}")
    episodes: list[Episode] = []
    seen: set[str] = set()
    with path.open("r", encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, start=1):
            if not line.strip():
                continue
            try:
                record = json.loads(line)
            except json.JSONDecodeError as exc:
                raise DatasetError(f"line {lineno}: invalid JSON: {exc}") from exc
            if not isinstance(record, dict):
                raise DatasetError(f"line {lineno}: episode record must be a JSON object")
            try:
                episode = episode_from_dict(record)
            except DatasetError as exc:
                raise DatasetError(f"line {lineno}: {exc}") from exc
            if episode.episode_id in seen:
                raise DatasetError(f"line {lineno}: duplicate episode_id '{episode.episode_id}'")
            seen.add(episode.episode_id)
            episodes.append(episode)
    return episodes


def trace_file_path(traces_dir: str | Path, episode_id: str) -> Path:
    return Path(traces_dir) / f"{episode_id}.json"


def load_trace_entries(traces_dir: str | Path, episode_id: str) -> list[dict[str, Any]]:
    """Read the raw trace entry array for one episode (no schema parsing)."""
    path = trace_file_path(traces_dir, episode_id)
    if not path.exists():
        raise DatasetError(f"episode '{episode_id}': trace file missing: {path}")
    try:
        entries = json.loads(path.read_text(encoding="utf-8"))
    except json.JSONDecodeError as exc:
        raise DatasetError(f"episode '{episode_id}': trace file is not valid JSON: {exc}") from exc
    _require(isinstance(entries, list), f"episode '{episode_id}': trace file must hold a JSON array")
    return entries


def attach_traces(
    episodes: Iterable[Episode],
    traces_dir: str | Path,
    skip_failed: bool = False,
) -> list[Episode]:
    """Attach per-step traces from ``traces_dir/<episode_id>.json`` files.

    Each file must hold a JSON array aligned with the episode's steps.
    Entries carrying only a ``raw`` key mark steps whose teacher output never
    parsed; they raise here unless ``skip_failed`` is set, in which case the
    whole episode is dropped from the result. Attaching the same traces
    twice yields an identical dataset.
    """
    out: list[Episode] = []
    for episode in episodes:
        entries = load_trace_entries(traces_dir, episode.episode_id)
        if len(entries) != len(episode.steps):
            raise DatasetError(
                f"episode '{episode.episode_id}': trace file has {len(entries)} entries "
                f"for {len(episode.steps)} steps"
            )
        traces: list[ReasoningTrace] = []
        failed = False
        for i, entry in enumerate(entries):
            if not isinstance(entry, dict):
                raise DatasetError(f"episode '{episode.episode_id}' step {i}: trace entry must be an object")
            if set(entry.keys()) == {"raw"}:
                if skip_failed:
                    failed = True
                    break
                raise DatasetError(
                    f"episode '{episode.episode_id}' step {i}: trace entry is unparsed raw text"
                )
            try:
                traces.append(ReasoningTrace.from_dict(entry))
            except DatasetError as exc:
                raise DatasetError(f"episode '{episode.episode_id}' step {i}: {exc}") from exc
        if failed:
            continue
        steps = tuple(
            dataclasses.replace(step, trace=trace) for step, trace in zip(episode.steps, traces)
        )
        out.append(Episode(episode.episode_id, episode.task_name, steps, dict(episode.metadata)))
    return out
