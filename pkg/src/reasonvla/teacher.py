"""Reasoning-trace generation: prompt building, teacher backends, and the
parallel annotation workflow that sidecars one trace file per episode."""

from __future__ import annotations

import base64
import concurrent.futures
import json
import os
import re
import time
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any, Sequence

import numpy as np
import requests

from .data_model import Episode, ReasoningTrace, trace_file_path
from .simenv import TaskSpec, WorldState, ground_truth_trace, task_from_instruction, world_from_image

DEFAULT_RETRIES = 3
DEFAULT_BACKOFF_S = 0.5
DEFAULT_TIMEOUT_S = 30.0

SECTION_HEADERS = ("Observation", "Situation Analysis", "Spatial Reasoning", "Task Planning")

PROMPT_TEMPLATE = (
    "You are a robot. Given the images from different angles and instructions, "
    "observe the scene and reason step-by-step about what you see, what each "
    "object is, and what actions might be possible.\n"
    "Instruction: {instruction}\n"
    "Now think carefully and describe:\n"
    "#1 <Observation>: What do you see in the image?\n"
    "#2 <Situation Analysis>: What is happening in the scene, and what is the task?\n"
    "#3 <Spatial Reasoning>: How are the objects arranged, and what spatial "
    "relationships matter for completing the task?\n"
    "#4 <Task Planning>: What are the logical steps to achieve the task, and "
    "what should be the robot's next action?"
)


class TeacherError(RuntimeError):
    """Backend configuration or transport failure."""


class TraceParseError(ValueError):
    """Teacher text did not yield a usable trace; .raw holds the original."""

    def __init__(self, message: str, raw: str):
        super().__init__(message)
        self.raw = raw


@dataclass(frozen=True)
class PromptSpec:
    """A reasoning prompt template and the section headers it asks for."""

    template: str = PROMPT_TEMPLATE
    section_headers: tuple[str, ...] = SECTION_HEADERS

    def __post_init__(self):
        if "{instruction}" not in self.template:
            raise ValueError("prompt template must contain an {instruction} placeholder")
        for header in self.section_headers:
            if f"<{header}>" not in self.template:
                raise ValueError(f"prompt template missing section header <{header}>")

    def render(self, instruction: str) -> str:
        if not instruction or not instruction.strip():
            raise ValueError("instruction must be non-empty")
        # str.replace, not str.format: instructions may contain braces
        return self.template.replace("{instruction}", instruction)


DEFAULT_PROMPT = PromptSpec()


def build_prompt(instruction: str) -> str:
    """Render the canonical reasoning prompt for one instruction."""
    return DEFAULT_PROMPT.render(instruction)


# Tag scanner. Tolerates "#N" prefixes, markdown bold around the tag, spaces or
# underscores inside multi-word names, an optional trailing colon, and LaTeX-style
# escaped underscores (normalized before scanning).
_SECTION_NAMES = {
    "observation": "observation",
    "situation analysis": "situation_analysis",
    "spatial reasoning": "spatial_reasoning",
    "task planning": "task_planning",
    "reasoning": None,  # wrapper tag, carries no content of its own
}
_TAG_RE = re.compile(
    r"(?:#\d+\s*)?(?:\*\*)?<\s*(observation|situation[ _]analysis|spatial[ _]reasoning"
    r"|task[ _]planning|reasoning)\s*>(?:\*\*)?\s*:?",
    re.IGNORECASE,
)
_STEPS_RE = re.compile(r"(?:\*\*)?<\s*logical[ _]steps\s*>(?:\*\*)?\s*:?", re.IGNORECASE)
_SUB_RE = re.compile(r"(?:\*\*)?<\s*sub[ _]action\s*>(?:\*\*)?\s*:?", re.IGNORECASE)
_ITEM_RE = re.compile(r"<\s*\d+\s*>")


def _split_task_planning(body: str) -> tuple[str, tuple[str, ...], str]:
    sub_action = ""
    m = _SUB_RE.search(body)
    if m:
        sub_action = body[m.end() :].strip()
        body = body[: m.start()]
    steps: tuple[str, ...] = ()
    m = _STEPS_RE.search(body)
    if m:
        items = _ITEM_RE.split(body[m.end() :])
        steps = tuple(s.strip() for s in items if s.strip())
        body = body[: m.start()]
    return body.strip(), steps, sub_action


def parse_trace(teacher_text: str) -> ReasoningTrace:
    """Extract a ReasoningTrace from tagged teacher text.

    Raises TraceParseError (carrying the raw text) when any of the four
    section tags is missing or the extracted sections are unusable.
    """
    raw = teacher_text
    text = teacher_text.replace("\\_", "_")
    matches = list(_TAG_RE.finditer(text))
    sections: dict[str, str] = {}
    for i, m in enumerate(matches):
        name = _SECTION_NAMES[m.group(1).lower().replace("_", " ")]
        if name is None or name in sections:
            continue
        end = matches[i + 1].start() if i + 1 < len(matches) else len(text)
        sections[name] = text[m.end() : end].strip()
    missing = [h for h in ("observation", "situation_analysis", "spatial_reasoning", "task_planning") if h not in sections]
    if missing:
        raise TraceParseError(f"missing section tags: {', '.join(missing)}", raw)
    planning, steps, sub_action = _split_task_planning(sections["task_planning"])
    try:
        return ReasoningTrace(
            observation=sections["observation"],
            situation_analysis=sections["situation_analysis"],
            spatial_reasoning=sections["spatial_reasoning"],
            task_planning=planning,
            logical_steps=steps,
            sub_action=sub_action,
        )
    except ValueError as exc:
        raise TraceParseError(f"unusable trace sections: {exc}", raw) from exc


def render_teacher_text(trace: ReasoningTrace, instruction: str) -> str:
    """Format a trace the way a teacher response reads; parse_trace inverts it."""
    planning = trace.task_planning
    if trace.logical_steps:
        items = " ".join(f"<{i}> {s}" for i, s in enumerate(trace.logical_steps, start=1))
        planning = f"{planning} <logical_steps>{items}".lstrip()
    if trace.sub_action:
        planning = f"{planning} <sub_action> {trace.sub_action}"
    return (
        f"Task Instruction: {instruction}\n"
        "<Reasoning>\n"
        f"<Observation>: {trace.observation}\n"
        f"<Situation Analysis>: {trace.situation_analysis}\n"
        f"<Spatial Reasoning>: {trace.spatial_reasoning}\n"
        f"<Task Planning>: {planning}"
    )


def rule_based_generate(world: WorldState, task: TaskSpec) -> str:
    """Deterministic teacher text templated from ground-truth world state."""
    return render_teacher_text(ground_truth_trace(world, task), task.instruction)


class TeacherBackend:
    """Turns (images, instruction, prompt) into reasoning text."""

    name: str = "abstract"
    deterministic: bool = False

    def generate(self, images: Sequence[np.ndarray], instruction: str, prompt: str) -> str:
        raise NotImplementedError


class RuleBasedTeacher(TeacherBackend):
    """Offline stand-in: reconstructs the world from the first view and
    templates the trace that a privileged planner would write."""

    name = "rule_based"
    deterministic = True

    def generate(self, images: Sequence[np.ndarray], instruction: str, prompt: str) -> str:
        if not images:
            raise TeacherError("rule-based teacher needs at least one image")
        task = task_from_instruction(instruction)
        world = world_from_image(np.asarray(images[0]), task)
        return rule_based_generate(world, task)


def _encode_image(image: np.ndarray) -> str:
    grid = np.asarray(image)
    if grid.min() < 0 or grid.max() > 255:
        raise TeacherError("image values must fit in a byte")
    return base64.b64encode(grid.astype(np.uint8).tobytes(order="C")).decode("ascii")


class RemoteTeacher(TeacherBackend):
    """JSON-over-HTTP teacher client.

    POSTs {"prompt", "images", "instruction"} to <url>/generate and expects
    {"text": str} back. Configured explicitly or via TEACHER_URL,
    TEACHER_API_KEY (bearer token), and TEACHER_TIMEOUT_S.
    """

    name = "remote"
    deterministic = False

    def __init__(self, url: str | None = None, api_key: str | None = None, timeout_s: float | None = None):
        self.url = url if url is not None else os.environ.get("TEACHER_URL", "")
        if not self.url:
            raise TeacherError("remote teacher needs a URL (pass url= or set TEACHER_URL)")
        self.api_key = api_key if api_key is not None else os.environ.get("TEACHER_API_KEY", "")
        if timeout_s is None:
            timeout_s = float(os.environ.get("TEACHER_TIMEOUT_S", DEFAULT_TIMEOUT_S))
        self.timeout_s = timeout_s

    def generate(self, images: Sequence[np.ndarray], instruction: str, prompt: str) -> str:
        payload = {
            "prompt": prompt,
            "images": [_encode_image(img) for img in images],
            "instruction": instruction,
        }
        headers = {"Content-Type": "application/json"}
        if self.api_key:
            headers["Authorization"] = f"Bearer {self.api_key}"
        endpoint = self.url.rstrip("/") + "/generate"
        response = requests.post(endpoint, json=payload, headers=headers, timeout=self.timeout_s)
        if response.status_code != 200:
            raise TeacherError(f"teacher server returned HTTP {response.status_code}")
        try:
            text = response.json()["text"]
        except (ValueError, KeyError) as exc:
            raise TeacherError(f"teacher response missing 'text': {exc}") from exc
        if not isinstance(text, str):
            raise TeacherError("teacher response 'text' must be a string")
        return text


@dataclass(frozen=True)
class AnnotationReport:
    """Accounting for one annotation run; annotated + failed == total."""

    episodes_total: int
    steps_total: int
    steps_annotated: int
    steps_failed: int
    failures: tuple[tuple[str, int, str], ...] = field(default_factory=tuple)

    def __post_init__(self):
        if self.steps_annotated + self.steps_failed != self.steps_total:
            raise ValueError("steps_annotated + steps_failed must equal steps_total")

    def to_dict(self) -> dict[str, Any]:
        return {
            "episodes_total": self.episodes_total,
            "steps_total": self.steps_total,
            "steps_annotated": self.steps_annotated,
            "steps_failed": self.steps_failed,
            "failures": [list(f) for f in self.failures],
        }


def _is_complete_file(path: Path, n_steps: int) -> bool:
    """Complete means one parsed-trace entry per step. A file holding failure
    placeholders ({"raw": ...}) is redone whole on the next run."""
    if not path.exists():
        return False
    try:
        entries = json.loads(path.read_text(encoding="utf-8"))
    except (OSError, json.JSONDecodeError):
        return False
    if not isinstance(entries, list) or len(entries) != n_steps:
        return False
    return all(isinstance(e, dict) and "raw" not in e for e in entries)


def _annotate_step(
    backend: TeacherBackend,
    episode: Episode,
    step_index: int,
    retries: int,
    backoff_s: float,
) -> tuple[dict[str, Any], str | None]:
    """Query + parse one step. Returns (entry, failure_reason_or_None)."""
    obs = episode.steps[step_index].observation
    prompt = build_prompt(obs.instruction)
    text: str | None = None
    last_error = "no attempts made"
    for attempt in range(retries):
        try:
            text = backend.generate(obs.images, obs.instruction, prompt)
            break
        except Exception as exc:
            last_error = str(exc) or type(exc).__name__
            if attempt + 1 < retries:
                time.sleep(backoff_s * (2**attempt))
    if text is None:
        return {"raw": ""}, f"backend failed after {retries} attempts: {last_error}"
    try:
        return parse_trace(text).to_dict(), None
    except TraceParseError as exc:
        return {"raw": exc.raw}, f"unparseable response: {exc}"


def annotate_dataset(
    backend: TeacherBackend,
    episodes: Sequence[Episode],
    out_dir: str | Path,
    workers: int = 1,
    retries: int = DEFAULT_RETRIES,
    backoff_s: float = DEFAULT_BACKOFF_S,
) -> AnnotationReport:
    """Annotate every step of every episode, one sidecar JSON file per episode.

    Steps are independent jobs fanned out over a thread pool; each episode's
    file is written once, in step order, after all of its steps return.
    Complete files are skipped entirely, so interrupted runs resume for free.
    Backend exceptions are retried with exponential backoff; a step that
    exhausts its retries (or returns unparseable text) is recorded as a
    failure with its raw text preserved, never silently dropped.
    """
    if workers < 1:
        raise ValueError("workers must be >= 1")
    if retries < 1:
        raise ValueError("retries must be >= 1")
    out_path = Path(out_dir)
    out_path.mkdir(parents=True, exist_ok=True)
    if not os.access(out_path, os.W_OK):
        raise TeacherError(f"out_dir is not writable: {out_path}")

    pending: list[Episode] = []
    steps_total = 0
    steps_annotated = 0
    for episode in episodes:
        steps_total += len(episode.steps)
        if _is_complete_file(trace_file_path(out_path, episode.episode_id), len(episode.steps)):
            steps_annotated += len(episode.steps)  # resumability: skip counts as annotated
        else:
            pending.append(episode)

    steps_failed = 0
    failures: list[tuple[str, int, str]] = []
    with concurrent.futures.ThreadPoolExecutor(max_workers=workers) as pool:
        futures = {
            (ep.episode_id, i): pool.submit(_annotate_step, backend, ep, i, retries, backoff_s)
            for ep in pending
            for i in range(len(ep.steps))
        }
        for episode in pending:
            entries = []
            for i in range(len(episode.steps)):
                entry, failure = futures[(episode.episode_id, i)].result()
                entries.append(entry)
                if failure is None:
                    steps_annotated += 1
                else:
                    steps_failed += 1
                    failures.append((episode.episode_id, i, failure))
            path = trace_file_path(out_path, episode.episode_id)
            path.write_text(json.dumps(entries, indent=2) + "\n", encoding="utf-8")

    return AnnotationReport(
        episodes_total=len(episodes),
        steps_total=steps_total,
        steps_annotated=steps_annotated,
        steps_failed=steps_failed,
        failures=tuple(failures),
    )
