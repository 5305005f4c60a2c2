"""Top-k fusion of recorded attention onto the image patch grid, plus
heatmap export for qualitative inspection.

For one generated token the record holds the attention it paid to every
source position in every (layer, head). Fusion keeps the k strongest of
those candidates per source position and reduces them with max or mean.
Restricting the fused scores to image positions and reshaping row-major
per view gives a patch-aligned saliency grid; min-max normalization
makes grids comparable across targets. Everything here is pure over the
record, so per-target exports can run concurrently.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
import torch

from .model import AttentionRecord
from .tokenizer import Segment

DEFAULT_TOP_K = 5
FUSION_METHODS = ("max", "mean")

# Overlay constants: each patch becomes a scale x scale pixel block, the
# base image is dimmed by a fixed alpha and pure red is mixed in
# proportionally to the fused score.
DEFAULT_CELL_SCALE = 16
OVERLAY_ALPHA = 0.5
_HIGHLIGHT = np.array([255.0, 0.0, 0.0])


class VizError(ValueError):
    """Raised for bad fusion arguments or mismatched grids."""


def _build_palette() -> np.ndarray:
    """RGB lookup for base images. The low entries match the simulator
    palette; everything above falls back to a gray ramp."""
    table = np.zeros((256, 3), dtype=np.float64)
    for v in range(256):
        table[v] = (v, v, v)
    table[0] = (238, 238, 238)  # empty floor
    table[1] = (90, 150, 230)   # open gripper
    table[2] = (30, 80, 170)    # closed gripper
    table[3] = (150, 110, 70)   # drawer
    table[4] = (200, 70, 60)    # can
    table[5] = (235, 150, 40)   # orange
    table[6] = (130, 130, 140)  # spoon
    table[7] = (90, 170, 90)    # block
    return table


_PALETTE_RGB = _build_palette()


@dataclass(frozen=True)
class FusedAttentionMap:
    """One target token's fused attention, aligned to the image patches.

    grid is (views, P, P), min-max normalized to [0, 1]; cell (i, j) of a
    view corresponds to patch (i, j) of that view. A constant map cannot
    be normalized meaningfully, so it becomes all zeros and is flagged
    flat. text_attention holds the raw (pre-normalization) fused scores
    at instruction and reasoning positions, in sequence order.
    """

    grid: np.ndarray
    target_token_index: int
    k: int
    method: str
    text_attention: np.ndarray
    flat: bool
    normalization: str = field(default="min-max")

    def __post_init__(self):
        if self.grid.ndim != 3 or self.grid.shape[1] != self.grid.shape[2]:
            raise VizError("fused grid must be (views, P, P)")
        if self.grid.size and (self.grid.min() < 0.0 or self.grid.max() > 1.0):
            raise VizError("fused grid must be normalized to [0, 1]")

    @property
    def n_views(self) -> int:
        return int(self.grid.shape[0])

    @property
    def patch_grid(self) -> int:
        return int(self.grid.shape[1])

    def to_dict(self) -> dict:
        # single-view grids serialize as a bare P x P table
        grid = self.grid[0] if self.n_views == 1 else self.grid
        return {
            "target": self.target_token_index,
            "k": self.k,
            "method": self.method,
            "grid": grid.tolist(),
            "text_attention": self.text_attention.tolist(),
            "flat": self.flat,
        }


def topk_aggregate(stack, k: int, method: str = "max") -> torch.Tensor:
    """Reduce a (layer*head, sources) score stack to one score per source:
    keep the k largest candidates per source position, then take their max
    or mean."""
    scores = torch.as_tensor(stack)
    if scores.ndim != 2:
        raise VizError(f"expected a (layer*head, sources) stack, got shape {tuple(scores.shape)}")
    n_candidates = scores.shape[0]
    if not 1 <= k <= n_candidates:
        raise VizError(f"k={k} out of range for {n_candidates} layer-head candidates")
    top_vals, _ = torch.topk(scores, k=k, dim=0)
    if method == "max":
        return top_vals.max(dim=0).values
    if method == "mean":
        return top_vals.mean(dim=0)
    raise VizError(f"unsupported fusion method {method!r}, expected one of {FUSION_METHODS}")


def fuse_attention_map(
    record: AttentionRecord,
    target_token_indices: list[int],
    k: int = DEFAULT_TOP_K,
    method: str = "max",
) -> list[FusedAttentionMap]:
    """Fuse each target token's attention over all layers and heads and
    map it onto the image patch grid (one map per target)."""
    p = record.patch_grid
    image_pos = np.flatnonzero(record.segments == int(Segment.IMAGE))
    if image_pos.size != record.n_views * p * p:
        raise VizError(
            f"record holds {image_pos.size} image positions, expected {record.n_views * p * p}")
    text_mask = (record.segments == int(Segment.INSTRUCTION)) | (
        record.segments == int(Segment.REASONING))
    text_pos = np.flatnonzero(text_mask)

    maps = []
    for target in target_token_indices:
        if not 0 <= target < record.length:
            raise VizError(
                f"target {target} outside recorded range [0, {record.length})")
        # (L, H, sources) -> (L*H, sources): what this token attended to
        rows = record.weights[:, :, target, :].reshape(-1, record.length)
        fused = topk_aggregate(rows, k=k, method=method).to(torch.float64).numpy()
        image_scores = fused[image_pos]
        lo, hi = image_scores.min(), image_scores.max()
        flat = not hi > lo
        normalized = np.zeros_like(image_scores) if flat else (image_scores - lo) / (hi - lo)
        maps.append(FusedAttentionMap(
            grid=normalized.reshape(record.n_views, p, p),
            target_token_index=int(target),
            k=k,
            method=method,
            text_attention=fused[text_pos],
            flat=flat,
        ))
    return maps


def _render_overlay(fmap: FusedAttentionMap, base: np.ndarray, scale: int) -> np.ndarray:
    """Blend the dimmed base image with red in proportion to the fused
    score; views side by side. Returns (H, W, 3) uint8."""
    rgb = _PALETTE_RGB[base]  # (V, P, P, 3)
    blend = OVERLAY_ALPHA * rgb + (1.0 - OVERLAY_ALPHA) * fmap.grid[..., None] * _HIGHLIGHT
    pixels = np.rint(blend).clip(0, 255).astype(np.uint8)
    # (V, P, P, 3) -> (P, V*P, 3), then scale each cell to a pixel block
    strip = np.concatenate(list(pixels), axis=1)
    return strip.repeat(scale, axis=0).repeat(scale, axis=1)


def _write_ppm(path: Path, pixels: np.ndarray) -> None:
    height, width, _ = pixels.shape
    with open(path, "wb") as fh:
        fh.write(f"P6\n{width} {height}\n255\n".encode("ascii"))
        fh.write(pixels.tobytes())


def export_heatmap(
    fmap: FusedAttentionMap,
    base_image: np.ndarray,
    out_path,
    scale: int = DEFAULT_CELL_SCALE,
) -> tuple[Path, Path]:
    """Write the raw map as JSON and a binary pixmap overlay.

    out_path is a stem: ".json" and ".ppm" are appended. base_image is
    the P x P grid the map was recorded over ((views, P, P) when the map
    covers several views). Returns the two paths written.
    """
    if scale < 1:
        raise VizError("scale must be at least 1")
    base = np.asarray(base_image)
    if base.ndim == 2:
        base = base[None]
    expected = (fmap.n_views, fmap.patch_grid, fmap.patch_grid)
    if base.shape != expected:
        raise VizError(f"base image shape {base.shape} does not match the {expected} grid")
    if base.min() < 0 or base.max() > 255:
        raise VizError("base image values must lie in [0, 255]")

    out = Path(out_path)
    out.parent.mkdir(parents=True, exist_ok=True)
    json_path = out.parent / (out.name + ".json")
    ppm_path = out.parent / (out.name + ".ppm")
    json_path.write_text(json.dumps(fmap.to_dict()) + "\n")
    _write_ppm(ppm_path, _render_overlay(fmap, base.astype(np.int64), scale))
    return json_path, ppm_path
