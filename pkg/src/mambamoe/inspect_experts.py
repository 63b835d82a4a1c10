"""Router-weight and expert-response inspection for a trained model.

Two views are reported per scene:

* per-stage router weights: the gate's softmax over the four directions for
  that stage's feature map (one weight vector per map);
* per-class expert response shares at the finest stage: each expert's
  output magnitude at a pixel, normalized across experts, averaged over the
  pixels of one class.  A scan direction aligned with a class's spatial
  structure accumulates more state along its runs, so its response share
  rises on that class; this is what makes stripe orientation visible.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .data import HsiScene, normalize_scene
from .moe import HORIZONTAL_EXPERTS, N_SPATIAL_EXPERTS, VERTICAL_EXPERTS, route
from .network import NetworkParams, extract_features
from .scan import SPATIAL_DIRECTIONS, spatial_expert_forward
from .tensor import Tensor, layer_norm, split


@dataclass
class ClassExpertRow:
    class_id: int
    class_name: str
    shares: np.ndarray  # (4,) mean normalized response magnitudes
    pixels: int

    @property
    def vertical_sum(self) -> float:
        return float(sum(self.shares[j] for j in VERTICAL_EXPERTS))

    @property
    def horizontal_sum(self) -> float:
        return float(sum(self.shares[j] for j in HORIZONTAL_EXPERTS))


@dataclass
class InspectReport:
    stage_weights: list[np.ndarray]  # router weights per stage, each (4,)
    class_rows: list[ClassExpertRow]

    def format(self) -> str:
        names = [d.name for d in SPATIAL_DIRECTIONS]
        tags = [d.orientation[:1] for d in SPATIAL_DIRECTIONS]
        header = "  ".join(f"{n}({t})" for n, t in zip(names, tags))
        lines = [f"{'':24s}  {header}"]
        for i, w in enumerate(self.stage_weights, start=1):
            cells = "  ".join(f"{v:10.6f}" for v in w)
            lines.append(f"stage {i} router weights   {cells}")
        lines.append("per-class stage-1 expert response shares:")
        for row in self.class_rows:
            cells = "  ".join(f"{v:10.6f}" for v in row.shares)
            lines.append(
                f"  class {row.class_id} {row.class_name:<14s} {cells}"
                f"   [vertical {row.vertical_sum:.6f} vs horizontal {row.horizontal_sum:.6f}]"
            )
        return "\n".join(lines)


def downsample_labels(labels: np.ndarray, factor: int = 2) -> np.ndarray:
    """Majority label of each factor x factor block (ties to the lower id,
    unlabeled pixels ignored unless the block is entirely unlabeled)."""
    h, w = labels.shape
    h2, w2 = h // factor, w // factor
    out = np.zeros((h2, w2), dtype=labels.dtype)
    max_id = int(labels.max(initial=0))
    for r in range(h2):
        for c in range(w2):
            block = labels[r * factor : (r + 1) * factor, c * factor : (c + 1) * factor].ravel()
            counts = np.bincount(block, minlength=max_id + 1)
            counts[0] = 0
            out[r, c] = counts.argmax() if counts.sum() else 0
    return out


def stage1_expert_shares(params: NetworkParams, x: Tensor, sre_on: bool = True) -> np.ndarray:
    """Per-pixel normalized expert response magnitudes at stage 1: (4, h1, w1)."""
    feats = extract_features(params.stem, x)
    block = params.momeb[0]
    x_norm = layer_norm(feats[0], block.ln1_gamma, block.ln1_beta)
    x_spa, _ = split(x_norm, 2, axis=0)
    mags = []
    for j in range(N_SPATIAL_EXPERTS):
        out_j = spatial_expert_forward(block.spatial[j], x_spa, SPATIAL_DIRECTIONS[j])
        mags.append(np.sqrt((out_j.data.astype(np.float64) ** 2).sum(axis=0)))
    mags = np.stack(mags)  # (4, h1, w1)
    total = mags.sum(axis=0)
    total[total == 0] = 1.0
    return mags / total


def inspect_expert_weights(
    params: NetworkParams,
    scene: HsiScene,
    momeb_on: bool = True,
    sre_on: bool = True,
    sse_on: bool = True,
) -> InspectReport:
    x = normalize_scene(scene)
    feats = extract_features(params.stem, x)
    stage_weights = []
    for i in range(3):
        block = params.momeb[i]
        x_norm = layer_norm(feats[i], block.ln1_gamma, block.ln1_beta)
        x_spa, _ = split(x_norm, 2, axis=0)
        stage_weights.append(route(block.router, x_spa).data.astype(np.float64))

    shares = stage1_expert_shares(params, x, sre_on=sre_on)
    labels_s1 = downsample_labels(scene.labels.astype(np.int64))
    rows = []
    for cls in range(1, scene.header.n_class + 1):
        sel = labels_s1 == cls
        if not sel.any():
            continue
        rows.append(
            ClassExpertRow(
                class_id=cls,
                class_name=scene.header.class_names[cls - 1],
                shares=shares[:, sel].mean(axis=1),
                pixels=int(sel.sum()),
            )
        )
    return InspectReport(stage_weights=stage_weights, class_rows=rows)
