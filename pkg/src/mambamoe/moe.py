"""Mixture-of-Mamba-expert block: routed spatial scans, shared spectral scans.

The block wraps a split/expert/concat/fuse core in the usual transformer
skeleton: LN -> experts -> residual -> LN -> MLP -> residual.  Four spatial
experts (one per scan direction) are combined with softmax router weights;
at inference only the top-k experts are evaluated.  Two spectral experts
are always on.
"""

from __future__ import annotations

import threading
from dataclasses import dataclass

import numpy as np

from . import tensor as tt
from .scan import (
    SPATIAL_DIRECTIONS,
    ScanDirection,
    SsmParams,
    init_ssm_params,
    spatial_expert_forward,
    spectral_bidirectional,
)
from .tensor import ShapeError, Tensor, parameter

N_SPATIAL_EXPERTS = 4

# expert index -> scan direction is frozen so weight dumps are comparable
# across runs: 0=TL_BR, 1=BR_TL (horizontal pair), 2=TR_BL, 3=BL_TR (vertical pair)
HORIZONTAL_EXPERTS = (0, 1)
VERTICAL_EXPERTS = (2, 3)


class ExpertEvalCounter:
    """Counts spatial-expert scan evaluations; thread-safe for parallel mode."""

    def __init__(self):
        self._lock = threading.Lock()
        self.count = 0

    def reset(self) -> None:
        with self._lock:
            self.count = 0

    def increment(self) -> None:
        with self._lock:
            self.count += 1


EXPERT_EVALS = ExpertEvalCounter()


@dataclass
class RouterParams:
    """Two-layer gate: pooled features -> hidden (ReLU) -> 4 expert logits."""

    w1: Tensor
    b1: Tensor
    w2: Tensor
    b2: Tensor

    def __post_init__(self):
        if self.w2.shape[0] != N_SPATIAL_EXPERTS:
            raise ShapeError(f"RouterParams: output logits must be {N_SPATIAL_EXPERTS}, got {self.w2.shape[0]}")

    @property
    def in_dim(self) -> int:
        return self.w1.shape[1]

    def named(self, prefix: str):
        return [
            (f"{prefix}.w1", self.w1),
            (f"{prefix}.b1", self.b1),
            (f"{prefix}.w2", self.w2),
            (f"{prefix}.b2", self.b2),
        ]


def init_router_params(channels_half: int, rng: np.random.Generator, dtype=np.float32) -> RouterParams:
    hidden = max(channels_half // 2, 1)
    w1 = rng.normal(0.0, np.sqrt(2.0 / channels_half), (hidden, channels_half))
    w2 = rng.normal(0.0, np.sqrt(1.0 / hidden), (N_SPATIAL_EXPERTS, hidden))
    return RouterParams(
        parameter(w1, dtype=dtype),
        parameter(np.zeros(hidden), dtype=dtype),
        parameter(w2, dtype=dtype),
        parameter(np.zeros(N_SPATIAL_EXPERTS), dtype=dtype),
    )


@dataclass
class MoMebParams:
    """Full parameter set of one mixture-of-Mamba-expert block."""

    ln1_gamma: Tensor
    ln1_beta: Tensor
    ln2_gamma: Tensor
    ln2_beta: Tensor
    spatial: tuple[SsmParams, SsmParams, SsmParams, SsmParams]
    spectral_fwd: SsmParams
    spectral_bwd: SsmParams
    router: RouterParams
    fuse_w: Tensor  # (C, C, 1, 1)
    fuse_b: Tensor
    mlp_w1: Tensor  # (2C, C, 1, 1)
    mlp_b1: Tensor
    mlp_w2: Tensor  # (C, 2C, 1, 1)
    mlp_b2: Tensor

    @property
    def channels(self) -> int:
        return self.ln1_gamma.shape[0]

    def named(self, prefix: str):
        items = [
            (f"{prefix}.ln1.gamma", self.ln1_gamma),
            (f"{prefix}.ln1.beta", self.ln1_beta),
            (f"{prefix}.ln2.gamma", self.ln2_gamma),
            (f"{prefix}.ln2.beta", self.ln2_beta),
        ]
        for j, expert in enumerate(self.spatial):
            items.extend(expert.named(f"{prefix}.spatial{j}"))
        items.extend(self.spectral_fwd.named(f"{prefix}.spectral_fwd"))
        items.extend(self.spectral_bwd.named(f"{prefix}.spectral_bwd"))
        items.extend(self.router.named(f"{prefix}.router"))
        items.extend(
            [
                (f"{prefix}.fuse.w", self.fuse_w),
                (f"{prefix}.fuse.b", self.fuse_b),
                (f"{prefix}.mlp1.w", self.mlp_w1),
                (f"{prefix}.mlp1.b", self.mlp_b1),
                (f"{prefix}.mlp2.w", self.mlp_w2),
                (f"{prefix}.mlp2.b", self.mlp_b2),
            ]
        )
        return items


def init_momeb_params(channels: int, state_dim: int, rng: np.random.Generator, dtype=np.float32) -> MoMebParams:
    if channels % 2 != 0:
        raise ShapeError(f"init_momeb_params: channel width must be even, got {channels}")
    half = channels // 2

    def conv_init(c_out, c_in, k):
        std = np.sqrt(2.0 / (c_in * k * k))
        return parameter(rng.normal(0.0, std, (c_out, c_in, k, k)), dtype=dtype)

    return MoMebParams(
        ln1_gamma=parameter(np.ones(channels), dtype=dtype),
        ln1_beta=parameter(np.zeros(channels), dtype=dtype),
        ln2_gamma=parameter(np.ones(channels), dtype=dtype),
        ln2_beta=parameter(np.zeros(channels), dtype=dtype),
        spatial=tuple(init_ssm_params(state_dim, half, rng, dtype=dtype) for _ in range(N_SPATIAL_EXPERTS)),
        spectral_fwd=init_ssm_params(state_dim, 1, rng, dtype=dtype),
        spectral_bwd=init_ssm_params(state_dim, 1, rng, dtype=dtype),
        router=init_router_params(half, rng, dtype=dtype),
        fuse_w=conv_init(channels, channels, 1),
        fuse_b=parameter(np.zeros(channels), dtype=dtype),
        mlp_w1=conv_init(2 * channels, channels, 1),
        mlp_b1=parameter(np.zeros(2 * channels), dtype=dtype),
        mlp_w2=conv_init(channels, 2 * channels, 1),
        mlp_b2=parameter(np.zeros(channels), dtype=dtype),
    )


def route(router: RouterParams, x_spa: Tensor) -> Tensor:
    """Router weights for one feature map: pool -> MLP -> softmax over 4.

    One weight vector per map (global average pooling first), so skipping
    an unselected expert skips its whole directional scan.
    """
    if x_spa.shape[0] != router.in_dim:
        raise ShapeError(f"route: input channels {x_spa.shape[0]} != router width {router.in_dim}")
    pooled = tt.spatial_mean(x_spa)
    hidden = tt.relu(tt.add(tt.matmul(router.w1, pooled), router.b1))
    logits = tt.add(tt.matmul(router.w2, hidden), router.b2)
    return tt.softmax(logits, axis=0)


def expert_weight_records(weights: Tensor | np.ndarray) -> list[dict]:
    """Weights as (expert id, direction, orientation, weight) records."""
    w = np.asarray(weights.data if isinstance(weights, Tensor) else weights, dtype=np.float64)
    return [
        {
            "expert": j,
            "direction": SPATIAL_DIRECTIONS[j].name,
            "orientation": SPATIAL_DIRECTIONS[j].orientation,
            "weight": float(w[j]),
        }
        for j in range(N_SPATIAL_EXPERTS)
    ]


def topk_select(weights: np.ndarray, k: int) -> list[int]:
    """Indices of the k largest weights; ties go to the lower expert index."""
    if not 1 <= k <= N_SPATIAL_EXPERTS:
        raise ValueError(f"topk_select: k must be in [1, {N_SPATIAL_EXPERTS}], got {k}")
    order = np.lexsort((np.arange(len(weights)), -np.asarray(weights)))
    return sorted(int(i) for i in order[:k])


def sre_forward(
    experts: tuple[SsmParams, ...],
    router: RouterParams,
    x_spa: Tensor,
    topk: int | None = None,
    parallel: bool = False,
) -> Tensor:
    """Weighted combination of directional scan experts.

    topk=None (or 4) runs all experts weighted by the router (training
    mode).  With topk=k < 4 only the selected experts are evaluated and
    their weights are renormalized to sum to one.  k=4 intentionally takes
    the dense path: the weights already sum to one, and skipping the
    renormalization keeps the result bit-identical to dense mode.
    """
    weights = route(router, x_spa)

    def eval_expert(j: int):
        EXPERT_EVALS.increment()
        return spatial_expert_forward(experts[j], x_spa, SPATIAL_DIRECTIONS[j])

    if topk is None or topk == N_SPATIAL_EXPERTS:
        selected = list(range(N_SPATIAL_EXPERTS))
        if parallel:
            outputs = tt.parallel_forward([lambda j=j: eval_expert(j) for j in selected])
        else:
            outputs = [eval_expert(j) for j in selected]
        acc = None
        for j, out_j in zip(selected, outputs):
            term = tt.scale_by(out_j, tt.element(weights, j))
            acc = term if acc is None else tt.add(acc, term)
        return acc

    selected = topk_select(weights.data, topk)
    if parallel:
        outputs = tt.parallel_forward([lambda j=j: eval_expert(j) for j in selected])
    else:
        outputs = [eval_expert(j) for j in selected]
    total = None
    picked = {}
    for j in selected:
        picked[j] = tt.element(weights, j)
        total = picked[j] if total is None else tt.add(total, picked[j])
    acc = None
    for j, out_j in zip(selected, outputs):
        term = tt.scale_by(out_j, tt.div(picked[j], total))
        acc = term if acc is None else tt.add(acc, term)
    return acc


def sse_forward(fwd: SsmParams, bwd: SsmParams, x_spe: Tensor) -> Tensor:
    return spectral_bidirectional(fwd, bwd, x_spe)


def dssem_forward(
    p: MoMebParams,
    x_norm: Tensor,
    topk: int | None = None,
    parallel: bool = False,
    sre_on: bool = True,
    sse_on: bool = True,
) -> Tensor:
    """Split channels, run spatial/spectral experts, concat, fuse with 1x1 conv.

    The first half of the channels is the spatial view, the second half the
    spectral view; a disabled expert branch passes its view through
    unchanged (ablation switch).
    """
    if x_norm.shape[0] % 2 != 0:
        raise ShapeError(f"dssem_forward: channel width must be even, got {x_norm.shape[0]}")
    x_spa, x_spe = tt.split(x_norm, 2, axis=0)
    spa_out = sre_forward(p.spatial, p.router, x_spa, topk=topk, parallel=parallel) if sre_on else x_spa
    spe_out = sse_forward(p.spectral_fwd, p.spectral_bwd, x_spe) if sse_on else x_spe
    return tt.conv2d(tt.concat([spa_out, spe_out], axis=0), p.fuse_w, p.fuse_b)


def momeb_forward(
    p: MoMebParams,
    f: Tensor,
    topk: int | None = None,
    parallel: bool = False,
    sre_on: bool = True,
    sse_on: bool = True,
) -> Tensor:
    """LN -> DSSEM -> residual -> LN -> MLP -> residual."""
    x_norm = tt.layer_norm(f, p.ln1_gamma, p.ln1_beta)
    f_hat = dssem_forward(p, x_norm, topk=topk, parallel=parallel, sre_on=sre_on, sse_on=sse_on)
    g = tt.add(f, f_hat)
    g_norm = tt.layer_norm(g, p.ln2_gamma, p.ln2_beta)
    m = tt.conv2d(g_norm, p.mlp_w1, p.mlp_b1)
    m = tt.relu(m)
    m = tt.conv2d(m, p.mlp_w2, p.mlp_b2)
    return tt.add(g, m)
