"""Full network assembly: encoder, fusion decoder, uncertainty-guided stage
supervision, total loss, and checkpoint serialization.

The encoder is three conv+ReLU+avgpool stages, each followed by a
mixture-of-expert block; the decoder fuses stages coarse-to-fine through
residual blocks and bilinear upsampling.  During training each decoder
stage additionally feeds an uncertainty-sampled cross-entropy term; at
inference those blocks are skipped entirely and no randomness is consumed.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from typing import Callable, Sequence

import numpy as np

from . import tensor as tt
from .moe import MoMebParams, init_momeb_params, momeb_forward
from .tensor import ShapeError, Tensor, parameter

CHECKPOINT_MAGIC = b"MMOE1\n"
UNCERTAINTY_EPS = 1e-6
N_STAGES = 3


class CheckpointError(ValueError):
    """Malformed or incompatible checkpoint file."""


@dataclass(frozen=True)
class NetSpec:
    """Widths that define a network: input bands, channel width C, SSM state
    dim D, and class count."""

    bands: int
    channels: int
    state_dim: int
    n_class: int

    def __post_init__(self):
        if self.channels % 2 != 0:
            raise ShapeError(f"NetSpec: channel width must be even, got {self.channels}")
        if min(self.bands, self.state_dim, self.n_class) < 1:
            raise ShapeError(f"NetSpec: widths must be positive, got {self}")


@dataclass
class StemParams:
    conv1_w: Tensor
    conv1_b: Tensor
    conv2_w: Tensor
    conv2_b: Tensor
    conv3_w: Tensor
    conv3_b: Tensor

    def named(self, prefix: str):
        return [
            (f"{prefix}.conv1.w", self.conv1_w),
            (f"{prefix}.conv1.b", self.conv1_b),
            (f"{prefix}.conv2.w", self.conv2_w),
            (f"{prefix}.conv2.b", self.conv2_b),
            (f"{prefix}.conv3.w", self.conv3_w),
            (f"{prefix}.conv3.b", self.conv3_b),
        ]


@dataclass
class ResBlockParams:
    conv1_w: Tensor
    conv1_b: Tensor
    conv2_w: Tensor
    conv2_b: Tensor

    def named(self, prefix: str):
        return [
            (f"{prefix}.conv1.w", self.conv1_w),
            (f"{prefix}.conv1.b", self.conv1_b),
            (f"{prefix}.conv2.w", self.conv2_w),
            (f"{prefix}.conv2.b", self.conv2_b),
        ]


@dataclass
class HeadParams:
    w: Tensor  # (K, C, 1, 1)
    b: Tensor  # (K,)

    def named(self, prefix: str):
        return [(f"{prefix}.w", self.w), (f"{prefix}.b", self.b)]


@dataclass
class NetworkParams:
    spec: NetSpec
    stem: StemParams
    momeb: tuple[MoMebParams, MoMebParams, MoMebParams]
    ffb: tuple[ResBlockParams, ResBlockParams, ResBlockParams]
    head: HeadParams

    def named_params(self) -> list[tuple[str, Tensor]]:
        items = self.stem.named("stem")
        for i, block in enumerate(self.momeb, start=1):
            items.extend(block.named(f"momeb{i}"))
        for i, res in enumerate(self.ffb, start=1):
            items.extend(res.named(f"ffb{i}.res"))
        items.extend(self.head.named("head"))
        return items

    def tensors(self) -> list[Tensor]:
        return [t for _, t in self.named_params()]

    def param_count(self) -> int:
        return sum(t.size for t in self.tensors())


def _build_network_params(spec: NetSpec, alloc: Callable[[str, tuple[int, ...]], np.ndarray], dtype) -> NetworkParams:
    """Construct the parameter tree, pulling every array from ``alloc``.

    The same builder serves random initialization and checkpoint loading,
    so the parameter layout cannot drift between the two.
    """

    def p(name, shape):
        arr = alloc(name, shape)
        if arr.shape != shape:
            raise CheckpointError(f"{name}: expected shape {shape}, got {arr.shape}")
        return parameter(arr, dtype=dtype)

    c, d, k_cls, bands = spec.channels, spec.state_dim, spec.n_class, spec.bands
    half = c // 2
    hidden = max(half // 2, 1)

    stem = StemParams(
        p("stem.conv1.w", (c, bands, 3, 3)),
        p("stem.conv1.b", (c,)),
        p("stem.conv2.w", (c, c, 3, 3)),
        p("stem.conv2.b", (c,)),
        p("stem.conv3.w", (c, c, 3, 3)),
        p("stem.conv3.b", (c,)),
    )

    def ssm(prefix, e):
        from .scan import SsmParams

        return SsmParams(
            p(f"{prefix}.a_bar", (d, d)),
            p(f"{prefix}.b_bar", (d, e)),
            p(f"{prefix}.c_out", (e, d)),
        )

    def momeb(prefix):
        from .moe import RouterParams

        return MoMebParams(
            ln1_gamma=p(f"{prefix}.ln1.gamma", (c,)),
            ln1_beta=p(f"{prefix}.ln1.beta", (c,)),
            ln2_gamma=p(f"{prefix}.ln2.gamma", (c,)),
            ln2_beta=p(f"{prefix}.ln2.beta", (c,)),
            spatial=tuple(ssm(f"{prefix}.spatial{j}", half) for j in range(4)),
            spectral_fwd=ssm(f"{prefix}.spectral_fwd", 1),
            spectral_bwd=ssm(f"{prefix}.spectral_bwd", 1),
            router=RouterParams(
                p(f"{prefix}.router.w1", (hidden, half)),
                p(f"{prefix}.router.b1", (hidden,)),
                p(f"{prefix}.router.w2", (4, hidden)),
                p(f"{prefix}.router.b2", (4,)),
            ),
            fuse_w=p(f"{prefix}.fuse.w", (c, c, 1, 1)),
            fuse_b=p(f"{prefix}.fuse.b", (c,)),
            mlp_w1=p(f"{prefix}.mlp1.w", (2 * c, c, 1, 1)),
            mlp_b1=p(f"{prefix}.mlp1.b", (2 * c,)),
            mlp_w2=p(f"{prefix}.mlp2.w", (c, 2 * c, 1, 1)),
            mlp_b2=p(f"{prefix}.mlp2.b", (c,)),
        )

    def res(prefix):
        return ResBlockParams(
            p(f"{prefix}.conv1.w", (c, c, 3, 3)),
            p(f"{prefix}.conv1.b", (c,)),
            p(f"{prefix}.conv2.w", (c, c, 3, 3)),
            p(f"{prefix}.conv2.b", (c,)),
        )

    return NetworkParams(
        spec=spec,
        stem=stem,
        momeb=tuple(momeb(f"momeb{i}") for i in (1, 2, 3)),
        ffb=tuple(res(f"ffb{i}.res") for i in (1, 2, 3)),
        head=HeadParams(p("head.w", (k_cls, c, 1, 1)), p("head.b", (k_cls,))),
    )


def init_network_params(spec: NetSpec, rng: np.random.Generator, dtype=np.float32) -> NetworkParams:
    """He-normal convs with zero biases; LN affine at identity; SSM experts
    per their dedicated initializer."""

    def alloc(name: str, shape: tuple[int, ...]) -> np.ndarray:
        if name.endswith(".b") or name.endswith(".beta") or name.endswith(".b1") or name.endswith(".b2"):
            return np.zeros(shape)
        if name.endswith(".gamma"):
            return np.ones(shape)
        if name.endswith(".a_bar"):
            return 0.9 * np.eye(shape[0]) + rng.normal(0.0, 0.01, shape)
        if name.endswith(".b_bar") or name.endswith(".c_out"):
            return rng.normal(0.0, 1.0 / np.sqrt(spec.state_dim), shape)
        if ".router.w1" in name:
            return rng.normal(0.0, np.sqrt(2.0 / shape[1]), shape)
        if ".router.w2" in name:
            return rng.normal(0.0, np.sqrt(1.0 / shape[1]), shape)
        if name.endswith(".w"):  # conv kernels (C_out, C_in, k, k)
            fan_in = shape[1] * shape[2] * shape[3]
            return rng.normal(0.0, np.sqrt(2.0 / fan_in), shape)
        raise ShapeError(f"init_network_params: no rule for parameter {name}")

    return _build_network_params(spec, alloc, dtype)


# --- encoder / decoder -------------------------------------------------------


def stage_sizes(height: int, width: int) -> list[tuple[int, int]]:
    """Spatial extents after each of the three pooling stages."""
    sizes = []
    h, w = height, width
    for _ in range(N_STAGES):
        h, w = h // 2, w // 2
        sizes.append((h, w))
    return sizes


def extract_features(stem: StemParams, x: Tensor) -> list[Tensor]:
    """Three conv+ReLU+avgpool stages; each halves the spatial extent."""
    if x.ndim != 3:
        raise ShapeError(f"extract_features: expects (B,H,W), got {x.shape}")
    _, h, w = x.shape
    if h < 8 or w < 8:
        raise ShapeError(f"extract_features: scene {h}x{w} too small; the third stage would vanish")
    f1 = tt.avg_pool2(tt.relu(tt.conv2d(x, stem.conv1_w, stem.conv1_b)))
    f2 = tt.avg_pool2(tt.relu(tt.conv2d(f1, stem.conv2_w, stem.conv2_b)))
    f3 = tt.avg_pool2(tt.relu(tt.conv2d(f2, stem.conv3_w, stem.conv3_b)))
    return [f1, f2, f3]


def residual_block(p: ResBlockParams, x: Tensor) -> Tensor:
    """x + Conv2(ReLU(Conv1(ReLU(x))))."""
    y = tt.relu(x)
    y = tt.conv2d(y, p.conv1_w, p.conv1_b)
    y = tt.relu(y)
    y = tt.conv2d(y, p.conv2_w, p.conv2_b)
    return tt.add(x, y)


def ffb(p: ResBlockParams, m_i: Tensor, l_next: Tensor | None = None) -> Tensor:
    """Deepest stage: Res(M_3).  Other stages: M_i + Res(Up(L_{i+1}))."""
    if l_next is None:
        return residual_block(p, m_i)
    _, h, w = m_i.shape
    up = tt.bilinear_upsample(l_next, (h, w))
    return tt.add(m_i, residual_block(p, up))


def classify_head(head: HeadParams, feats: Tensor) -> tuple[Tensor, Tensor]:
    """1x1-conv logits and their per-pixel class softmax."""
    logits = tt.conv2d(feats, head.w, head.b)
    probs = tt.softmax(logits, axis=0)
    return logits, probs


# --- uncertainty-guided stage supervision ------------------------------------


@dataclass
class UncertaintyMap:
    """Per-pixel uncertainty in [0, 1]: -log(P + eps) * P of the max class
    probability P, clamped (the raw value dips just below 0 at P = 1)."""

    u: np.ndarray


@dataclass
class SampleMask:
    """Binary supervision mask with RNG provenance (seed, draw offset)."""

    m: np.ndarray
    seed: int
    draw_offset: int


class MaskRng:
    """Seeded uniform generator; draws are consumed in row-major pixel order
    and counted, so any mask can be re-derived from (seed, offset)."""

    def __init__(self, seed):
        self.seed = seed
        self._gen = np.random.default_rng(seed)
        self.draws = 0

    def uniform(self, shape: tuple[int, int]) -> np.ndarray:
        self.draws += int(np.prod(shape))
        return self._gen.random(shape)


def uncertainty_map(probs: Tensor | np.ndarray) -> UncertaintyMap:
    a = np.asarray(probs.data if isinstance(probs, Tensor) else probs)
    if a.ndim != 3:
        raise ShapeError(f"uncertainty_map: expects (K,h,w) probabilities, got {a.shape}")
    if a.min() < -1e-6 or a.max() > 1 + 1e-6:
        raise ValueError("uncertainty_map: input is not a probability tensor")
    p = a.max(axis=0)
    raw = -np.log(p + UNCERTAINTY_EPS) * p
    return UncertaintyMap(u=np.clip(raw, 0.0, 1.0))


def sample_mask(u: UncertaintyMap, rng: MaskRng) -> SampleMask:
    """Independent per-pixel Bernoulli(U): selected iff draw < U."""
    offset = rng.draws
    r = rng.uniform(u.u.shape)
    return SampleMask(m=(r < u.u).astype(np.uint8), seed=rng.seed, draw_offset=offset)


@dataclass
class StageOutput:
    """One decoder stage's supervision bundle."""

    logits: Tensor
    probs: Tensor
    uncertainty: UncertaintyMap
    mask: SampleMask
    q: np.ndarray  # sampled label map: labels where mask=1, else 0


def uarb(
    l_i: Tensor,
    head: HeadParams,
    y_trn: np.ndarray,
    rng: MaskRng | None,
    target_hw: tuple[int, int],
    frozen_mask: np.ndarray | None = None,
) -> StageOutput:
    """Uncertainty-sampled stage supervision (training only).

    Upsample stage features to scene resolution, classify, derive the
    uncertainty of the detached probabilities, Bernoulli-sample a mask, and
    keep training labels only where the mask fires.  ``frozen_mask``
    replaces the sampling for deterministic gradient checks.
    """
    if rng is None and frozen_mask is None:
        raise RuntimeError("uarb: training rng required (block is omitted at inference)")
    up = tt.bilinear_upsample(l_i, target_hw)
    logits, probs = classify_head(head, up)
    u = uncertainty_map(probs.data)
    if frozen_mask is not None:
        mask = SampleMask(m=np.asarray(frozen_mask, dtype=np.uint8), seed=-1, draw_offset=0)
    else:
        mask = sample_mask(u, rng)
    q = np.where(mask.m != 0, y_trn, 0).astype(y_trn.dtype)
    return StageOutput(logits=logits, probs=probs, uncertainty=u, mask=mask, q=q)


# --- full forward and loss ----------------------------------------------------


@dataclass
class ForwardResult:
    final_logits: Tensor
    final_probs: Tensor
    stages: list[StageOutput] = field(default_factory=list)
    encoder_feats: list[Tensor] = field(default_factory=list)
    fused_feats: list[Tensor] = field(default_factory=list)


def forward_full(
    params: NetworkParams,
    x: Tensor,
    *,
    train: bool,
    topk: int | None = None,
    y_trn: np.ndarray | None = None,
    mask_rng: MaskRng | None = None,
    momeb_on: bool = True,
    uarb_on: bool = True,
    sre_on: bool = True,
    sse_on: bool = True,
    frozen_masks: Sequence[np.ndarray] | None = None,
    parallel: bool = False,
) -> ForwardResult:
    """Run the whole pipeline on one scene.

    Training mode uses dense experts (topk ignored) and, when enabled,
    the uncertainty-sampled stage supervision; inference uses top-k expert
    selection and consumes no randomness.
    """
    _, h, w = x.shape
    effective_topk = None if train else topk
    feats = extract_features(params.stem, x)
    if momeb_on:
        m_stages = [
            momeb_forward(params.momeb[i], feats[i], topk=effective_topk, parallel=parallel, sre_on=sre_on, sse_on=sse_on)
            for i in range(N_STAGES)
        ]
    else:
        m_stages = feats
    l3 = ffb(params.ffb[2], m_stages[2])
    l2 = ffb(params.ffb[1], m_stages[1], l3)
    l1 = ffb(params.ffb[0], m_stages[0], l2)
    fused = [l1, l2, l3]

    final_up = tt.bilinear_upsample(l1, (h, w))
    final_logits, final_probs = classify_head(params.head, final_up)

    stages: list[StageOutput] = []
    if train and uarb_on:
        if y_trn is None:
            raise RuntimeError("forward_full: training labels required when stage supervision is on")
        for i in range(N_STAGES):
            frozen = frozen_masks[i] if frozen_masks is not None else None
            stages.append(uarb(fused[i], params.head, y_trn, mask_rng, (h, w), frozen_mask=frozen))
    return ForwardResult(
        final_logits=final_logits,
        final_probs=final_probs,
        stages=stages,
        encoder_feats=m_stages,
        fused_feats=fused,
    )


def total_loss(
    stages: Sequence[StageOutput],
    gt_labels: np.ndarray,
    train_mask: np.ndarray,
    final_logits: Tensor,
) -> Tensor:
    """Sum of per-stage sampled-label terms plus the final-prediction term,
    all equally weighted; stages with empty masks contribute exactly 0."""
    loss = None
    ones = np.ones(gt_labels.shape, dtype=np.uint8)
    for st in stages:
        term = tt.masked_cross_entropy(st.logits, st.q, ones)
        loss = term if loss is None else tt.add(loss, term)
    final_term = tt.masked_cross_entropy(final_logits, gt_labels, train_mask)
    return final_term if loss is None else tt.add(loss, final_term)


# --- checkpoint io -------------------------------------------------------------


def save_checkpoint(path, params: NetworkParams, extra_meta: dict | None = None) -> None:
    """Versioned binary container: magic, JSON meta line, manifest, payloads.

    Payloads are raw little-endian in manifest order; round-trips are
    bit-exact.
    """
    meta = {
        "version": 1,
        "bands": params.spec.bands,
        "channels": params.spec.channels,
        "state_dim": params.spec.state_dim,
        "n_class": params.spec.n_class,
    }
    if extra_meta:
        meta.update(extra_meta)
    entries = params.named_params()
    with open(path, "wb") as fh:
        fh.write(CHECKPOINT_MAGIC)
        fh.write((json.dumps(meta, sort_keys=True) + "\n").encode("utf-8"))
        fh.write(f"{len(entries)}\n".encode("ascii"))
        for name, t in entries:
            dtype_code = {"float32": "f4", "float64": "f8"}[t.data.dtype.name]
            shape_txt = ",".join(str(s) for s in t.shape)
            fh.write(f"{name} {dtype_code} {shape_txt}\n".encode("ascii"))
        for _, t in entries:
            le = t.data.astype("<" + {"float32": "f4", "float64": "f8"}[t.data.dtype.name], copy=False)
            fh.write(le.tobytes())


def load_checkpoint(path) -> tuple[NetworkParams, dict]:
    with open(path, "rb") as fh:
        blob = fh.read()
    if not blob.startswith(CHECKPOINT_MAGIC):
        raise CheckpointError(f"{path}: bad magic; not a checkpoint file")
    body = blob[len(CHECKPOINT_MAGIC) :]
    try:
        meta_line, rest = body.split(b"\n", 1)
        meta = json.loads(meta_line.decode("utf-8"))
        count_line, rest = rest.split(b"\n", 1)
        n_entries = int(count_line)
    except (ValueError, json.JSONDecodeError) as exc:
        raise CheckpointError(f"{path}: malformed header ({exc})") from exc
    manifest = []
    for _ in range(n_entries):
        try:
            line, rest = rest.split(b"\n", 1)
        except ValueError as exc:
            raise CheckpointError(f"{path}: truncated manifest") from exc
        name, dtype_code, shape_txt = line.decode("ascii").split(" ")
        shape = tuple(int(s) for s in shape_txt.split(",")) if shape_txt else ()
        manifest.append((name, dtype_code, shape))
    arrays: dict[str, np.ndarray] = {}
    offset = 0
    for name, dtype_code, shape in manifest:
        dt = np.dtype("<" + dtype_code)
        nbytes = dt.itemsize * int(np.prod(shape, dtype=np.int64)) if shape else dt.itemsize
        chunk = rest[offset : offset + nbytes]
        if len(chunk) != nbytes:
            raise CheckpointError(f"{path}: truncated payload at {name}")
        arrays[name] = np.frombuffer(chunk, dtype=dt).reshape(shape).astype(np.dtype(dtype_code), copy=True)
        offset += nbytes
    if offset != len(rest):
        raise CheckpointError(f"{path}: {len(rest) - offset} trailing bytes after payloads")

    spec = NetSpec(
        bands=int(meta["bands"]),
        channels=int(meta["channels"]),
        state_dim=int(meta["state_dim"]),
        n_class=int(meta["n_class"]),
    )
    dtype = np.float32 if manifest and manifest[0][1] == "f4" else np.float64

    def alloc(name: str, shape: tuple[int, ...]) -> np.ndarray:
        if name not in arrays:
            raise CheckpointError(f"{path}: missing parameter {name}")
        return arrays[name]

    params = _build_network_params(spec, alloc, dtype)
    built = {name for name, _ in params.named_params()}
    extra = set(arrays) - built
    if extra:
        raise CheckpointError(f"{path}: unexpected parameters {sorted(extra)}")
    return params, meta
