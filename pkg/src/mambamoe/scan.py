"""Directional sequence construction and the shared linear state-space scan.

Spatial feature maps are flattened along one of four frozen scan orders,
pushed through the recurrence

    h_t = A_bar h_{t-1} + B_bar f_t,    y_t = C_out h_t + f_t,    h_0 = 0,

and folded back onto the grid.  Spectral experts run the same recurrence
along the band axis with scalar tokens (E = 1), batched over all pixels and
sharing one parameter set across the scene.
"""

from __future__ import annotations

from dataclasses import dataclass
from enum import Enum
from functools import lru_cache

import numpy as np

from .tensor import ShapeError, Tensor, custom_op, parameter


class ScanDirection(Enum):
    """Frozen scan orders.

    TL_BR sweeps row-major (left-to-right along each row, rows top-down);
    TR_BL sweeps column-major (top-to-bottom along each column, columns
    right-to-left).  BR_TL and BL_TR are their exact sequence reversals.
    The row-major pair therefore traverses the grid horizontally and the
    column-major pair vertically, which is what lets stripe-like structure
    excite one pair more than the other.  SPEC_FWD/SPEC_BWD order the band
    axis of spectral token sequences.
    """

    TL_BR = "tl_br"
    BR_TL = "br_tl"
    TR_BL = "tr_bl"
    BL_TR = "bl_tr"
    SPEC_FWD = "spec_fwd"
    SPEC_BWD = "spec_bwd"

    @property
    def is_spatial(self) -> bool:
        return self in _SPATIAL

    @property
    def orientation(self) -> str:
        if self in (ScanDirection.TL_BR, ScanDirection.BR_TL):
            return "horizontal"
        if self in (ScanDirection.TR_BL, ScanDirection.BL_TR):
            return "vertical"
        return "spectral"


_SPATIAL = (ScanDirection.TL_BR, ScanDirection.BR_TL, ScanDirection.TR_BL, ScanDirection.BL_TR)
SPATIAL_DIRECTIONS = _SPATIAL


@lru_cache(maxsize=None)
def scan_order(direction: ScanDirection, h: int, w: int) -> np.ndarray:
    """Flat row-major grid indices in visit order; a bijection on h*w."""
    if direction is ScanDirection.TL_BR:
        return np.arange(h * w, dtype=np.int64)
    if direction is ScanDirection.BR_TL:
        return np.arange(h * w, dtype=np.int64)[::-1].copy()
    if direction is ScanDirection.TR_BL:
        cols = np.arange(w - 1, -1, -1, dtype=np.int64)
        return (np.arange(h, dtype=np.int64)[None, :] * w + cols[:, None]).reshape(-1)
    if direction is ScanDirection.BL_TR:
        return scan_order(ScanDirection.TR_BL, h, w)[::-1].copy()
    raise ShapeError(f"scan_order: {direction} is not a spatial direction")


def flatten_spatial(x: Tensor, direction: ScanDirection) -> Tensor:
    """Reorder a (E,h,w) map into a (h*w, E) token sequence."""
    if not direction.is_spatial:
        raise ShapeError(f"flatten_spatial: {direction} is not a spatial direction")
    if x.ndim != 3:
        raise ShapeError(f"flatten_spatial: expects (E,h,w), got {x.shape}")
    e, h, w = x.shape
    order = scan_order(direction, h, w)
    out = np.ascontiguousarray(x.data.reshape(e, h * w)[:, order].T)

    def bwd(g):
        dflat = np.empty((e, h * w), dtype=g.dtype)
        dflat[:, order] = g.T
        return (dflat.reshape(e, h, w),)

    return custom_op("flatten_spatial", (x,), out, bwd)


def unflatten_spatial(seq: Tensor, direction: ScanDirection, h: int, w: int) -> Tensor:
    """Exact inverse of flatten_spatial."""
    if not direction.is_spatial:
        raise ShapeError(f"unflatten_spatial: {direction} is not a spatial direction")
    if seq.ndim != 2 or seq.shape[0] != h * w:
        raise ShapeError(f"unflatten_spatial: sequence {seq.shape} does not cover a {h}x{w} grid")
    t, e = seq.shape
    order = scan_order(direction, h, w)
    flat = np.empty((e, h * w), dtype=seq.data.dtype)
    flat[:, order] = seq.data.T

    def bwd(g):
        return (np.ascontiguousarray(g.reshape(e, h * w)[:, order].T),)

    return custom_op("unflatten_spatial", (seq,), flat.reshape(e, h, w), bwd)


@dataclass
class SsmParams:
    """Trainable matrices of one scan expert."""

    a_bar: Tensor  # (D, D) state transition
    b_bar: Tensor  # (D, E) input projection
    c_out: Tensor  # (E, D) output projection

    def __post_init__(self):
        d = self.a_bar.shape[0]
        if self.a_bar.shape != (d, d):
            raise ShapeError(f"SsmParams: a_bar must be square, got {self.a_bar.shape}")
        if self.b_bar.shape[0] != d or self.c_out.shape[1] != d:
            raise ShapeError(
                f"SsmParams: inconsistent state dim across a_bar {self.a_bar.shape}, "
                f"b_bar {self.b_bar.shape}, c_out {self.c_out.shape}"
            )
        if self.b_bar.shape[1] != self.c_out.shape[0]:
            raise ShapeError(
                f"SsmParams: token width differs between b_bar {self.b_bar.shape} and c_out {self.c_out.shape}"
            )

    @property
    def state_dim(self) -> int:
        return self.a_bar.shape[0]

    @property
    def embed_dim(self) -> int:
        return self.b_bar.shape[1]

    def named(self, prefix: str):
        return [(f"{prefix}.a_bar", self.a_bar), (f"{prefix}.b_bar", self.b_bar), (f"{prefix}.c_out", self.c_out)]


def init_ssm_params(state_dim: int, embed_dim: int, rng: np.random.Generator, dtype=np.float32) -> SsmParams:
    """A_bar = 0.9 I + N(0, 0.01^2); B_bar, C_out ~ N(0, (1/sqrt(D))^2).

    Keeps the spectral radius of A_bar below 1 at initialization so long
    scans stay stable.
    """
    a = 0.9 * np.eye(state_dim) + rng.normal(0.0, 0.01, (state_dim, state_dim))
    b = rng.normal(0.0, 1.0 / np.sqrt(state_dim), (state_dim, embed_dim))
    c = rng.normal(0.0, 1.0 / np.sqrt(state_dim), (embed_dim, state_dim))
    return SsmParams(parameter(a, dtype=dtype), parameter(b, dtype=dtype), parameter(c, dtype=dtype))


def spectral_radius_estimate(a_bar: Tensor | np.ndarray, iters: int = 100, seed: int = 0) -> float:
    """Power-iteration estimate of the spectral radius (diagnostic only)."""
    a = np.asarray(a_bar.data if isinstance(a_bar, Tensor) else a_bar, dtype=np.float64)
    rng = np.random.default_rng(seed)
    v = rng.normal(size=a.shape[0])
    v /= np.linalg.norm(v)
    rho = 0.0
    for _ in range(iters):
        av = a @ v
        norm = np.linalg.norm(av)
        if norm == 0.0:
            return 0.0
        rho = norm
        v = av / norm
    return float(rho)


def ssm_recurrence(params: SsmParams, seq: Tensor) -> Tensor:
    """Run the linear recurrence over a token sequence.

    seq is (T, E) or, for batched per-pixel scans, (T, E, N); the output has
    the same shape.  Forward states are kept for the reverse sweep, which
    propagates gradients through time into A_bar, B_bar, C_out and the
    sequence itself.
    """
    if seq.ndim not in (2, 3):
        raise ShapeError(f"ssm_recurrence: sequence must be (T,E) or (T,E,N), got {seq.shape}")
    if seq.shape[1] != params.embed_dim:
        raise ShapeError(f"ssm_recurrence: token width {seq.shape[1]} != params embed dim {params.embed_dim}")
    if seq.dtype != params.a_bar.dtype:
        raise ShapeError("ssm_recurrence: sequence/parameter dtypes must match")
    a, b, c = params.a_bar, params.b_bar, params.c_out
    squeeze = seq.ndim == 2
    f = seq.data[:, :, None] if squeeze else seq.data
    t_len, e, n = f.shape
    d = params.state_dim

    states = np.empty((t_len, d, n), dtype=f.dtype)
    out = np.empty_like(f)
    h = np.zeros((d, n), dtype=f.dtype)
    for t in range(t_len):
        h = a.data @ h + b.data @ f[t]
        states[t] = h
        out[t] = c.data @ h + f[t]

    def bwd(g):
        g3 = g[:, :, None] if squeeze else g
        da = np.zeros_like(a.data)
        db = np.zeros_like(b.data)
        dc = np.zeros_like(c.data)
        df = np.empty_like(f)
        dh = np.zeros((d, n), dtype=g3.dtype)
        zero_state = np.zeros((d, n), dtype=g3.dtype)
        for t in range(t_len - 1, -1, -1):
            gy = g3[t]
            dc += gy @ states[t].T
            dh += c.data.T @ gy
            h_prev = states[t - 1] if t > 0 else zero_state
            da += dh @ h_prev.T
            db += dh @ f[t].T
            df[t] = gy + b.data.T @ dh
            dh = a.data.T @ dh
        return da, db, dc, (df[:, :, 0] if squeeze else df)

    result = out[:, :, 0] if squeeze else out
    n_flops = t_len * n * (2 * d * d + d + 4 * d * e + e)
    return custom_op("ssm_recurrence", (a, b, c, seq), result, bwd, flops=n_flops)


def spatial_expert_forward(params: SsmParams, x: Tensor, direction: ScanDirection) -> Tensor:
    """Flatten along the expert's scan order, run the SSM, fold back."""
    if x.ndim != 3 or x.shape[0] != params.embed_dim:
        raise ShapeError(f"spatial_expert_forward: input {x.shape} incompatible with token width {params.embed_dim}")
    _, h, w = x.shape
    seq = flatten_spatial(x, direction)
    return unflatten_spatial(ssm_recurrence(params, seq), direction, h, w)


def _band_sequence(x: Tensor, reverse: bool) -> Tensor:
    """(Cs,h,w) -> (T=Cs, E=1, N=h*w) per-pixel scalar band sequences."""
    cs, h, w = x.shape
    src = x.data[::-1] if reverse else x.data
    out = np.ascontiguousarray(src.reshape(cs, 1, h * w))

    def bwd(g):
        dg = g.reshape(cs, h, w)
        return ((dg[::-1] if reverse else dg).copy(),)

    return custom_op("band_sequence", (x,), out, bwd)


def _band_unsequence(y: Tensor, reverse: bool, h: int, w: int) -> Tensor:
    cs = y.shape[0]
    arr = y.data.reshape(cs, h, w)
    out = np.ascontiguousarray(arr[::-1] if reverse else arr)

    def bwd(g):
        dg = g[::-1] if reverse else g
        return (np.ascontiguousarray(dg.reshape(cs, 1, h * w)),)

    return custom_op("band_unsequence", (y,), out, bwd)


def spectral_bidirectional(fwd: SsmParams, bwd: SsmParams, x: Tensor) -> Tensor:
    """Sum of forward and backward band-axis scans, shared across pixels.

    Tokens are per-pixel scalars (E = 1), so parameter count is independent
    of the spatial extent; the forward scan visits bands first-to-last and
    the backward scan last-to-first.
    """
    if fwd.embed_dim != 1 or bwd.embed_dim != 1:
        raise ShapeError("spectral_bidirectional: spectral experts use scalar tokens (E = 1)")
    if x.ndim != 3:
        raise ShapeError(f"spectral_bidirectional: expects (Cs,h,w), got {x.shape}")
    _, h, w = x.shape
    out_f = _band_unsequence(ssm_recurrence(fwd, _band_sequence(x, reverse=False)), False, h, w)
    out_b = _band_unsequence(ssm_recurrence(bwd, _band_sequence(x, reverse=True)), True, h, w)
    from .tensor import add

    return add(out_f, out_b)
