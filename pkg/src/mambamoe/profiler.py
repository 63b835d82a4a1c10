"""Closed-form parameter and FLOP accounting for any network configuration.

Conventions: a multiply-accumulate is 2 FLOPs; elementwise ops, softmax
terms and pooling cost 1 FLOP per scalar operation; pure bookkeeping
(splits, concats, scan reorderings) is free.  One directional scan over T
tokens of width E with state size D costs T * (2D^2 + 2DE + 2ED + E).
FLOPs are counted for the inference forward pass (stage supervision is a
training-only construct).

The parameter formulas are written independently of the network builder
and must agree with a constructed network exactly; the FLOP formulas must
agree with the runtime instrumentation counter within a few percent (the
counter additionally sees small bookkeeping terms such as the scan's
state-accumulate add).
"""

from __future__ import annotations

from dataclasses import dataclass, field

from .network import NetSpec, stage_sizes

N_EXPERTS = 4


@dataclass
class CostReport:
    """Analytic cost summary for one configuration and input size."""

    input_shape: tuple[int, int, int]  # (bands, H, W)
    params_total: int
    params_by_module: dict[str, int]
    flops_dense: int
    flops_topk: dict[int, int]
    flops_by_component: dict[str, int] = field(default_factory=dict)


def _conv_params(c_out: int, c_in: int, k: int) -> int:
    return c_out * c_in * k * k + c_out


def _ssm_params(d: int, e: int) -> int:
    return d * d + d * e + e * d


def count_params(spec: NetSpec) -> tuple[int, dict[str, int]]:
    """Closed-form parameter count; equals the allocated count exactly."""
    c, d, k_cls, bands = spec.channels, spec.state_dim, spec.n_class, spec.bands
    half = c // 2
    hidden = max(half // 2, 1)

    stem = _conv_params(c, bands, 3) + 2 * _conv_params(c, c, 3)
    router = hidden * half + hidden + N_EXPERTS * hidden + N_EXPERTS
    momeb_one = (
        4 * c  # two LayerNorm affine pairs
        + N_EXPERTS * _ssm_params(d, half)
        + 2 * _ssm_params(d, 1)
        + router
        + _conv_params(c, c, 1)  # fuse
        + _conv_params(2 * c, c, 1)
        + _conv_params(c, 2 * c, 1)  # MLP
    )
    ffb = 3 * 2 * _conv_params(c, c, 3)
    head = _conv_params(k_cls, c, 1)
    by_module = {"stem": stem, "momeb": 3 * momeb_one, "ffb": ffb, "head": head}
    return sum(by_module.values()), by_module


def _conv_flops(c_out: int, c_in: int, k: int, h: int, w: int) -> int:
    return h * w * c_out * (2 * c_in * k * k) + h * w * c_out


def _scan_flops(t: int, d: int, e: int) -> int:
    return t * (2 * d * d + 2 * d * e + 2 * e * d + e)


def count_flops(spec: NetSpec, input_shape: tuple[int, int, int]) -> tuple[int, dict[int, int], dict[str, int]]:
    """Inference-forward FLOPs: dense total, per-k totals, and a component
    breakdown.  Top-k only reduces the spatial-expert scan share."""
    bands, height, width = input_shape
    if bands != spec.bands:
        raise ValueError(f"count_flops: input bands {bands} != config bands {spec.bands}")
    c, d = spec.channels, spec.state_dim
    half = c // 2
    hidden = max(half // 2, 1)
    sizes = stage_sizes(height, width)

    comp: dict[str, int] = {}
    # stem: conv+relu at the incoming resolution, pooled output per stage
    comp["stem"] = 0
    in_sizes = [(height, width), sizes[0], sizes[1]]
    in_ch = [bands, c, c]
    for (h, w), ci, (h2, w2) in zip(in_sizes, in_ch, sizes):
        comp["stem"] += _conv_flops(c, ci, 3, h, w) + c * h * w + 4 * c * h2 * w2

    ln = lambda h, w: h * w * (7 * c + 4)
    spatial_scans = 0
    momeb_other = 0
    for h, w in sizes:
        spatial_scans += N_EXPERTS * _scan_flops(h * w, d, half)
        spectral = 2 * (h * w) * _scan_flops(half, d, 1) + half * h * w  # both directions + additive fuse
        router = half * h * w + (2 * half * hidden + hidden) + hidden + (2 * hidden * N_EXPERTS + N_EXPERTS) + 4 * N_EXPERTS
        combine = (2 * N_EXPERTS - 1) * half * h * w  # weight-scale + accumulate
        mlp = _conv_flops(2 * c, c, 1, h, w) + 2 * c * h * w + _conv_flops(c, 2 * c, 1, h, w)
        momeb_other += (
            2 * ln(h, w) + spectral + router + combine + _conv_flops(c, c, 1, h, w) + mlp + 2 * c * h * w
        )  # trailing term: the two residual adds
    comp["spatial_experts"] = spatial_scans
    comp["momeb_other"] = momeb_other

    res_flops = lambda h, w: 2 * _conv_flops(c, c, 3, h, w) + 3 * c * h * w  # two ReLUs + residual add
    upsample = lambda h, w: 7 * c * h * w
    ffb_total = res_flops(*sizes[2])
    for i in (1, 0):
        h, w = sizes[i]
        ffb_total += upsample(h, w) + res_flops(h, w) + c * h * w
    comp["ffb"] = ffb_total

    k_cls = spec.n_class
    comp["head"] = upsample(height, width) + _conv_flops(k_cls, c, 1, height, width) + 4 * k_cls * height * width

    dense = sum(comp.values())
    per_k = {k: dense - (N_EXPERTS - k) * (spatial_scans // N_EXPERTS) for k in range(1, N_EXPERTS + 1)}
    return dense, per_k, comp


def make_report(spec: NetSpec, input_shape: tuple[int, int, int]) -> CostReport:
    params_total, by_module = count_params(spec)
    dense, per_k, comp = count_flops(spec, input_shape)
    return CostReport(
        input_shape=tuple(input_shape),
        params_total=params_total,
        params_by_module=by_module,
        flops_dense=dense,
        flops_topk=per_k,
        flops_by_component=comp,
    )


PAPER_SCALE = NetSpec(bands=103, channels=48, state_dim=24, n_class=9)
"""Frozen reference configuration for the published-scale cost bracket."""


def report_table(report: CostReport) -> str:
    b, h, w = report.input_shape
    rows = [f"input: {b}x{h}x{w}", f"parameters: {report.params_total} ({report.params_total / 1e6:.3f} M)"]
    for name, value in report.params_by_module.items():
        rows.append(f"  params[{name}]: {value}")
    rows.append(f"flops (dense): {report.flops_dense}")
    for k in sorted(report.flops_topk):
        rows.append(f"flops (topk={k}): {report.flops_topk[k]}")
    for name, value in report.flops_by_component.items():
        rows.append(f"  flops[{name}]: {value}")
    width = max(len(r.split(":")[0]) for r in rows)
    out = []
    for r in rows:
        key, _, value = r.partition(":")
        out.append(f"{key:<{width}} :{value}")
    return "\n".join(out) + "\n"


def report_csv(report: CostReport) -> str:
    b, h, w = report.input_shape
    lines = ["key,value", f"input,{b}x{h}x{w}", f"params_total,{report.params_total}"]
    lines += [f"params_{name},{value}" for name, value in report.params_by_module.items()]
    lines.append(f"flops_dense,{report.flops_dense}")
    lines += [f"flops_topk{k},{report.flops_topk[k]}" for k in sorted(report.flops_topk)]
    lines += [f"flops_{name},{value}" for name, value in report.flops_by_component.items()]
    return "\n".join(lines) + "\n"
