"""Analytic parameter/FLOP accounting against constructed networks and the
runtime instrumentation counter."""

import numpy as np
import pytest

from mambamoe import tensor as tt
from mambamoe.data import HsiScene, SceneHeader, normalize_scene
from mambamoe.network import NetSpec, forward_full, init_network_params
from mambamoe.profiler import (
    PAPER_SCALE,
    CostReport,
    count_flops,
    count_params,
    make_report,
    report_csv,
    report_table,
)
from mambamoe.tensor import FLOPS, Tensor


def random_spec(rng):
    return NetSpec(
        bands=int(rng.integers(1, 20)),
        channels=2 * int(rng.integers(2, 16)),
        state_dim=int(rng.integers(1, 16)),
        n_class=int(rng.integers(2, 17)),
    )


class TestParams:
    def test_single_conv_arithmetic(self):
        # 3x3 conv with C_in=2, C_out=3: 2*3*9 + 3 = 57
        spec = NetSpec(bands=2, channels=4, state_dim=2, n_class=2)
        _, by_module = count_params(spec)
        assert by_module["stem"] == (4 * 2 * 9 + 4) + 2 * (4 * 4 * 9 + 4)

    def test_ssm_param_arithmetic(self):
        # D=4, E=2: 4*4 + 4*2 + 2*4 = 32
        from mambamoe.profiler import _ssm_params

        assert _ssm_params(4, 2) == 32

    def test_analytic_equals_constructed_for_20_random_configs(self):
        rng = np.random.default_rng(0)
        for _ in range(20):
            spec = random_spec(rng)
            analytic, _ = count_params(spec)
            constructed = init_network_params(spec, np.random.default_rng(1)).param_count()
            assert analytic == constructed, spec

    def test_paper_scale_brackets_published_size(self):
        total, _ = count_params(PAPER_SCALE)
        assert 0.14e6 <= total <= 0.56e6


class TestFlops:
    def test_matmul_convention(self):
        x = Tensor(np.ones((3, 4), dtype=np.float32))
        y = Tensor(np.ones((4, 5), dtype=np.float32))
        with FLOPS:
            tt.matmul(x, y)
        assert FLOPS.total == 2 * 3 * 4 * 5

    def test_topk_scan_proportionality(self):
        dense, per_k, comp = count_flops(PAPER_SCALE, (103, 13, 13))
        scan = comp["spatial_experts"]
        for k in (1, 2, 3, 4):
            assert per_k[k] == dense - (4 - k) * scan // 4
        assert (per_k[3] - dense + scan) / scan == 0.75

    def test_topk4_equals_dense_and_monotone(self):
        dense, per_k, _ = count_flops(PAPER_SCALE, (103, 13, 13))
        assert per_k[4] == dense
        assert per_k[1] < per_k[2] < per_k[3] < per_k[4]

    def test_monotone_in_widths_and_extent(self):
        base = NetSpec(bands=8, channels=8, state_dim=4, n_class=4)
        d0, _, _ = count_flops(base, (8, 16, 16))
        for grown in (
            NetSpec(bands=8, channels=16, state_dim=4, n_class=4),
            NetSpec(bands=8, channels=8, state_dim=8, n_class=4),
        ):
            d1, _, _ = count_flops(grown, (8, 16, 16))
            assert d1 > d0
        d2, _, _ = count_flops(base, (8, 32, 32))
        assert d2 > d0

    def test_doubling_extent_scales_conv_and_scan(self):
        spec = NetSpec(bands=4, channels=8, state_dim=4, n_class=4)
        _, _, c1 = count_flops(spec, (4, 16, 16))
        _, _, c2 = count_flops(spec, (4, 32, 32))
        # convolution cost is quadratic in linear extent, scans double per axis
        assert c2["stem"] == 4 * c1["stem"]
        assert c2["spatial_experts"] == 4 * c1["spatial_experts"]

    def test_band_mismatch_rejected(self):
        with pytest.raises(ValueError):
            count_flops(PAPER_SCALE, (5, 13, 13))

    def test_instrumented_forward_within_5_percent(self):
        spec = NetSpec(bands=3, channels=8, state_dim=4, n_class=3)
        params = init_network_params(spec, np.random.default_rng(2))
        rng = np.random.default_rng(3)
        labels = rng.integers(1, 4, size=(16, 16)).astype(np.uint16)
        cube = rng.normal(size=(3, 16, 16)).astype(np.float32)
        scene = HsiScene(SceneHeader(3, 16, 16, 3, ["a", "b", "c"], "t"), cube, labels)
        x = normalize_scene(scene)

        analytic_dense, analytic_topk, _ = count_flops(spec, (3, 16, 16))
        with FLOPS:
            forward_full(params, x, train=False, topk=None)
            measured_dense = FLOPS.total
        with FLOPS:
            forward_full(params, x, train=False, topk=2)
            measured_top2 = FLOPS.total
        assert abs(measured_dense - analytic_dense) / analytic_dense < 0.05
        assert abs(measured_top2 - analytic_topk[2]) / analytic_topk[2] < 0.05


class TestReport:
    def test_report_round_numbers(self):
        report = make_report(PAPER_SCALE, (103, 13, 13))
        assert isinstance(report, CostReport)
        table = report_table(report)
        csv = report_csv(report)
        assert "params" in table and "flops" in table
        assert csv.splitlines()[0] == "key,value"
        assert f"params_total,{report.params_total}" in csv
