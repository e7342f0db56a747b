import json
import math

import numpy as np
import pytest

from hsvt.autodiff import Tensor
from hsvt.backbone import HsVTConfig, make_temporal
from hsvt.detect import DetectionModel, HeadConfig
from hsvt.neurons import NeuronConfig, SpikingMLP
from hsvt.nn import Conv2d, Linear
from hsvt.profiler import (audit_row, count_flops, energy_ann, energy_report, energy_snn, instrument,
                           load_reference, measure_firing_rates, published_backbone_report, report_from_components, sops)

# -- energy model ----------------------------------------------------------------------


def test_energy_constants():
    assert energy_ann(1e9) == pytest.approx(4.6)
    assert energy_snn(1e9) == pytest.approx(0.9)
    assert sops(0.25, 4, 100.0) == 100.0


@pytest.mark.parametrize("variant,e_ann,e_snn,total", [("small", 39.03, 2.172, 41.20),
                                                        ("base", 65.45, 3.394, 68.84)])
def test_published_rows_reproduce(variant, e_ann, e_snn, total):
    rep = published_backbone_report(variant)
    assert rep.e_ann == pytest.approx(e_ann, abs=0.01)
    assert rep.e_snn == pytest.approx(e_snn, abs=0.001)
    assert rep.e_total == pytest.approx(total, abs=0.01)
    assert rep.flags == []


def test_tiny_row_is_flagged():
    rep = published_backbone_report("tiny")
    assert rep.e_ann == pytest.approx(19.32, abs=0.01)
    assert len(rep.flags) == 1
    assert "0.017" in rep.flags[0] and "1.040" in rep.flags[0]
    assert "FLAG" in rep.to_table()


def test_audit_row_consistent_row_passes():
    assert audit_row("x", 1000.0, 1000.0, energy_ann(1e9), energy_snn(1e9)) is None


@pytest.mark.parametrize("variant", ["tiny", "small", "base"])
def test_component_additivity(variant):
    ref = load_reference()["components_mJ"][variant]
    # backbone and head expressed as ANN FLOPs carrying the listed energies
    rep = report_from_components([("backbone", ref["backbone"] / 4.6e-9, 0.0),
                                  ("fpn_head", ref["fpn_head"] / 4.6e-9, 0.0)])
    assert rep.e_total == pytest.approx(ref["total"], abs=0.01)
    assert rep.component("backbone").e_total + rep.component("fpn_head").e_total == pytest.approx(rep.e_total)


def test_report_rows_and_jsonl():
    rep = report_from_components([("backbone", 2e9, 1e9), ("fpn_head", 1e9, 0.0)], notes=["n"])
    rows = rep.rows()
    assert rows[-1]["component"] == "total"
    assert rows[-1]["e_total_mJ"] == pytest.approx(math.fsum(r["e_total_mJ"] for r in rows[:-1]))
    assert rows[-1]["e_total_mJ"] == pytest.approx(rows[-1]["e_ann_mJ"] + rows[-1]["e_snn_mJ"])
    lines = [json.loads(l) for l in rep.to_jsonl().splitlines()]
    assert lines[-1] == {"note": "n"} and len(lines) == 4


# -- FLOP counting -----------------------------------------------------------------------


def test_linear_two_to_three_is_twelve_flops():
    (rec,) = count_flops(Linear(2, 3), (1, 2))
    assert rec.flops == 12 and not rec.is_spiking


def test_conv_flops_closed_form():
    (rec,) = count_flops(Conv2d(3, 5, 3, stride=2, padding=1), (2, 3, 8, 8))
    assert rec.flops == 2 * 3 * 9 * 5 * 4 * 4


TEMPORAL_FLOPS_M = {"PlainNet": 67.11, "FeedBackNet": 134.22, "LSTM": 268.44, "STFE": 101.19}


def temporal_flops(kind):
    return sum(r.flops for r in count_flops(make_temporal(kind, 256), (1, 256, 16, 16)))


@pytest.mark.parametrize("kind", list(TEMPORAL_FLOPS_M))
def test_temporal_flops_absolute(kind):
    assert temporal_flops(kind) / 1e6 == pytest.approx(TEMPORAL_FLOPS_M[kind], rel=0.02)


def test_temporal_flops_ratios():
    plain = temporal_flops("PlainNet")
    assert temporal_flops("FeedBackNet") / plain == pytest.approx(2.0, rel=1e-12)
    assert temporal_flops("LSTM") / plain == pytest.approx(4.0, rel=1e-12)
    assert temporal_flops("STFE") / plain == pytest.approx(1.508, rel=0.02)


# -- firing rates & SOPs -----------------------------------------------------------------


@pytest.mark.parametrize("T", [1, 3])
def test_sops_equal_recount_from_spikes(T):
    mlp = SpikingMLP(4, NeuronConfig(v_threshold=0.5), ratio=2, spiking_layers=2, timesteps=T,
                     rng=np.random.default_rng(0))
    x = Tensor(np.random.default_rng(1).normal(size=(6, 4)) * 2)
    with instrument(mlp) as rec:
        _, trace = mlp(x, return_spikes=True)
    got = sum(sops(r.input_rate, r.timesteps, r.flops) for r in rec.records if r.is_spiking)
    # every input spike into a spike-driven layer costs 2 * fan_out operations
    layers = [mlp.inner[0], mlp.proj]
    expect = sum(2 * lin.out_features * sum(float(s.data.sum()) for s in spikes)
                 for lin, spikes in zip(layers, trace))
    assert got == pytest.approx(expect, rel=1e-12)
    assert sum(float(s.data.sum()) for s in trace[0]) > 0


def tiny_detector(neuron):
    cfg = HsVTConfig(channels=(8, 16, 32, 64), t_bins=2, window_size=4, grid_size=4, head_dim=8,
                     placement=("LSTM", "STFE", "PlainNet", "STFE"), neuron=neuron)
    return DetectionModel(cfg, HeadConfig(num_classes=1))


def _windows():
    return [np.random.default_rng(i).poisson(0.3, (1, 4, 32, 32)).astype(float) for i in range(2)]


def test_silent_network_has_zero_sops():
    rep = energy_report(tiny_detector(NeuronConfig(v_threshold=1e12)), _windows())
    assert rep.sops == 0.0 and rep.e_snn == 0.0 and rep.e_ann > 0


def test_always_fire_network_has_rate_one():
    model = tiny_detector(NeuronConfig.always_fire())
    rates, records = measure_firing_rates(model, _windows())
    assert rates.global_rate == 1.0
    rep = energy_report(model, _windows())
    assert sum(c.flops_spiking for c in rep.components) > 0
    # spike-driven layers charge T * FLOPs, except STFE's recurrent conv whose state half
    # is zero in the first window: input rate (0.5 + 1) / 2 over the two windows
    expect = sum(r.timesteps * r.flops * (0.75 if r.path.endswith("recurrent") else 1.0)
                 for r in records if r.is_spiking)
    assert rep.sops == pytest.approx(expect, rel=1e-12)


def test_energy_report_matches_static_counts():
    model = tiny_detector(NeuronConfig())
    rep = energy_report(model, _windows())
    static = count_flops(model, (1, 4, 32, 32))
    assert rep.flops_ann == pytest.approx(sum(r.flops for r in static if not r.is_spiking))
    assert rep.e_total == pytest.approx(rep.e_ann + rep.e_snn)
