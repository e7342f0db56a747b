"""FLOP counting, firing-rate measurement and the 45 nm energy model.

Counting convention: one multiply-accumulate is 2 FLOPs; linear, convolution
and attention matmuls are counted; bias, normalisation and elementwise ops
are not. FLOPs are per input sample and, for spike-driven layers, per
timestep (the timestep count T is kept alongside).

Energy: ``E_ANN = 4.6 pJ * FLOPs`` and ``E_SNN = 0.9 pJ * SOPs`` with
``SOPs = fr * T * FLOPs``; totals are their sum.
"""

from __future__ import annotations

import contextlib
import json
import math
from dataclasses import asdict, dataclass, field
from importlib import resources

import numpy as np

from .autodiff import Tensor

E_MAC_PJ = 4.6
E_AC_PJ = 0.9
PJ_TO_MJ = 1e-9


def energy_ann(flops):
    """Energy in mJ of ``flops`` floating-point operations."""
    return E_MAC_PJ * flops * PJ_TO_MJ


def energy_snn(sops_count):
    """Energy in mJ of ``sops_count`` synaptic (spike-driven) operations."""
    return E_AC_PJ * sops_count * PJ_TO_MJ


def sops(fr, timesteps, flops):
    return fr * timesteps * flops


@dataclass
class OpCostRecord:
    path: str
    kind: str
    flops: float
    is_spiking: bool = False
    timesteps: int = 1
    input_rate: float = None  # mean spike rate of the layer input, when spiking

    def __post_init__(self):
        if self.flops < 0:
            raise ValueError("FLOPs must be nonnegative")


@dataclass
class LayerRate:
    spikes: float = 0.0
    neuron_steps: int = 0

    @property
    def rate(self):
        return self.spikes / self.neuron_steps if self.neuron_steps else 0.0


@dataclass
class FiringRateStats:
    layers: dict = field(default_factory=dict)  # path -> LayerRate
    samples: int = 0

    @property
    def rates(self):
        return {k: v.rate for k, v in self.layers.items()}

    @property
    def global_rate(self):
        steps = sum(v.neuron_steps for v in self.layers.values())
        return sum(v.spikes for v in self.layers.values()) / steps if steps else 0.0


class Recorder:
    """Collects cost records and spike counts from an instrumented forward pass."""

    def __init__(self):
        self.records = []
        self.rates = FiringRateStats()
        self.batch = 1

    def linear(self, layer, x, flops):
        rate = None
        if layer.spiking_input:
            rate = float(np.mean(x.data)) if x.size else 0.0
        self.records.append(OpCostRecord(layer.path, type(layer).__name__.lower(),
                                         flops / self.batch, layer.spiking_input,
                                         layer.timesteps, rate))

    def matmul(self, module, flops):
        self.records.append(OpCostRecord(module.path, "attention_matmul", flops / self.batch))

    def spikes(self, neuron, s):
        stat = self.rates.layers.setdefault(neuron.path, LayerRate())
        stat.spikes += float(s.data.sum())
        stat.neuron_steps += s.size


@contextlib.contextmanager
def instrument(model, batch=1):
    rec = Recorder()
    rec.batch = batch
    if not any(m.path for m in model.modules()):
        model.assign_paths()
    for m in model.modules():
        m._recorder = rec
    try:
        yield rec
    finally:
        for m in model.modules():
            m._recorder = None


def _merge(records):
    """Sum repeated calls of the same layer (e.g. FeedBackNet's two passes)."""
    merged = {}
    for r in records:
        key = (r.path, r.kind)
        if key in merged:
            m = merged[key]
            total = m.flops + r.flops
            if r.is_spiking:
                m.input_rate = (m.input_rate * m.flops + r.input_rate * r.flops) / total if total else 0.0
            m.flops = total
        else:
            merged[key] = OpCostRecord(**asdict(r))
    return list(merged.values())


def count_flops(model, input_shape, dtype=np.float64):
    """Static per-sample cost records from one instrumented forward on zeros."""
    x = Tensor(np.zeros(input_shape, dtype=dtype))
    was_training = model.training
    model.eval()
    try:
        with instrument(model, batch=input_shape[0]) as rec:
            _forward_call(model, x)
    finally:
        model.train(was_training)
    return _merge(rec.records)


def _forward_call(model, x):
    if hasattr(model, "step") and not hasattr(model, "forward"):
        return model.step(x)
    return model(x)


def measure_firing_rates(model, windows, states=None):
    """Run ``windows`` (iterable of [N, C, H, W] arrays) through ``model`` with spike
    counting; state is carried across windows. Returns (FiringRateStats, records)."""
    was_training = model.training
    model.eval()
    n_windows = 0
    try:
        with instrument(model) as rec:
            for w in windows:
                w = np.asarray(w)
                rec.batch = w.shape[0]
                rec.rates.samples += w.shape[0]
                _, states = model(Tensor(w, dtype=_model_dtype(model)), states)
                n_windows += 1
    finally:
        model.train(was_training)
    records = _merge(rec.records)
    for r in records:
        r.flops /= max(1, n_windows)
    return rec.rates, records


def _model_dtype(model):
    for p in model.parameters():
        return p.dtype
    return np.float64


# -- reports -------------------------------------------------------------------------


@dataclass
class ComponentEnergy:
    name: str
    flops_ann: float = 0.0  # FLOPs charged at the ANN rate
    sops: float = 0.0
    flops_spiking: float = 0.0  # per-timestep FLOPs of spike-driven layers
    sops_global: float = 0.0  # SOPs with one network-wide rate

    @property
    def e_ann(self):
        return energy_ann(self.flops_ann)

    @property
    def e_snn(self):
        return energy_snn(self.sops)

    @property
    def e_total(self):
        return self.e_ann + self.e_snn


@dataclass
class EnergyReport:
    components: list
    notes: list = field(default_factory=list)
    flags: list = field(default_factory=list)

    @property
    def flops_ann(self):
        return math.fsum(c.flops_ann for c in self.components)

    @property
    def sops(self):
        return math.fsum(c.sops for c in self.components)

    @property
    def e_ann(self):
        return math.fsum(c.e_ann for c in self.components)

    @property
    def e_snn(self):
        return math.fsum(c.e_snn for c in self.components)

    @property
    def e_total(self):
        return self.e_ann + self.e_snn

    def component(self, name):
        return next(c for c in self.components if c.name == name)

    def rows(self):
        out = [dict(component=c.name, flops_M=c.flops_ann / 1e6, sops_M=c.sops / 1e6,
                    e_ann_mJ=c.e_ann, e_snn_mJ=c.e_snn, e_total_mJ=c.e_total)
               for c in self.components]
        out.append(dict(component="total", flops_M=self.flops_ann / 1e6, sops_M=self.sops / 1e6,
                        e_ann_mJ=self.e_ann, e_snn_mJ=self.e_snn, e_total_mJ=self.e_total))
        return out

    def to_table(self):
        head = f"{'component':<14}{'FLOPs(M)':>12}{'E_ANN(mJ)':>11}{'SOPs(M)':>11}{'E_SNN(mJ)':>11}{'E(mJ)':>10}"
        lines = [head, "-" * len(head)]
        for r in self.rows():
            lines.append(f"{r['component']:<14}{r['flops_M']:>12.2f}{r['e_ann_mJ']:>11.2f}"
                         f"{r['sops_M']:>11.2f}{r['e_snn_mJ']:>11.3f}{r['e_total_mJ']:>10.2f}")
        lines += [f"note: {n}" for n in self.notes]
        lines += [f"FLAG: {f}" for f in self.flags]
        return "\n".join(lines)

    def to_jsonl(self):
        lines = [json.dumps(r, sort_keys=True) for r in self.rows()]
        lines += [json.dumps({"note": n}) for n in self.notes]
        lines += [json.dumps({"flag": f}) for f in self.flags]
        return "\n".join(lines) + "\n"


def report_from_components(components, notes=()):
    """Build a report from (name, FLOPs, SOPs) triples."""
    return EnergyReport([ComponentEnergy(n, f, s) for n, f, s in components], list(notes))


def audit_row(name, flops_m, sops_m, listed_e_ann, listed_e_snn, tol=0.01):
    """Recompute a published (FLOPs, SOPs, energies) row; returns a flag string or None."""
    e_ann = energy_ann(flops_m * 1e6)
    e_snn = energy_snn(sops_m * 1e6)
    issues = []
    if abs(e_ann - listed_e_ann) > tol:
        issues.append(f"E_ANN listed {listed_e_ann} mJ, computed {e_ann:.3f} mJ")
    if abs(e_snn - listed_e_snn) > max(tol * 0.1, 0.001):
        issues.append(f"E_SNN listed {listed_e_snn} mJ, computed {e_snn:.3f} mJ from SOPs {sops_m} M")
    return f"{name}: " + "; ".join(issues) if issues else None


def component_of(path):
    return "backbone" if path.startswith("backbone") or path.startswith("stages") else "fpn_head"


def energy_report(model, windows, states=None):
    """Layerwise energy report over a calibration pass."""
    rates, records = measure_firing_rates(model, windows, states)
    global_fr = rates.global_rate
    comps = {}
    for r in records:
        c = comps.setdefault(component_of(r.path), ComponentEnergy(component_of(r.path)))
        if r.is_spiking:
            c.flops_spiking += r.flops
            c.sops += sops(r.input_rate or 0.0, r.timesteps, r.flops)
            c.sops_global += sops(global_fr, r.timesteps, r.flops)
        else:
            c.flops_ann += r.flops
    order = [k for k in ("backbone", "fpn_head") if k in comps]
    report = EnergyReport([comps[k] for k in order])
    ts = sorted({r.timesteps for r in records if r.is_spiking})
    report.notes.append(f"T = executed spiking timesteps per layer (values used: {ts or [1]})")
    report.notes.append(f"global firing rate {global_fr:.4f}; single-rate SOPs "
                        f"{sum(c.sops_global for c in report.components) / 1e6:.3f} M vs layerwise "
                        f"{report.sops / 1e6:.3f} M")
    report.notes.append("FPN is a light top-down merge stand-in")
    return report


def load_reference():
    """Published reference energy values shipped with the package."""
    text = resources.files("hsvt").joinpath("reference_energy.json").read_text()
    return json.loads(text)


def published_backbone_report(variant):
    """Energy report for a published backbone row (FLOPs and SOPs injected), with audit."""
    ref = load_reference()["backbone"][variant]
    rep = report_from_components([("backbone", ref["flops_M"] * 1e6, ref["sops_M"] * 1e6)],
                                 notes=[f"published {variant} row injected"])
    flag = audit_row(variant, ref["flops_M"], ref["sops_M"], ref["e_ann_mJ"], ref["e_snn_mJ"])
    if flag:
        rep.flags.append(flag)
    return rep
