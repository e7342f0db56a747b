"""Four-stage hybrid backbone: strided conv, windowed/grid attention with
spiking MLPs, and a recurrent temporal module per stage.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor
from .neurons import NeuronConfig, NeuronState, PreNormMLP, SpikingNeuron, initial_state
from .nn import BatchNorm2d, Conv2d, LayerNorm, Linear, Module

VARIANT_CHANNELS = {
    "tiny": (32, 64, 128, 256),
    "small": (48, 96, 192, 384),
    "base": (64, 128, 256, 512),
}
STAGE_KERNELS = (7, 3, 3, 3)
STAGE_STRIDES = (4, 2, 2, 2)
TEMPORAL_KINDS = ("LSTM", "STFE", "PlainNet", "FeedBackNet", "StatefulSynapse", "None")
DEFAULT_PLACEMENT = ("LSTM", "LSTM", "LSTM", "STFE")

# rows of the placement ablation, stage 1..4
PLACEMENT_ROWS = (
    ("LSTM", "LSTM", "LSTM", "LSTM"),
    ("STFE", "LSTM", "LSTM", "LSTM"),
    ("LSTM", "STFE", "LSTM", "LSTM"),
    ("LSTM", "LSTM", "STFE", "LSTM"),
    ("LSTM", "LSTM", "LSTM", "STFE"),
    ("LSTM", "LSTM", "STFE", "STFE"),
    ("LSTM", "STFE", "STFE", "STFE"),
    ("STFE", "STFE", "STFE", "STFE"),
)

MASK_NEG = -1e9


@dataclass
class HsVTConfig:
    variant: str = "tiny"
    channels: tuple = None
    placement: tuple = DEFAULT_PLACEMENT
    neuron: NeuronConfig = field(default_factory=NeuronConfig)
    window_size: int = 8
    grid_size: int = 8
    t_bins: int = 10
    head_dim: int = 32
    mlp_ratio: int = 4
    mlp_spiking_layers: int = 2
    stem_timesteps: int = None
    fusion: str = "replace"
    num_stages: int = 4
    dtype: str = "float64"
    seed: int = 0

    def __post_init__(self):
        if self.channels is None:
            try:
                self.channels = VARIANT_CHANNELS[self.variant]
            except KeyError:
                raise ValueError(f"unknown variant {self.variant!r}") from None
        self.channels = tuple(int(c) for c in self.channels)[: self.num_stages]
        self.placement = tuple(self.placement)
        if len(self.placement) != 4 and len(self.placement) != self.num_stages:
            raise ValueError("placement needs one temporal kind per stage")
        for kind in self.placement:
            if kind not in TEMPORAL_KINDS:
                raise ValueError(f"unknown temporal module {kind!r}")
        if self.fusion not in ("replace", "add"):
            raise ValueError("fusion must be 'replace' or 'add'")
        if self.stem_timesteps is None:
            self.stem_timesteps = self.t_bins

    @property
    def in_channels(self):
        return 2 * self.t_bins

    @property
    def strides(self):
        out, acc = [], 1
        for s in STAGE_STRIDES[: self.num_stages]:
            acc *= s
            out.append(acc)
        return tuple(out)

    @property
    def np_dtype(self):
        return np.dtype(self.dtype)


# -- partitioning ------------------------------------------------------------------


def _partition_nhwc(x, P):
    n, h, w, c = x.shape
    if h % P or w % P:
        raise ValueError(f"extent {h}x{w} not divisible by window {P}")
    t = ad.reshape(x, (n, h // P, P, w // P, P, c))
    t = ad.transpose(t, (0, 1, 3, 2, 4, 5))
    return ad.reshape(t, (n * (h // P) * (w // P), P * P, c))


def _reverse_nhwc(tokens, P, n, h, w):
    c = tokens.shape[-1]
    t = ad.reshape(tokens, (n, h // P, w // P, P, P, c))
    t = ad.transpose(t, (0, 1, 3, 2, 4, 5))
    return ad.reshape(t, (n, h, w, c))


def _grid_nhwc(x, G):
    n, h, w, c = x.shape
    if h % G or w % G:
        raise ValueError(f"extent {h}x{w} not divisible by grid {G}")
    t = ad.reshape(x, (n, G, h // G, G, w // G, c))
    t = ad.transpose(t, (0, 2, 4, 1, 3, 5))
    return ad.reshape(t, (n * (h // G) * (w // G), G * G, c))


def _grid_reverse_nhwc(tokens, G, n, h, w):
    c = tokens.shape[-1]
    t = ad.reshape(tokens, (n, h // G, w // G, G, G, c))
    t = ad.transpose(t, (0, 3, 1, 4, 2, 5))
    return ad.reshape(t, (n, h, w, c))


def window_partition(x, P):
    """NCHW -> [(N * H/P * W/P), P*P, C] non-overlapping windows, row-major tokens."""
    return _partition_nhwc(ad.transpose(x, (0, 2, 3, 1)), P)


def window_reverse(tokens, P, n, h, w):
    return ad.transpose(_reverse_nhwc(tokens, P, n, h, w), (0, 3, 1, 2))


def grid_partition(x, G):
    """NCHW -> [(N * H/G * W/G), G*G, C]; each group samples the map at stride H/G."""
    return _grid_nhwc(ad.transpose(x, (0, 2, 3, 1)), G)


def grid_reverse(tokens, G, n, h, w):
    return ad.transpose(_grid_reverse_nhwc(tokens, G, n, h, w), (0, 3, 1, 2))


def _np_partition(a, size, mode):
    """Partition a [N, H, W] numpy array the same way as the tensor helpers."""
    n, h, w = a.shape
    if mode == "block":
        t = a.reshape(n, h // size, size, w // size, size).transpose(0, 1, 3, 2, 4)
        return t.reshape(-1, size * size)
    t = a.reshape(n, size, h // size, size, w // size).transpose(0, 2, 4, 1, 3)
    return t.reshape(-1, size * size)


# -- attention ------------------------------------------------------------------------


class MultiHeadSelfAttention(Module):
    def __init__(self, channels, heads, rng=None, dtype=np.float64):
        if channels % heads:
            raise ValueError(f"{channels} channels not divisible by {heads} heads")
        self.channels, self.heads = channels, heads
        self.q = Linear(channels, channels, rng=rng, dtype=dtype)
        self.k = Linear(channels, channels, rng=rng, dtype=dtype)
        self.v = Linear(channels, channels, rng=rng, dtype=dtype)
        self.proj = Linear(channels, channels, rng=rng, dtype=dtype)
        self.retain = False
        self.last_weights = None

    def _heads(self, t, b, n):
        d = self.channels // self.heads
        return ad.transpose(ad.reshape(t, (b, n, self.heads, d)), (0, 2, 1, 3))

    def forward(self, tokens, key_mask=None):
        """``tokens``: [B, n, C]; ``key_mask``: optional bool [B, n], False = padding."""
        b, n, c = tokens.shape
        d = c // self.heads
        q = self._heads(self.q(tokens), b, n)
        k = self._heads(self.k(tokens), b, n)
        v = self._heads(self.v(tokens), b, n)
        scores = ad.matmul(q, ad.transpose(k, (0, 1, 3, 2))) * (1.0 / np.sqrt(d))
        if key_mask is not None:
            bias = np.where(key_mask, 0.0, MASK_NEG).astype(scores.dtype)[:, None, None, :]
            scores = scores + np.broadcast_to(bias, scores.shape)
        attn = ad.softmax(scores, axis=-1)
        if self.retain:
            self.last_weights = attn.data.copy()
        out = ad.matmul(attn, v)
        if self._recorder is not None:
            self._recorder.matmul(self, 2 * 2 * b * self.heads * n * n * d)
        out = ad.reshape(ad.transpose(out, (0, 2, 1, 3)), (b, n, c))
        return self.proj(out)


class AttentionSublayer(Module):
    """Pre-norm attention over windows ("block") or dilated grids ("grid")."""

    def __init__(self, channels, heads, size, mode, rng=None, dtype=np.float64):
        self.norm = LayerNorm(channels, dtype=dtype)
        self.attn = MultiHeadSelfAttention(channels, heads, rng=rng, dtype=dtype)
        self.size, self.mode = size, mode
        self.geometry = None

    def forward(self, x):
        n, h, w, c = x.shape
        P = self.size
        hp, wp = -(-h // P) * P, -(-w // P) * P
        z = self.norm(x)
        mask = None
        if (hp, wp) != (h, w):
            z = ad.pad(z, ((0, 0), (0, hp - h), (0, wp - w), (0, 0)))
            valid = np.zeros((n, hp, wp), dtype=bool)
            valid[:, :h, :w] = True
            mask = _np_partition(valid, P, self.mode)
        if self.mode == "block":
            y = _reverse_nhwc(self.attn(_partition_nhwc(z, P), mask), P, n, hp, wp)
        else:
            y = _grid_reverse_nhwc(self.attn(_grid_nhwc(z, P), mask), P, n, hp, wp)
        self.geometry = (n, h, w, hp, wp)
        if (hp, wp) != (h, w):
            y = y[:, :h, :w, :]
        return y


class SpatialBlock(Module):
    """Block-SA, SpikingMLP, Grid-SA, SpikingMLP; each a pre-norm residual. NHWC in/out."""

    def __init__(self, channels, heads, window_size, grid_size, neuron, mlp_ratio=4,
                 spiking_layers=2, timesteps=1, rng=None, dtype=np.float64):
        mlp = dict(ratio=mlp_ratio, spiking_layers=spiking_layers, timesteps=timesteps)
        self.block_attn = AttentionSublayer(channels, heads, window_size, "block", rng, dtype)
        self.mlp1 = PreNormMLP(channels, neuron, rng=rng, dtype=dtype, **mlp)
        self.grid_attn = AttentionSublayer(channels, heads, grid_size, "grid", rng, dtype)
        self.mlp2 = PreNormMLP(channels, neuron, rng=rng, dtype=dtype, **mlp)

    def forward(self, x):
        x = x + self.block_attn(x)
        x = x + self.mlp1(x)
        x = x + self.grid_attn(x)
        return x + self.mlp2(x)


# -- temporal modules ---------------------------------------------------------------


def _zeros_like_map(x):
    return Tensor(np.zeros(x.shape, dtype=x.dtype))


class LSTMTemporal(Module):
    """Per-position LSTM; gates (i, f, o, g) from one fused 1x1 linear on [x; h]."""

    emits_spikes = False

    def __init__(self, channels, neuron=None, rng=None, dtype=np.float64):
        self.channels = channels
        self.gates = Conv2d(2 * channels, 4 * channels, 1, rng=rng, dtype=dtype)

    def step(self, x, state=None):
        if state is None:
            state = {"h": _zeros_like_map(x), "c": _zeros_like_map(x)}
        C = self.channels
        z = self.gates(ad.concat([x, state["h"]], axis=1))
        i = ad.sigmoid(z[:, 0:C])
        f = ad.sigmoid(z[:, C:2 * C])
        o = ad.sigmoid(z[:, 2 * C:3 * C])
        g = ad.tanh(z[:, 3 * C:4 * C])
        c = f * state["c"] + i * g
        h = o * ad.tanh(c)
        return h, {"h": h, "c": c}


class STFETemporal(Module):
    """conv1x1 -> batchnorm -> LIF, then a spiking recurrent unit on [s; h]."""

    emits_spikes = True

    def __init__(self, channels, neuron, rng=None, dtype=np.float64):
        self.conv = Conv2d(channels, channels, 1, rng=rng, dtype=dtype)
        self.bn = BatchNorm2d(channels, dtype=dtype)
        self.sn_in = SpikingNeuron(neuron)
        self.recurrent = Conv2d(2 * channels, channels, 1, rng=rng, dtype=dtype, spiking_input=True)
        self.sn_h = SpikingNeuron(neuron)

    def step(self, x, state=None):
        if state is None:
            cfg = self.sn_in.cfg
            state = {"v_in": initial_state(cfg, x.shape, x.dtype).v,
                     "v_h": initial_state(cfg, x.shape, x.dtype).v,
                     "h": _zeros_like_map(x)}
        s, v_in = self.sn_in.step(NeuronState(state["v_in"]), self.bn(self.conv(x)))
        h, v_h = self.sn_h.step(NeuronState(state["v_h"]),
                                self.recurrent(ad.concat([s, state["h"]], axis=1)))
        return h, {"v_in": v_in.v, "v_h": v_h.v, "h": h}


class PlainNetTemporal(Module):
    """h' = spike(W [x; h]), membrane reset every step."""

    emits_spikes = True
    passes = 1

    def __init__(self, channels, neuron, rng=None, dtype=np.float64):
        self.mix = Conv2d(2 * channels, channels, 1, bias=False, rng=rng, dtype=dtype)
        self.sn = SpikingNeuron(neuron)

    def _fire(self, current):
        s, _ = self.sn.step(None, current)
        return s

    def step(self, x, state=None):
        h = state["h"] if state is not None else _zeros_like_map(x)
        for _ in range(self.passes):
            h = self._fire(self.mix(ad.concat([x, h], axis=1)))
        return h, {"h": h}


class FeedBackNetTemporal(PlainNetTemporal):
    """PlainNet applied twice per step; the second pass reads the first pass's output."""

    passes = 2


class StatefulSynapseTemporal(PlainNetTemporal):
    """PlainNet with a persistent low-pass synaptic trace feeding the neuron."""

    def __init__(self, channels, neuron, rng=None, dtype=np.float64, decay=0.5):
        super().__init__(channels, neuron, rng=rng, dtype=dtype)
        self.decay = decay

    def step(self, x, state=None):
        if state is None:
            state = {"h": _zeros_like_map(x), "a": _zeros_like_map(x)}
        current = self.mix(ad.concat([x, state["h"]], axis=1))
        a = state["a"] * self.decay + current * (1.0 - self.decay)
        h = self._fire(a)
        return h, {"h": h, "a": a}


TEMPORAL_CLASSES = {
    "LSTM": LSTMTemporal,
    "STFE": STFETemporal,
    "PlainNet": PlainNetTemporal,
    "FeedBackNet": FeedBackNetTemporal,
    "StatefulSynapse": StatefulSynapseTemporal,
}


def make_temporal(kind, channels, neuron=None, rng=None, dtype=np.float64):
    if kind in (None, "None"):
        return None
    return TEMPORAL_CLASSES[kind](channels, neuron or NeuronConfig(), rng=rng, dtype=dtype)


# -- stages & model -------------------------------------------------------------------


class Stage(Module):
    def __init__(self, in_ch, out_ch, kernel, stride, cfg, temporal_kind, timesteps,
                 spiking_input=False, rng=None):
        dtype = cfg.np_dtype
        self.down = Conv2d(in_ch, out_ch, kernel, stride, kernel // 2, rng=rng, dtype=dtype,
                           spiking_input=spiking_input)
        self.norm = LayerNorm(out_ch, dtype=dtype)
        heads = max(1, out_ch // cfg.head_dim)
        self.block = SpatialBlock(out_ch, heads, cfg.window_size, cfg.grid_size, cfg.neuron,
                                  cfg.mlp_ratio, cfg.mlp_spiking_layers, timesteps, rng, dtype)
        self.temporal = make_temporal(temporal_kind, out_ch, cfg.neuron, rng, dtype)
        self.fusion = cfg.fusion
        self.stride = stride

    @property
    def emits_spikes(self):
        return self.temporal is not None and self.temporal.emits_spikes and self.fusion == "replace"

    def forward(self, x, state=None):
        y = ad.transpose(self.down(x), (0, 2, 3, 1))
        y = self.block(self.norm(y))
        y = ad.transpose(y, (0, 3, 1, 2))
        if self.temporal is None:
            return y, None
        out, state = self.temporal.step(y, state)
        return (out if self.fusion == "replace" else y + out), state


class HsVT(Module):
    def __init__(self, cfg=None):
        cfg = cfg or HsVTConfig()
        self.cfg = cfg
        rng = np.random.default_rng(cfg.seed)
        stages, in_ch, spiking = [], cfg.in_channels, False
        for i, out_ch in enumerate(cfg.channels):
            st = Stage(in_ch, out_ch, STAGE_KERNELS[i], STAGE_STRIDES[i], cfg, cfg.placement[i],
                       cfg.stem_timesteps if i == 0 else 1, spiking_input=spiking, rng=rng)
            stages.append(st)
            in_ch, spiking = out_ch, st.emits_spikes
        self.stages = stages

    @property
    def total_stride(self):
        return self.cfg.strides[-1]

    def forward(self, x, states=None):
        """One window. Returns (per-stage NCHW outputs, per-stage carried states)."""
        if x.shape[1] != self.cfg.in_channels:
            raise ValueError(f"expected {self.cfg.in_channels} input channels, got {x.shape[1]}")
        h, w = x.shape[-2:]
        if h % self.total_stride or w % self.total_stride:
            raise ValueError(f"input {h}x{w} not divisible by {self.total_stride}; pad first")
        states = states or [None] * len(self.stages)
        outs, new_states = [], []
        for stage, st in zip(self.stages, states):
            x, st = stage(x, st)
            outs.append(x)
            new_states.append(st)
        return outs, new_states

    def set_retain_attention(self, flag=True):
        for m in self.modules():
            if isinstance(m, MultiHeadSelfAttention):
                m.retain = flag
                if not flag:
                    m.last_weights = None


def detach_states(states):
    if states is None:
        return None
    return [None if st is None else {k: v.detach() for k, v in st.items()} for st in states]


def hsvt_forward(model, frames, states=None, exposed=(1, 2, 3)):
    """Run the backbone over a window sequence.

    ``frames``: array or tensor [windows, N, C, H, W] (or [windows, C, H, W]).
    Returns (per-window list of exposed stage outputs, final states).
    """
    data = frames.data if isinstance(frames, Tensor) else np.asarray(frames)
    if data.ndim == 4:
        data = data[:, None]
    feats = []
    for window in data:
        outs, states = model(Tensor(window, dtype=model.cfg.np_dtype), states)
        feats.append([outs[i] for i in exposed if i < len(outs)])
    return feats, states


@dataclass
class AttentionMaps:
    """Per-stage retained attention weights: ``maps[stage][kind] -> [B, heads, n, n]``."""

    maps: dict
    geometry: dict


def attention_maps(model):
    maps, geometry = {}, {}
    for i, stage in enumerate(model.stages):
        maps[i] = {}
        for kind, sub in (("block", stage.block.block_attn), ("grid", stage.block.grid_attn)):
            if sub.attn.last_weights is not None:
                maps[i][kind] = sub.attn.last_weights
                geometry[(i, kind)] = (sub.size,) + sub.geometry
    return AttentionMaps(maps, geometry)
