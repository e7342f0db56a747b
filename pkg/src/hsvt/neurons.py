"""Spiking neurons (LIF / IF, hard reset), surrogate gradients and SpikingMLP."""

from __future__ import annotations

import math
from dataclasses import dataclass, field, replace

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor
from .nn import LayerNorm, Linear, Module

SURROGATE_DEFAULT_ALPHA = {"ATan": 2.0, "Sigmoid": 4.0}


@dataclass(frozen=True)
class NeuronConfig:
    kind: str = "LIF"
    v_threshold: float = 1.0
    v_reset: float = 0.0
    tau: float = 2.0
    surrogate: str = "ATan"
    alpha: float | None = None
    reset_mode: str = "hard"
    # relaxed: forward emits the smooth surrogate primitive instead of a hard
    # Heaviside spike (used for finite-difference gradient checks only)
    relaxed: bool = False
    _unchecked: bool = field(default=False, repr=False, compare=False)

    def __post_init__(self):
        if self.kind not in ("LIF", "IF"):
            raise ValueError(f"unknown neuron kind {self.kind!r}")
        if self.surrogate not in SURROGATE_DEFAULT_ALPHA:
            raise ValueError(f"unknown surrogate {self.surrogate!r}")
        if self.reset_mode != "hard":
            raise ValueError("only hard reset is supported")
        if self.alpha is None:
            object.__setattr__(self, "alpha", SURROGATE_DEFAULT_ALPHA[self.surrogate])
        if self.alpha <= 0:
            raise ValueError("surrogate alpha must be positive")
        if self.kind == "LIF" and not self.tau > 1:
            raise ValueError("LIF tau must exceed 1")
        if not self._unchecked and not self.v_threshold > self.v_reset:
            raise ValueError("v_threshold must exceed v_reset")

    @classmethod
    def always_fire(cls, **kwargs):
        """Test hook: a threshold so low that every neuron fires every step."""
        return cls(v_threshold=-1e12, v_reset=0.0, _unchecked=True, **kwargs)

    def with_(self, **kwargs):
        return replace(self, **kwargs)


def surrogate_grad(cfg, u):
    """Derivative of the smooth spike stand-in at ``u = v - v_threshold``."""
    u = np.asarray(u, dtype=float)
    a = cfg.alpha
    if cfg.surrogate == "ATan":
        return a / (2.0 * (1.0 + (math.pi / 2.0 * a * u) ** 2))
    th = np.tanh(0.5 * a * u)  # a * sig * (1 - sig), written to be exactly even in u
    return 0.25 * a * (1.0 - th * th)


def surrogate_primitive(cfg, u):
    """The smooth function whose derivative is :func:`surrogate_grad`."""
    u = np.asarray(u, dtype=float)
    a = cfg.alpha
    if cfg.surrogate == "ATan":
        return np.arctan(math.pi / 2.0 * a * u) / math.pi + 0.5
    return 0.5 * (1.0 + np.tanh(0.5 * a * u))


def spike(u, cfg):
    """Heaviside(u >= 0) forward, surrogate derivative backward.

    In relaxed mode the forward emits the surrogate primitive; the backward
    rule is identical in both modes.
    """
    if cfg.relaxed:
        out = surrogate_primitive(cfg, u.data).astype(u.dtype)
    else:
        out = (u.data >= 0).astype(u.dtype)
    return ad.record(out, (u,), lambda g: (g * surrogate_grad(cfg, u.data).astype(g.dtype),), "spike")


@dataclass
class NeuronState:
    v: Tensor


def initial_state(cfg, shape, dtype=np.float64):
    return NeuronState(Tensor(np.full(shape, cfg.v_reset, dtype=dtype)))


def neuron_step(cfg, state, x):
    """One charge / fire / hard-reset step. Returns ``(spikes, new_state)``."""
    v = state.v
    if v.shape != x.shape:
        raise ValueError(f"neuron state {v.shape} does not match input {x.shape}")
    if cfg.kind == "IF":
        h = v + x
    else:
        h = v + (x - (v - cfg.v_reset)) * (1.0 / cfg.tau)
    s = spike(h - cfg.v_threshold, cfg)
    v_next = h * (1.0 - s) + s * cfg.v_reset
    return s, NeuronState(v_next)


class SpikingNeuron(Module):
    """A neuron layer. Owns no parameters; keeps spike counts while profiled."""

    def __init__(self, cfg):
        self.cfg = cfg
        self.spike_count = 0.0
        self.neuron_steps = 0

    def step(self, state, x):
        if state is None:
            state = initial_state(self.cfg, x.shape, x.dtype)
        s, state = neuron_step(self.cfg, state, x)
        if self._recorder is not None:
            self._recorder.spikes(self, s)
        return s, state

    def run(self, currents):
        """Unroll over a list of per-timestep currents from a resting membrane."""
        state, spikes = None, []
        for x in currents:
            s, state = self.step(state, x)
            spikes.append(s)
        return spikes, state


class SpikingMLP(Module):
    """Token MLP whose hidden activations are spikes.

    ``fc1 -> neuron -> fc2 -> neuron -> ... -> proj``; with ``spiking_layers``
    neuron layers in total. Membranes start at rest every call. When
    ``timesteps > 1`` the same input current is presented for that many
    steps and the projected spike trains are averaged over time.
    """

    def __init__(self, channels, cfg, ratio=4, spiking_layers=2, timesteps=1, rng=None,
                 dtype=np.float64):
        if spiking_layers < 1:
            raise ValueError("SpikingMLP needs at least one spiking layer")
        hidden = ratio * channels
        self.channels, self.timesteps = channels, timesteps
        self.fc1 = Linear(channels, hidden, rng=rng, dtype=dtype)
        dims = [hidden] + [channels] * (spiking_layers - 1)
        self.neurons = [SpikingNeuron(cfg) for _ in range(spiking_layers)]
        self.inner = [Linear(dims[i], dims[i + 1], rng=rng, dtype=dtype, spiking_input=True,
                             timesteps=timesteps) for i in range(spiking_layers - 1)]
        self.proj = Linear(dims[-1], channels, rng=rng, dtype=dtype, spiking_input=True,
                           timesteps=timesteps)

    def forward(self, x, return_spikes=False):
        if x.shape[-1] != self.channels:
            raise ValueError(f"SpikingMLP expects {self.channels} channels, got {x.shape}")
        T = self.timesteps
        current = self.fc1(x)
        spikes, _ = self.neurons[0].run([current] * T)
        trace = [spikes]
        for lin, neuron in zip(self.inner, self.neurons[1:]):
            stacked = lin(ad.stack(spikes, axis=0) if T > 1 else spikes[0])
            currents = [stacked[t] for t in range(T)] if T > 1 else [stacked]
            spikes, _ = neuron.run(currents)
            trace.append(spikes)
        if T == 1:
            out = self.proj(spikes[0])
        else:
            # project each timestep's spikes, then average (same as projecting the rate)
            out = ad.mean(self.proj(ad.stack(spikes, axis=0)), axis=0)
        return (out, trace) if return_spikes else out


class PreNormMLP(Module):
    def __init__(self, channels, cfg, rng=None, dtype=np.float64, **kwargs):
        self.norm = LayerNorm(channels, dtype=dtype)
        self.mlp = SpikingMLP(channels, cfg, rng=rng, dtype=dtype, **kwargs)

    def forward(self, x):
        return self.mlp(self.norm(x))
