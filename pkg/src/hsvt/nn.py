"""Layer containers on top of :mod:`hsvt.autodiff`, plus checkpoint I/O.

Checkpoint layout (all little-endian)::

    8 bytes   magic b"HSVTCKP1"
    u32       entry count
    per entry, sorted by name:
      u16     name length, then UTF-8 name bytes
      u8      ndim, then ndim x u32 extents
      f64     product(extents) values, row-major
"""

from __future__ import annotations

import math
import struct
from pathlib import Path

import numpy as np

from . import autodiff as ad
from .autodiff import BatchNormState, Parameter

CHECKPOINT_MAGIC = b"HSVTCKP1"


class Module:
    """Minimal module tree: parameters, buffers, train/eval mode, cost hooks."""

    training = True
    _recorder = None
    path = ""

    def __call__(self, *args, **kwargs):
        return self.forward(*args, **kwargs)

    def _children(self):
        for name, value in vars(self).items():
            if name.startswith("_"):
                continue
            if isinstance(value, Module):
                yield name, value
            elif isinstance(value, (list, tuple)):
                for i, item in enumerate(value):
                    if isinstance(item, Module):
                        yield f"{name}.{i}", item

    def named_modules(self, prefix=""):
        yield prefix, self
        for name, child in self._children():
            yield from child.named_modules(f"{prefix}.{name}" if prefix else name)

    def modules(self):
        return [m for _, m in self.named_modules()]

    def named_parameters(self, prefix=""):
        for name, value in vars(self).items():
            if isinstance(value, Parameter):
                full = f"{prefix}.{name}" if prefix else name
                value.name = full
                yield full, value
        for name, child in self._children():
            yield from child.named_parameters(f"{prefix}.{name}" if prefix else name)

    def parameters(self):
        return [p for _, p in self.named_parameters()]

    def named_buffers(self, prefix=""):
        for name, value in vars(self).items():
            if isinstance(value, BatchNormState):
                full = f"{prefix}.{name}" if prefix else name
                yield f"{full}.running_mean", value, "running_mean"
                yield f"{full}.running_var", value, "running_var"
        for name, child in self._children():
            yield from child.named_buffers(f"{prefix}.{name}" if prefix else name)

    def num_parameters(self):
        return sum(p.size for p in self.parameters())

    def zero_grad(self):
        for p in self.parameters():
            p.zero_grad()

    def train(self, mode=True):
        for m in self.modules():
            m.training = mode
        return self

    def eval(self):
        return self.train(False)

    def assign_paths(self, root=""):
        for name, m in self.named_modules(root):
            m.path = name
        return self

    def state_dict(self):
        state = {name: p.data for name, p in self.named_parameters()}
        for name, holder, attr in self.named_buffers():
            state[name] = getattr(holder, attr)
        return state

    def load_state_dict(self, state):
        params = dict(self.named_parameters())
        buffers = {name: (holder, attr) for name, holder, attr in self.named_buffers()}
        missing = (set(params) | set(buffers)) - set(state)
        if missing:
            raise KeyError(f"checkpoint is missing entries: {sorted(missing)[:5]}")
        for name, value in state.items():
            if name in params:
                p = params[name]
                if p.shape != value.shape:
                    raise ValueError(f"{name}: shape {value.shape} != {p.shape}")
                p.data = np.array(value, dtype=p.dtype)
            elif name in buffers:
                holder, attr = buffers[name]
                setattr(holder, attr, np.array(value, dtype=getattr(holder, attr).dtype))
            else:
                raise KeyError(f"unexpected checkpoint entry {name}")


def _uniform(rng, shape, fan_in, dtype):
    bound = 1.0 / math.sqrt(fan_in)
    return rng.uniform(-bound, bound, size=shape).astype(dtype)


class Linear(Module):
    """``y = x @ W + b`` over the last axis.

    ``spiking_input`` and ``timesteps`` only feed the cost profiler: the
    layer's FLOPs are recorded per timestep and tagged as spike-driven.
    """

    def __init__(self, in_features, out_features, bias=True, rng=None, dtype=np.float64,
                 spiking_input=False, timesteps=1):
        rng = rng if rng is not None else np.random.default_rng(0)
        self.in_features, self.out_features = in_features, out_features
        self.W = Parameter(_uniform(rng, (in_features, out_features), in_features, dtype))
        self.b = Parameter(np.zeros(out_features, dtype=dtype)) if bias else None
        self.spiking_input = spiking_input
        self.timesteps = timesteps

    def forward(self, x):
        if x.shape[-1] != self.in_features:
            raise ValueError(f"Linear expects last extent {self.in_features}, got {x.shape}")
        lead = x.shape[:-1]
        flat = x if x.ndim == 2 else ad.reshape(x, (-1, self.in_features))
        y = ad.matmul(flat, self.W)
        if self.b is not None:
            y = y + self.b
        if self._recorder is not None:
            positions = flat.shape[0] // self.timesteps
            self._recorder.linear(self, x, 2 * self.in_features * self.out_features * positions)
        return y if x.ndim == 2 else ad.reshape(y, lead + (self.out_features,))


class Conv2d(Module):
    def __init__(self, in_channels, out_channels, kernel, stride=1, padding=0, bias=True,
                 rng=None, dtype=np.float64, spiking_input=False):
        rng = rng if rng is not None else np.random.default_rng(0)
        fan_in = in_channels * kernel * kernel
        self.in_channels, self.out_channels = in_channels, out_channels
        self.kernel, self.stride, self.padding = kernel, stride, padding
        self.W = Parameter(_uniform(rng, (out_channels, in_channels, kernel, kernel), fan_in, dtype))
        self.b = Parameter(np.zeros(out_channels, dtype=dtype)) if bias else None
        self.spiking_input = spiking_input
        self.timesteps = 1

    def forward(self, x):
        y = ad.conv2d(x, self.W, self.b, self.stride, self.padding)
        if self._recorder is not None:
            macs = self.in_channels * self.kernel * self.kernel * self.out_channels
            self._recorder.linear(self, x, 2 * macs * y.shape[2] * y.shape[3] * y.shape[0])
        return y


class BatchNorm2d(Module):
    def __init__(self, channels, eps=1e-5, momentum=0.1, dtype=np.float64):
        self.gamma = Parameter(np.ones(channels, dtype=dtype))
        self.beta = Parameter(np.zeros(channels, dtype=dtype))
        self.stats = BatchNormState(channels, momentum, dtype)
        self.eps = eps

    def forward(self, x):
        return ad.batchnorm2d(x, self.gamma, self.beta, self.stats, self.training, self.eps)


class LayerNorm(Module):
    def __init__(self, features, eps=1e-5, dtype=np.float64):
        self.gamma = Parameter(np.ones(features, dtype=dtype))
        self.beta = Parameter(np.zeros(features, dtype=dtype))
        self.eps = eps

    def forward(self, x):
        return ad.layernorm(x, self.gamma, self.beta, self.eps)


# -- checkpoints -----------------------------------------------------------------


def save_checkpoint(path, state):
    chunks = [CHECKPOINT_MAGIC, struct.pack("<I", len(state))]
    for name in sorted(state):
        arr = np.asarray(state[name], dtype="<f8")
        raw = name.encode("utf-8")
        chunks.append(struct.pack("<H", len(raw)) + raw)
        chunks.append(struct.pack("<B", arr.ndim) + struct.pack(f"<{arr.ndim}I", *arr.shape))
        chunks.append(np.ascontiguousarray(arr).tobytes())
    Path(path).write_bytes(b"".join(chunks))


def load_checkpoint(path):
    buf = Path(path).read_bytes()
    if buf[:8] != CHECKPOINT_MAGIC:
        raise ValueError(f"{path}: not a checkpoint (bad magic)")
    (count,) = struct.unpack_from("<I", buf, 8)
    off, state = 12, {}
    try:
        for _ in range(count):
            (nlen,) = struct.unpack_from("<H", buf, off)
            off += 2
            name = buf[off:off + nlen].decode("utf-8")
            off += nlen
            (ndim,) = struct.unpack_from("<B", buf, off)
            off += 1
            shape = struct.unpack_from(f"<{ndim}I", buf, off)
            off += 4 * ndim
            n = int(np.prod(shape)) if ndim else 1
            if off + 8 * n > len(buf):
                raise ValueError(f"{path}: truncated entry {name!r}")
            state[name] = np.frombuffer(buf, dtype="<f8", count=n, offset=off).reshape(shape).astype(np.float64)
            off += 8 * n
    except struct.error as exc:
        raise ValueError(f"{path}: truncated checkpoint") from exc
    return state
