"""Trainable networks: context estimator, embedder, and gradient checking.

Parameters are float64 tape tensors owned by Module objects; gradients
accumulate in place and a single writer (the optimizer) mutates them.
Checkpoints are a named-tensor archive of row-major float32 data with a
JSON descriptor header; reloading a file reproduces its bytes exactly.
"""

from __future__ import annotations

import json
import os
import struct
from dataclasses import dataclass, field
from typing import Callable

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor
from .transform import ContextBounds, ContextParams, freq_coords

CHECKPOINT_MAGIC = b"CFSC"


class Module:
    """Container of parameters and submodules, torch-free."""

    def __init__(self):
        object.__setattr__(self, "_params", {})
        object.__setattr__(self, "_children", {})
        object.__setattr__(self, "training", True)

    def __setattr__(self, name, value):
        if isinstance(value, Tensor) and value.requires_grad:
            self._params[name] = value
        elif isinstance(value, Module):
            self._children[name] = value
        object.__setattr__(self, name, value)

    def named_parameters(self, prefix: str = ""):
        for name, p in self._params.items():
            yield (prefix + name, p)
        for name, child in self._children.items():
            yield from child.named_parameters(prefix + name + ".")

    def parameters(self):
        return [p for _, p in self.named_parameters()]

    def zero_grad(self):
        for p in self.parameters():
            p.zero_grad()

    def train(self, flag: bool = True):
        object.__setattr__(self, "training", flag)
        for child in self._children.values():
            child.train(flag)
        return self

    def eval(self):
        return self.train(False)

    def state_tensors(self, prefix: str = ""):
        """All persistent arrays (parameters plus buffers such as BN stats)."""
        out = {}
        for name, p in self._params.items():
            out[prefix + name] = p
        for k, v in self._buffers().items():
            out[prefix + k] = v
        for name, child in self._children.items():
            out.update(child.state_tensors(prefix + name + "."))
        return out

    def _buffers(self):
        return {}


def _fan_in_normal(rng, shape, fan_in):
    return rng.standard_normal(shape) / np.sqrt(fan_in)


class Conv2d(Module):
    def __init__(self, cin, cout, rng, k=3, stride=1, bias=True):
        super().__init__()
        self.stride = stride
        self.pad = k // 2
        self.weight = Tensor(_fan_in_normal(rng, (cout, cin, k, k), cin * k * k),
                             requires_grad=True)
        self.bias = Tensor(np.zeros(cout), requires_grad=True) if bias else None

    def forward(self, x: Tensor) -> Tensor:
        y = ad.conv2d(x, self.weight, stride=self.stride, pad=self.pad)
        if self.bias is not None:
            y = ad.add(y, ad.reshape(self.bias, (1, -1, 1, 1)))
        return y


class Linear(Module):
    def __init__(self, nin, nout, rng, zero_init=False):
        super().__init__()
        w = np.zeros((nout, nin)) if zero_init else _fan_in_normal(rng, (nout, nin), nin)
        self.weight = Tensor(w, requires_grad=True)
        self.bias = Tensor(np.zeros(nout), requires_grad=True)

    def forward(self, x: Tensor) -> Tensor:
        return ad.add(ad.matmul(x, _t(self.weight)), self.bias)


def _t(w: Tensor) -> Tensor:
    """Transpose view of a 2-D parameter for x @ W^T."""
    def bwd(g):
        w.accumulate(g.T)

    out = w.data.T
    if w.requires_grad and ad._GRAD_ENABLED:
        return Tensor(out, requires_grad=True, parents=(w,), backward=bwd)
    return Tensor(out)


class BatchNorm2d(Module):
    """Per-channel running-statistics normalization with train/eval flag."""

    def __init__(self, channels, momentum=0.1, eps=1e-5):
        super().__init__()
        self.momentum = momentum
        self.eps = eps
        self.gamma = Tensor(np.ones(channels), requires_grad=True)
        self.beta = Tensor(np.zeros(channels), requires_grad=True)
        self.running_mean = np.zeros(channels)
        self.running_var = np.ones(channels)

    def _buffers(self):
        return {"running_mean": self.running_mean, "running_var": self.running_var}

    def forward(self, x: Tensor) -> Tensor:
        if self.training:
            m = ad.tmean(x, axis=(0, 2, 3), keepdims=True)
            xc = ad.sub(x, m)
            v = ad.tmean(ad.square(xc), axis=(0, 2, 3), keepdims=True)
            self.running_mean += self.momentum * (m.data.ravel() - self.running_mean)
            self.running_var += self.momentum * (v.data.ravel() - self.running_var)
        else:
            m = Tensor(self.running_mean.reshape(1, -1, 1, 1))
            v = Tensor(self.running_var.reshape(1, -1, 1, 1))
            xc = ad.sub(x, m)
        xhat = ad.div(xc, ad.sqrt(ad.add(v, Tensor(self.eps))))
        return ad.add(ad.mul(xhat, ad.reshape(self.gamma, (1, -1, 1, 1))),
                      ad.reshape(self.beta, (1, -1, 1, 1)))


class ResidualBlock(Module):
    """conv-bn-softplus-conv-bn with a projected skip when shape changes.

    Softplus rather than ReLU keeps every loss smooth, which the
    finite-difference gradient contract relies on.
    """

    def __init__(self, cin, cout, rng, stride=1):
        super().__init__()
        self.conv1 = Conv2d(cin, cout, rng, stride=stride, bias=False)
        self.bn1 = BatchNorm2d(cout)
        self.conv2 = Conv2d(cout, cout, rng, bias=False)
        self.bn2 = BatchNorm2d(cout)
        if cin != cout or stride != 1:
            self.proj = Conv2d(cin, cout, rng, k=1, stride=stride, bias=False)
            self.proj_bn = BatchNorm2d(cout)
        else:
            self.proj = None

    def forward(self, x: Tensor) -> Tensor:
        h = ad.softplus(self.bn1.forward(self.conv1.forward(x)))
        h = self.bn2.forward(self.conv2.forward(h))
        skip = x if self.proj is None else self.proj_bn.forward(self.proj.forward(x))
        return ad.softplus(ad.add(h, skip))


@dataclass(frozen=True)
class EstimatorConfig:
    block_count: int = 3
    base_width: int = 16
    in_channels: int = 1


@dataclass(frozen=True)
class EmbedderConfig:
    stage_widths: tuple = (16, 32, 64, 128)
    blocks_per_stage: int = 2
    embed_dim: int = 64
    in_channels: int = 1

    def __post_init__(self):
        if self.embed_dim < 8:
            raise ValueError("embedding dimension must be at least 8")


class ContextEstimator(Module):
    """Residual conv stack with a squashing head onto the context bounds.

    Blocks after the first downsample by 2 so the pooled features keep
    absolute-position information (the frequency shift is invisible to
    global pooling at full resolution). The head is zero-initialized, so
    the untrained estimator predicts delta = 0, tau at the midpoint of
    its interval, b = s = 0.
    """

    def __init__(self, cfg: EstimatorConfig, bounds: ContextBounds, rng):
        super().__init__()
        self.cfg = cfg
        self.bounds = bounds
        blocks = [ResidualBlock(cfg.in_channels, cfg.base_width, rng)]
        for _ in range(cfg.block_count - 1):
            blocks.append(ResidualBlock(cfg.base_width, cfg.base_width, rng, stride=2))
        for i, blk in enumerate(blocks):
            setattr(self, f"block{i}", blk)
        self._blocks = blocks
        self.head = Linear(cfg.base_width, 4, rng, zero_init=True)

    def descriptor(self):
        return {"kind": "estimator", "block_count": self.cfg.block_count,
                "base_width": self.cfg.base_width, "in_channels": self.cfg.in_channels}

    def raw(self, x: Tensor) -> Tensor:
        h = x
        for blk in self._blocks:
            h = blk.forward(h)
        return self.head.forward(ad.tmean(h, axis=(2, 3)))

    def contexts(self, x: Tensor):
        """Per-sample (delta, tau, b, s) tensors, inside the bounds by
        construction of the squashing heads.

        All four heads squash (tanh for the symmetric intervals, sigmoid
        for tau): a hard clamp on b and s leaves their gradients dead
        once saturated, which stalls training.
        """
        r = self.raw(x)
        bd = self.bounds
        delta = ad.mul(Tensor(bd.delta_max), ad.tanh(r[:, 0]))
        tau = ad.add(Tensor(bd.tau_min),
                     ad.mul(Tensor(bd.tau_max - bd.tau_min), ad.sigmoid(r[:, 1])))
        b = ad.mul(Tensor(bd.b_max), ad.tanh(r[:, 2]))
        s = ad.mul(Tensor(bd.s_max), ad.tanh(r[:, 3]))
        return delta, tau, b, s


class FixedContextEstimator:
    """Estimator stand-in returning preset contexts (oracle and identity tests)."""

    def __init__(self, contexts, bounds: ContextBounds | None = None):
        if isinstance(contexts, ContextParams):
            contexts = [contexts]
        self._table = np.array([c.as_tuple() for c in contexts])
        self.bounds = bounds or ContextBounds()

    def contexts(self, x: Tensor):
        n = x.shape[0]
        tab = self._table
        if len(tab) == 1:
            tab = np.repeat(tab, n, axis=0)
        if len(tab) != n:
            raise ValueError(f"have {len(self._table)} preset contexts for batch of {n}")
        return tuple(Tensor(tab[:, j].copy()) for j in range(4))

    def eval(self):
        return self


class Embedder(Module):
    """Stage-wise residual convnet with global average pooling head."""

    def __init__(self, cfg: EmbedderConfig, rng):
        super().__init__()
        self.cfg = cfg
        blocks = []
        cin = cfg.in_channels
        for i, width in enumerate(cfg.stage_widths):
            for j in range(cfg.blocks_per_stage):
                stride = 2 if (i > 0 and j == 0) else 1
                blocks.append(ResidualBlock(cin, width, rng, stride=stride))
                cin = width
        for i, blk in enumerate(blocks):
            setattr(self, f"block{i}", blk)
        self._blocks = blocks
        self.head = Linear(cin, cfg.embed_dim, rng)

    def descriptor(self):
        return {"kind": "embedder", "stage_widths": list(self.cfg.stage_widths),
                "blocks_per_stage": self.cfg.blocks_per_stage,
                "embed_dim": self.cfg.embed_dim, "in_channels": self.cfg.in_channels}

    def embed_batch(self, x: Tensor) -> Tensor:
        h = x
        for blk in self._blocks:
            h = blk.forward(h)
        return self.head.forward(ad.tmean(h, axis=(2, 3)))


# ---------------------------------------------------------------------------
# single-sample pipeline entry points
# ---------------------------------------------------------------------------

def _check_input(net_in_channels: int, m: np.ndarray):
    if m.ndim != 3 or m.shape[0] != net_in_channels:
        raise ValueError(f"expected ({net_in_channels}, F, T) spectrogram, got {m.shape}")
    if not np.all(np.isfinite(m)):
        raise ValueError("spectrogram contains non-finite values")


def estimate_context(est: ContextEstimator, m: np.ndarray) -> ContextParams:
    """Deterministic eval-mode context estimate for one spectrogram."""
    _check_input(est.cfg.in_channels, m)
    was_training = est.training
    est.eval()
    try:
        with ad.no_grad():
            d, t, b, s = est.contexts(Tensor(m[None]))
    finally:
        est.train(was_training)
    vals = [d.data[0], t.data[0], b.data[0], s.data[0]]
    if not all(np.isfinite(v) for v in vals):
        raise FloatingPointError("estimator produced non-finite context")
    return ContextParams(*map(float, vals))


def inverse_warp_batch(x: Tensor, delta: Tensor, tau: Tensor, b: Tensor, s: Tensor) -> Tensor:
    """Differentiable inverse transform with per-sample contexts.

    Strips the amplitude envelope, then warps back with translation
    -delta and scale 1/tau (coordinates r + delta and r * tau).
    """
    B, C, F, T = x.shape
    rf = freq_coords(F)
    rt = freq_coords(T)
    env = ad.add(ad.reshape(b, (B, 1, 1, 1)),
                 ad.mul(ad.reshape(s, (B, 1, 1, 1)), Tensor(rf[None, None, :, None])))
    flat = ad.sub(x, env)
    fc = ad.clip(ad.add(Tensor(rf[None, :]), ad.reshape(delta, (B, 1))), -1.0, 1.0)
    tc = ad.clip(ad.mul(Tensor(rt[None, :]), ad.reshape(tau, (B, 1))), -1.0, 1.0)
    return ad.warp(flat, fc, tc)


def canonicalize_batch(est, x: Tensor) -> Tensor:
    """Estimate contexts and apply the inverse transform, end-to-end
    differentiable through the estimated context into the warp."""
    delta, tau, b, s = est.contexts(x)
    return inverse_warp_batch(x, delta, tau, b, s)


def canonicalize(est, m: np.ndarray) -> np.ndarray:
    """Eval-mode canonicalization of a single (C, F, T) spectrogram."""
    was_training = getattr(est, "training", False)
    if hasattr(est, "eval"):
        est.eval()
    try:
        with ad.no_grad():
            out = canonicalize_batch(est, Tensor(m[None]))
    finally:
        if hasattr(est, "train"):
            est.train(was_training)
    return out.data[0]


def embed(emb: Embedder, m: np.ndarray) -> np.ndarray:
    """Deterministic eval-mode embedding of a single spectrogram."""
    _check_input(emb.cfg.in_channels, m)
    was_training = emb.training
    emb.eval()
    try:
        with ad.no_grad():
            z = emb.embed_batch(Tensor(m[None]))
    finally:
        emb.train(was_training)
    z = z.data[0]
    if not np.all(np.isfinite(z)):
        raise FloatingPointError("embedder produced non-finite values")
    return z


# ---------------------------------------------------------------------------
# gradient checking
# ---------------------------------------------------------------------------

@dataclass
class GradCheckEntry:
    param: str
    index: int
    analytic: float
    numeric: float
    rel_err: float


@dataclass
class GradCheckReport:
    entries: list = field(default_factory=list)
    tol: float = 1e-3

    @property
    def max_rel_err(self) -> float:
        return max((e.rel_err for e in self.entries), default=0.0)

    @property
    def failures(self):
        return [e for e in self.entries if e.rel_err > self.tol]

    @property
    def passed(self) -> bool:
        return not self.failures


def grad_check(module, loss_fn: Callable[[], Tensor], probe_count: int = 10,
               step: float = 1e-4, rng=None, tol: float = 1e-3) -> GradCheckReport:
    """Central finite differences against the tape gradient.

    ``loss_fn`` must be deterministic and scalar-valued; it is re-evaluated
    2 * probe_count times with single parameters perturbed by ``step``.
    """
    rng = rng or np.random.default_rng(0)
    params = dict(module.named_parameters())
    module.zero_grad()
    loss = loss_fn()
    loss.backward()
    analytic = {k: (np.zeros_like(p.data) if p.grad is None else p.grad.copy())
                for k, p in params.items()}

    names = sorted(params)
    report = GradCheckReport(tol=tol)
    for _ in range(probe_count):
        name = names[rng.integers(len(names))]
        p = params[name]
        idx = int(rng.integers(p.data.size))
        flat = p.data.ravel()
        orig = flat[idx]
        flat[idx] = orig + step
        with ad.no_grad():
            up = loss_fn().item()
        flat[idx] = orig - step
        with ad.no_grad():
            down = loss_fn().item()
        flat[idx] = orig
        numeric = (up - down) / (2 * step)
        a = float(analytic[name].ravel()[idx])
        denom = max(abs(a), abs(numeric), 1e-8)
        rel = abs(a - numeric) / denom if max(abs(a), abs(numeric)) > 1e-12 else 0.0
        report.entries.append(GradCheckEntry(name, idx, a, numeric, rel))
    return report


# ---------------------------------------------------------------------------
# checkpointing
# ---------------------------------------------------------------------------

def save_checkpoint(path: str, tensors: dict, descriptor: dict):
    """Named-tensor archive: JSON header, then row-major float32 blocks.

    Written atomically (temp file + rename).
    """
    names = list(tensors)
    header = {"descriptor": descriptor,
              "tensors": [{"name": n, "shape": list(np.asarray(tensors[n]).shape)}
                          for n in names]}
    blob = json.dumps(header, sort_keys=True).encode()
    tmp = path + ".tmp"
    with open(tmp, "wb") as fh:
        fh.write(CHECKPOINT_MAGIC)
        fh.write(struct.pack("<II", 1, len(blob)))
        fh.write(blob)
        for n in names:
            fh.write(np.ascontiguousarray(tensors[n], dtype="<f4").tobytes())
    os.replace(tmp, path)


def load_checkpoint(path: str):
    with open(path, "rb") as fh:
        if fh.read(4) != CHECKPOINT_MAGIC:
            raise ValueError(f"{path} is not a checkpoint file")
        _, hlen = struct.unpack("<II", fh.read(8))
        header = json.loads(fh.read(hlen))
        tensors = {}
        for meta in header["tensors"]:
            n = int(np.prod(meta["shape"])) if meta["shape"] else 1
            data = np.frombuffer(fh.read(4 * n), dtype="<f4")
            tensors[meta["name"]] = data.reshape(meta["shape"]).copy()
    return tensors, header["descriptor"]


def load_into(module: Module, tensors: dict, prefix: str = ""):
    """Assign checkpoint tensors (cast to float64) into a module."""
    for name, arr in module.state_tensors(prefix).items():
        if name not in tensors:
            raise KeyError(f"checkpoint is missing tensor {name!r}")
        if isinstance(arr, Tensor):
            arr.data[...] = tensors[name].astype(np.float64).reshape(arr.data.shape)
        else:
            arr[...] = tensors[name].astype(np.float64).reshape(arr.shape)
