"""Minimal reverse-mode automatic differentiation over numpy arrays.

A :class:`Tensor` records the values of a computation node plus, for
non-leaf nodes, its parents and a vector-Jacobian closure. Calling
``backward`` on any node seeds its gradient and propagates adjoints in
reverse topological order, accumulating into every reachable leaf.

The resampling primitives from :mod:`arrn.resample` are wrapped here as
differentiable ops; their backward passes use closed-form adjoints:

* the perfect low-pass and the mean-rejection filter are self-adjoint,
* symmetric circular convolution is self-adjoint,
* stride decimation's adjoint is zero insertion,
* the fused spectral downsample's adjoint embeds the coarse spectrum back
  into the fine layout (see :func:`arrn.resample.downsample_adjoint_array`).
"""

from __future__ import annotations

from math import prod

import numpy as np

from . import macs
from .kernels import SmoothingKernelSpec
from .resample import (
    decimate_array,
    downsample_adjoint_array,
    downsample_array,
    lowpass_array,
    zero_insert_array,
)
from .signal import mean_reject_array


class Tensor:
    """A node in the reverse-mode graph."""

    __slots__ = ("values", "grad", "_parents", "_vjp")

    def __init__(self, values, parents=(), vjp=None):
        self.values = np.asarray(values)
        self.grad = None
        self._parents = tuple(parents)
        self._vjp = vjp

    @property
    def shape(self):
        return self.values.shape

    @property
    def dtype(self):
        return self.values.dtype

    def detach(self) -> np.ndarray:
        return self.values

    def zero_grad(self):
        self.grad = None

    def backward(self, seed: np.ndarray | None = None):
        """Propagate adjoints from this node back to every reachable leaf."""
        if seed is None:
            seed = np.ones_like(self.values)
        seed = np.asarray(seed, dtype=self.values.dtype)
        if seed.shape != self.values.shape:
            raise ValueError(f"seed shape {seed.shape} != value shape {self.shape}")

        topo: list[Tensor] = []
        visited: set[int] = set()
        stack = [(self, False)]
        while stack:
            node, expanded = stack.pop()
            if expanded:
                topo.append(node)
                continue
            if id(node) in visited:
                continue
            visited.add(id(node))
            stack.append((node, True))
            for parent in node._parents:
                stack.append((parent, False))

        self.grad = seed if self.grad is None else self.grad + seed
        for node in reversed(topo):
            if node._vjp is None or node.grad is None:
                continue
            for parent, contribution in zip(node._parents, node._vjp(node.grad)):
                if contribution is None:
                    continue
                if parent.grad is None:
                    parent.grad = contribution
                else:
                    parent.grad = parent.grad + contribution

    # operator sugar used by layers and tests
    def __add__(self, other):
        return add(self, other)

    def __sub__(self, other):
        return sub(self, other)

    def __mul__(self, other):
        if isinstance(other, Tensor):
            return mul(self, other)
        return scale(self, other)

    __rmul__ = __mul__

    def __repr__(self):
        return f"Tensor(shape={self.shape}, dtype={self.dtype})"


class Parameter(Tensor):
    """A trainable leaf tensor."""

    __slots__ = ("name", "decay")

    def __init__(self, values, name: str = "", decay: bool = True):
        super().__init__(np.asarray(values))
        self.name = name
        self.decay = decay

    def assign(self, values: np.ndarray):
        self.values = np.asarray(values, dtype=self.values.dtype)


def as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(np.asarray(x))


def add(a: Tensor, b: Tensor) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    return Tensor(a.values + b.values, (a, b), lambda g: (g, g))


def sub(a: Tensor, b: Tensor) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    return Tensor(a.values - b.values, (a, b), lambda g: (g, -g))


def mul(a: Tensor, b: Tensor) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    return Tensor(
        a.values * b.values, (a, b), lambda g: (g * b.values, g * a.values)
    )


def scale(a: Tensor, c: float) -> Tensor:
    return Tensor(a.values * c, (a,), lambda g: (g * c,))


def mul_const(a: Tensor, mask: np.ndarray) -> Tensor:
    """Elementwise product with a constant array (dropout masks, gates)."""
    return Tensor(a.values * mask, (a,), lambda g: (g * mask,))


# ---------------------------------------------------------------------------
# Differentiable resampling operators.
# ---------------------------------------------------------------------------


def mean_reject_op(x: Tensor, spatial_ndim: int) -> Tensor:
    out = mean_reject_array(x.values, spatial_ndim)
    return Tensor(out, (x,), lambda g: (mean_reject_array(g, spatial_ndim),))


def lowpass_op(
    x: Tensor,
    band_extents: tuple[int, ...],
    kernel: SmoothingKernelSpec,
    spatial_ndim: int,
) -> Tensor:
    from_extents = x.values.shape[x.values.ndim - spatial_ndim :]

    def run(v):
        return lowpass_array(v, from_extents, band_extents, kernel, spatial_ndim)

    # Both realizations are self-adjoint: the perfect variant is an
    # orthogonal projector and the spatial taps are symmetric.
    return Tensor(run(x.values), (x,), lambda g: (run(g),))


def downsample_op(
    x: Tensor,
    to_extents: tuple[int, ...],
    kernel: SmoothingKernelSpec,
    spatial_ndim: int,
) -> Tensor:
    fine = x.values.shape[x.values.ndim - spatial_ndim :]
    out = downsample_array(x.values, to_extents, kernel, spatial_ndim)

    def vjp(g):
        return (downsample_adjoint_array(g, fine, kernel, spatial_ndim),)

    return Tensor(out, (x,), vjp)


def decimate_op(x: Tensor, to_extents: tuple[int, ...], spatial_ndim: int) -> Tensor:
    fine = x.values.shape[x.values.ndim - spatial_ndim :]
    factors = tuple(n // m for n, m in zip(fine, to_extents))
    out = decimate_array(x.values, factors, spatial_ndim)
    return Tensor(out, (x,), lambda g: (zero_insert_array(g, fine, spatial_ndim),))


def project_channels(x: Tensor, weight: Tensor, channel_axis: int = 1) -> Tensor:
    """Apply a (out, in) matrix along one channel axis of a batched map."""
    w = weight.values
    sites = prod(s for i, s in enumerate(x.values.shape) if i != channel_axis)
    macs.add_macs(sites * w.shape[0] * w.shape[1])
    xv = np.moveaxis(x.values, channel_axis, -1)
    out = np.moveaxis(xv @ w.T, -1, channel_axis)

    def vjp(g):
        gm = np.moveaxis(g, channel_axis, -1)
        gx = np.moveaxis(gm @ w, -1, channel_axis)
        flat_g = gm.reshape(-1, gm.shape[-1])
        flat_x = np.moveaxis(x.values, channel_axis, -1).reshape(-1, w.shape[1])
        gw = flat_g.T @ flat_x
        return gx, gw

    return Tensor(out, (x, weight), vjp)


def gradient_check(
    output_fn,
    params: list[Tensor],
    h: float = 1e-3,
) -> float:
    """Max relative error between reverse-mode and central finite differences.

    ``output_fn`` must rebuild the graph from the current parameter values
    and return a Tensor. The scalar functional under test is the inner
    product of the output with a fixed random weighting, which avoids
    degenerate cases (e.g. operators whose output always sums to zero).
    The relative error is measured per parameter as
    ``max|g_ad - g_fd| / max(max|g_fd|, max|g_ad|, 1e-6)``; the floor
    keeps parameters with an exactly-zero gradient (e.g. a bias feeding a
    train-mode batch normalization) from dividing finite-difference noise
    by itself.
    """
    out = output_fn()
    weights = np.random.default_rng(1234).standard_normal(out.values.shape)
    weights = weights.astype(out.values.dtype)

    def objective():
        return float(np.sum(output_fn().values * weights))

    for p in params:
        p.zero_grad()
    out.backward(weights)
    worst = 0.0
    for p in params:
        analytic = p.grad if p.grad is not None else np.zeros_like(p.values)
        numeric = np.zeros_like(p.values)
        flat = p.values.reshape(-1)
        num_flat = numeric.reshape(-1)
        for i in range(flat.size):
            keep = flat[i]
            flat[i] = keep + h
            up = objective()
            flat[i] = keep - h
            down = objective()
            flat[i] = keep
            num_flat[i] = (up - down) / (2 * h)
        denom = max(
            float(np.max(np.abs(numeric))),
            float(np.max(np.abs(analytic))),
            1e-6,
        )
        worst = max(worst, float(np.max(np.abs(analytic - numeric))) / denom)
    return worst
