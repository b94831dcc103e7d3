"""Compile a program graph into a (gated) invertible flow layer.

The forward pass runs node by node in topological order: each node's
base input is pushed through the invertible transform of its conditional
distribution, conditioning on the already-transformed parent outputs,
then blended with the input through a per-node gate
``out = lam * transformed + (1 - lam) * in``. With standard-normal input
and all gates at 1, the output is distributed exactly as the program.

The inverse pass needs no recursion: conditioning values are read
directly from the given output vector, so all nodes invert in parallel
order. Gates are per-node scalars shared across that node's dimensions,
``lam = sigmoid(gate_scale * raw)``.
"""

from __future__ import annotations

import math

import numpy as np

from . import autodiff as ad
from . import roots
from .autodiff import Param, Tensor
from .bijectors import Layer, mixture_cdf_forward_direction, \
    mixture_cdf_inverse_direction, _softmax_np, _softplus_np
from .errors import ConfigError, NonFiniteError, ShapeError, UnsupportedForGated
from .programs import Affine, Bernoulli, Const, Diff, FixedScale, Gaussian, \
    GaussianMixture, LogNormal, NodeSpec, ProgramGraph, Select, \
    gaussian_mixture, mixture_params, trainable_scale
from .special import LOG_2PI

DEFAULT_GATE_SCALE = 100.0


def gate_raw_init(target: float, gate_scale: float = DEFAULT_GATE_SCALE) -> float:
    """Raw gate value whose sigmoid(gate_scale * raw) equals ``target``."""
    if not 0.0 < target < 1.0:
        raise ConfigError(f"gate target must be in (0, 1), got {target}")
    return math.log(target / (1.0 - target)) / gate_scale


class StructuredLayer(Layer):
    """Invertible layer compiled from a program graph, optionally gated."""

    def __init__(self, graph: ProgramGraph, gated: bool = False,
                 gate_scale: float = DEFAULT_GATE_SCALE,
                 gate_init: float = 0.5, name: str | None = None):
        for node in graph.nodes:
            if isinstance(node.dist, Bernoulli):
                raise ConfigError(
                    f"node {node.name!r}: Bernoulli nodes are not invertible")
            if gated and isinstance(node.dist, GaussianMixture):
                raise UnsupportedForGated(
                    f"node {node.name!r}: mixture nodes cannot be gated")
        self.graph = graph
        self.dim = graph.total_dim
        self.gated = gated
        self.gate_scale = gate_scale
        self._offsets = graph.offsets()
        base = name or graph.name
        if gated:
            raw = gate_raw_init(gate_init, gate_scale)
            self.gates = Param(f"{base}.gates",
                               np.full(len(graph.nodes), raw))
        else:
            self.gates = None

    def params(self):
        out = self.graph.params()
        if self.gates is not None:
            out = out + [self.gates]
        return out

    def _lambdas(self, gate_values):
        """Per-node gate tensor; injection overrides trained gates."""
        n = len(self.graph.nodes)
        if gate_values is not None:
            lam = np.broadcast_to(np.asarray(gate_values, dtype=np.float64),
                                  (n,)).copy()
            bad = [node.name for node, lj in zip(self.graph.nodes, lam)
                   if lj != 1.0 and isinstance(node.dist, GaussianMixture)]
            if bad:
                raise UnsupportedForGated(
                    f"cannot inject gates below 1 on mixture nodes {bad}")
            return ad.constant(lam)
        if self.gates is None:
            return ad.constant(np.ones(n))
        return ad.sigmoid(ad.watch(self.gates) * self.gate_scale)

    def _cols(self, j):
        off = self._offsets[j]
        return list(range(off, off + self.graph.nodes[j].dim))

    def forward(self, x, gate_values=None):
        x = ad._as_tensor(x)
        if x.shape[-1] != self.dim:
            raise ShapeError(f"expected event dim {self.dim}, got {x.shape[-1]}")
        lams = self._lambdas(gate_values)
        batch = x.shape[:-1]
        total = ad.constant(np.zeros(batch))
        outputs: list[Tensor] = []
        for j, node in enumerate(self.graph.nodes):
            x_j = ad.gather(x, self._cols(j))
            parents = [outputs[p] for p in node.parents]
            lam = ad.gather(lams, [j])
            y_j, ldj = _node_forward(node, x_j, parents, lam)
            if not np.all(np.isfinite(y_j.value)):
                raise NonFiniteError(
                    f"non-finite output at node {node.name!r}")
            outputs.append(y_j)
            total = total + ldj
        y = ad.concat(outputs) if len(outputs) > 1 else outputs[0]
        return y, total

    def inverse(self, y, gate_values=None):
        y = ad._as_tensor(y)
        if y.shape[-1] != self.dim:
            raise ShapeError(f"expected event dim {self.dim}, got {y.shape[-1]}")
        lams = self._lambdas(gate_values)
        batch = y.shape[:-1]
        total = ad.constant(np.zeros(batch))
        inputs: list[Tensor] = []
        for j, node in enumerate(self.graph.nodes):
            y_j = ad.gather(y, self._cols(j))
            parents = [ad.gather(y, self._cols(p)) for p in node.parents]
            lam = ad.gather(lams, [j])
            x_j, ldj = _node_inverse(node, y_j, parents, lam)
            if not np.all(np.isfinite(x_j.value)):
                raise NonFiniteError(
                    f"non-finite inverse at node {node.name!r}")
            inputs.append(x_j)
            total = total + ldj
        x = ad.concat(inputs) if len(inputs) > 1 else inputs[0]
        return x, total


def _widen(sigma, dim):
    """Scales of length 1 on a multi-dim node must count once per dim."""
    if dim > 1 and sigma.shape[-1] == 1:
        return sigma * ad.constant(np.ones(dim))
    return sigma


def _node_forward(node: NodeSpec, x_j, parents, lam):
    dist = node.dist
    if isinstance(dist, Gaussian):
        mu = dist.mean(parents)
        sigma = _widen(dist.scale(parents), node.dim)
        y = ad.gated_affine(x_j, mu, sigma, lam)
        return y, ad.gated_slope_logdet(sigma, lam)
    if isinstance(dist, LogNormal):
        mu = dist.mean(parents)
        sigma = dist.scale(parents)
        t = ad.exp(mu + sigma * x_j)
        y = lam * t + (1.0 - lam) * x_j
        deriv = lam * sigma * t + (1.0 - lam)
        return y, _sum_ldj(ad.log(deriv))
    if isinstance(dist, GaussianMixture):
        w = _softmax_np(dist.logits.value)
        means = dist.means.value
        stds = _softplus_np(dist.raw_stds.value)
        y_val = mixture_cdf_forward_direction(x_j.value[..., 0], w, means, stds)
        y = ad.constant(y_val[..., None])
        log_w, means_t, stds_t = mixture_params(dist)
        _, ildj = mixture_cdf_inverse_direction(y, log_w, means_t, stds_t)
        return y, ad.constant(-np.sum(ildj.value, axis=-1))
    raise ConfigError(f"node {node.name!r}: unsupported distribution")


def _node_inverse(node: NodeSpec, y_j, parents, lam):
    dist = node.dist
    if isinstance(dist, Gaussian):
        mu = dist.mean(parents)
        sigma = _widen(dist.scale(parents), node.dim)
        x = ad.gated_affine_inv(y_j, mu, sigma, lam)
        return x, -ad.gated_slope_logdet(sigma, lam)
    if isinstance(dist, LogNormal):
        mu = dist.mean(parents)
        sigma = dist.scale(parents)
        if np.all(lam.value == 1.0):
            x = (ad.log(y_j) - mu) / sigma
            deriv = sigma * y_j
            return x, _sum_ldj(-ad.log(deriv))
        x = _lognormal_gated_solve(y_j.value, mu.value, sigma.value, lam.value)
        x_t = ad.constant(x)
        t = np.exp(np.broadcast_to(mu.value, x.shape) + sigma.value * x)
        deriv = lam.value * sigma.value * t + (1.0 - lam.value)
        return x_t, ad.constant(-np.sum(np.log(deriv), axis=-1))
    if isinstance(dist, GaussianMixture):
        log_w, means, stds = mixture_params(dist)
        x, ildj = mixture_cdf_inverse_direction(y_j, log_w, means, stds)
        return x, ad.tsum(ildj, axis=-1)
    raise ConfigError(f"node {node.name!r}: unsupported distribution")


def _sum_ldj(elem):
    """Sum an elementwise log-det over the event dims of one node.

    Scalar or (batch,) results broadcast correctly when added to the
    running (batch,) total.
    """
    return ad.tsum(elem, axis=-1) if elem.ndim > 0 else elem


def _lognormal_gated_solve(y, mu, sigma, lam):
    """Numeric inverse of lam*exp(mu + sigma*x) + (1-lam)*x = y (eager)."""
    y = np.asarray(y, dtype=np.float64)
    out = np.empty_like(y)
    ys = y.reshape(-1)
    mus = np.broadcast_to(mu, y.shape).reshape(-1)
    sgs = np.broadcast_to(sigma, y.shape).reshape(-1)
    lms = np.broadcast_to(lam, y.shape).reshape(-1)
    outs = out.reshape(-1)
    for i in range(ys.size):
        yi, mi, si, li = ys[i], mus[i], sgs[i], lms[i]

        def g(x):
            return li * math.exp(mi + si * x) + (1.0 - li) * x - yi

        lo, hi = -1.0, 1.0
        for _ in range(60):
            if g(lo) <= 0.0:
                break
            lo *= 2.0
        for _ in range(60):
            if g(hi) >= 0.0:
                break
            hi *= 2.0
        bracket = roots.make_bracket(g, lo, hi)
        outs[i] = roots.chandrupatla(g, bracket)
    return out


def exactness_log_prob(layer: StructuredLayer, sample):
    """Base log-density of the inverse plus its log-det.

    For an ungated layer this equals the graph's joint log density at the
    sample; raises UnsupportedForGated when trainable gates are present.
    """
    if layer.gated:
        raise UnsupportedForGated("exactness holds only for ungated layers")
    x, ildj = layer.inverse(sample)
    base = ad.tsum(-0.5 * ad.square(x) - 0.5 * LOG_2PI, axis=-1)
    return base + ildj


# ---------------------------------------------------------------------------
# named structure builders


def build_continuity_structure(T: int, init_scale: float = 1.0,
                               channels: int = 1,
                               name: str = "continuity") -> ProgramGraph:
    """First-order random-walk chain with one shared trainable scale.

    Node 0 is centered at zero; node t is centered at node t-1. With
    ``channels`` > 1 the chain runs independently per channel with one
    shared scale parameter per channel.
    """
    if T < 1:
        raise ConfigError(f"continuity needs T >= 1, got {T}")
    shared = trainable_scale(f"{name}.scale", init_scale, dim=channels)
    zeros = Const(tuple([0.0] * channels))
    nodes = [NodeSpec("t0", (), Gaussian(zeros, shared), dim=channels)]
    for t in range(1, T):
        nodes.append(NodeSpec(f"t{t}", (t - 1,),
                              Gaussian(Select(0), shared), dim=channels))
    return ProgramGraph(name, tuple(nodes))


def build_smoothness_structure(T: int, init_scale: float = 1.0,
                               channels: int = 1,
                               name: str = "smoothness") -> ProgramGraph:
    """Second-order chain: mean extrapolates the last two outputs.

    The first two nodes are standard normal; later nodes are centered at
    2*prev - prev2 with a shared trainable scale.
    """
    if T < 2:
        raise ConfigError(f"smoothness needs T >= 2, got {T}")
    shared = trainable_scale(f"{name}.scale", init_scale, dim=channels)
    zeros = Const(tuple([0.0] * channels))
    unit = FixedScale(tuple([1.0] * channels))
    nodes = [
        NodeSpec("t0", (), Gaussian(zeros, unit), dim=channels),
        NodeSpec("t1", (), Gaussian(zeros, unit), dim=channels),
    ]
    for t in range(2, T):
        mean = Diff(Affine(2.0, 0.0, Select(0)), Select(1))
        nodes.append(NodeSpec(f"t{t}", (t - 1, t - 2),
                              Gaussian(mean, shared), dim=channels))
    return ProgramGraph(name, tuple(nodes))


def build_hierarchical_structure(m: int, n: int, sigma: float = 1.0,
                                 nu: float = 1.0, trainable: bool = False,
                                 name: str = "hierarchical") -> ProgramGraph:
    """m population means, each with n-1 members centered on their mean."""
    if m < 1 or n < 2:
        raise ConfigError(f"hierarchical needs m >= 1 and n >= 2, got {m}, {n}")
    if trainable:
        root_scale = trainable_scale(f"{name}.sigma", sigma)
        leaf_scale = trainable_scale(f"{name}.nu", nu)
    else:
        root_scale = FixedScale((float(sigma),))
        leaf_scale = FixedScale((float(nu),))
    nodes = [NodeSpec(f"m{k}", (), Gaussian(Const((0.0,)), root_scale))
             for k in range(m)]
    for k in range(m):
        for j in range(n - 1):
            nodes.append(NodeSpec(f"x{j}_{k}", (k,),
                                  Gaussian(Select(0), leaf_scale)))
    return ProgramGraph(name, tuple(nodes))


def build_mixture_structure(dim: int, n_components: int,
                            mean_lo: float = -4.0, mean_hi: float = 4.0,
                            std_init: float = 1.0,
                            name: str = "mixture") -> ProgramGraph:
    """dim independent mixture-of-Gaussians nodes with evenly spaced means."""
    if dim < 1 or n_components < 1:
        raise ConfigError("mixture structure needs dim >= 1 and K >= 1")
    nodes = []
    for j in range(dim):
        mix = gaussian_mixture(f"{name}.{j}", n_components,
                               mean_lo=mean_lo, mean_hi=mean_hi,
                               std_init=std_init)
        nodes.append(NodeSpec(f"x{j}", (), mix))
    return ProgramGraph(name, tuple(nodes))


STRUCTURE_BUILDERS = {
    "continuity": build_continuity_structure,
    "smoothness": build_smoothness_structure,
    "hierarchical": build_hierarchical_structure,
    "mixture": build_mixture_structure,
}
