"""Fixed-structure probabilistic programs as topologically sorted DAGs.

A graph is an ordered list of nodes; node j may only reference parents
with smaller indices. Each node carries a distribution whose parameters
are produced by link functions of the parent values (for the joint
density) or of the parent outputs (when compiled to a flow layer).
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Optional, Union

import numpy as np

from . import autodiff as ad
from .autodiff import Param, Tensor
from .errors import ConfigError, CycleError, ShapeError
from .special import LOG_2PI


def softplus_inv(y: float) -> float:
    """Raw value r with softplus(r) = y; y must be positive."""
    if y <= 0:
        raise ConfigError(f"softplus inverse needs a positive value, got {y}")
    return float(y + np.log1p(-np.exp(-y)))


# ---------------------------------------------------------------------------
# link functions: a closed algebra over parent values


@dataclass(frozen=True)
class Const:
    values: tuple

    def __call__(self, parents):
        return ad.constant(np.asarray(self.values, dtype=np.float64))


@dataclass(frozen=True)
class Select:
    parent: int
    component: Optional[int] = None

    def __call__(self, parents):
        t = parents[self.parent]
        if self.component is None:
            return t
        return ad.gather(t, [self.component])


@dataclass(frozen=True)
class Affine:
    scale: float
    offset: float
    inner: "Link"

    def __call__(self, parents):
        return self.inner(parents) * self.scale + self.offset


@dataclass(frozen=True)
class Sum:
    terms: tuple

    def __call__(self, parents):
        out = self.terms[0](parents)
        for term in self.terms[1:]:
            out = out + term(parents)
        return out


@dataclass(frozen=True)
class Diff:
    a: "Link"
    b: "Link"

    def __call__(self, parents):
        return self.a(parents) - self.b(parents)


@dataclass(frozen=True)
class TanhLink:
    inner: "Link"

    def __call__(self, parents):
        return ad.tanh(self.inner(parents))


@dataclass(frozen=True)
class LorenzDrift:
    """Mean of one Euler step of the Lorenz system; parent 0 is (x, y, z)."""

    s: float = 0.02
    phi: float = 10.0
    rho: float = 28.0
    beta: float = 8.0 / 3.0

    def __call__(self, parents):
        prev = parents[0]
        x = ad.gather(prev, [0])
        y = ad.gather(prev, [1])
        z = ad.gather(prev, [2])
        mx = x + self.s * (self.phi * (y - x))
        my = y + self.s * (x * (self.rho - z) - y)
        mz = z + self.s * (x * y - self.beta * z)
        return ad.concat([mx, my, mz])


@dataclass(frozen=True)
class VdpDrift:
    """Mean of one Euler step of the Van der Pol recursion; parent 0 is (x, y).

    Implements the discrete recipe exactly: the y update drops the -x
    restoring term of the continuous system.
    """

    s: float = 0.05
    mu: float = 1.0

    def __call__(self, parents):
        prev = parents[0]
        x = ad.gather(prev, [0])
        y = ad.gather(prev, [1])
        mx = x + self.s * y
        my = y + self.s * self.mu * (1.0 - ad.square(x)) * y
        return ad.concat([mx, my])


Link = Union[Const, Select, Affine, Sum, Diff, TanhLink, LorenzDrift, VdpDrift]


def link_parents(link) -> set:
    """Indices of the parent slots a link reads."""
    if isinstance(link, Const):
        return set()
    if isinstance(link, Select):
        return {link.parent}
    if isinstance(link, Affine):
        return link_parents(link.inner)
    if isinstance(link, Sum):
        out = set()
        for term in link.terms:
            out |= link_parents(term)
        return out
    if isinstance(link, Diff):
        return link_parents(link.a) | link_parents(link.b)
    if isinstance(link, TanhLink):
        return link_parents(link.inner)
    if isinstance(link, (LorenzDrift, VdpDrift)):
        return {0}
    raise TypeError(f"unknown link type {type(link)!r}")


# ---------------------------------------------------------------------------
# scale specifications


@dataclass(frozen=True)
class FixedScale:
    value: tuple

    def __call__(self, parents):
        return ad.constant(np.asarray(self.value, dtype=np.float64))


@dataclass(frozen=True)
class TrainableScale:
    """Positive scale stored unconstrained; softplus maps raw to std.

    Sharing the same Param across nodes shares the scale.
    """

    raw: Param

    def __call__(self, parents):
        return ad.softplus(ad.watch(self.raw))


@dataclass(frozen=True)
class LinkScale:
    link: Link

    def __call__(self, parents):
        return self.link(parents)


ScaleSpec = Union[FixedScale, TrainableScale, LinkScale]


def fixed_scale(value) -> FixedScale:
    arr = np.atleast_1d(np.asarray(value, dtype=np.float64))
    return FixedScale(tuple(arr.tolist()))


def trainable_scale(name: str, init=1.0, dim: int = 1) -> TrainableScale:
    raw = Param(name, np.full(dim, softplus_inv(float(init))))
    return TrainableScale(raw)


def scale_parents(scale) -> set:
    return link_parents(scale.link) if isinstance(scale, LinkScale) else set()


# ---------------------------------------------------------------------------
# distributions


@dataclass(frozen=True)
class Gaussian:
    mean: Link
    scale: ScaleSpec


@dataclass(frozen=True)
class GaussianMixture:
    """Scalar mixture of Gaussians with trainable weights, means, stds."""

    logits: Param
    means: Param
    raw_stds: Param

    @property
    def n_components(self) -> int:
        return self.logits.value.size


@dataclass(frozen=True)
class LogNormal:
    """log(x) is Gaussian with the given location and scale."""

    mean: Link
    scale: ScaleSpec


@dataclass(frozen=True)
class Bernoulli:
    logit: Link


DistributionSpec = Union[Gaussian, GaussianMixture, LogNormal, Bernoulli]


def gaussian_mixture(name: str, n_components: int, mean_lo=-4.0, mean_hi=4.0,
                     std_init=1.0) -> GaussianMixture:
    """Mixture with uniform weights and means evenly spaced on an interval."""
    if n_components < 1:
        raise ConfigError("mixture needs at least one component")
    if n_components == 1:
        means = np.array([0.5 * (mean_lo + mean_hi)])
    else:
        means = np.linspace(mean_lo, mean_hi, n_components)
    return GaussianMixture(
        logits=Param(f"{name}.weights", np.zeros(n_components)),
        means=Param(f"{name}.means", means),
        raw_stds=Param(f"{name}.stds",
                       np.full(n_components, softplus_inv(std_init))),
    )


# ---------------------------------------------------------------------------
# graph


@dataclass(frozen=True)
class NodeSpec:
    name: str
    parents: tuple
    dist: DistributionSpec
    dim: int = 1

    def param_links(self):
        links = set()
        if isinstance(self.dist, (Gaussian, LogNormal)):
            links |= link_parents(self.dist.mean)
            links |= scale_parents(self.dist.scale)
        elif isinstance(self.dist, Bernoulli):
            links |= link_parents(self.dist.logit)
        return links


@dataclass(frozen=True)
class ProgramGraph:
    name: str
    nodes: tuple

    def __post_init__(self):
        errors = validate(self)
        if errors:
            raise ConfigError(f"invalid graph {self.name!r}: " + "; ".join(errors))

    @property
    def total_dim(self) -> int:
        return sum(n.dim for n in self.nodes)

    def offsets(self):
        out, acc = [], 0
        for n in self.nodes:
            out.append(acc)
            acc += n.dim
        return out

    def params(self):
        seen, out = set(), []
        for node in self.nodes:
            dist = node.dist
            candidates = []
            if isinstance(dist, (Gaussian, LogNormal)):
                if isinstance(dist.scale, TrainableScale):
                    candidates.append(dist.scale.raw)
            elif isinstance(dist, GaussianMixture):
                candidates.extend([dist.logits, dist.means, dist.raw_stds])
            for p in candidates:
                if id(p) not in seen:
                    seen.add(id(p))
                    out.append(p)
        return out

    def node_index(self, name: str) -> int:
        for i, n in enumerate(self.nodes):
            if n.name == name:
                return i
        raise KeyError(name)

    def pack(self, per_node) -> np.ndarray:
        """Per-node arrays (each (..., dim_j)) to one flat (..., total) array."""
        arrays = [np.atleast_1d(np.asarray(v, dtype=np.float64)) for v in per_node]
        return np.concatenate(arrays, axis=-1)

    def unpack(self, flat: np.ndarray):
        flat = np.asarray(flat)
        out, acc = [], 0
        for n in self.nodes:
            out.append(flat[..., acc:acc + n.dim])
            acc += n.dim
        return out


def _validate_node(graph, j, node, errors):
    if node.dim < 1:
        errors.append(f"node {node.name!r}: dim must be >= 1")
    for p in node.parents:
        if not 0 <= p < j:
            errors.append(f"node {node.name!r}: forward reference to parent {p}")
    refs = node.param_links()
    expected = set(range(len(node.parents)))
    if refs != expected:
        errors.append(
            f"node {node.name!r}: link arity mismatch, links read parent slots "
            f"{sorted(refs)} but node declares {len(node.parents)} parents")
    if isinstance(node.dist, GaussianMixture) and node.dim != 1:
        errors.append(f"node {node.name!r}: mixture nodes must have dim 1")


def validate(graph: ProgramGraph):
    """Exhaustive structural check; returns a list of error strings."""
    errors = []
    if not graph.nodes:
        errors.append("graph has no nodes")
        return errors
    names = [n.name for n in graph.nodes]
    if len(set(names)) != len(names):
        dupes = sorted({n for n in names if names.count(n) > 1})
        errors.append(f"duplicate node names: {dupes}")
    for j, node in enumerate(graph.nodes):
        _validate_node(graph, j, node, errors)
    return errors


def topological_order(graph: ProgramGraph):
    """Nodes are stored pre-sorted; raises CycleError on a forward reference."""
    for j, node in enumerate(graph.nodes):
        for p in node.parents:
            if p >= j:
                raise CycleError(
                    f"node {node.name!r} references parent {p} at position {j}")
    return tuple(range(len(graph.nodes)))


# ---------------------------------------------------------------------------
# densities and sampling


def _gaussian_logpdf(x, mean, std):
    z = (x - mean) / std
    return -ad.log(std) - 0.5 * LOG_2PI - 0.5 * ad.square(z)


def node_log_prob(node: NodeSpec, value: Tensor, parent_values) -> Tensor:
    """Conditional log density of one node, summed over its dimensions."""
    dist = node.dist
    if isinstance(dist, Gaussian):
        mean = dist.mean(parent_values)
        std = dist.scale(parent_values)
        return ad.gaussian_logpdf(value, mean, std)
    if isinstance(dist, LogNormal):
        mean = dist.mean(parent_values)
        std = dist.scale(parent_values)
        log_value = ad.log(value)
        return ad.gaussian_logpdf(log_value, mean, std) \
            - ad.tsum(log_value, axis=-1)
    if isinstance(dist, GaussianMixture):
        log_w = _mixture_log_weights(dist)
        means = ad.watch(dist.means)
        stds = ad.softplus(ad.watch(dist.raw_stds))
        comp = _gaussian_logpdf(value, means, stds)  # broadcast (..., K)
        lp = ad.logsumexp(log_w + comp, axis=-1, keepdims=True)
        return ad.tsum(lp, axis=-1)
    if isinstance(dist, Bernoulli):
        logit = dist.logit(parent_values)
        return ad.bernoulli_logpdf(value, logit)
    raise TypeError(f"unknown distribution {type(dist)!r}")


def _mixture_log_weights(dist: GaussianMixture) -> Tensor:
    logits = ad.watch(dist.logits)
    return logits - ad.logsumexp(logits, axis=-1, keepdims=True)


def mixture_params(dist: GaussianMixture):
    """(log weights, means, stds) as tensors under the active tape."""
    return (_mixture_log_weights(dist), ad.watch(dist.means),
            ad.softplus(ad.watch(dist.raw_stds)))


def joint_log_prob(graph: ProgramGraph, values) -> Tensor:
    """Sum of conditional log densities over all nodes (per sample).

    ``values`` is a flat array/Tensor of shape (..., total_dim) or a list
    of per-node arrays.
    """
    if isinstance(values, (list, tuple)):
        flat = graph.pack([np.asarray(v) for v in values])
        values = ad.constant(flat)
    elif not isinstance(values, Tensor):
        values = ad.constant(values)
    if values.shape[-1] != graph.total_dim:
        raise ShapeError(
            f"graph {graph.name!r} expects {graph.total_dim} dims, "
            f"got {values.shape[-1]}")
    offsets = graph.offsets()
    node_values = [
        ad.gather(values, list(range(off, off + node.dim)))
        for off, node in zip(offsets, graph.nodes)
    ]
    total = None
    for j, node in enumerate(graph.nodes):
        parents = [node_values[p] for p in node.parents]
        lp = node_log_prob(node, node_values[j], parents)
        total = lp if total is None else total + lp
    return total


def ancestral_sample(graph: ProgramGraph, rng: np.random.Generator,
                     n: int = 1) -> np.ndarray:
    """Draw n joint samples in topological order; (n, total_dim)."""
    outputs = []
    for node in graph.nodes:
        parents = [Tensor(outputs[p]) for p in node.parents]
        dist = node.dist
        if isinstance(dist, Gaussian):
            mean = dist.mean(parents).value
            std = dist.scale(parents).value
            eps = rng.standard_normal((n, node.dim))
            value = np.broadcast_to(mean, (n, node.dim)) + std * eps
        elif isinstance(dist, LogNormal):
            mean = dist.mean(parents).value
            std = dist.scale(parents).value
            eps = rng.standard_normal((n, node.dim))
            value = np.exp(np.broadcast_to(mean, (n, node.dim)) + std * eps)
        elif isinstance(dist, GaussianMixture):
            logits = dist.logits.value
            w = np.exp(logits - logits.max())
            w = w / w.sum()
            comp = rng.choice(dist.n_components, size=(n, 1), p=w)
            eps = rng.standard_normal((n, 1))
            stds = np.log1p(np.exp(-np.abs(dist.raw_stds.value))) \
                + np.maximum(dist.raw_stds.value, 0.0)
            value = dist.means.value[comp] + stds[comp] * eps
        elif isinstance(dist, Bernoulli):
            logit = dist.logit(parents).value
            prob = 1.0 / (1.0 + np.exp(-np.broadcast_to(logit, (n, node.dim))))
            value = (rng.random((n, node.dim)) < prob).astype(np.float64)
        else:
            raise TypeError(f"unknown distribution {type(dist)!r}")
        outputs.append(np.asarray(value, dtype=np.float64))
    return np.concatenate(outputs, axis=-1)


# ---------------------------------------------------------------------------
# inference problems (prior graph + observations)


@dataclass
class InferenceProblem:
    """A graph whose trailing nodes are observed; the prefix is latent.

    ``true_latents`` holds the generating latent trajectory for synthetic
    tasks, enabling the forward-KL diagnostic.
    """

    name: str
    graph: ProgramGraph
    observed: dict = field(default_factory=dict)
    true_latents: Optional[np.ndarray] = None

    def __post_init__(self):
        names = [n.name for n in self.graph.nodes]
        observed_idx = sorted(names.index(k) for k in self.observed)
        n_latent = len(names) - len(observed_idx)
        if observed_idx != list(range(n_latent, len(names))):
            raise ConfigError("observed nodes must be the trailing nodes")
        self._n_latent = n_latent

    @property
    def latent_nodes(self):
        return self.graph.nodes[:self._n_latent]

    @property
    def latent_dim(self) -> int:
        return sum(n.dim for n in self.latent_nodes)

    def latent_graph(self) -> ProgramGraph:
        return ProgramGraph(f"{self.name}.prior", self.graph.nodes[:self._n_latent])

    def observed_flat(self) -> np.ndarray:
        parts = [np.atleast_1d(np.asarray(self.observed[n.name], dtype=np.float64))
                 for n in self.graph.nodes[self._n_latent:]]
        return np.concatenate(parts) if parts else np.zeros(0)

    def target_log_prob(self, z) -> Tensor:
        """log p(latents, observations) as a function of the latents."""
        if not isinstance(z, Tensor):
            z = ad.constant(z)
        if z.shape[-1] != self.latent_dim:
            raise ShapeError(
                f"problem {self.name!r} has {self.latent_dim} latent dims, "
                f"got {z.shape[-1]}")
        obs = self.observed_flat()
        obs_full = np.broadcast_to(obs, z.shape[:-1] + obs.shape)
        full = ad.concat([z, ad.constant(obs_full)])
        return joint_log_prob(self.graph, full)
