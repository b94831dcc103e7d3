"""Deterministic synthetic datasets, emission masking, and on-disk caching.

Every generator takes an integer seed and is bit-reproducible. Time
series lay their channels out interleaved per step: (x0, y0, z0, x1, ...).
"""

from __future__ import annotations

import csv
import json
import os
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .errors import ConfigError, MissingArtifact
from .programs import Affine, Bernoulli, Const, Diff, FixedScale, Gaussian, \
    InferenceProblem, LinkScale, LogNormal, LorenzDrift, NodeSpec, \
    ProgramGraph, Select, TanhLink, VdpDrift, ancestral_sample

# Classic study values (treatment effects and their standard errors).
EIGHT_SCHOOLS_Y = (28.0, 8.0, -3.0, 7.0, -1.0, 1.0, 18.0, 12.0)
EIGHT_SCHOOLS_SIGMA = (15.0, 10.0, 16.0, 11.0, 9.0, 11.0, 10.0, 18.0)


@dataclass
class Dataset:
    name: str
    samples: np.ndarray  # (count, event_dim)
    metadata: dict = field(default_factory=dict)
    mask: np.ndarray | None = None  # observed time steps (VI tasks)
    emissions: np.ndarray | None = None

    @property
    def event_dim(self) -> int:
        return self.samples.shape[1]

    @property
    def count(self) -> int:
        return self.samples.shape[0]


# ---------------------------------------------------------------------------
# 2d toy datasets


def gen_eight_gaussians(n: int, seed: int = 0) -> Dataset:
    """Equal-weight Gaussian blobs on 8 compass points.

    Matches the standard corpus construction: centers at radius 2 scaled
    by 2/sqrt(2) (so the final radius is 2*sqrt(2)) and component std
    0.5 under the same global 1/sqrt(2) normalization (final 0.3536).
    """
    rng = np.random.default_rng(seed)
    r = 1.0 / np.sqrt(2.0)
    centers = np.array([(1, 0), (-1, 0), (0, 1), (0, -1),
                        (r, r), (r, -r), (-r, r), (-r, -r)])
    centers = centers * 2.0 * (2.0 / np.sqrt(2.0))
    idx = rng.integers(0, 8, size=n)
    pts = centers[idx] + (0.5 / np.sqrt(2.0)) * rng.standard_normal((n, 2))
    meta = {"generator": "eight_gaussians", "seed": seed, "n": n}
    return Dataset("eight_gaussians", pts, meta)


def gen_checkerboard(n: int, seed: int = 0) -> Dataset:
    """Uniform over alternating unit squares tiling [-4, 4]^2."""
    rng = np.random.default_rng(seed)
    ix = rng.integers(-4, 4, size=n)
    iy = -4 + (ix % 2) + 2 * rng.integers(0, 4, size=n)
    pts = np.stack([ix + rng.random(n), iy + rng.random(n)], axis=1)
    meta = {"generator": "checkerboard", "seed": seed, "n": n}
    return Dataset("checkerboard", pts.astype(np.float64), meta)


# ---------------------------------------------------------------------------
# SDE prior graphs (fixed true parameters) and their sample generators


def brownian_graph(T: int, sigma: float = 0.1,
                   name: str = "brownian") -> ProgramGraph:
    scale = FixedScale((float(sigma),))
    nodes = [NodeSpec("t0", (), Gaussian(Const((0.0,)), scale))]
    for t in range(1, T):
        nodes.append(NodeSpec(f"t{t}", (t - 1,), Gaussian(Select(0), scale)))
    return ProgramGraph(name, tuple(nodes))


def ou_graph(T: int, mu0: float = 0.0, sigma0: float = 5.0,
             sigma: float = 0.5, theta: float = 0.8,
             name: str = "ou") -> ProgramGraph:
    nodes = [NodeSpec("t0", (), Gaussian(Const((float(mu0),)),
                                         FixedScale((float(sigma0),))))]
    step_scale = FixedScale((float(sigma),))
    for t in range(1, T):
        mean = Affine(float(theta), 0.0, Select(0))
        nodes.append(NodeSpec(f"t{t}", (t - 1,), Gaussian(mean, step_scale)))
    return ProgramGraph(name, tuple(nodes))


def lorenz_graph(T: int, s: float = 0.02, sigma: float = 0.1,
                 name: str = "lorenz") -> ProgramGraph:
    init = Gaussian(Const((0.0, 0.0, 0.0)), FixedScale((1.0, 1.0, 1.0)))
    nodes = [NodeSpec("t0", (), init, dim=3)]
    step = FixedScale((float(np.sqrt(s) * sigma),) * 3)
    for t in range(1, T):
        nodes.append(NodeSpec(f"t{t}", (t - 1,),
                              Gaussian(LorenzDrift(s=s), step), dim=3))
    return ProgramGraph(name, tuple(nodes))


def vdp_graph(T: int, s: float = 0.05, mu: float = 1.0, sigma: float = 0.1,
              name: str = "vdp") -> ProgramGraph:
    init = Gaussian(Const((0.0, 0.0)), FixedScale((1.0, 1.0)))
    nodes = [NodeSpec("t0", (), init, dim=2)]
    step = FixedScale((float(np.sqrt(s) * sigma),) * 2)
    for t in range(1, T):
        nodes.append(NodeSpec(f"t{t}", (t - 1,),
                              Gaussian(VdpDrift(s=s, mu=mu), step), dim=2))
    return ProgramGraph(name, tuple(nodes))


def gen_brownian(n: int, T: int = 30, sigma: float = 0.1,
                 geometric: bool = False, seed: int = 0) -> Dataset:
    rng = np.random.default_rng(seed)
    samples = ancestral_sample(brownian_graph(T, sigma), rng, n)
    if geometric:
        samples = np.exp(samples)
    gen = "geometric_brownian" if geometric else "brownian"
    meta = {"generator": gen, "seed": seed, "n": n, "T": T, "sigma": sigma,
            "channels": 1}
    return Dataset(gen, samples, meta)


def gen_ou(n: int, T: int = 30, mu0: float = 0.0, sigma0: float = 5.0,
           sigma: float = 0.5, theta: float = 0.8, seed: int = 0) -> Dataset:
    rng = np.random.default_rng(seed)
    samples = ancestral_sample(ou_graph(T, mu0, sigma0, sigma, theta), rng, n)
    meta = {"generator": "ou", "seed": seed, "n": n, "T": T, "mu0": mu0,
            "sigma0": sigma0, "sigma": sigma, "theta": theta, "channels": 1}
    return Dataset("ou", samples, meta)


def gen_lorenz(n: int, T: int = 30, s: float = 0.02, sigma: float = 0.1,
               seed: int = 0) -> Dataset:
    rng = np.random.default_rng(seed)
    samples = ancestral_sample(lorenz_graph(T, s, sigma), rng, n)
    meta = {"generator": "lorenz", "seed": seed, "n": n, "T": T, "s": s,
            "sigma": sigma, "channels": 3}
    return Dataset("lorenz", samples, meta)


def gen_vdp(n: int, T: int = 120, s: float = 0.05, mu: float = 1.0,
            sigma: float = 0.1, seed: int = 0) -> Dataset:
    rng = np.random.default_rng(seed)
    samples = ancestral_sample(vdp_graph(T, s, mu, sigma), rng, n)
    meta = {"generator": "vdp", "seed": seed, "n": n, "T": T, "s": s,
            "mu": mu, "sigma": sigma, "channels": 2}
    return Dataset("vdp", samples, meta)


GENERATORS = {
    "eight_gaussians": gen_eight_gaussians,
    "checkerboard": gen_checkerboard,
    "brownian": gen_brownian,
    "geometric_brownian": lambda n, seed=0, **kw: gen_brownian(
        n, geometric=True, seed=seed, **kw),
    "ou": gen_ou,
    "lorenz": gen_lorenz,
    "vdp": gen_vdp,
}


# ---------------------------------------------------------------------------
# standardization


def standardize(ds: Dataset) -> Dataset:
    """Per-column z-score; the statistics go into the metadata so a
    density in standardized units can be mapped back to raw units."""
    mean = ds.samples.mean(axis=0)
    std = ds.samples.std(axis=0)
    std = np.where(std > 0, std, 1.0)
    out = (ds.samples - mean) / std
    meta = dict(ds.metadata)
    meta["standardized"] = True
    meta["standardize_mean"] = mean.tolist()
    meta["standardize_std"] = std.tolist()
    return Dataset(ds.name, out, meta, ds.mask, ds.emissions)


def apply_standardization(ds: Dataset, mean, std) -> Dataset:
    """Standardize with externally supplied statistics (train stats)."""
    mean = np.asarray(mean)
    std = np.asarray(std)
    out = (ds.samples - mean) / std
    meta = dict(ds.metadata)
    meta["standardized"] = True
    meta["standardize_mean"] = mean.tolist()
    meta["standardize_std"] = std.tolist()
    return Dataset(ds.name, out, meta, ds.mask, ds.emissions)


# ---------------------------------------------------------------------------
# emissions and inference problems


def gen_emissions(latent: np.ndarray, channels: int, kind: str, param: float,
                  mask_kind: str = "smoothing", bridge_edge: int = 10,
                  seed: int = 0):
    """Per-time-step emissions of the first channel of one trajectory.

    ``kind`` is "gaussian" (param = emission std) or "bernoulli"
    (param = gain k on the logit). Returns (emissions, observed mask),
    both of length T. The bridge mask hides everything but the first and
    last ``bridge_edge`` steps.
    """
    latent = np.asarray(latent, dtype=np.float64).reshape(-1)
    if latent.size % channels:
        raise ConfigError("latent length is not a multiple of channels")
    T = latent.size // channels
    x = latent.reshape(T, channels)[:, 0]
    rng = np.random.default_rng(seed)
    if kind == "gaussian":
        emissions = x + param * rng.standard_normal(T)
    elif kind == "bernoulli":
        prob = 1.0 / (1.0 + np.exp(-param * x))
        emissions = (rng.random(T) < prob).astype(np.float64)
    else:
        raise ConfigError(f"unknown emission kind {kind!r}")
    if mask_kind == "smoothing":
        mask = np.ones(T, dtype=bool)
    elif mask_kind == "bridge":
        mask = np.zeros(T, dtype=bool)
        mask[:bridge_edge] = True
        mask[T - bridge_edge:] = True
    else:
        raise ConfigError(f"unknown mask kind {mask_kind!r}")
    return emissions, mask


_DYNAMICS = {
    "brownian": dict(graph=brownian_graph, T=30, channels=1, k=5.0,
                     sigma_e=0.15, bridge_edge=10),
    "lorenz": dict(graph=lorenz_graph, T=30, channels=3, k=2.0,
                   sigma_e=1.0, bridge_edge=10),
    "vdp": dict(graph=vdp_graph, T=120, channels=2, k=1.0,
                sigma_e=0.5, bridge_edge=40),
}


def make_timeseries_problem(dynamics: str, emission: str = "bernoulli",
                            task: str = "smoothing", seed: int = 0,
                            T: int | None = None) -> InferenceProblem:
    """Latent SDE prior with noisy emissions of its first channel.

    The generating trajectory is kept as ``true_latents``. Only observed
    time steps contribute emission nodes, so the bridge task simply has
    no emission nodes in the hidden window.
    """
    if dynamics not in _DYNAMICS:
        raise ConfigError(f"unknown dynamics {dynamics!r}")
    info = _DYNAMICS[dynamics]
    T = info["T"] if T is None else T
    channels = info["channels"]
    prior = info["graph"](T)
    rng = np.random.default_rng(seed)
    latent = ancestral_sample(prior, rng, 1)[0]
    param = info["k"] if emission == "bernoulli" else info["sigma_e"]
    emissions, mask = gen_emissions(latent, channels, emission, param,
                                    mask_kind=task,
                                    bridge_edge=info["bridge_edge"],
                                    seed=seed + 1)
    nodes = list(prior.nodes)
    observed = {}
    comp = 0 if channels > 1 else None
    for t in range(T):
        if not mask[t]:
            continue
        sel = Select(0, component=comp)
        if emission == "bernoulli":
            dist = Bernoulli(Affine(float(param), 0.0, sel))
        else:
            dist = Gaussian(sel, FixedScale((float(param),)))
        nodes.append(NodeSpec(f"e{t}", (t,), dist))
        observed[f"e{t}"] = np.array([emissions[t]])
    tag = {"smoothing": "s", "bridge": "b"}[task]
    kind = {"bernoulli": "c", "gaussian": "r"}[emission]
    name = f"{dynamics}-{tag}-{kind}"
    graph = ProgramGraph(name, tuple(nodes))
    return InferenceProblem(name, graph, observed, true_latents=latent)


def build_eight_schools(mu_std: float = 10.0):
    """Hierarchical school-effects graph plus its observed data.

    The population-mean prior is N(0, mu_std^2); the default reads the
    textbook "N(0, 100)" as variance 100. The between-school scale is
    log-normal with log-space location 5 and scale 1.
    """
    nodes = [
        NodeSpec("mu", (), Gaussian(Const((0.0,)),
                                    FixedScale((float(mu_std),)))),
        NodeSpec("tau", (), LogNormal(Const((5.0,)), FixedScale((1.0,)))),
    ]
    for i in range(8):
        nodes.append(NodeSpec(f"theta{i}", (0, 1),
                              Gaussian(Select(0), LinkScale(Select(1)))))
    observed = {}
    for i, (y, s) in enumerate(zip(EIGHT_SCHOOLS_Y, EIGHT_SCHOOLS_SIGMA)):
        nodes.append(NodeSpec(f"y{i}", (2 + i,),
                              Gaussian(Select(0), FixedScale((float(s),)))))
        observed[f"y{i}"] = np.array([y])
    graph = ProgramGraph("eight_schools", tuple(nodes))
    return graph, observed


def make_eight_schools_problem(mu_std: float = 10.0) -> InferenceProblem:
    graph, observed = build_eight_schools(mu_std)
    return InferenceProblem("eight_schools", graph, observed)


def build_binary_tree(depth: int, link: str = "linear",
                      sigma: float = 1.0) -> ProgramGraph:
    """Reverse binary tree; layer 0 has 2^(depth-1) standard-normal roots
    and each later node couples two parents through the link function."""
    if depth < 2:
        raise ConfigError(f"tree depth must be >= 2, got {depth}")
    if link not in ("linear", "tanh"):
        raise ConfigError(f"unknown tree link {link!r}")
    scale = FixedScale((float(sigma),))
    nodes = []
    prev_layer = []
    for i in range(2 ** (depth - 1)):
        prev_layer.append(len(nodes))
        nodes.append(NodeSpec(f"x0_{i}", (), Gaussian(Const((0.0,)),
                                                      FixedScale((1.0,)))))
    for d in range(1, depth):
        layer = []
        for i in range(2 ** (depth - 1 - d)):
            p1, p2 = prev_layer[2 * i], prev_layer[2 * i + 1]
            if link == "linear":
                mean = Diff(Select(0), Select(1))
            else:
                mean = Diff(TanhLink(Select(0)), TanhLink(Select(1)))
            layer.append(len(nodes))
            nodes.append(NodeSpec(f"x{d}_{i}", (p1, p2),
                                  Gaussian(mean, scale)))
        prev_layer = layer
    return ProgramGraph(f"tree_{link}_{depth}", tuple(nodes))


def make_binary_tree_problem(depth: int, link: str = "linear",
                             sigma: float = 1.0,
                             seed: int = 0) -> InferenceProblem:
    """Tree posterior problem: the final node is observed."""
    graph = build_binary_tree(depth, link, sigma)
    rng = np.random.default_rng(seed)
    full = ancestral_sample(graph, rng, 1)[0]
    observed = {graph.nodes[-1].name: full[-1:]}
    name = f"tree-{link}-{depth}"
    return InferenceProblem(name, graph, observed,
                            true_latents=full[:-1])


PROBLEM_DYNAMICS = tuple(_DYNAMICS)


# ---------------------------------------------------------------------------
# cache: <dataset>-<seed>-<n>.bin with a text sidecar of generator params


def cache_dir(override=None) -> Path:
    if override is not None:
        return Path(override)
    return Path(os.environ.get("EMFLOW_CACHE_DIR", ".emflow-cache"))


def dataset_paths(ds_name: str, seed: int, n: int, directory) -> tuple:
    stem = f"{ds_name}-{seed}-{n}"
    directory = Path(directory)
    return directory / f"{stem}.bin", directory / f"{stem}.meta"


def save_dataset(ds: Dataset, directory) -> Path:
    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    bin_path, meta_path = dataset_paths(ds.name, ds.metadata.get("seed", 0),
                                        ds.count, directory)
    ds.samples.astype(np.float64).tofile(bin_path)
    meta = dict(ds.metadata)
    meta["event_dim"] = ds.event_dim
    meta["count"] = ds.count
    meta["name"] = ds.name
    meta_path.write_text(json.dumps(meta, indent=2, sort_keys=True) + "\n")
    return bin_path


def load_dataset(name: str, seed: int, n: int, directory) -> Dataset:
    bin_path, meta_path = dataset_paths(name, seed, n, directory)
    if not bin_path.exists() or not meta_path.exists():
        raise MissingArtifact(f"no cached dataset at {bin_path}")
    meta = json.loads(meta_path.read_text())
    samples = np.fromfile(bin_path, dtype=np.float64)
    samples = samples.reshape(meta["count"], meta["event_dim"])
    return Dataset(meta["name"], samples, meta)


def export_csv(ds: Dataset, path):
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow([f"x{j}" for j in range(ds.event_dim)])
        for row in ds.samples:
            writer.writerow([repr(float(v)) for v in row])
