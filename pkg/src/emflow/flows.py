"""Flow models: named layer stacks, log density, sampling, checkpoints.

Layers are stored in forward (base-to-data) application order. The log
density of a point runs the inverse pass and adds the base log density
to the accumulated log determinants. Variational models sample
differentiably and report the density of their own samples from the
same forward pass.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field, asdict

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor
from .bijectors import Chain, ElementwiseAffine, Invert, Layer, \
    MadeConditioner, MaskedAutoregressive, Permutation, TriangularAffine
from .errors import ConfigError, ShapeError
from .programs import ProgramGraph
from .structured import STRUCTURE_BUILDERS, StructuredLayer, \
    build_mixture_structure

DENSITY_ARCHS = ("MAF", "MAF-L", "B-MAF", "EMF-T", "EMF-M", "GEMF-T", "GEMF-M")
VARIATIONAL_ARCHS = ("IAF", "GEMF-T", "EMF-T", "MF", "MVN",
                     "MF-GEMF-T", "MVN-GEMF-T", "MF-EMF-T", "MVN-EMF-T")


@dataclass
class ArchitectureSpec:
    """Recipe for a named flow stack."""

    name: str
    orientation: str = "density"  # density estimation vs variational
    structure: str | None = None  # continuity | smoothness | hierarchical | mixture
    structure_options: dict = field(default_factory=dict)
    hidden: tuple = (64, 64)
    activation: str | None = None  # default: tanh plain, relu with structure
    permutation_seed: int = 0
    conditioner_seed: int = 0
    gate_init: float | None = None  # default 0.5 density, 0.999 variational
    gate_scale: float = 100.0

    def to_json(self) -> str:
        d = asdict(self)
        d["hidden"] = list(self.hidden)
        return json.dumps(d, sort_keys=True)

    @staticmethod
    def from_json(s: str) -> "ArchitectureSpec":
        d = json.loads(s)
        d["hidden"] = tuple(d["hidden"])
        return ArchitectureSpec(**d)


class FlowModel:
    def __init__(self, layers, event_dim: int, orientation: str = "density"):
        self.stack = Chain(layers)
        if self.stack.dim is not None and self.stack.dim != event_dim:
            raise ShapeError(
                f"layer dim {self.stack.dim} != event dim {event_dim}")
        self.event_dim = event_dim
        self.orientation = orientation

    @property
    def layers(self):
        return self.stack.layers

    def params(self):
        return self.stack.params()

    @property
    def param_count(self) -> int:
        return sum(p.size for p in self.params())

    def base_log_prob(self, x) -> Tensor:
        return ad.gaussian_logpdf(x, ad.constant(0.0), ad.constant(1.0))

    def log_prob(self, y) -> Tensor:
        y = ad._as_tensor(y)
        if y.shape[-1] != self.event_dim:
            raise ShapeError(f"expected event dim {self.event_dim}, "
                             f"got {y.shape[-1]}")
        x, ildj = self.stack.inverse(y)
        return self.base_log_prob(x) + ildj

    def sample(self, rng: np.random.Generator, n: int) -> np.ndarray:
        x = rng.standard_normal((n, self.event_dim))
        y, _ = self.stack.forward(ad.constant(x))
        return y.value

    def sample_and_log_prob(self, rng: np.random.Generator, n: int):
        """Reparameterized samples with their own log density (one pass)."""
        eps = rng.standard_normal((n, self.event_dim))
        base = ad.constant(eps)
        z, fldj = self.stack.forward(base)
        log_q = self.base_log_prob(base) - fldj
        return z, log_q


# ---------------------------------------------------------------------------
# architecture assembly


def _draw_permutation(dim: int, rng: np.random.Generator) -> np.ndarray:
    """Seeded random permutation, re-drawn until it is not the identity."""
    if dim == 1:
        return np.array([0])
    perm = rng.permutation(dim)
    while np.array_equal(perm, np.arange(dim)):
        perm = rng.permutation(dim)
    return perm


def _structured_from_spec(spec: ArchitectureSpec, event_dim: int,
                          prior_graph: ProgramGraph | None, gated: bool):
    if prior_graph is not None:
        graph = prior_graph
    else:
        if spec.structure is None:
            raise ConfigError(f"architecture {spec.name} needs a structure")
        opts = dict(spec.structure_options)
        if spec.structure == "mixture":
            opts.setdefault("dim", event_dim)
            graph = build_mixture_structure(**opts)
        elif spec.structure in STRUCTURE_BUILDERS:
            graph = STRUCTURE_BUILDERS[spec.structure](**opts)
        else:
            raise ConfigError(f"unknown structure {spec.structure!r}")
    if graph.total_dim != event_dim:
        raise ShapeError(
            f"structure dim {graph.total_dim} != event dim {event_dim}")
    default_gate = 0.999 if spec.orientation == "variational" else 0.5
    gate_init = spec.gate_init if spec.gate_init is not None else default_gate
    return StructuredLayer(graph, gated=gated, gate_scale=spec.gate_scale,
                           gate_init=gate_init)


def assemble(spec: ArchitectureSpec, event_dim: int,
             prior_graph: ProgramGraph | None = None) -> FlowModel:
    """Build the named architecture; deterministic given spec and seeds."""
    name = spec.name
    variational = spec.orientation == "variational"
    allowed = VARIATIONAL_ARCHS if variational else DENSITY_ARCHS
    if name not in allowed:
        raise ConfigError(
            f"unknown architecture {name!r} for {spec.orientation} models")

    has_structure = name in ("B-MAF", "EMF-T", "EMF-M", "GEMF-T", "GEMF-M",
                             "MF-GEMF-T", "MVN-GEMF-T", "MF-EMF-T",
                             "MVN-EMF-T")
    activation = spec.activation or ("relu" if has_structure else "tanh")
    perm_rng = np.random.default_rng(spec.permutation_seed)

    def ar_layer(idx: int) -> Layer:
        cond = MadeConditioner(event_dim, hidden=spec.hidden,
                               activation=activation,
                               seed=spec.conditioner_seed + idx,
                               name=f"ar{idx}")
        layer = MaskedAutoregressive(cond)
        return Invert(layer) if variational else layer

    def perm_layer() -> Layer:
        return Permutation(_draw_permutation(event_dim, perm_rng))

    if name == "MF":
        return FlowModel([ElementwiseAffine(event_dim, name="mf")],
                         event_dim, spec.orientation)
    if name == "MVN":
        return FlowModel([TriangularAffine(event_dim, name="mvn")],
                         event_dim, spec.orientation)
    if name in ("MF-GEMF-T", "MVN-GEMF-T", "MF-EMF-T", "MVN-EMF-T"):
        base = ElementwiseAffine(event_dim, name="mf") if name.startswith("MF") \
            else TriangularAffine(event_dim, name="mvn")
        gated = "GEMF" in name
        struct = _structured_from_spec(spec, event_dim, prior_graph, gated)
        return FlowModel([base, struct], event_dim, spec.orientation)

    if name == "MAF-L":
        layers = [ar_layer(0), perm_layer(), ar_layer(1), perm_layer(),
                  ar_layer(2)]
        return FlowModel(layers, event_dim, spec.orientation)
    if name in ("MAF", "IAF"):
        return FlowModel([ar_layer(0), perm_layer(), ar_layer(1)],
                         event_dim, spec.orientation)
    if name == "B-MAF":
        struct = _structured_from_spec(spec, event_dim, prior_graph, False)
        return FlowModel([struct, ar_layer(0), ar_layer(1)],
                         event_dim, spec.orientation)
    if name in ("EMF-T", "GEMF-T"):
        struct = _structured_from_spec(spec, event_dim, prior_graph,
                                       name.startswith("G"))
        return FlowModel([ar_layer(0), perm_layer(), ar_layer(1), struct],
                         event_dim, spec.orientation)
    if name in ("EMF-M", "GEMF-M"):
        struct = _structured_from_spec(spec, event_dim, prior_graph,
                                       name.startswith("G"))
        return FlowModel([ar_layer(0), perm_layer(), struct, ar_layer(1)],
                         event_dim, spec.orientation)
    raise ConfigError(f"unhandled architecture {name!r}")


# ---------------------------------------------------------------------------
# checkpoints: spec + flat parameter vector, bit-exact reload

CHECKPOINT_VERSION = 1


def save_checkpoint(path, model: FlowModel, spec: ArchitectureSpec):
    params = model.params()
    flat = np.concatenate([p.value.ravel() for p in params]) if params \
        else np.zeros(0)
    np.savez(path,
             version=np.array(CHECKPOINT_VERSION),
             spec=np.frombuffer(spec.to_json().encode(), dtype=np.uint8),
             event_dim=np.array(model.event_dim),
             params=flat)


def load_checkpoint(path, prior_graph: ProgramGraph | None = None):
    with np.load(path) as data:
        version = int(data["version"])
        if version != CHECKPOINT_VERSION:
            raise ConfigError(f"unsupported checkpoint version {version}")
        spec = ArchitectureSpec.from_json(bytes(data["spec"]).decode())
        event_dim = int(data["event_dim"])
        flat = data["params"]
    model = assemble(spec, event_dim, prior_graph=prior_graph)
    params = model.params()
    total = sum(p.size for p in params)
    if total != flat.size:
        raise ConfigError(
            f"checkpoint has {flat.size} parameters, model needs {total}")
    offset = 0
    for p in params:
        p.value[...] = flat[offset:offset + p.size].reshape(p.value.shape)
        offset += p.size
    return spec, model
