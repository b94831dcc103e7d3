"""Experiment orchestration: strict config parsing, runs, comparison tables.

Config files are INI-style with sections [experiment], [dataset],
[problem], [architecture], [train]. Unknown sections or keys abort
before any compute. Every run writes, under the output directory:
results.csv (one row per seed, 6 significant digits), summary.json
(full precision), and trace-<seed>.csv metric traces.
"""

from __future__ import annotations

import ast
import configparser
import json
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .datasets import GENERATORS, apply_standardization, export_csv, \
    make_binary_tree_problem, make_eight_schools_problem, \
    make_timeseries_problem, save_dataset, standardize
from .errors import ConfigError, MissingArtifact
from .flows import ArchitectureSpec, assemble
from .programs import Affine, Bernoulli, Const, Diff, FixedScale, \
    Gaussian, InferenceProblem, LinkScale, LogNormal, NodeSpec, \
    ProgramGraph, Select, Sum, TanhLink, gaussian_mixture, trainable_scale
from .training import RunResult, TrainConfig, mle_train, vi_fit, write_trace

_KNOWN_KEYS = {
    "experiment": {"kind", "out", "seeds"},
    "dataset": {"name", "n_train", "n_test", "standardize", "data_seed",
                "test_seed", "T", "sigma", "geometric", "mu0", "sigma0",
                "theta", "s", "mu", "export_csv"},
    "problem": {"name", "emission", "task", "data_seed", "T", "depth",
                "link", "mu_std"},
    "architecture": {"name", "structure", "program", "hidden", "activation",
                     "permutation_seed", "conditioner_seed", "gate_init",
                     "gate_scale", "n_components", "mean_lo", "mean_hi",
                     "std_init", "init_scale", "T", "channels", "m", "n",
                     "solver"},
    "train": {"iterations", "batch_size", "learning_rate", "schedule",
              "schedule_total", "eval_every", "mc_samples", "clip_norm"},
    "compare": {"rows", "columns", "metric"},
    "runs": None,  # free-form run-directory mapping for compare tables
}

_INT_KEYS = {"n_train", "n_test", "data_seed", "test_seed", "T", "depth",
             "permutation_seed", "conditioner_seed", "n_components",
             "channels", "m", "n", "iterations", "batch_size",
             "schedule_total", "eval_every", "mc_samples"}
_FLOAT_KEYS = {"sigma", "mu0", "sigma0", "theta", "s", "mu", "mu_std",
               "gate_init", "gate_scale", "mean_lo", "mean_hi", "std_init",
               "init_scale", "learning_rate", "clip_norm"}
_BOOL_KEYS = {"standardize", "geometric", "export_csv"}


@dataclass
class ExperimentConfig:
    kind: str
    out: str | None = None
    seeds: tuple = (0,)
    dataset: dict = field(default_factory=dict)
    problem: dict = field(default_factory=dict)
    architecture: dict = field(default_factory=dict)
    train: dict = field(default_factory=dict)
    compare: dict = field(default_factory=dict)
    runs: dict = field(default_factory=dict)


def _coerce(key: str, raw: str):
    raw = raw.strip()
    if key in _INT_KEYS:
        return int(raw)
    if key in _FLOAT_KEYS:
        return float(raw)
    if key in _BOOL_KEYS:
        if raw.lower() in ("true", "1", "yes"):
            return True
        if raw.lower() in ("false", "0", "no"):
            return False
        raise ConfigError(f"boolean key {key!r} got {raw!r}")
    return raw


def parse_config(path, overrides=()) -> ExperimentConfig:
    parser = configparser.ConfigParser()
    parser.optionxform = str  # keys are case-sensitive (e.g. T)
    read = parser.read(path)
    if not read:
        raise ConfigError(f"cannot read config file {path}")
    data: dict = {}
    for section in parser.sections():
        if section not in _KNOWN_KEYS:
            raise ConfigError(f"unknown config section [{section}]")
        allowed = _KNOWN_KEYS[section]
        data[section] = {}
        for key, raw in parser.items(section):
            if allowed is not None and key not in allowed:
                raise ConfigError(f"unknown key {key!r} in section [{section}]")
            data[section][key] = raw
    for ov in overrides:
        if "=" not in ov or "." not in ov.split("=", 1)[0]:
            raise ConfigError(f"override must look like section.key=value: {ov!r}")
        target, value = ov.split("=", 1)
        section, key = target.split(".", 1)
        if section not in _KNOWN_KEYS:
            raise ConfigError(f"override names unknown section [{section}]")
        allowed = _KNOWN_KEYS[section]
        if allowed is not None and key not in allowed:
            raise ConfigError(f"override names unknown key {key!r} in [{section}]")
        data.setdefault(section, {})[key] = value

    exp = data.get("experiment", {})
    kind = exp.get("kind", "")
    seeds = tuple(int(s) for s in exp.get("seeds", "0").split())
    cfg = ExperimentConfig(kind=kind, out=exp.get("out"), seeds=seeds)
    for section in ("dataset", "problem", "architecture", "train"):
        cfg_section = {}
        for key, raw in data.get(section, {}).items():
            cfg_section[key] = _coerce(key, raw)
        setattr(cfg, section, cfg_section)
    cfg.compare = data.get("compare", {})
    cfg.runs = data.get("runs", {})
    return cfg


# ---------------------------------------------------------------------------
# program description files (custom structures)
#
# Line-based grammar, one node per line after an optional "name" line:
#   name <identifier>
#   node <name> [parents=<p1,p2>] [dim=<d>] dist=gaussian \
#        mean=<expr> scale=<scale>
#   node <name> dist=mixture components=<K> [mean_lo=..] [mean_hi=..] \
#        [std_init=..]
#   node <name> parents=<p> dist=lognormal mean=<expr> scale=<scale>
#   node <name> parents=<p> dist=bernoulli logit=<expr>
# <expr> is an arithmetic expression over parent slots p0, p1, ...:
# numbers, + - *, unary minus, tanh(...), and component access pK[i].
# <scale> is a number, an <expr>, or train:<init>[:<shared-name>].


def _parse_link_expr(text: str, n_parents: int):
    try:
        tree = ast.parse(text.strip(), mode="eval")
    except SyntaxError as exc:
        raise ConfigError(f"bad link expression {text!r}: {exc}") from exc

    def build(node):
        if isinstance(node, ast.Expression):
            return build(node.body)
        if isinstance(node, ast.Constant) and isinstance(node.value, (int, float)):
            return Const((float(node.value),))
        if isinstance(node, ast.Name):
            return Select(_parent_slot(node.id))
        if isinstance(node, ast.Subscript):
            if not isinstance(node.value, ast.Name):
                raise ConfigError(f"bad component access in {text!r}")
            idx = node.slice
            if not (isinstance(idx, ast.Constant) and isinstance(idx.value, int)):
                raise ConfigError(f"component index must be literal in {text!r}")
            return Select(_parent_slot(node.value.id), component=idx.value)
        if isinstance(node, ast.UnaryOp) and isinstance(node.op, ast.USub):
            inner = build(node.operand)
            if isinstance(inner, Const):
                return Const(tuple(-v for v in inner.values))
            return Affine(-1.0, 0.0, inner)
        if isinstance(node, ast.Call):
            if not (isinstance(node.func, ast.Name) and node.func.id == "tanh"
                    and len(node.args) == 1 and not node.keywords):
                raise ConfigError(f"only tanh(...) calls allowed, got {text!r}")
            return TanhLink(build(node.args[0]))
        if isinstance(node, ast.BinOp):
            if isinstance(node.op, ast.Add):
                a, b = build(node.left), build(node.right)
                if isinstance(b, Const) and len(b.values) == 1:
                    return Affine(1.0, b.values[0], a)
                if isinstance(a, Const) and len(a.values) == 1:
                    return Affine(1.0, a.values[0], b)
                return Sum((a, b))
            if isinstance(node.op, ast.Sub):
                return Diff(build(node.left), build(node.right))
            if isinstance(node.op, ast.Mult):
                a, b = build(node.left), build(node.right)
                if isinstance(a, Const) and len(a.values) == 1:
                    return Affine(a.values[0], 0.0, b)
                if isinstance(b, Const) and len(b.values) == 1:
                    return Affine(b.values[0], 0.0, a)
                raise ConfigError(f"one factor must be constant in {text!r}")
        raise ConfigError(f"unsupported expression in link: {text!r}")

    def _parent_slot(name: str) -> int:
        if not name.startswith("p") or not name[1:].isdigit():
            raise ConfigError(f"parent references look like p0, p1, ...: {name!r}")
        slot = int(name[1:])
        if slot >= n_parents:
            raise ConfigError(f"link references p{slot} but node has only "
                              f"{n_parents} parents")
        return slot

    return build(tree)


def _parse_scale(text: str, n_parents: int, node_name: str, shared: dict):
    text = text.strip()
    if text.startswith("train:"):
        parts = text.split(":")
        init = float(parts[1])
        if len(parts) == 3:
            key = parts[2]
            if key not in shared:
                shared[key] = trainable_scale(f"scale.{key}", init)
            return shared[key]
        return trainable_scale(f"scale.{node_name}", init)
    try:
        return FixedScale((float(text),))
    except ValueError:
        return LinkScale(_parse_link_expr(text, n_parents))


def parse_program_file(path) -> ProgramGraph:
    """Parse the on-disk program description grammar into a graph."""
    name = Path(path).stem
    node_names: list[str] = []
    nodes: list[NodeSpec] = []
    shared_scales: dict = {}
    for lineno, raw in enumerate(Path(path).read_text().splitlines(), 1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        fields = line.split()
        if fields[0] == "name":
            if len(fields) != 2:
                raise ConfigError(f"{path}:{lineno}: name takes one value")
            name = fields[1]
            continue
        if fields[0] != "node":
            raise ConfigError(f"{path}:{lineno}: expected 'node' or 'name'")
        if len(fields) < 2:
            raise ConfigError(f"{path}:{lineno}: node needs a name")
        node_name = fields[1]
        kv = {}
        last_key = None
        for item in fields[2:]:
            if "=" in item:
                k, v = item.split("=", 1)
                kv[k] = v
                last_key = k
            elif last_key is not None:
                # expressions may contain spaces; glue continuation tokens
                kv[last_key] += item
            else:
                raise ConfigError(
                    f"{path}:{lineno}: expected key=value, got {item!r}")
        parent_names = [p for p in kv.pop("parents", "").split(",") if p]
        for p in parent_names:
            if p not in node_names:
                raise ConfigError(
                    f"{path}:{lineno}: unknown parent {p!r} (parents must "
                    f"be defined on earlier lines)")
        parents = tuple(node_names.index(p) for p in parent_names)
        dim = int(kv.pop("dim", "1"))
        kind = kv.pop("dist", None)
        if kind == "gaussian" or kind == "lognormal":
            mean = _parse_link_expr(kv.pop("mean", "0"), len(parents))
            scale = _parse_scale(kv.pop("scale", "1"), len(parents),
                                 node_name, shared_scales)
            dist = (Gaussian if kind == "gaussian" else LogNormal)(mean, scale)
        elif kind == "bernoulli":
            dist = Bernoulli(_parse_link_expr(kv.pop("logit", "0"),
                                              len(parents)))
        elif kind == "mixture":
            dist = gaussian_mixture(
                f"{name}.{node_name}", int(kv.pop("components", "10")),
                mean_lo=float(kv.pop("mean_lo", "-4")),
                mean_hi=float(kv.pop("mean_hi", "4")),
                std_init=float(kv.pop("std_init", "1")))
        else:
            raise ConfigError(f"{path}:{lineno}: unknown dist {kind!r}")
        if kv:
            raise ConfigError(f"{path}:{lineno}: unknown fields {sorted(kv)}")
        node_names.append(node_name)
        nodes.append(NodeSpec(node_name, parents, dist, dim=dim))
    if not nodes:
        raise ConfigError(f"{path}: no nodes defined")
    return ProgramGraph(name, tuple(nodes))


# ---------------------------------------------------------------------------
# run orchestration


def _architecture_spec(arch: dict, orientation: str,
                       run_seed: int) -> ArchitectureSpec:
    name = arch.get("name")
    if not name:
        raise ConfigError("architecture section needs a name")
    hidden = tuple(int(h) for h in str(arch.get("hidden", "64 64")).split())
    structure = arch.get("structure")
    opts = {}
    if structure == "continuity" or structure == "smoothness":
        if "T" in arch:
            opts["T"] = arch["T"]
        if "channels" in arch:
            opts["channels"] = arch["channels"]
        if "init_scale" in arch:
            opts["init_scale"] = arch["init_scale"]
    elif structure == "hierarchical":
        for k in ("m", "n"):
            if k in arch:
                opts[k] = arch[k]
    elif structure == "mixture":
        for src, dst in (("n_components", "n_components"),
                         ("mean_lo", "mean_lo"), ("mean_hi", "mean_hi"),
                         ("std_init", "std_init")):
            if src in arch:
                opts[dst] = arch[src]
    return ArchitectureSpec(
        name=name,
        orientation=orientation,
        structure=structure,
        structure_options=opts,
        hidden=hidden,
        activation=arch.get("activation"),
        permutation_seed=int(arch.get("permutation_seed", 0)) + run_seed,
        conditioner_seed=int(arch.get("conditioner_seed", 0)) + 101 * run_seed,
        gate_init=arch.get("gate_init"),
        gate_scale=float(arch.get("gate_scale", 100.0)),
    )


def _custom_graph(arch: dict):
    if arch.get("structure") == "custom":
        program = arch.get("program")
        if not program:
            raise ConfigError("structure=custom needs program=<path>")
        return parse_program_file(program)
    return None


def _build_datasets(ds_cfg: dict):
    name = ds_cfg.get("name")
    if name not in GENERATORS:
        raise ConfigError(f"unknown dataset {name!r} "
                          f"(known: {sorted(GENERATORS)})")
    gen_keys = {"T", "sigma", "geometric", "mu0", "sigma0", "theta", "s", "mu"}
    kwargs = {k: v for k, v in ds_cfg.items() if k in gen_keys}
    n_train = int(ds_cfg.get("n_train", 10000))
    n_test = int(ds_cfg.get("n_test", 10000))
    data_seed = int(ds_cfg.get("data_seed", 1000))
    test_seed = int(ds_cfg.get("test_seed", data_seed + 5000))
    train = GENERATORS[name](n_train, seed=data_seed, **kwargs)
    test = GENERATORS[name](n_test, seed=test_seed, **kwargs)
    if ds_cfg.get("standardize", False):
        train = standardize(train)
        test = apply_standardization(
            test, train.metadata["standardize_mean"],
            train.metadata["standardize_std"])
    return train, test


def _build_problem(p_cfg: dict) -> InferenceProblem:
    name = p_cfg.get("name")
    data_seed = int(p_cfg.get("data_seed", 0))
    if name in ("brownian", "lorenz", "vdp"):
        return make_timeseries_problem(
            name, emission=p_cfg.get("emission", "bernoulli"),
            task=p_cfg.get("task", "smoothing"), seed=data_seed,
            T=p_cfg.get("T"))
    if name == "eight_schools":
        return make_eight_schools_problem(mu_std=float(p_cfg.get("mu_std", 10.0)))
    if name == "tree":
        return make_binary_tree_problem(
            int(p_cfg.get("depth", 4)), link=p_cfg.get("link", "linear"),
            seed=data_seed)
    raise ConfigError(f"unknown problem {name!r}")


def _train_config(t_cfg: dict, seed: int) -> TrainConfig:
    kwargs = dict(t_cfg)
    kwargs["seed"] = seed
    return TrainConfig(**kwargs)


def _sig6(x: float) -> str:
    return f"{x:.6g}"


def _write_results(out: Path, results: list[RunResult], metric_name: str):
    has_fkl = any("forward_kl" in r.extra for r in results)
    with open(out / "results.csv", "w") as fh:
        header = ["seed", metric_name]
        if has_fkl:
            header.append("forward_kl")
        fh.write(",".join(header) + "\n")
        for r in results:
            row = [str(r.seed), _sig6(r.final_metric)]
            if has_fkl:
                row.append(_sig6(r.extra.get("forward_kl", float("nan"))))
            fh.write(",".join(row) + "\n")
    metrics = np.array([r.final_metric for r in results])
    sem = float(metrics.std(ddof=1) / np.sqrt(len(metrics))) \
        if len(metrics) > 1 else 0.0
    summary = {
        "metric": metric_name,
        "mean": float(metrics.mean()),
        "sem": sem,
        "n_seeds": len(results),
        "runs": [
            {"seed": r.seed, "metric": r.final_metric,
             "param_count": r.param_count, "wall_time_s": r.wall_time_s,
             **({"forward_kl": r.extra["forward_kl"]}
                if "forward_kl" in r.extra else {})}
            for r in results
        ],
    }
    (out / "summary.json").write_text(json.dumps(summary, indent=2) + "\n")
    return summary


def run_experiment(cfg: ExperimentConfig, out_dir=None) -> dict:
    """Execute one experiment config; returns the summary dict."""
    out = Path(out_dir or cfg.out or "runs/out")
    out.mkdir(parents=True, exist_ok=True)
    if cfg.kind == "gen-data":
        return _run_gen_data(cfg, out)
    if cfg.kind == "mle":
        return _run_mle(cfg, out)
    if cfg.kind == "vi":
        return _run_vi(cfg, out)
    if cfg.kind == "verify":
        from .verify import run_verification
        failures, total = run_verification()
        return {"passed": total - failures, "failed": failures}
    raise ConfigError(f"unknown experiment kind {cfg.kind!r}")


def _run_gen_data(cfg: ExperimentConfig, out: Path) -> dict:
    name = cfg.dataset.get("name")
    if name not in GENERATORS:
        raise ConfigError(f"unknown dataset {name!r}")
    gen_keys = {"T", "sigma", "geometric", "mu0", "sigma0", "theta", "s", "mu"}
    kwargs = {k: v for k, v in cfg.dataset.items() if k in gen_keys}
    n = int(cfg.dataset.get("n_train", 10000))
    written = []
    for seed in cfg.seeds:
        ds = GENERATORS[name](n, seed=seed, **kwargs)
        path = save_dataset(ds, out)
        if cfg.dataset.get("export_csv", False):
            export_csv(ds, path.with_suffix(".csv"))
        written.append(str(path))
    return {"written": written}


def _run_mle(cfg: ExperimentConfig, out: Path) -> dict:
    train_data, test_data = _build_datasets(cfg.dataset)
    prior_graph = _custom_graph(cfg.architecture)
    results = []
    for seed in cfg.seeds:
        spec = _architecture_spec(cfg.architecture, "density", seed)
        model = assemble(spec, train_data.event_dim, prior_graph=prior_graph)
        tcfg = _train_config(cfg.train, seed)
        res = mle_train(model, train_data, tcfg, test_data=test_data)
        write_trace(out / f"trace-{seed}.csv", res.trace)
        results.append(res)
    return _write_results(out, results, "nll")


def _run_vi(cfg: ExperimentConfig, out: Path) -> dict:
    problem = _build_problem(cfg.problem)
    results = []
    for seed in cfg.seeds:
        spec = _architecture_spec(cfg.architecture, "variational", seed)
        tcfg = _train_config(cfg.train, seed)
        res, _model = vi_fit(spec, problem, tcfg)
        write_trace(out / f"trace-{seed}.csv", res.trace)
        results.append(res)
    return _write_results(out, results, "neg_elbo")


# ---------------------------------------------------------------------------
# comparison tables


def compare_runs(cfg: ExperimentConfig, out_path) -> Path:
    """Emit a datasets x architectures CSV of "mean +/- sem" cells.

    The best (lowest-mean) cell per row is flagged with a trailing '*'.
    Referenced run directories must contain summary.json.
    """
    rows = cfg.compare.get("rows", "").split()
    columns = cfg.compare.get("columns", "").split()
    if not rows or not columns:
        raise ConfigError("[compare] needs rows and columns")
    table = []
    for row in rows:
        cells = []
        means = []
        for col in columns:
            key = f"{row}/{col}"
            run_dir = cfg.runs.get(key)
            if run_dir is None:
                raise MissingArtifact(f"no run directory declared for {key}")
            summary_path = Path(run_dir) / "summary.json"
            if not summary_path.exists():
                raise MissingArtifact(f"missing artifact: {summary_path}")
            summary = json.loads(summary_path.read_text())
            means.append(summary["mean"])
            cells.append(f"{summary['mean']:.6g} ± {summary['sem']:.6g}")
        best = int(np.argmin(means))
        cells[best] += " *"
        table.append(cells)
    out_path = Path(out_path)
    out_path.parent.mkdir(parents=True, exist_ok=True)
    with open(out_path, "w") as fh:
        fh.write(",".join([""] + columns) + "\n")
        for row, cells in zip(rows, table):
            fh.write(",".join([row] + cells) + "\n")
    return out_path
