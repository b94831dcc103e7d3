import json
from pathlib import Path

import numpy as np
import pytest

from emflow.cli import main
from emflow.errors import ConfigError, MissingArtifact
from emflow.experiments import compare_runs, parse_config, \
    parse_program_file, run_experiment
from emflow.programs import Diff, Select, TanhLink

MLE_CFG = """
[experiment]
kind = mle
seeds = 0 1 2

[dataset]
name = brownian
T = 5
n_train = 400
n_test = 400

[architecture]
name = MAF
hidden = 8 8

[train]
iterations = 40
batch_size = 64
learning_rate = 1e-3
eval_every = 20
"""


def write_cfg(tmp_path, text, name="exp.cfg"):
    path = tmp_path / name
    path.write_text(text)
    return path


def test_strict_parsing_rejects_unknown_key(tmp_path):
    bad = MLE_CFG.replace("batch_size", "batchsize")
    with pytest.raises(ConfigError, match="batchsize"):
        parse_config(write_cfg(tmp_path, bad))


def test_strict_parsing_rejects_unknown_section(tmp_path):
    bad = MLE_CFG + "\n[extras]\nfoo = 1\n"
    with pytest.raises(ConfigError, match="extras"):
        parse_config(write_cfg(tmp_path, bad))


def test_override_application(tmp_path):
    cfg = parse_config(write_cfg(tmp_path, MLE_CFG),
                       overrides=["train.iterations=99",
                                  "dataset.n_train=123"])
    assert cfg.train["iterations"] == 99
    assert cfg.dataset["n_train"] == 123
    with pytest.raises(ConfigError):
        parse_config(write_cfg(tmp_path, MLE_CFG), overrides=["train.nope=1"])
    with pytest.raises(ConfigError):
        parse_config(write_cfg(tmp_path, MLE_CFG), overrides=["bad-format"])


def test_mle_run_artifacts(tmp_path):
    cfg = parse_config(write_cfg(tmp_path, MLE_CFG))
    out = tmp_path / "run"
    summary = run_experiment(cfg, out_dir=out)
    results = (out / "results.csv").read_text().strip().splitlines()
    assert results[0] == "seed,nll"
    assert len(results) == 4
    assert (out / "summary.json").exists()
    for seed in (0, 1, 2):
        assert (out / f"trace-{seed}.csv").exists()
    loaded = json.loads((out / "summary.json").read_text())
    metrics = [r["metric"] for r in loaded["runs"]]
    assert loaded["mean"] == pytest.approx(np.mean(metrics))
    assert loaded["sem"] == pytest.approx(
        np.std(metrics, ddof=1) / np.sqrt(3))
    assert summary["n_seeds"] == 3


def test_results_csv_bit_reproducible(tmp_path):
    cfg = parse_config(write_cfg(tmp_path, MLE_CFG))
    out1, out2 = tmp_path / "a", tmp_path / "b"
    run_experiment(cfg, out_dir=out1)
    run_experiment(cfg, out_dir=out2)
    assert (out1 / "results.csv").read_bytes() == \
        (out2 / "results.csv").read_bytes()


def test_vi_run_artifacts(tmp_path):
    cfg_text = """
[experiment]
kind = vi
seeds = 0

[problem]
name = brownian
emission = bernoulli
task = smoothing
T = 4
data_seed = 0

[architecture]
name = MF

[train]
iterations = 50
learning_rate = 1e-2
mc_samples = 20
eval_every = 25
"""
    cfg = parse_config(write_cfg(tmp_path, cfg_text))
    out = tmp_path / "vi"
    run_experiment(cfg, out_dir=out)
    header = (out / "results.csv").read_text().splitlines()[0]
    assert header == "seed,neg_elbo,forward_kl"


def test_compare_table(tmp_path):
    cfg = parse_config(write_cfg(tmp_path, MLE_CFG))
    out1 = tmp_path / "r1"
    run_experiment(cfg, out_dir=out1)
    compare_cfg = write_cfg(tmp_path, f"""
[compare]
rows = BR
columns = MAF

[runs]
BR/MAF = {out1}
""", name="cmp.cfg")
    table = compare_runs(parse_config(compare_cfg), tmp_path / "table.csv")
    lines = Path(table).read_text().strip().splitlines()
    assert lines[0] == ",MAF"
    assert lines[1].startswith("BR,") and lines[1].endswith("*")


def test_compare_flags_best_of_two(tmp_path):
    for name, metric in (("a", 1.0), ("b", 2.0)):
        d = tmp_path / name
        d.mkdir()
        (d / "summary.json").write_text(json.dumps(
            {"mean": metric, "sem": 0.1}))
    cfg = write_cfg(tmp_path, f"""
[compare]
rows = DS
columns = A B

[runs]
DS/A = {tmp_path/'a'}
DS/B = {tmp_path/'b'}
""", name="cmp2.cfg")
    table = compare_runs(parse_config(cfg), tmp_path / "t.csv")
    row = Path(table).read_text().strip().splitlines()[1].split(",")
    assert row[1].endswith("*") and not row[2].endswith("*")


def test_compare_missing_artifact(tmp_path):
    cfg = write_cfg(tmp_path, f"""
[compare]
rows = DS
columns = A

[runs]
DS/A = {tmp_path/'missing'}
""", name="cmp3.cfg")
    with pytest.raises(MissingArtifact):
        compare_runs(parse_config(cfg), tmp_path / "t.csv")


def test_gen_data_deterministic_files(tmp_path):
    cfg_text = """
[experiment]
kind = gen-data
seeds = 7

[dataset]
name = brownian
T = 4
n_train = 25
"""
    cfg = parse_config(write_cfg(tmp_path, cfg_text))
    out1, out2 = tmp_path / "d1", tmp_path / "d2"
    run_experiment(cfg, out_dir=out1)
    run_experiment(cfg, out_dir=out2)
    assert (out1 / "brownian-7-25.bin").read_bytes() == \
        (out2 / "brownian-7-25.bin").read_bytes()
    assert (out1 / "brownian-7-25.meta").exists()


def test_program_file_grammar(tmp_path):
    path = tmp_path / "model.prog"
    path.write_text("""
# a second-order chain over three variables
name demo
node a dist=gaussian mean=0 scale=1
node b dist=gaussian mean=0 scale=1
node c parents=b,a dim=1 dist=gaussian mean=2*p0 - p1 scale=train:0.5:shared
node d parents=c dist=gaussian mean=tanh(p0) scale=0.25
""")
    graph = parse_program_file(path)
    assert graph.name == "demo"
    assert [n.name for n in graph.nodes] == ["a", "b", "c", "d"]
    assert graph.nodes[2].parents == (1, 0)
    mean = graph.nodes[2].dist.mean
    assert isinstance(mean, Diff)
    assert isinstance(graph.nodes[3].dist.mean, TanhLink)
    assert len(graph.params()) == 1  # the shared trainable scale


def test_program_file_component_access(tmp_path):
    path = tmp_path / "vec.prog"
    path.write_text("""
node s dim=2 dist=gaussian mean=0 scale=1
node e parents=s dist=bernoulli logit=3*p0[0]
""")
    graph = parse_program_file(path)
    sel = graph.nodes[1].dist.logit
    assert sel.inner == Select(0, component=0)


def test_program_file_errors(tmp_path):
    cases = [
        ("node a dist=gaussian mean=q0 scale=1", "parent references"),
        ("node a dist=gaussian mean=p0 scale=1", "p0"),
        ("node a dist=weird", "unknown dist"),
        ("node a parents=zz dist=gaussian mean=p0 scale=1", "unknown parent"),
        ("node a dist=gaussian mean=0 scale=1 extra=2", "unknown fields"),
        ("nonsense line", "expected"),
    ]
    for body, match in cases:
        path = tmp_path / "bad.prog"
        path.write_text(body + "\n")
        with pytest.raises(ConfigError, match=match):
            parse_program_file(path)


def test_program_file_mixture(tmp_path):
    path = tmp_path / "mix.prog"
    path.write_text("node m dist=mixture components=4 mean_lo=-2 mean_hi=2\n")
    graph = parse_program_file(path)
    assert graph.nodes[0].dist.n_components == 4


def test_custom_structure_through_cli_architecture(tmp_path):
    prog = tmp_path / "chain.prog"
    prog.write_text("""
node a dist=gaussian mean=0 scale=0.5
node b parents=a dist=gaussian mean=p0 scale=0.5
""")
    cfg_text = f"""
[experiment]
kind = mle
seeds = 0

[dataset]
name = brownian
T = 2
n_train = 200
n_test = 200
sigma = 0.5

[architecture]
name = GEMF-T
hidden = 8 8
structure = custom
program = {prog}

[train]
iterations = 30
batch_size = 32
learning_rate = 1e-3
eval_every = 10
"""
    cfg = parse_config(write_cfg(tmp_path, cfg_text))
    out = tmp_path / "custom-run"
    summary = run_experiment(cfg, out_dir=out)
    assert np.isfinite(summary["mean"])


def test_cli_exit_codes(tmp_path):
    bad_cfg = write_cfg(tmp_path, MLE_CFG.replace("batch_size", "nope"),
                        name="bad.cfg")
    assert main(["train", "--config", str(bad_cfg)]) == 2
    assert main(["train", "--preset", "no-such-preset"]) == 2

    good = write_cfg(tmp_path, MLE_CFG)
    code = main(["train", "--config", str(good), "--seed", "0",
                 "--out", str(tmp_path / "cli-run"),
                 "--override", "train.iterations=20"])
    assert code == 0
    assert (tmp_path / "cli-run" / "results.csv").exists()


def test_cli_preset_loads():
    from emflow.cli import _preset_path
    path = _preset_path("table2-br-gemft")
    cfg = parse_config(path)
    assert cfg.kind == "mle"
    assert cfg.architecture["name"] == "GEMF-T"
    assert cfg.train["iterations"] == 50000
    with pytest.raises(ConfigError):
        _preset_path("nonexistent")


def test_all_presets_parse():
    from importlib import resources
    base = resources.files("emflow").joinpath("presets")
    names = sorted(p.name for p in base.iterdir() if p.name.endswith(".cfg"))
    assert len(names) > 30
    for name in names:
        cfg = parse_config(str(base.joinpath(name)))
        assert cfg.kind in ("mle", "vi", "gen-data")
