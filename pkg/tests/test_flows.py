import numpy as np
import pytest
from scipy import stats

from emflow import autodiff as ad
from emflow.bijectors import ElementwiseAffine, Invert, MaskedAutoregressive, \
    Permutation
from emflow.errors import ConfigError, ShapeError
from emflow.flows import ArchitectureSpec, FlowModel, assemble, \
    load_checkpoint, save_checkpoint
from emflow.programs import joint_log_prob
from emflow.structured import StructuredLayer, build_continuity_structure


def test_empty_stack_log_prob():
    model = FlowModel([], 1)
    lp = model.log_prob(np.array([[0.0]]))
    assert float(lp.value[0]) == pytest.approx(-0.9189385332046727, abs=1e-12)


def test_affine_stack_log_prob():
    aff = ElementwiseAffine(1, scale_init=2.0)
    model = FlowModel([aff], 1)
    lp = model.log_prob(np.array([[0.0]]))
    expected = -np.log(2.0) - 0.9189385332046727
    assert float(lp.value[0]) == pytest.approx(expected, abs=1e-9)


def test_pure_structured_stack_matches_joint():
    graph = build_continuity_structure(5, init_scale=0.3)
    model = FlowModel([StructuredLayer(graph)], 5)
    from emflow.programs import ancestral_sample
    sample = ancestral_sample(graph, np.random.default_rng(0), 50)
    lp = model.log_prob(sample).value
    ref = joint_log_prob(graph, sample).value
    assert np.abs(lp - ref).max() < 1e-8


def test_empty_stack_sampling_is_standard_normal():
    model = FlowModel([], 1)
    s = model.sample(np.random.default_rng(0), 10000)[:, 0]
    assert stats.kstest(s, "norm").pvalue > 0.01


def test_affine_stack_sample_mean():
    aff = ElementwiseAffine(1, loc_init=5.0, scale_init=1.0)
    model = FlowModel([aff], 1)
    s = model.sample(np.random.default_rng(1), 20000)
    assert s.mean() == pytest.approx(5.0, abs=0.05)


@pytest.mark.parametrize("name,orientation,extra", [
    ("MAF", "density", {}),
    ("MAF-L", "density", {}),
    ("EMF-T", "density", {"structure": "mixture",
                          "structure_options": {"n_components": 5}}),
    ("EMF-M", "density", {"structure": "mixture",
                          "structure_options": {"n_components": 5,
                                                "mean_lo": -10.0,
                                                "mean_hi": 10.0,
                                                "std_init": 3.0}}),
    ("B-MAF", "density", {"structure": "continuity",
                          "structure_options": {"T": 3}}),
    ("GEMF-T", "density", {"structure": "continuity",
                           "structure_options": {"T": 3}}),
    ("GEMF-M", "density", {"structure": "continuity",
                           "structure_options": {"T": 3}}),
    ("IAF", "variational", {}),
    ("MF", "variational", {}),
    ("MVN", "variational", {}),
])
def test_every_architecture_smoke(name, orientation, extra):
    spec = ArchitectureSpec(name=name, orientation=orientation,
                            hidden=(8, 8), **extra)
    model = assemble(spec, 3)
    rng = np.random.default_rng(0)
    s = model.sample(rng, 1000)
    assert s.shape == (1000, 3)
    lp = model.log_prob(s[:50])
    assert np.all(np.isfinite(lp.value))
    if orientation == "variational":
        z, log_q = model.sample_and_log_prob(np.random.default_rng(1), 20)
        lp2 = model.log_prob(z.value)
        assert np.abs(lp2.value - log_q.value).max() < 1e-6


def test_unknown_architecture():
    with pytest.raises(ConfigError):
        assemble(ArchitectureSpec(name="NSF"), 2)
    with pytest.raises(ConfigError):
        assemble(ArchitectureSpec(name="MF", orientation="density"), 2)


def test_maf_layout():
    model = assemble(ArchitectureSpec(name="MAF", hidden=(8,)), 2)
    kinds = [type(l).__name__ for l in model.layers]
    assert kinds == ["MaskedAutoregressive", "Permutation",
                     "MaskedAutoregressive"]


def test_bmaf_layout_structured_innermost_no_permutation():
    spec = ArchitectureSpec(name="B-MAF", structure="continuity",
                            structure_options={"T": 4}, hidden=(8,))
    model = assemble(spec, 4)
    kinds = [type(l).__name__ for l in model.layers]
    assert kinds == ["StructuredLayer", "MaskedAutoregressive",
                     "MaskedAutoregressive"]


def test_emft_layout_structured_outermost():
    spec = ArchitectureSpec(name="EMF-T", structure="mixture",
                            structure_options={"n_components": 3},
                            hidden=(8,))
    model = assemble(spec, 2)
    kinds = [type(l).__name__ for l in model.layers]
    assert kinds == ["MaskedAutoregressive", "Permutation",
                     "MaskedAutoregressive", "StructuredLayer"]


def test_emfm_layout_permutation_before_structured():
    spec = ArchitectureSpec(name="EMF-M", structure="mixture",
                            structure_options={"n_components": 3},
                            hidden=(8,))
    model = assemble(spec, 2)
    kinds = [type(l).__name__ for l in model.layers]
    assert kinds == ["MaskedAutoregressive", "Permutation",
                     "StructuredLayer", "MaskedAutoregressive"]


def test_parameter_counts_at_reference_width():
    # cross-checked against the published parameter tables
    maf = assemble(ArchitectureSpec(name="MAF", hidden=(512, 512)), 2)
    assert maf.param_count == 532488
    emft = assemble(ArchitectureSpec(
        name="EMF-T", hidden=(512, 512), structure="mixture",
        structure_options={"n_components": 100}), 2)
    assert emft.param_count == 533088
    mafl = assemble(ArchitectureSpec(name="MAF-L", hidden=(512, 512)), 2)
    assert mafl.param_count == 798732

    maf30 = assemble(ArchitectureSpec(name="MAF", hidden=(512, 512)), 30)
    assert maf30.param_count == 618616
    gemft = assemble(ArchitectureSpec(
        name="GEMF-T", hidden=(512, 512), structure="continuity",
        structure_options={"T": 30}), 30)
    assert gemft.param_count == 618616 + 30 + 1  # gates + shared scale
    bmaf = assemble(ArchitectureSpec(
        name="B-MAF", hidden=(512, 512), structure="continuity",
        structure_options={"T": 30}), 30)
    assert bmaf.param_count == 618617

    maf_lz = assemble(ArchitectureSpec(name="MAF", hidden=(512, 512)), 90)
    assert maf_lz.param_count == 803176
    gemft_lz = assemble(ArchitectureSpec(
        name="GEMF-T", hidden=(512, 512), structure="continuity",
        structure_options={"T": 30, "channels": 3}), 90)
    assert gemft_lz.param_count == 803176 + 30 + 3

    maf_vdp = assemble(ArchitectureSpec(name="MAF", hidden=(512, 512)), 240)
    assert maf_vdp.param_count == 1264576
    gemft_vdp = assemble(ArchitectureSpec(
        name="GEMF-T", hidden=(512, 512), structure="continuity",
        structure_options={"T": 120, "channels": 2}), 240)
    assert gemft_vdp.param_count == 1264576 + 120 + 2


def test_assemble_deterministic():
    spec = ArchitectureSpec(name="MAF", hidden=(16, 16),
                            permutation_seed=3, conditioner_seed=5)
    m1 = assemble(spec, 4)
    m2 = assemble(spec, 4)
    assert m1.param_count == m2.param_count
    for p1, p2 in zip(m1.params(), m2.params()):
        assert np.array_equal(p1.value, p2.value)
    perms1 = [l.perm for l in m1.layers if isinstance(l, Permutation)]
    perms2 = [l.perm for l in m2.layers if isinstance(l, Permutation)]
    assert all(np.array_equal(a, b) for a, b in zip(perms1, perms2))


def test_iaf_sampler_is_maf_inverse_pass():
    # parameter-sharing equivalence on dim 3
    spec = ArchitectureSpec(name="MAF", hidden=(8, 8), conditioner_seed=9)
    maf = assemble(spec, 3)
    for layer in maf.layers:
        if isinstance(layer, MaskedAutoregressive):
            layer.conditioner.weights[-1].value[:] = \
                np.random.default_rng(0).normal(
                    0, 0.2, layer.conditioner.weights[-1].value.shape)
    iaf_layers = [Invert(l) if isinstance(l, MaskedAutoregressive) else l
                  for l in maf.layers]
    iaf = FlowModel(iaf_layers, 3, "variational")
    x = np.random.default_rng(2).standard_normal((10, 3))
    y_iaf, ldj_iaf = iaf.stack.forward(ad.constant(x))
    y_maf, ldj_maf = maf.stack.inverse(ad.constant(x))
    # the IAF sampling pass applies the MAF inverse pass in reverse order;
    # per-layer equality is the sharp check
    for l_maf, l_iaf in zip(maf.layers, iaf.layers):
        if isinstance(l_maf, MaskedAutoregressive):
            a, la = l_iaf.forward(ad.constant(x))
            b, lb = l_maf.inverse(ad.constant(x))
            assert np.array_equal(a.value, b.value)
            assert np.array_equal(la.value, lb.value)


GRID_ARCHS = [
    ("MAF", {}),
    ("MAF-L", {}),
    ("EMF-T", {"structure": "mixture", "structure_options":
               {"n_components": 4, "mean_lo": -2.0, "mean_hi": 2.0}}),
    ("EMF-M", {"structure": "mixture", "structure_options":
               {"n_components": 4, "mean_lo": -2.0, "mean_hi": 2.0}}),
    ("B-MAF", {"structure": "continuity", "structure_options": {"T": 2}}),
    ("GEMF-T", {"structure": "continuity", "structure_options": {"T": 2}}),
]


@pytest.mark.parametrize("name,extra", GRID_ARCHS,
                         ids=[a[0] for a in GRID_ARCHS])
def test_normalization_on_grid(name, extra):
    # exp(log_prob) must integrate to ~1 over a wide 2d grid, both at
    # initialization and after a few noisy update steps
    from emflow.training import TrainConfig, mle_train
    from emflow.datasets import Dataset
    spec = ArchitectureSpec(name=name, hidden=(8, 8), **extra)
    model = assemble(spec, 2)
    xs = np.linspace(-15, 15, 301)
    grid = np.stack(np.meshgrid(xs, xs, indexing="ij"), -1).reshape(-1, 2)

    def integral():
        lp = model.log_prob(grid).value.reshape(301, 301)
        return np.trapezoid(np.trapezoid(np.exp(lp), xs, axis=1), xs)

    assert integral() == pytest.approx(1.0, abs=1e-3)
    rng = np.random.default_rng(0)
    data = Dataset("blob", rng.normal(0.5, 1.3, size=(2000, 2)))
    mle_train(model, data, TrainConfig(iterations=200, batch_size=128,
                                       learning_rate=3e-3, seed=0,
                                       eval_every=100))
    assert integral() == pytest.approx(1.0, abs=1e-3)


def test_checkpoint_roundtrip_bit_exact(tmp_path):
    spec = ArchitectureSpec(name="GEMF-T", structure="continuity",
                            structure_options={"T": 3}, hidden=(8, 8))
    model = assemble(spec, 3)
    rng = np.random.default_rng(0)
    for p in model.params():
        p.value[:] = rng.normal(size=p.value.shape)
    path = tmp_path / "model.npz"
    save_checkpoint(path, model, spec)
    spec2, model2 = load_checkpoint(path)
    assert spec2 == spec
    for p1, p2 in zip(model.params(), model2.params()):
        assert np.array_equal(p1.value, p2.value)
    y = np.random.default_rng(1).standard_normal((4, 3))
    assert np.array_equal(model.log_prob(y).value, model2.log_prob(y).value)


def test_log_prob_shape_error():
    model = assemble(ArchitectureSpec(name="MAF", hidden=(8,)), 3)
    with pytest.raises(ShapeError):
        model.log_prob(np.zeros((2, 4)))
