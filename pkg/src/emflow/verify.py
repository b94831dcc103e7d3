"""Self-check suite behind the `verify` subcommand.

Each check is a small invariant exercise; the runner prints one
PASS/FAIL line per check and returns the failure count. The pytest
suite covers the same ground (and more) with finer granularity.
"""

from __future__ import annotations

import numpy as np

from . import autodiff as ad
from . import roots, special
from .bijectors import ElementwiseAffine, MadeConditioner, \
    MaskedAutoregressive, MixtureCdf, Permutation, TriangularAffine
from .datasets import gen_brownian, gen_ou, load_dataset, save_dataset
from .flows import ArchitectureSpec, assemble
from .programs import ancestral_sample, gaussian_mixture, joint_log_prob
from .structured import StructuredLayer, build_continuity_structure, \
    build_hierarchical_structure, build_smoothness_structure, \
    exactness_log_prob


def check_cdf_quantile_roundtrip():
    x = np.linspace(-4, 4, 20001)
    err = np.abs(special.std_normal_quantile(special.std_normal_cdf(x)) - x)
    assert err.max() < 1e-12, f"|x|<=4 err {err.max():.2e}"
    x = np.linspace(-5.5, 5.5, 20001)
    err = np.abs(special.std_normal_quantile(special.std_normal_cdf(x)) - x)
    assert err.max() < 1e-9, f"|x|<=5.5 err {err.max():.2e}"
    # Upper tail hits the float64 resolution of CDF values near 1.
    x = np.linspace(-6, 6, 20001)
    err = np.abs(special.std_normal_quantile(special.std_normal_cdf(x)) - x)
    assert err.max() < 2e-8, f"|x|<=6 err {err.max():.2e}"


def check_root_finders_agree():
    cases = [
        (lambda v: v - 2.0, 0.0, 5.0),
        (lambda v: np.tanh(v) - 0.5, 0.0, 2.0),
        (lambda v: v ** 3 - v - 2.0, 1.0, 2.0),
        (lambda v: special.std_normal_cdf(v) - 0.3, -5.0, 5.0),
    ]
    for f, lo, hi in cases:
        br = roots.make_bracket(f, lo, hi)
        r1 = roots.bisection(f, br)
        r2 = roots.chandrupatla(f, br)
        r3 = roots.secant(f, lo, hi)
        assert abs(r1 - r2) < 1e-9 and abs(r1 - r3) < 1e-9, \
            f"disagree: {r1} {r2} {r3}"


def check_chandrupatla_bracket():
    widths = []
    br = roots.make_bracket(lambda v: v ** 3 - v - 2.0, 1.0, 2.0)
    roots.chandrupatla(lambda v: v ** 3 - v - 2.0, br,
                       on_bracket=lambda lo, hi: widths.append(hi - lo))
    assert all(b <= a + 1e-15 for a, b in zip(widths, widths[1:])), \
        "bracket expanded"


def check_layer_roundtrips():
    rng = np.random.default_rng(7)
    x = rng.standard_normal((64, 3))
    layers = [
        ElementwiseAffine(3, loc_init=0.3, scale_init=1.7),
        TriangularAffine(3),
        Permutation([2, 0, 1]),
        MaskedAutoregressive(MadeConditioner(3, hidden=(16, 16), seed=1)),
        StructuredLayer(build_continuity_structure(3, init_scale=0.5)),
        StructuredLayer(build_continuity_structure(3), gated=True),
    ]
    layers[3].conditioner.weights[-1].value[:] = \
        0.1 * rng.standard_normal(layers[3].conditioner.weights[-1].value.shape)
    for layer in layers:
        y, fldj = layer.forward(ad.constant(x))
        x2, ildj = layer.inverse(y)
        err = np.abs(x2.value - x).max()
        anti = np.abs(fldj.value + ildj.value).max()
        assert err < 1e-9 and anti < 1e-9, f"{type(layer).__name__}: {err} {anti}"
    mix = MixtureCdf([gaussian_mixture("m0", 3), gaussian_mixture("m1", 3)])
    y, fldj = mix.forward(ad.constant(x[:8, :2]))
    x2, ildj = mix.inverse(y)
    assert np.abs(x2.value - x[:8, :2]).max() < 1e-6, "mixture roundtrip"


def check_made_sparsity():
    cond = MadeConditioner(4, hidden=(16, 16), seed=3)
    rng = np.random.default_rng(0)
    for w in cond.weights:
        w.value[:] = rng.normal(0, 0.4, size=w.value.shape)
    layer = MaskedAutoregressive(cond)
    y0 = rng.standard_normal(4)
    x0, _ = layer.inverse(ad.constant(y0[None]))
    h = 1e-6
    for i in range(4):
        yp = y0.copy()
        yp[i] += h
        xp, _ = layer.inverse(ad.constant(yp[None]))
        grad = (xp.value - x0.value)[0] / h
        for j in range(4):
            if i > j:
                assert abs(grad[j]) < 1e-8, f"dx{j}/dy{i} nonzero"


def check_exactness():
    rng = np.random.default_rng(11)
    graphs = [
        build_continuity_structure(5, init_scale=0.3),
        build_smoothness_structure(5, init_scale=0.7),
        build_hierarchical_structure(2, 4),
    ]
    for graph in graphs:
        layer = StructuredLayer(graph)
        sample = ancestral_sample(graph, rng, 20)
        lhs = exactness_log_prob(layer, sample).value
        rhs = joint_log_prob(graph, sample).value
        assert np.abs(lhs - rhs).max() < 1e-8, graph.name


def check_gate_limits():
    rng = np.random.default_rng(5)
    x = rng.standard_normal((16, 4))
    graph = build_continuity_structure(4, init_scale=0.6)
    gated = StructuredLayer(graph, gated=True)
    plain = StructuredLayer(graph)
    y0, ldj0 = gated.forward(ad.constant(x), gate_values=np.zeros(4))
    assert np.array_equal(y0.value, x) and np.all(ldj0.value == 0.0), "lam=0"
    y1, ldj1 = gated.forward(ad.constant(x), gate_values=np.ones(4))
    yp, ldjp = plain.forward(ad.constant(x))
    assert np.array_equal(y1.value, yp.value), "lam=1 forward"
    assert np.array_equal(ldj1.value, ldjp.value), "lam=1 log-det"


def check_gradient_fd():
    from .autodiff import finite_difference_check
    rng = np.random.default_rng(2)
    model = assemble(ArchitectureSpec(name="MAF", hidden=(8,),
                                      conditioner_seed=4), 3)
    batch = rng.standard_normal((16, 3))

    def loss():
        return -ad.tmean(model.log_prob(batch))

    err = finite_difference_check(loss, model.params(), h=1e-6)
    assert err < 1e-4, f"fd error {err:.2e}"


def check_dataset_determinism(tmp_dir="/tmp/emflow-verify-cache"):
    a = gen_brownian(100, T=10, seed=3)
    b = gen_brownian(100, T=10, seed=3)
    assert np.array_equal(a.samples, b.samples), "regeneration differs"
    save_dataset(a, tmp_dir)
    c = load_dataset(a.name, 3, 100, tmp_dir)
    assert np.array_equal(a.samples, c.samples), "cache reload differs"


def check_moments():
    n = 20000
    br = gen_brownian(n, T=10, sigma=0.1, seed=9)
    var_last = br.samples[:, -1].var()
    expect = 10 * 0.01
    se = np.sqrt(2.0 / (n - 1)) * expect
    assert abs(var_last - expect) < 4 * se, f"brownian var {var_last}"
    ou = gen_ou(n, T=30, seed=10)
    var_stat = ou.samples[:, -1].var()
    expect = 0.5 ** 2 / (1 - 0.8 ** 2)
    se = np.sqrt(2.0 / (n - 1)) * expect
    assert abs(var_stat - expect) < 4 * se, f"ou var {var_stat}"


CHECKS = [
    ("cdf-quantile-roundtrip", check_cdf_quantile_roundtrip),
    ("root-finders-agree", check_root_finders_agree),
    ("chandrupatla-bracket-shrinks", check_chandrupatla_bracket),
    ("layer-roundtrips", check_layer_roundtrips),
    ("made-autoregressive-sparsity", check_made_sparsity),
    ("program-exactness", check_exactness),
    ("gate-limits", check_gate_limits),
    ("gradient-finite-difference", check_gradient_fd),
    ("dataset-determinism", check_dataset_determinism),
    ("generator-moments", check_moments),
]


def run_verification(verbose: bool = True):
    """Run all checks; returns (failure count, total count)."""
    failures = 0
    for name, fn in CHECKS:
        try:
            fn()
            status = "PASS"
        except Exception as exc:  # report and continue
            status = f"FAIL ({exc})"
            failures += 1
        if verbose:
            print(f"{status:4.4s} {name}" if status == "PASS"
                  else f"FAIL {name}: {status[6:-1]}")
    if verbose:
        total = len(CHECKS)
        print(f"{total - failures}/{total} checks passed")
    return failures, len(CHECKS)
