"""Invertible layers: the forward/inverse/log-det contract and generic layers.

Every layer maps (batch, dim) to (batch, dim) and returns per-sample log
determinants. ``forward`` goes base-to-data; ``inverse`` is its exact
inverse. Analytic layers round-trip to ~1e-9; layers that invert by root
finding round-trip to ~1e-6 and do not propagate gradients through the
numeric solve.
"""

from __future__ import annotations

import numpy as np

from . import autodiff as ad
from . import roots, special
from .autodiff import Param
from .errors import ConfigError, PermError, ShapeError
from .programs import mixture_params, softplus_inv
from .special import QUANTILE_EPS


# ---------------------------------------------------------------------------
# scalar transform math shared with the structured compiler


def affine_forward(x, mu, sigma):
    """y = mu + sigma * x with log-det log(sigma); sigma > 0."""
    return mu + sigma * x, ad.log(ad._as_tensor(sigma))


def affine_inverse(y, mu, sigma):
    return (y - mu) / sigma, -ad.log(ad._as_tensor(sigma))


def gated_affine_forward(x, mu, sigma, lam):
    """Convex blend of the affine map and identity, lam in (0, 1].

    y = (1 + lam*(sigma-1))*x + lam*mu; log-det log(1 + lam*(sigma-1)).
    """
    slope = 1.0 + lam * (sigma - 1.0)
    return slope * x + lam * mu, ad.log(slope)


def gated_affine_inverse(y, mu, sigma, lam):
    slope = 1.0 + lam * (sigma - 1.0)
    return (y - lam * mu) / slope, -ad.log(slope)


def mixture_cdf_inverse_direction(y, log_w, means, stds):
    """Map a mixture-of-Gaussians sample to standard normal space.

    x = quantile(sum_k w_k CDF_k(y)); the CDF value is clamped to
    [QUANTILE_EPS, 1 - QUANTILE_EPS] before the quantile. Returns
    (x, per-element inverse log-det), both differentiable.
    """
    z = (y - means) / stds
    u = ad.tsum(ad.exp(log_w) * ad.norm_cdf(z), axis=-1, keepdims=True)
    u = ad.clip(u, QUANTILE_EPS, 1.0 - QUANTILE_EPS)
    x = ad.norm_quantile(u)
    log_pdf = ad.logsumexp(
        log_w - ad.log(stds) - 0.5 * special.LOG_2PI - 0.5 * ad.square(z),
        axis=-1, keepdims=True)
    ildj = log_pdf - (-0.5 * ad.square(x) - 0.5 * special.LOG_2PI)
    return x, ildj


def _mixture_cdf_np(y, w, means, stds):
    z = (y[..., None] - means) / stds
    return (w * special.std_normal_cdf(z)).sum(axis=-1)


def mixture_cdf_forward_direction(x, w, means, stds, solver="chandrupatla",
                                  tol=1e-10, max_iter=200):
    """Solve CDF_mix(y) = CDF(x) elementwise; numpy in, numpy out.

    Bracketed solvers start from [min mu - 10 max sigma,
    max mu + 10 max sigma], doubled geometrically up to 10 times. The
    secant route needs starting points near the root and a slope bounded
    away from zero, so it solves the equivalent base-space equation
    quantile(CDF_mix(y)) = x from moment-matched starting points; the
    root is identical. No gradients flow through the solve.
    """
    x = np.asarray(x, dtype=np.float64)
    u = np.clip(special.std_normal_cdf(x), QUANTILE_EPS, 1.0 - QUANTILE_EPS)
    lo0 = float(means.min() - 10.0 * stds.max())
    hi0 = float(means.max() + 10.0 * stds.max())
    if solver == "secant":
        grid = np.linspace(lo0, hi0, 65)
        grid_cdf = _mixture_cdf_np(grid, w, means, stds)
    out = np.empty_like(u)
    flat_u = u.reshape(-1)
    flat_out = out.reshape(-1)
    for i, ui in enumerate(flat_u):
        def g(yv, _ui=ui):
            return float(_mixture_cdf_np(np.asarray(yv), w, means, stds) - _ui)
        if solver == "secant":
            target = special.std_normal_quantile(ui)

            def h(yv, _t=target):
                c = _mixture_cdf_np(np.asarray(yv), w, means, stds)
                c = np.clip(c, QUANTILE_EPS, 1.0 - QUANTILE_EPS)
                return float(special.std_normal_quantile(c) - _t)

            # Starting points straddle the root on a precomputed CDF grid;
            # on failure, retry from a locally densified straddle.
            j = int(np.clip(np.searchsorted(grid_cdf, ui), 1, grid.size - 1))
            x0, x1 = float(grid[j - 1]), float(grid[j])
            for attempt in range(6):
                try:
                    flat_out[i] = roots.secant(h, x0, x1, tol, max_iter)
                    break
                except (roots.DegenerateSecant, roots.ConvergenceError):
                    if attempt == 5:
                        raise
                    fine = np.linspace(x0, x1, 17)
                    fine_cdf = _mixture_cdf_np(fine, w, means, stds)
                    jj = int(np.clip(np.searchsorted(fine_cdf, ui), 1,
                                     fine.size - 1))
                    x0, x1 = float(fine[jj - 1]), float(fine[jj])
        elif solver == "bisection":
            flat_out[i] = roots.bisection(g, _expand_bracket(g, lo0, hi0),
                                          tol, max_iter)
        elif solver == "chandrupatla":
            flat_out[i] = roots.chandrupatla(g, _expand_bracket(g, lo0, hi0),
                                             tol, max_iter)
        else:
            raise ConfigError(f"unknown solver {solver!r}")
    return out


def _expand_bracket(g, lo, hi):
    f_lo, f_hi = g(lo), g(hi)
    for _ in range(10):
        if (f_lo <= 0.0 <= f_hi) or (f_hi <= 0.0 <= f_lo):
            return roots.Bracket(lo, hi, f_lo, f_hi)
        width = hi - lo
        lo, hi = lo - width, hi + width
        f_lo, f_hi = g(lo), g(hi)
    raise roots.ConvergenceError(
        "could not bracket the mixture CDF root after 10 doublings")


# ---------------------------------------------------------------------------
# layer contract


class Layer:
    """Invertible map with per-sample log determinants."""

    dim: int | None = None

    def forward(self, x):
        raise NotImplementedError

    def inverse(self, y):
        raise NotImplementedError

    def params(self):
        return []

    def forward_log_det_jacobian(self, x):
        return self.forward(x)[1]

    def inverse_log_det_jacobian(self, y):
        return self.inverse(y)[1]


def _check_dim(layer, t):
    if layer.dim is not None and t.shape[-1] != layer.dim:
        raise ShapeError(f"{type(layer).__name__} expects dim {layer.dim}, "
                         f"got {t.shape[-1]}")


class ElementwiseAffine(Layer):
    """Trainable per-dimension shift and positive scale (softplus of raw)."""

    def __init__(self, dim, name="affine", loc_init=None, scale_init=None):
        self.dim = dim
        loc = np.zeros(dim) if loc_init is None else np.full(dim, float(loc_init))
        raw = softplus_inv(1.0 if scale_init is None else float(scale_init))
        self.loc = Param(f"{name}.loc", loc)
        self.raw_scale = Param(f"{name}.scale", np.full(dim, raw))

    def params(self):
        return [self.loc, self.raw_scale]

    def _moments(self):
        return ad.watch(self.loc), ad.softplus(ad.watch(self.raw_scale))

    def forward(self, x):
        x = ad._as_tensor(x)
        _check_dim(self, x)
        mu, sigma = self._moments()
        y, ldj = affine_forward(x, mu, sigma)
        fldj = ad.tsum(ldj, axis=-1)
        return y, _expand_batch(fldj, x)

    def inverse(self, y):
        y = ad._as_tensor(y)
        _check_dim(self, y)
        mu, sigma = self._moments()
        x, ldj = affine_inverse(y, mu, sigma)
        ildj = ad.tsum(ldj, axis=-1)
        return x, _expand_batch(ildj, y)


def _expand_batch(ldj, like):
    """Broadcast a parameter-only log-det to the batch shape of ``like``."""
    batch_shape = like.shape[:-1]
    if ldj.shape == batch_shape:
        return ldj
    return ldj * ad.constant(np.ones(batch_shape))


class TriangularAffine(Layer):
    """Full lower-triangular scale plus shift (multivariate normal pushforward).

    The forward pass is differentiable; the inverse uses an eager
    triangular solve and carries no gradients.
    """

    def __init__(self, dim, name="tri"):
        self.dim = dim
        self.loc = Param(f"{name}.loc", np.zeros(dim))
        self.raw_diag = Param(f"{name}.diag", np.full(dim, softplus_inv(1.0)))
        n_lower = dim * (dim - 1) // 2
        self.lower = Param(f"{name}.lower", np.zeros(n_lower))
        rows, cols = np.tril_indices(dim, k=-1)
        # Flat positions of L's entries inside L^T, so matmul(x, L^T) works.
        self._lower_idx_t = (cols * dim + rows).astype(np.int64)
        self._diag_idx = (np.arange(dim) * dim + np.arange(dim)).astype(np.int64)
        self._rows, self._cols = rows, cols

    def params(self):
        return [self.loc, self.raw_diag, self.lower]

    def _lt(self):
        diag = ad.softplus(ad.watch(self.raw_diag))
        flat = ad.scatter(diag, self._diag_idx, self.dim * self.dim)
        if self.lower.size:
            flat = flat + ad.scatter(ad.watch(self.lower), self._lower_idx_t,
                                     self.dim * self.dim)
        return ad.reshape(flat, (self.dim, self.dim)), diag

    def _l_np(self):
        d = self.dim
        L = np.zeros((d, d))
        L[self._rows, self._cols] = self.lower.value
        raw = self.raw_diag.value
        L[np.arange(d), np.arange(d)] = np.maximum(raw, 0) + np.log1p(np.exp(-np.abs(raw)))
        return L

    def forward(self, x):
        x = ad._as_tensor(x)
        _check_dim(self, x)
        lt, diag = self._lt()
        y = ad.matmul(x, lt) + ad.watch(self.loc)
        fldj = ad.tsum(ad.log(diag))
        return y, _expand_batch(fldj, x)

    def inverse(self, y):
        y = ad._as_tensor(y)
        _check_dim(self, y)
        L = self._l_np()
        resid = y.value - self.loc.value
        if resid.ndim == 2:
            x = np.linalg.solve(L, resid.T).T
        else:
            x = np.linalg.solve(L, resid)
        ildj = -np.log(np.diag(L)).sum()
        out = ad.constant(x)
        return out, ad.constant(np.broadcast_to(ildj, y.shape[:-1]).copy())


class Permutation(Layer):
    """Fixed feature reordering; zero log determinant."""

    def __init__(self, perm):
        perm = np.asarray(perm, dtype=np.int64)
        if sorted(perm.tolist()) != list(range(perm.size)):
            raise PermError(f"not a bijection of 0..{perm.size - 1}: {perm}")
        self.dim = int(perm.size)
        self.perm = perm
        self.inv_perm = np.argsort(perm)

    def forward(self, x):
        x = ad._as_tensor(x)
        _check_dim(self, x)
        zero = ad.constant(np.zeros(x.shape[:-1]))
        return ad.gather(x, self.perm), zero

    def inverse(self, y):
        y = ad._as_tensor(y)
        _check_dim(self, y)
        zero = ad.constant(np.zeros(y.shape[:-1]))
        return ad.gather(y, self.inv_perm), zero


class Chain(Layer):
    """Composition; forward applies layers in listed order, log-dets add."""

    def __init__(self, layers):
        self.layers = list(layers)
        dims = {l.dim for l in self.layers if l.dim is not None}
        if len(dims) > 1:
            raise ShapeError(f"incompatible layer dims in chain: {sorted(dims)}")
        self.dim = dims.pop() if dims else None

    def params(self):
        seen, out = set(), []
        for layer in self.layers:
            for p in layer.params():
                if id(p) not in seen:
                    seen.add(id(p))
                    out.append(p)
        return out

    def forward(self, x):
        x = ad._as_tensor(x)
        total = None
        for layer in self.layers:
            x, ldj = layer.forward(x)
            total = ldj if total is None else total + ldj
        if total is None:
            total = ad.constant(np.zeros(x.shape[:-1]))
        return x, total

    def inverse(self, y):
        y = ad._as_tensor(y)
        total = None
        for layer in reversed(self.layers):
            y, ldj = layer.inverse(y)
            total = ldj if total is None else total + ldj
        if total is None:
            total = ad.constant(np.zeros(y.shape[:-1]))
        return y, total


class Invert(Layer):
    """Swap a layer's directions (turns a MAF layer into an IAF layer)."""

    def __init__(self, layer):
        self.layer = layer
        self.dim = layer.dim

    def params(self):
        return self.layer.params()

    def forward(self, x):
        return self.layer.inverse(x)

    def inverse(self, y):
        return self.layer.forward(y)


class MixtureCdf(Layer):
    """Independent per-dimension mixture-of-Gaussians CDF transform.

    The inverse (data to base) is analytic and differentiable; the
    forward direction solves the CDF equation with a bracketed root
    finder and is evaluation-only.
    """

    def __init__(self, mixtures, solver="chandrupatla"):
        self.mixtures = list(mixtures)
        self.dim = len(self.mixtures)
        self.solver = solver

    def params(self):
        out = []
        for m in self.mixtures:
            out.extend([m.logits, m.means, m.raw_stds])
        return out

    def inverse(self, y):
        y = ad._as_tensor(y)
        _check_dim(self, y)
        cols, ldjs = [], []
        for j, mix in enumerate(self.mixtures):
            yj = ad.gather(y, [j])
            log_w, means, stds = mixture_params(mix)
            xj, ildj = mixture_cdf_inverse_direction(yj, log_w, means, stds)
            cols.append(xj)
            ldjs.append(ildj)
        x = ad.concat(cols)
        total = ad.tsum(ad.concat(ldjs), axis=-1)
        return x, total

    def forward(self, x):
        x = ad._as_tensor(x)
        _check_dim(self, x)
        cols = []
        for j, mix in enumerate(self.mixtures):
            w = _softmax_np(mix.logits.value)
            means = mix.means.value
            stds = _softplus_np(mix.raw_stds.value)
            yj = mixture_cdf_forward_direction(
                x.value[..., j], w, means, stds, solver=self.solver)
            cols.append(yj[..., None])
        y = ad.constant(np.concatenate(cols, axis=-1))
        # log-det from the analytic inverse at the solved point
        _, ildj = self.inverse(y)
        return y, ad.constant(-ildj.value)


def _softmax_np(logits):
    e = np.exp(logits - logits.max())
    return e / e.sum()


def _softplus_np(x):
    return np.maximum(x, 0.0) + np.log1p(np.exp(-np.abs(x)))


# ---------------------------------------------------------------------------
# masked autoregressive layer


class MadeConditioner:
    """Masked MLP producing per-dimension shift mu and log-scale alpha.

    Binary masks enforce that output unit j reads only inputs < j. The
    final layer starts at zero so the transform begins at identity.
    """

    def __init__(self, dim, hidden=(64, 64), activation="tanh", seed=0,
                 name="made"):
        if dim < 1:
            raise ShapeError("conditioner needs dim >= 1")
        self.dim = dim
        self.activation = activation
        rng = np.random.default_rng(seed)
        in_deg = np.arange(1, dim + 1)
        hidden_degs = [1 + (np.arange(h) % max(1, dim - 1)) for h in hidden]
        out_deg = np.tile(np.arange(1, dim + 1), 2)  # (mu_1..mu_d, a_1..a_d)

        self.weights, self.biases, self.masks = [], [], []
        prev_deg, prev_n = in_deg, dim
        for li, (h, deg) in enumerate(zip(hidden, hidden_degs)):
            scale = np.sqrt(2.0 / (prev_n + h))
            w = Param(f"{name}.w{li}", rng.normal(0.0, scale, size=(prev_n, h)))
            b = Param(f"{name}.b{li}", np.zeros(h))
            mask = (deg[None, :] >= prev_deg[:, None]).astype(np.float64)
            self.weights.append(w)
            self.biases.append(b)
            self.masks.append(mask)
            prev_deg, prev_n = deg, h
        w_out = Param(f"{name}.w_out", np.zeros((prev_n, 2 * dim)))
        b_out = Param(f"{name}.b_out", np.zeros(2 * dim))
        mask_out = (out_deg[None, :] > prev_deg[:, None]).astype(np.float64)
        self.weights.append(w_out)
        self.biases.append(b_out)
        self.masks.append(mask_out)

    def params(self):
        return [*self.weights, *self.biases]

    def __call__(self, y):
        h = y
        act = ad.tanh if self.activation == "tanh" else ad.relu
        last = len(self.weights) - 1
        for li, (w, b, mask) in enumerate(zip(self.weights, self.biases,
                                              self.masks)):
            wm = ad.watch(w) * ad.constant(mask)
            h = ad.matmul(h, wm) + ad.watch(b)
            if li != last:
                h = act(h)
        mu = ad.gather(h, np.arange(self.dim))
        alpha = ad.gather(h, np.arange(self.dim, 2 * self.dim))
        return mu, alpha


class MaskedAutoregressive(Layer):
    """Affine autoregressive layer; the conditioner reads the data side.

    inverse (data to base) runs in one parallel pass; forward rebuilds
    the output one coordinate at a time (dim sequential conditioner
    calls).
    """

    def __init__(self, conditioner: MadeConditioner):
        self.conditioner = conditioner
        self.dim = conditioner.dim

    def params(self):
        return self.conditioner.params()

    def inverse(self, y):
        y = ad._as_tensor(y)
        _check_dim(self, y)
        mu, alpha = self.conditioner(y)
        x = (y - mu) * ad.exp(-alpha)
        return x, ad.tsum(-alpha, axis=-1)

    def forward(self, x):
        x = ad._as_tensor(x)
        _check_dim(self, x)
        batch = x.shape[:-1]
        zero_col = ad.constant(np.zeros(batch + (1,)))
        cols = [zero_col] * self.dim
        alphas = []
        for j in range(self.dim):
            current = ad.concat(cols) if self.dim > 1 else cols[0]
            mu, alpha = self.conditioner(current)
            mu_j = ad.gather(mu, [j])
            alpha_j = ad.gather(alpha, [j])
            x_j = ad.gather(x, [j])
            cols[j] = mu_j + ad.exp(alpha_j) * x_j
            alphas.append(alpha_j)
        y = ad.concat(cols)
        fldj = ad.tsum(ad.concat(alphas), axis=-1)
        return y, fldj
