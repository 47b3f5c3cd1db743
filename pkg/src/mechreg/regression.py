"""Closed-form kernel regression, losses, posterior variance, and GP sampling."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .errors import DimensionMismatch
from .kernels import (
    KernelSpec,
    as_points,
    feature_apply,
    gram,
    gram_quadratic_grad,
    same_point_sets,
    scalar_gram,
    solve_spd,
)


def _as_targets(y, n):
    y = np.asarray(y, dtype=float)
    if y.ndim == 1:
        y = y[:, None]
    if y.ndim != 2 or len(y) != n:
        raise DimensionMismatch(f"targets must be (N, d_out) with N={n}, got {y.shape}")
    return y


@dataclass(frozen=True)
class RidgeModel:
    """f(x) = K(x, X) Z for anchors X and coefficients Z = (K(X,X)+lam I)^-1 Y.

    Prediction uses pointwise kernel evaluation; the nugget enters only the
    training Gram, so with lam=0 and a tiny nugget the fit interpolates to
    within nugget * ||Z||.
    """

    kernel: KernelSpec
    anchors: np.ndarray
    coefficients: np.ndarray
    lam: float

    def predict(self, x):
        x = np.asarray(x, dtype=float)
        single = x.ndim == 1
        pts = as_points(x, "x")
        if self.kernel.is_scalar():
            out = scalar_gram(self.kernel, pts, self.anchors) @ self.coefficients
        else:
            flat = gram(self.kernel, pts, self.anchors) @ self.coefficients.reshape(-1)
            out = flat.reshape(len(pts), -1)
        return out[0] if single else out

    def rkhs_norm_sq(self):
        """||f||_H^2 = Z^T K(X, X) Z in the kernel that fit the model."""
        z = self.coefficients
        if self.kernel.is_scalar():
            k = scalar_gram(self.kernel, self.anchors)
            if self.kernel.nugget > 0:
                k = k + self.kernel.nugget * np.eye(len(k))
            return float(np.sum(z * (k @ z)))
        zf = z.reshape(-1)
        return float(zf @ gram(self.kernel, self.anchors) @ zf)


@dataclass(frozen=True)
class LossSpec:
    """End loss on predicted outputs: squared error or multiclass hinge."""

    kind: str = "squared"
    num_classes: int | None = None

    def __post_init__(self):
        if self.kind not in ("squared", "hinge"):
            raise ValueError(f"unknown loss kind {self.kind!r}")
        if self.kind == "hinge" and (self.num_classes is None or self.num_classes < 2):
            raise ValueError("hinge loss needs num_classes >= 2")

    def value(self, yprime, target):
        if self.kind == "squared":
            yprime = np.asarray(yprime, dtype=float)
            target = np.asarray(target, dtype=float)
            return float(np.sum((yprime - target) ** 2))
        return hinge_loss(yprime, target)[0]

    def grad(self, yprime, target):
        if self.kind == "squared":
            return 2.0 * (np.asarray(yprime, dtype=float) - np.asarray(target, dtype=float))
        return hinge_loss(yprime, target)[1]


def fit_ridge(kernel, x, y, lam):
    """Solve (K(X,X) + lam I) Z = Y; the Gram carries the kernel's nugget."""
    x = as_points(x, "X")
    if lam < 0:
        raise ValueError("lambda must be nonnegative")
    if lam + kernel.nugget <= 0:
        raise ValueError("need lambda + nugget > 0 for an invertible system")
    if kernel.is_scalar():
        y = _as_targets(y, len(x))
        k = scalar_gram(kernel, x)
        k[np.diag_indices_from(k)] += kernel.nugget + lam
        z = solve_spd(k, y)
    else:
        y = _as_targets(y, len(x))
        if y.shape[1] != kernel.output_dim:
            raise DimensionMismatch(
                f"targets must have {kernel.output_dim} columns, got {y.shape[1]}"
            )
        k = gram(kernel, x)
        k[np.diag_indices_from(k)] += lam
        z = solve_spd(k, y.reshape(-1)).reshape(y.shape)
    return RidgeModel(kernel=kernel, anchors=x, coefficients=z, lam=float(lam))


def ridge_loss_with_grad(kernel, x, y, lam):
    """(ridge_loss, its gradient in X) sharing a single Gram factorization.

    d/dX of c Y^T (K(X)+lam I)^-1 Y = -c Z^T (dK/dX) Z with Z the fitted
    coefficients, which is -c times the Gram quadratic-form gradient.
    """
    model = fit_ridge(kernel, x, y, lam)
    y = _as_targets(y, len(model.anchors))
    scale = lam if lam > 0 else 1.0
    value = scale * float(np.sum(y * model.coefficients))
    grad = -scale * gram_quadratic_grad(kernel, model.anchors, model.coefficients)
    return value, grad


def ridge_loss(kernel, x, y, lam):
    """lam Y^T (K + lam I)^-1 Y; at lam=0 this is the recovery energy Y^T K^-1 Y."""
    return ridge_loss_with_grad(kernel, x, y, lam)[0]


def ridge_loss_grad(kernel, x, y, lam):
    """Gradient of ridge_loss in the anchor positions X."""
    return ridge_loss_with_grad(kernel, x, y, lam)[1]


def hinge_loss(scores, labels):
    """Multiclass hinge: sum_i max(0, 1 - (s_correct - max wrong)), plus subgradient.

    The subgradient is zero for samples at or above unit margin.
    """
    scores = np.asarray(scores, dtype=float)
    if scores.ndim != 2 or scores.shape[1] < 2:
        raise DimensionMismatch("scores must be (N, C) with C >= 2")
    labels = np.asarray(labels)
    if labels.shape != (len(scores),):
        raise DimensionMismatch("labels must be one class index per row")
    labels = labels.astype(int)
    if labels.min() < 0 or labels.max() >= scores.shape[1]:
        raise ValueError("label out of range")
    n = len(scores)
    idx = np.arange(n)
    correct = scores[idx, labels]
    masked = scores.copy()
    masked[idx, labels] = -np.inf
    rival = masked.argmax(axis=1)
    margin = correct - masked[idx, rival]
    active = margin < 1.0
    loss = float(np.sum(1.0 - margin[active]))
    grad = np.zeros_like(scores)
    grad[idx[active], labels[active]] = -1.0
    grad[idx[active], rival[active]] = 1.0
    return loss, grad


def _power_function_batch(kernel, x_train, lam, probes):
    """sigma^2 at each probe point, sharing one factorization of the training Gram."""
    x_train = as_points(x_train, "X")
    probes = as_points(probes, "probes")
    if kernel.is_scalar():
        k = scalar_gram(kernel, x_train)
        k[np.diag_indices_from(k)] += kernel.nugget + lam
        cross = scalar_gram(kernel, probes, x_train)
        if kernel.nugget > 0 and same_point_sets(probes, x_train):
            cross[np.diag_indices_from(cross)] += kernel.nugget
        self_k = np.array(
            [scalar_gram(kernel, p[None, :])[0, 0] + kernel.nugget for p in probes]
        )
        sol = solve_spd(k, cross.T)
        sig = kernel.output_dim * (self_k - np.sum(cross * sol.T, axis=1))
    else:
        d = kernel.output_dim
        k = gram(kernel, x_train)
        k[np.diag_indices_from(k)] += lam
        sig = np.empty(len(probes))
        for i, p in enumerate(probes):
            self_block = gram(kernel, p[None, :])
            cross = gram(kernel, p[None, :], x_train)
            sol = solve_spd(k, cross.T)
            sig[i] = np.trace(self_block) - np.trace(cross @ sol)
    return np.maximum(sig, 0.0)


def power_function(kernel, x_train, lam, x):
    """Conditional variance sigma^2(x) = Tr[K(x,x) - K(x,X)(K+lam I)^-1 K(X,x)].

    Floating-point cancellation can dip slightly negative; the value is
    clamped at zero (the trace of a Schur complement is nonnegative).
    """
    x = np.asarray(x, dtype=float)
    probes = x[None, :] if x.ndim == 1 else as_points(x, "x")
    out = _power_function_batch(kernel, x_train, lam, probes)
    return float(out[0]) if x.ndim == 1 else out


@dataclass(frozen=True)
class ErrorBoundReport:
    errors: np.ndarray
    bounds: np.ndarray
    bounds_crude: np.ndarray
    ok: np.ndarray
    passed: bool


def error_bound_check(kernel, x_train, lam, f_dagger, test_points):
    """Verify |f_dagger(x) - f(x)| <= sigma(x) ||f_dagger||_H at each test point.

    f is the ridge fit to f_dagger's values on x_train. The check uses the
    power-function bound at every lambda; the cruder radius
    sqrt(sigma^2(x) + lam dim_Y) ||f_dagger||_H is reported alongside it.
    """
    x_train = as_points(x_train, "X")
    test_points = as_points(test_points, "test_points")
    y = f_dagger.predict(x_train)
    model = fit_ridge(kernel, x_train, y, lam)
    resid = f_dagger.predict(test_points) - model.predict(test_points)
    if resid.ndim == 1:
        resid = resid[:, None]
    errors = np.linalg.norm(resid, axis=1)
    sig_sq = _power_function_batch(kernel, x_train, lam, test_points)
    norm_h = np.sqrt(max(f_dagger.rkhs_norm_sq(), 0.0))
    dim_y = resid.shape[1]
    bounds = np.sqrt(sig_sq) * norm_h
    bounds_crude = np.sqrt(sig_sq + lam * dim_y) * norm_h
    ok = errors <= bounds * (1 + 1e-9) + 1e-12
    return ErrorBoundReport(
        errors=errors,
        bounds=bounds,
        bounds_crude=bounds_crude,
        ok=ok,
        passed=bool(ok.all()),
    )


def sample_gp(fm, mean=None, seed=0, output_dim=None):
    """Draw one GP path xi(x) = mean(x) + alpha phi(x), alpha i.i.d. N(0,1).

    Returns a function handle; the draw is fixed by the seed, so repeated
    calls of the handle are deterministic.
    """
    if mean is not None and output_dim is None:
        output_dim = mean.coefficients.shape[1]
    d_out = output_dim or 1
    rng = np.random.default_rng(seed)
    alpha = rng.standard_normal((d_out, fm.feature_dim))

    def xi(x):
        x = np.asarray(x, dtype=float)
        feats = feature_apply(fm, x)
        val = feats @ alpha.T
        if mean is not None:
            val = val + mean.predict(x)
        return val

    return xi
