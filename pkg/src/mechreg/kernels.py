"""Kernel definitions, Gram assembly, analytic gradients, and feature maps.

Scalar operator-valued kernels K(x, x') = k(x, x') I are stored as their
scalar part plus an output-dimension tag; the block structure is materialized
only when a caller asks for the full Gram matrix.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
import scipy.linalg
import scipy.special

from .errors import DimensionMismatch, NonFiniteInput, SingularSystem, UnsupportedKernel

SCALAR_FAMILIES = ("gaussian", "activation", "linear")


def as_points(x, name="points"):
    """Coerce to a finite (m, d) float array; 1-D input becomes one point."""
    arr = np.asarray(x, dtype=float)
    if arr.ndim == 1:
        arr = arr[None, :]
    if arr.ndim != 2:
        raise DimensionMismatch(f"{name} must be a 2-D point array, got shape {arr.shape}")
    if not np.all(np.isfinite(arr)):
        raise NonFiniteInput(f"{name} contains non-finite entries")
    return arr


@dataclass(frozen=True)
class ActivationSpec:
    """Elementwise nonlinearity a(z); tanh and softplus_clamped are C^2."""

    nonlinearity: str = "tanh"
    epsilon: float = 0.01

    def __post_init__(self):
        if self.nonlinearity not in ("tanh", "softplus_clamped", "relu", "identity"):
            raise UnsupportedKernel(f"unknown nonlinearity {self.nonlinearity!r}")
        if self.epsilon <= 0:
            raise ValueError("epsilon must be positive")

    def value(self, z):
        z = np.asarray(z, dtype=float)
        if self.nonlinearity == "tanh":
            return np.tanh(z)
        if self.nonlinearity == "relu":
            return np.maximum(z, 0.0)
        if self.nonlinearity == "identity":
            return z
        u = np.logaddexp(0.0, z)
        return u / (1.0 + self.epsilon * u)

    def deriv(self, z):
        z = np.asarray(z, dtype=float)
        if self.nonlinearity == "tanh":
            return 1.0 - np.tanh(z) ** 2
        if self.nonlinearity == "relu":
            # subgradient 0 at the kink
            return (z > 0).astype(float)
        if self.nonlinearity == "identity":
            return np.ones_like(z)
        u = np.logaddexp(0.0, z)
        sig = scipy.special.expit(z)
        return sig / (1.0 + self.epsilon * u) ** 2

    def second_deriv(self, z):
        z = np.asarray(z, dtype=float)
        if self.nonlinearity == "tanh":
            t = np.tanh(z)
            return -2.0 * t * (1.0 - t**2)
        if self.nonlinearity == "identity":
            return np.zeros_like(z)
        if self.nonlinearity == "relu":
            raise UnsupportedKernel(
                "relu has no second derivative; use softplus_clamped for kernel paths"
            )
        u = np.logaddexp(0.0, z)
        sig = scipy.special.expit(z)
        denom = 1.0 + self.epsilon * u
        return sig * (1.0 - sig) / denom**2 - 2.0 * self.epsilon * sig**2 / denom**3


@dataclass(frozen=True)
class FeatureMapSpec:
    """Explicit feature map phi for a scalar kernel k(x,x') = phi(x).phi(x')."""

    kind: str
    activation: ActivationSpec
    dim_in: int
    feature_dim: int
    weights: np.ndarray | None = None
    biases: np.ndarray | None = None
    seed: int | None = None

    def __post_init__(self):
        if self.kind not in ("activation_identity", "random_features"):
            raise UnsupportedKernel(f"unknown feature map kind {self.kind!r}")
        if self.kind == "activation_identity" and self.feature_dim != self.dim_in + 1:
            raise DimensionMismatch("activation_identity feature_dim must be dim_in + 1")
        if self.kind == "random_features":
            if self.weights is None or self.biases is None:
                raise DimensionMismatch("random_features needs weights and biases")
            if self.weights.shape != (self.feature_dim, self.dim_in):
                raise DimensionMismatch("weights must have shape (feature_dim, dim_in)")
            if self.biases.shape != (self.feature_dim,):
                raise DimensionMismatch("biases must have shape (feature_dim,)")


def activation_identity_features(dim_in, activation=ActivationSpec("tanh")):
    """phi(x) = (a(x), 1): the feature map of the kernel a(x).a(x') + 1."""
    return FeatureMapSpec(
        kind="activation_identity",
        activation=activation,
        dim_in=dim_in,
        feature_dim=dim_in + 1,
    )


def random_features(dim_in, feature_dim, activation=ActivationSpec("relu"), seed=0):
    """Draw phi(x) = a(Wx + b) once from a seeded generator; immutable afterwards.

    Entries follow W ~ (1.5/sqrt(dim_in)) N(0,1) and b ~ 0.1 N(0,1).
    """
    rng = np.random.default_rng(seed)
    w = (1.5 / np.sqrt(dim_in)) * rng.standard_normal((feature_dim, dim_in))
    b = 0.1 * rng.standard_normal(feature_dim)
    w.setflags(write=False)
    b.setflags(write=False)
    return FeatureMapSpec(
        kind="random_features",
        activation=activation,
        dim_in=dim_in,
        feature_dim=feature_dim,
        weights=w,
        biases=b,
        seed=seed,
    )


def feature_apply(fm, x):
    """Evaluate phi(x). Accepts one point (d,) or a batch (n, d)."""
    x = np.asarray(x, dtype=float)
    single = x.ndim == 1
    pts = as_points(x, "x")
    if pts.shape[1] != fm.dim_in:
        raise DimensionMismatch(f"expected points of dimension {fm.dim_in}, got {pts.shape[1]}")
    if fm.kind == "activation_identity":
        feats = np.concatenate([fm.activation.value(pts), np.ones((len(pts), 1))], axis=1)
    else:
        feats = fm.activation.value(pts @ fm.weights.T + fm.biases)
    return feats[0] if single else feats


def feature_adjoint_apply(fm, alpha, x):
    """psi^T(x) alpha = alpha phi(x) for alpha in L(F, Y) given as (d_out, F)."""
    alpha = np.asarray(alpha, dtype=float)
    if alpha.ndim != 2 or alpha.shape[1] != fm.feature_dim:
        raise DimensionMismatch(
            f"alpha must be (d_out, {fm.feature_dim}), got {alpha.shape}"
        )
    feats = feature_apply(fm, x)
    return feats @ alpha.T


def feature_input_vjp(fm, x, upstream):
    """Pull a cotangent on phi(x) back to x.

    upstream has shape (n, feature_dim); returns (n, dim_in). Used by the
    residual-block trainer, so relu's a.e. derivative is accepted here.
    """
    pts = as_points(x, "x")
    up = np.asarray(upstream, dtype=float)
    if fm.kind == "activation_identity":
        return up[:, : fm.dim_in] * fm.activation.deriv(pts)
    pre = pts @ fm.weights.T + fm.biases
    return (up * fm.activation.deriv(pre)) @ fm.weights


@dataclass(frozen=True)
class KernelSpec:
    """A kernel family plus nugget and the output dimension of its identity block.

    Families: gaussian (bandwidth), activation (ActivationSpec), linear, and
    rem (spec object supplied by the rem module).
    """

    family: str
    output_dim: int = 1
    nugget: float = 0.0
    bandwidth: float | None = None
    activation: ActivationSpec | None = None
    rem: object = None

    def __post_init__(self):
        if self.family not in SCALAR_FAMILIES + ("rem",):
            raise UnsupportedKernel(f"unknown kernel family {self.family!r}")
        if self.nugget < 0:
            raise ValueError("nugget must be nonnegative")
        if self.output_dim < 1:
            raise ValueError("output_dim must be a positive integer")
        if self.family == "gaussian" and (self.bandwidth is None or self.bandwidth <= 0):
            raise ValueError("gaussian kernel needs bandwidth > 0")
        if self.family == "activation" and self.activation is None:
            raise UnsupportedKernel("activation kernel needs an ActivationSpec")
        if self.family == "rem" and self.rem is None:
            raise UnsupportedKernel("rem kernel needs a RemSpec")

    def is_scalar(self):
        if self.family in SCALAR_FAMILIES:
            return True
        return self.family == "rem" and getattr(self.rem, "mode", None) == "invariant"


def gaussian_kernel(bandwidth, nugget=0.0, output_dim=1):
    return KernelSpec("gaussian", output_dim=output_dim, nugget=nugget, bandwidth=bandwidth)


def activation_kernel(activation=ActivationSpec("tanh"), nugget=0.0, output_dim=1):
    return KernelSpec("activation", output_dim=output_dim, nugget=nugget, activation=activation)


def same_point_sets(a, b):
    if b is None or a is b:
        return True
    return a.shape == b.shape and np.array_equal(a, b)


def scalar_gram(kernel, a, b=None):
    """Scalar part k(A_i, B_j) as an (m, n) array, without any nugget."""
    a = as_points(a, "A")
    b = a if b is None else as_points(b, "B")
    if a.shape[1] != b.shape[1]:
        raise DimensionMismatch(f"point dimensions differ: {a.shape[1]} vs {b.shape[1]}")
    if kernel.family == "gaussian":
        sq = (
            np.sum(a**2, axis=1)[:, None]
            + np.sum(b**2, axis=1)[None, :]
            - 2.0 * a @ b.T
        )
        np.maximum(sq, 0.0, out=sq)
        return np.exp(-sq / kernel.bandwidth**2)
    if kernel.family == "activation":
        return kernel.activation.value(a) @ kernel.activation.value(b).T + 1.0
    if kernel.family == "linear":
        return a @ b.T
    if kernel.is_scalar():  # rem in invariant mode
        return kernel.rem.invariant_gram(a, b)
    raise UnsupportedKernel(f"{kernel.family} kernel has no scalar part")


def gram(kernel, a, b=None):
    """Block Gram matrix (m*d_out) x (n*d_out); block (i, j) = K(A_i, B_j).

    When the two point lists are the same set and the nugget is positive,
    r I is added to each diagonal block (and nowhere else).
    """
    a = as_points(a, "A")
    b_arr = a if b is None else as_points(b, "B")
    same = same_point_sets(a, None if b is None else b_arr)
    if kernel.is_scalar():
        s = scalar_gram(kernel, a, b_arr)
        d = kernel.output_dim
        full = np.kron(s, np.eye(d)) if d > 1 else s.copy()
    else:
        full = kernel.rem.block_gram(a, b_arr)
    if same and kernel.nugget > 0:
        full[np.diag_indices_from(full)] += kernel.nugget
    return full


def gram_quadratic_grad(kernel, q, p, gram_cache=None):
    """d/dq of p^T K_r(q, q) p with p held fixed; the nugget term is constant.

    p may carry any number of columns (each column contributes its own
    quadratic form; they are summed). gram_cache lets iterative callers pass
    a precomputed scalar_gram(kernel, q) for the gaussian family.
    """
    q = as_points(q, "q")
    p = np.asarray(p, dtype=float)
    if p.ndim == 1:
        p = p[:, None]
    if len(p) != len(q):
        raise DimensionMismatch("q and p must list the same number of points")
    if kernel.family == "rem":
        if getattr(kernel.rem, "mode", None) == "invariant":
            raise UnsupportedKernel("invariant rem kernels have no position gradient hook")
        return kernel.rem.quad_grad(q, p)
    c = p @ p.T
    if kernel.family == "gaussian":
        k = scalar_gram(kernel, q) if gram_cache is None else gram_cache
        w = k * c
        return (-4.0 / kernel.bandwidth**2) * (w.sum(axis=1)[:, None] * q - w @ q)
    if kernel.family == "activation":
        av, ad = _act_value_deriv(kernel, q)
        return 2.0 * ad * (c @ av)
    if kernel.family == "linear":
        return 2.0 * c @ q
    raise UnsupportedKernel(f"no analytic gradient for family {kernel.family!r}")


def _act_value_deriv(kernel, q):
    act = kernel.activation
    if act.nonlinearity == "relu":
        raise UnsupportedKernel(
            "relu activation kernels are not differentiable; use softplus_clamped"
        )
    return act.value(q), act.deriv(q)


# ---------------------------------------------------------------------------
# Hooks used by the Hamiltonian integrator and its adjoint. All follow the
# convention G(q, p) := d/dq (p^T K_r(q,q) p) = gram_quadratic_grad.
# ---------------------------------------------------------------------------


def gram_apply(kernel, q, p, nugget=True, gram_cache=None):
    """K_r(q, q) p (or K(q, q) p with nugget=False) for stacked p of shape (N, c)."""
    q = as_points(q, "q")
    p = np.asarray(p, dtype=float)
    if kernel.is_scalar():
        k = scalar_gram(kernel, q) if gram_cache is None else gram_cache
        out = k @ p
    else:
        flat = kernel.rem.block_gram(q, q) @ p.reshape(-1)
        out = flat.reshape(p.shape)
    if nugget and kernel.nugget > 0:
        out = out + kernel.nugget * p
    return out


def cross_apply(kernel, z, q, p):
    """K(z, q) p with no nugget anywhere; z may be a batch of probe points."""
    z = as_points(z, "z")
    q = as_points(q, "q")
    p = np.asarray(p, dtype=float)
    if kernel.is_scalar():
        return scalar_gram(kernel, z, q) @ p
    flat = kernel.rem.block_gram(z, q) @ p.reshape(-1)
    return flat.reshape(len(z), -1)


def quad_value(kernel, q, p):
    """p^T K_r(q, q) p as a scalar."""
    p = np.asarray(p, dtype=float)
    return float(np.sum(p * gram_apply(kernel, q, p)))


def _gaussian_parts(kernel, q):
    k = scalar_gram(kernel, q)
    diff = q[:, None, :] - q[None, :, :]
    return k, diff


def quadgrad_vjp_p(kernel, q, p, v, gram_cache=None):
    """(dG/dp)^T v for G = gram_quadratic_grad, holding q fixed."""
    q = as_points(q, "q")
    p = np.asarray(p, dtype=float)
    v = np.asarray(v, dtype=float)
    if kernel.family == "gaussian":
        k = scalar_gram(kernel, q) if gram_cache is None else gram_cache
        diff = q[:, None, :] - q[None, :, :]
        b = (-4.0 / kernel.bandwidth**2) * k * np.einsum("ld,ljd->lj", v, diff)
        return (b + b.T) @ p
    if kernel.family == "activation":
        av, ad = _act_value_deriv(kernel, q)
        b = (v * ad) @ av.T
        return 2.0 * (b + b.T) @ p
    if kernel.family == "linear":
        b = v @ q.T
        return 2.0 * (b + b.T) @ p
    raise UnsupportedKernel(f"no adjoint hooks for family {kernel.family!r}")


def quadgrad_vjp_q(kernel, q, p, v):
    """(dG/dq)^T v for G = gram_quadratic_grad, holding p fixed."""
    q = as_points(q, "q")
    p = np.asarray(p, dtype=float)
    v = np.asarray(v, dtype=float)
    c = p @ p.T
    if kernel.family == "gaussian":
        s2 = kernel.bandwidth**2
        k, diff = _gaussian_parts(kernel, q)
        w = c * k
        vdiff = v[:, None, :] - v[None, :, :]
        dot = np.einsum("ljd,ljd->lj", vdiff, diff)
        term1 = (-4.0 / s2) * (w.sum(axis=1)[:, None] * v - w @ v)
        term2 = (8.0 / s2**2) * np.einsum("lj,ljd->ld", w * dot, diff)
        return term1 + term2
    if kernel.family == "activation":
        av, ad = _act_value_deriv(kernel, q)
        add = kernel.activation.second_deriv(q)
        return 2.0 * (add * v * (c @ av) + ad * (c @ (v * ad)))
    if kernel.family == "linear":
        return 2.0 * c @ v
    raise UnsupportedKernel(f"no adjoint hooks for family {kernel.family!r}")


def gram_apply_vjp_q(kernel, q, p, v, gram_cache=None):
    """d/dq of v . (K(q,q) p), i.e. the position cotangent of the drift."""
    q = as_points(q, "q")
    p = np.asarray(p, dtype=float)
    v = np.asarray(v, dtype=float)
    m = v @ p.T + p @ v.T
    if kernel.family == "gaussian":
        k = scalar_gram(kernel, q) if gram_cache is None else gram_cache
        w = k * m
        return (-2.0 / kernel.bandwidth**2) * (w.sum(axis=1)[:, None] * q - w @ q)
    if kernel.family == "activation":
        av, ad = _act_value_deriv(kernel, q)
        return ad * (m @ av)
    if kernel.family == "linear":
        return m @ q
    raise UnsupportedKernel(f"no adjoint hooks for family {kernel.family!r}")


def solve_spd(m, rhs):
    """Cholesky solve with a single 1e-10 jitter retry, then a structured error."""
    try:
        factor = scipy.linalg.cho_factor(m, lower=True)
    except np.linalg.LinAlgError:
        try:
            factor = scipy.linalg.cho_factor(
                m + 1e-10 * np.eye(m.shape[0]), lower=True
            )
        except np.linalg.LinAlgError as exc:
            raise SingularSystem(
                f"Gram matrix of size {m.shape[0]} is not positive definite even "
                "after 1e-10 jitter"
            ) from exc
    return scipy.linalg.cho_solve(factor, rhs)
