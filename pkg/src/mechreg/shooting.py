"""Geodesic shooting: train initial momenta, transport test points, read out.

Training minimizes V(p0) = (nu/2) p0^T Gamma_r(X,X) p0 + end_loss(q(1), Y)
over the initial momentum of the landmark Hamiltonian flow. Gradients go
through the integrator by reverse sweep, so they are exact for the discrete
map; the readout is refit at the terminal positions.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .errors import DimensionMismatch, Divergence
from .hamiltonian import PhaseState, Trajectory, _fixed_point, adjoint_sweep, integrate
from .kernels import (
    as_points,
    cross_apply,
    feature_apply,
    gram_apply,
    gram_quadratic_grad,
    scalar_gram,
)
from .optim import minimize_gd
from .regression import (
    LossSpec,
    RidgeModel,
    fit_ridge,
    hinge_loss,
    ridge_loss_with_grad,
)

STAGE_TOL = 1e-15
STAGE_MAX_ITER = 400


@dataclass(frozen=True)
class ShootingConfig:
    nu: float = 0.01
    lam: float = 0.1
    h: float = 0.2
    steps: int = 5
    loss: LossSpec = field(default_factory=LossSpec)
    tol: float = 1e-6
    max_iter: int = 5000
    readout_lam: float | None = None

    def __post_init__(self):
        if self.nu <= 0 or self.h <= 0 or self.steps < 1:
            raise ValueError("need nu > 0, h > 0, steps >= 1")
        if self.loss.kind == "hinge" and self.lam <= 0:
            raise ValueError("hinge readout needs lam > 0")


@dataclass(frozen=True)
class ShootingModel:
    gamma: object
    k_out: object
    p0: np.ndarray
    trajectory: object
    readout: RidgeModel
    config: ShootingConfig
    targets: np.ndarray
    value: float
    converged: bool
    iterations: int

    def classify(self, x):
        scores = predict(self, x)
        return np.argmax(np.atleast_2d(scores), axis=1)


def _hinge_readout(k_out, q, labels, lam, num_classes, warm=None, tol=1e-10):
    """Inner problem min_Z lam Z^T S_r Z + hinge(S_r Z), solved exactly.

    For two classes the optimum has antisymmetric columns Z = [-c/2, c/2], so
    the problem reduces to min_c (lam/2) c^T S c + sum_i max(0, 1 - y_i (Sc)_i)
    with y_i = +-1. Its dual max_{0<=beta<=1} sum(beta) - (1/2lam)(beta y)^T S
    (beta y) is a box QP solved by cyclic coordinate ascent (closed-form
    clipped updates); termination is certified by the max projected-gradient
    KKT violation. The optimum sits on hinge kinks generically (fractional
    beta), which descent on the nonsmooth primal cannot resolve. Returns
    (value, Z, beta).
    """
    if num_classes != 2:
        raise ValueError("hinge readout is implemented for exactly 2 classes")
    labels = np.asarray(labels).reshape(-1)
    s_r = scalar_gram(k_out, q)
    s_r[np.diag_indices_from(s_r)] += k_out.nugget
    y = np.where(labels == 1, 1.0, -1.0)
    n = len(y)
    beta = np.zeros(n) if warm is None else np.clip(np.asarray(warm, float), 0.0, 1.0)
    v = s_r @ (beta * y)
    diag = np.diag(s_r)
    for _ in range(100000):
        for i in range(n):
            off = v[i] - diag[i] * y[i] * beta[i]
            target = np.clip((lam - y[i] * off) / diag[i], 0.0, 1.0)
            delta = target - beta[i]
            if delta != 0.0:
                beta[i] = target
                v += s_r[:, i] * (y[i] * delta)
        g = 1.0 - y * v / lam
        kkt = np.where(beta <= 0.0, np.maximum(g, 0.0),
                       np.where(beta >= 1.0, np.minimum(g, 0.0), g))
        if np.max(np.abs(kkt)) < tol:
            break
    else:
        raise Divergence("hinge readout dual did not converge", iterate=beta)
    c = beta * y / lam
    z = np.column_stack([-c / 2.0, c / 2.0])
    scores = s_r @ z
    h_val, _ = hinge_loss(scores, labels)
    value = lam * float(np.sum(z * scores)) + h_val
    return value, z, beta


def make_end_loss(k_out, targets, lam, loss=LossSpec()):
    """End loss on terminal positions q: callable q -> (value, dvalue/dq).

    squared: the ridge/optimal-recovery value lam Y^T (K+lam I)^-1 Y with the
    targets as labels. hinge: the inner readout problem solved to tolerance,
    differentiated through the envelope at its optimum.
    """
    if loss.kind == "squared":

        def end(q):
            return ridge_loss_with_grad(k_out, q, targets, lam)

        return end

    labels = np.asarray(targets).astype(int)
    state = {"warm": None}

    def end(q):
        value, z, beta = _hinge_readout(
            k_out, q, labels, lam, loss.num_classes, warm=state["warm"]
        )
        state["warm"] = beta
        # Envelope gradient: stationarity of the inner problem gives the hinge
        # subgradient U = -2*lam*Z at the optimum (S_r invertible), so
        # d/dq [lam Z'SZ + hinge(SZ)] = lam Z'(dS)Z - 2*lam Z'(dS)Z. Using the
        # exact dual solution instead of a sampled subgradient keeps the outer
        # gradient continuous when the optimum sits on a hinge kink.
        grad = -lam * gram_quadratic_grad(k_out, q, z)
        return value, grad

    return end


def shoot(gamma, k_out, x, y, config=ShootingConfig()):
    """Optimize the initial momentum, then refit the readout at q(1)."""
    x = as_points(x, "X")
    end_loss = make_end_loss(k_out, y, config.lam, config.loss)
    shape = x.shape

    def objective(flat):
        p0 = flat.reshape(shape)
        try:
            traj = integrate(gamma, PhaseState(q=x, p=p0), config.h, config.steps)
            end_value, end_grad = end_loss(traj.final.q)
            value = 0.5 * config.nu * float(
                np.sum(p0 * gram_apply(gamma, x, p0))
            ) + end_value
            _, p0_bar = adjoint_sweep(traj, end_grad)
        except Divergence:
            # a stage solver left its contraction region: momentum too large
            # for the step size; report infeasible so the line search backs off
            return np.inf, np.zeros(flat.size)
        grad = config.nu * gram_apply(gamma, x, p0) + p0_bar
        return value, grad.reshape(-1)

    res = minimize_gd(
        objective, np.zeros(x.size), tol=config.tol, max_iter=config.max_iter
    )
    p0 = res.x.reshape(shape)
    traj = integrate(gamma, PhaseState(q=x, p=p0), config.h, config.steps)
    q1 = traj.final.q
    readout_lam = config.lam if config.readout_lam is None else config.readout_lam
    if config.loss.kind == "squared":
        readout = fit_ridge(k_out, q1, y, readout_lam)
    else:
        labels = np.asarray(y).astype(int)
        _, z, _ = _hinge_readout(k_out, q1, labels, readout_lam, config.loss.num_classes)
        readout = RidgeModel(
            kernel=k_out, anchors=q1, coefficients=z, lam=readout_lam
        )
    return ShootingModel(
        gamma=gamma,
        k_out=k_out,
        p0=p0,
        trajectory=traj,
        readout=readout,
        config=config,
        targets=np.asarray(y),
        value=res.value,
        converged=res.converged,
        iterations=res.iterations,
    )


def transport(model, x_test, as_of_t=None):
    """Carry test points along the learned flow dz = K(z, q(t)) p(t) dt.

    Each step mirrors the landmark update exactly, reusing the stored stage
    momenta, so at nugget 0 a test point placed on a landmark follows it.
    Accepts a fitted model or a bare Trajectory from integrate().
    """
    x = np.asarray(x_test, dtype=float)
    single = x.ndim == 1
    z = as_points(x, "x_test")
    traj = model if isinstance(model, Trajectory) else model.trajectory
    h = traj.h
    total = len(traj.states) - 1
    if as_of_t is None:
        n_steps = total
    else:
        n_steps = int(round(as_of_t / h))
        if n_steps < 0 or n_steps > total:
            raise DimensionMismatch(
                f"time {as_of_t} outside the stored trajectory [0, {total * h}]"
            )
    gamma = traj.kernel
    for s in range(n_steps):
        q1 = traj.states[s + 1].q
        p_half = traj.half_momenta[s]
        drift0 = cross_apply(gamma, z, traj.states[s].q, p_half)
        base = z + (h / 2.0) * drift0

        def stage(znext, base=base, q1=q1, p_half=p_half):
            return base + (h / 2.0) * cross_apply(gamma, znext, q1, p_half)

        z = _fixed_point(stage, z, "test-point transport")
    return z[0] if single else z


def predict(model, x_test):
    """Readout at the transported points: f(phi(x, 1))."""
    return model.readout.predict(transport(model, x_test))


@dataclass(frozen=True)
class MomentumReport:
    p0_norms: np.ndarray
    p1_norms: np.ndarray
    loss_grad_norms: np.ndarray
    boundary_residual: float
    violations: np.ndarray


def momentum_report(model, tol=1e-4):
    """Per-point momentum and end-loss gradient norms, plus the boundary check.

    Flags indices whose end-loss gradient vanishes while the terminal
    momentum does not; at convergence nu p(1) = -grad, so both should be
    small together.
    """
    traj = model.trajectory
    q1 = traj.final.q
    p1 = traj.final.p
    end_loss = make_end_loss(
        model.k_out, model.targets, model.config.lam, model.config.loss
    )
    _, grad = end_loss(q1)
    p0_norms = np.linalg.norm(model.p0, axis=1)
    p1_norms = np.linalg.norm(p1, axis=1)
    grad_norms = np.linalg.norm(grad, axis=1)
    residual = float(np.max(np.abs(model.config.nu * p1 + grad)))
    violations = np.flatnonzero((grad_norms < tol) & (p1_norms >= tol))
    return MomentumReport(
        p0_norms=p0_norms,
        p1_norms=p1_norms,
        loss_grad_norms=grad_norms,
        boundary_residual=residual,
        violations=violations,
    )


def sample_residual_gp_flow(fm, x0, steps, seed, total_time=1.0):
    """Euler-Maruyama path of dz = psi^T(z) dW for the feature-map GP field.

    Increments are G_k phi(z_k) with G_k a (d, F) matrix of N(0, dt) entries
    drawn from the seed; the path is an array of shape (steps+1, d).
    """
    x0 = np.asarray(x0, dtype=float)
    if x0.ndim != 1:
        raise DimensionMismatch("x0 must be a single point")
    if steps < 1:
        raise ValueError("steps must be positive")
    rng = np.random.default_rng(seed)
    dt = total_time / steps
    d = x0.size
    path = np.empty((steps + 1, d))
    path[0] = x0
    z = x0.copy()
    for k in range(steps):
        g = np.sqrt(dt) * rng.standard_normal((d, fm.feature_dim))
        z = z + g @ feature_apply(fm, z)
        path[k + 1] = z
    return path
