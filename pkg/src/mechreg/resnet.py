"""Residual feature-map networks trained with propagation slack variables.

A model is a chain of groups. Group m deforms its input through L_m residual
layers q <- q + w^{m,s} phibar(q) and hands the result to the next group
through a ridge readout q <- wt^m phibar2(q). Training minimizes

    sum_m (nu_m L_m / 2) sum_s (||w^{m,s}||^2 + (1/r) ||z^{m,s}||^2)
    + sum_m lam_m (||wt^m||^2 + (1/rho) ||zt^m||^2) + loss(output, Y)

where the slacks z, zt are the propagation errors of each layer and readout;
they reparameterize the inner states q^{m,s}, are trained jointly with the
weights, and are dropped at inference time. With r = rho = 0 the slacks are
pinned to zero and propagation is exact. The slack-free forward pass is the
plain composition (wt phibar2) o (I + w^L phibar) o ... o (I + w^1 phibar).

An infinite nu freezes a group's layers and slacks at zero (identity flow,
no energy contribution); that limit reduces a single group to ridge
regression on its readout features.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .errors import DimensionMismatch, Divergence, NonFiniteInput, SingularSystem
from .kernels import (
    ActivationSpec,
    FeatureMapSpec,
    activation_identity_features,
    as_points,
    feature_apply,
    feature_input_vjp,
    random_features,
    solve_spd,
)
from .optim import minimize_gd
from .regression import LossSpec

COMPONENT_NAMES = ("flow_norm", "flow_slack", "readout_norm", "readout_slack", "data_loss")


@dataclass(frozen=True)
class BlockHyper:
    """Architecture and penalties of one group: L residual layers + a readout.

    nu may be numpy.inf, which freezes the flow to the identity. A
    frozen_readout matrix fixes the readout instead of training it.
    """

    flow_features: FeatureMapSpec
    readout_features: FeatureMapSpec
    readout_dim: int
    layers: int = 1
    nu: float = 1.0
    lam: float = 1.0
    frozen_readout: np.ndarray | None = None

    def __post_init__(self):
        if self.layers < 1:
            raise ValueError("a group needs at least one layer")
        if self.readout_features.dim_in != self.flow_features.dim_in:
            raise DimensionMismatch(
                "flow and readout feature maps must share the group dimension"
            )
        if self.readout_dim < 1:
            raise ValueError("readout_dim must be positive")
        if not self.nu >= 0:
            raise ValueError("nu must be nonnegative (numpy.inf allowed)")
        if not 0 <= self.lam < np.inf:
            raise ValueError("lam must be finite and nonnegative")
        if self.frozen_readout is not None:
            mat = np.asarray(self.frozen_readout, dtype=float)
            want = (self.readout_dim, self.readout_features.feature_dim)
            if mat.shape != want:
                raise DimensionMismatch(f"frozen_readout must have shape {want}, got {mat.shape}")
            object.__setattr__(self, "frozen_readout", mat)

    @property
    def dim(self):
        return self.flow_features.dim_in

    @property
    def trains_flow(self):
        return bool(np.isfinite(self.nu))

    @property
    def trains_readout(self):
        return self.frozen_readout is None


@dataclass(frozen=True)
class TrainConfig:
    """Slack weights, loss, and optimizer knobs shared by every group."""

    r: float = 0.0
    rho: float = 0.0
    loss: LossSpec = LossSpec("squared")
    tol: float = 1e-6
    max_iter: int = 5000
    initial_step: float = 1.0
    solve_readout: bool = False
    record_components: bool = False
    batch_size: int | None = None
    batch_steps: int = 500
    batch_step_size: float = 1e-3

    def __post_init__(self):
        if self.r < 0 or self.rho < 0:
            raise ValueError("slack weights r and rho must be nonnegative")
        if (self.r > 0) != (self.rho > 0):
            raise ValueError("r and rho must both be positive or both zero")
        if self.solve_readout:
            if self.r > 0:
                raise ValueError("solve_readout needs exact propagation (r = rho = 0)")
            if self.loss.kind != "squared":
                raise ValueError("solve_readout needs the squared loss")
            if self.batch_size is not None:
                raise ValueError("solve_readout is a full-batch mode")
        if self.batch_size is not None and self.batch_size < 1:
            raise ValueError("batch_size must be positive")


@dataclass
class Block:
    """Trained state of one group. Slacks are kept for diagnostics only."""

    hyper: BlockHyper
    weights: list[np.ndarray]
    readout: np.ndarray
    slacks: list[np.ndarray] = field(default_factory=list)
    readout_slack: np.ndarray | None = None


@dataclass
class ResNetModel:
    blocks: list[Block]
    r: float = 0.0
    rho: float = 0.0
    loss: LossSpec = LossSpec("squared")
    objective: float = float("nan")
    trace: np.ndarray = field(default_factory=lambda: np.zeros(0))
    component_trace: np.ndarray | None = None
    converged: bool = False

    def predict(self, x):
        return forward(self, x)


def identity_readout(dim):
    """Feature map and frozen matrix for a pass-through readout.

    Over identity-activation features phibar(x) = (x, 1), the matrix (I | 0)
    maps the features straight back to x.
    """
    fm = activation_identity_features(dim, ActivationSpec("identity"))
    mat = np.concatenate([np.eye(dim), np.zeros((dim, 1))], axis=1)
    return fm, mat


def flow_map(block, x):
    """Apply only the residual layers of one group: (I + w^L phibar) o ..."""
    pts = as_points(np.asarray(x, dtype=float), "x")
    if pts.shape[1] != block.hyper.dim:
        raise DimensionMismatch(
            f"expected points of dimension {block.hyper.dim}, got {pts.shape[1]}"
        )
    for w in block.weights:
        pts = pts + feature_apply(block.hyper.flow_features, pts) @ w.T
    return pts


def forward(model, x):
    """Slack-free inference pass: every flow, then every readout, in order."""
    x = np.asarray(x, dtype=float)
    single = x.ndim == 1
    pts = as_points(x, "x")
    for block in model.blocks:
        pts = flow_map(block, pts)
        pts = feature_apply(block.hyper.readout_features, pts) @ block.readout.T
    return pts[0] if single else pts


def _as_hyper_chain(hypers):
    if isinstance(hypers, BlockHyper):
        hypers = [hypers]
    hypers = list(hypers)
    if not hypers:
        raise ValueError("need at least one group")
    for left, right in zip(hypers, hypers[1:]):
        if left.readout_dim != right.dim:
            raise DimensionMismatch(
                f"group readout dimension {left.readout_dim} does not feed the next "
                f"group dimension {right.dim}"
            )
    return hypers


def zero_model(hypers, r=0.0, rho=0.0, loss=LossSpec("squared")):
    """Untrained model with all-zero weights; its output is identically 0."""
    hypers = _as_hyper_chain(hypers)
    blocks = []
    for h in hypers:
        weights = [np.zeros((h.dim, h.flow_features.feature_dim)) for _ in range(h.layers)]
        readout = h.frozen_readout if h.frozen_readout is not None else np.zeros(
            (h.readout_dim, h.readout_features.feature_dim)
        )
        blocks.append(Block(hyper=h, weights=weights, readout=readout.copy()))
    return ResNetModel(blocks=blocks, r=float(r), rho=float(rho), loss=loss)


class _Layout:
    """Flat packing of all trainable arrays for the joint optimizer."""

    def __init__(self, hypers, n, config):
        self.n = n
        desc = []
        offset = 0

        def claim(shape):
            nonlocal offset
            size = int(np.prod(shape))
            entry = (offset, shape)
            offset += size
            return entry

        last = len(hypers) - 1
        for m, h in enumerate(hypers):
            block = {"w": None, "z": None, "wt": None, "zt": None}
            if h.trains_flow:
                block["w"] = [claim((h.dim, h.flow_features.feature_dim)) for _ in range(h.layers)]
                if config.r > 0:
                    block["z"] = [claim((n, h.dim)) for _ in range(h.layers)]
            solved = config.solve_readout and m == last
            if h.trains_readout and not solved:
                block["wt"] = claim((h.readout_dim, h.readout_features.feature_dim))
            if config.rho > 0:
                block["zt"] = claim((n, h.readout_dim))
            desc.append(block)
        self.desc = desc
        self.size = offset

    def unpack(self, vec):
        def view(entry):
            off, shape = entry
            return vec[off : off + int(np.prod(shape))].reshape(shape)

        parts = []
        for block in self.desc:
            parts.append(
                {
                    "w": [view(e) for e in block["w"]] if block["w"] else None,
                    "z": [view(e) for e in block["z"]] if block["z"] else None,
                    "wt": view(block["wt"]) if block["wt"] else None,
                    "zt": view(block["zt"]) if block["zt"] else None,
                }
            )
        return parts


def _ridge_readout(feats, y, lam):
    """argmin_w lam ||w||^2 + ||feats w^T - y||^2 for lam > 0.

    Solves whichever of the primal (F x F) or dual (N x N) normal equations
    is smaller.
    """
    n, f = feats.shape
    if f <= n:
        m = feats.T @ feats
        m[np.diag_indices_from(m)] += lam
        return solve_spd(m, feats.T @ y).T
    m = feats @ feats.T
    m[np.diag_indices_from(m)] += lam
    return (feats.T @ solve_spd(m, y)).T


def _training_forward(parts, x, y, hypers, config, rows):
    """Run the slack-carrying forward pass; return objective components,
    per-group caches for backprop, and the network output."""
    if rows is None:
        xs, ys, scale = x, y, 1.0
    else:
        xs, ys, scale = x[rows], y[rows], len(x) / len(rows)
    comps = dict.fromkeys(COMPONENT_NAMES, 0.0)
    cache = []
    q = xs
    last = len(hypers) - 1
    for m, h in enumerate(hypers):
        p = parts[m]
        states = [q]
        feats_list = []
        if h.trains_flow:
            c = 0.5 * h.nu * h.layers
            for s in range(h.layers):
                w = p["w"][s]
                feats = feature_apply(h.flow_features, q)
                step = feats @ w.T
                if p["z"] is not None:
                    z = p["z"][s] if rows is None else p["z"][s][rows]
                    step = step + z
                    comps["flow_slack"] += c / config.r * scale * float(np.sum(z * z))
                comps["flow_norm"] += c * float(np.sum(w * w))
                q = q + step
                states.append(q)
                feats_list.append(feats)
        feats2 = feature_apply(h.readout_features, q)
        if p["wt"] is not None:
            wt = p["wt"]
        elif h.frozen_readout is not None:
            wt = h.frozen_readout
        else:
            # variable projection: the final readout solved at its optimum
            wt = _ridge_readout(feats2, ys, h.lam)
        out = feats2 @ wt.T
        if p["zt"] is not None:
            zt = p["zt"] if rows is None else p["zt"][rows]
            out = out + zt
            comps["readout_slack"] += h.lam / config.rho * scale * float(np.sum(zt * zt))
        comps["readout_norm"] += h.lam * float(np.sum(wt * wt))
        cache.append({"states": states, "feats": feats_list, "feats2": feats2, "wt": wt})
        q = out
        if m != last and q.shape[1] != hypers[m + 1].dim:
            raise DimensionMismatch("group output does not match the next group input")
    comps["data_loss"] = scale * config.loss.value(q, ys)
    return comps, cache, q


def _objective_and_grad(theta, layout, x, y, hypers, config, rows=None):
    parts = layout.unpack(theta)
    comps, cache, out = _training_forward(parts, x, y, hypers, config, rows)
    total = float(sum(comps.values()))

    grad = np.zeros(layout.size)
    gparts = layout.unpack(grad)
    if rows is None:
        ys, scale = y, 1.0
    else:
        ys, scale = y[rows], len(x) / len(rows)

    g = scale * config.loss.grad(out, ys)
    for m in reversed(range(len(hypers))):
        h, p, gp, ca = hypers[m], parts[m], gparts[m], cache[m]
        if gp["zt"] is not None:
            coeff = 2.0 * h.lam / config.rho * scale
            if rows is None:
                gp["zt"][...] = g + coeff * p["zt"]
            else:
                gp["zt"][rows] = g + coeff * p["zt"][rows]
        if gp["wt"] is not None:
            gp["wt"][...] = g.T @ ca["feats2"] + 2.0 * h.lam * p["wt"]
        # for a solved readout, stationarity in wt kills the implicit
        # dependence, so backpropagating with wt held fixed is exact
        g = feature_input_vjp(h.readout_features, ca["states"][-1], g @ ca["wt"])
        if h.trains_flow:
            c = 0.5 * h.nu * h.layers
            for s in reversed(range(h.layers)):
                w = p["w"][s]
                gp["w"][s][...] = g.T @ ca["feats"][s] + 2.0 * c * w
                if gp["z"] is not None:
                    coeff = 2.0 * c / config.r * scale
                    if rows is None:
                        gp["z"][s][...] = g + coeff * p["z"][s]
                    else:
                        gp["z"][s][rows] = g + coeff * p["z"][s][rows]
                g = g + feature_input_vjp(h.flow_features, ca["states"][s], g @ w)
    return total, grad


def _components_vector(theta, layout, x, y, hypers, config):
    comps, _, _ = _training_forward(layout.unpack(theta), x, y, hypers, config, rows=None)
    return np.array([comps[name] for name in COMPONENT_NAMES])


def _build_model(theta, layout, x, y, hypers, config, objective, trace, comp_trace, converged):
    parts = layout.unpack(theta)
    blocks = []
    solved_readout = None
    if config.solve_readout and hypers[-1].trains_readout:
        _, cache, _ = _training_forward(parts, x, y, hypers, config, rows=None)
        solved_readout = cache[-1]["wt"]
    for m, h in enumerate(hypers):
        p = parts[m]
        if p["w"] is not None:
            weights = [w.copy() for w in p["w"]]
        else:
            weights = [np.zeros((h.dim, h.flow_features.feature_dim)) for _ in range(h.layers)]
        slacks = [z.copy() for z in p["z"]] if p["z"] is not None else []
        if p["wt"] is not None:
            readout = p["wt"].copy()
        elif h.frozen_readout is not None:
            readout = h.frozen_readout.copy()
        else:
            readout = solved_readout.copy()
        readout_slack = p["zt"].copy() if p["zt"] is not None else None
        blocks.append(
            Block(
                hyper=h,
                weights=weights,
                readout=readout,
                slacks=slacks,
                readout_slack=readout_slack,
            )
        )
    return ResNetModel(
        blocks=blocks,
        r=config.r,
        rho=config.rho,
        loss=config.loss,
        objective=float(objective),
        trace=np.asarray(trace, dtype=float),
        component_trace=np.array(comp_trace) if comp_trace is not None else None,
        converged=bool(converged),
    )


def _validate_targets(x, y, hypers, config):
    y = np.asarray(y, dtype=float)
    if config.loss.kind == "hinge":
        y = y.reshape(-1)
        if len(y) != len(x):
            raise DimensionMismatch("one label per training point required")
        if hypers[-1].readout_dim != config.loss.num_classes:
            raise DimensionMismatch("final readout_dim must equal the number of classes")
        return y
    if y.ndim == 1:
        y = y[:, None]
    if y.ndim != 2 or len(y) != len(x):
        raise DimensionMismatch(f"targets must be (N, d_out) with N={len(x)}")
    if y.shape[1] != hypers[-1].readout_dim:
        raise DimensionMismatch(
            f"targets must have {hypers[-1].readout_dim} columns, got {y.shape[1]}"
        )
    return y


def train_deep(x, y, hypers, config=TrainConfig(), seed=0):
    """Jointly train every group's weights, readouts, and slack variables.

    Full-batch backtracking gradient descent from zero initialization; with
    config.batch_size set, fixed-step SGD where each step touches only the
    slack rows of the sampled batch. The seed only drives batch sampling.
    """
    x = as_points(x, "X")
    hypers = _as_hyper_chain(hypers)
    if x.shape[1] != hypers[0].dim:
        raise DimensionMismatch(
            f"training points have dimension {x.shape[1]}, first group expects {hypers[0].dim}"
        )
    y = _validate_targets(x, y, hypers, config)
    if config.solve_readout:
        if not hypers[-1].trains_readout:
            raise ValueError("solve_readout needs a trainable final readout")
        if hypers[-1].lam <= 0:
            raise ValueError("solve_readout needs lam > 0 in the final group")

    # one frozen-identity group with exact propagation is plain ridge
    # regression on the readout features; solve it directly
    if (
        len(hypers) == 1
        and not hypers[0].trains_flow
        and hypers[0].trains_readout
        and config.r == 0
        and config.loss.kind == "squared"
        and config.batch_size is None
        and hypers[0].lam > 0
    ):
        h = hypers[0]
        feats2 = feature_apply(h.readout_features, x)
        wt = _ridge_readout(feats2, y, h.lam)
        resid = feats2 @ wt.T - y
        objective = h.lam * float(np.sum(wt * wt)) + float(np.sum(resid * resid))
        comps = np.array([0.0, 0.0, h.lam * float(np.sum(wt * wt)), 0.0,
                          float(np.sum(resid * resid))])
        weights = [np.zeros((h.dim, h.flow_features.feature_dim)) for _ in range(h.layers)]
        block = Block(hyper=h, weights=weights, readout=wt)
        return ResNetModel(
            blocks=[block],
            r=config.r,
            rho=config.rho,
            loss=config.loss,
            objective=objective,
            trace=np.array([objective]),
            component_trace=comps[None, :] if config.record_components else None,
            converged=True,
        )

    layout = _Layout(hypers, len(x), config)
    theta0 = np.zeros(layout.size)

    def fun(t):
        # runaway line-search probes overflow the flow or break the readout
        # solve; an infinite value makes the backtracking reject them
        try:
            with np.errstate(over="ignore", invalid="ignore"):
                return _objective_and_grad(t, layout, x, y, hypers, config)
        except (SingularSystem, NonFiniteInput):
            return np.inf, np.zeros(layout.size)

    history = []
    comp_trace = [] if config.record_components else None

    def record(t, value):
        history.append(value)
        if comp_trace is not None:
            comp_trace.append(_components_vector(t, layout, x, y, hypers, config))

    if config.batch_size is None:
        result = minimize_gd(
            fun,
            theta0,
            tol=config.tol,
            max_iter=config.max_iter,
            initial_step=config.initial_step,
            callback=record,
        )
        theta, objective, converged = result.x, result.value, result.converged
    else:
        theta, objective, converged = _train_sgd(
            fun, theta0, layout, x, y, hypers, config, seed, record
        )
    return _build_model(
        theta, layout, x, y, hypers, config, objective, history, comp_trace, converged
    )


def _train_sgd(fun_full, theta0, layout, x, y, hypers, config, seed, record):
    rng = np.random.default_rng(seed)
    theta = theta0.copy()
    n = len(x)
    b = min(config.batch_size, n)
    value, grad_full = fun_full(theta)
    record(theta, value)
    for _ in range(config.batch_steps):
        rows = np.sort(rng.choice(n, size=b, replace=False))
        try:
            _, grad = _objective_and_grad(theta, layout, x, y, hypers, config, rows=rows)
        except (SingularSystem, NonFiniteInput) as exc:
            raise Divergence("minibatch training diverged", iterate=theta) from exc
        theta -= config.batch_step_size * grad
        value, grad_full = fun_full(theta)
        if not np.isfinite(value):
            raise Divergence("minibatch training diverged", iterate=theta)
        record(theta, value)
    converged = bool(np.max(np.abs(grad_full)) < config.tol) if layout.size else True
    return theta, value, converged


def train_block(x, y, hyper, config=TrainConfig(), seed=0):
    """Train a single group (one ResNet block plus its readout)."""
    return train_deep(x, y, [hyper], config, seed)


@dataclass(frozen=True)
class EnergyProfile:
    """Per-layer energies 0.5 (||w^s||^2 + (1/r) ||z^s||^2) for each group."""

    energies: list[np.ndarray]
    fluctuations: np.ndarray


def energy_profile(model):
    """Layer energies and their max - min spread, one entry per group."""
    energies = []
    fluctuations = []
    for block in model.blocks:
        e = np.zeros(block.hyper.layers)
        for s, w in enumerate(block.weights):
            e[s] = 0.5 * float(np.sum(w * w))
            if model.r > 0 and block.slacks:
                e[s] += 0.5 / model.r * float(np.sum(block.slacks[s] ** 2))
        energies.append(e)
        fluctuations.append(float(np.max(e) - np.min(e)))
    return EnergyProfile(energies=energies, fluctuations=np.array(fluctuations))


def cosine_benchmark(n=100, sigma_z=0.2, seed=0):
    """Noisy samples of cos(20x) on a grid, plus an offset test grid.

    Training inputs are i/n for i = 1..n with uniform noise sigma_z U[-1/2, 1/2]
    on the targets; test points sit halfway between training points and carry
    exact targets.
    """
    rng = np.random.default_rng(seed)
    x = np.arange(1, n + 1, dtype=float)[:, None] / n
    y = np.cos(20.0 * x) + sigma_z * rng.uniform(-0.5, 0.5, size=(n, 1))
    x_test = x - 1.0 / (2 * n)
    y_test = np.cos(20.0 * x_test)
    return x, y, x_test, y_test


def mechanical_vs_ridge(
    lambdas,
    sigma_z=0.2,
    n=100,
    layers=3,
    flow_dim=200,
    readout_dim=800,
    seed=0,
    tol=1e-5,
    max_iter=400,
):
    """Test RMSE of ridge (nu = inf) vs mechanical (nu = 0) regression.

    Both arms share relu random features drawn once from the seed; the
    mechanical arm trains its flow by gradient descent with the final readout
    solved in closed form at each step.
    """
    x, y, x_test, y_test = cosine_benchmark(n=n, sigma_z=sigma_z, seed=seed)
    flow = random_features(1, flow_dim, ActivationSpec("relu"), seed=seed + 1)
    readout = random_features(1, readout_dim, ActivationSpec("relu"), seed=seed + 2)
    lambdas = np.asarray(lambdas, dtype=float)
    ridge_rmse = np.zeros(len(lambdas))
    mech_rmse = np.zeros(len(lambdas))
    ridge_models = []
    mech_models = []
    mech_config = TrainConfig(solve_readout=True, tol=tol, max_iter=max_iter)
    for i, lam in enumerate(lambdas):
        ridge_hyper = BlockHyper(
            flow_features=flow,
            readout_features=readout,
            readout_dim=1,
            layers=layers,
            nu=np.inf,
            lam=float(lam),
        )
        mech_hyper = BlockHyper(
            flow_features=flow,
            readout_features=readout,
            readout_dim=1,
            layers=layers,
            nu=0.0,
            lam=float(lam),
        )
        ridge_model = train_block(x, y, ridge_hyper)
        mech_model = train_block(x, y, mech_hyper, mech_config)
        ridge_rmse[i] = _rmse(ridge_model.predict(x_test), y_test)
        mech_rmse[i] = _rmse(mech_model.predict(x_test), y_test)
        ridge_models.append(ridge_model)
        mech_models.append(mech_model)
    return {
        "lambda": lambdas,
        "ridge_rmse": ridge_rmse,
        "mechanical_rmse": mech_rmse,
        "ridge_models": ridge_models,
        "mechanical_models": mech_models,
        "train": (x, y),
        "test": (x_test, y_test),
    }


def _rmse(pred, target):
    return float(np.sqrt(np.mean((pred - target) ** 2)))
