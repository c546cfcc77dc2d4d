"""Fit a dynamics field to observed trajectories.

Training follows the pair scheme: for an observed state at ``t'`` the field
is queried, the state is advanced to ``t = t' + dt`` with the RK2 step, and
the prediction is compared with the observation at ``t``.  The loss is
``lambda_pos * |x_hat - x|^2 + lambda_rot * angle(R_hat, R)^2``, averaged
over the batch.  Gradients are propagated by hand through the rollout, the
rotation exponential and the field.
"""

from __future__ import annotations

import logging
import math
import time
from dataclasses import asdict, dataclass, field
from typing import Optional

import numpy as np

from .dynamics import chains_to_vector, check_order, shift_chains, shift_chains_transpose, vector_to_chains
from .errors import ConfigError, DataError, NumericalError, TrdynError
from .field import equivalent_to_raw, n_outputs
from .geometry import quat_mul, quat_to_rotmat, quat_to_rotvec, rotvec_to_rotmat

log = logging.getLogger(__name__)


@dataclass
class FitConfig:
    dt_multiple: int = 2
    order: int = 2
    learning_rate: Optional[float] = None
    beta1: float = 0.9
    beta2: float = 0.999
    epsilon: float = 1e-8
    iterations: int = 2000
    batch_size: int = 8192
    lambda_pos: float = 1.0
    lambda_rot: float = 0.1
    rollout_mode: str = "derive"
    parametrization: str = "equivalent"
    supervision: str = "pairs"
    position_scheme: str = "midpoint"
    seed: int = 0
    t_min: Optional[float] = None
    precondition: bool = True
    history_points: int = 200

    def __post_init__(self):
        if int(self.dt_multiple) < 1:
            raise ConfigError("dt_multiple must be >= 1")
        try:
            check_order(self.order)
        except ValueError as exc:
            raise ConfigError(str(exc)) from None
        if self.lambda_pos < 0 or self.lambda_rot < 0 or self.lambda_pos + self.lambda_rot <= 0:
            raise ConfigError("loss weights must be >= 0 with a positive sum")
        if self.rollout_mode not in ("derive", "requery"):
            raise ConfigError(f"unknown rollout_mode {self.rollout_mode!r}")
        if self.parametrization not in ("equivalent", "raw"):
            raise ConfigError(f"unknown parametrization {self.parametrization!r}")
        if self.supervision not in ("pairs", "from_origin"):
            raise ConfigError(f"unknown supervision {self.supervision!r}")
        if self.position_scheme not in ("midpoint", "start"):
            raise ConfigError(f"unknown position_scheme {self.position_scheme!r}")
        if int(self.iterations) < 0 or int(self.batch_size) < 1:
            raise ConfigError("iterations must be >= 0 and batch_size >= 1")

    def lr_for(self, field) -> float:
        if self.learning_rate is not None:
            return float(self.learning_rate)
        return 1e-2 if getattr(field, "kind", "") == "table" else 1e-3


# -- Adam -------------------------------------------------------------------------

@dataclass
class AdamState:
    m: dict = field(default_factory=dict)
    v: dict = field(default_factory=dict)
    step: int = 0


def adam_step(state: AdamState, weights: dict, grads: dict, lr: float = 1e-3, beta1: float = 0.9,
              beta2: float = 0.999, epsilon: float = 1e-8):
    """One bias-corrected Adam update, applied to ``weights`` in place."""
    for k, g in grads.items():
        if not np.all(np.isfinite(g)):
            raise NumericalError(f"non-finite gradient for {k!r} at Adam step {state.step + 1}")
        if g.shape != weights[k].shape:
            raise ValueError(f"gradient shape {g.shape} != weight shape {weights[k].shape} for {k!r}")
    state.step += 1
    bc1 = 1.0 - beta1 ** state.step
    bc2 = 1.0 - beta2 ** state.step
    for k, g in grads.items():
        if k not in state.m:
            state.m[k] = np.zeros_like(weights[k])
            state.v[k] = np.zeros_like(weights[k])
        m, v = state.m[k], state.v[k]
        m *= beta1
        m += (1.0 - beta1) * g
        v *= beta2
        v += (1.0 - beta2) * (g * g)
        weights[k] -= lr * (m / bc1) / (np.sqrt(v / bc2) + epsilon)
    return weights, state


# -- rotation exponential: trace gradient -----------------------------------------

def _exp_coeffs(theta):
    """a = sin/θ, b = (1-cos)/θ², and their θ-derivatives divided by θ."""
    th2 = theta * theta
    small = theta < 0.05
    t = np.where(small, 0.1, theta)
    s, c = np.sin(t), np.cos(t)
    a = np.where(small, 1 - th2 / 6 + th2 ** 2 / 120 - th2 ** 3 / 5040, s / t)
    b = np.where(small, 0.5 - th2 / 24 + th2 ** 2 / 720 - th2 ** 3 / 40320, (1 - c) / t ** 2)
    da = np.where(small, -1 / 3 + th2 / 30 - th2 ** 2 / 840 + th2 ** 3 / 45360, (t * c - s) / t ** 3)
    db = np.where(small, -1 / 12 + th2 / 180 - th2 ** 2 / 6720 + th2 ** 3 / 453600,
                  (t * s - 2 * (1 - c)) / t ** 4)
    return a, b, da, db


def trace_exp_grad(phi: np.ndarray, M: np.ndarray) -> np.ndarray:
    """Gradient wrt ``phi`` of ``trace(exp([phi]x) @ M)``, batched."""
    theta = np.linalg.norm(phi, axis=-1)
    a, b, da, db = _exp_coeffs(theta)
    g = np.stack([M[..., 1, 2] - M[..., 2, 1], M[..., 2, 0] - M[..., 0, 2], M[..., 0, 1] - M[..., 1, 0]], -1)
    trM = np.trace(M, axis1=-2, axis2=-1)
    Ms = M + np.swapaxes(M, -1, -2)
    Mphi = (Ms @ phi[..., None])[..., 0]
    q = 0.5 * np.sum(phi * Mphi, axis=-1) - theta ** 2 * trM
    pg = np.sum(phi * g, axis=-1)
    return ((da * pg + db * q)[..., None] * phi + a[..., None] * g
            + b[..., None] * (Mphi - 2.0 * trM[..., None] * phi))


# -- differentiable rollout ---------------------------------------------------------

@dataclass
class PairSample:
    """Batch of supervision samples: advance ``n_steps`` steps of ``dt`` from ``t0``."""

    ids: np.ndarray
    t0: np.ndarray
    x0: np.ndarray
    R0: np.ndarray
    x1: np.ndarray
    R1: Optional[np.ndarray]
    n_steps: int
    dt: float


def rollout_loss(field, sample: PairSample, cfg: FitConfig, want_grad: bool = True):
    """Mean loss over the batch and (optionally) gradients for every field weight."""
    order = cfg.order
    dt, n = sample.dt, sample.n_steps
    N = len(sample.ids)
    if cfg.lambda_rot > 0 and sample.R1 is None:
        raise DataError("rotation loss weight > 0 but the dataset has no orientations")
    h = 0.5 * dt
    midpoint = cfg.position_scheme == "midpoint"

    xs = [sample.x0]
    Rs = [sample.R0]
    chains, dRs, phis, xhalfs, caches = [], [], [], [], []
    ch = None
    for k in range(n):
        t = sample.t0 + k * dt
        if k == 0 or cfg.rollout_mode == "requery":
            vec, cache = field.forward(xs[-1], t, sample.ids)
            ch = vector_to_chains(vec)
            caches.append(cache)
        else:
            ch = shift_chains(ch, dt, order)
            caches.append(None)
        chains.append(ch)
        x = xs[-1]
        v0, w0 = ch[:, 0, 0], ch[:, 1, 0]
        mid = shift_chains(ch, h, order)
        v_mid, w_mid = mid[:, 0, 0], mid[:, 1, 0]
        x_half = x + h * (v0 + np.cross(w0, x)) if midpoint else x
        xhalfs.append(x_half)
        xs.append(x + dt * (v_mid + np.cross(w_mid, x_half)))
        phi = dt * w_mid
        phis.append(phi)
        dR = rotvec_to_rotmat(phi)
        dRs.append(dR)
        Rs.append(dR @ Rs[-1])

    diff = xs[-1] - sample.x1
    per = cfg.lambda_pos * np.sum(diff * diff, axis=1)
    dL_dc = None
    if cfg.lambda_rot > 0:
        G = np.swapaxes(sample.R1, -1, -2)
        M = Rs[-1] @ G
        c = 0.5 * (np.trace(M, axis1=-2, axis2=-1) - 1.0)
        s = 0.5 * np.linalg.norm(np.stack([M[:, 2, 1] - M[:, 1, 2], M[:, 0, 2] - M[:, 2, 0],
                                           M[:, 1, 0] - M[:, 0, 1]], -1), axis=-1)
        ang = np.arctan2(s, c)
        per = per + cfg.lambda_rot * ang ** 2
        ratio = np.where(ang < 1e-6, 1.0 + ang ** 2 / 6.0, ang / np.maximum(np.sin(ang), 1e-12))
        dL_dc = -2.0 * cfg.lambda_rot * ratio / N
    loss = float(per.mean())
    if not want_grad:
        return loss, None, per

    grads = field.zero_grads()
    g_x = 2.0 * cfg.lambda_pos * diff / N
    S = np.broadcast_to(np.eye(3), (N, 3, 3)).copy()
    carry = None
    for k in reversed(range(n)):
        x, x_half, ch = xs[k], xhalfs[k], chains[k]
        w0 = ch[:, 1, 0]
        w_mid = shift_chains(ch, h, order)[:, 1, 0]
        g_vmid = dt * g_x
        g_wmid = dt * np.cross(x_half, g_x)
        g_xhalf = dt * np.cross(g_x, w_mid)
        g_xk = g_x.copy()
        g_v0 = np.zeros_like(g_x)
        g_w0 = np.zeros_like(g_x)
        if midpoint:
            g_xk += g_xhalf + h * np.cross(g_xhalf, w0)
            g_v0 = h * g_xhalf
            g_w0 = h * np.cross(x, g_xhalf)
        else:
            g_xk += g_xhalf
        if dL_dc is not None:
            Mk = Rs[k] @ G @ S
            g_wmid = g_wmid + (0.5 * dL_dc)[:, None] * dt * trace_exp_grad(phis[k], Mk)
            S = S @ dRs[k]
        g_mid = np.zeros_like(ch)
        g_mid[:, 0, 0] = g_vmid
        g_mid[:, 1, 0] = g_wmid
        g_ch = shift_chains_transpose(g_mid, h, order)
        g_ch[:, 0, 0] += g_v0
        g_ch[:, 1, 0] += g_w0
        if carry is not None:
            g_ch += shift_chains_transpose(carry, dt, order)
        if caches[k] is not None:
            gw, gpos = field.backward(caches[k], chains_to_vector(g_ch, field.n_params))
            for key, val in gw.items():
                grads[key] += val
            g_xk = g_xk + gpos
            carry = None
        else:
            carry = g_ch
        g_x = g_xk
    return loss, grads, per


def pair_loss(sample: PairSample, field, cfg: FitConfig):
    """``(loss, grads)`` for one batch of samples."""
    loss, grads, _ = rollout_loss(field, sample, cfg, want_grad=True)
    return loss, grads


# -- sampling -------------------------------------------------------------------

class WhitenedTable:
    """Per-particle linear change of variables for table fits.

    For every particle the pair residuals are linearized around the
    observed states: over a pair of length ``D`` whose midpoint lies ``tau``
    after the anchor, the position residual moves by
    ``D * (v + tau a + (w + tau eps) x x)`` and the rotation residual by
    ``D * sqrt(lambda_rot) * (w + tau eps)``.  With the Gauss-Newton matrix
    ``H = L L^T`` of these Jacobians, Adam runs on ``z = L^T theta``, where
    the loss is close to isotropic.  The map is linear and invertible, so the
    optimum is unchanged.  Entries no pair constrains (acceleration terms
    at order 1) keep unit scale.
    """

    def __init__(self, table, ds, pid, start, steps, cfg):
        order = table.order
        P = table.n_params
        N = table.n_particles
        D = steps * cfg.dt_multiple * ds.frame_dt
        tau = ds.times[start] + 0.5 * D - table.anchor_time
        x = ds.positions[start, pid]
        M = len(pid)
        coef = [np.ones(M), tau, 0.5 * tau * tau][:order]
        # parameter index of [trans|rot][derivative]
        slots = {(0, 0): 0, (0, 1): 3, (1, 0): 6, (1, 1): 9, (0, 2): 12, (1, 2): 15}
        K = -np.einsum("ijk,mj->mik", _LEVI_CIVITA, x)  # (M, 3, 3) with K @ w == w x x
        J = np.zeros((M, 6, P))
        eye = np.eye(3)
        rot_w = math.sqrt(cfg.lambda_rot) if (cfg.lambda_rot > 0 and ds.has_orientations) else 0.0
        pos_w = math.sqrt(cfg.lambda_pos)
        for d, c in enumerate(coef):
            s_t, s_r = slots[(0, d)], slots[(1, d)]
            J[:, :3, s_t:s_t + 3] = pos_w * (D * c)[:, None, None] * eye
            J[:, :3, s_r:s_r + 3] = pos_w * (D * c)[:, None, None] * K
            J[:, 3:, s_r:s_r + 3] = rot_w * (D * c)[:, None, None] * eye
        H = np.zeros((N, P, P))
        np.add.at(H, pid, np.einsum("mri,mrj->mij", J, J))
        diag = np.einsum("nii->ni", H)
        used = diag > 0
        scale = np.where(used.any(axis=1), diag.sum(axis=1) / np.maximum(used.sum(axis=1), 1), 1.0)
        H = H / scale[:, None, None]
        idx = np.arange(P)
        H[:, idx, idx] += np.where(used, 1e-9, 1.0)
        L = np.linalg.cholesky(H)
        self.L = L
        self.Linv = np.linalg.inv(L)

    def to_values(self, z):
        # theta = L^{-T} z
        return np.einsum("nji,nj->ni", self.Linv, z)

    def to_z(self, values):
        return np.einsum("nji,nj->ni", self.L, values)

    def grad_z(self, g_values):
        # dL/dz = L^{-1} dL/dtheta
        return np.einsum("nij,nj->ni", self.Linv, g_values)


_LEVI_CIVITA = np.zeros((3, 3, 3))
_LEVI_CIVITA[0, 1, 2] = _LEVI_CIVITA[1, 2, 0] = _LEVI_CIVITA[2, 0, 1] = 1.0
_LEVI_CIVITA[0, 2, 1] = _LEVI_CIVITA[2, 1, 0] = _LEVI_CIVITA[1, 0, 2] = -1.0


def _orient_mats(ds, frames, ids):
    if ds.orientations is None:
        return None
    mats = getattr(ds, "_rotmat_cache", None)
    if mats is None:
        mats = quat_to_rotmat(ds.orientations, normalize=True)
        ds._rotmat_cache = mats
    return mats[frames, ids]


def candidate_samples(ds, cfg: FitConfig, n_train: Optional[int] = None):
    """All valid ``(particle, start_frame, n_steps)`` triples for the training frames."""
    if ds.n_frames < 2:
        raise DataError("fitting needs at least 2 frames")
    n_train = ds.split if n_train is None else n_train
    m = int(cfg.dt_multiple)
    first = 0
    if cfg.t_min is not None:
        first = int(np.searchsorted(ds.times, cfg.t_min - 1e-9))
    if cfg.supervision == "pairs":
        starts = np.arange(first, n_train - m)
        steps = np.ones_like(starts)
    else:
        targets = np.arange(first + m, n_train, m)
        starts = np.full_like(targets, first)
        steps = (targets - first) // m
    if starts.size == 0:
        raise DataError(f"no training pairs: {n_train} training frames with dt_multiple={m}")
    P = ds.n_particles
    pid = np.repeat(np.arange(P), len(starts))
    st = np.tile(starts, P)
    ns = np.tile(steps, P)
    return pid, st, ns


def make_samples(ds, pid, start, n_steps, dt_multiple):
    """Group selected triples by step count into :class:`PairSample` batches."""
    out = []
    dt = ds.frame_dt * dt_multiple
    for n in np.unique(n_steps):
        sel = n_steps == n
        p, s = pid[sel], start[sel]
        tgt = s + n * dt_multiple
        out.append(PairSample(
            ids=p, t0=ds.times[s], x0=ds.positions[s, p], R0=_orient_mats(ds, s, p)
            if ds.orientations is not None else np.broadcast_to(np.eye(3), (len(p), 3, 3)).copy(),
            x1=ds.positions[tgt, p], R1=_orient_mats(ds, tgt, p), n_steps=int(n), dt=dt))
    return out


def _downsample(history, k):
    if len(history) <= k:
        return list(history)
    idx = np.unique(np.linspace(0, len(history) - 1, k).round().astype(int))
    return [history[i] for i in idx]


@dataclass
class FitResult:
    field: object
    loss_history: list
    wall_clock: float
    config: FitConfig

    def report(self) -> dict:
        return {"config": asdict(self.config), "loss_history": _downsample(self.loss_history,
                                                                          self.config.history_points),
                "final_loss": self.loss_history[-1] if self.loss_history else None,
                "iterations": len(self.loss_history), "wall_clock_s": self.wall_clock}


def fit(ds, field, cfg: FitConfig, n_train: Optional[int] = None, state: Optional[AdamState] = None) -> FitResult:
    """Adam on batched pair losses; ``field`` is updated in place."""
    if field.order != cfg.order:
        raise ConfigError(f"field order {field.order} != config order {cfg.order}")
    if field.parametrization != cfg.parametrization:
        raise ConfigError("field parametrization does not match config")
    if cfg.lambda_rot > 0 and not ds.has_orientations:
        raise DataError("lambda_rot > 0 requires orientations in the dataset")
    t_start = time.perf_counter()
    rng = np.random.default_rng(cfg.seed)
    pid, start, steps = candidate_samples(ds, cfg, n_train)
    total = len(pid)
    bs = min(int(cfg.batch_size), total)
    lr = cfg.lr_for(field)
    state = state or AdamState()
    cond = None
    if getattr(field, "kind", "") == "table" and field.parametrization == "equivalent" and cfg.precondition:
        cond = WhitenedTable(field, ds, pid, start, steps, cfg)
        opt_weights = {"values": cond.to_z(field.values)}
    else:
        opt_weights = field.weights
    history = []
    perm = rng.permutation(total)
    cursor = 0
    for it in range(int(cfg.iterations)):
        if cursor + bs > total:
            perm = rng.permutation(total)
            cursor = 0
        sel = np.sort(perm[cursor:cursor + bs])
        cursor += bs
        loss = 0.0
        grads = field.zero_grads()
        for sample in make_samples(ds, pid[sel], start[sel], steps[sel], cfg.dt_multiple):
            try:
                l, g, _ = rollout_loss(field, sample, cfg)
            except TrdynError:
                raise
            except ValueError as exc:
                raise NumericalError(f"loss evaluation failed at iteration {it}: {exc}") from exc
            w = len(sample.ids) / bs
            loss += w * l
            for key in grads:
                grads[key] += w * g[key]
        if not math.isfinite(loss):
            raise NumericalError(f"loss diverged (non-finite) at iteration {it}")
        history.append(loss)
        if cond is not None:
            grads = {"values": cond.grad_z(grads["values"])}
        adam_step(state, opt_weights, grads, lr, cfg.beta1, cfg.beta2, cfg.epsilon)
        if cond is not None:
            field.weights["values"] = cond.to_values(opt_weights["values"])
        if not all(np.all(np.isfinite(w)) for w in field.weights.values()):
            raise NumericalError(f"field weights diverged (non-finite) at iteration {it}")
    wall = time.perf_counter() - t_start
    if history:
        log.info("fit: %d iterations, final loss %.3e, %.2fs", len(history), history[-1], wall)
    return FitResult(field, history, wall, cfg)


def difference_init(ds, table, n_train: Optional[int] = None, window: int = 7) -> None:
    """Seed table rows from a local quadratic fit of the newest training frames.

    Position and rotation (as a rotation vector relative to the newest
    frame ``f``) are fitted by least squares with quadratics in time over
    the last ``window`` training frames.  The derivatives at ``f`` become
    the rows whose motion matches them at that particle's position; higher
    derivatives start at zero.  Only frames below ``n_train`` are read.
    """
    n_train = ds.split if n_train is None else int(n_train)
    if n_train < 3:
        return
    f = n_train - 1
    frames = np.arange(max(0, n_train - int(window)), n_train)
    tau = ds.times[frames] - ds.times[f]
    # columns: 1, tau, tau^2 / 2
    A = np.stack([np.ones_like(tau), tau, 0.5 * tau * tau], axis=1)
    pinv = np.linalg.pinv(A)
    coef = np.einsum("kf,fnd->knd", pinv, ds.positions[frames])
    x_0, vel, acc = coef
    w = np.zeros_like(vel)
    eps = np.zeros_like(vel)
    if ds.has_orientations:
        conj = ds.orientations[f] * np.array([1.0, -1.0, -1.0, -1.0])
        phis = quat_to_rotvec(quat_mul(ds.orientations[frames], conj[None]))
        rc = np.einsum("kf,fnd->knd", pinv, phis)
        w, eps = rc[1], rc[2]
    # particle velocity u = v_bar + w x c; its derivative adds eps x c + w x u
    ch = np.zeros((ds.n_particles, 2, 3, 3))
    ch[:, 0, 0] = vel - np.cross(w, x_0)
    ch[:, 0, 1] = acc - np.cross(w, vel) - np.cross(eps, x_0)
    ch[:, 1, 0] = w
    ch[:, 1, 1] = eps
    if table.order == 1:
        ch[:, :, 1:] = 0.0
    ch = shift_chains(ch, table.anchor_time - float(ds.times[f]), table.order)
    if table.order < 3:
        ch[:, :, 2] = 0.0
    if table.order == 1:
        ch[:, :, 1] = 0.0
    vec = chains_to_vector(ch, n_outputs(table.order, "equivalent"))
    if table.parametrization == "raw":
        vec = equivalent_to_raw(vec, x_0, table.order)
    table.values[...] = vec


def new_field(ds, cfg: FitConfig, backend: str = "table", anchor_time: Optional[float] = None,
              init: str = "difference", **mlp_kwargs):
    """Fresh field for ``ds``; tables are anchored at the last training time by default."""
    from .field import MlpField, ParamTable

    if backend == "table":
        if anchor_time is None:
            anchor_time = float(ds.times[ds.split - 1])
        table = ParamTable(ds.n_particles, cfg.order, cfg.parametrization, anchor_time)
        if init == "difference":
            difference_init(ds, table)
        elif init != "zeros":
            raise ConfigError(f"unknown table init {init!r}")
        return table
    if backend == "mlp":
        return MlpField(order=cfg.order, parametrization=cfg.parametrization, seed=cfg.seed, **mlp_kwargs)
    raise ConfigError(f"unknown field backend {backend!r}")


# -- extrapolation and continual learning ------------------------------------------

def predict(ds, field, start_frame: int, n_steps: int, dt_multiple: int = 1, mode: str = "derive",
            order: Optional[int] = None, scheme: str = "midpoint"):
    """Roll every particle out from an observed frame; returns positions and quaternions."""
    from .dynamics import rollout

    order = field.order if order is None else order
    states = rollout(ds.frame(start_frame), field, float(ds.times[start_frame]), n_steps,
                     ds.frame_dt * dt_multiple, mode=mode, order=order,
                     ids=np.arange(ds.n_particles), scheme=scheme)
    pos = np.stack([s.x for s in states])
    quat = np.stack([s.r for s in states])
    return pos, quat


def extrapolation_errors(ds, pos, quat, start_frame: int, dt_multiple: int = 1):
    """Per-horizon position RMSE and mean rotation error against the ground truth."""
    from .geometry import quat_angle

    rows = []
    for k in range(1, len(pos)):
        f = start_frame + k * dt_multiple
        if f >= ds.n_frames:
            break
        err = pos[k] - ds.positions[f]
        rmse = float(np.sqrt(np.mean(np.sum(err * err, axis=1))))
        rot = float(np.mean(quat_angle(quat[k], ds.orientations[f]))) if ds.has_orientations else None
        rows.append({"horizon": k, "time": float(ds.times[f]), "rmse": rmse, "rot_err": rot})
    return rows


def continual_fit(ds, field, windows, cfg: FitConfig, history: Optional[float] = None,
                  mode: str = "derive", init: str = "difference"):
    """Fit on growing prefixes and extrapolate one window ahead after each.

    ``windows`` are the prefix end times.  ``history`` limits each fit to the
    trailing ``history`` time units (``None`` uses the whole prefix).  Later
    windows warm-start from the previous field; tables are re-anchored to
    the newest observed frame.  With ``init="difference"`` a table is
    seeded before every window from differences of that window's frames.
    """
    if init not in ("difference", "zeros", "previous"):
        raise ConfigError(f"unknown continual init {init!r}")
    windows = list(windows)
    if any(b <= a for a, b in zip(windows, windows[1:])):
        raise ConfigError("continual windows must increase")
    rows = []
    state = None
    for i, end in enumerate(windows):
        n_obs = int(np.searchsorted(ds.times, end + 1e-9))
        if n_obs < 2:
            raise DataError(f"window ending at {end} holds fewer than 2 frames")
        last = n_obs - 1
        if getattr(field, "kind", "") == "table":
            field.reanchor(float(ds.times[last]))
            if init == "difference" or (init == "previous" and i == 0):
                difference_init(ds, field, n_obs)
            state = None
        wcfg = FitConfig(**{**asdict(cfg), "t_min": None if history is None else max(0.0, end - history)})
        res = fit(ds, field, wcfg, n_train=n_obs, state=state)
        if getattr(field, "kind", "") != "table":
            state = None
        nxt = windows[i + 1] if i + 1 < len(windows) else end + (end - (windows[i - 1] if i else 0.0))
        n_ahead = int(np.searchsorted(ds.times, nxt + 1e-9)) - 1 - last
        n_ahead = max(0, min(n_ahead, ds.n_frames - 1 - last))
        pos, quat = predict(ds, field, last, n_ahead, 1, mode, scheme=cfg.position_scheme)
        errs = extrapolation_errors(ds, pos, quat, last)
        rmse_all = float(np.sqrt(np.mean([e["rmse"] ** 2 for e in errs]))) if errs else 0.0
        rows.append({"window_end": float(end), "extrapolate_until": float(ds.times[last + n_ahead]),
                     "n_ahead": n_ahead, "rmse": rmse_all,
                     "final_rmse": errs[-1]["rmse"] if errs else 0.0,
                     "final_loss": res.loss_history[-1] if res.loss_history else None,
                     "field": field.copy()})
    return rows
