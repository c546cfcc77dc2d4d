"""Translation-rotation dynamics of rigid particles.

Every particle carries its own parameter set: an equivalent center velocity
and acceleration, plus a rotation vector and angular acceleration.  The
particle velocity is ``w_p x P + v_bar_c``.  Parameters are advanced in time
by a Taylor shift, and particle states by a midpoint (RK2) step.

Arrays broadcast over leading dimensions, so one call can advance a whole
set of particles.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Optional

import numpy as np

from .geometry import quat_normalize, quat_to_rotmat, rotmat_to_quat, rotvec_to_rotmat

ORDERS = (1, 2, 3)


def check_order(order: int) -> int:
    if order not in ORDERS:
        raise ValueError(f"integration order must be one of {ORDERS}, got {order!r}")
    return int(order)


@dataclass
class RigidParticle:
    """Position, orientation and render-only attributes of one or many particles."""

    x: np.ndarray
    r: np.ndarray
    s: np.ndarray = None
    color: np.ndarray = None
    opacity: np.ndarray = None

    def __post_init__(self):
        self.x = np.asarray(self.x, dtype=np.float64)
        self.r = np.asarray(self.r, dtype=np.float64)
        batch = self.x.shape[:-1]
        if self.s is None:
            self.s = np.full(batch + (3,), 0.01)
        if self.color is None:
            self.color = np.full(batch + (3,), 0.5)
        if self.opacity is None:
            self.opacity = np.full(batch, 1.0)
        self.s = np.asarray(self.s, dtype=np.float64)
        self.color = np.asarray(self.color, dtype=np.float64)
        self.opacity = np.asarray(self.opacity, dtype=np.float64)

    def __len__(self):
        return 1 if self.x.ndim == 1 else self.x.shape[0]

    def validate(self) -> None:
        if np.any(np.abs(np.linalg.norm(self.r, axis=-1) - 1.0) > 1e-9):
            raise ValueError("particle orientation must be a unit quaternion")
        if np.any(self.s <= 0):
            raise ValueError("particle scales must be positive")
        if np.any((self.opacity < 0) | (self.opacity > 1)):
            raise ValueError("particle opacity must lie in [0, 1]")

    def subset(self, idx) -> "RigidParticle":
        return RigidParticle(self.x[idx], self.r[idx], self.s[idx], self.color[idx], self.opacity[idx])


@dataclass
class RawCenterParams:
    """Rotation center position/velocity/acceleration and particle rotation.

    ``j_c`` and ``eps_dot_p`` are the optional third-order terms.
    """

    P_c: np.ndarray
    v_c: np.ndarray
    a_c: np.ndarray
    w_p: np.ndarray
    eps_p: np.ndarray
    j_c: Optional[np.ndarray] = None
    eps_dot_p: Optional[np.ndarray] = None


@dataclass
class DynamicsParams:
    """Equivalent parametrization of the per-particle dynamics.

    Vector layout: ``[v_bar_c, a_bar_c, w_p, eps_p]`` followed by
    ``[j_bar_c, eps_dot_p]`` when third-order terms are present.
    """

    v_bar_c: np.ndarray
    a_bar_c: np.ndarray
    w_p: np.ndarray
    eps_p: np.ndarray
    j_bar_c: Optional[np.ndarray] = None
    eps_dot_p: Optional[np.ndarray] = None

    def __post_init__(self):
        for name in ("v_bar_c", "a_bar_c", "w_p", "eps_p", "j_bar_c", "eps_dot_p"):
            val = getattr(self, name)
            if val is not None:
                setattr(self, name, np.asarray(val, dtype=np.float64))
        if (self.j_bar_c is None) != (self.eps_dot_p is None):
            raise ValueError("third-order terms must be given together")

    @property
    def has_third_order(self) -> bool:
        return self.j_bar_c is not None

    @property
    def size(self) -> int:
        return 18 if self.has_third_order else 12

    def to_vector(self) -> np.ndarray:
        parts = [self.v_bar_c, self.a_bar_c, self.w_p, self.eps_p]
        if self.has_third_order:
            parts += [self.j_bar_c, self.eps_dot_p]
        parts = np.broadcast_arrays(*parts)
        return np.concatenate(parts, axis=-1)

    @classmethod
    def from_vector(cls, vec: np.ndarray) -> "DynamicsParams":
        vec = np.asarray(vec, dtype=np.float64)
        if vec.shape[-1] not in (12, 18):
            raise ValueError(f"parameter vector must have 12 or 18 entries, got {vec.shape[-1]}")
        chunks = [vec[..., 3 * i:3 * i + 3] for i in range(vec.shape[-1] // 3)]
        return cls(*chunks)

    @classmethod
    def zeros(cls, batch=(), order: int = 2) -> "DynamicsParams":
        shape = (batch,) if isinstance(batch, int) else tuple(batch)
        return cls.from_vector(np.zeros(shape + (18 if order == 3 else 12,)))

    def subset(self, idx) -> "DynamicsParams":
        return DynamicsParams.from_vector(self.to_vector()[idx])

    def copy(self) -> "DynamicsParams":
        return DynamicsParams.from_vector(self.to_vector().copy())


def composite_velocity(P, raw: RawCenterParams) -> np.ndarray:
    """Velocity of point ``P`` rotating about a translating center."""
    return np.cross(raw.w_p, np.asarray(P) - raw.P_c) + raw.v_c


def to_equivalent(raw: RawCenterParams) -> DynamicsParams:
    """Fold the center position into equivalent center velocity/acceleration."""
    j = eps_dot = None
    if raw.j_c is not None:
        eps_dot = np.asarray(raw.eps_dot_p, dtype=np.float64)
        j = raw.j_c - np.cross(eps_dot, raw.P_c)
    return DynamicsParams(
        v_bar_c=raw.v_c - np.cross(raw.w_p, raw.P_c),
        a_bar_c=raw.a_c - np.cross(raw.eps_p, raw.P_c),
        w_p=np.array(raw.w_p, dtype=np.float64),
        eps_p=np.array(raw.eps_p, dtype=np.float64),
        j_bar_c=j,
        eps_dot_p=eps_dot,
    )


def velocity_from_equivalent(P, params: DynamicsParams) -> np.ndarray:
    return np.cross(params.w_p, np.asarray(P, dtype=np.float64)) + params.v_bar_c


# Parameter chains.  The translational terms (v, a, j) and the rotational
# terms (w, eps, eps_dot) obey the same Taylor shift; stacking each chain as
# (..., 3 derivatives, 3 components) lets one matrix act on both.

def taylor_matrix(tau, order: int) -> np.ndarray:
    """(..., 3, 3) shift acting on ``[value, d/dt, d2/dt2]`` over time ``tau``."""
    tau = np.asarray(tau, dtype=np.float64)
    T = np.zeros(tau.shape + (3, 3))
    T[..., 0, 0] = T[..., 1, 1] = T[..., 2, 2] = 1.0
    if order >= 2:
        T[..., 0, 1] = tau
    if order == 3:
        T[..., 0, 2] = 0.5 * tau * tau
        T[..., 1, 2] = tau
    return T


def vector_to_chains(vec: np.ndarray) -> np.ndarray:
    """(..., 12|18) parameter vector -> (..., 2, 3, 3) chains [trans, rot]."""
    vec = np.asarray(vec, dtype=np.float64)
    chains = np.zeros(vec.shape[:-1] + (2, 3, 3))
    chains[..., 0, 0, :] = vec[..., 0:3]
    chains[..., 0, 1, :] = vec[..., 3:6]
    chains[..., 1, 0, :] = vec[..., 6:9]
    chains[..., 1, 1, :] = vec[..., 9:12]
    if vec.shape[-1] == 18:
        chains[..., 0, 2, :] = vec[..., 12:15]
        chains[..., 1, 2, :] = vec[..., 15:18]
    return chains


def chains_to_vector(chains: np.ndarray, size: int) -> np.ndarray:
    parts = [chains[..., 0, 0, :], chains[..., 0, 1, :], chains[..., 1, 0, :], chains[..., 1, 1, :]]
    if size == 18:
        parts += [chains[..., 0, 2, :], chains[..., 1, 2, :]]
    return np.concatenate(parts, axis=-1)


def shift_chains(chains: np.ndarray, tau, order: int) -> np.ndarray:
    """Apply ``taylor_matrix(tau, order)`` to every chain."""
    if order == 1:
        return chains.copy()
    tau = np.asarray(tau, dtype=np.float64)[..., None, None]
    out = chains.copy()
    out[..., 0, :] += tau * chains[..., 1, :]
    if order == 3:
        out[..., 0, :] += 0.5 * tau * tau * chains[..., 2, :]
        out[..., 1, :] += tau * chains[..., 2, :]
    return out


def shift_chains_transpose(grad: np.ndarray, tau, order: int) -> np.ndarray:
    """Adjoint of :func:`shift_chains`."""
    if order == 1:
        return grad.copy()
    tau = np.asarray(tau, dtype=np.float64)[..., None, None]
    out = grad.copy()
    out[..., 1, :] += tau * grad[..., 0, :]
    if order == 3:
        out[..., 2, :] += tau * grad[..., 1, :] + 0.5 * tau * tau * grad[..., 0, :]
    return out


def _require_order(params: DynamicsParams, order: int) -> None:
    check_order(order)
    if order == 3 and not params.has_third_order:
        raise ValueError("order 3 requires j_bar_c and eps_dot_p")


def propagate_params(params: DynamicsParams, dt, order: int) -> DynamicsParams:
    """Advance the parameter state by ``dt`` along its own derivatives."""
    _require_order(params, order)
    vec = params.to_vector()
    out = chains_to_vector(shift_chains(vector_to_chains(vec), dt, order), vec.shape[-1])
    return DynamicsParams.from_vector(out)


def midpoint_values(params: DynamicsParams, dt, order: int):
    """Center velocity and rotation vector evaluated half a step ahead."""
    _require_order(params, order)
    chains = vector_to_chains(params.to_vector())
    mid = shift_chains(chains, 0.5 * np.asarray(dt), order)
    return mid[..., 0, 0, :], mid[..., 1, 0, :]


def rk2_step(particle: RigidParticle, params: DynamicsParams, dt: float, order: int = 2,
             scheme: str = "midpoint") -> RigidParticle:
    """Advance particles by one RK2 step of length ``dt``.

    ``scheme="midpoint"`` evaluates the rotational displacement at the
    half-step position (second-order accurate on curved paths).
    ``scheme="start"`` evaluates it at the initial position, as the
    one-line update in the original algorithm listing reads.
    """
    v_mid, w_mid = midpoint_values(params, dt, order)
    x = particle.x
    if scheme == "midpoint":
        x_half = x + 0.5 * dt * (params.v_bar_c + np.cross(params.w_p, x))
    elif scheme == "start":
        x_half = x
    else:
        raise ValueError(f"unknown position scheme {scheme!r}")
    x_new = x + dt * (v_mid + np.cross(w_mid, x_half))

    dR = rotvec_to_rotmat(dt * w_mid)
    R = quat_to_rotmat(particle.r, normalize=True)
    r_new = quat_normalize(rotmat_to_quat(dR @ R))
    return RigidParticle(x_new, r_new, particle.s, particle.color, particle.opacity)


def rollout(particle: RigidParticle, source, t0: float, n_steps: int, dt: float,
            mode: str = "derive", order: int = 2, ids=None, scheme: str = "midpoint"):
    """Roll particles forward ``n_steps`` times; returns ``n_steps + 1`` states.

    ``source`` is either fixed :class:`DynamicsParams` or a field exposing
    ``query(positions, t, ids)``.  In ``derive`` mode the field is read once
    at ``t0`` and parameters are propagated by their derivatives; in
    ``requery`` mode the field is read at the current state before each step.
    """
    if n_steps < 0:
        raise ValueError("n_steps must be >= 0")
    if mode not in ("derive", "requery"):
        raise ValueError(f"unknown rollout mode {mode!r}")
    check_order(order)

    def read(p: RigidParticle, t: float) -> DynamicsParams:
        if isinstance(source, DynamicsParams):
            return source
        return source.query(p.x, t, ids=ids)

    states = [particle]
    current = particle
    params = read(current, t0)
    for k in range(n_steps):
        t = t0 + k * dt
        if mode == "requery" and k > 0:
            params = read(current, t)
        current = rk2_step(current, params, dt, order, scheme)
        if mode == "derive":
            params = propagate_params(params, dt, order)
        states.append(current)
    return states
