"""Dynamics fields: map (particle position, time) to dynamics parameters.

Two backends share one interface:

* :class:`ParamTable` stores one parameter row per particle id.  Rows hold
  the parameters at ``anchor_time``; a query at time ``t`` returns them
  Taylor-shifted by ``t - anchor_time``.
* :class:`MlpField` is a ReLU MLP on positionally encoded inputs.

Both expose ``forward`` (returns the equivalent parameter vector and a
cache) and ``backward`` (exact reverse-mode gradients for every weight and
for the input positions).  A field either predicts the equivalent
parameters directly or the raw center parameters, which are folded into the
equivalent form on output.
"""

from __future__ import annotations

import csv
import json
from pathlib import Path

import numpy as np

from .dynamics import (
    DynamicsParams,
    chains_to_vector,
    check_order,
    shift_chains,
    shift_chains_transpose,
    vector_to_chains,
)
from .errors import DataError

PARAMETRIZATIONS = ("equivalent", "raw")


def n_outputs(order: int, parametrization: str = "equivalent") -> int:
    n = 18 if order == 3 else 12
    return n + 3 if parametrization == "raw" else n


def positional_encoding(v: np.ndarray, L: int, include_input: bool = True) -> np.ndarray:
    """``[v, sin(2^k pi v), cos(2^k pi v)]`` for ``k < L``, k-major."""
    v = np.asarray(v, dtype=np.float64)
    if L < 0:
        raise ValueError("encoding degree must be >= 0")
    feats = [v] if include_input else []
    for k in range(L):
        arg = (2.0 ** k) * np.pi * v
        feats.append(np.sin(arg))
        feats.append(np.cos(arg))
    if not feats:
        return np.zeros(v.shape[:-1] + (0,))
    return np.concatenate(feats, axis=-1)


def positional_encoding_backward(v: np.ndarray, grad: np.ndarray, L: int,
                                 include_input: bool = True) -> np.ndarray:
    v = np.asarray(v, dtype=np.float64)
    d = v.shape[-1]
    out = np.zeros_like(v)
    col = 0
    if include_input:
        out += grad[..., :d]
        col = d
    for k in range(L):
        f = (2.0 ** k) * np.pi
        arg = f * v
        out += grad[..., col:col + d] * f * np.cos(arg)
        out -= grad[..., col + d:col + 2 * d] * f * np.sin(arg)
        col += 2 * d
    return out


def raw_to_equivalent(raw: np.ndarray) -> np.ndarray:
    """Raw output ``[P_c, v_c, a_c, w, eps, (j_c, eps_dot)]`` -> equivalent vector."""
    P = raw[..., 0:3]
    w, eps = raw[..., 9:12], raw[..., 12:15]
    out = [raw[..., 3:6] - np.cross(w, P), raw[..., 6:9] - np.cross(eps, P), w, eps]
    if raw.shape[-1] == 21:
        eps_dot = raw[..., 18:21]
        out += [raw[..., 15:18] - np.cross(eps_dot, P), eps_dot]
    return np.concatenate(out, axis=-1)


def equivalent_to_raw(vec: np.ndarray, centers: np.ndarray, order: int) -> np.ndarray:
    """Raw rows with rotation center ``centers`` that fold back to ``vec``."""
    P = np.broadcast_to(np.asarray(centers, dtype=np.float64), vec.shape[:-1] + (3,))
    w, eps = vec[..., 6:9], vec[..., 9:12]
    out = [P, vec[..., 0:3] + np.cross(w, P), vec[..., 3:6] + np.cross(eps, P), w, eps]
    if order == 3:
        eps_dot = vec[..., 15:18]
        out += [vec[..., 12:15] + np.cross(eps_dot, P), eps_dot]
    return np.concatenate(out, axis=-1)


def raw_to_equivalent_backward(raw: np.ndarray, grad: np.ndarray) -> np.ndarray:
    P = raw[..., 0:3]
    w, eps = raw[..., 9:12], raw[..., 12:15]
    gv, ga, gw, geps = (grad[..., 3 * i:3 * i + 3] for i in range(4))
    g_P = np.cross(w, gv) + np.cross(eps, ga)
    parts = [None, gv, ga, gw + np.cross(gv, P), geps + np.cross(ga, P)]
    if raw.shape[-1] == 21:
        eps_dot = raw[..., 18:21]
        gj, ged = grad[..., 12:15], grad[..., 15:18]
        g_P = g_P + np.cross(eps_dot, gj)
        parts += [gj, ged + np.cross(gj, P)]
    parts[0] = g_P
    return np.concatenate(parts, axis=-1)


class _FieldBase:
    order: int
    parametrization: str

    @property
    def n_outputs(self) -> int:
        return n_outputs(self.order, self.parametrization)

    @property
    def n_params(self) -> int:
        return 18 if self.order == 3 else 12

    def _finish(self, out: np.ndarray):
        if self.parametrization == "raw":
            return raw_to_equivalent(out)
        return out

    def _finish_backward(self, out: np.ndarray, grad: np.ndarray) -> np.ndarray:
        if self.parametrization == "raw":
            return raw_to_equivalent_backward(out, grad)
        return grad

    def query(self, positions, t, ids=None) -> DynamicsParams:
        vec, _ = self.forward(positions, t, ids)
        return DynamicsParams.from_vector(vec)

    def zero_grads(self) -> dict:
        return {k: np.zeros_like(v) for k, v in self.weights.items()}


class ParamTable(_FieldBase):
    """Per-particle parameter rows anchored at ``anchor_time``."""

    kind = "table"

    def __init__(self, n_particles: int, order: int = 2, parametrization: str = "equivalent",
                 anchor_time: float = 0.0, values: np.ndarray | None = None):
        self.order = check_order(order)
        if parametrization not in PARAMETRIZATIONS:
            raise ValueError(f"unknown parametrization {parametrization!r}")
        self.parametrization = parametrization
        self.anchor_time = float(anchor_time)
        if values is None:
            values = np.zeros((n_particles, self.n_outputs))
        values = np.array(values, dtype=np.float64)
        if values.shape != (n_particles, self.n_outputs):
            raise ValueError(f"table values must have shape {(n_particles, self.n_outputs)}, got {values.shape}")
        self.weights = {"values": values}

    @property
    def values(self) -> np.ndarray:
        return self.weights["values"]

    @property
    def n_particles(self) -> int:
        return self.values.shape[0]

    def _ids(self, ids, n):
        if ids is None:
            if n != self.n_particles:
                raise DataError("table query without ids must cover every particle")
            return np.arange(n)
        ids = np.asarray(ids, dtype=np.int64)
        if ids.size and (ids.min() < 0 or ids.max() >= self.n_particles):
            raise DataError(f"unknown particle id in table query (table has {self.n_particles} rows)")
        return ids

    def forward(self, positions, t, ids=None):
        n = np.shape(positions)[0] if np.ndim(positions) > 1 else 1
        idx = self._ids(ids, n)
        rows = self.values[idx]
        eq = self._finish(rows)
        tau = np.broadcast_to(np.asarray(t, dtype=np.float64) - self.anchor_time, idx.shape)
        out = chains_to_vector(shift_chains(vector_to_chains(eq), tau, self.order), self.n_params)
        return out, (idx, rows, tau)

    def backward(self, cache, grad_out):
        idx, rows, tau = cache
        g_eq = chains_to_vector(shift_chains_transpose(vector_to_chains(grad_out), tau, self.order),
                                self.n_params)
        g_rows = self._finish_backward(rows, g_eq)
        g_vals = np.zeros_like(self.values)
        np.add.at(g_vals, idx, g_rows)
        return {"values": g_vals}, np.zeros((len(idx), 3))

    def update(self, ids, params: DynamicsParams) -> None:
        """Store equivalent parameters (given at ``anchor_time``) for ``ids``."""
        if self.parametrization != "equivalent":
            raise ValueError("update() stores equivalent parameters; use a raw table's values directly")
        vec = params.to_vector()
        if vec.shape[-1] < self.n_params:
            vec = np.concatenate([vec, np.zeros(vec.shape[:-1] + (self.n_params - vec.shape[-1],))], axis=-1)
        self.values[self._ids(ids, len(np.atleast_1d(ids)))] = vec[..., :self.n_params]

    def reanchor(self, new_anchor: float) -> None:
        """Move the anchor time without changing the represented trajectory."""
        if self.parametrization != "equivalent":
            raise ValueError("re-anchoring is defined for the equivalent parametrization")
        tau = new_anchor - self.anchor_time
        self.weights["values"] = chains_to_vector(
            shift_chains(vector_to_chains(self.values), tau, self.order), self.n_params)
        self.anchor_time = float(new_anchor)

    def copy(self) -> "ParamTable":
        return ParamTable(self.n_particles, self.order, self.parametrization, self.anchor_time,
                          self.values.copy())

    def header(self) -> dict:
        return {"kind": self.kind, "order": self.order, "parametrization": self.parametrization,
                "anchor_time": self.anchor_time, "n_particles": self.n_particles}


class MlpField(_FieldBase):
    """ReLU MLP on ``PE(x, L=pos_degree) ++ PE(t, L=time_degree)``.

    ``depth`` hidden layers of ``width`` units, then a linear output layer.
    Hidden layers use He-uniform initialization; the output layer starts at
    zero so a fresh field predicts no motion.
    """

    kind = "mlp"

    def __init__(self, order: int = 2, parametrization: str = "equivalent", width: int = 256,
                 depth: int = 8, pos_degree: int = 8, time_degree: int = 5, use_time: bool = True,
                 seed: int = 0):
        self.order = check_order(order)
        if parametrization not in PARAMETRIZATIONS:
            raise ValueError(f"unknown parametrization {parametrization!r}")
        self.parametrization = parametrization
        self.width, self.depth = int(width), int(depth)
        self.pos_degree, self.time_degree = int(pos_degree), int(time_degree)
        self.use_time = bool(use_time)
        self.seed = int(seed)

        rng = np.random.default_rng(seed)
        sizes = [self.input_dim] + [self.width] * self.depth + [self.n_outputs]
        self.weights = {}
        for i in range(len(sizes) - 1):
            fan_in, fan_out = sizes[i], sizes[i + 1]
            if i == len(sizes) - 2:
                W = np.zeros((fan_out, fan_in))
            else:
                bound = np.sqrt(6.0 / fan_in)
                W = rng.uniform(-bound, bound, size=(fan_out, fan_in))
            self.weights[f"W{i}"] = W
            self.weights[f"b{i}"] = np.zeros(fan_out)

    @property
    def input_dim(self) -> int:
        d = 3 * (2 * self.pos_degree + 1)
        if self.use_time:
            d += 2 * self.time_degree + 1
        return d

    @property
    def n_layers(self) -> int:
        return self.depth + 1

    def encode(self, positions, t):
        positions = np.atleast_2d(np.asarray(positions, dtype=np.float64))
        feats = positional_encoding(positions, self.pos_degree)
        if self.use_time:
            tt = np.broadcast_to(np.asarray(t, dtype=np.float64), positions.shape[:1])[:, None]
            feats = np.concatenate([feats, positional_encoding(tt, self.time_degree)], axis=-1)
        return positions, feats

    def forward(self, positions, t, ids=None):
        positions, h = self.encode(positions, t)
        if h.shape[-1] != self.input_dim:
            raise DataError(f"MLP input has {h.shape[-1]} features, expected {self.input_dim}")
        acts = [h]
        pre = []
        for i in range(self.n_layers):
            z = h @ self.weights[f"W{i}"].T + self.weights[f"b{i}"]
            pre.append(z)
            h = z if i == self.n_layers - 1 else np.maximum(z, 0.0)
            acts.append(h)
        out = h
        return self._finish(out), (positions, acts, pre, out)

    def backward(self, cache, grad_out):
        positions, acts, pre, out = cache
        g = self._finish_backward(out, np.asarray(grad_out, dtype=np.float64))
        grads = {}
        for i in reversed(range(self.n_layers)):
            if i != self.n_layers - 1:
                g = g * (pre[i] > 0.0)
            grads[f"W{i}"] = g.T @ acts[i]
            grads[f"b{i}"] = g.sum(axis=0)
            g = g @ self.weights[f"W{i}"]
        g_pos = positional_encoding_backward(positions, g[:, :3 * (2 * self.pos_degree + 1)],
                                             self.pos_degree)
        return grads, g_pos

    def copy(self) -> "MlpField":
        other = MlpField.__new__(MlpField)
        other.__dict__.update(self.__dict__)
        other.weights = {k: v.copy() for k, v in self.weights.items()}
        return other

    def header(self) -> dict:
        return {"kind": self.kind, "order": self.order, "parametrization": self.parametrization,
                "width": self.width, "depth": self.depth, "pos_degree": self.pos_degree,
                "time_degree": self.time_degree, "use_time": self.use_time, "seed": self.seed,
                "layout": [[k, list(v.shape)] for k, v in self.weights.items()]}


def field_query(field, P, t, ids=None) -> DynamicsParams:
    return field.query(P, t, ids)


def field_backward(field, P, t, upstream, ids=None):
    """Gradients of ``sum(upstream * field(P, t))`` wrt weights and positions."""
    vec, cache = field.forward(P, t, ids)
    upstream = np.asarray(upstream, dtype=np.float64)
    if upstream.shape != vec.shape:
        raise ValueError(f"upstream gradient shape {upstream.shape} != output shape {vec.shape}")
    return field.backward(cache, upstream)


# -- checkpoints --------------------------------------------------------------

def save_field(field, path) -> Path:
    """Write ``<path>.json`` plus a ``.bin`` (MLP, float64 LE) or ``.csv`` (table) sidecar."""
    path = Path(path)
    header = field.header()
    if isinstance(field, MlpField):
        sidecar = path.with_suffix(".bin")
        flat = np.concatenate([v.ravel() for v in field.weights.values()]).astype("<f8")
        sidecar.write_bytes(flat.tobytes())
    else:
        sidecar = path.with_suffix(".csv")
        with open(sidecar, "w", newline="") as fh:
            w = csv.writer(fh, lineterminator="\n")
            w.writerow(["particle_id"] + [f"p{i}" for i in range(field.n_outputs)])
            for pid, row in enumerate(field.values):
                w.writerow([pid] + [format(float(x), ".17g") for x in row])
    header["weights_file"] = sidecar.name
    path.with_suffix(".json").write_text(json.dumps(header, indent=2, sort_keys=True) + "\n")
    return path.with_suffix(".json")


def load_field(path):
    path = Path(path).with_suffix(".json")
    try:
        header = json.loads(path.read_text())
    except (OSError, json.JSONDecodeError) as exc:
        raise DataError(f"cannot read field checkpoint {path}: {exc}") from exc
    sidecar = path.parent / header["weights_file"]
    if header["kind"] == "mlp":
        field = MlpField(order=header["order"], parametrization=header["parametrization"],
                         width=header["width"], depth=header["depth"], pos_degree=header["pos_degree"],
                         time_degree=header["time_degree"], use_time=header["use_time"],
                         seed=header["seed"])
        flat = np.frombuffer(sidecar.read_bytes(), dtype="<f8")
        offset = 0
        for name, shape in header["layout"]:
            n = int(np.prod(shape))
            if offset + n > flat.size:
                raise DataError("field weight file is truncated")
            field.weights[name] = flat[offset:offset + n].reshape(shape).astype(np.float64)
            offset += n
        if offset != flat.size:
            raise DataError("field weight file has trailing data")
        return field
    if header["kind"] == "table":
        with open(sidecar, newline="") as fh:
            rows = list(csv.reader(fh))
        expected = n_outputs(header["order"], header["parametrization"])
        body = rows[1:]
        if any(len(r) != expected + 1 for r in body):
            raise DataError("ragged row in parameter table")
        values = np.array([[float(x) for x in r[1:]] for r in body])
        ids = [int(r[0]) for r in body]
        if ids != list(range(len(ids))):
            raise DataError("parameter table ids must be 0..N-1 in order")
        return ParamTable(len(body), header["order"], header["parametrization"],
                          header["anchor_time"], values.reshape(len(body), expected))
    raise DataError(f"unknown field kind {header['kind']!r}")
