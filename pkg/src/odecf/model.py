"""Embedding dynamics: ODE derivative, fixed-grid solvers, and the layer-combination baseline.

The trainable state is the initial embedding matrix e0 (users stacked above
items) plus optional per-hop scalar weights. The derivative of the dynamics is
g(E) = P(E) - E, where P applies the normalized adjacency n_hops times, each
hop optionally scaled by its weight. Everything is linear in E, which the
reverse pass exploits: only the per-hop propagation products are taped, and
only when the hop weights are trainable.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .graph import SparseAdjacency, spmm


class ModelError(ValueError):
    """Raised for invalid model configuration or out-of-range ids."""


class SolverError(RuntimeError):
    """Raised when integration produces non-finite values."""


_METHODS = ("euler", "rk4")


@dataclass(frozen=True)
class SolverConfig:
    """Fixed-grid solver setup over [0, t1] with uniform step size t1/steps."""

    method: str = "euler"
    t1: float = 0.9
    steps: int = 1
    n_hops: int = 2
    use_weights: bool = False

    def __post_init__(self):
        if self.method not in _METHODS:
            raise ModelError(f"unknown solver method {self.method!r}; expected one of {_METHODS}")
        if not (np.isfinite(self.t1) and self.t1 > 0):
            raise ModelError(f"integration end time must be positive and finite, got {self.t1}")
        if self.steps < 1:
            raise ModelError(f"step count must be >= 1, got {self.steps}")
        if self.n_hops < 1:
            raise ModelError(f"hop count must be >= 1, got {self.n_hops}")

    @property
    def step_size(self) -> float:
        return self.t1 / self.steps


@dataclass(eq=False)
class ModelState:
    """Trainable embeddings plus the frozen graph and solver configuration."""

    e0: np.ndarray
    hop_weights: np.ndarray | None
    adjacency: SparseAdjacency
    solver: SolverConfig

    def __post_init__(self):
        if self.solver.use_weights:
            if self.hop_weights is None or len(self.hop_weights) != self.solver.n_hops:
                raise ModelError("hop_weights must have one entry per hop when enabled")
            self.hop_weights = np.asarray(self.hop_weights, dtype=np.float64)
        elif self.hop_weights is not None:
            raise ModelError("hop_weights given but solver.use_weights is off")

    @classmethod
    def create(cls, e0: np.ndarray, adjacency: SparseAdjacency, solver: SolverConfig) -> "ModelState":
        weights = np.ones(solver.n_hops) if solver.use_weights else None
        return cls(e0=np.asarray(e0, dtype=np.float64), hop_weights=weights,
                   adjacency=adjacency, solver=solver)

    def copy(self) -> "ModelState":
        return ModelState(
            e0=self.e0.copy(),
            hop_weights=None if self.hop_weights is None else self.hop_weights.copy(),
            adjacency=self.adjacency,
            solver=self.solver,
        )


@dataclass(eq=False)
class LightGCNState:
    """Baseline state: K propagation layers combined with fixed layer weights."""

    e0: np.ndarray
    adjacency: SparseAdjacency
    n_layers: int
    layer_weights: np.ndarray

    @classmethod
    def create(cls, e0, adjacency, n_layers, layer_weights=None) -> "LightGCNState":
        if n_layers < 0:
            raise ModelError(f"layer count must be >= 0, got {n_layers}")
        if layer_weights is None:
            layer_weights = np.full(n_layers + 1, 1.0 / (n_layers + 1))
        layer_weights = np.asarray(layer_weights, dtype=np.float64)
        if layer_weights.shape != (n_layers + 1,):
            raise ModelError(f"need {n_layers + 1} layer weights, got shape {layer_weights.shape}")
        return cls(e0=np.asarray(e0, dtype=np.float64), adjacency=adjacency,
                   n_layers=n_layers, layer_weights=layer_weights)

    def copy(self) -> "LightGCNState":
        return LightGCNState(self.e0.copy(), self.adjacency, self.n_layers,
                             self.layer_weights.copy())


@dataclass(eq=False)
class SolverTape:
    """Forward intermediates for the reverse pass.

    ``stage_hops[step][stage]`` holds the per-hop propagation products of that
    derivative evaluation, or None when hop weights are off (the map is linear
    in E, so the embedding cotangent never needs them).
    """

    h: float
    stage_hops: list
    e_final: np.ndarray


@dataclass(eq=False)
class LayerTape:
    """Forward record of the baseline; fixed weights need no intermediates."""

    e_final: np.ndarray


def _check_rows(emb: np.ndarray, adjacency: SparseAdjacency) -> np.ndarray:
    emb = np.asarray(emb, dtype=np.float64)
    if emb.ndim != 2 or emb.shape[0] != adjacency.n_nodes:
        raise ModelError(
            f"embedding shape {emb.shape} does not match adjacency over {adjacency.n_nodes} nodes"
        )
    return emb


def _hops_forward(emb, adjacency, n_hops, weights, record):
    x = emb
    for k in range(n_hops):
        y = spmm(adjacency, x)
        if record is not None:
            record.append(y)
        x = weights[k] * y if weights is not None else y
    return x


def derivative(emb: np.ndarray, state: ModelState) -> np.ndarray:
    """g(E) = P(E) - E with P the (optionally weighted) n-hop propagation."""
    emb = _check_rows(emb, state.adjacency)
    cfg = state.solver
    return _hops_forward(emb, state.adjacency, cfg.n_hops, state.hop_weights, None) - emb


def _stage(emb, state, record_hops):
    hops = [] if record_hops else None
    g = _hops_forward(emb, state.adjacency, state.solver.n_hops, state.hop_weights, hops) - emb
    return g, hops


def _integrate(state: ModelState, record_tape: bool):
    cfg = state.solver
    h = cfg.step_size
    record_hops = record_tape and cfg.use_weights
    e = _check_rows(state.e0, state.adjacency)
    steps_tape = []
    for _ in range(cfg.steps):
        with np.errstate(over="ignore", invalid="ignore"):  # the isfinite check reports divergence
            if cfg.method == "euler":
                k1, hops1 = _stage(e, state, record_hops)
                e = e + h * k1
                stage_hops = [hops1]
            else:
                k1, hops1 = _stage(e, state, record_hops)
                k2, hops2 = _stage(e + 0.5 * h * k1, state, record_hops)
                k3, hops3 = _stage(e + 0.5 * h * k2, state, record_hops)
                k4, hops4 = _stage(e + h * k3, state, record_hops)
                e = e + (h / 6.0) * (k1 + 2.0 * k2 + 2.0 * k3 + k4)
                stage_hops = [hops1, hops2, hops3, hops4]
        if not np.isfinite(e).all():
            raise SolverError("divergent integration: non-finite embeddings")
        if record_tape:
            steps_tape.append(stage_hops)
    tape = SolverTape(h=h, stage_hops=steps_tape, e_final=e) if record_tape else None
    return e, tape


def integrate(state: ModelState) -> np.ndarray:
    """Integrate the dynamics from e0 over [0, t1]; returns the final embeddings."""
    e_final, _ = _integrate(state, record_tape=False)
    return e_final


def integrate_with_tape(state: ModelState) -> tuple[np.ndarray, SolverTape]:
    e_final, tape = _integrate(state, record_tape=True)
    return e_final, tape


def _hops_backward(state, hops, cot, dw):
    """Transpose of the weighted hop chain; adds weight gradients into dw."""
    cfg = state.solver
    c = cot
    for k in reversed(range(cfg.n_hops)):
        if cfg.use_weights:
            dw[k] += float(np.sum(c * hops[k]))
            c = c * state.hop_weights[k]
        c = spmm(state.adjacency, c)  # adjacency is symmetric
    return c - cot


def backprop_solver(state: ModelState, tape: SolverTape, d_final: np.ndarray):
    """Exact reverse pass through every solver stage, in reverse step order.

    Returns (d_e0, d_hop_weights or None) for the cotangent ``d_final`` of the
    integrated embeddings.
    """
    cfg = state.solver
    h = tape.h
    v = np.asarray(d_final, dtype=np.float64)
    dw = np.zeros(cfg.n_hops) if cfg.use_weights else None
    for stage_hops in reversed(tape.stage_hops):
        if cfg.method == "euler":
            v = v + _hops_backward(state, stage_hops[0], h * v, dw)
        else:
            hops1, hops2, hops3, hops4 = stage_hops
            de = v.copy()
            dx4 = _hops_backward(state, hops4, (h / 6.0) * v, dw)
            de += dx4
            dx3 = _hops_backward(state, hops3, (h / 3.0) * v + h * dx4, dw)
            de += dx3
            dx2 = _hops_backward(state, hops2, (h / 3.0) * v + 0.5 * h * dx3, dw)
            de += dx2
            dx1 = _hops_backward(state, hops1, (h / 6.0) * v + 0.5 * h * dx2, dw)
            de += dx1
            v = de
    return v, dw


def lightgcn_forward(e0: np.ndarray, adjacency: SparseAdjacency, n_layers: int,
                     layer_weights=None) -> np.ndarray:
    """Layer-combination forward: E_f = sum_l w_l A^l E_0, uniform weights by default."""
    if n_layers < 0:
        raise ModelError(f"layer count must be >= 0, got {n_layers}")
    if layer_weights is None:
        layer_weights = np.full(n_layers + 1, 1.0 / (n_layers + 1))
    layer_weights = np.asarray(layer_weights, dtype=np.float64)
    if layer_weights.shape != (n_layers + 1,):
        raise ModelError(f"need {n_layers + 1} layer weights, got shape {layer_weights.shape}")
    e0 = _check_rows(e0, adjacency)
    acc = layer_weights[0] * e0
    cur = e0
    for l in range(1, n_layers + 1):
        cur = spmm(adjacency, cur)
        acc = acc + layer_weights[l] * cur
    return acc


def backprop_lightgcn(state: LightGCNState, d_final: np.ndarray) -> np.ndarray:
    """Transpose of the layer combination (A symmetric): d_e0 = sum_l w_l A^l dE_f."""
    v = np.asarray(d_final, dtype=np.float64)
    acc = state.layer_weights[0] * v
    cur = v
    for l in range(1, state.n_layers + 1):
        cur = spmm(state.adjacency, cur)
        acc = acc + state.layer_weights[l] * cur
    return acc


def model_forward(state, record_tape: bool = False):
    """Uniform forward dispatch; returns (final embeddings, tape or None)."""
    if isinstance(state, ModelState):
        return _integrate(state, record_tape)
    fe = lightgcn_forward(state.e0, state.adjacency, state.n_layers, state.layer_weights)
    return fe, (LayerTape(e_final=fe) if record_tape else None)


def model_backward(state, tape, d_final):
    """Uniform reverse dispatch; returns (d_e0, d_hop_weights or None)."""
    if isinstance(state, ModelState):
        return backprop_solver(state, tape, d_final)
    return backprop_lightgcn(state, d_final), None


def final_embeddings(state) -> np.ndarray:
    fe, _ = model_forward(state, record_tape=False)
    return fe


def predict_scores(e_final: np.ndarray, n_users: int, user: int, items) -> np.ndarray:
    """Inner-product scores between one user row and the given item rows."""
    e_final = np.asarray(e_final)
    items = np.asarray(list(items) if isinstance(items, (set, frozenset)) else items,
                       dtype=np.int64)
    n_items = e_final.shape[0] - n_users
    if not 0 <= user < n_users:
        raise ModelError(f"user id {user} out of range [0, {n_users})")
    if items.size and (items.min() < 0 or items.max() >= n_items):
        raise ModelError(f"item ids out of range [0, {n_items})")
    return e_final[n_users + items] @ e_final[user]


def init_embeddings(n_rows: int, dims: int, std: float, seed: int) -> np.ndarray:
    """Seeded i.i.d. Gaussian initial embeddings, mean 0 and the given std."""
    if n_rows < 1 or dims < 1:
        raise ModelError(f"embedding shape ({n_rows}, {dims}) must be positive")
    if not std > 0:
        raise ModelError(f"init std must be > 0, got {std}")
    rng = np.random.default_rng(seed)
    return rng.normal(0.0, std, size=(n_rows, dims))


_BINARY_MAGIC = b"EMBF64LE"


def save_embeddings(path, emb: np.ndarray, binary: bool = False) -> None:
    """Write an embedding snapshot; text is round-trip lossless, binary is raw <f8."""
    emb = np.ascontiguousarray(emb, dtype=np.float64)
    if emb.ndim != 2:
        raise ModelError("embedding snapshots must be 2-D")
    if binary:
        with open(path, "wb") as fh:
            fh.write(_BINARY_MAGIC)
            fh.write(np.array(emb.shape, dtype="<i8").tobytes())
            fh.write(emb.astype("<f8", copy=False).tobytes())
    else:
        with open(path, "w", encoding="utf-8") as fh:
            fh.write(f"{emb.shape[0]} {emb.shape[1]}\n")
            for row in emb:
                fh.write(" ".join(repr(float(x)) for x in row))
                fh.write("\n")


def load_embeddings(path) -> np.ndarray:
    """Read a snapshot written by :func:`save_embeddings`; format auto-detected."""
    with open(path, "rb") as fh:
        head = fh.read(len(_BINARY_MAGIC))
        if head == _BINARY_MAGIC:
            shape = np.frombuffer(fh.read(16), dtype="<i8")
            data = np.frombuffer(fh.read(), dtype="<f8")
            if data.size != shape[0] * shape[1]:
                raise ModelError(f"snapshot {path} is truncated")
            return data.reshape(int(shape[0]), int(shape[1])).copy()
    with open(path, "r", encoding="utf-8") as fh:
        rows, dims = (int(x) for x in fh.readline().split())
        data = np.loadtxt(fh, ndmin=2)
    if data.shape != (rows, dims):
        raise ModelError(f"snapshot {path} header says {(rows, dims)}, data is {data.shape}")
    return data
