"""Graph window attention.

Feature maps are cut into non-overlapping M x M windows.  Inside a window each
spatial position is a graph node; edges join every node to its k nearest
neighbours in feature space, rebuilt on every call.  Node ``i`` is updated as

    x_upd(i) = x(i) + W_z  sum_{j in N(i)} alpha_ij W_g x(j)
    alpha_ij = softmax_{j in N(i)} (W_theta x(i))^T (W_phi x(j))

With ``mode="dense"`` the neighbourhood is the whole window (self included),
which is ordinary window self-attention.
"""

from __future__ import annotations

import contextlib
import contextvars
from dataclasses import dataclass

import numpy as np

from . import tensor as T
from .tensor import Tensor


@dataclass
class WindowGraph:
    """Nodes of one or more windows with their k-NN edges and coefficients.

    ``nodes`` is (B, n, C); ``edges`` is (B, n, k) of neighbour indices ordered
    by increasing distance; ``alpha`` is (B, n, k) or None before attention.
    """

    nodes: np.ndarray
    edges: np.ndarray
    alpha: np.ndarray | None = None

    @property
    def k(self) -> int:
        return self.edges.shape[-1]

    def neighbors(self, window: int, node: int) -> list[int]:
        return [int(j) for j in self.edges[window, node]]


@dataclass
class GwamParams:
    w_theta: Tensor
    w_phi: Tensor
    w_g: Tensor
    w_z: Tensor
    window_size: int
    k: int
    heads: int = 1
    include_self: bool = False

    @classmethod
    def init(cls, channels: int, window_size: int, rng: T.Rng, k: int | None = None,
             heads: int = 1, include_self: bool = False, zero_output: bool = False) -> "GwamParams":
        if channels % heads:
            raise ValueError(f"{channels} channels cannot be split into {heads} heads")
        if window_size < 2:
            raise ValueError("window size must be at least 2 so every node has a neighbour")
        d = channels // heads
        scale = 1.0 / np.sqrt(d)

        def mat():
            return T.parameter(rng.normal((heads, d, d), scale))

        w_z = T.parameter(np.zeros((heads, d, d))) if zero_output else mat()
        if k is None:
            k = window_size * window_size // 2
        return cls(mat(), mat(), mat(), w_z, window_size, k, heads, include_self)

    def tensors(self) -> dict[str, Tensor]:
        return {"w_theta": self.w_theta, "w_phi": self.w_phi, "w_g": self.w_g, "w_z": self.w_z}


# -- windows -------------------------------------------------------------------

def partition_windows(feature_map: Tensor, m: int) -> Tensor:
    """(N, C, H, W) -> (N * H/m * W/m, m*m, C), row-major inside each window."""
    n, c, h, w = feature_map.shape
    if m < 1 or h % m or w % m:
        raise ValueError(f"feature map {h}x{w} is not divisible into {m}x{m} windows")
    x = feature_map.reshape(n, c, h // m, m, w // m, m)
    x = x.transpose(0, 2, 4, 3, 5, 1)
    return x.reshape(n * (h // m) * (w // m), m * m, c)


def merge_windows(windows: Tensor, m: int, shape: tuple[int, int, int, int]) -> Tensor:
    n, c, h, w = shape
    x = windows.reshape(n, h // m, w // m, m, m, c)
    x = x.transpose(0, 5, 1, 3, 2, 4)
    return x.reshape(n, c, h, w)


# -- graph construction ----------------------------------------------------------

class _GraphRecorder:
    def __init__(self):
        self.graphs: dict[int, np.ndarray] = {}


_FROZEN: contextvars.ContextVar[_GraphRecorder | None] = contextvars.ContextVar("gabic_frozen_graphs", default=None)


@contextlib.contextmanager
def frozen_graphs():
    """Record k-NN edges per attention block on first use and replay them afterwards.

    Edge selection is piecewise constant; holding it fixed lets finite
    differences probe the same function the analytic gradient describes.
    """
    recorder = _GraphRecorder()
    token = _FROZEN.set(recorder)
    try:
        yield recorder
    finally:
        _FROZEN.reset(token)


def pairwise_sq_dist(nodes: np.ndarray) -> np.ndarray:
    x = np.asarray(nodes, dtype=np.float64)
    diff = x[..., :, None, :] - x[..., None, :, :]
    return np.einsum("...ijc,...ijc->...ij", diff, diff)


def knn_graph(nodes: np.ndarray, k: int, include_self: bool = False) -> np.ndarray:
    """Indices of the k nearest nodes for every node, shape (..., n, k).

    Squared Euclidean distance on the raw features; ties go to the lower index.
    Self is excluded unless ``include_self``, in which case it always occupies
    the first slot followed by the k-1 nearest others.
    """
    nodes = np.asarray(nodes)
    n = nodes.shape[-2]
    limit = n if include_self else n - 1
    if not 1 <= k <= limit:
        raise ValueError(f"k={k} out of range [1, {limit}] for {n} nodes")
    dist = pairwise_sq_dist(nodes)
    diag = np.arange(n)
    dist[..., diag, diag] = -1.0 if include_self else np.inf
    order = np.argsort(dist, axis=-1, kind="stable")
    return order[..., :k]


def edges_to_mask(edges: np.ndarray, n: int) -> np.ndarray:
    mask = np.zeros(edges.shape[:-1] + (n,), dtype=bool)
    np.put_along_axis(mask, edges, True, axis=-1)
    return mask


# -- attention -------------------------------------------------------------------

def _project(nodes: Tensor, w: Tensor) -> Tensor:
    # nodes (..., n, d), w (d_out, d_in) or (h, d, d) broadcast on head axis
    return T.matmul(nodes, T.transpose(w, tuple(range(w.ndim - 2)) + (w.ndim - 1, w.ndim - 2)))


def _logits(nodes: Tensor, w_theta: Tensor, w_phi: Tensor) -> Tensor:
    q = _project(nodes, w_theta)
    kf = _project(nodes, w_phi)
    return T.matmul(q, T.transpose(kf, tuple(range(kf.ndim - 2)) + (kf.ndim - 1, kf.ndim - 2)))


def _take_edges(full: Tensor, edges: np.ndarray) -> Tensor:
    out = np.take_along_axis(full.data, edges, axis=-1)

    def backward(g):
        grad = np.zeros_like(full.data)
        np.put_along_axis(grad, edges, g, axis=-1)
        return (grad,)

    return T.make(out, (full,), backward)


def _scatter_edges(alpha: Tensor, edges: np.ndarray, n: int) -> Tensor:
    full = np.zeros(alpha.shape[:-1] + (n,), dtype=alpha.data.dtype)
    np.put_along_axis(full, edges, alpha.data, axis=-1)
    return T.make(full, (alpha,), lambda g: (np.take_along_axis(g, edges, axis=-1),))


def attention_coefficients(nodes: Tensor, edges: np.ndarray, w_theta: Tensor, w_phi: Tensor) -> Tensor:
    """Per-edge coefficients alpha (..., n, k), softmax over each node's neighbours."""
    nodes = T.as_tensor(nodes)
    n = nodes.shape[-2]
    logits = _logits(nodes, w_theta, w_phi)
    alpha_full = T.softmax(logits, axis=-1, mask=edges_to_mask(edges, n))
    return _take_edges(alpha_full, edges)


def gwam_update(nodes: Tensor, edges: np.ndarray, alpha: Tensor, w_g: Tensor, w_z: Tensor) -> Tensor:
    """Residual message passing along the given edges."""
    nodes = T.as_tensor(nodes)
    n = nodes.shape[-2]
    messages = T.matmul(_scatter_edges(T.as_tensor(alpha), edges, n), _project(nodes, w_g))
    return nodes + _project(messages, w_z)


def _masked_attention(nodes: Tensor, mask: np.ndarray | None, w_theta, w_phi, w_g, w_z) -> Tensor:
    alpha_full = T.softmax(_logits(nodes, w_theta, w_phi), axis=-1, mask=mask)
    messages = T.matmul(alpha_full, _project(nodes, w_g))
    return nodes + _project(messages, w_z)


def dense_window_attention(nodes: Tensor, w_theta: Tensor, w_phi: Tensor, w_g: Tensor, w_z: Tensor) -> Tensor:
    """Conventional window attention: every node attends to the whole window, self included."""
    return _masked_attention(T.as_tensor(nodes), None, w_theta, w_phi, w_g, w_z)


def build_window_graph(nodes: np.ndarray, k: int, w_theta: Tensor, w_phi: Tensor,
                       include_self: bool = False) -> WindowGraph:
    edges = knn_graph(nodes, k, include_self)
    with T.no_grad():
        alpha = attention_coefficients(T.Tensor(nodes), edges, w_theta, w_phi)
    return WindowGraph(np.asarray(nodes), edges, alpha.data)


def _edges_for(key: int, heads_nodes: np.ndarray, k: int, include_self: bool) -> np.ndarray:
    recorder = _FROZEN.get()
    if recorder is None:
        return knn_graph(heads_nodes, k, include_self)
    if key not in recorder.graphs:
        recorder.graphs[key] = knn_graph(heads_nodes, k, include_self)
    return recorder.graphs[key]


def gwam_forward(feature_map: Tensor, params: GwamParams, mode: str = "knn") -> Tensor:
    """Partition, per-head graph attention, merge.  ``mode`` is "knn" or "dense"."""
    if mode not in ("knn", "dense"):
        raise ValueError(f"unknown attention mode {mode!r}")
    m, h = params.window_size, params.heads
    nodes = partition_windows(feature_map, m)
    b, n, c = nodes.shape
    d = c // h
    if h > 1:
        heads = nodes.reshape(b, n, h, d).transpose(0, 2, 1, 3)
    else:
        heads = nodes.reshape(b, 1, n, d)
    if mode == "dense":
        mask = None
    else:
        mask = edges_to_mask(_edges_for(id(params), heads.data, params.k, params.include_self), n)
    out = _masked_attention(heads, mask, params.w_theta, params.w_phi, params.w_g, params.w_z)
    out = out.transpose(0, 2, 1, 3).reshape(b, n, c) if h > 1 else out.reshape(b, n, c)
    return merge_windows(out, m, feature_map.shape)
