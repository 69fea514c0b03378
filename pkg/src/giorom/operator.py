"""Learnable operator stack.

The composition is::

    particles --(node/edge encoders)--> IO_enc --> GNO_enc --> FNO x L --> GNO_dec
              --(lift)--> IO_dec (edge features carried from IO_enc) --> linear --> A

Graph-shaped work (edge lists, grid neighborhoods, canonical ordering) is
precomputed in numpy by :func:`prepare`; :func:`apply` then evaluates the
parameters on that plan under the autodiff tape. Several frames can share one
plan as a disjoint union, with their latent grids stacked on a batch axis.
"""

from __future__ import annotations

from dataclasses import asdict, dataclass, field
from typing import Callable, Sequence

import numpy as np
from scipy.spatial import cKDTree

from .geometry import (
    LatentGrid, PointCloud, RadiusGraph, boundary_features, build_radius_graph, grid_pairs, radius_pairs,
)
from .tensor import (
    ParamStore, Tensor, add, concat, gathered_linear, gelu, getitem, linear, reshape, segment_mean,
    spectral_conv, take,
)


@dataclass
class ModelConfig:
    dim: int = 2
    window: int = 6
    latent: int = 128
    type_embed: int = 16
    num_types: int = 4
    grid: int = 32
    modes: int = 16
    fno_width: int = 32
    fno_layers: int = 2
    gno_hidden: tuple[int, ...] = (32, 64)
    dec_channels: int = 16
    mlp_hidden_layers: int = 1
    gno_radius_factor: float = 2.0
    # grid whose spacing sets the GNO radius; None means the current grid
    radius_grid: int | None = None
    seed: int = 0

    def __post_init__(self):
        self.gno_hidden = tuple(int(h) for h in self.gno_hidden)
        if self.dim != 2:
            raise ValueError(f"the Fourier stage runs on a 2D latent grid; dim={self.dim} is unsupported")
        if self.grid < 2:
            raise ValueError("latent grid needs at least 2 nodes per axis")

    @property
    def node_inputs(self) -> int:
        return self.window * self.dim + 2 * self.dim

    def to_dict(self) -> dict:
        out = asdict(self)
        out["gno_hidden"] = list(self.gno_hidden)
        return out

    @classmethod
    def from_dict(cls, d: dict) -> "ModelConfig":
        known = {k: v for k, v in d.items() if k in cls.__dataclass_fields__}
        return cls(**known)


# ----------------------------------------------------------------------------
# building blocks
# ----------------------------------------------------------------------------

def _dense_init(rng, fan_in: int, fan_out: int) -> np.ndarray:
    bound = 1.0 / np.sqrt(fan_in)
    return rng.uniform(-bound, bound, (fan_in, fan_out))


class MLP:
    """Dense layers with gelu between them (none after the last).

    ``split`` partitions the first layer's input rows. Calling with a list of
    ``(features, index)`` parts multiplies each part by its block of rows and
    gathers with ``index`` afterwards, which equals applying the layer to the
    gathered concatenation without materializing it.
    """

    def __init__(self, params: ParamStore, name: str, sizes: Sequence[int], rng,
                 split: Sequence[int] | None = None):
        self.sizes = list(sizes)
        self.split = list(split) if split is not None else [self.sizes[0]]
        if sum(self.split) != self.sizes[0]:
            raise ValueError(f"{name}: split {self.split} does not sum to input width {self.sizes[0]}")
        self.layers = []
        for k, (a, b) in enumerate(zip(self.sizes[:-1], self.sizes[1:])):
            self.layers.append((params.add(f"{name}.{k}.w", _dense_init(rng, a, b)),
                                params.add(f"{name}.{k}.b", rng.uniform(-1, 1, b) / np.sqrt(a))))

    def first(self, parts) -> Tensor:
        w0, b0 = self.layers[0]
        return gathered_linear(parts, w0, b0)

    def __call__(self, parts) -> Tensor:
        if isinstance(parts, (Tensor, np.ndarray)):
            parts = [(parts, None)]
        h = self.first(parts)
        for w, b in self.layers[1:]:
            h = linear(gelu(h), w, b)
        return h


def interaction_operator(nodes: Tensor, edges: Tensor, receivers: np.ndarray, senders: np.ndarray,
                         kernel: Callable, update: Callable) -> tuple[Tensor, Tensor]:
    """One message-passing step.

    ``kernel(edges, nodes, receivers, senders)`` returns per-edge messages;
    incoming messages are averaged per receiver (zero when a node has none) and
    ``update(nodes, aggregate)`` forms the new node features. Returns the new
    nodes and the residual edge features ``edges + messages``. ``receivers``
    must be sorted.
    """
    messages = kernel(edges, nodes, receivers, senders)
    agg = segment_mean(messages, receivers, nodes.shape[0])
    return update(nodes, agg), add(edges, messages)


@dataclass
class GnoEdges:
    """Neighborhoods for a point-to-point kernel integral with mean reduction.

    Exactly coincident sources are merged (features averaged) before the
    neighborhoods are formed, so duplicating a source leaves the result
    unchanged. Destinations with no source inside the radius use their single
    nearest source.
    """

    dst: np.ndarray
    src: np.ndarray
    num_dst: int
    num_src: int
    rel: np.ndarray
    merge_order: np.ndarray | None = None
    merge_ids: np.ndarray | None = None
    num_unique: int = 0
    fallback: int = 0

    def gather_sources(self, features: Tensor) -> Tensor:
        if self.merge_order is None:
            return features
        return segment_mean(take(features, self.merge_order), self.merge_ids, self.num_unique)


def gno_edges(src_positions: np.ndarray, dst_positions: np.ndarray, r: float,
              dedupe: bool = True, pairs: tuple[np.ndarray, np.ndarray] | None = None) -> GnoEdges:
    """Neighborhoods ``B_r(dst)`` over the sources.

    ``pairs`` optionally supplies the exact ``(dst, src)`` index pairs within
    ``r`` (for example from :func:`grid_pairs`), skipping the search.
    """
    src_positions = np.asarray(src_positions, dtype=np.float64)
    dst_positions = np.asarray(dst_positions, dtype=np.float64)
    merge_order = merge_ids = None
    uniq = src_positions
    inverse = None
    if dedupe:
        uniq, inverse = np.unique(src_positions, axis=0, return_inverse=True)
        inverse = inverse.reshape(-1)
        if len(uniq) < len(src_positions):
            merge_order = np.argsort(inverse, kind="stable")
            merge_ids = inverse[merge_order]
        else:
            uniq, inverse = src_positions, None
    if pairs is None:
        dst, src = radius_pairs(dst_positions, uniq, r)
    else:
        dst, src = pairs
        if inverse is not None:
            packed = np.unique(dst * len(uniq) + inverse[src])
            dst, src = packed // len(uniq), packed % len(uniq)
    has = np.zeros(len(dst_positions), dtype=bool)
    has[dst] = True
    empty = np.flatnonzero(~has)
    if empty.size:
        _, nearest = cKDTree(uniq).query(dst_positions[empty])
        dst = np.concatenate([dst, empty])
        src = np.concatenate([src, np.asarray(nearest, dtype=np.int64)])
        order = np.lexsort((src, dst))
        dst, src = dst[order], src[order]
    rel = (dst_positions[dst] - uniq[src]) / r
    return GnoEdges(dst, src, len(dst_positions), len(src_positions), rel, merge_order, merge_ids,
                    len(uniq), int(empty.size))


def gno_transfer(src_positions, src_features, dst_positions, r: float, kernel: Callable,
                 edges: GnoEdges | None = None) -> Tensor:
    """Mean over ``y in B_r(x)`` of ``kernel(x, y, v(y))`` for every destination ``x``.

    ``kernel`` receives per-edge destination positions, source positions and a
    Tensor of source features and returns a Tensor ``[E, c]``.
    """
    src_positions = np.asarray(src_positions, dtype=np.float64)
    dst_positions = np.asarray(dst_positions, dtype=np.float64)
    edges = gno_edges(src_positions, dst_positions, r) if edges is None else edges
    feats = edges.gather_sources(src_features if isinstance(src_features, Tensor) else Tensor(src_features))
    if edges.merge_order is not None:
        first = np.r_[0, np.flatnonzero(np.diff(edges.merge_ids)) + 1]
        unique_pos = src_positions[edges.merge_order[first]]
    else:
        unique_pos = src_positions
    vals = kernel(dst_positions[edges.dst], unique_pos[edges.src], take(feats, edges.src))
    return segment_mean(vals, edges.dst, edges.num_dst)


class SpectralLayer:
    """``gelu(v W + b + K(v))`` with ``K`` the truncated Fourier convolution."""

    def __init__(self, params: ParamStore, name: str, width: int, modes: int, rng):
        scale = 1.0 / (width * width)
        self.w_re = params.add(f"{name}.spec_re", scale * rng.random((2 * modes, modes, width, width)))
        self.w_im = params.add(f"{name}.spec_im", scale * rng.random((2 * modes, modes, width, width)))
        self.w = params.add(f"{name}.w", _dense_init(rng, width, width))
        self.b = params.add(f"{name}.b", np.zeros(width))

    @property
    def modes(self) -> int:
        return self.w_re.shape[1]

    def _weights(self, modes: int):
        m = self.modes
        if modes == m:
            return self.w_re, self.w_im
        # keep the lowest |k| rows on both sides of zero and the first columns
        out = []
        for w in (self.w_re, self.w_im):
            rows = concat([getitem(w, slice(0, modes)), getitem(w, slice(2 * m - modes, 2 * m))], axis=0)
            out.append(getitem(rows, (slice(None), slice(0, modes))))
        return out

    def __call__(self, grid: Tensor, spectral: bool = True, modes: int | None = None) -> Tensor:
        out = linear(grid, self.w, self.b)
        if spectral:
            h, w = grid.shape[-3], grid.shape[-2]
            modes = min(self.modes if modes is None else modes, h // 2, w // 2)
            w_re, w_im = self._weights(modes)
            out = add(out, spectral_conv(grid, w_re, w_im))
        return gelu(out)


def fno_layer(layer: SpectralLayer, grid_features: Tensor, spectral: bool = True) -> Tensor:
    """Pointwise linear plus truncated spectral convolution, then gelu.

    On a grid too coarse for the trained mode count, only the modes the grid
    can hold are used.
    """
    return layer(grid_features, spectral)


# ----------------------------------------------------------------------------
# plan: everything that does not depend on parameters
# ----------------------------------------------------------------------------

@dataclass
class FrameInput:
    """One frame: positions ``[Q, d]``, normalized velocity window ``[Q, w*d]`` and type ids."""

    positions: np.ndarray
    window: np.ndarray
    types: np.ndarray
    bounds: np.ndarray
    radius: float
    graph: RadiusGraph | None = None
    object_id: np.ndarray | None = None


@dataclass
class Plan:
    num_nodes: int
    num_frames: int
    grid_shape: tuple[int, int]
    node_feats: np.ndarray
    types: np.ndarray
    receivers: np.ndarray
    senders: np.ndarray
    edge_feats: np.ndarray
    grid_pos: np.ndarray
    particle_pos: np.ndarray
    enc: GnoEdges
    dec: GnoEdges
    unsort: np.ndarray
    offsets: np.ndarray = field(repr=False)


def canonical_order(positions: np.ndarray, window: np.ndarray, types: np.ndarray) -> np.ndarray:
    """Lexicographic order by position, then window, then type; fixes summation order."""
    keys = [types] + [window[:, k] for k in range(window.shape[1] - 1, -1, -1)]
    keys += [positions[:, k] for k in range(positions.shape[1] - 1, -1, -1)]
    return np.lexsort(keys)


def _concat_gno(parts: list[GnoEdges], dst_off, src_off) -> GnoEdges:
    dst = np.concatenate([p.dst + o for p, o in zip(parts, dst_off)])
    src_uoff, acc = [], 0
    for p in parts:
        src_uoff.append(acc)
        acc += p.num_unique
    src = np.concatenate([p.src + o for p, o in zip(parts, src_uoff)])
    rel = np.concatenate([p.rel for p in parts])
    merge_order = merge_ids = None
    if any(p.merge_order is not None for p in parts):
        mo, mi = [], []
        for p, so, uo in zip(parts, src_off, src_uoff):
            if p.merge_order is None:
                mo.append(np.arange(p.num_src) + so)
                mi.append(np.arange(p.num_src) + uo)
            else:
                mo.append(p.merge_order + so)
                mi.append(p.merge_ids + uo)
        merge_order, merge_ids = np.concatenate(mo), np.concatenate(mi)
    return GnoEdges(dst, src, sum(p.num_dst for p in parts), sum(p.num_src for p in parts), rel,
                    merge_order, merge_ids, acc, sum(p.fallback for p in parts))


def prepare(cfg: ModelConfig, frames: Sequence[FrameInput]) -> Plan:
    """Featurize and build every neighborhood for a batch of frames."""
    node_feats, types, recv, send, efeat = [], [], [], [], []
    grid_pos, part_pos, enc, dec, unsort = [], [], [], [], []
    offsets = [0]
    for fr in frames:
        x = np.asarray(fr.positions, dtype=np.float64)
        q, d = x.shape
        if d != cfg.dim:
            raise ValueError(f"frame has dimension {d}, model expects {cfg.dim}")
        win = np.asarray(fr.window, dtype=np.float64).reshape(q, -1)
        if win.shape[1] != cfg.window * cfg.dim:
            raise ValueError(f"window has {win.shape[1]} columns, expected {cfg.window * cfg.dim}")
        typ = np.asarray(fr.types, dtype=np.int64).reshape(q)
        if typ.size and (typ.min() < 0 or typ.max() >= cfg.num_types):
            raise ValueError(f"particle types must lie in [0, {cfg.num_types})")
        bounds = np.asarray(fr.bounds, dtype=np.float64).reshape(2, d)
        obj = fr.object_id if fr.object_id is not None else typ
        cloud = PointCloud(x, bounds, obj)
        graph = fr.graph if fr.graph is not None else build_radius_graph(cloud, fr.radius)
        if graph.num_nodes != q:
            raise ValueError(f"graph has {graph.num_nodes} nodes for {q} particles")
        r = float(graph.radius)

        order = canonical_order(x, win, typ)
        inv = np.empty_like(order)
        inv[order] = np.arange(q)
        xs, ws, ts = x[order], win[order], typ[order]
        rr, ss = inv[graph.receivers], inv[graph.senders]
        eo = np.lexsort((ss, rr))
        rr, ss = rr[eo], ss[eo]

        off = offsets[-1]
        node_feats.append(np.concatenate([ws, boundary_features(PointCloud(xs, bounds), r)], axis=1))
        types.append(ts)
        recv.append(rr + off)
        send.append(ss + off)
        efeat.append((xs[rr] - xs[ss]) / r)
        unsort.append(inv + off)

        lat = LatentGrid(bounds, cfg.grid)
        span = bounds[1] - bounds[0]
        r_gno = cfg.gno_radius_factor * float(span.max()) / ((cfg.radius_grid or cfg.grid) - 1)
        gp = lat.positions
        grid_pos.append((gp - bounds[0]) / span)
        part_pos.append((xs - bounds[0]) / span)
        # kernels see displacements in units of the transfer radius
        node, point = grid_pairs(lat, xs, r_gno)
        enc.append(gno_edges(xs, gp, r_gno, pairs=(node, point)))
        by_point = np.lexsort((node, point))
        dec.append(gno_edges(gp, xs, r_gno, dedupe=False, pairs=(point[by_point], node[by_point])))
        offsets.append(off + q)

    s = cfg.grid ** 2
    n_frames = len(frames)
    enc_all = _concat_gno(enc, [k * s for k in range(n_frames)], offsets[:-1])
    dec_all = _concat_gno(dec, offsets[:-1], [k * s for k in range(n_frames)])
    return Plan(offsets[-1], n_frames, (cfg.grid, cfg.grid), np.concatenate(node_feats),
                np.concatenate(types), np.concatenate(recv), np.concatenate(send),
                np.concatenate(efeat), np.concatenate(grid_pos), np.concatenate(part_pos),
                enc_all, dec_all, np.concatenate(unsort), np.asarray(offsets))


# ----------------------------------------------------------------------------
# model
# ----------------------------------------------------------------------------

class OperatorModel:
    """Parameters and composition of the full operator."""

    def __init__(self, cfg: ModelConfig | None = None, params: ParamStore | None = None):
        self.cfg = cfg or ModelConfig()
        c = self.cfg
        rng = np.random.default_rng(c.seed)
        self.params = ParamStore()
        p = self.params
        lat, d = c.latent, c.dim
        hidden = [lat] * c.mlp_hidden_layers

        self.embedding = p.add("type_embedding", rng.standard_normal((c.num_types, c.type_embed)))
        self.node_enc = MLP(p, "node_enc", [c.node_inputs + c.type_embed] + hidden + [lat], rng,
                            split=[c.node_inputs, c.type_embed])
        self.edge_enc = MLP(p, "edge_enc", [d] + hidden + [lat], rng)
        self.io_enc_kernel = MLP(p, "io_enc.kernel", [3 * lat] + hidden + [lat], rng, split=[lat] * 3)
        self.io_enc_update = MLP(p, "io_enc.update", [2 * lat] + hidden + [lat], rng, split=[lat] * 2)
        self.gno_enc = MLP(p, "gno_enc", [2 * d + lat] + list(c.gno_hidden) + [c.fno_width], rng,
                           split=[d, d, lat])
        self.fno = [SpectralLayer(p, f"fno.{k}", c.fno_width, c.modes, rng) for k in range(c.fno_layers)]
        self.gno_dec = MLP(p, "gno_dec", [2 * d + c.fno_width] + list(c.gno_hidden) + [c.dec_channels],
                           rng, split=[d, d, c.fno_width])
        self.lift = MLP(p, "lift", [c.dec_channels, lat], rng)
        self.io_dec_kernel = MLP(p, "io_dec.kernel", [3 * lat] + hidden + [lat], rng, split=[lat] * 3)
        self.io_dec_update = MLP(p, "io_dec.update", [2 * lat] + hidden + [lat], rng, split=[lat] * 2)
        self.out = MLP(p, "out", [lat, d], rng)
        if params is not None:
            for name, t in params.items():
                self.params.set(name, t.data)

    def load_state(self, state: dict[str, np.ndarray]) -> None:
        missing = set(self.params.names()) - set(state)
        if missing:
            raise KeyError(f"checkpoint lacks parameters: {sorted(missing)[:5]}")
        for name in self.params.names():
            self.params.set(name, state[name])

    def _io(self, kernel: MLP, update: MLP, nodes: Tensor, edges: Tensor, plan: Plan):
        def kern(e, v, recv, send):
            return kernel([(e, None), (v, recv), (v, send)])

        def upd(v, agg):
            return add(v, update([(v, None), (agg, None)]))

        return interaction_operator(nodes, edges, plan.receivers, plan.senders, kern, upd)

    def _gno(self, mlp: MLP, dst_pos: np.ndarray, feats: Tensor, edges: GnoEdges) -> Tensor:
        v = edges.gather_sources(feats)
        vals = mlp([(dst_pos, edges.dst), (edges.rel, None), (v, edges.src)])
        return segment_mean(vals, edges.dst, edges.num_dst)

    def apply(self, plan: Plan, spectral: bool = True) -> Tensor:
        """Accelerations ``[sum Q, d]`` in the original particle order of each frame."""
        c = self.cfg
        v = self.node_enc([(plan.node_feats, None), (self.embedding, plan.types)])
        h = self.edge_enc(plan.edge_feats)
        v, k = self._io(self.io_enc_kernel, self.io_enc_update, v, h, plan)

        g = self._gno(self.gno_enc, plan.grid_pos, v, plan.enc)
        g = reshape(g, (plan.num_frames,) + plan.grid_shape + (c.fno_width,))
        for layer in self.fno:
            g = layer(g, spectral)
        g = reshape(g, (plan.num_frames * plan.grid_shape[0] * plan.grid_shape[1], c.fno_width))

        u = self._gno(self.gno_dec, plan.particle_pos, g, plan.dec)
        u = self.lift(u)
        u, _ = self._io(self.io_dec_kernel, self.io_dec_update, u, k, plan)
        a = self.out(u)
        return take(a, plan.unsort)

    def forward(self, frames: Sequence[FrameInput]) -> Tensor:
        return self.apply(prepare(self.cfg, frames))


def model_forward(model: OperatorModel, cloud: PointCloud, graph: RadiusGraph, window, types,
                  grid: LatentGrid | None = None) -> Tensor:
    """Predicted normalized accelerations ``[Q, d]`` for one frame."""
    if grid is not None and grid.resolution != model.cfg.grid:
        raise ValueError(f"grid resolution {grid.resolution} != model grid {model.cfg.grid}")
    frame = FrameInput(cloud.positions, window, types, cloud.bounds, graph.radius, graph, cloud.object_id)
    return model.forward([frame])


def with_grid(model: OperatorModel, resolution: int) -> OperatorModel:
    """Same parameters evaluated on a different latent grid resolution.

    The GNO transfer radius stays at its trained world-space value, so the
    encoder and decoder integrate over the same balls on any grid.
    """
    old = model.cfg
    cfg = ModelConfig.from_dict({**old.to_dict(), "grid": resolution,
                                 "radius_grid": old.radius_grid or old.grid})
    clone = OperatorModel.__new__(OperatorModel)
    clone.__dict__.update(model.__dict__)
    clone.cfg = cfg
    return clone
