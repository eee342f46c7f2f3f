"""Spatio-temporal progressive attention model and its reduced variants."""

from __future__ import annotations

import json
import struct
from dataclasses import asdict, dataclass, field, fields
from pathlib import Path
from typing import Optional, Union

import numpy as np

from . import autodiff as ad
from .attention import (
    apply_mask,
    class_score,
    gradient_heat,
    minmax_view,
    select_by_threshold,
)
from .autodiff import Tape, Tensor
from .graph import ElectrodeLayout, GraphSpec, biosemi64, spatial_adjacency, temporal_adjacency
from .layers import ChebConvLayer, FcLayer, ReductionHead, pool_mean

VARIANTS = {"stm": 1, "stam": 2, "stpam": 3}


class ConfigError(ValueError):
    pass


class CheckpointError(ValueError):
    pass


@dataclass
class ModelConfig:
    n_channels: int = 64
    n_times: int = 256
    window: int = 32            # samples per slice
    n_slices: int = 16
    k_spatial: int = 2
    d_spatial: int = 32
    k_temporal: int = 3
    d_temporal: int = 8
    d_reduced: int = 64
    conv_channels: int = 8
    epsilon: float = 0.2
    gamma: float = 0.01
    n_classes: int = 2
    variant: str = "stpam"
    sigma_scale: float = 1.0
    adjacency_threshold: float = 0.1
    lambda_max: Optional[float] = None   # None: power iteration per graph
    attention_class: str = "predicted"   # class used for training-time maps
    kl_scope: str = "gcn"                # "gcn" or "all"
    kl_pairs: list = field(default_factory=lambda: [[0, 1]])
    seed: int = 0

    def __post_init__(self):
        if self.variant not in VARIANTS:
            raise ConfigError(f"unknown variant {self.variant!r}; expected one of {sorted(VARIANTS)}")
        if not 0 <= self.epsilon < 1:
            raise ConfigError("epsilon must lie in [0, 1)")
        if self.attention_class not in ("label", "predicted"):
            raise ConfigError("attention_class must be 'label' or 'predicted'")
        if self.kl_scope not in ("gcn", "all"):
            raise ConfigError("kl_scope must be 'gcn' or 'all'")
        if self.n_classes < 2:
            raise ConfigError("need at least two classes")
        self.kl_pairs = [list(map(int, p)) for p in self.kl_pairs]

    @property
    def n_experts(self) -> int:
        return VARIANTS[self.variant]

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> "ModelConfig":
        known = {f.name for f in fields(cls)}
        return cls(**{k: v for k, v in d.items() if k in known})


# ---------------------------------------------------------------------------
# input slicing


def slice_offsets(T: int, window: int, m: int) -> np.ndarray:
    if T < window:
        raise ValueError(f"epoch of {T} samples is shorter than the {window}-sample window")
    if m < 1:
        raise ValueError("need at least one slice")
    if m == 1:
        return np.array([0])
    stride = (T - window) // (m - 1)
    return np.arange(m) * stride


def slice_input(X: np.ndarray, window: int, m: int) -> np.ndarray:
    """(..., C, T) -> (..., M, C, window) with evenly spaced window starts."""
    X = np.asarray(X, dtype=np.float64)
    offsets = slice_offsets(X.shape[-1], window, m)
    idx = offsets[:, None] + np.arange(window)[None, :]           # (M, window)
    out = X[..., idx]                                             # (..., C, M, window)
    return np.moveaxis(out, -2, -3)


# ---------------------------------------------------------------------------
# experts


class SpatialExpert:
    def __init__(self, graph: GraphSpec, cfg: ModelConfig, index: int):
        name = f"psl.e{index}"
        self.gcn = ChebConvLayer(graph, cfg.window, cfg.d_spatial, f"{name}.gcn", cfg.seed)
        self.head = FcLayer(graph.n * cfg.d_spatial, cfg.n_classes, f"{name}.head", cfg.seed)

    def parameters(self) -> dict[str, Tensor]:
        return {**self.gcn.parameters(), **self.head.parameters()}

    def __call__(self, x: Tensor) -> tuple[Tensor, Tensor]:
        h = self.gcn(x)                                           # (B, M, C, d)
        probs = ad.softmax(self.head(ad.flatten(h, start=h.ndim - 2)))  # (B, M, Z)
        return h, probs


class TemporalExpert:
    def __init__(self, graph: GraphSpec, cfg: ModelConfig, index: int):
        name = f"ptl.e{index}"
        self.gcn = ChebConvLayer(graph, cfg.d_reduced, cfg.d_temporal, f"{name}.gcn", cfg.seed)
        self.head = FcLayer(graph.n * cfg.d_temporal, cfg.n_classes, f"{name}.head", cfg.seed)

    def parameters(self) -> dict[str, Tensor]:
        return {**self.gcn.parameters(), **self.head.parameters()}

    def __call__(self, g: Tensor) -> tuple[Tensor, Tensor]:
        o = self.gcn(g)                                           # (B, M, d'')
        probs = ad.softmax(self.head(ad.flatten(o, start=o.ndim - 2)))  # (B, Z)
        return o, probs


@dataclass
class ForwardTrace:
    tape: Tape
    spatial_features: list
    spatial_heat: dict            # expert -> Tensor (B, M, C)
    spatial_masks: list           # masks applied before expert e+1, (B, M, C) bool
    spatial_probs: list           # expert -> Tensor (B, Z), slice-averaged
    reduced: Tensor               # G, (B, M, d')
    temporal_features: list
    temporal_heat: dict           # expert -> Tensor (B, M)
    temporal_masks: list          # (B, M) bool
    temporal_probs: list          # expert -> Tensor (B, Z)
    probs: Tensor                 # (B, Z)

    @property
    def predictions(self) -> np.ndarray:
        return self.probs.data.argmax(axis=-1)


class STPAM:
    """Progressive spatial experts -> reduction -> progressive temporal experts -> classifier."""

    def __init__(self, config: ModelConfig, layout: Optional[ElectrodeLayout] = None):
        layout = layout or biosemi64()
        if len(layout) != config.n_channels:
            raise ConfigError(f"layout has {len(layout)} channels, config expects {config.n_channels}")
        slice_offsets(config.n_times, config.window, config.n_slices)
        self.config = config
        self.layout = layout
        cfg = config
        A_s = spatial_adjacency(layout, cfg.sigma_scale, cfg.adjacency_threshold)
        self.spatial_graph = GraphSpec.build(A_s, cfg.k_spatial, cfg.lambda_max)
        self.temporal_graph = GraphSpec.build(temporal_adjacency(cfg.n_slices), cfg.k_temporal, cfg.lambda_max)
        E = cfg.n_experts
        self.spatial = [SpatialExpert(self.spatial_graph, cfg, e) for e in range(E)]
        self.reduce = ReductionHead(E, cfg.d_spatial, cfg.d_reduced, "psl.reduce",
                                    cfg.conv_channels, 3, cfg.seed)
        self.temporal = [TemporalExpert(self.temporal_graph, cfg, e) for e in range(E)]
        self.classifier = FcLayer(cfg.n_slices * cfg.d_temporal, cfg.n_classes, "final", cfg.seed)

    # -- parameters ---------------------------------------------------------

    def parameters(self) -> dict[str, Tensor]:
        params: dict[str, Tensor] = {}
        for ex in self.spatial:
            params.update(ex.parameters())
        params.update(self.reduce.parameters())
        for ex in self.temporal:
            params.update(ex.parameters())
        params.update(self.classifier.parameters())
        return params

    def gcn_parameters(self) -> dict[str, Tensor]:
        """Graph-convolution weights of every expert (the partitions the diversity loss trains)."""
        out: dict[str, Tensor] = {}
        for ex in self.spatial + self.temporal:
            out.update(ex.gcn.parameters())
        return out

    def parameter_count(self) -> int:
        return int(sum(p.size for p in self.parameters().values()))

    # -- forward ------------------------------------------------------------

    def _map_experts(self, export_maps: bool) -> set:
        E = self.config.n_experts
        needed = set(range(E - 1))                       # maps that drive masking
        for a, b in self.config.kl_pairs:
            if a < E and b < E:
                needed.update((a, b))
        if export_maps:
            needed.update(range(E) if E > 1 else ())
        return needed

    def _classes(self, probs: Tensor, labels: Optional[np.ndarray], training: bool) -> np.ndarray:
        if training and self.config.attention_class == "label":
            if labels is None:
                raise ValueError("labels are required for label-driven attention")
            lab = np.asarray(labels, dtype=np.int64)
            return np.broadcast_to(lab.reshape(lab.shape + (1,) * (probs.ndim - 1 - lab.ndim)),
                                   probs.shape[:-1])
        return probs.data.argmax(axis=-1)

    def forward(self, X: np.ndarray, labels: Optional[np.ndarray] = None, training: bool = False,
                export_maps: bool = False, tape: Optional[Tape] = None) -> ForwardTrace:
        """Run the full model on a batch ``X`` of shape (B, C, T).

        Must be called with a tape (one is created when none is given); the
        trace keeps it so losses can be differentiated afterwards.
        """
        X = np.asarray(X, dtype=np.float64)
        if X.ndim == 2:
            X = X[None]
        cfg = self.config
        if X.shape[1:] != (cfg.n_channels, cfg.n_times):
            raise ConfigError(f"expected samples of shape ({cfg.n_channels}, {cfg.n_times}), got {X.shape[1:]}")
        own = tape is None
        if own:
            tape = Tape()
            tape.__enter__()
        try:
            return self._forward(X, labels, training, export_maps, tape)
        finally:
            if own:
                tape.__exit__(None, None, None)

    def _forward(self, X, labels, training, export_maps, tape) -> ForwardTrace:
        cfg = self.config
        want = self._map_experts(export_maps)
        E = cfg.n_experts

        x = Tensor(slice_input(X, cfg.window, cfg.n_slices))     # (B, M, C, T_M)
        s_feats, s_probs, s_heat, s_masks = [], [], {}, []
        for e, expert in enumerate(self.spatial):
            h, f = expert(x)
            s_feats.append(h)
            s_probs.append(ad.mean(f, axis=1))
            if e in want:
                z = self._classes(f, labels, training)
                s_heat[e] = gradient_heat(h, class_score(f, z), tape)
            if e < E - 1:
                keep = select_by_threshold(minmax_view(s_heat[e].data), cfg.epsilon)
                s_masks.append(keep)
                x = apply_mask(x, keep)

        G = self.reduce(s_feats)                                  # (B, M, d')
        g = G
        t_feats, t_probs, t_heat, t_masks = [], [], {}, []
        for e, expert in enumerate(self.temporal):
            o, f = expert(g)
            t_feats.append(o)
            t_probs.append(f)
            if e in want:
                z = self._classes(f, labels, training)
                t_heat[e] = gradient_heat(o, class_score(f, z), tape)
            if e < E - 1:
                keep = select_by_threshold(minmax_view(t_heat[e].data), cfg.epsilon)
                t_masks.append(keep)
                g = apply_mask(g, keep)

        pooled = pool_mean(t_feats)
        probs = ad.softmax(self.classifier(ad.flatten(pooled, start=1)))
        return ForwardTrace(tape, s_feats, s_heat, s_masks, s_probs, G,
                            t_feats, t_heat, t_masks, t_probs, probs)

    def predict(self, X: np.ndarray, batch_size: int = 64) -> tuple[np.ndarray, np.ndarray]:
        """Inference: class per sample (ties -> lower index) and class probabilities."""
        X = np.asarray(X, dtype=np.float64)
        if X.ndim == 2:
            X = X[None]
        probs = []
        for start in range(0, len(X), batch_size):
            trace = self.forward(X[start:start + batch_size], training=False)
            probs.append(trace.probs.data)
        P = np.concatenate(probs) if probs else np.zeros((0, self.config.n_classes))
        return P.argmax(axis=-1), P


def build_variant(kind: str, config: Optional[ModelConfig] = None,
                  layout: Optional[ElectrodeLayout] = None, **overrides) -> STPAM:
    kind = kind.lower()
    if kind not in VARIANTS:
        raise ConfigError(f"unknown variant {kind!r}")
    base = (config or ModelConfig()).to_dict()
    base.update(overrides)
    base["variant"] = kind
    return STPAM(ModelConfig.from_dict(base), layout)


# ---------------------------------------------------------------------------
# checkpoints

MAGIC = b"STPM"
FORMAT_VERSION = 1


def save_checkpoint(model: STPAM, path: Union[str, Path], optimizer=None) -> None:
    header = {
        "model": model.config.to_dict(),
        "layout": {"names": list(model.layout.names), "positions": model.layout.positions.tolist()},
    }
    records = list(model.parameters().items())
    if optimizer is not None:
        header["optimizer"] = optimizer.state_header()
        records += optimizer.state_records()
    blob = json.dumps(header, sort_keys=True).encode()
    with open(path, "wb") as fh:
        fh.write(MAGIC)
        fh.write(struct.pack("<II", FORMAT_VERSION, len(blob)))
        fh.write(blob)
        fh.write(struct.pack("<I", len(records)))
        for name, value in records:
            arr = value.data if isinstance(value, Tensor) else np.asarray(value, dtype=np.float64)
            nb = name.encode()
            fh.write(struct.pack("<I", len(nb)))
            fh.write(nb)
            fh.write(struct.pack("<I", arr.ndim))
            fh.write(struct.pack(f"<{arr.ndim}I", *arr.shape))
            fh.write(np.ascontiguousarray(arr, dtype="<f8").tobytes())


def _read_exact(fh, n: int) -> bytes:
    buf = fh.read(n)
    if len(buf) != n:
        raise CheckpointError("checkpoint is truncated")
    return buf


def read_checkpoint(path: Union[str, Path]) -> tuple[dict, dict[str, np.ndarray]]:
    with open(path, "rb") as fh:
        if _read_exact(fh, 4) != MAGIC:
            raise CheckpointError("not a checkpoint (bad magic)")
        version, hlen = struct.unpack("<II", _read_exact(fh, 8))
        if version != FORMAT_VERSION:
            raise CheckpointError(f"unsupported checkpoint version {version}")
        header = json.loads(_read_exact(fh, hlen))
        (count,) = struct.unpack("<I", _read_exact(fh, 4))
        records = {}
        for _ in range(count):
            (nlen,) = struct.unpack("<I", _read_exact(fh, 4))
            name = _read_exact(fh, nlen).decode()
            (rank,) = struct.unpack("<I", _read_exact(fh, 4))
            shape = struct.unpack(f"<{rank}I", _read_exact(fh, 4 * rank))
            size = int(np.prod(shape)) if rank else 1
            records[name] = np.frombuffer(_read_exact(fh, 8 * size), dtype="<f8").reshape(shape).astype(np.float64)
    return header, records


def load_checkpoint(path: Union[str, Path], expected: Optional[ModelConfig] = None,
                    optimizer=None) -> STPAM:
    header, records = read_checkpoint(path)
    config = ModelConfig.from_dict(header["model"])
    if expected is not None and expected.to_dict() != config.to_dict():
        diff = sorted(k for k, v in expected.to_dict().items() if config.to_dict().get(k) != v)
        raise CheckpointError(f"checkpoint config differs in: {', '.join(diff)}")
    lay = header["layout"]
    model = STPAM(config, ElectrodeLayout(tuple(lay["names"]), np.array(lay["positions"])))
    for name, p in model.parameters().items():
        if name not in records:
            raise CheckpointError(f"checkpoint lacks parameter {name}")
        if records[name].shape != p.shape:
            raise CheckpointError(f"parameter {name} has shape {records[name].shape}, expected {p.shape}")
        p.data = records[name].copy()
    if optimizer is not None and "optimizer" in header:
        optimizer.load_state(header["optimizer"], records)
    return model
