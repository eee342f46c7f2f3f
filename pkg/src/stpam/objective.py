"""Training objective (expert cross-entropies plus attention diversity) and Adam."""

from __future__ import annotations

from dataclasses import dataclass
from typing import Optional, Sequence

import numpy as np

from . import autodiff as ad
from .attention import EPS_NUM, distribution_tensor, distribution_view, kl_penalty
from .autodiff import DimensionError, Tensor
from .model import ForwardTrace, STPAM

PROB_FLOOR = 1e-12


class OptimizerError(ValueError):
    pass


@dataclass(frozen=True)
class LossBreakdown:
    lc: float
    ls: float
    lt: float
    kl_s: float
    kl_t: float
    gamma: float
    total: float

    def as_row(self) -> list[float]:
        return [self.total, self.lc, self.ls, self.lt, self.kl_s, self.kl_t]


def _check_labels(labels, n_classes: int) -> np.ndarray:
    labels = np.asarray(labels)
    if labels.size and (labels.min() < 0 or labels.max() >= n_classes):
        raise ValueError(f"labels must lie in [0, {n_classes})")
    return labels.astype(np.int64)


def expert_ce_loss(probs, labels) -> float:
    """Mean negative log-probability of the labelled class (numpy, floored)."""
    probs = np.asarray(probs, dtype=np.float64)
    labels = _check_labels(labels, probs.shape[-1])
    if labels.shape != probs.shape[:-1]:
        raise DimensionError("one label per probability row expected")
    picked = np.take_along_axis(probs, labels[..., None], axis=-1)[..., 0]
    return float(-np.mean(np.log(np.maximum(picked, PROB_FLOOR))))


def _ce_tensor(probs: Tensor, labels: np.ndarray) -> Tensor:
    _check_labels(labels, probs.shape[-1])
    return ad.cross_entropy(probs, labels, floor=PROB_FLOOR)


def kl_losses(spatial_pairs: Sequence[tuple], temporal_pairs: Sequence[tuple]) -> tuple[float, float]:
    """Diversity penalties from heat arrays.

    Spatial pairs hold (N, M, C) heat per expert: each slice map is turned
    into a distribution and the M of them are averaged per sample. Temporal
    pairs hold (N, M) heat. Each loss is the sample mean of exp(-KL), summed
    over pairs; an empty list contributes 0.
    """
    def one(pairs, spatial):
        total = 0.0
        for p, q in pairs:
            p, q = np.asarray(p, dtype=np.float64), np.asarray(q, dtype=np.float64)
            if p.shape != q.shape:
                raise DimensionError("attention maps of a pair differ in length")
            dp, dq = distribution_view(p, EPS_NUM), distribution_view(q, EPS_NUM)
            if spatial:
                dp, dq = dp.mean(axis=-2), dq.mean(axis=-2)
            total += float(np.mean(kl_penalty(dp, dq)))
        return total

    return one(spatial_pairs, True), one(temporal_pairs, False)


def _kl_tensor(pairs, spatial: bool) -> Optional[Tensor]:
    acc = None
    for p, q in pairs:
        if p.shape != q.shape:
            raise DimensionError("attention maps of a pair differ in length")
        dp, dq = distribution_tensor(p), distribution_tensor(q)
        if spatial:
            dp, dq = ad.mean(dp, axis=-2), ad.mean(dq, axis=-2)
        d = ad.sum(ad.mul(dp, ad.sub(ad.log(dp), ad.log(dq))), axis=-1)
        term = ad.mean(ad.exp(ad.neg(d)))
        acc = term if acc is None else ad.add(acc, term)
    return acc


@dataclass
class LossTerms:
    """Differentiable pieces of the objective, all recorded on the trace's tape."""
    main: Tensor                 # L^c + L^S + L^T
    kl_s: Optional[Tensor]
    kl_t: Optional[Tensor]
    breakdown: LossBreakdown


def _pairs(model: STPAM, heat: dict) -> list:
    E = model.config.n_experts
    return [(heat[a], heat[b]) for a, b in model.config.kl_pairs if a < E and b < E and a != b]


def total_loss(model: STPAM, trace: ForwardTrace, labels, gamma: Optional[float] = None) -> LossTerms:
    gamma = model.config.gamma if gamma is None else float(gamma)
    labels = np.asarray(labels)
    with trace.tape:
        lc = _ce_tensor(trace.probs, labels)
        ls = [_ce_tensor(p, labels) for p in trace.spatial_probs]
        lt = [_ce_tensor(p, labels) for p in trace.temporal_probs]
        main = lc
        for term in ls + lt:
            main = ad.add(main, term)
        kl_s = _kl_tensor(_pairs(model, trace.spatial_heat), spatial=True)
        kl_t = _kl_tensor(_pairs(model, trace.temporal_heat), spatial=False)
    vals = dict(
        lc=lc.item(),
        ls=float(sum(t.item() for t in ls)),
        lt=float(sum(t.item() for t in lt)),
        kl_s=kl_s.item() if kl_s is not None else 0.0,
        kl_t=kl_t.item() if kl_t is not None else 0.0,
    )
    total = vals["lc"] + vals["ls"] + vals["lt"] + gamma * (vals["kl_s"] + vals["kl_t"])
    return LossTerms(main, kl_s, kl_t, LossBreakdown(gamma=gamma, total=total, **vals))


def loss_gradients(model: STPAM, trace: ForwardTrace, labels,
                   gamma: Optional[float] = None) -> tuple[LossBreakdown, dict[str, np.ndarray]]:
    """Breakdown and d(total)/d(parameter) for every parameter, keyed by name.

    With ``kl_scope="gcn"`` the spatial penalty only reaches the spatial
    graph-convolution weights and the temporal penalty only the temporal ones;
    ``"all"`` differentiates the total through every path.
    """
    terms = total_loss(model, trace, labels, gamma)
    g = terms.breakdown.gamma
    params = model.parameters()
    names = list(params)
    tape = trace.tape
    if model.config.kl_scope == "all":
        root = terms.main
        with tape:
            for kl in (terms.kl_s, terms.kl_t):
                if kl is not None:
                    root = ad.add(root, ad.scale(kl, g))
        raw = tape.backward(root, wrt=[params[n] for n in names])
        return terms.breakdown, {n: raw[params[n]] for n in names}

    raw = tape.backward(terms.main, wrt=[params[n] for n in names])
    grads = {n: raw[params[n]] for n in names}
    if g != 0.0:
        for kl, experts in ((terms.kl_s, model.spatial), (terms.kl_t, model.temporal)):
            if kl is None:
                continue
            targets = {}
            for ex in experts:
                targets.update(ex.gcn.parameters())
            extra = tape.backward(kl, wrt=list(targets.values()))
            for name, t in targets.items():
                grads[name] = grads[name] + g * extra[t]
    return terms.breakdown, grads


class Adam:
    """Bias-corrected Adam; moments are keyed by parameter name."""

    def __init__(self, lr: float = 0.003, beta1: float = 0.9, beta2: float = 0.999,
                 eps: float = 1e-8, max_norm: Optional[float] = None):
        if lr <= 0:
            raise OptimizerError("learning rate must be positive")
        if not (0 <= beta1 < 1 and 0 <= beta2 < 1):
            raise OptimizerError("betas must lie in [0, 1)")
        if max_norm is not None and max_norm <= 0:
            raise OptimizerError("max_norm must be positive")
        self.lr, self.beta1, self.beta2, self.eps = lr, beta1, beta2, eps
        self.max_norm = max_norm
        self.step_count = 0
        self.m: dict[str, np.ndarray] = {}
        self.v: dict[str, np.ndarray] = {}

    def step(self, params: dict[str, Tensor], grads: dict[str, np.ndarray]) -> None:
        missing = [n for n in params if n not in grads]
        if missing:
            raise OptimizerError(f"no gradient for {', '.join(missing)}")
        for n, p in params.items():
            if grads[n].shape != p.shape:
                raise OptimizerError(f"gradient for {n} has shape {grads[n].shape}, expected {p.shape}")
        scale = 1.0
        if self.max_norm is not None:
            norm = np.sqrt(sum(float(np.sum(grads[n] ** 2)) for n in params))
            if norm > self.max_norm:
                scale = self.max_norm / norm
        self.step_count += 1
        t = self.step_count
        c1 = 1.0 - self.beta1 ** t
        c2 = 1.0 - self.beta2 ** t
        for n, p in params.items():
            g = grads[n] * scale if scale != 1.0 else grads[n]
            m = self.m.get(n)
            v = self.v.get(n)
            if m is None:
                m, v = np.zeros_like(p.data), np.zeros_like(p.data)
            m = self.beta1 * m + (1 - self.beta1) * g
            v = self.beta2 * v + (1 - self.beta2) * g * g
            self.m[n], self.v[n] = m, v
            p.data = p.data - self.lr * (m / c1) / (np.sqrt(v / c2) + self.eps)

    # checkpoint hooks

    def state_header(self) -> dict:
        return {"kind": "adam", "lr": self.lr, "beta1": self.beta1, "beta2": self.beta2,
                "eps": self.eps, "max_norm": self.max_norm, "step": self.step_count}

    def state_records(self) -> list[tuple[str, np.ndarray]]:
        out = []
        for n in sorted(self.m):
            out.append((f"adam.m/{n}", self.m[n]))
            out.append((f"adam.v/{n}", self.v[n]))
        return out

    def load_state(self, header: dict, records: dict[str, np.ndarray]) -> None:
        if header.get("kind") != "adam":
            raise OptimizerError("checkpoint holds no Adam state")
        self.lr, self.beta1, self.beta2 = header["lr"], header["beta1"], header["beta2"]
        self.eps, self.max_norm, self.step_count = header["eps"], header["max_norm"], int(header["step"])
        self.m, self.v = {}, {}
        for key, arr in records.items():
            if key.startswith("adam.m/"):
                self.m[key[7:]] = arr.copy()
            elif key.startswith("adam.v/"):
                self.v[key[7:]] = arr.copy()
        if set(self.m) != set(self.v):
            raise OptimizerError("first and second moments cover different parameters")
