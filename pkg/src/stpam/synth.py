"""Seeded RSVP EEG simulator with a planted parietal P300 on target images."""

from __future__ import annotations

from dataclasses import asdict, dataclass, replace
from typing import Iterator, Optional

import numpy as np

from .graph import ElectrodeLayout, LayoutError, biosemi64
from .pipeline import Dataset, PreprocessConfig, RawRecording, balance, preprocess


class SynthConfigError(ValueError):
    pass


@dataclass(frozen=True)
class SynthConfig:
    fs: float = 1024.0
    images_per_trial: int = 45
    rate: float = 5.0                    # images per second
    targets_min: int = 2
    targets_max: int = 4
    trials: int = 40
    p300_amplitude: float = 1.0
    latency_mean: float = 0.400          # s after image onset
    latency_jitter: float = 0.060        # std, s
    p300_width: float = 0.300            # s, full support of the half-cosine
    p300_center: str = "Pz"
    p300_spread: float = 0.55            # Gaussian width over chord distance on the unit sphere
    evr_amplitude: float = 0.5           # early visual response on every image
    noise_amplitude: float = 1.0         # std of each channel's pink noise
    noise_exponent: float = 1.0          # power ~ 1/f^exponent
    alpha_amplitude: float = 1.0
    alpha_freq: float = 10.0
    lead_in: float = 0.5                 # s before the first image
    tail: float = 1.0                    # s after the last image, so its epoch fits
    seed: int = 0

    def __post_init__(self):
        if self.images_per_trial < 1 or self.trials < 0:
            raise SynthConfigError("need at least one image per trial and a nonnegative trial count")
        if not 0 <= self.targets_min <= self.targets_max <= self.images_per_trial:
            raise SynthConfigError("targets range must satisfy 0 <= min <= max <= images")
        if self.rate <= 0 or self.fs <= 0:
            raise SynthConfigError("rate and fs must be positive")
        if self.tail < 1.0:
            raise SynthConfigError("the tail must hold a full 1 s epoch after the last image")
        if self.latency_jitter < 0 or self.p300_width <= 0:
            raise SynthConfigError("jitter must be nonnegative and the bump width positive")
        if self.latency_mean + 3 * self.latency_jitter >= 1.0:
            raise SynthConfigError("latency mean + 3 jitter must stay inside the 1 s epoch")

    @property
    def trial_seconds(self) -> float:
        return self.lead_in + self.images_per_trial / self.rate + self.tail

    def to_dict(self) -> dict:
        return asdict(self)


PRESETS = {
    "public-like": dict(latency_mean=0.400, latency_jitter=0.020, p300_amplitude=1.0),
    "ired-like": dict(latency_mean=0.450, latency_jitter=0.080, p300_amplitude=0.6,
                      noise_amplitude=0.25, alpha_amplitude=0.25),
}


def preset(name: str, **overrides) -> SynthConfig:
    try:
        params = PRESETS[name]
    except KeyError:
        raise SynthConfigError(f"unknown preset {name!r}; choose from {sorted(PRESETS)}") from None
    return replace(SynthConfig(), **{**params, **overrides})


# ---------------------------------------------------------------------------
# signal components


def pink_noise(rng: np.random.Generator, shape: tuple[int, ...], exponent: float = 1.0) -> np.ndarray:
    """Unit-variance noise along the last axis with power spectrum ~ 1/f^exponent."""
    n = shape[-1]
    freqs = np.fft.rfftfreq(n)
    scale = np.zeros_like(freqs)
    scale[1:] = freqs[1:] ** (-exponent / 2)
    spec = (rng.standard_normal(shape[:-1] + (len(freqs),))
            + 1j * rng.standard_normal(shape[:-1] + (len(freqs),))) * scale
    x = np.fft.irfft(spec, n=n, axis=-1)
    x -= x.mean(axis=-1, keepdims=True)
    return x / x.std(axis=-1, keepdims=True)


def half_cosine(t: np.ndarray, center: float, width: float) -> np.ndarray:
    """cos(pi (t - center) / width) on |t - center| < width / 2, zero elsewhere."""
    u = (t - center) / width
    return np.where(np.abs(u) < 0.5, np.cos(np.pi * u), 0.0)


def scalp_weights(layout: ElectrodeLayout, center: str, spread: float) -> np.ndarray:
    try:
        c = layout.positions[layout.index(center)]
    except LayoutError:
        raise SynthConfigError(f"layout has no channel {center!r}") from None
    d = np.linalg.norm(layout.positions - c, axis=1)
    return np.exp(-d ** 2 / (2 * spread ** 2))


def _occipital_weights(layout: ElectrodeLayout) -> np.ndarray:
    # the back of the head is -y; weight rises smoothly toward it
    y = layout.positions[:, 1]
    return np.clip(-y, 0.0, None) ** 2 + 0.05


def _evr_shape(t: np.ndarray) -> np.ndarray:
    """P1/N1-like complex at about 100 and 170 ms."""
    return half_cosine(t, 0.100, 0.060) - 1.2 * half_cosine(t, 0.170, 0.080)


# ---------------------------------------------------------------------------
# generation


def _trial(cfg: SynthConfig, layout: ElectrodeLayout, index: int, p300_w: np.ndarray,
           occ_w: np.ndarray) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    rng = np.random.default_rng([cfg.seed, index])
    C = len(layout)
    n = int(round(cfg.trial_seconds * cfg.fs))
    t = np.arange(n) / cfg.fs

    data = cfg.noise_amplitude * pink_noise(rng, (C, n), cfg.noise_exponent)
    phase = rng.uniform(0, 2 * np.pi)
    envelope = 1.0 + 0.3 * pink_noise(rng, (n,), 2.0)
    data += cfg.alpha_amplitude * np.outer(occ_w, envelope * np.sin(2 * np.pi * cfg.alpha_freq * t + phase))

    K = cfg.images_per_trial
    onsets = np.round((cfg.lead_in + np.arange(K) / cfg.rate) * cfg.fs).astype(np.int64)
    n_targets = int(rng.integers(cfg.targets_min, cfg.targets_max + 1))
    labels = np.zeros(K, dtype=np.int64)
    labels[rng.choice(K, size=n_targets, replace=False)] = 1

    # responses only reach about a second past onset
    span = int(cfg.fs)
    local = np.arange(span) / cfg.fs
    evr = _evr_shape(local)
    for onset, lab in zip(onsets, labels):
        stop = min(n, onset + span)
        seg = slice(onset, stop)
        data[:, seg] += cfg.evr_amplitude * np.outer(occ_w, evr[:stop - onset])
        if lab:
            latency = cfg.latency_mean + cfg.latency_jitter * rng.standard_normal()
            bump = half_cosine(local, latency, cfg.p300_width)
            data[:, seg] += cfg.p300_amplitude * np.outer(p300_w, bump[:stop - onset])
    return data, onsets, labels


def generate_trials(cfg: SynthConfig, layout: Optional[ElectrodeLayout] = None) -> Iterator[RawRecording]:
    """One recording per trial; trial ``i`` depends only on (seed, i)."""
    layout = layout or biosemi64()
    p300_w = scalp_weights(layout, cfg.p300_center, cfg.p300_spread)
    occ_w = _occipital_weights(layout)
    for i in range(cfg.trials):
        data, onsets, labels = _trial(cfg, layout, i, p300_w, occ_w)
        yield RawRecording(data, cfg.fs, layout.names, onsets, labels, subject=f"synth-{cfg.seed}")


def generate(cfg: SynthConfig, layout: Optional[ElectrodeLayout] = None) -> RawRecording:
    """All trials back to back as one continuous recording."""
    parts = list(generate_trials(cfg, layout))
    if not parts:
        layout = layout or biosemi64()
        return RawRecording(np.zeros((len(layout), 0)), cfg.fs, layout.names, [], [], f"synth-{cfg.seed}")
    offsets = np.cumsum([0] + [p.data.shape[1] for p in parts[:-1]])
    return RawRecording(np.concatenate([p.data for p in parts], axis=1), cfg.fs, parts[0].channel_names,
                        np.concatenate([p.onsets + o for p, o in zip(parts, offsets)]),
                        np.concatenate([p.labels for p in parts]), parts[0].subject)


def synth_dataset(cfg: SynthConfig, layout: Optional[ElectrodeLayout] = None,
                  pre: PreprocessConfig = PreprocessConfig(), balanced: bool = False) -> Dataset:
    """Generate and preprocess trial by trial, so memory stays bounded by one trial."""
    parts = []
    offset = 0
    for rec in generate_trials(cfg, layout):
        ds, _ = preprocess(rec, pre)
        ds.onsets = [o + offset for o in ds.onsets]     # positions in the back-to-back recording
        offset += rec.data.shape[1]
        parts.append(ds)
    if not parts:
        raise SynthConfigError("no trials to generate")
    ds = Dataset.concat(parts)
    ds.provenance = {"synth": cfg.to_dict(), **parts[0].provenance}
    if balanced:
        ds = ds.take(balance(ds.y, cfg.seed))
        ds.provenance["balanced"] = True
    return ds


def benchmark_split(cfg: SynthConfig, n_train: int, n_test: int, layout: Optional[ElectrodeLayout] = None,
                    pre: PreprocessConfig = PreprocessConfig()) -> tuple[Dataset, Dataset]:
    """Balanced train/test sets of exactly the requested sizes.

    Trials are generated until there are enough targets for a 50/50 class mix;
    ``cfg.trials`` is ignored. Both splits are stratified and disjoint.
    """
    if n_train % 2 or n_test % 2:
        raise SynthConfigError("balanced splits need even sizes")
    need = (n_train + n_test) // 2
    mean_targets = (cfg.targets_min + cfg.targets_max) / 2
    if mean_targets <= 0:
        raise SynthConfigError("configuration produces no targets")
    trials = int(np.ceil(need / mean_targets))
    while True:
        ds = synth_dataset(replace(cfg, trials=trials), layout, pre)
        if int(ds.y.sum()) >= need and int((ds.y == 0).sum()) >= need:
            break
        trials = int(trials * 1.1) + 1
    rng = np.random.default_rng([cfg.seed, 1])
    tr, te = [], []
    for cls in (0, 1):
        idx = rng.permutation(np.flatnonzero(ds.y == cls))[:need]
        tr.append(idx[:n_train // 2])
        te.append(idx[n_train // 2:])
    return ds.take(np.sort(np.concatenate(tr))), ds.take(np.sort(np.concatenate(te)))
