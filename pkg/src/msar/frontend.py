"""Mask-based multi-source MVDR neural beamformer.

The chain is: a monaural masking network with time-restricted self-attention
estimates per-source masks on every channel, mask-weighted spatial
covariance (PSD) matrices are accumulated per frequency, MVDR filters are
solved against the summed interference (noise counts as source 0), the
mixture is beamformed per speaker, and log-mel features come out the other
end. Every step runs on the autodiff tape, so losses computed downstream
differentiate back into the masking network.

Time resolution is preserved throughout: T frames in, T frames out.
"""

from __future__ import annotations

import dataclasses
import warnings

import numpy as np

from .attention import AttentionConfig, EncoderLayer, Linear
from .dsp import ComplexSpectrogram, GlobalStats, LOG_FLOOR, log_mel_from_mag, mel_filterbank
from .errors import ContractError, ShapeError
from .numerics import (
    Tensor,
    absolute,
    concat,
    conj,
    diagonal_last2,
    einsum,
    real,
    relu,
    reshape,
    sigmoid,
    softmax,
    solve_hermitian,
    take_rows,
    tmean,
    trace_last2,
    transpose,
    tsum,
    where,
)

MASK_EPS = 1e-10
TRACE_RTOL = 1e-12


@dataclasses.dataclass
class FrontendConfig:
    """Masking-network and beamformer geometry. Sources are the J speakers
    plus noise as source 0, so the network emits J+1 masks per bin."""

    num_speakers: int = 2
    num_bins: int = 257
    d_att: int = 256
    n_heads: int = 4
    d_ff: int = 768
    n_layers: int = 3
    window: tuple[int, int] | None = (14, 15)
    n_mels: int = 80
    ref_mode: str = "fixed"
    ref_channel: int = 0
    dropout: float = 0.0

    def __post_init__(self):
        if self.num_speakers < 1:
            raise ContractError("need at least one speaker")
        if self.ref_mode not in ("fixed", "attention"):
            raise ContractError(f"unknown reference mode {self.ref_mode!r}")


class MaskNet:
    """Monaural masking network: each channel runs independently through an
    input projection, banded encoder layers, and a sigmoid output head."""

    def __init__(self, config: FrontendConfig, rng: np.random.Generator):
        self.config = config
        att = AttentionConfig(d_att=config.d_att, n_heads=config.n_heads,
                              d_ff=config.d_ff, window=config.window,
                              dropout=config.dropout)
        self.in_proj = Linear(config.num_bins, config.d_att, rng)
        self.layers = [EncoderLayer(att, rng) for _ in range(config.n_layers)]
        self.out_proj = Linear(config.d_att, config.num_bins * (config.num_speakers + 1), rng)

    def __call__(self, x: np.ndarray, rng: np.random.Generator | None = None) -> Tensor:
        """Masks of shape (T, F, C, J+1) in [0, 1] from complex STFT data."""
        if x.ndim != 3 or x.shape[1] != self.config.num_bins:
            raise ShapeError(f"expected (T, {self.config.num_bins}, C) input, got {x.shape}")
        t, f, c = x.shape
        j1 = self.config.num_speakers + 1
        per_channel = []
        for ci in range(c):
            h = self.in_proj(Tensor(np.log(np.abs(x[:, :, ci]) + LOG_FLOOR)))
            for layer in self.layers:
                h = layer(h, rng=rng)
            m = sigmoid(self.out_proj(h))
            per_channel.append(reshape(m, (t, f, 1, j1)))
        return concat(per_channel, axis=2)

    def parameters(self, prefix: str = "masknet") -> dict[str, Tensor]:
        out = self.in_proj.parameters(f"{prefix}.in")
        for i, layer in enumerate(self.layers):
            out.update(layer.parameters(f"{prefix}.enc{i}"))
        out.update(self.out_proj.parameters(f"{prefix}.out"))
        return out


def estimate_psd(x, masks, return_degenerate: bool = False):
    """Mask-weighted spatial covariance per source and frequency.

    ``x`` is (T, F, C) complex STFT data, ``masks`` is (T, F, C, J+1); the
    channel-mean mask weights the outer products x x^H, normalized by the
    mask sum over time. All-zero (source, bin) masks fall back to a uniform
    epsilon weighting (the empirical covariance) with a warning. The result
    is (J+1, F, C, C), symmetrized to be exactly Hermitian; with
    ``return_degenerate`` the (F, J+1) map of rescued bins comes along.
    """
    x = x if isinstance(x, Tensor) else Tensor(x)
    masks = masks if isinstance(masks, Tensor) else Tensor(masks)
    if masks.shape[:3] != x.shape:
        raise ShapeError(f"mask shape {masks.shape} does not match input {x.shape}")
    m_bar = tmean(masks, axis=2)  # (T, F, J+1)
    sums = m_bar.data.sum(axis=0)  # (F, J+1)
    degenerate = sums == 0.0
    if np.any(degenerate):
        warnings.warn("all-zero mask for some (source, bin); using uniform epsilon fallback")
        rescue = np.where(degenerate, MASK_EPS, 0.0)[None, :, :]
        m_bar = m_bar + Tensor(np.broadcast_to(rescue, m_bar.shape).copy())
    num = einsum("tfj,tfc,tfd->jfcd", m_bar, x, conj(x))
    denom = transpose(tsum(m_bar, axis=0), (1, 0))  # (J+1, F)
    j1, f = denom.shape
    psd = num / reshape(denom, (j1, f, 1, 1))
    psd = 0.5 * (psd + conj(transpose(psd, (0, 1, 3, 2))))
    if return_degenerate:
        return psd, degenerate
    return psd


def mvdr_filter(psds: Tensor, speaker: int, u: Tensor) -> Tensor:
    """Distortionless filters (F, C) for one speaker.

    Implements g = (N^-1 Phi / Tr(N^-1 Phi)) u per frequency, where N sums
    the PSDs of every other source including the noise. Bins whose trace
    magnitude vanishes relative to the solved matrix fall back to u itself.
    """
    j1 = psds.shape[0]
    if not 1 <= speaker <= j1 - 1:
        raise ContractError(f"speaker index {speaker} outside 1..{j1 - 1}")
    phi_j = reshape(take_rows(psds, np.array([speaker])), psds.shape[1:])
    interference = tsum(psds, axis=0) - phi_j
    m = solve_hermitian(interference, phi_j)  # (F, C, C)
    tr = trace_last2(m)  # (F,)
    scale = np.abs(m.data).max(axis=(-2, -1))
    bad = np.abs(tr.data) < TRACE_RTOL * np.maximum(scale, 1.0)
    if np.any(bad):
        warnings.warn(f"{int(bad.sum())} bins with vanishing trace; passing reference through")
    tr_safe = where(bad, Tensor(np.ones_like(tr.data)), tr)
    g = einsum("fcd,d->fc", m, u * (1 + 0j)) / reshape(tr_safe, (tr.shape[0], 1))
    u_rows = reshape(u * (1 + 0j), (1, u.shape[0]))
    return where(bad[:, None], u_rows, g)


class ReferenceScorer:
    """Two-layer scorer mapping per-channel PSD summaries to softmax weights."""

    def __init__(self, num_speakers: int, hidden: int, rng: np.random.Generator):
        self.lin1 = Linear(num_speakers, hidden, rng)
        self.lin2 = Linear(hidden, 1, rng)

    def __call__(self, feats: Tensor) -> Tensor:
        h = relu(self.lin1(feats))
        scores = reshape(self.lin2(h), (feats.shape[0],))
        return softmax(scores, axis=0)

    def parameters(self, prefix: str) -> dict[str, Tensor]:
        return {**self.lin1.parameters(f"{prefix}.1"), **self.lin2.parameters(f"{prefix}.2")}


def select_reference(psds: Tensor, mode: str = "fixed", channel: int = 0,
                     scorer: ReferenceScorer | None = None) -> Tensor:
    """Reference-microphone weights u: nonnegative, summing to one.

    Fixed mode returns a one-hot vector. Attention mode scores each channel
    from its average speaker-PSD diagonal (scale-normalized across channels,
    so u is invariant to input gain) through a small learned scorer.
    """
    c = psds.shape[-1]
    if mode == "fixed":
        if channel >= c:
            raise ContractError(f"reference channel {channel} >= C = {c}")
        u = np.zeros(c)
        u[channel] = 1.0
        return Tensor(u)
    if mode != "attention":
        raise ContractError(f"unknown reference mode {mode!r}")
    if scorer is None:
        raise ContractError("attention reference mode needs a scorer")
    j1 = psds.shape[0]
    diag = real(diagonal_last2(psds))  # (J+1, F, C)
    speaker_diag = take_rows(diag, np.arange(1, j1))
    feats = transpose(tmean(speaker_diag, axis=1), (1, 0))  # (C, J)
    norm = tmean(feats, axis=0, keepdims=True) + 1e-30
    return scorer(feats / norm)


def beamform(x, filters: Tensor) -> Tensor:
    """Apply one speaker's filters: s_hat[t, f] = g(f)^H x[t, f]."""
    x = x if isinstance(x, Tensor) else Tensor(x)
    if x.shape[1:] != (filters.shape[0], filters.shape[1]):
        raise ShapeError(f"filters {filters.shape} do not match input {x.shape}")
    return einsum("fc,tfc->tf", conj(filters), x)


def oracle_masks(ref_mags: list[np.ndarray], noise_mag: np.ndarray | None,
                 num_channels: int) -> np.ndarray:
    """Binary dominance masks (T, F, C, J+1) from reference magnitudes.

    Each (t, f) cell is assigned entirely to its strongest source; noise is
    source 0 and receives whatever no speaker dominates.
    """
    stack = [noise_mag if noise_mag is not None else np.zeros_like(ref_mags[0])]
    stack.extend(ref_mags)
    mags = np.stack(stack, axis=-1)  # (T, F, J+1)
    winner = mags.argmax(axis=-1)
    masks = (winner[:, :, None] == np.arange(mags.shape[-1])[None, None, :]).astype(np.float64)
    return np.repeat(masks[:, :, None, :], num_channels, axis=2)


def separate_with_masks(spec: ComplexSpectrogram, masks, num_speakers: int,
                        ref_mode: str = "fixed", ref_channel: int = 0,
                        scorer: ReferenceScorer | None = None) -> list[Tensor]:
    """Beamformed (T, F) spectrograms per speaker from given masks.

    Bins whose mask for a speaker summed to exactly zero carry no
    information about that speaker; the ratio-normalized PSD fallback would
    pass the mixture through, so those bins are zeroed in that speaker's
    output instead. Sigmoid masks never hit this path.
    """
    psds, degenerate = estimate_psd(spec.data, masks, return_degenerate=True)
    u = select_reference(psds, ref_mode, ref_channel, scorer)
    out = []
    for j in range(1, num_speakers + 1):
        g = mvdr_filter(psds, j, u)
        s_hat = beamform(spec.data, g)
        if degenerate[:, j].any():
            keep = (~degenerate[:, j]).astype(np.float64)
            s_hat = s_hat * Tensor(keep[None, :])
        out.append(s_hat)
    return out


class Frontend:
    """Masking network plus beamformer plus feature extraction, end to end."""

    def __init__(self, config: FrontendConfig, rng: np.random.Generator,
                 stats: GlobalStats | None = None):
        self.config = config
        self.mask_net = MaskNet(config, rng)
        self.scorer = None
        if config.ref_mode == "attention":
            self.scorer = ReferenceScorer(config.num_speakers, hidden=16, rng=rng)
        self.stats = stats if stats is not None else GlobalStats.identity(config.n_mels)
        self._mel = None
        self._mel_key = None

    def mel(self, spec: ComplexSpectrogram) -> np.ndarray:
        key = (spec.nfft, spec.sample_rate)
        if self._mel_key != key:
            self._mel = mel_filterbank(self.config.n_mels, spec.nfft, spec.sample_rate)
            self._mel_key = key
        return self._mel

    def separate(self, spec: ComplexSpectrogram, masks=None,
                 rng: np.random.Generator | None = None) -> list[Tensor]:
        """Beamformed spectrograms (T, F) per speaker, on the tape."""
        if masks is None:
            masks = self.mask_net(spec.data, rng=rng)
        return separate_with_masks(spec, masks, self.config.num_speakers,
                                   self.config.ref_mode, self.config.ref_channel,
                                   self.scorer)

    def __call__(self, spec: ComplexSpectrogram, masks=None,
                 rng: np.random.Generator | None = None) -> list[Tensor]:
        """Per-speaker normalized log-mel features (T, n_mels)."""
        mel = self.mel(spec)
        feats = []
        for s_hat in self.separate(spec, masks=masks, rng=rng):
            feats.append(log_mel_from_mag(absolute(s_hat), mel, self.stats))
        return feats

    def parameters(self, prefix: str = "frontend") -> dict[str, Tensor]:
        out = self.mask_net.parameters(f"{prefix}.masknet")
        if self.scorer is not None:
            out.update(self.scorer.parameters(f"{prefix}.ref"))
        return out
