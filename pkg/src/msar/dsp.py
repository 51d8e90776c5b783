"""Signal layer: STFT analysis/synthesis, mel features, synthetic utterances,
spatialization and mixing, SI-SNR, and WPE dereverberation.

Audio is carried as float64 at 16 kHz. Spectrograms are complex128 arrays
indexed (frame, bin, channel). Everything here is pure given its inputs plus
an explicit seed, so utterance-level work parallelizes trivially.
"""

from __future__ import annotations

import dataclasses

import numpy as np
from scipy.io import wavfile

from .errors import ConfigError, ContractError, DataError
from .numerics import Tensor, log, matmul, _solve_loaded

DEFAULT_SAMPLE_RATE = 16000
LOG_FLOOR = 1e-10


@dataclasses.dataclass
class Waveform:
    """Multichannel audio: samples are (channels, length) float64."""

    sample_rate: int
    samples: np.ndarray

    def __post_init__(self):
        self.samples = np.atleast_2d(np.asarray(self.samples, dtype=np.float64))
        if self.samples.shape[1] == 0:
            raise DataError("waveform has zero length")
        if not np.all(np.isfinite(self.samples)):
            raise DataError("waveform contains non-finite samples")

    @property
    def num_channels(self) -> int:
        return self.samples.shape[0]

    @property
    def num_samples(self) -> int:
        return self.samples.shape[1]

    def channel(self, c: int) -> np.ndarray:
        return self.samples[c]

    def mono(self) -> np.ndarray:
        if self.num_channels != 1:
            raise ContractError(f"expected mono waveform, got {self.num_channels} channels")
        return self.samples[0]


@dataclasses.dataclass
class ComplexSpectrogram:
    """STFT values indexed (t, f, c) with the analysis parameters attached."""

    data: np.ndarray
    win: int
    hop: int
    nfft: int
    sample_rate: int = DEFAULT_SAMPLE_RATE

    def __post_init__(self):
        self.data = np.asarray(self.data, dtype=np.complex128)
        if self.data.ndim != 3:
            raise ContractError(f"spectrogram data must be (T,F,C), got {self.data.shape}")
        if self.data.shape[1] != self.nfft // 2 + 1:
            raise ContractError(
                f"bin count {self.data.shape[1]} inconsistent with nfft {self.nfft}")

    @property
    def num_frames(self) -> int:
        return self.data.shape[0]

    @property
    def num_bins(self) -> int:
        return self.data.shape[1]

    @property
    def num_channels(self) -> int:
        return self.data.shape[2]


def hann_periodic(win: int) -> np.ndarray:
    n = np.arange(win)
    return 0.5 - 0.5 * np.cos(2 * np.pi * n / win)


def stft(w: Waveform, win: int = 400, hop: int = 160, nfft: int = 512) -> ComplexSpectrogram:
    """Windowed rFFT frames, no centering: T = 1 + (length - win) // hop.

    Defaults give 25 ms periodic-Hann frames with 10 ms stride, zero-padded
    to 512 points, so 257 bins at 16 kHz.
    """
    if nfft < win:
        raise ContractError(f"nfft {nfft} must be >= window {win}")
    n = w.num_samples
    if n < win:
        raise DataError(f"signal of {n} samples is shorter than one window ({win})")
    t = 1 + (n - win) // hop
    window = hann_periodic(win)
    idx = hop * np.arange(t)[:, None] + np.arange(win)[None, :]
    out = np.empty((t, nfft // 2 + 1, w.num_channels), dtype=np.complex128)
    for c in range(w.num_channels):
        frames = w.samples[c][idx] * window
        out[:, :, c] = np.fft.rfft(frames, n=nfft, axis=1)
    return ComplexSpectrogram(out, win=win, hop=hop, nfft=nfft, sample_rate=w.sample_rate)


def istft(s: ComplexSpectrogram) -> Waveform:
    """Weighted overlap-add resynthesis with synthesis-window normalization.

    Interior samples (at least one window away from each edge) of
    istft(stft(x)) reproduce x to within 1e-10.
    """
    t, _, ch = s.data.shape
    window = hann_periodic(s.win)
    length = s.win + (t - 1) * s.hop
    out = np.zeros((ch, length))
    norm = np.zeros(length)
    frames_all = np.fft.irfft(s.data, n=s.nfft, axis=1)[:, : s.win, :]
    for ti in range(t):
        start = ti * s.hop
        norm[start:start + s.win] += window * window
    for c in range(ch):
        for ti in range(t):
            start = ti * s.hop
            out[c, start:start + s.win] += frames_all[ti, :, c] * window
    # samples with negligible window coverage would amplify spectral edits
    # through the division, so they fade to zero instead
    good = norm > 1e-3 * norm.max()
    out = np.where(good, out / np.where(good, norm, 1.0), 0.0)
    return Waveform(s.sample_rate, out)


# ---------------------------------------------------------------------------
# mel features


def hz_to_mel(f):
    return 2595.0 * np.log10(1.0 + np.asarray(f, dtype=np.float64) / 700.0)


def mel_to_hz(m):
    return 700.0 * (10.0 ** (np.asarray(m, dtype=np.float64) / 2595.0) - 1.0)


def mel_filterbank(n_mels: int = 80, nfft: int = 512,
                   sample_rate: int = DEFAULT_SAMPLE_RATE) -> np.ndarray:
    """Triangular filters on the HTK mel scale spanning 0..Nyquist, (n_mels, F)."""
    freqs = np.arange(nfft // 2 + 1) * sample_rate / nfft
    pts = mel_to_hz(np.linspace(0.0, hz_to_mel(sample_rate / 2), n_mels + 2))
    lower = (freqs[None, :] - pts[:-2, None]) / (pts[1:-1] - pts[:-2])[:, None]
    upper = (pts[2:, None] - freqs[None, :]) / (pts[2:] - pts[1:-1])[:, None]
    return np.maximum(0.0, np.minimum(lower, upper))


@dataclasses.dataclass
class GlobalStats:
    """Per-dimension mean and standard deviation from a training-corpus pass."""

    mean: np.ndarray
    std: np.ndarray

    @classmethod
    def from_features(cls, feats: list[np.ndarray]) -> "GlobalStats":
        stacked = np.concatenate([np.asarray(f) for f in feats], axis=0)
        return cls(mean=stacked.mean(axis=0), std=stacked.std(axis=0))

    @classmethod
    def identity(cls, dim: int) -> "GlobalStats":
        return cls(mean=np.zeros(dim), std=np.ones(dim))


def log_mel_from_mag(mag: Tensor, mel: np.ndarray, stats: GlobalStats) -> Tensor:
    """Differentiable log mel-filterbank energies with mean-variance scaling."""
    if np.any(stats.std == 0):
        raise DataError("normalization stats contain zero standard deviations")
    feats = log(matmul(mag, Tensor(mel.T)) + LOG_FLOOR)
    return (feats - Tensor(stats.mean)) * Tensor(1.0 / stats.std)


def log_mel_gmvn(s: ComplexSpectrogram, n_mels: int = 80,
                 stats: GlobalStats | None = None) -> Tensor:
    """Log mel features of a single-channel spectrogram, globally normalized."""
    if s.num_channels != 1:
        raise ContractError(f"expected single-channel spectrogram, got C={s.num_channels}")
    if stats is None:
        stats = GlobalStats.identity(n_mels)
    mel = mel_filterbank(n_mels=n_mels, nfft=s.nfft, sample_rate=s.sample_rate)
    return log_mel_from_mag(Tensor(np.abs(s.data[:, :, 0])), mel, stats)


def raw_log_mel(s: ComplexSpectrogram, n_mels: int = 80) -> np.ndarray:
    """Unnormalized log mel energies, used when accumulating corpus stats."""
    mel = mel_filterbank(n_mels=n_mels, nfft=s.nfft, sample_rate=s.sample_rate)
    return np.log(np.abs(s.data[:, :, 0]) @ mel.T + LOG_FLOOR)


# ---------------------------------------------------------------------------
# synthetic utterances and rooms


@dataclasses.dataclass
class SpeakerProfile:
    """Harmonic voice stand-in: each token maps to a distinct pitch offset.

    A small per-token pitch glide keeps the tones from being long-horizon
    predictable, which matters when dereverberation preprocessing runs on
    synthesized mixtures.
    """

    f0: float
    decay: float
    token_offsets: dict[str, float]
    token_ms: float = 150.0
    n_harmonics: int = 3
    edge_ms: float = 10.0
    glide: float = 0.06

    def __post_init__(self):
        offs = list(self.token_offsets.values())
        if len(set(offs)) != len(offs):
            raise ConfigError("token offsets must be distinct")


def synth_utterance(tokens: list[str], profile: SpeakerProfile,
                    sample_rate: int = DEFAULT_SAMPLE_RATE) -> Waveform:
    """Concatenated harmonic tones, one per token, with raised-cosine edges."""
    if not tokens:
        raise ContractError("cannot synthesize an empty token sequence")
    top = profile.f0 + max(profile.token_offsets.values())
    if top * profile.n_harmonics >= sample_rate / 2:
        raise ConfigError(
            f"highest harmonic {top * profile.n_harmonics:.0f} Hz exceeds Nyquist")
    n = int(round(profile.token_ms * sample_rate / 1000.0))
    edge = int(round(profile.edge_ms * sample_rate / 1000.0))
    env = np.ones(n)
    ramp = 0.5 - 0.5 * np.cos(np.pi * np.arange(edge) / edge)
    env[:edge] = ramp
    env[n - edge:] = ramp[::-1]
    amps = profile.decay ** np.arange(profile.n_harmonics)
    sweep = 1.0 - profile.glide / 2 + profile.glide * np.arange(n) / max(n - 1, 1)
    pieces = []
    for tok in tokens:
        if tok not in profile.token_offsets:
            raise DataError(f"token {tok!r} not in speaker vocabulary")
        f = profile.f0 + profile.token_offsets[tok]
        phase = 2 * np.pi * np.cumsum(f * sweep) / sample_rate
        sig = np.zeros(n)
        for h in range(profile.n_harmonics):
            sig += amps[h] * np.sin((h + 1) * phase)
        pieces.append(sig * env / amps.sum() * 0.5)
    return Waveform(sample_rate, np.concatenate(pieces)[None, :])


@dataclasses.dataclass
class RoomSpec:
    """Propagation model: integer sample delays and scalar decays per
    (source, channel); reverberant mode appends a seeded noise tail whose
    energy envelope matches the requested T60."""

    mode: str
    delays: np.ndarray
    decays: np.ndarray
    t60: float | None = None
    seed: int = 0
    tail_gain: float = 0.04

    def __post_init__(self):
        self.delays = np.asarray(self.delays, dtype=np.int64)
        self.decays = np.asarray(self.decays, dtype=np.float64)
        if self.mode not in ("anechoic", "reverberant"):
            raise ConfigError(f"unknown room mode {self.mode!r}")
        if np.any(self.delays < 0):
            raise ConfigError("delays must be nonnegative")
        if np.any(self.decays <= 0) or np.any(self.decays > 1):
            raise ConfigError("decays must lie in (0, 1]")
        if self.mode == "reverberant":
            if self.t60 is None or not 0.2 <= self.t60 <= 0.6:
                raise ConfigError("reverberant rooms need t60 in [0.2, 0.6] s")

    @property
    def num_channels(self) -> int:
        return self.delays.shape[1]


def room_impulse_response(room: RoomSpec, source_index: int, channel: int,
                          sample_rate: int = DEFAULT_SAMPLE_RATE) -> np.ndarray:
    """The impulse response spatialize() convolves with, for one channel."""
    delay = int(room.delays[source_index, channel])
    decay = float(room.decays[source_index, channel])
    if room.mode == "anechoic":
        rir = np.zeros(delay + 1)
        rir[delay] = decay
        return rir
    tail_len = int(1.2 * room.t60 * sample_rate)
    rir = np.zeros(delay + 1 + tail_len)
    rir[delay] = decay
    rng = np.random.default_rng((room.seed, source_index, channel))
    n = np.arange(tail_len)
    envelope = 10.0 ** (-3.0 * n / (sample_rate * room.t60))
    rir[delay + 1:] = room.tail_gain * decay * rng.standard_normal(tail_len) * envelope
    return rir


def _fft_convolve(x: np.ndarray, h: np.ndarray) -> np.ndarray:
    n = x.size + h.size - 1
    nfft = 1 << (n - 1).bit_length()
    return np.fft.irfft(np.fft.rfft(x, nfft) * np.fft.rfft(h, nfft), nfft)[:n]


def spatialize(src: Waveform, room: RoomSpec, source_index: int) -> Waveform:
    """Render a mono source at every microphone of the room."""
    mono = src.mono()
    if source_index >= room.delays.shape[0]:
        raise ConfigError(f"room has no entry for source {source_index}")
    chans = []
    for c in range(room.num_channels):
        rir = room_impulse_response(room, source_index, c, src.sample_rate)
        chans.append(_fft_convolve(mono, rir))
    length = max(ch.size for ch in chans)
    out = np.zeros((room.num_channels, length))
    for c, ch in enumerate(chans):
        out[c, : ch.size] = ch
    return Waveform(src.sample_rate, out)


def mix(sources: list[Waveform], noise_snr_db: float | None = None,
        rng: np.random.Generator | None = None) -> Waveform:
    """Sum sources (zero-padded to the longest) plus white noise at the
    requested mixture-to-noise ratio; None disables the noise term."""
    if not sources:
        raise ContractError("mix needs at least one source")
    chans = sources[0].num_channels
    rate = sources[0].sample_rate
    for s in sources:
        if s.num_channels != chans or s.sample_rate != rate:
            raise ContractError("sources must share channel count and sample rate")
    length = max(s.num_samples for s in sources)
    out = np.zeros((chans, length))
    for s in sources:
        out[:, : s.num_samples] += s.samples
    if noise_snr_db is not None and np.isfinite(noise_snr_db):
        if rng is None:
            raise ContractError("mixing with noise requires an explicit rng")
        p_mix = np.mean(out ** 2)
        p_noise = p_mix / (10.0 ** (noise_snr_db / 10.0))
        out = out + rng.standard_normal(out.shape) * np.sqrt(p_noise)
    return Waveform(rate, out)


def si_snr(est: np.ndarray, ref: np.ndarray, clamp_db: float = 80.0) -> float:
    """Scale-invariant SNR in dB: project est onto ref, compare energies."""
    est = np.asarray(est, dtype=np.float64).reshape(-1)
    ref = np.asarray(ref, dtype=np.float64).reshape(-1)
    if est.shape != ref.shape:
        raise ContractError(f"length mismatch: {est.shape} vs {ref.shape}")
    ref_pow = float(ref @ ref)
    if ref_pow == 0.0:
        raise DataError("reference signal is identically zero")
    target = (est @ ref) / ref_pow * ref
    resid = est - target
    p_t = float(target @ target)
    p_r = float(resid @ resid)
    if p_r <= p_t * 10.0 ** (-clamp_db / 10.0):
        return clamp_db
    if p_t == 0.0:
        return -clamp_db
    return float(np.clip(10.0 * np.log10(p_t / p_r), -clamp_db, clamp_db))


# ---------------------------------------------------------------------------
# WPE dereverberation


def _stack_delayed(y: np.ndarray, taps: int, delay: int) -> np.ndarray:
    """Past observations per frame: (F, C*taps, T), zero-padded at the start."""
    f, c, t = y.shape
    out = np.zeros((f, c * taps, t), dtype=y.dtype)
    for k in range(taps):
        d = delay + k
        if d < t:
            out[:, k * c:(k + 1) * c, d:] = y[:, :, : t - d]
    return out


def wpe(s: ComplexSpectrogram, taps: int = 10, delay: int = 3, iters: int = 3,
        return_history: bool = False):
    """Blind dereverberation by multichannel linear prediction.

    Per frequency and iteration: estimate the time-varying variance as the
    channel-mean squared magnitude of the current estimate (floored at
    1e-10), solve the variance-weighted normal equations for prediction
    filters over frames t-delay-taps+1 .. t-delay, and subtract the
    prediction. The weighted prediction-error objective is non-increasing
    across iterations; pass return_history=True to get it per iteration.
    """
    t = s.num_frames
    if t <= taps + delay:
        raise DataError(f"need more than taps+delay={taps + delay} frames, got {t}")
    y = np.ascontiguousarray(s.data.transpose(1, 2, 0))  # (F, C, T)
    c = y.shape[1]
    y_past = _stack_delayed(y, taps, delay)
    x = y
    history = []
    for _ in range(iters):
        lam = np.maximum(np.mean(np.abs(x) ** 2, axis=1), LOG_FLOOR)  # (F, T)
        w = 1.0 / lam
        r = np.einsum("fmt,fnt,ft->fmn", y_past, np.conj(y_past), w)
        p = np.einsum("fmt,fnt,ft->fmn", y_past, np.conj(y), w)
        if np.abs(r).max() == 0.0:
            g = np.zeros_like(p)
        else:
            r = 0.5 * (r + np.conj(np.swapaxes(r, -1, -2)))
            g = _solve_loaded(r, p)
        x = y - np.einsum("fmc,fmt->fct", np.conj(g), y_past)
        history.append(float(np.sum(np.abs(x) ** 2 / lam[:, None, :]) + c * np.sum(np.log(lam))))
    out = ComplexSpectrogram(x.transpose(2, 0, 1).copy(), win=s.win, hop=s.hop,
                             nfft=s.nfft, sample_rate=s.sample_rate)
    if return_history:
        return out, history
    return out


# ---------------------------------------------------------------------------
# WAV files: PCM 16-bit or IEEE float-32, little-endian


def write_wav(path, w: Waveform, fmt: str = "float32") -> None:
    data = w.samples.T
    if data.shape[1] == 1:
        data = data[:, 0]
    if fmt == "float32":
        wavfile.write(path, w.sample_rate, data.astype(np.float32))
    elif fmt == "pcm16":
        clipped = np.clip(data, -1.0, 1.0 - 1.0 / 32768)
        wavfile.write(path, w.sample_rate, np.round(clipped * 32768).astype(np.int16))
    else:
        raise ConfigError(f"unsupported wav format {fmt!r}")


def read_wav(path) -> Waveform:
    rate, data = wavfile.read(path)
    if data.dtype == np.int16:
        samples = data.astype(np.float64) / 32768.0
    elif data.dtype in (np.float32, np.float64):
        samples = data.astype(np.float64)
    else:
        raise DataError(f"unsupported wav sample format {data.dtype} in {path}")
    if samples.ndim == 1:
        samples = samples[None, :]
    else:
        samples = samples.T
    return Waveform(rate, samples)
