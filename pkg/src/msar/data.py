"""Synthetic multi-speaker dataset: generation, manifests, feature prep.

Each utterance mixes J synthesized speakers (distinct harmonic bands, one
pitch per token) spatialized into C channels, plus white noise at a chosen
mixture SNR. Files per utterance: C mixture channels, J clean channel-0
reference images, and the noise image. The manifest is JSON lines; dataset
metadata (vocabulary, speaker profiles, generation config) sits alongside in
meta.json. Generation is byte-reproducible from the seed.
"""

from __future__ import annotations

import dataclasses
import json
from pathlib import Path

import numpy as np

from .backend import Vocabulary
from .dsp import (
    GlobalStats,
    RoomSpec,
    SpeakerProfile,
    Waveform,
    mix,
    raw_log_mel,
    spatialize,
    stft,
    synth_utterance,
    wpe,
)
from .errors import ConfigError, DataError

MANIFEST_NAME = "manifest.jsonl"
META_NAME = "meta.json"
SCHEMA_VERSION = 1

# (f0, per-token step) per speaker slot; bands stay clear of each other and
# of Nyquist after three harmonics and the pitch glide
_BAND_PLAN = [(220.0, 45.0), (2000.0, 55.0), (900.0, 42.0), (1400.0, 50.0)]


@dataclasses.dataclass
class DataConfig:
    num_utterances: int
    num_speakers: int = 2
    channels: int = 2
    vocab_size: int = 10
    room_mode: str = "anechoic"
    t60_range: tuple[float, float] = (0.2, 0.6)
    noise_snr_db: float = 20.0
    seed: int = 0
    min_tokens: int = 2
    max_tokens: int = 5

    def __post_init__(self):
        if self.num_speakers > len(_BAND_PLAN):
            raise ConfigError(f"at most {len(_BAND_PLAN)} speakers supported")
        if self.room_mode not in ("anechoic", "reverberant"):
            raise ConfigError(f"unknown room mode {self.room_mode!r}")
        if not 1 <= self.min_tokens <= self.max_tokens:
            raise ConfigError("need 1 <= min_tokens <= max_tokens")


def content_tokens(vocab_size: int) -> list[str]:
    if not 1 <= vocab_size <= 26:
        raise ConfigError("vocab_size must be in 1..26")
    return [chr(ord("a") + i) for i in range(vocab_size)]


def default_profiles(tokens: list[str], num_speakers: int) -> list[SpeakerProfile]:
    profiles = []
    for j in range(num_speakers):
        f0, step = _BAND_PLAN[j]
        profiles.append(SpeakerProfile(
            f0=f0, decay=0.5,
            token_offsets={t: step * i for i, t in enumerate(tokens)}))
    return profiles


def _room_for(config: DataConfig, rng: np.random.Generator, index: int) -> RoomSpec:
    j, c = config.num_speakers, config.channels
    delays = np.zeros((j, c), dtype=np.int64)
    decays = np.ones((j, c))
    for src in range(j):
        for ch in range(1, c):
            delays[src, ch] = int(rng.integers(1, 9))
            decays[src, ch] = float(rng.uniform(0.7, 0.95))
    t60 = None
    if config.room_mode == "reverberant":
        t60 = float(np.round(rng.uniform(*config.t60_range), 4))
    return RoomSpec(config.room_mode, delays=delays, decays=decays, t60=t60,
                    seed=int(config.seed * 100003 + index))


def generate_dataset(config: DataConfig, out_dir) -> Path:
    """Write WAVs plus manifest; returns the manifest path."""
    from .dsp import write_wav

    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    tokens = content_tokens(config.vocab_size)
    profiles = default_profiles(tokens, config.num_speakers)
    rng = np.random.default_rng(config.seed)
    lines = []
    for i in range(config.num_utterances):
        uid = f"utt{i:05d}"
        perm = rng.permutation(config.num_speakers)
        room = _room_for(config, rng, i)
        token_seqs = []
        images = []
        for j in range(config.num_speakers):
            n_tok = int(rng.integers(config.min_tokens, config.max_tokens + 1))
            seq = [tokens[int(k)] for k in rng.integers(0, len(tokens), size=n_tok)]
            token_seqs.append(seq)
            src = synth_utterance(seq, profiles[perm[j]])
            images.append(spatialize(src, room, j))
        noise_rng = np.random.default_rng((config.seed, 7919, i))
        snr = config.noise_snr_db if np.isfinite(config.noise_snr_db) else None
        mixture = mix(images, noise_snr_db=snr, rng=noise_rng)
        clean = mix(images)
        pad = mixture.num_samples - clean.num_samples
        noise = Waveform(mixture.sample_rate,
                         mixture.samples - np.pad(clean.samples, ((0, 0), (0, pad))))
        chan_files = []
        for c in range(config.channels):
            path = out / f"{uid}_ch{c}.wav"
            write_wav(path, Waveform(mixture.sample_rate, mixture.samples[c:c + 1]))
            chan_files.append(path.name)
        ref_files = []
        for j, im in enumerate(images):
            path = out / f"{uid}_spk{j}.wav"
            buf = np.zeros((1, mixture.num_samples))
            buf[0, : im.num_samples] = im.samples[0]
            write_wav(path, Waveform(mixture.sample_rate, buf))
            ref_files.append(path.name)
        noise_file = f"{uid}_noise.wav"
        write_wav(out / noise_file, Waveform(mixture.sample_rate, noise.samples[:1]))
        lines.append({
            "id": uid,
            "channels": chan_files,
            "refs": ref_files,
            "noise": noise_file,
            "tokens": token_seqs,
            "profiles": [int(p) for p in perm],
            "room": {"mode": room.mode,
                     "delays": room.delays.tolist(),
                     "decays": [[round(v, 6) for v in row] for row in room.decays.tolist()],
                     "t60": room.t60,
                     "seed": room.seed},
        })
    manifest = out / MANIFEST_NAME
    with open(manifest, "w") as fh:
        for line in lines:
            fh.write(json.dumps(line, sort_keys=True) + "\n")
    meta = {
        "schema_version": SCHEMA_VERSION,
        "config": dataclasses.asdict(config),
        "vocab": tokens,
        "profiles": [
            {"f0": p.f0, "decay": p.decay, "token_ms": p.token_ms, "glide": p.glide,
             "offsets": p.token_offsets} for p in profiles
        ],
    }
    with open(out / META_NAME, "w") as fh:
        json.dump(meta, fh, indent=2, sort_keys=True)
        fh.write("\n")
    return manifest


class Dataset:
    """Loaded manifest plus lazy audio access."""

    def __init__(self, root: Path, entries: list[dict], meta: dict):
        self.root = Path(root)
        self.entries = entries
        self.meta = meta
        self.vocab = Vocabulary.build(meta["vocab"])

    @classmethod
    def load(cls, data_dir) -> "Dataset":
        root = Path(data_dir)
        manifest = root / MANIFEST_NAME
        if not manifest.exists():
            raise DataError(f"no {MANIFEST_NAME} in {root}")
        entries = []
        with open(manifest) as fh:
            for ln, raw in enumerate(fh):
                try:
                    entries.append(json.loads(raw))
                except json.JSONDecodeError as e:
                    raise DataError(f"{manifest}:{ln + 1}: bad manifest line: {e}") from e
        with open(root / META_NAME) as fh:
            meta = json.load(fh)
        if meta.get("schema_version") != SCHEMA_VERSION:
            raise DataError(f"unsupported dataset schema {meta.get('schema_version')}")
        return cls(root, entries, meta)

    def __len__(self) -> int:
        return len(self.entries)

    @property
    def num_speakers(self) -> int:
        return int(self.meta["config"]["num_speakers"])

    @property
    def channels(self) -> int:
        return int(self.meta["config"]["channels"])

    def mixture(self, i: int) -> Waveform:
        from .dsp import read_wav

        entry = self.entries[i]
        waves = [read_wav(self.root / f) for f in entry["channels"]]
        return Waveform(waves[0].sample_rate, np.stack([w.samples[0] for w in waves]))

    def references(self, i: int) -> list[Waveform]:
        from .dsp import read_wav

        return [read_wav(self.root / f) for f in self.entries[i]["refs"]]

    def noise(self, i: int) -> Waveform:
        from .dsp import read_wav

        return read_wav(self.root / self.entries[i]["noise"])

    def token_ids(self, i: int) -> list[np.ndarray]:
        return [self.vocab.encode(seq) for seq in self.entries[i]["tokens"]]


def split_indices(n: int, dev_fraction: float, seed: int) -> tuple[list[int], list[int]]:
    order = list(np.random.default_rng((seed, 31337)).permutation(n))
    n_dev = max(1, int(round(n * dev_fraction))) if n > 1 and dev_fraction > 0 else 0
    return [int(i) for i in order[n_dev:]], [int(i) for i in order[:n_dev]]


def compute_stats(ds: Dataset, indices: list[int], n_mels: int) -> GlobalStats:
    """Global mean/variance from the clean single-speaker references."""
    feats = []
    for i in indices:
        for ref in ds.references(i):
            feats.append(raw_log_mel(stft(ref), n_mels=n_mels))
    if not feats:
        raise DataError("cannot compute normalization stats from an empty split")
    return GlobalStats.from_features(feats)


def _maybe_wpe(spec, wpe_cfg: dict | None):
    if not wpe_cfg or not wpe_cfg.get("enabled", False):
        return spec
    return wpe(spec, taps=int(wpe_cfg.get("taps", 10)),
               delay=int(wpe_cfg.get("delay", 3)), iters=int(wpe_cfg.get("iters", 3)))


def single_channel_items(ds: Dataset, indices: list[int], stats: GlobalStats,
                         n_mels: int, wpe_cfg: dict | None = None) -> list:
    """(features, reference ids) pairs from mixture channel 0."""
    from .dsp import log_mel_gmvn

    items = []
    for i in indices:
        m = ds.mixture(i)
        spec = stft(Waveform(m.sample_rate, m.samples[:1]))
        spec = _maybe_wpe(spec, wpe_cfg)
        feats = log_mel_gmvn(spec, n_mels=n_mels, stats=stats).data
        items.append((feats, ds.token_ids(i)))
    return items


def multi_channel_items(ds: Dataset, indices: list[int],
                        wpe_cfg: dict | None = None) -> list:
    """(spectrogram, reference ids) pairs over all channels."""
    items = []
    for i in indices:
        spec = _maybe_wpe(stft(ds.mixture(i)), wpe_cfg)
        items.append((spec, ds.token_ids(i)))
    return items


def pretrain_items(ds: Dataset, indices: list[int], stats: GlobalStats,
                   n_mels: int) -> list:
    """Clean single-speaker ([features], [reference]) pairs for backend warmup."""
    from .dsp import log_mel_gmvn

    items = []
    for i in indices:
        ids = ds.token_ids(i)
        for j, ref in enumerate(ds.references(i)):
            feats = log_mel_gmvn(stft(ref), n_mels=n_mels, stats=stats).data
            items.append(([feats], [ids[j]]))
    return items
