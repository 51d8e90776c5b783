"""Multi-source MVDR beamforming with oracle masks.

Two synthetic speakers in disjoint frequency bands are mixed on a two-mic
array. Binary dominance masks built from the clean references drive the
mask-weighted spatial covariance estimates, distortionless filters are solved
per frequency, and each speaker is extracted. SI-SNR quantifies how much the
beamformer buys over the raw mixture channel.
"""

import warnings

import numpy as np

from msar.dsp import RoomSpec, SpeakerProfile, istft, mix, si_snr, spatialize, stft, synth_utterance
from msar.dsp import ComplexSpectrogram
from msar.frontend import oracle_masks, separate_with_masks

SR = 16000
warnings.filterwarnings("ignore", message="all-zero mask")

low = SpeakerProfile(f0=250.0, decay=0.5,
                     token_offsets={t: 40.0 * i for i, t in enumerate("abcde")})
high = SpeakerProfile(f0=2100.0, decay=0.5,
                      token_offsets={t: 70.0 * i for i, t in enumerate("abcde")})
room = RoomSpec("anechoic", delays=[[0, 3], [0, 7]], decays=[[1.0, 0.85], [1.0, 0.8]])

images = [
    spatialize(synth_utterance(list("adbec"), low), room, 0),
    spatialize(synth_utterance(list("cbead"), high), room, 1),
]
mixture = mix(images, noise_snr_db=30.0, rng=np.random.default_rng(99))
print(f"mixture: {mixture.num_channels} channels, {mixture.num_samples / SR:.2f} s")

mix_spec = stft(mixture)
ref_mags = [np.abs(stft(im).data).mean(axis=2) for im in images]
masks = oracle_masks(ref_mags, None, mixture.num_channels)
print(f"oracle masks: {masks.shape} (T, F, C, sources), "
      f"speaker occupancy {masks[:, :, 0, 1:].mean(axis=(0, 1))}")

separated = separate_with_masks(mix_spec, masks, num_speakers=2, ref_channel=0)

for j, s_hat in enumerate(separated):
    wav = istft(ComplexSpectrogram(s_hat.data[:, :, None], win=400, hop=160, nfft=512))
    n = wav.num_samples
    lo_i, hi_i = 400, n - 400
    ref = images[j].samples[0][:n]
    before = si_snr(mixture.samples[0][:n][lo_i:hi_i], ref[lo_i:hi_i])
    after = si_snr(wav.samples[0][lo_i:hi_i], ref[lo_i:hi_i])
    print(f"speaker {j}: SI-SNR {before:+6.2f} dB -> {after:+6.2f} dB "
          f"(gain {after - before:+.2f} dB)")
