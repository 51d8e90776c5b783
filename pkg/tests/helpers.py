"""Shared oracles for the test suite.

These stay deliberately independent of the library code paths they check:
finite differences for gradients, plain loops for contractions.
"""

import numpy as np

from msar.numerics import DiffGraph, Tensor, backward


def finite_difference(f, x: np.ndarray, h: float = 1e-6) -> np.ndarray:
    """Central finite differences of a scalar function at x."""
    g = np.zeros_like(x, dtype=np.float64)
    flat = x.reshape(-1)
    gf = g.reshape(-1)
    for i in range(flat.size):
        orig = flat[i]
        flat[i] = orig + h
        fp = f(x)
        flat[i] = orig - h
        fm = f(x)
        flat[i] = orig
        gf[i] = (fp - fm) / (2 * h)
    return g


def autodiff_grad(build_loss, x: np.ndarray) -> np.ndarray:
    """Gradient of build_loss(Tensor) via the tape, as a plain array."""
    t = Tensor(x.copy(), requires_grad=True)
    with DiffGraph() as g:
        loss = build_loss(t)
    backward(loss, g)
    return t.grad.copy()


def check_gradient(build_loss, x: np.ndarray, rtol: float = 1e-5, h: float = 1e-6):
    """Assert tape gradient matches central finite differences."""
    got = autodiff_grad(build_loss, x)
    want = finite_difference(lambda a: build_loss(Tensor(a)).item(), x.copy(), h=h)
    scale = np.maximum(np.abs(want), 1e-3)
    err = np.abs(got - want) / scale
    assert err.max() < rtol, f"gradient mismatch: max rel err {err.max():.3e}"


def check_param_gradient(build_loss, param, rtol: float = 1e-5, h: float = 1e-6,
                         sample: int = 12, seed: int = 0):
    """Finite-difference check of d loss / d param on a sample of entries.

    Also insists the loss actually depends on the parameter, so a structurally
    severed gradient cannot pass as all-zeros-vs-all-zeros.
    """
    param.grad = None
    with DiffGraph() as g:
        loss = build_loss()
    backward(loss, g)
    got = param.grad.copy()
    flat = param.data.reshape(-1)
    rng = np.random.default_rng(seed)
    idx = rng.choice(flat.size, size=min(sample, flat.size), replace=False)
    max_want = 0.0
    for i in idx:
        orig = flat[i]
        flat[i] = orig + h
        fp = build_loss().item()
        flat[i] = orig - h
        fm = build_loss().item()
        flat[i] = orig
        want = (fp - fm) / (2 * h)
        max_want = max(max_want, abs(want))
        err = abs(got.reshape(-1)[i] - want) / max(abs(want), 1e-3)
        assert err < rtol, f"param grad mismatch at {i}: {got.reshape(-1)[i]} vs {want}"
    assert max_want > 1e-9, "loss appears insensitive to this parameter"


def matmul_loops(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    """Naive triple-loop matrix product."""
    m, k = a.shape
    k2, n = b.shape
    assert k == k2
    out = np.zeros((m, n))
    for i in range(m):
        for j in range(n):
            acc = 0.0
            for p in range(k):
                acc += a[i, p] * b[p, j]
            out[i, j] = acc
    return out


def two_speaker_mixture(seed: int, channels: int = 2, reverberant: bool = False,
                        noise_snr_db: float = 30.0, n_tokens: int = 6):
    """Band-disjoint two-speaker mixture with known channel-0 source images.

    Returns (mixture, [image_0, image_1], noise_image, room). Speaker bands
    (including harmonics) do not overlap, so binary dominance masks are
    nearly ideal.
    """
    from msar.dsp import RoomSpec, SpeakerProfile, Waveform, mix, spatialize, synth_utterance

    rng = np.random.default_rng(seed)
    tokens = list("abcde")
    profiles = [
        SpeakerProfile(f0=250.0, decay=0.5, token_offsets={t: 40.0 * i for i, t in enumerate(tokens)}),
        SpeakerProfile(f0=2100.0, decay=0.5, token_offsets={t: 70.0 * i for i, t in enumerate(tokens)}),
    ]
    delays = [[0] + [int(rng.integers(1, 9)) for _ in range(channels - 1)] for _ in range(2)]
    decays = [[1.0] + [float(rng.uniform(0.7, 0.95)) for _ in range(channels - 1)] for _ in range(2)]
    room = RoomSpec("reverberant" if reverberant else "anechoic",
                    delays=delays, decays=decays,
                    t60=0.3 if reverberant else None, seed=seed)
    images = []
    for j, prof in enumerate(profiles):
        seq = [tokens[int(k)] for k in rng.integers(0, len(tokens), size=n_tokens)]
        images.append(spatialize(synth_utterance(seq, prof), room, j))
    mixture = mix(images, noise_snr_db=noise_snr_db, rng=np.random.default_rng(seed + 5000))
    clean = mix(images)
    length = mixture.num_samples
    padded = []
    for im in images:
        buf = np.zeros((channels, length))
        buf[:, : im.num_samples] = im.samples
        padded.append(Waveform(mixture.sample_rate, buf))
    noise = Waveform(mixture.sample_rate, mixture.samples - np.pad(
        clean.samples, ((0, 0), (0, length - clean.num_samples))))
    return mixture, padded, noise, room
