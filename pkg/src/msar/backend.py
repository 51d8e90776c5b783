"""End-to-end ASR backend: CNN embedding with 4x subsampling, the
speaker-differentiating encoder for single-channel mixtures, the single-path
encoder for beamformed streams, a Transformer decoder, CTC and label-smoothed
cross-entropy losses, permutation-invariant assignment, and beam decoding.

Losses are scalars on the autodiff tape; the CTC forward-backward pair is a
single taped primitive with an analytic adjoint.
"""

from __future__ import annotations

import dataclasses
import itertools

import numpy as np

from .attention import (
    AttentionConfig,
    DecoderLayer,
    EncoderLayer,
    LayerNormParams,
    Linear,
    sinusoidal_positions,
)
from .errors import ConfigError, ContractError, DataError, ShapeError
from .numerics import Tensor, _apply, conv2d, einsum, log_softmax, relu, reshape, take_rows, transpose


@dataclasses.dataclass
class Vocabulary:
    """Token inventory with a CTC blank and a shared sos/eos marker."""

    tokens: list[str]
    blank: int = 0

    def __post_init__(self):
        if len(set(self.tokens)) != len(self.tokens):
            raise ConfigError("vocabulary tokens must be unique")
        if self.blank == self.sos_eos:
            raise ConfigError("blank and sos/eos must be distinct tokens")

    @classmethod
    def build(cls, content_tokens: list[str]) -> "Vocabulary":
        return cls(tokens=["_"] + list(content_tokens) + ["<s>"])

    @property
    def size(self) -> int:
        return len(self.tokens)

    @property
    def sos_eos(self) -> int:
        return len(self.tokens) - 1

    @property
    def content(self) -> list[str]:
        return [t for i, t in enumerate(self.tokens) if i not in (self.blank, self.sos_eos)]

    def encode(self, tokens: list[str]) -> np.ndarray:
        idx = []
        for t in tokens:
            if t not in self.tokens:
                raise DataError(f"token {t!r} not in vocabulary")
            i = self.tokens.index(t)
            if i in (self.blank, self.sos_eos):
                raise DataError(f"reserved token {t!r} cannot appear in a reference")
            idx.append(i)
        return np.asarray(idx, dtype=np.int64)

    def decode(self, ids) -> list[str]:
        return [self.tokens[int(i)] for i in ids]


@dataclasses.dataclass
class BackendConfig:
    """Layer counts and loss interpolation for the recognition module."""

    vocab: Vocabulary
    d_att: int = 256
    n_heads: int = 4
    d_ff: int = 2048
    num_speakers: int = 2
    sd_layers: int = 4
    rec_layers: int = 8
    stream_layers: int = 12
    decoder_layers: int = 6
    lambda_ctc: float = 0.2
    cnn_channels: tuple[int, int] = (64, 128)
    n_mels: int = 80
    share_sd: bool = False
    label_smoothing: float = 0.1
    dropout: float = 0.0

    def __post_init__(self):
        if not 0.0 <= self.lambda_ctc <= 1.0:
            raise ConfigError(f"loss interpolation must lie in [0,1], got {self.lambda_ctc}")
        if min(self.rec_layers, self.stream_layers, self.decoder_layers) < 1:
            raise ConfigError("rec/stream/decoder layer counts must be >= 1")
        if self.sd_layers < 0:
            raise ConfigError("sd layer count must be >= 0")

    def attention(self) -> AttentionConfig:
        return AttentionConfig(d_att=self.d_att, n_heads=self.n_heads,
                               d_ff=self.d_ff, dropout=self.dropout)


@dataclasses.dataclass
class Hypothesis:
    """Decoded token ids (content only) with scores."""

    tokens: np.ndarray
    score: float
    logprob: float
    complete: bool


class CnnEmbed:
    """Two (3x3 conv, stride 2, ReLU) blocks over the time-mel plane, then a
    linear map to d_att plus sinusoidal positions. L = ceil(ceil(T/2)/2)."""

    def __init__(self, config: BackendConfig, rng: np.random.Generator):
        ch1, ch2 = config.cnn_channels
        self.k1 = Tensor(np.sqrt(2.0 / 9) * rng.standard_normal((ch1, 1, 3, 3)),
                         requires_grad=True)
        self.b1 = Tensor(np.zeros(ch1), requires_grad=True)
        self.k2 = Tensor(np.sqrt(2.0 / (9 * ch1)) * rng.standard_normal((ch2, ch1, 3, 3)),
                         requires_grad=True)
        self.b2 = Tensor(np.zeros(ch2), requires_grad=True)
        mels4 = (((config.n_mels + 1) // 2) + 1) // 2  # ceil(ceil(n/2)/2)
        self.proj = Linear(ch2 * mels4, config.d_att, rng)
        self.d_att = config.d_att

    def __call__(self, o: Tensor) -> Tensor:
        t = o.shape[0]
        if t < 4:
            raise DataError(f"need at least 4 frames to subsample, got {t}")
        ch1, ch2 = self.b1.shape[0], self.b2.shape[0]
        x = reshape(o, (1, t, o.shape[1]))
        x = relu(conv2d(x, self.k1, stride=2) + reshape(self.b1, (ch1, 1, 1)))
        x = relu(conv2d(x, self.k2, stride=2) + reshape(self.b2, (ch2, 1, 1)))
        length = x.shape[1]
        flat = reshape(transpose(x, (1, 0, 2)), (length, ch2 * x.shape[2]))
        return self.proj(flat) + Tensor(sinusoidal_positions(length, self.d_att))

    def parameters(self, prefix: str) -> dict[str, Tensor]:
        return {f"{prefix}.k1": self.k1, f"{prefix}.b1": self.b1,
                f"{prefix}.k2": self.k2, f"{prefix}.b2": self.b2,
                **self.proj.parameters(f"{prefix}.proj")}


class _LayerStack:
    def __init__(self, n: int, att: AttentionConfig, rng: np.random.Generator):
        self.layers = [EncoderLayer(att, rng) for _ in range(n)]

    def __call__(self, x: Tensor, rng=None) -> Tensor:
        for layer in self.layers:
            x = layer(x, rng=rng)
        return x

    def parameters(self, prefix: str) -> dict[str, Tensor]:
        out = {}
        for i, layer in enumerate(self.layers):
            out.update(layer.parameters(f"{prefix}.{i}"))
        return out


class SingleChannelEncoder:
    """Mixture encoder split into CNN embedding, J speaker-differentiating
    stacks, and a shared recognition stack with a final layer norm."""

    def __init__(self, config: BackendConfig, rng: np.random.Generator):
        self.config = config
        att = config.attention()
        self.embed = CnnEmbed(config, rng)
        if config.share_sd:
            shared = _LayerStack(config.sd_layers, att, rng)
            self.sd = [shared] * config.num_speakers
        else:
            self.sd = [_LayerStack(config.sd_layers, att, rng)
                       for _ in range(config.num_speakers)]
        self.rec = _LayerStack(config.rec_layers, att, rng)
        self.final_ln = LayerNormParams(config.d_att)

    def __call__(self, o: Tensor, rng=None) -> list[Tensor]:
        if self.config.num_speakers < 2:
            raise ContractError("the speaker-differentiating encoder needs J >= 2")
        h = self.embed(o)
        return [self.final_ln(self.rec(stack(h, rng=rng), rng=rng)) for stack in self.sd]

    def parameters(self, prefix: str) -> dict[str, Tensor]:
        out = self.embed.parameters(f"{prefix}.embed")
        if self.config.share_sd:
            out.update(self.sd[0].parameters(f"{prefix}.sd"))
        else:
            for j, stack in enumerate(self.sd):
                out.update(stack.parameters(f"{prefix}.sd{j}"))
        out.update(self.rec.parameters(f"{prefix}.rec"))
        out.update(self.final_ln.parameters(f"{prefix}.ln"))
        return out


class StreamEncoder:
    """Single-path encoder shared across separated feature streams."""

    def __init__(self, config: BackendConfig, rng: np.random.Generator):
        self.embed = CnnEmbed(config, rng)
        self.stack = _LayerStack(config.stream_layers, config.attention(), rng)
        self.final_ln = LayerNormParams(config.d_att)

    def __call__(self, o: Tensor, rng=None) -> Tensor:
        return self.final_ln(self.stack(self.embed(o), rng=rng))

    def parameters(self, prefix: str) -> dict[str, Tensor]:
        return {**self.embed.parameters(f"{prefix}.embed"),
                **self.stack.parameters(f"{prefix}.stack"),
                **self.final_ln.parameters(f"{prefix}.ln")}


# ---------------------------------------------------------------------------
# CTC


def _extend_with_blanks(ref: np.ndarray, blank: int) -> np.ndarray:
    ext = np.full(2 * ref.size + 1, blank, dtype=np.int64)
    ext[1::2] = ref
    return ext


def ctc_loss(logp: Tensor, ref: np.ndarray, blank: int = 0) -> Tensor:
    """Negative log-probability of all blank-augmented monotonic alignments.

    ``logp`` is (L, V) per-frame log-posteriors; the forward recursion runs
    in log space and the adjoint uses the matching backward recursion. When
    no valid alignment exists (sequence too long for L) the loss is +inf and
    carries no gradient, so permutation search can still compare it.
    """
    ref = np.asarray(ref, dtype=np.int64)
    lp = logp.data
    big_l, v = lp.shape
    if ref.size > 0 and (ref.min() < 0 or ref.max() >= v):
        raise ContractError("reference indices outside vocabulary")
    if np.any(ref == blank):
        raise ContractError("references must not contain the blank token")
    ext = _extend_with_blanks(ref, blank)
    s = ext.size
    skip_ok = np.zeros(s, dtype=bool)
    skip_ok[2:] = (ext[2:] != blank) & (ext[2:] != ext[:-2])

    alpha = np.full((big_l, s), -np.inf)
    alpha[0, 0] = lp[0, ext[0]]
    if s > 1:
        alpha[0, 1] = lp[0, ext[1]]
    for t in range(1, big_l):
        prev = alpha[t - 1]
        stay = prev
        step = np.concatenate(([-np.inf], prev[:-1]))
        skip = np.concatenate(([-np.inf, -np.inf], prev[:-2]))
        skip = np.where(skip_ok, skip, -np.inf)
        alpha[t] = np.logaddexp(np.logaddexp(stay, step), skip) + lp[t, ext]

    tail = alpha[-1, -1] if s == 1 else np.logaddexp(alpha[-1, -1], alpha[-1, -2])
    if not np.isfinite(tail):
        return Tensor(np.inf)

    def vjp(g):
        beta = np.full((big_l, s), -np.inf)
        beta[-1, -1] = 0.0
        if s > 1:
            beta[-1, -2] = 0.0
        for t in range(big_l - 2, -1, -1):
            nxt = beta[t + 1] + lp[t + 1, ext]
            stay = nxt
            step = np.concatenate((nxt[1:], [-np.inf]))
            skip = np.concatenate((nxt[2:], [-np.inf, -np.inf]))
            skip = np.where(np.concatenate((skip_ok[2:], [False, False])), skip, -np.inf)
            beta[t] = np.logaddexp(np.logaddexp(stay, step), skip)
        occ = alpha + beta - tail  # log posterior mass per lattice node
        grad = np.zeros_like(lp)
        w = np.exp(occ)
        for si in range(s):
            grad[:, ext[si]] -= w[:, si]
        return g * grad

    return _apply(np.array(-tail), [(logp, vjp)])


def pit_assign(loss_matrix: np.ndarray) -> tuple[int, ...]:
    """Permutation minimizing the total loss, loss_matrix[j][k] pairing
    stream j with reference k. Exhaustive over J <= 4; ties go to the
    lexicographically smallest permutation."""
    m = np.asarray(loss_matrix, dtype=np.float64)
    j = m.shape[0]
    if m.shape != (j, j):
        raise ShapeError(f"loss matrix must be square, got {m.shape}")
    if j > 4:
        raise ContractError(f"permutation search limited to J <= 4, got J = {j}")
    best, best_cost = None, np.inf
    for perm in itertools.permutations(range(j)):
        cost = sum(m[i, perm[i]] for i in range(j))
        if cost < best_cost:
            best, best_cost = perm, cost
    if best is None:  # every permutation hit +inf
        best = tuple(range(j))
    return best


# ---------------------------------------------------------------------------
# attention decoder


class TransformerDecoder:
    """Token embedding, decoder layers with cross-attention, output head."""

    def __init__(self, config: BackendConfig, rng: np.random.Generator):
        self.config = config
        v, d = config.vocab.size, config.d_att
        self.embedding = Tensor(rng.standard_normal((v, d)) / np.sqrt(d), requires_grad=True)
        self.layers = [DecoderLayer(config.attention(), rng)
                       for _ in range(config.decoder_layers)]
        self.final_ln = LayerNormParams(d)
        self.out = Linear(d, v, rng)

    def log_probs(self, memory: Tensor, input_ids: np.ndarray, rng=None) -> Tensor:
        """(N, V) next-token log-probabilities under teacher forcing."""
        d = self.config.d_att
        y = take_rows(self.embedding, input_ids) * np.sqrt(d)
        y = y + Tensor(sinusoidal_positions(len(input_ids), d))
        for layer in self.layers:
            y = layer(y, memory, rng=rng)
        return log_softmax(self.out(self.final_ln(y)), axis=-1)

    def parameters(self, prefix: str) -> dict[str, Tensor]:
        out = {f"{prefix}.embedding": self.embedding}
        for i, layer in enumerate(self.layers):
            out.update(layer.parameters(f"{prefix}.{i}"))
        out.update(self.final_ln.parameters(f"{prefix}.ln"))
        out.update(self.out.parameters(f"{prefix}.out"))
        return out


def smoothed_targets(ref: np.ndarray, vocab_size: int, eos: int, smoothing: float) -> np.ndarray:
    """Rows are (1 - a) one-hot + a / V over targets ref + [eos]."""
    targets = np.concatenate([ref, [eos]])
    q = np.full((targets.size, vocab_size), smoothing / vocab_size)
    q[np.arange(targets.size), targets] += 1.0 - smoothing
    return q


def attention_ce_loss(memory: Tensor, ref: np.ndarray, decoder: TransformerDecoder,
                      smoothing: float = 0.1, rng=None) -> Tensor:
    """Teacher-forced label-smoothed cross-entropy, averaged over steps."""
    ref = np.asarray(ref, dtype=np.int64)
    if ref.size == 0:
        raise ContractError("attention loss needs a non-empty reference")
    vocab = decoder.config.vocab
    input_ids = np.concatenate([[vocab.sos_eos], ref])
    logp = decoder.log_probs(memory, input_ids, rng=rng)
    q = smoothed_targets(ref, vocab.size, vocab.sos_eos, smoothing)
    return -einsum("nv,nv->", Tensor(q), logp) / q.shape[0]


def joint_loss(ctc_losses: list[Tensor], att_losses: list[Tensor], lam: float) -> Tensor:
    """Interpolated multi-speaker objective, losses already permutation-aligned."""
    if not 0.0 <= lam <= 1.0:
        raise ConfigError(f"interpolation factor must lie in [0,1], got {lam}")
    total = None
    for c, a in zip(ctc_losses, att_losses, strict=True):
        term = lam * c + (1.0 - lam) * a
        total = term if total is None else total + term
    return total


# ---------------------------------------------------------------------------
# decoding and scoring


def decode(memory: Tensor, decoder: TransformerDecoder, beam: int = 4,
           max_len: int = 16) -> Hypothesis:
    """Length-normalized beam search; beam=1 degenerates to greedy."""
    if max_len < 1:
        raise ContractError("max_len must be at least 1")
    vocab = decoder.config.vocab
    eos = vocab.sos_eos
    alive = [((eos,), 0.0)]
    done: list[Hypothesis] = []
    for _ in range(max_len):
        candidates = []
        for ids, lp in alive:
            step_logp = decoder.log_probs(memory, np.array(ids)).data[-1]
            order = np.argsort(step_logp)[::-1][:beam]
            for k in order:
                candidates.append((ids + (int(k),), lp + float(step_logp[k])))
        next_alive = []
        for ids, lp in sorted(candidates, key=lambda c: c[1] / (len(c[0]) - 1), reverse=True):
            if ids[-1] == eos:
                done.append(Hypothesis(tokens=np.array(ids[1:-1], dtype=np.int64),
                                       score=lp / (len(ids) - 1), logprob=lp, complete=True))
            elif len(next_alive) < beam:
                next_alive.append((ids, lp))
        alive = next_alive
        if not alive:
            break
    for ids, lp in alive:
        done.append(Hypothesis(tokens=np.array(ids[1:], dtype=np.int64),
                               score=lp / max(len(ids) - 1, 1), logprob=lp, complete=False))
    best = max(done, key=lambda h: h.score)
    content = best.tokens[(best.tokens != vocab.blank) & (best.tokens != eos)]
    return Hypothesis(tokens=content, score=best.score, logprob=best.logprob,
                      complete=best.complete)


def token_error_rate(hyp, ref) -> float:
    """Levenshtein distance normalized by the reference length."""
    hyp = list(np.asarray(hyp).reshape(-1))
    ref = list(np.asarray(ref).reshape(-1))
    if not ref:
        raise ContractError("token error rate needs a non-empty reference")
    prev = np.arange(len(hyp) + 1, dtype=np.int64)
    for i, r in enumerate(ref, start=1):
        cur = np.empty_like(prev)
        cur[0] = i
        for j, h in enumerate(hyp, start=1):
            cur[j] = min(prev[j] + 1, cur[j - 1] + 1, prev[j - 1] + (r != h))
        prev = cur
    return float(prev[-1]) / len(ref)


# ---------------------------------------------------------------------------
# assembled backends


class _BackendCore:
    def __init__(self, config: BackendConfig, rng: np.random.Generator):
        self.config = config
        self.ctc_head = Linear(config.d_att, config.vocab.size, rng)
        self.decoder = TransformerDecoder(config, rng)

    def ctc_log_probs(self, g: Tensor) -> Tensor:
        return log_softmax(self.ctc_head(g), axis=-1)

    def stream_losses(self, streams: list[Tensor], refs: list[np.ndarray], rng=None):
        """PIT on the CTC matrix, attention CE under the chosen permutation."""
        cfg = self.config
        zs = [self.ctc_log_probs(g) for g in streams]
        n = len(streams)
        ctc_matrix = [[ctc_loss(zs[j], refs[k], cfg.vocab.blank) for k in range(n)]
                      for j in range(n)]
        perm = pit_assign(np.array([[t.item() for t in row] for row in ctc_matrix]))
        ctc_losses = [ctc_matrix[j][perm[j]] for j in range(n)]
        att_losses = [attention_ce_loss(streams[j], refs[perm[j]], self.decoder,
                                        cfg.label_smoothing, rng=rng) for j in range(n)]
        joint = joint_loss(ctc_losses, att_losses, cfg.lambda_ctc)
        return {"joint": joint, "perm": perm,
                "ctc": [t.item() for t in ctc_losses],
                "att": [t.item() for t in att_losses]}


class SingleChannelBackend(_BackendCore):
    """Mixture features in, one loss or hypothesis set per speaker out."""

    def __init__(self, config: BackendConfig, rng: np.random.Generator):
        super().__init__(config, rng)
        self.encoder = SingleChannelEncoder(config, rng)

    def encode(self, feats: Tensor, rng=None) -> list[Tensor]:
        return self.encoder(feats, rng=rng)

    def losses(self, feats: Tensor, refs: list[np.ndarray], rng=None):
        return self.stream_losses(self.encode(feats, rng=rng), refs, rng=rng)

    def parameters(self, prefix: str = "backend") -> dict[str, Tensor]:
        return {**self.encoder.parameters(f"{prefix}.enc"),
                **self.ctc_head.parameters(f"{prefix}.ctc"),
                **self.decoder.parameters(f"{prefix}.dec")}


class StreamBackend(_BackendCore):
    """Single-path recognizer applied to each separated feature stream."""

    def __init__(self, config: BackendConfig, rng: np.random.Generator):
        super().__init__(config, rng)
        self.encoder = StreamEncoder(config, rng)

    def encode(self, feats: Tensor, rng=None) -> Tensor:
        return self.encoder(feats, rng=rng)

    def losses(self, feats_per_speaker: list[Tensor], refs: list[np.ndarray], rng=None):
        streams = [self.encode(f, rng=rng) for f in feats_per_speaker]
        return self.stream_losses(streams, refs, rng=rng)

    def parameters(self, prefix: str = "backend") -> dict[str, Tensor]:
        return {**self.encoder.parameters(f"{prefix}.enc"),
                **self.ctc_head.parameters(f"{prefix}.ctc"),
                **self.decoder.parameters(f"{prefix}.dec")}
