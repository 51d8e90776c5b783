"""Optimization loop: Adam with the warmup/decay schedule, staged backend
freezing, checkpoint IO, and deterministic epoch orchestration.

Models come in two flavors built from the backend/frontend modules: a
single-channel mixture recognizer and a multi-channel beamforming recognizer.
Both expose loss(), transcribe(), and parameters() so one loop trains either.
"""

from __future__ import annotations

import dataclasses
import hashlib
import io
import struct

import numpy as np

from .backend import (
    BackendConfig,
    SingleChannelBackend,
    StreamBackend,
    decode,
    token_error_rate,
)
from .dsp import GlobalStats, Waveform, log_mel_gmvn, stft
from .errors import ConfigError, ContractError, DataError, NumericAbort
from .frontend import Frontend, FrontendConfig
from .numerics import DiffGraph, Tensor, backward

ADAM_BETA1 = 0.9
ADAM_BETA2 = 0.98
ADAM_EPS = 1e-9
CHECKPOINT_MAGIC = b"MSAR"
CHECKPOINT_VERSION = 1


@dataclasses.dataclass
class TrainPlan:
    """Loop hyperparameters; everything that affects results lives here."""

    epochs: int
    batch_size: int = 8
    warmup: int = 800
    lr_scale: float = 1.0
    freeze_backend_epochs: int = 15
    seed: int = 0
    grad_clip: float = 5.0
    dev_fraction: float = 0.1
    beam: int = 1
    max_len: int = 10
    pretrain_epochs: int = 0

    def __post_init__(self):
        if self.warmup < 1:
            raise ConfigError("warmup must be at least 1 step")
        if self.freeze_backend_epochs > self.epochs:
            raise ConfigError("freeze_backend_epochs cannot exceed epochs")


def noam_lr(step: int, d_att: int, warmup: int, k: float = 1.0) -> float:
    """k * d_att^-0.5 * min(step^-0.5, step * warmup^-1.5)."""
    if step < 1:
        raise ContractError(f"schedule is defined for step >= 1, got {step}")
    return k * d_att ** -0.5 * min(step ** -0.5, step * warmup ** -1.5)


class AdamState:
    """First/second moment accumulators keyed by parameter name."""

    def __init__(self, params: dict[str, Tensor]):
        self.m = {n: np.zeros_like(p.data) for n, p in params.items()}
        self.v = {n: np.zeros_like(p.data) for n, p in params.items()}
        self.step = 0


def adam_step(params: dict[str, Tensor], grads: dict[str, np.ndarray],
              state: AdamState, lr: float) -> None:
    """Bias-corrected Adam update in place; one step-count bump per call."""
    state.step += 1
    t = state.step
    b1c = 1.0 - ADAM_BETA1 ** t
    b2c = 1.0 - ADAM_BETA2 ** t
    for name, p in params.items():
        g = grads.get(name)
        if g is None:
            g = np.zeros_like(p.data)
        if g.shape != p.data.shape:
            raise ContractError(f"gradient shape {g.shape} mismatches {name} {p.data.shape}")
        m = state.m[name]
        v = state.v[name]
        m *= ADAM_BETA1
        m += (1.0 - ADAM_BETA1) * g
        v *= ADAM_BETA2
        v += (1.0 - ADAM_BETA2) * g * g
        p.data -= lr * (m / b1c) / (np.sqrt(v / b2c) + ADAM_EPS)


def clip_gradients(grads: dict[str, np.ndarray], max_norm: float) -> float:
    total = np.sqrt(sum(float((g * g).sum()) for g in grads.values()))
    if max_norm > 0 and total > max_norm:
        scale = max_norm / total
        for g in grads.values():
            g *= scale
    return total


# ---------------------------------------------------------------------------
# model wrappers


class SingleChannelModel:
    """Recognizes both speakers straight from mixture-channel features."""

    kind = "single"

    def __init__(self, config: BackendConfig, stats: GlobalStats, rng: np.random.Generator):
        self.config = config
        self.stats = stats
        self.backend = SingleChannelBackend(config, rng)

    def features(self, mixture: Waveform) -> np.ndarray:
        spec = stft(Waveform(mixture.sample_rate, mixture.samples[:1]))
        return log_mel_gmvn(spec, n_mels=self.config.n_mels, stats=self.stats).data

    def loss(self, item, rng=None):
        feats, refs = item
        return self.backend.losses(Tensor(feats), refs, rng=rng)

    def transcribe(self, item, beam: int, max_len: int) -> list[np.ndarray]:
        feats, _ = item
        streams = self.backend.encode(Tensor(feats))
        return [decode(g, self.backend.decoder, beam=beam, max_len=max_len).tokens
                for g in streams]

    def parameters(self) -> dict[str, Tensor]:
        return self.backend.parameters("backend")


class MultiChannelModel:
    """Neural beamformer frontend feeding a shared single-path recognizer."""

    kind = "multi"

    def __init__(self, backend_config: BackendConfig, frontend_config: FrontendConfig,
                 stats: GlobalStats, rng: np.random.Generator):
        self.config = backend_config
        self.frontend = Frontend(frontend_config, rng, stats=stats)
        self.backend = StreamBackend(backend_config, rng)
        self.stats = stats

    def loss(self, item, rng=None):
        spec, refs = item
        feats = self.frontend(spec, rng=rng)
        return self.backend.losses(feats, refs, rng=rng)

    def pretrain_loss(self, item, rng=None):
        feats, refs = item
        return self.backend.losses([Tensor(f) for f in feats], refs, rng=rng)

    def pretrain_transcribe(self, item, beam: int, max_len: int) -> list[np.ndarray]:
        feats, _ = item
        return [decode(self.backend.encode(Tensor(f)), self.backend.decoder,
                       beam=beam, max_len=max_len).tokens for f in feats]

    def transcribe(self, item, beam: int, max_len: int) -> list[np.ndarray]:
        spec, _ = item
        feats = self.frontend(spec)
        return [decode(self.backend.encode(f), self.backend.decoder,
                       beam=beam, max_len=max_len).tokens for f in feats]

    def parameters(self) -> dict[str, Tensor]:
        return {**self.frontend.parameters("frontend"),
                **self.backend.parameters("backend")}


def best_permutation_ter(hyps: list[np.ndarray], refs: list[np.ndarray]) -> float:
    """Mean token error rate under the most favorable stream assignment."""
    import itertools

    best = np.inf
    for perm in itertools.permutations(range(len(refs))):
        ter = np.mean([token_error_rate(hyps[j], refs[perm[j]]) for j in range(len(refs))])
        best = min(best, float(ter))
    return best


# ---------------------------------------------------------------------------
# epoch loop


def _grad_dict(params: dict[str, Tensor], scale: float) -> dict[str, np.ndarray]:
    return {n: p.grad * scale for n, p in params.items() if p.grad is not None}


def train_epoch(model, train_items: list, dev_items: list, plan: TrainPlan,
                state: AdamState, epoch: int, loss_fn=None, transcribe_fn=None) -> dict:
    """One pass over the data: batched updates, then held-out scoring.

    While ``epoch`` is below ``plan.freeze_backend_epochs``, parameters named
    ``backend.*`` receive no updates (their gradients still flow). Returns
    mean losses over the pass plus the held-out best-permutation TER.
    """
    if not train_items:
        raise DataError("train_epoch needs a non-empty dataset")
    loss_fn = loss_fn or model.loss
    params = model.parameters()
    frozen = epoch < plan.freeze_backend_epochs
    trainable = {n: p for n, p in params.items()
                 if not (frozen and n.startswith("backend."))}
    order = np.random.default_rng((plan.seed, epoch)).permutation(len(train_items))
    sums = {"joint": 0.0, "ctc": 0.0, "att": 0.0}
    count = 0
    for start in range(0, len(order), plan.batch_size):
        batch = [train_items[i] for i in order[start:start + plan.batch_size]]
        for p in params.values():
            p.grad = None
        for bi, item in enumerate(batch):
            with DiffGraph() as graph:
                rec = loss_fn(item)
            loss = rec["joint"]
            if not np.isfinite(loss.item()):
                raise NumericAbort(
                    f"non-finite loss at epoch {epoch} batch item {start + bi}: "
                    f"ctc={rec['ctc']} att={rec['att']}")
            backward(loss, graph)
            sums["joint"] += loss.item()
            sums["ctc"] += float(np.mean(rec["ctc"]))
            sums["att"] += float(np.mean(rec["att"]))
            count += 1
        grads = _grad_dict(trainable, 1.0 / len(batch))
        clip_gradients(grads, plan.grad_clip)
        lr = noam_lr(state.step + 1, model.config.d_att, plan.warmup, plan.lr_scale)
        adam_step(trainable, grads, state, lr)
    row = {"epoch": epoch, "loss_joint": sums["joint"] / count,
           "loss_ctc": sums["ctc"] / count, "loss_att": sums["att"] / count}
    row["ter"] = (evaluate_ter(model, dev_items, plan, transcribe_fn)
                  if dev_items else float("nan"))
    return row


def evaluate_ter(model, items: list, plan: TrainPlan, transcribe_fn=None) -> float:
    transcribe_fn = transcribe_fn or model.transcribe
    ters = []
    for item in items:
        refs = item[1]
        hyps = transcribe_fn(item, beam=plan.beam, max_len=plan.max_len)
        ters.append(best_permutation_ter(hyps, refs))
    return float(np.mean(ters))


def evaluate_losses(model, items: list, loss_fn=None) -> dict:
    loss_fn = loss_fn or model.loss
    sums = {"joint": 0.0, "ctc": 0.0, "att": 0.0}
    for item in items:
        rec = loss_fn(item)
        sums["joint"] += rec["joint"].item()
        sums["ctc"] += float(np.mean(rec["ctc"]))
        sums["att"] += float(np.mean(rec["att"]))
    n = max(len(items), 1)
    return {k: v / n for k, v in sums.items()}


# ---------------------------------------------------------------------------
# checkpoints


def config_digest(payload: str) -> bytes:
    return hashlib.sha256(payload.encode("utf-8")).digest()[:16]


def _write_array(buf, arr: np.ndarray) -> None:
    a = np.ascontiguousarray(arr, dtype="<f4")
    buf.write(struct.pack("<B", a.ndim))
    for d in a.shape:
        buf.write(struct.pack("<I", d))
    buf.write(a.tobytes())


def _read_array(buf) -> np.ndarray:
    (ndim,) = struct.unpack("<B", _read_exact(buf, 1))
    shape = tuple(struct.unpack("<I", _read_exact(buf, 4))[0] for _ in range(ndim))
    n = int(np.prod(shape)) if shape else 1
    data = np.frombuffer(_read_exact(buf, 4 * n), dtype="<f4")
    return data.reshape(shape).astype(np.float64)


def _read_exact(buf, n: int) -> bytes:
    data = buf.read(n)
    if len(data) != n:
        raise ConfigError("checkpoint truncated or corrupt")
    return data


def save_checkpoint(path, params: dict[str, Tensor], state: AdamState | None,
                    digest: bytes) -> None:
    """Parameters (and optionally optimizer moments) in 32-bit little-endian."""
    buf = io.BytesIO()
    buf.write(CHECKPOINT_MAGIC)
    buf.write(struct.pack("<H", CHECKPOINT_VERSION))
    buf.write(struct.pack("<16s", digest))
    buf.write(struct.pack("<Q", 0 if state is None else state.step))
    buf.write(struct.pack("<B", 0 if state is None else 1))
    names = sorted(params)
    buf.write(struct.pack("<I", len(names)))
    for name in names:
        raw = name.encode("utf-8")
        buf.write(struct.pack("<H", len(raw)))
        buf.write(raw)
        _write_array(buf, params[name].data)
        if state is not None:
            _write_array(buf, state.m[name])
            _write_array(buf, state.v[name])
    with open(path, "wb") as fh:
        fh.write(buf.getvalue())


def load_checkpoint(path, params: dict[str, Tensor], digest: bytes | None = None,
                    override_digest: bool = False) -> AdamState | None:
    """Restore parameters in place; nothing is applied if parsing fails."""
    with open(path, "rb") as fh:
        buf = io.BytesIO(fh.read())
    magic = _read_exact(buf, 4)
    if magic != CHECKPOINT_MAGIC:
        raise ConfigError(f"not a checkpoint file (magic {magic!r})")
    (version,) = struct.unpack("<H", _read_exact(buf, 2))
    if version != CHECKPOINT_VERSION:
        raise ConfigError(f"unsupported checkpoint version {version}")
    (stored_digest,) = struct.unpack("<16s", _read_exact(buf, 16))
    if digest is not None and stored_digest != digest:
        if not override_digest:
            raise ConfigError("checkpoint config digest mismatch (pass override to load anyway)")
        import warnings

        warnings.warn("loading checkpoint despite config digest mismatch")
    (step,) = struct.unpack("<Q", _read_exact(buf, 8))
    (has_state,) = struct.unpack("<B", _read_exact(buf, 1))
    (count,) = struct.unpack("<I", _read_exact(buf, 4))
    loaded: dict[str, np.ndarray] = {}
    moments: dict[str, tuple[np.ndarray, np.ndarray]] = {}
    for _ in range(count):
        (name_len,) = struct.unpack("<H", _read_exact(buf, 2))
        name = _read_exact(buf, name_len).decode("utf-8")
        loaded[name] = _read_array(buf)
        if has_state:
            moments[name] = (_read_array(buf), _read_array(buf))
    if set(loaded) != set(params):
        missing = set(params) - set(loaded)
        extra = set(loaded) - set(params)
        raise ConfigError(f"checkpoint parameters do not match model "
                          f"(missing {sorted(missing)[:3]}, extra {sorted(extra)[:3]})")
    for name, arr in loaded.items():
        if arr.shape != params[name].data.shape:
            raise ConfigError(f"shape mismatch for {name}: "
                              f"{arr.shape} vs {params[name].data.shape}")
    for name, arr in loaded.items():
        params[name].data = arr
    if not has_state:
        return None
    state = AdamState(params)
    state.step = step
    for name, (m, v) in moments.items():
        state.m[name] = m
        state.v[name] = v
    return state
