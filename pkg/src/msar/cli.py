"""Command-line experiment surface.

Subcommands: gen-data, train, eval, separate, dereverb. Configuration is a
JSON document with data/model/train/eval sections; unknown keys are rejected
outright. Every subcommand honors --seed and produces byte-reproducible
outputs. Exit codes: 0 ok, 2 config error, 3 data error, 4 numeric abort.
"""

from __future__ import annotations

import argparse
import json
import sys
from pathlib import Path

import numpy as np

from . import data as datamod
from .backend import BackendConfig
from .dsp import GlobalStats, ComplexSpectrogram, Waveform, istft, read_wav, si_snr, stft, wpe, write_wav
from .errors import ConfigError, DataError, MsarError, NumericAbort
from .frontend import FrontendConfig, oracle_masks, separate_with_masks
from .numerics import DiffGraph
from .training import (
    AdamState,
    MultiChannelModel,
    SingleChannelModel,
    TrainPlan,
    config_digest,
    evaluate_losses,
    load_checkpoint,
    save_checkpoint,
    train_epoch,
)

_NUMBER = (int, float)
_SCHEMA = {
    "data": {
        "num_utterances": int, "num_speakers": int, "channels": int,
        "vocab_size": int, "room_mode": str, "t60_range": list,
        "noise_snr_db": _NUMBER, "seed": int, "min_tokens": int, "max_tokens": int,
    },
    "model": {
        "d_att": int, "n_heads": int, "d_ff": int, "sd_layers": int,
        "rec_layers": int, "stream_layers": int, "decoder_layers": int,
        "cnn_channels": list, "n_mels": int, "lambda_ctc": _NUMBER,
        "label_smoothing": _NUMBER, "dropout": _NUMBER, "share_sd": bool,
        "frontend": {
            "d_att": int, "n_heads": int, "d_ff": int, "n_layers": int,
            "window": list, "ref_mode": str, "ref_channel": int,
        },
        "wpe": {"enabled": bool, "taps": int, "delay": int, "iters": int},
    },
    "train": {
        "epochs": int, "batch_size": int, "warmup": int, "lr_scale": _NUMBER,
        "freeze_backend_epochs": int, "seed": int, "grad_clip": _NUMBER,
        "dev_fraction": _NUMBER, "beam": int, "max_len": int, "pretrain_epochs": int,
    },
    "eval": {"beam": int, "max_len": int},
}


def validate_config(doc: dict, schema=None, path: str = "") -> None:
    schema = schema if schema is not None else _SCHEMA
    if not isinstance(doc, dict):
        raise ConfigError(f"config section {path or '<root>'} must be an object")
    for key, value in doc.items():
        where = f"{path}.{key}" if path else key
        if key not in schema:
            raise ConfigError(f"unknown config key {where!r}")
        expected = schema[key]
        if isinstance(expected, dict):
            validate_config(value, expected, where)
        elif expected is int:
            if not isinstance(value, int) or isinstance(value, bool):
                raise ConfigError(f"{where} must be an integer, got {value!r}")
        elif expected is bool:
            if not isinstance(value, bool):
                raise ConfigError(f"{where} must be a boolean, got {value!r}")
        elif expected is str:
            if not isinstance(value, str):
                raise ConfigError(f"{where} must be a string, got {value!r}")
        elif expected is list:
            if not isinstance(value, list):
                raise ConfigError(f"{where} must be a list, got {value!r}")
        else:
            if isinstance(value, bool) or not isinstance(value, expected):
                raise ConfigError(f"{where} must be a number, got {value!r}")


def load_config(path) -> dict:
    try:
        with open(path) as fh:
            doc = json.load(fh)
    except FileNotFoundError as e:
        raise ConfigError(f"config file not found: {path}") from e
    except json.JSONDecodeError as e:
        raise ConfigError(f"{path}: invalid JSON: {e}") from e
    validate_config(doc)
    return doc


def canonical_config(doc: dict) -> str:
    return json.dumps(doc, sort_keys=True, indent=2) + "\n"


def _digest(doc: dict) -> bytes:
    core = {k: doc.get(k, {}) for k in ("data", "model")}
    return config_digest(json.dumps(core, sort_keys=True))


def data_config(doc: dict, seed_override=None) -> datamod.DataConfig:
    section = dict(doc.get("data", {}))
    if "t60_range" in section:
        section["t60_range"] = tuple(section["t60_range"])
    if seed_override is not None:
        section["seed"] = seed_override
    if "num_utterances" not in section:
        raise ConfigError("data.num_utterances is required")
    return datamod.DataConfig(**section)


def build_model(doc: dict, ds: datamod.Dataset, stats: GlobalStats,
                rng: np.random.Generator):
    model_doc = dict(doc.get("model", {}))
    fe_doc = model_doc.pop("frontend", None)
    model_doc.pop("wpe", None)
    if "cnn_channels" in model_doc:
        model_doc["cnn_channels"] = tuple(model_doc["cnn_channels"])
    bcfg = BackendConfig(vocab=ds.vocab, num_speakers=ds.num_speakers, **model_doc)
    if fe_doc is not None and ds.channels > 1:
        fe = dict(fe_doc)
        if "window" in fe and fe["window"] is not None:
            fe["window"] = tuple(fe["window"])
        fcfg = FrontendConfig(num_speakers=ds.num_speakers, num_bins=257,
                              n_mels=bcfg.n_mels, **fe)
        return MultiChannelModel(bcfg, fcfg, stats, rng)
    return SingleChannelModel(bcfg, stats, rng)


def _wpe_cfg(doc: dict, override: str | None = None) -> dict | None:
    cfg = dict(doc.get("model", {}).get("wpe", {}) or {})
    if override == "on":
        cfg["enabled"] = True
    elif override == "off":
        cfg["enabled"] = False
    return cfg


def _format_metric(v) -> str:
    if v is None or (isinstance(v, float) and np.isnan(v)):
        return ""
    return f"{v:.8g}"


def _write_metrics_csv(path, rows: list[dict]) -> None:
    with open(path, "w") as fh:
        fh.write("epoch,split,loss_ctc,loss_att,loss_joint,ter\n")
        for r in rows:
            fh.write(",".join([str(r["epoch"]), r["split"],
                               _format_metric(r.get("loss_ctc")),
                               _format_metric(r.get("loss_att")),
                               _format_metric(r.get("loss_joint")),
                               _format_metric(r.get("ter"))]) + "\n")


def _save_stats(path, stats: GlobalStats) -> None:
    with open(path, "w") as fh:
        json.dump({"mean": stats.mean.tolist(), "std": stats.std.tolist()},
                  fh, sort_keys=True)
        fh.write("\n")


def _load_stats(path) -> GlobalStats:
    with open(path) as fh:
        doc = json.load(fh)
    return GlobalStats(mean=np.array(doc["mean"]), std=np.array(doc["std"]))


# ---------------------------------------------------------------------------
# subcommands


def cmd_gen_data(args) -> int:
    doc = load_config(args.config)
    cfg = data_config(doc, seed_override=args.seed)
    manifest = datamod.generate_dataset(cfg, args.out_dir)
    count = sum(1 for _ in open(manifest))
    print(f"wrote {count} utterances to {args.out_dir}")
    return 0


def _items_for(model, ds, indices, stats, wpe_cfg):
    if model.kind == "multi":
        return datamod.multi_channel_items(ds, indices, wpe_cfg)
    return datamod.single_channel_items(ds, indices, stats, model.config.n_mels, wpe_cfg)


def cmd_train(args) -> int:
    doc = load_config(args.config)
    out = Path(args.out_dir)
    out.mkdir(parents=True, exist_ok=True)
    ds = datamod.Dataset.load(args.data_dir)
    if len(ds) == 0:
        raise DataError(f"dataset at {args.data_dir} is empty")
    train_doc = dict(doc.get("train", {}))
    if args.seed is not None:
        train_doc["seed"] = args.seed
    plan = TrainPlan(**train_doc)
    n_mels = int(doc.get("model", {}).get("n_mels", 80))
    train_idx, dev_idx = datamod.split_indices(len(ds), plan.dev_fraction, plan.seed)
    stats = datamod.compute_stats(ds, train_idx, n_mels)
    _save_stats(out / "stats.json", stats)
    rng = np.random.default_rng(plan.seed)
    model = build_model(doc, ds, stats, rng)
    digest = _digest(doc)
    (out / "config.json").write_text(canonical_config(doc))
    wpe_cfg = _wpe_cfg(doc)

    params = model.parameters()
    state = AdamState(params)
    if args.resume:
        state = load_checkpoint(args.resume, params, digest) or state
    rows = []
    if plan.pretrain_epochs > 0:
        if model.kind != "multi":
            raise ConfigError("pretraining on clean singles needs the multi-channel model")
        pre_items = datamod.pretrain_items(ds, train_idx, stats, n_mels)
        pre_dev = datamod.pretrain_items(ds, dev_idx, stats, n_mels)
        pre_plan = TrainPlan(**{**train_doc, "epochs": plan.pretrain_epochs,
                                "freeze_backend_epochs": 0, "pretrain_epochs": 0})
        pre_state = AdamState(params)
        for epoch in range(plan.pretrain_epochs):
            row = _pretrain_epoch(model, pre_items, pre_dev, pre_plan, pre_state, epoch)
            rows.append(row)
            print(f"pretrain {epoch}: loss {row['loss_joint']:.4f} ter {row['ter']:.4f}")

    train_items = _items_for(model, ds, train_idx, stats, wpe_cfg)
    dev_items = _items_for(model, ds, dev_idx, stats, wpe_cfg)
    best_ter = np.inf
    for epoch in range(plan.epochs):
        row = train_epoch(model, train_items, dev_items, plan, state, epoch)
        dev_losses = evaluate_losses(model, dev_items) if dev_items else {}
        rows.append({"epoch": epoch, "split": "train", "loss_ctc": row["loss_ctc"],
                     "loss_att": row["loss_att"], "loss_joint": row["loss_joint"],
                     "ter": None})
        rows.append({"epoch": epoch, "split": "dev",
                     "loss_ctc": dev_losses.get("ctc"), "loss_att": dev_losses.get("att"),
                     "loss_joint": dev_losses.get("joint"), "ter": row["ter"]})
        print(f"epoch {epoch}: train loss {row['loss_joint']:.4f} dev ter {row['ter']:.4f}")
        if row["ter"] <= best_ter:
            best_ter = row["ter"]
            save_checkpoint(out / "best.msar", params, state, digest)
        save_checkpoint(out / "last.msar", params, state, digest)
    _write_metrics_csv(out / "metrics.csv", rows)
    summary = {"best_dev_ter": None if not np.isfinite(best_ter) else best_ter,
               "epochs": plan.epochs, "steps": state.step,
               "digest": digest.hex(), "pretrain_epochs": plan.pretrain_epochs}
    (out / "metrics.json").write_text(json.dumps(summary, sort_keys=True, indent=2) + "\n")
    print(f"best dev ter {best_ter:.4f}; artifacts in {out}")
    return 0


def _pretrain_epoch(model, items, dev_items, plan, state, epoch) -> dict:
    row = train_epoch(model, items, dev_items, plan, state, epoch,
                      loss_fn=model.pretrain_loss,
                      transcribe_fn=model.pretrain_transcribe)
    return {"epoch": epoch, "split": "pretrain", "loss_ctc": row["loss_ctc"],
            "loss_att": row["loss_att"], "loss_joint": row["loss_joint"],
            "ter": row["ter"]}


def cmd_eval(args) -> int:
    ckpt = Path(args.checkpoint)
    cfg_path = Path(args.config) if args.config else ckpt.parent / "config.json"
    doc = load_config(cfg_path)
    ds = datamod.Dataset.load(args.data_dir)
    if len(ds) == 0:
        raise DataError(f"dataset at {args.data_dir} is empty")
    stats_path = Path(args.stats) if args.stats else ckpt.parent / "stats.json"
    stats = _load_stats(stats_path)
    model = build_model(doc, ds, stats, np.random.default_rng(args.seed or 0))
    load_checkpoint(ckpt, model.parameters(), _digest(doc),
                    override_digest=args.override_digest)
    eval_doc = doc.get("eval", {})
    beam = int(eval_doc.get("beam", 4))
    max_len = int(eval_doc.get("max_len", 10))
    wpe_cfg = _wpe_cfg(doc, args.wpe)
    indices = list(range(len(ds)))
    items = _items_for(model, ds, indices, stats, wpe_cfg)
    out = Path(args.out_dir)
    out.mkdir(parents=True, exist_ok=True)
    rows = []
    ters = []
    import itertools

    from .backend import token_error_rate

    for i, item in zip(indices, items):
        refs = item[1]
        hyps = model.transcribe(item, beam=beam, max_len=max_len)
        best_perm, best = None, np.inf
        for perm in itertools.permutations(range(len(refs))):
            ter = float(np.mean([token_error_rate(hyps[j], refs[perm[j]])
                                 for j in range(len(refs))]))
            if ter < best:
                best, best_perm = ter, perm
        ters.append(best)
        for j, hyp in enumerate(hyps):
            ref = refs[best_perm[j]]
            rows.append({"id": ds.entries[i]["id"], "stream": j,
                         "ref": " ".join(ds.vocab.decode(ref)),
                         "hyp": " ".join(ds.vocab.decode(hyp)),
                         "ter": token_error_rate(hyp, ref)})
    with open(out / "report.csv", "w") as fh:
        fh.write("id,stream,ref,hyp,ter\n")
        for r in rows:
            fh.write(f"{r['id']},{r['stream']},{r['ref']},{r['hyp']},{r['ter']:.6f}\n")
    mean_ter = float(np.mean(ters))
    report = {"mean_ter": mean_ter, "utterances": len(ds), "rows": len(rows)}
    (out / "report.json").write_text(json.dumps(report, sort_keys=True, indent=2) + "\n")
    print(f"mean best-permutation ter {mean_ter:.4f} over {len(ds)} utterances")
    return 0


def _read_mixture(paths: list[str]) -> Waveform:
    waves = [read_wav(p) for p in paths]
    if len(waves) == 1:
        return waves[0]
    rate = waves[0].sample_rate
    n = min(w.num_samples for w in waves)
    chans = []
    for w in waves:
        if w.num_channels != 1:
            raise DataError("pass either one multichannel wav or several mono wavs")
        if w.sample_rate != rate:
            raise DataError("mixture channels disagree on sample rate")
        chans.append(w.samples[0][:n])
    return Waveform(rate, np.stack(chans))


def cmd_separate(args) -> int:
    mixture = _read_mixture(args.mixture)
    if mixture.num_channels < 2:
        raise ConfigError("beamforming needs a multichannel mixture (C >= 2)")
    out = Path(args.out_dir)
    out.mkdir(parents=True, exist_ok=True)
    spec = stft(mixture)
    if args.oracle_masks:
        if not args.refs:
            raise ConfigError("--oracle-masks requires --refs")
        ref_waves = [read_wav(p) for p in args.refs]
        ref_mags = [np.abs(stft(w).data).mean(axis=2) for w in ref_waves]
        t = min([spec.num_frames] + [m.shape[0] for m in ref_mags])
        ref_mags = [m[:t] for m in ref_mags]
        noise_mag = None
        if args.noise:
            noise_mag = np.abs(stft(read_wav(args.noise)).data).mean(axis=2)[:t]
        spec = ComplexSpectrogram(spec.data[:t], win=spec.win, hop=spec.hop,
                                  nfft=spec.nfft, sample_rate=spec.sample_rate)
        masks = oracle_masks(ref_mags, noise_mag, mixture.num_channels)
        with DiffGraph():
            shats = separate_with_masks(spec, masks, len(ref_mags),
                                        ref_channel=args.ref_channel)
    else:
        if not args.checkpoint:
            raise ConfigError("need --checkpoint or --oracle-masks")
        ckpt = Path(args.checkpoint)
        cfg_path = Path(args.config) if args.config else ckpt.parent / "config.json"
        doc = load_config(cfg_path)
        if doc.get("model", {}).get("frontend") is None:
            raise ConfigError("checkpoint config has no frontend section")
        stats_path = ckpt.parent / "stats.json"
        n_mels = int(doc.get("model", {}).get("n_mels", 80))
        stats = _load_stats(stats_path) if stats_path.exists() else GlobalStats.identity(n_mels)
        model = build_model(doc, _FakeDs(doc), stats, np.random.default_rng(args.seed or 0))
        load_checkpoint(ckpt, model.parameters(), _digest(doc),
                        override_digest=args.override_digest)
        shats = model.frontend.separate(spec)
    report = {"outputs": [], "params": {"ref_channel": args.ref_channel,
                                        "oracle": bool(args.oracle_masks)}}
    waves = []
    for j, shat in enumerate(shats):
        wav = istft(ComplexSpectrogram(shat.data[:, :, None], win=spec.win,
                                       hop=spec.hop, nfft=spec.nfft,
                                       sample_rate=spec.sample_rate))
        path = out / f"spk{j}.wav"
        write_wav(path, wav)
        waves.append(wav)
        report["outputs"].append({"file": path.name})
    if args.refs:
        # stream order is arbitrary; score under the best stream-to-reference
        # assignment, like recognition scoring does
        refs = [read_wav(p).samples[0] for p in args.refs]
        table = np.full((len(waves), len(refs)), -np.inf)
        for j, wav in enumerate(waves):
            for k, ref in enumerate(refs):
                n = min(ref.size, wav.num_samples)
                lo, hi = 400, n - 400
                table[j, k] = si_snr(wav.samples[0][lo:hi], ref[lo:hi])
        import itertools

        perm = max(itertools.permutations(range(len(refs))),
                   key=lambda p: sum(table[j, p[j]] for j in range(len(waves))))
        for j, entry in enumerate(report["outputs"]):
            ref = refs[perm[j]]
            n = min(ref.size, waves[j].num_samples)
            lo, hi = 400, n - 400
            entry["ref"] = str(args.refs[perm[j]])
            entry["si_snr_db"] = table[j, perm[j]]
            entry["mixture_si_snr_db"] = si_snr(mixture.samples[args.ref_channel][:n][lo:hi],
                                                ref[lo:hi])
    (out / "separation.json").write_text(json.dumps(report, sort_keys=True, indent=2) + "\n")
    print(f"wrote {len(shats)} separated tracks to {out}")
    return 0


class _FakeDs:
    """Duck-typed stand-in so build_model works without a dataset on disk."""

    def __init__(self, doc):
        from .data import content_tokens
        from .backend import Vocabulary

        section = doc.get("data", {})
        self.vocab = Vocabulary.build(content_tokens(int(section.get("vocab_size", 10))))
        self.num_speakers = int(section.get("num_speakers", 2))
        self.channels = int(section.get("channels", 2))


def cmd_dereverb(args) -> int:
    wav = read_wav(args.input)
    spec = stft(wav)
    cleaned = wpe(spec, taps=args.taps, delay=args.delay, iters=args.iters)
    out_wav = istft(cleaned)
    write_wav(args.output, out_wav)
    sidecar = {"input": str(args.input), "output": str(args.output),
               "taps": args.taps, "delay": args.delay, "iters": args.iters,
               "frames": spec.num_frames, "channels": wav.num_channels}
    Path(str(args.output) + ".json").write_text(
        json.dumps(sidecar, sort_keys=True, indent=2) + "\n")
    print(f"dereverberated {args.input} -> {args.output}")
    return 0


# ---------------------------------------------------------------------------
# argument parsing


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="msar",
        description="Desk-scale multi-speaker speech recognition experiments")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("gen-data", help="synthesize a dataset from a config")
    p.add_argument("--config", required=True, help="JSON experiment config")
    p.add_argument("--out-dir", required=True, help="output dataset directory")
    p.add_argument("--seed", type=int, default=None, help="override data.seed")
    p.set_defaults(func=cmd_gen_data)

    p = sub.add_parser("train", help="train a model on a generated dataset")
    p.add_argument("--config", required=True)
    p.add_argument("--data-dir", required=True)
    p.add_argument("--out-dir", required=True)
    p.add_argument("--seed", type=int, default=None, help="override train.seed")
    p.add_argument("--resume", default=None, help="checkpoint to resume from")
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("eval", help="decode a dataset and report token error rates")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--data-dir", required=True)
    p.add_argument("--out-dir", required=True)
    p.add_argument("--config", default=None, help="defaults to config.json next to checkpoint")
    p.add_argument("--stats", default=None, help="defaults to stats.json next to checkpoint")
    p.add_argument("--wpe", choices=["config", "on", "off"], default="config",
                   help="override dereverberation preprocessing")
    p.add_argument("--override-digest", action="store_true",
                   help="load the checkpoint even if the config digest differs")
    p.add_argument("--seed", type=int, default=None)
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("separate", help="beamform a mixture into per-speaker tracks")
    p.add_argument("mixture", nargs="+", help="one multichannel wav or C mono wavs")
    p.add_argument("--out-dir", required=True)
    p.add_argument("--checkpoint", default=None)
    p.add_argument("--config", default=None)
    p.add_argument("--oracle-masks", action="store_true",
                   help="build masks from reference signals instead of a model")
    p.add_argument("--refs", nargs="+", default=None, help="clean reference wavs")
    p.add_argument("--noise", default=None, help="noise reference wav (oracle mode)")
    p.add_argument("--ref-channel", type=int, default=0)
    p.add_argument("--override-digest", action="store_true")
    p.add_argument("--seed", type=int, default=None)
    p.set_defaults(func=cmd_separate)

    p = sub.add_parser("dereverb", help="WPE dereverberation of a wav file")
    p.add_argument("input")
    p.add_argument("output")
    p.add_argument("--taps", type=int, default=10)
    p.add_argument("--delay", type=int, default=3)
    p.add_argument("--iters", type=int, default=3)
    p.add_argument("--seed", type=int, default=None, help="accepted for uniformity")
    p.set_defaults(func=cmd_dereverb)
    return parser


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        return args.func(args) or 0
    except ConfigError as e:
        print(f"config error: {e}", file=sys.stderr)
        return 2
    except DataError as e:
        print(f"data error: {e}", file=sys.stderr)
        return 3
    except NumericAbort as e:
        print(f"numeric abort: {e}", file=sys.stderr)
        return 4
    except MsarError as e:
        print(f"error: {e}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
