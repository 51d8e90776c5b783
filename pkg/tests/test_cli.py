import json
from pathlib import Path

import numpy as np
import pytest

from msar import cli
from msar.cli import main, validate_config
from msar.dsp import Waveform, read_wav, write_wav
from msar.errors import ConfigError

SR = 16000


def write_config(path, **overrides):
    doc = {
        "data": {"num_utterances": 12, "num_speakers": 2, "channels": 1,
                 "vocab_size": 6, "room_mode": "anechoic", "noise_snr_db": 20.0,
                 "seed": 3, "min_tokens": 2, "max_tokens": 3},
        "model": {"d_att": 16, "n_heads": 2, "d_ff": 32, "sd_layers": 1,
                  "rec_layers": 1, "decoder_layers": 1, "cnn_channels": [4, 8],
                  "n_mels": 40},
        "train": {"epochs": 2, "batch_size": 4, "warmup": 10, "lr_scale": 0.5,
                  "freeze_backend_epochs": 0, "seed": 5, "dev_fraction": 0.2,
                  "max_len": 6},
        "eval": {"beam": 2, "max_len": 6},
    }
    for section, vals in overrides.items():
        doc.setdefault(section, {}).update(vals)
    path = Path(path)
    path.write_text(json.dumps(doc, indent=1))
    return path


@pytest.fixture(scope="module")
def workspace(tmp_path_factory):
    root = tmp_path_factory.mktemp("cli")
    cfg = write_config(root / "cfg.json")
    assert main(["gen-data", "--config", str(cfg), "--out-dir", str(root / "data")]) == 0
    assert main(["train", "--config", str(cfg), "--data-dir", str(root / "data"),
                 "--out-dir", str(root / "run")]) == 0
    return root


class TestConfigValidation:
    def test_unknown_top_level_key(self):
        with pytest.raises(ConfigError, match="bogus"):
            validate_config({"bogus": {}})

    def test_unknown_nested_key(self):
        with pytest.raises(ConfigError, match="train.bogus"):
            validate_config({"train": {"bogus": 1}})

    def test_type_errors(self):
        with pytest.raises(ConfigError, match="data.seed"):
            validate_config({"data": {"seed": "zero"}})
        with pytest.raises(ConfigError, match="model.share_sd"):
            validate_config({"model": {"share_sd": 3}})

    def test_unknown_key_exits_2(self, tmp_path):
        bad = tmp_path / "bad.json"
        bad.write_text(json.dumps({"data": {"nope": 1}}))
        assert main(["gen-data", "--config", str(bad), "--out-dir", str(tmp_path / "d")]) == 2


class TestGenData:
    def test_manifest_counts(self, workspace):
        lines = [json.loads(l) for l in open(workspace / "data" / "manifest.jsonl")]
        assert len(lines) == 12
        for line in lines:
            # J + 1 + C files per utterance
            n_files = len(line["channels"]) + len(line["refs"]) + 1
            assert n_files == 2 + 1 + 1
            for f in line["channels"] + line["refs"] + [line["noise"]]:
                assert (workspace / "data" / f).exists()

    def test_same_seed_byte_identical(self, tmp_path):
        cfg = write_config(tmp_path / "c.json")
        assert main(["gen-data", "--config", str(cfg), "--out-dir", str(tmp_path / "a")]) == 0
        assert main(["gen-data", "--config", str(cfg), "--out-dir", str(tmp_path / "b")]) == 0
        a = (tmp_path / "a" / "manifest.jsonl").read_bytes()
        b = (tmp_path / "b" / "manifest.jsonl").read_bytes()
        assert a == b
        wav = "utt00003_ch0.wav"
        assert (tmp_path / "a" / wav).read_bytes() == (tmp_path / "b" / wav).read_bytes()

    def test_lags_match_manifest_room(self, tmp_path):
        cfg = write_config(tmp_path / "c.json",
                           data={"num_speakers": 1, "channels": 2, "num_utterances": 4,
                                 "noise_snr_db": 60.0})
        assert main(["gen-data", "--config", str(cfg), "--out-dir", str(tmp_path / "d")]) == 0
        for line in map(json.loads, open(tmp_path / "d" / "manifest.jsonl")):
            ch0 = read_wav(tmp_path / "d" / line["channels"][0]).samples[0]
            ch1 = read_wav(tmp_path / "d" / line["channels"][1]).samples[0]
            xc = np.correlate(ch1, ch0, mode="full")
            lag = int(xc.argmax()) - (ch0.size - 1)
            assert lag == line["room"]["delays"][0][1] - line["room"]["delays"][0][0]


class TestTrain:
    def test_metrics_rows(self, workspace):
        rows = (workspace / "run" / "metrics.csv").read_text().strip().splitlines()
        assert rows[0] == "epoch,split,loss_ctc,loss_att,loss_joint,ter"
        body = [r.split(",") for r in rows[1:]]
        assert sum(1 for r in body if r[1] == "train") == 2
        assert sum(1 for r in body if r[1] == "dev") == 2
        assert (workspace / "run" / "best.msar").exists()
        assert (workspace / "run" / "stats.json").exists()

    def test_resume_continues_step_counter(self, workspace, tmp_path):
        from msar.training import load_checkpoint, AdamState
        import msar.data as datamod
        from msar.cli import load_config, build_model, _digest
        from msar.dsp import GlobalStats

        doc = load_config(workspace / "run" / "config.json")
        ds = datamod.Dataset.load(workspace / "data")
        stats = GlobalStats.identity(40)
        model = build_model(doc, ds, stats, np.random.default_rng(0))
        state = load_checkpoint(workspace / "run" / "last.msar", model.parameters(),
                                _digest(doc))
        steps_before = state.step
        assert steps_before > 0
        cfg2 = write_config(tmp_path / "c.json", train={"epochs": 1})
        assert main(["train", "--config", str(cfg2), "--data-dir", str(workspace / "data"),
                     "--out-dir", str(tmp_path / "resumed"),
                     "--resume", str(workspace / "run" / "last.msar")]) == 0
        model2 = build_model(doc, ds, stats, np.random.default_rng(0))
        state2 = load_checkpoint(tmp_path / "resumed" / "last.msar",
                                 model2.parameters(), _digest(doc))
        assert state2.step > steps_before

    def test_deterministic_metrics(self, tmp_path):
        cfg = write_config(tmp_path / "c.json", data={"num_utterances": 8})
        assert main(["gen-data", "--config", str(cfg), "--out-dir", str(tmp_path / "d")]) == 0
        for name in ("r1", "r2"):
            assert main(["train", "--config", str(cfg), "--data-dir", str(tmp_path / "d"),
                         "--out-dir", str(tmp_path / name)]) == 0
        assert ((tmp_path / "r1" / "metrics.csv").read_bytes()
                == (tmp_path / "r2" / "metrics.csv").read_bytes())


class TestEval:
    def test_report_rows(self, workspace, tmp_path):
        out = tmp_path / "eval"
        assert main(["eval", "--checkpoint", str(workspace / "run" / "best.msar"),
                     "--data-dir", str(workspace / "data"),
                     "--out-dir", str(out)]) == 0
        rows = out.joinpath("report.csv").read_text().strip().splitlines()
        assert len(rows) - 1 == 12 * 2
        report = json.loads((out / "report.json").read_text())
        assert 0.0 <= report["mean_ter"]
        assert report["rows"] == 24

    def test_missing_dataset_is_data_error(self, workspace, tmp_path):
        code = main(["eval", "--checkpoint", str(workspace / "run" / "best.msar"),
                     "--data-dir", str(tmp_path / "nothing"),
                     "--out-dir", str(tmp_path / "out")])
        assert code == 3

    def test_empty_dataset_is_data_error(self, workspace, tmp_path):
        empty = tmp_path / "empty"
        empty.mkdir()
        (empty / "manifest.jsonl").write_text("")
        meta = json.loads((workspace / "data" / "meta.json").read_text())
        (empty / "meta.json").write_text(json.dumps(meta))
        code = main(["eval", "--checkpoint", str(workspace / "run" / "best.msar"),
                     "--data-dir", str(empty), "--out-dir", str(tmp_path / "out")])
        assert code == 3


class TestSeparate:
    @pytest.fixture(scope="class")
    def mixture_dir(self, tmp_path_factory):
        root = tmp_path_factory.mktemp("sep")
        import sys
        sys.path.insert(0, str(Path(__file__).parent))
        from helpers import two_speaker_mixture

        mixture, images, noise, _ = two_speaker_mixture(0, channels=2)
        for c in range(2):
            write_wav(root / f"ch{c}.wav", Waveform(SR, mixture.samples[c:c + 1]))
        for j, im in enumerate(images):
            write_wav(root / f"ref{j}.wav", Waveform(SR, im.samples[:1]))
        write_wav(root / "noise.wav", Waveform(SR, noise.samples[:1]))
        return root

    def test_oracle_improvement_and_file_count(self, mixture_dir, tmp_path):
        out = tmp_path / "out"
        assert main(["separate", str(mixture_dir / "ch0.wav"), str(mixture_dir / "ch1.wav"),
                     "--oracle-masks",
                     "--refs", str(mixture_dir / "ref0.wav"), str(mixture_dir / "ref1.wav"),
                     "--noise", str(mixture_dir / "noise.wav"),
                     "--out-dir", str(out)]) == 0
        report = json.loads((out / "separation.json").read_text())
        assert len(report["outputs"]) == 2
        assert sorted(p.name for p in out.glob("spk*.wav")) == ["spk0.wav", "spk1.wav"]
        for entry in report["outputs"]:
            assert entry["si_snr_db"] - entry["mixture_si_snr_db"] > 10.0

    def test_deterministic(self, mixture_dir, tmp_path):
        args = ["separate", str(mixture_dir / "ch0.wav"), str(mixture_dir / "ch1.wav"),
                "--oracle-masks",
                "--refs", str(mixture_dir / "ref0.wav"), str(mixture_dir / "ref1.wav"),
                "--noise", str(mixture_dir / "noise.wav")]
        assert main(args + ["--out-dir", str(tmp_path / "a")]) == 0
        assert main(args + ["--out-dir", str(tmp_path / "b")]) == 0
        assert ((tmp_path / "a" / "spk0.wav").read_bytes()
                == (tmp_path / "b" / "spk0.wav").read_bytes())
        assert ((tmp_path / "a" / "separation.json").read_bytes()
                == (tmp_path / "b" / "separation.json").read_bytes())

    def test_single_channel_rejected(self, mixture_dir, tmp_path):
        code = main(["separate", str(mixture_dir / "ch0.wav"), "--oracle-masks",
                     "--refs", str(mixture_dir / "ref0.wav"),
                     "--out-dir", str(tmp_path / "x")])
        assert code == 2


class TestDereverb:
    def test_near_passthrough_on_anechoic_noise(self, tmp_path):
        rng = np.random.default_rng(0)
        wav = Waveform(SR, 0.1 * rng.standard_normal((1, SR * 40)))
        src = tmp_path / "in.wav"
        write_wav(src, wav)
        out = tmp_path / "out.wav"
        assert main(["dereverb", str(src), str(out)]) == 0
        x = read_wav(src).samples[0]
        y = read_wav(out).samples[0]
        n = min(x.size, y.size)
        lo, hi = 400, n - 400  # interior, per the resynthesis contract
        snr = 10 * np.log10(np.sum(x[lo:hi] ** 2) / np.sum((x[lo:hi] - y[lo:hi]) ** 2))
        assert snr > 25.0
        sidecar = json.loads((tmp_path / "out.wav.json").read_text())
        assert sidecar["taps"] == 10 and sidecar["delay"] == 3 and sidecar["iters"] == 3

    def test_deterministic(self, tmp_path):
        rng = np.random.default_rng(1)
        write_wav(tmp_path / "in.wav", Waveform(SR, 0.1 * rng.standard_normal((1, SR * 2))))
        assert main(["dereverb", str(tmp_path / "in.wav"), str(tmp_path / "a.wav")]) == 0
        assert main(["dereverb", str(tmp_path / "in.wav"), str(tmp_path / "b.wav")]) == 0
        assert (tmp_path / "a.wav").read_bytes() == (tmp_path / "b.wav").read_bytes()

    def test_too_short_is_data_error(self, tmp_path):
        write_wav(tmp_path / "tiny.wav", Waveform(SR, np.zeros((1, 500))))
        assert main(["dereverb", str(tmp_path / "tiny.wav"), str(tmp_path / "o.wav")]) == 3


class TestHelpAndFlags:
    @pytest.mark.parametrize("cmd", ["gen-data", "train", "eval", "separate", "dereverb"])
    def test_help_documents_flags(self, cmd, capsys):
        with pytest.raises(SystemExit) as exc:
            main([cmd, "--help"])
        assert exc.value.code == 0
        out = capsys.readouterr().out
        assert "--seed" in out

    def test_unknown_flag_is_error(self, capsys):
        with pytest.raises(SystemExit) as exc:
            main(["dereverb", "a.wav", "b.wav", "--frobnicate"])
        assert exc.value.code == 2
