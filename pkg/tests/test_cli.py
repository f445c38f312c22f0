import json

import numpy as np
import pytest

from residual_peft import autodiff as ad
from residual_peft.backbone import PRESETS, Backbone, encode
from residual_peft.checkpoint import (
    CheckpointError,
    load_checkpoint,
    read_checkpoint,
    save_checkpoint,
)
from residual_peft.cli import gradcheck_variant, main
from residual_peft.config import ConfigError, load_config
from residual_peft.data import (
    ManifestEntry,
    SynthSpec,
    read_manifest,
    split_load,
    synthesize,
    write_manifest,
    write_netpbm,
)
from residual_peft.variants import VariantKind, VariantSpec, build_variant, forward

TINY_RUN = """
seed = {seed}
out = "run"

[backbone]
preset = "gradcheck"

[variant]
kind = "{kind}"

[train]
epochs = {epochs}
batch_size = 4
lr0 = 1e-3

[data]
n_train = 8
n_test = 4
texture_cell = 4
dir = "data"
"""


def run_cli(capsys, *argv):
    code = main([str(a) for a in argv])
    out = capsys.readouterr()
    return code, out.out, out.err


def write_config(path, seed=0, kind="mixed", epochs=2):
    path.write_text(TINY_RUN.format(seed=seed, kind=kind, epochs=epochs))
    return path


class TestSynth:
    def test_default_spec_and_digest(self, tmp_path, capsys):
        outs = []
        for name in ("a", "b"):
            code, out, _ = run_cli(capsys, "synth", "--out", tmp_path / name)
            assert code == 0
            outs.append(json.loads(out))
        assert outs[0]["entries"] == 250
        assert len(list((tmp_path / "a" / "data" / "images").iterdir())) == 250
        assert outs[0]["digest"] == outs[1]["digest"]
        code, out, _ = run_cli(capsys, "synth", "--out", tmp_path / "c", "--seed", 1)
        assert json.loads(out)["digest"] != outs[0]["digest"]

    def test_size_not_divisible_writes_nothing(self, tmp_path, capsys):
        cfg = tmp_path / "bad.toml"
        cfg.write_text('out = "run"\n[backbone]\npreset = "desk"\n[data]\nsize = 60\ntexture_cell = 4\n')
        code, _, err = run_cli(capsys, "synth", "--config", cfg)
        assert code == 1 and "divisible" in err
        assert not (tmp_path / "run").exists()


class TestTrainEval:
    def test_train_writes_artifacts_and_eval_reproduces(self, tmp_path, capsys):
        cfg = write_config(tmp_path / "run.toml", epochs=3)
        code, out, err = run_cli(capsys, "train", "--config", cfg)
        assert code == 0, err
        run = tmp_path / "run"
        report = json.loads((run / "report.json").read_text())
        lines = (run / "metrics.jsonl").read_text().splitlines()
        assert len(lines) == 3 and json.loads(lines[0])["epoch"] == 0
        assert report["initial_mae"] == 0.5
        assert "seconds_per_epoch" not in report
        code, out, _ = run_cli(capsys, "eval", "--checkpoint", run / "final.ckpt",
                               "--manifest", tmp_path / "data" / "manifest.tsv", "--config", cfg)
        assert code == 0
        assert json.loads(out)["mae"] == pytest.approx(report["mae"], abs=1e-12)
        code, out, _ = run_cli(capsys, "eval", "--checkpoint", run / "best.ckpt",
                               "--manifest", tmp_path / "data" / "manifest.tsv")
        assert json.loads(out)["mae"] == pytest.approx(report["best_mae"], abs=1e-12)

    def test_lora_report_counts(self, tmp_path, capsys):
        cfg = write_config(tmp_path / "run.toml", kind="lora", epochs=1)
        code, out, _ = run_cli(capsys, "train", "--config", cfg, "--lora-rank", 4)
        report = json.loads((tmp_path / "run" / "report.json").read_text())
        d, depth = PRESETS["gradcheck"].d_model, PRESETS["gradcheck"].depth
        assert code == 0 and report["parameters"]["peft"] == 2 * depth * 2 * d * 4
        assert json.loads(out)["peft_parameters"] == 2 * depth * 2 * d * 4

    def test_missing_manifest(self, tmp_path, capsys):
        code, _, err = run_cli(capsys, "train", "--preset", "gradcheck", "--manifest", tmp_path / "none.tsv",
                               "--out", tmp_path / "o")
        assert code == 1 and "does not exist" in err

    def test_vitb_not_trainable(self, tmp_path, capsys):
        code, _, err = run_cli(capsys, "train", "--preset", "vitb-like", "--out", tmp_path)
        assert code == 1

    def test_eval_zero_model_is_half(self, tmp_path, capsys):
        m = synthesize(SynthSpec(size=16, n_train=2, n_test=3, texture_cell=4), tmp_path / "d")
        model = build_variant(Backbone(PRESETS["gradcheck"]), VariantSpec(kind="lora"))
        save_checkpoint(tmp_path / "zero.ckpt", model)
        code, out, _ = run_cli(capsys, "eval", "--checkpoint", tmp_path / "zero.ckpt", "--manifest", m.path)
        assert code == 0 and json.loads(out)["mae"] == 0.5

    def test_eval_solvable_instance(self, tmp_path, capsys):
        # one image whose left half is foreground; the head is fitted to it in closed form
        cfg = PRESETS["gradcheck"]
        img = np.zeros((16, 16), np.uint8)
        mask = np.zeros((16, 16), np.uint8)
        mask[:, :8] = 255
        (tmp_path / "images").mkdir()
        (tmp_path / "masks").mkdir()
        write_netpbm(tmp_path / "images/a.pgm", img)
        write_netpbm(tmp_path / "masks/a.pgm", mask)
        write_manifest(tmp_path / "manifest.tsv", [ManifestEntry("a", "images/a.pgm", "masks/a.pgm", "test")])
        model = build_variant(Backbone(cfg), VariantSpec())
        sample = split_load(read_manifest(tmp_path / "manifest.tsv"), "test")[0]
        z = encode(sample.image, model.backbone, model.plan)
        tokens = ad.layer_norm(z, model.head._unit, model.head._zero).data
        # least-squares head fit on the single sample: logits +-8 on fg/bg pixels
        target = np.where(mask > 0, 8.0, -8.0)
        g, p = cfg.grid, cfg.patch_size
        per_token = target.reshape(g, p, g, p).transpose(0, 2, 1, 3).reshape(g * g, p * p)
        X = np.hstack([tokens, np.ones((g * g, 1))])
        sol, *_ = np.linalg.lstsq(X, per_token, rcond=None)
        model.head.W.data[...] = sol[:-1]
        model.head.b.data[...] = sol[-1]
        save_checkpoint(tmp_path / "oracle.ckpt", model)
        code, out, _ = run_cli(capsys, "eval", "--checkpoint", tmp_path / "oracle.ckpt",
                               "--manifest", tmp_path / "manifest.tsv")
        assert code == 0 and json.loads(out)["mae"] < 0.05


class TestParams:
    def test_vitb_lora(self, capsys):
        code, out, _ = run_cli(capsys, "params", "--preset", "vitb-like", "--variant", "lora", "--json")
        assert code == 0 and json.loads(out)["peft"] == 147_456

    def test_vitb_adapters(self, capsys):
        code, out, _ = run_cli(capsys, "params", "--preset", "vitb-like", "--variant", "series", "--json")
        assert json.loads(out)["peft"] == 7_100_928 == 24 * (2 * 768 * 192 + 192 + 768)

    @pytest.mark.parametrize("kind", [k.value for k in VariantKind])
    def test_desk_partition(self, capsys, kind):
        code, out, _ = run_cli(capsys, "params", "--preset", "desk", "--variant", kind, "--json")
        counts = json.loads(out)
        assert counts["backbone"] + counts["trainable"] == counts["total"]

    def test_table(self, capsys):
        code, out, _ = run_cli(capsys, "params", "--preset", "vitb-like", "--variant", "lora")
        assert code == 0 and "147,456" in out and "0.15" in out

    def test_bad_flag(self, capsys):
        code, _, _ = run_cli(capsys, "params", "--variant", "prefix")
        assert code == 1


class TestGradcheck:
    @pytest.mark.parametrize("kind", [k.value for k in VariantKind])
    def test_each_variant_passes(self, capsys, kind):
        code, out, _ = run_cli(capsys, "gradcheck", "--variant", kind)
        result = json.loads(out)
        assert code == 0 and result["passed"] and result["max_relative_error"] < 1e-4

    def test_only_trainable_parameters_checked(self):
        result = gradcheck_variant(PRESETS["gradcheck"], VariantSpec(kind="mixed"))
        assert result["checked_parameters"]
        assert all(n.startswith(("peft.", "head.")) for n in result["checked_parameters"])

    def test_corrupted_backward_is_caught(self, capsys, monkeypatch):
        real = ad.softmax

        def broken(a, axis=-1):
            out = real(a, axis)
            # same forward values, but the backward rule forgets the Jacobian
            return ad.record(out.data, (a,), lambda g: (g,))

        monkeypatch.setattr(ad, "softmax", broken)
        result = gradcheck_variant(PRESETS["gradcheck"], VariantSpec(kind="lora"))
        assert result["max_relative_error"] > 1e-2 and not result["passed"]
        code, _, _ = run_cli(capsys, "gradcheck", "--variant", "lora")
        assert code == 2

    def test_desk_too_big(self, capsys):
        code, _, err = run_cli(capsys, "gradcheck", "--preset", "desk")
        assert code == 1 and "gradcheck" in err


class TestCheckpoint:
    def make(self):
        rng = np.random.default_rng(0)
        model = build_variant(Backbone(PRESETS["gradcheck"], seed=4), VariantSpec(kind="parallel"), seed=4)
        for _, t in model.named_peft_parameters():
            t.data[...] = rng.normal(size=t.shape)
        return model

    def test_round_trip(self, tmp_path):
        model = self.make()
        save_checkpoint(tmp_path / "m.ckpt", model, {"epoch": 3})
        loaded, extra = load_checkpoint(tmp_path / "m.ckpt")
        assert extra == {"epoch": 3}
        assert loaded.spec == model.spec
        x = np.random.default_rng(1).random((2, 16, 16))
        assert np.array_equal(forward(loaded, x).data, forward(model, x).data)

    def test_peft_only_file(self, tmp_path):
        model = self.make()
        save_checkpoint(tmp_path / "p.ckpt", model, include_backbone=False)
        meta, params = read_checkpoint(tmp_path / "p.ckpt")
        assert all(n.startswith(("peft.", "head.")) for n in params)
        assert any(n.startswith("peft.") for n in params)

    def test_corruption(self, tmp_path):
        path = save_checkpoint(tmp_path / "m.ckpt", self.make())
        raw = path.read_bytes()
        for blob in (b"NOTACKPT" + raw[8:], raw[:-3], raw + b"\0"):
            (tmp_path / "bad.ckpt").write_bytes(blob)
            with pytest.raises(CheckpointError):
                read_checkpoint(tmp_path / "bad.ckpt")

    def test_bytes_deterministic(self, tmp_path):
        a = save_checkpoint(tmp_path / "a.ckpt", self.make()).read_bytes()
        b = save_checkpoint(tmp_path / "b.ckpt", self.make()).read_bytes()
        assert a == b and a[:8] == b"RPEFTCKP"


class TestConfig:
    def test_defaults(self):
        cfg = load_config(None)
        assert cfg.backbone == PRESETS["desk"]
        assert cfg.variant == VariantSpec()
        assert (cfg.train.lr0, cfg.train.epochs, cfg.train.step_size, cfg.train.gamma) == (1e-4, 100, 10, 0.5)
        assert cfg.data.synth == SynthSpec()

    def test_unknown_key(self, tmp_path):
        (tmp_path / "c.toml").write_text("[train]\nlearning_rate = 1\n")
        with pytest.raises(ConfigError, match="learning_rate"):
            load_config(tmp_path / "c.toml")

    def test_overrides_and_single_seed(self, tmp_path):
        cfg = load_config(write_config(tmp_path / "c.toml", seed=5), {"variant": "lora", "lora_rank": 2, "epochs": 7})
        assert cfg.variant.kind is VariantKind.LORA and cfg.variant.lora_rank == 2
        assert cfg.train.epochs == 7 and cfg.train.seed == 5 and cfg.data.synth.seed == 5
        assert cfg.data.synth.size == 16

    def test_manifest_excludes_synth_keys(self, tmp_path):
        (tmp_path / "c.toml").write_text('[data]\nmanifest = "m.tsv"\nn_train = 3\n')
        with pytest.raises(ConfigError):
            load_config(tmp_path / "c.toml")

    def test_bad_toml(self, tmp_path):
        (tmp_path / "c.toml").write_text("seed = = 1")
        with pytest.raises(ConfigError):
            load_config(tmp_path / "c.toml")
