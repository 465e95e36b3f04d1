"""Command-line interface: exit codes, output formats, and a tiny
end-to-end run through every training and reporting subcommand."""

import filecmp
import os

import pytest

from accentssl.cli import main

TINY_SETS = [
    "--set", "model.d=8",
    "--set", "model.N=2",
    "--set", "model.heads=2",
    "--set", "model.ffn=16",
    "--set", "model.B_ada=4",
    "--set", "model.conv_stack=4:16:8,4:16:8,4:5:5",
    "--set", "model.C=4",
    "--set", "model.lstm_hidden=4",
    "--set", "model.lstm_layers=1",
]


class TestExitCodes:
    def test_no_subcommand_is_usage_error(self, capsys):
        assert main([]) == 2
        capsys.readouterr()

    def test_unknown_subcommand_is_usage_error(self, capsys):
        assert main(["frobnicate"]) == 2
        capsys.readouterr()

    def test_unknown_config_key_is_config_error(self, capsys):
        rc = main(["params", "--set", "model.nope=3"])
        assert rc == 3
        assert "error:" in capsys.readouterr().err

    def test_bad_config_value_is_config_error(self, capsys):
        rc = main(["params", "--set", "model.d=notanumber"])
        assert rc == 3
        capsys.readouterr()

    def test_missing_config_file_is_config_error(self, tmp_path, capsys):
        rc = main(["params", "--config", str(tmp_path / "absent.cfg")])
        assert rc == 3
        capsys.readouterr()

    def test_config_file_with_bad_line(self, tmp_path, capsys):
        path = tmp_path / "bad.cfg"
        path.write_text("this is not key value\n")
        assert main(["params", "--config", str(path)]) == 3
        capsys.readouterr()

    def test_missing_checkpoint_is_data_error(self, tmp_path, capsys):
        rc = main(["finetune", "--ckpt", str(tmp_path / "no.ckpt"),
                   "--manifest", str(tmp_path / "no.tsv"),
                   "--out", str(tmp_path / "out")])
        assert rc == 3
        capsys.readouterr()


class TestParams:
    def test_reference_preset_table(self, capsys):
        assert main(["params", "--reference", "hubert-large"]) == 0
        out = capsys.readouterr().out
        assert "313,056,244" in out
        assert "adapter share: 16.1%" in out

    def test_preset_with_adapter_override(self, capsys):
        assert main(["params", "--reference", "hubert-large",
                     "--set", "model.B_ada=512"]) == 0
        out = capsys.readouterr().out
        assert "adapter share: 8.1%" in out  # within 0.5 pp of the 8% target
        assert "313,056,244" in out  # base total excludes the adapters

    def test_desk_scale_groups_printed(self, capsys):
        assert main(["params"]) == 0
        out = capsys.readouterr().out
        for group in ("theta_f", "theta_T", "theta_A", "theta_ada", "theta_d"):
            assert group in out

    def test_unknown_preset(self, capsys):
        assert main(["params", "--reference", "wav2vec-giant"]) == 3
        capsys.readouterr()


class TestGradcheckCommand:
    def test_passing_component(self, capsys):
        assert main(["gradcheck", "--component", "weighted_sum"]) == 0
        assert "max rel err" in capsys.readouterr().out

    def test_bad_component_is_usage_error(self, capsys):
        assert main(["gradcheck", "--component", "decoder"]) == 2
        capsys.readouterr()


class TestSynthData:
    def test_deterministic_across_runs(self, tmp_path, capsys):
        for d in ("a", "b"):
            rc = main(["synth-data", "--out", str(tmp_path / d),
                       "--n-utts", "4", "--seed", "7", "--text-seed", "3",
                       "--role", "labeled"])
            assert rc == 0
        capsys.readouterr()
        names = sorted(os.listdir(tmp_path / "a"))
        assert "manifest.tsv" in names
        wavs = [n for n in names if n.endswith(".wav")]
        assert len(wavs) == 4
        match, mismatch, errors = filecmp.cmpfiles(
            tmp_path / "a", tmp_path / "b", names, shallow=False)
        assert not mismatch and not errors

    def test_texts_file(self, tmp_path, capsys):
        texts = tmp_path / "texts.txt"
        texts.write_text("red cat\nblue dog\n")
        rc = main(["synth-data", "--out", str(tmp_path / "c"),
                   "--texts-file", str(texts), "--role", "eval"])
        assert rc == 0
        capsys.readouterr()
        with open(tmp_path / "c" / "manifest.tsv") as fh:
            body = fh.read()
        assert "red cat" in body and "blue dog" in body

    def test_illegal_text_is_data_error(self, tmp_path, capsys):
        texts = tmp_path / "texts.txt"
        texts.write_text("café\n")
        rc = main(["synth-data", "--out", str(tmp_path / "d"),
                   "--texts-file", str(texts)])
        assert rc == 3
        capsys.readouterr()


@pytest.fixture(scope="module")
def workspace(tmp_path_factory):
    """Tiny corpora plus a pretrained checkpoint, built once via the CLI."""
    root = tmp_path_factory.mktemp("cli_e2e")
    texts = root / "texts.txt"
    texts.write_text("red cat\nblue dog\ngo sun\nday time\nword hand\n"
                     "dog day\ncat go\nsun red\n")
    for name, extra in {
        "generic": ["--role", "generic_unlabeled", "--seed", "1"],
        "accent": ["--role", "accent_unlabeled", "--seed", "2",
                   "--formant", "1.25", "--rate", "1.2", "--tilt", "0.4",
                   "--accent-id", "shifted"],
        "labeled": ["--role", "labeled", "--seed", "3"],
        "eval": ["--role", "eval", "--seed", "4"],
    }.items():
        rc = main(["synth-data", "--out", str(root / name),
                   "--texts-file", str(texts)] + extra)
        assert rc == 0

    rc = main(["pretrain", "--manifest", str(root / "generic" / "manifest.tsv"),
               "--out", str(root / "pre"), "--seed", "0"] + TINY_SETS
              + ["--set", "stage.max_steps=4", "--set", "stage.warmup_steps=2",
                 "--set", "stage.eval_every=2"])
    assert rc == 0
    return root


class TestEndToEnd:
    def test_pretrain_artifacts(self, workspace):
        for name in ("best.ckpt", "final.ckpt", "config.txt", "metrics.jsonl"):
            assert os.path.exists(workspace / "pre" / name)
        with open(workspace / "pre" / "config.txt") as fh:
            assert "model.d=8" in fh.read()

    def test_adapt_and_freezing(self, workspace, capsys):
        rc = main(["adapt", "--base", str(workspace / "pre" / "best.ckpt"),
                   "--manifest", str(workspace / "accent" / "manifest.tsv"),
                   "--mode", "adapters",
                   "--out", str(workspace / "ada")] + TINY_SETS
                  + ["--set", "stage.max_steps=3", "--set", "stage.warmup_steps=1",
                     "--set", "stage.eval_every=2"])
        assert rc == 0
        capsys.readouterr()
        from accentssl.pipeline import group_hashes, load_checkpoint
        base = load_checkpoint(str(workspace / "pre" / "best.ckpt"))
        ada = load_checkpoint(str(workspace / "ada" / "best.ckpt"))
        before, after = group_hashes(base.tensors), group_hashes(ada.tensors)
        for frozen in ("theta_f", "theta_T", "theta_A", "theta_d"):
            assert before[frozen] == after[frozen]
        assert before["theta_ada"] != after["theta_ada"]

    def test_finetune_decode_evaluate(self, workspace, capsys):
        rc = main(["finetune", "--ckpt", str(workspace / "ada" / "best.ckpt"),
                   "--manifest", str(workspace / "labeled" / "manifest.tsv"),
                   "--out", str(workspace / "ft")] + TINY_SETS
                  + ["--set", "stage.epochs=2", "--set", "stage.batch_size=4",
                     "--set", "stage.stop_threshold=0"])
        assert rc == 0

        rc = main(["decode", "--ckpt", str(workspace / "ft" / "final.ckpt"),
                   "--manifest", str(workspace / "eval" / "manifest.tsv"),
                   "--out", str(workspace / "dec")] + TINY_SETS)
        assert rc == 0
        with open(workspace / "dec" / "hypotheses.tsv") as fh:
            lines = fh.read().splitlines()
        assert len(lines) == 8
        assert all("\t" in line for line in lines)

        rc = main(["decode", "--ckpt", str(workspace / "ft" / "final.ckpt"),
                   "--manifest", str(workspace / "eval" / "manifest.tsv"),
                   "--lm-texts", str(workspace / "texts.txt"),
                   "--out", str(workspace / "dec_beam")] + TINY_SETS
                  + ["--set", "decode.mode=beam", "--set", "decode.beam=4"])
        assert rc == 0

        rc = main(["evaluate", "--baseline", str(workspace / "ft" / "final.ckpt"),
                   "--adapted", "same=" + str(workspace / "ft" / "final.ckpt"),
                   "--eval", "shifted=" + str(workspace / "eval" / "manifest.tsv"),
                   "--out", str(workspace / "rep")] + TINY_SETS)
        assert rc == 0
        capsys.readouterr()
        rep = workspace / "rep"
        with open(rep / "report.tsv") as fh:
            rows = fh.read().splitlines()
        assert rows[0] == "model\tdataset\twer\twerr_pct"
        assert len(rows) == 3  # header + baseline + the one adapted model
        # identical checkpoints must give WERR exactly 0
        assert rows[2].endswith("0.0000")
        assert os.path.getsize(rep / "figures" / "wer_by_model.png") > 0
        assert os.path.getsize(rep / "figures" / "werr_by_model.png") > 0
        assert os.path.exists(rep / "summary.txt")

    def test_evaluate_requires_eval_set(self, workspace, capsys):
        rc = main(["evaluate", "--baseline", str(workspace / "pre" / "best.ckpt"),
                   "--out", str(workspace / "rep2")])
        assert rc == 3
        capsys.readouterr()
