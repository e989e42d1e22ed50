import subprocess
import sys

import pytest

from visememl.cli import main

CAMPAIGN = """
[gen]
n_train_speakers = 2
n_val_speakers = 1
n_test_speakers = 1
repetitions = 1

[train]
lr = 0.003
epochs = 2
patience = 1
model_dim = 8
ffn_dim = 8
fc_sizes = 8, 8, 8
lm_epochs = 2
lm_patience = 1
lm_hidden = 8

[loss]
terms = NCE+SCE+WKL

[campaign]
name = cli
out = {out}
repeats = 1
fractions = 0.5, 1.0
"""


@pytest.fixture
def config(tmp_path):
    path = tmp_path / "c.ini"
    path.write_text(CAMPAIGN.format(out=tmp_path / "runs"))
    return path


def test_gen_data_train_eval_report(tmp_path, config, capsys):
    data = tmp_path / "data"
    assert main(["gen-data", "--config", str(config), "--out", str(data)]) == 0
    assert (data / "manifest.tsv").exists()

    assert main(["train", "--spec", str(config)]) == 0
    run = tmp_path / "runs" / "cli" / "NCE+SCE+WKL" / "0"
    assert (run / "checkpoint.bin").exists()

    capsys.readouterr()
    lm = tmp_path / "runs" / "cli" / "language" / "checkpoint.bin"
    assert main(["eval", "--checkpoint", str(run / "checkpoint.bin"), "--data", str(data),
                 "--language", str(lm)]) == 0
    out = capsys.readouterr().out
    assert "normal: VER" in out and "silent: VER" in out and "WER" in out


def test_table_sweep_and_report(config, tmp_path, capsys):
    assert main(["sweep", "--campaign", str(config)]) == 0
    out = capsys.readouterr().out
    assert "| 0.5 |" in out and "| 1 |" in out
    camp = tmp_path / "runs" / "cli"
    assert main(["report", "--campaign-dir", str(camp), "--format", "csv"]) == 0
    assert capsys.readouterr().out.startswith("fraction,")
    assert (camp / "sweep.csv").exists()


def test_exit_codes(tmp_path, config):
    bad = tmp_path / "bad.ini"
    bad.write_text("[gen]\nnoise = -1\n")
    assert main(["gen-data", "--config", str(bad), "--out", str(tmp_path / "x")]) == 1
    assert main(["train", "--spec", str(tmp_path / "missing.ini")]) == 1
    assert main(["report", "--campaign-dir", str(tmp_path / "nowhere")]) == 1
    with pytest.raises(SystemExit) as exc:
        main(["report", "--format", "pdf", "--campaign-dir", "."])
    assert exc.value.code == 1

    diverging = tmp_path / "div.ini"
    diverging.write_text(config.read_text().replace("lr = 0.003", "lr = 1e300"))
    assert main(["train", "--spec", str(diverging)]) == 2


def test_module_entry_point():
    proc = subprocess.run([sys.executable, "-m", "visememl.cli", "--help"], capture_output=True, text=True)
    assert proc.returncode == 0
    for cmd in ("gen-data", "train", "eval", "table", "sweep", "report"):
        assert cmd in proc.stdout
