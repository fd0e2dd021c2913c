"""Config parsing and the command-line surface, driven in-process."""

import json
import re

import numpy as np
import pytest

from admeta.cli import main
from admeta.config import RunConfig, parse_config_text
from admeta.errors import ConfigError
from admeta.tasks import load_image_source

TINY = dict(
    source="synth", trainer="maml", model="mlp", ways=2, shots=1,
    query_per_class=2, synth_dim=4, synth_classes=6, synth_samples=8,
    synth_spread=0.1, train_classes=4, val_classes=0, test_classes=2,
    hidden="4", alpha1=0.05, beta1=0.01, inner_steps_train=2,
    inner_steps_test=2, meta_batch=2, episodes=3, eps_train=0.1,
    eps_test="0.2", num_test_tasks=2, seed=0, checkpoint_every=2,
)


def write_cfg(tmp_path, name="run.cfg", **kw):
    base = dict(TINY)
    base.setdefault("out", str(tmp_path / "run"))
    base.update(kw)
    path = tmp_path / name
    path.write_text("".join(f"{k} = {v}\n" for k, v in base.items()),
                    encoding="utf-8")
    return path


class TestConfigParsing:
    def test_only_source_is_required(self):
        cfg = RunConfig.from_text("source = synth\n")
        assert cfg.trainer == "adml"
        assert cfg.ways == 5
        assert cfg.hidden == (32,)
        assert cfg.eps_test == (2.0, 0.2)
        assert cfg.clip is True
        assert cfg.out == "runs/out"

    def test_missing_source_rejected(self):
        with pytest.raises(ConfigError):
            RunConfig.from_text("ways = 5\n")

    def test_echo_round_trips(self):
        cfg = RunConfig.from_text(
            "source = synth\nhidden = 64,32\neps_test = 2,0.25\n"
            "clip = false\nalpha1 = 0.25\n"
        )
        again = RunConfig.from_text(cfg.echo())
        assert again == cfg
        assert again.echo() == cfg.echo()

    def test_comments_and_blanks_skipped(self):
        items = parse_config_text("# header\n\n  source = synth  \n# tail\n")
        assert items == {"source": "synth"}

    @pytest.mark.parametrize("text", [
        "source = synth\nbogus_key = 1\n",
        "source = synth\nsource = synth\n",
        "source synth\n",
        "source = synth\nways = five\n",
        "source = synth\nclip = maybe\n",
        "source = synth\nalpha1 = fast\n",
    ])
    def test_malformed_text_rejected(self, text):
        with pytest.raises(ConfigError):
            RunConfig.from_text(text)

    @pytest.mark.parametrize("raw,value", [
        ("true", True), ("1", True), ("yes", True),
        ("false", False), ("0", False), ("no", False),
    ])
    def test_bool_spellings(self, raw, value):
        cfg = RunConfig.from_text(f"source = synth\nclip = {raw}\n")
        assert cfg.clip is value

    def test_int_list_parsing(self):
        cfg = RunConfig.from_text("source = synth\nhidden = 64, 32\n")
        assert cfg.hidden == (64, 32)
        cfg = RunConfig.from_text("source = synth\nhidden =\n")
        assert cfg.hidden == ()

    @pytest.mark.parametrize("text", [
        "source = tarfile\n",
        "source = synth\nmodel = resnet\n",
        "source = synth\ntrainer = reptile\n",
        "source = images\n",
    ])
    def test_semantic_validation(self, text):
        with pytest.raises(ConfigError):
            RunConfig.from_text(text)

    def test_overrides_win(self):
        cfg = RunConfig.from_text("source = synth\nseed = 1\n",
                                  {"seed": "7", "eps_test": "0.5"})
        assert cfg.seed == 7
        assert cfg.eps_test == (0.5,)
        with pytest.raises(ConfigError):
            RunConfig.from_text("source = synth\n", {"nope": "1"})

    def test_derived_objects(self):
        cfg = RunConfig.from_text(
            "source = synth\nsynth_dim = 4\nsynth_classes = 6\n"
            "synth_samples = 8\nways = 3\nhidden = 5\nalpha1 = 0.2\nshots = 2\n"
        )
        source = cfg.build_source()
        assert source.num_classes == 6
        assert source.geometry == (4,)
        spec = cfg.model_spec(source.geometry)
        assert spec.ways == 3
        attack = cfg.attack_for(source, epsilon=0.3)
        assert attack.epsilon == 0.3
        assert attack.value_range == source.value_range
        mcfg = cfg.meta_config(attack)
        assert mcfg.alpha1 == 0.2
        assert mcfg.shots == 2
        assert mcfg.attack is attack

    def test_conv_model_needs_image_geometry(self):
        cfg = RunConfig.from_text("source = synth\nmodel = conv4\n")
        with pytest.raises(ConfigError):
            cfg.model_spec((16,))
        spec = cfg.model_spec((3, 12, 12))
        assert spec.kind == "conv4"


@pytest.fixture(scope="module")
def trained(tmp_path_factory):
    """One tiny meta-train run shared by the read-only CLI tests."""
    tmp = tmp_path_factory.mktemp("cli_train")
    cfg_path = write_cfg(tmp)
    assert main(["meta-train", "--config", str(cfg_path)]) == 0
    return cfg_path, tmp / "run"


class TestMetaTrainCommand:
    def test_artifacts_and_log_lines(self, tmp_path, capsys):
        cfg_path = write_cfg(tmp_path)
        assert main(["meta-train", "--config", str(cfg_path)]) == 0
        out = capsys.readouterr().out
        lines = out.strip().splitlines()
        pat = re.compile(r"^episode=(\d+) mean_inner_loss=\d+\.\d{6} "
                         r"wall_time=\d+\.\d{3}s$")
        episodes = [int(pat.match(l).group(1)) for l in lines[:-1]]
        assert episodes == [0, 1, 2]
        assert lines[-1].startswith("wrote ")
        rundir = tmp_path / "run"
        assert (rundir / "ckpt_final.bin").exists()
        assert (rundir / "ckpt_000002.bin").exists()

    def test_rerun_is_byte_identical(self, tmp_path):
        cfg_path = write_cfg(tmp_path)
        assert main(["meta-train", "--config", str(cfg_path)]) == 0
        first = (tmp_path / "run" / "ckpt_final.bin").read_bytes()
        assert main(["meta-train", "--config", str(cfg_path)]) == 0
        assert (tmp_path / "run" / "ckpt_final.bin").read_bytes() == first

    def test_missing_config_flag(self, capsys):
        assert main(["meta-train"]) == 2
        assert "config error" in capsys.readouterr().err

    def test_unknown_key_in_file(self, tmp_path, capsys):
        cfg_path = write_cfg(tmp_path, warp_speed=9)
        assert main(["meta-train", "--config", str(cfg_path)]) == 2
        assert "config error" in capsys.readouterr().err

    def test_no_subcommand_is_a_usage_error(self):
        with pytest.raises(SystemExit) as e:
            main([])
        assert e.value.code == 2


class TestMetaTestCommand:
    def test_grid_artifacts_from_checkpoint_echo(self, trained, tmp_path, capsys):
        _, rundir = trained
        outdir = tmp_path / "eval"
        code = main(["meta-test", str(rundir / "ckpt_final.bin"),
                     "--out", str(outdir)])
        assert code == 0
        for name in ("grid.csv", "curves.csv", "report.json"):
            assert (outdir / name).exists()
        grid = (outdir / "grid.csv").read_text().strip().splitlines()
        assert grid[0] == "support,query,eps,mean_accuracy,ci_halfwidth"
        cells = [tuple(l.split(",")[:3]) for l in grid[1:]]
        assert cells == [  # one-shot run: no mixed40 rows
            ("clean", "clean", "0.2"),
            ("clean", "adversarial", "0.2"),
            ("adversarial", "clean", "0.2"),
            ("adversarial", "adversarial", "0.2"),
        ]
        for line in grid[1:]:
            acc, ci = map(float, line.split(",")[3:])
            assert 0.0 <= acc <= 1.0 and ci >= 0.0
        printed = capsys.readouterr().out.strip().splitlines()
        assert len(printed) == 4
        assert printed[0].startswith("clean/clean eps=0.2: ")

    def test_json_mirrors_csv(self, trained, tmp_path):
        _, rundir = trained
        outdir = tmp_path / "eval"
        assert main(["meta-test", str(rundir / "ckpt_final.bin"),
                     "--out", str(outdir)]) == 0
        payload = json.loads((outdir / "report.json").read_text())
        assert payload["ways"] == 2 and payload["shots"] == 1
        assert payload["num_tasks"] == 2
        assert len(payload["grid"]) == 4
        assert len(payload["curves"]) == 4 * 3  # inner_steps_test + 1 per cell
        rerender = tmp_path / "rerender"
        assert main(["report", str(outdir / "report.json"),
                     "--out", str(rerender)]) == 0
        for name in ("grid.csv", "curves.csv"):
            assert (rerender / name).read_bytes() == (outdir / name).read_bytes()

    def test_deterministic_and_thread_invariant(self, trained, tmp_path, monkeypatch):
        _, rundir = trained
        ckpt = str(rundir / "ckpt_final.bin")
        a, b, c = tmp_path / "a", tmp_path / "b", tmp_path / "c"
        assert main(["meta-test", ckpt, "--out", str(a)]) == 0
        assert main(["meta-test", ckpt, "--out", str(b)]) == 0
        monkeypatch.setenv("ADML_THREADS", "3")
        assert main(["meta-test", ckpt, "--out", str(c)]) == 0
        blob = (a / "grid.csv").read_bytes()
        assert (b / "grid.csv").read_bytes() == blob
        assert (c / "grid.csv").read_bytes() == blob
        blob = (a / "curves.csv").read_bytes()
        assert (b / "curves.csv").read_bytes() == blob
        assert (c / "curves.csv").read_bytes() == blob

    def test_flag_overrides_reach_the_grid(self, trained, tmp_path):
        _, rundir = trained
        outdir = tmp_path / "eval"
        assert main(["meta-test", str(rundir / "ckpt_final.bin"),
                     "--out", str(outdir), "--eps", "0.1,0.3",
                     "--tasks", "1"]) == 0
        grid = (outdir / "grid.csv").read_text().strip().splitlines()
        eps = [l.split(",")[2] for l in grid[1:]]
        assert eps == ["0.1", "0.3"] * 4
        payload = json.loads((outdir / "report.json").read_text())
        assert payload["num_tasks"] == 1

    def test_corrupt_checkpoint_is_a_data_error(self, tmp_path, capsys):
        bad = tmp_path / "bad.bin"
        bad.write_bytes(b"ADML" + b"\x01\x00")
        assert main(["meta-test", str(bad)]) == 3
        assert "data error" in capsys.readouterr().err

    def test_truncated_magic_is_a_data_error(self, tmp_path):
        bad = tmp_path / "bad.bin"
        bad.write_bytes(b"JUNKJUNKJUNKJUNK")
        assert main(["meta-test", str(bad)]) == 3


class TestGenAdvCommand:
    def test_exported_episode_loads_as_a_source(self, tmp_path, capsys):
        cfg_path = write_cfg(tmp_path, out=str(tmp_path / "adv"))
        assert main(["gen-adv", "--config", str(cfg_path), "--eps", "0.3"]) == 0
        outdir = tmp_path / "adv"
        manifest = outdir / "manifest.tsv"
        lines = manifest.read_text().strip().splitlines()
        # one episode: 2 ways x (1 support + 2 query) samples
        assert len(lines) == 6
        source = load_image_source(outdir, manifest)
        assert source.num_classes == 2
        assert sorted(source.class_sizes()) == [3, 3]
        assert source.geometry == (4,)
        assert "wrote 6 adversarial samples" in capsys.readouterr().out

    def test_multiple_tasks(self, tmp_path):
        cfg_path = write_cfg(tmp_path, out=str(tmp_path / "adv"))
        assert main(["gen-adv", "--config", str(cfg_path), "--tasks", "2"]) == 0
        lines = (tmp_path / "adv" / "manifest.tsv").read_text().strip().splitlines()
        assert len(lines) == 12
        names = {l.split("\t")[0] for l in lines}
        assert names == {"task000_class0", "task000_class1",
                         "task001_class0", "task001_class1"}

    def test_checkpoint_model_is_used(self, trained, tmp_path):
        cfg_path, rundir = trained
        out_a = tmp_path / "a"
        out_b = tmp_path / "b"
        assert main(["gen-adv", "--config", str(cfg_path),
                     "--out", str(out_a)]) == 0
        assert main(["gen-adv", str(rundir / "ckpt_final.bin"),
                     "--config", str(cfg_path), "--out", str(out_b)]) == 0
        blob_a = sorted((out_a / "samples").iterdir())[0].read_bytes()
        blob_b = sorted((out_b / "samples").iterdir())[0].read_bytes()
        assert blob_a != blob_b

    def test_missing_config_flag(self, capsys):
        assert main(["gen-adv"]) == 2
        assert "config error" in capsys.readouterr().err


class TestGradcheckCommand:
    def test_clean_run_passes(self, capsys):
        assert main(["gradcheck"]) == 0
        out = capsys.readouterr().out
        assert "all" in out and "checks passed" in out
        assert "FAIL\n" not in out
        assert re.search(r"^relu\s+max_err=\S+ tol=\S+ PASS$", out, re.M)

    def test_injected_fault_is_caught(self, capsys):
        assert main(["gradcheck", "--inject-fault", "relu"]) == 1
        captured = capsys.readouterr()
        assert "FAILED: relu" in captured.err
        assert re.search(r"^relu\s+.*FAIL$", captured.out, re.M)


class TestReportCommand:
    def test_missing_report_is_a_data_error(self, tmp_path, capsys):
        assert main(["report", str(tmp_path / "nope.json")]) == 3
        assert "data error" in capsys.readouterr().err

    def test_malformed_report_is_a_data_error(self, tmp_path):
        bad = tmp_path / "report.json"
        bad.write_text("{not json")
        assert main(["report", str(bad)]) == 3

    def test_default_output_is_alongside_the_report(self, trained, tmp_path):
        _, rundir = trained
        evaldir = tmp_path / "eval"
        assert main(["meta-test", str(rundir / "ckpt_final.bin"),
                     "--out", str(evaldir)]) == 0
        moved = tmp_path / "moved"
        moved.mkdir()
        (moved / "report.json").write_bytes((evaldir / "report.json").read_bytes())
        assert main(["report", str(moved / "report.json")]) == 0
        assert (moved / "grid.csv").read_bytes() == (evaldir / "grid.csv").read_bytes()
        assert (moved / "curves.csv").read_bytes() == (evaldir / "curves.csv").read_bytes()
