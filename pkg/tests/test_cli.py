import json
import os

import pytest

from mhfilm import checkpoint as ckpt_io
from mhfilm.cli import EXIT_CHECKPOINT, EXIT_FAIL, EXIT_IO, EXIT_OK, EXIT_USAGE, build_parser, main, read_config_file
from mhfilm.film import MultiHopFiLM

SMALL = """\
# tiny model for plumbing tests
stem_channels = 4
block_channels = 4
head_channels = 4
d_wemb = 8
d_rnn = 8
d_spat = 4
d_cat = 4
d_mlb = 8
final_units = 8
blocks = 2
batch = 8
"""


def run(capsys, *argv):
    code = main([str(a) for a in argv])
    out, err = capsys.readouterr()
    return code, out, err


def last_json(out: str) -> dict:
    return json.loads(out.strip().splitlines()[-1])


@pytest.fixture(scope="module")
def work(tmp_path_factory):
    """A dataset, a small trained checkpoint and its metrics stream, shared across tests."""
    d = tmp_path_factory.mktemp("cli")
    (d / "small.cfg").write_text(SMALL)
    assert main(["gen-data", "--n", "40", "--seed", "3", "--out", str(d / "d.jsonl"), "--split-sizes", "24,8,8"]) == 0
    code = main(["train", "--config", str(d / "small.cfg"), "--dataset", str(d / "d.jsonl"), "--epochs", "2",
                 "--checkpoint", str(d / "m.mhfm"), "--metrics", str(d / "m.jsonl")])
    assert code == 0
    return d


def records(path):
    return [json.loads(line) for line in open(path, encoding="utf-8")]


class TestGenData:
    def test_byte_identical(self, tmp_path, capsys):
        for name in ("a.jsonl", "b.jsonl"):
            assert run(capsys, "gen-data", "--n", 100, "--seed", 7, "--out", tmp_path / name)[0] == EXIT_OK
        assert (tmp_path / "a.jsonl").read_bytes() == (tmp_path / "b.jsonl").read_bytes()

    def test_zero_games_is_usage_error(self, tmp_path, capsys):
        code, _, err = run(capsys, "gen-data", "--n", 0, "--out", tmp_path / "x.jsonl")
        assert code == EXIT_USAGE and "--n" in err
        assert not (tmp_path / "x.jsonl").exists()

    def test_unwritable_path(self, tmp_path, capsys):
        code, _, err = run(capsys, "gen-data", "--n", 5, "--out", tmp_path / "missing" / "dir" / "x.jsonl")
        assert code == EXIT_IO and "I/O" in err

    def test_defaults_summary(self, tmp_path, capsys, monkeypatch):
        monkeypatch.chdir(tmp_path)
        code, out, _ = run(capsys, "gen-data")
        s = last_json(out)
        assert code == EXIT_OK and s["games"] == 3000 and s["grid"] == 7 and s["phi_range"] == [2, 5]
        assert s["phi"] == [2, 5] and sum(s["splits"].values()) == 3000 and s["vocab_size"] > 6
        assert (tmp_path / "games.jsonl").exists()

    def test_bad_split_sizes(self, tmp_path, capsys):
        code = run(capsys, "gen-data", "--n", 10, "--split-sizes", "5,5", "--out", tmp_path / "x.jsonl")[0]
        assert code == EXIT_USAGE

    def test_bad_flag(self, capsys):
        assert run(capsys, "gen-data", "--bogus")[0] == EXIT_USAGE


class TestTrain:
    def test_final_line_is_test(self, work):
        recs = records(work / "m.jsonl")
        assert recs[-1]["split"] == "test"
        assert [r["split"] for r in recs[:-1]] == ["train", "valid"] * 2
        assert {"epoch", "loss", "error", "task", "mode"} <= set(recs[-1])

    def test_checkpoint_magic(self, work):
        raw = (work / "m.mhfm").read_bytes()
        assert raw[:4] == b"MHFM" and int.from_bytes(raw[4:8], "little") == 1

    def test_missing_dataset(self, tmp_path, capsys):
        code, _, err = run(capsys, "train", "--dataset", tmp_path / "none.jsonl", "--checkpoint", tmp_path / "m")
        assert code == EXIT_IO and "none.jsonl" in err

    def test_resume_restores_step_count(self, work, tmp_path, capsys):
        before = ckpt_io.load(work / "m.mhfm")
        code = run(capsys, "train", "--config", work / "small.cfg", "--dataset", work / "d.jsonl", "--epochs", 1,
                   "--resume", work / "m.mhfm", "--checkpoint", tmp_path / "r.mhfm",
                   "--metrics", tmp_path / "r.jsonl")[0]
        assert code == EXIT_OK
        after = ckpt_io.load(tmp_path / "r.mhfm")
        steps_per_epoch = 3  # 24 train games in batches of 8
        assert before.meta["optimizer"]["t"] == 2 * steps_per_epoch
        assert after.meta["optimizer"]["t"] == before.meta["optimizer"]["t"] + steps_per_epoch
        assert after.meta["epoch"] == before.meta["epoch"] + 1
        assert records(tmp_path / "r.jsonl")[0]["epoch"] == before.meta["epoch"] + 1

    def test_modes_compare(self, work, tmp_path, capsys):
        for mode in ("single_hop", "multi_hop"):
            code = run(capsys, "train", "--config", work / "small.cfg", "--dataset", work / "d.jsonl", "--epochs", 1,
                       "--mode", mode, "--checkpoint", tmp_path / f"{mode}.mhfm",
                       "--metrics", tmp_path / f"{mode}.jsonl")[0]
            assert code == EXIT_OK
        code, out, _ = run(capsys, "compare", tmp_path / "single_hop.jsonl", tmp_path / "multi_hop.jsonl",
                           "--out", tmp_path / "cmp.png")
        rows = [line.split("\t") for line in out.strip().splitlines()]
        assert code == EXIT_OK and rows[0][:3] == ["run", "task", "mode"]
        assert [r[2] for r in rows[1:3]] == ["single_hop", "multi_hop"]
        assert (tmp_path / "cmp.png").stat().st_size > 0

    def test_diverged_exit(self, work, tmp_path, capsys):
        with pytest.warns(RuntimeWarning):
            code, _, err = run(capsys, "train", "--config", work / "small.cfg", "--dataset", work / "d.jsonl",
                               "--epochs", 2, "--lr", 1e300, "--checkpoint", tmp_path / "x.mhfm",
                               "--metrics", tmp_path / "x.jsonl")
        assert code == 3 and "diverged" in err


class TestEval:
    def test_matches_best_valid_record(self, work, capsys):
        code, out, _ = run(capsys, "eval", "--dataset", work / "d.jsonl", "--checkpoint", work / "m.mhfm",
                           "--split", "valid")
        rec = last_json(out)
        best = ckpt_io.load(work / "m.mhfm").meta["best_epoch"]
        logged = next(r for r in records(work / "m.jsonl") if r["split"] == "valid" and r["epoch"] == best)
        assert code == EXIT_OK
        assert rec["loss"] == pytest.approx(logged["loss"], abs=1e-12)
        assert rec["error"] == pytest.approx(logged["error"], abs=1e-12)

    def test_matches_test_record(self, work, capsys):
        rec = last_json(run(capsys, "eval", "--dataset", work / "d.jsonl", "--checkpoint", work / "m.mhfm")[1])
        logged = records(work / "m.jsonl")[-1]
        assert rec["loss"] == pytest.approx(logged["loss"], abs=1e-12) and rec["error"] == logged["error"]

    def test_corrupt_magic(self, work, tmp_path, capsys):
        bad = tmp_path / "bad.mhfm"
        bad.write_bytes(b"XXXX" + (work / "m.mhfm").read_bytes()[4:])
        code, _, err = run(capsys, "eval", "--dataset", work / "d.jsonl", "--checkpoint", bad)
        assert code == EXIT_CHECKPOINT and "magic" in err

    def test_architecture_mismatch_names_field(self, work, capsys):
        code, _, err = run(capsys, "eval", "--dataset", work / "d.jsonl", "--checkpoint", work / "m.mhfm",
                           "--blocks", 3)
        assert code == EXIT_CHECKPOINT and "blocks" in err

    def test_tensor_shape_mismatch_names_dimension(self, work, tmp_path, capsys):
        ck = ckpt_io.load(work / "m.mhfm")
        name = "encoder.embed.table"
        ck.tensors[name] = ck.tensors[name][:, :-1]
        ckpt_io.save(tmp_path / "s.mhfm", ck)
        code, _, err = run(capsys, "eval", "--dataset", work / "d.jsonl", "--checkpoint", tmp_path / "s.mhfm")
        assert code == EXIT_CHECKPOINT and name in err and "dimension 1" in err

    def test_missing_checkpoint(self, work, tmp_path, capsys):
        code = run(capsys, "eval", "--dataset", work / "d.jsonl", "--checkpoint", tmp_path / "none.mhfm")[0]
        assert code == EXIT_IO

    def test_pointer_thresholds(self, work, tmp_path, capsys):
        data = tmp_path / "r.jsonl"
        assert run(capsys, "gen-data", "--n", 30, "--seed", 4, "--referit", "--out", data,
                   "--split-sizes", "20,5,5")[0] == EXIT_OK
        code = run(capsys, "train", "--config", work / "small.cfg", "--dataset", data, "--task", "pointer",
                   "--epochs", 1, "--checkpoint", tmp_path / "p.mhfm", "--metrics", tmp_path / "p.jsonl")[0]
        assert code == EXIT_OK
        rec = last_json(run(capsys, "eval", "--dataset", data, "--checkpoint", tmp_path / "p.mhfm")[1])
        assert rec["task"] == "pointer"
        for t in ("0.3", "0.5", "0.7"):
            assert 0.0 <= rec[f"error@{t}"] <= 1.0
        assert rec["error@0.3"] <= rec["error@0.5"] <= rec["error@0.7"]


class TestGradcheck:
    def test_all_modes_pass(self, capsys):
        code, out, err = run(capsys, "gradcheck")
        rows = [line.split("\t") for line in out.strip().splitlines()[1:]]
        assert code == EXIT_OK and json.loads(err.strip().splitlines()[-1])["passed"]
        assert {r[0] for r in rows} == {"baseline_nn_mlb", "single_hop", "multi_hop", "multi_hop_img"}
        assert all(r[3] == "ok" for r in rows)

    def test_every_tensor_listed_once(self, capsys):
        from mhfilm.training import micro_config

        code, out, _ = run(capsys, "gradcheck", "--mode", "multi_hop")
        names = [line.split("\t")[1] for line in out.strip().splitlines()[1:]]
        expected = [n for n, _ in MultiHopFiLM(micro_config("multi_hop", seed=11)).named_parameters()]
        assert code == EXIT_OK and names == expected and len(set(names)) == len(names)

    def test_tight_tolerance_fails(self, capsys):
        code, out, err = run(capsys, "gradcheck", "--mode", "multi_hop", "--tolerance", 1e-9)
        assert code == EXIT_FAIL and "FAIL" in out
        assert json.loads(err.strip().splitlines()[-1])["passed"] is False


class TestDumpAttention:
    def test_traces_and_summary(self, work, tmp_path, capsys):
        out_dir = tmp_path / "att"
        code, out, _ = run(capsys, "dump-attention", "--dataset", work / "d.jsonl", "--checkpoint", work / "m.mhfm",
                           "--split", "valid", "--out", out_dir, "--plots", 1)
        summary = json.loads((out_dir / "summary.json").read_text())
        assert code == EXIT_OK and summary == last_json(out)
        assert 0.0 <= summary["attn_last_q_rate"] <= 1.0 and 0.0 <= summary["attn_answer_rate"] <= 1.0
        lines = (out_dir / "hop_traces.tsv").read_text().splitlines()
        n_games = 0
        i = 0
        while i < len(lines):
            game_id, pipe, k, t = lines[i].split()
            assert pipe == "crop" and int(k) == 2
            rows = [[float(v) for v in line.split("\t")] for line in lines[i + 1 : i + 1 + int(k)]]
            assert all(len(r) == int(t) and sum(r) == pytest.approx(1.0, abs=1e-9) for r in rows)
            i += 1 + int(k)
            n_games += 1
        assert n_games == summary["examples"] == 8
        assert len(list(out_dir.glob("*.png"))) == 1

    def test_baseline_has_no_hops(self, work, tmp_path, capsys):
        code = run(capsys, "train", "--config", work / "small.cfg", "--dataset", work / "d.jsonl", "--epochs", 1,
                   "--mode", "baseline_nn_mlb", "--checkpoint", tmp_path / "b.mhfm",
                   "--metrics", tmp_path / "b.jsonl")[0]
        assert code == EXIT_OK
        code = run(capsys, "dump-attention", "--dataset", work / "d.jsonl", "--checkpoint", tmp_path / "b.mhfm",
                   "--out", tmp_path / "att")[0]
        assert code == EXIT_USAGE


class TestConfig:
    def test_help_lists_defaults(self, capsys):
        parser = build_parser()
        sub = parser._subparsers._group_actions[0].choices
        for name, p in sub.items():
            for action in p._actions:
                if action.option_strings and action.dest != "help":
                    assert "(default:" in action.help, (name, action.option_strings)
        code, text, _ = run(capsys, "train", "--help")
        assert code == EXIT_OK
        assert "--lr" in text and "0.0003" in text and "--epochs" in text

    def test_file_then_flags(self, work, tmp_path, capsys):
        cfg = tmp_path / "run.cfg"
        cfg.write_text(SMALL + "epochs = 1\nlr = 0.01\n")
        code = run(capsys, "train", "--config", cfg, "--lr", 0.002, "--dataset", work / "d.jsonl",
                   "--checkpoint", tmp_path / "c.mhfm", "--metrics", tmp_path / "c.jsonl")[0]
        assert code == EXIT_OK
        ck = ckpt_io.load(tmp_path / "c.mhfm")
        assert ck.meta["optimizer"]["lr"] == 0.002  # flag beats file
        assert ck.meta["config"]["stem_channels"] == 4  # file beats default
        assert ck.meta["config"]["dropout"] == 0.5  # default survives
        assert max(r["epoch"] for r in records(tmp_path / "c.jsonl")) == 1

    def test_unknown_key(self, work, tmp_path, capsys):
        cfg = tmp_path / "bad.cfg"
        cfg.write_text("colour = red\n")
        code, _, err = run(capsys, "gen-data", "--config", cfg, "--out", tmp_path / "x.jsonl")
        assert code == EXIT_USAGE and "colour" in err

    def test_read_config_file(self, tmp_path):
        cfg = tmp_path / "c.cfg"
        cfg.write_text("a-b = 1  # note\n\n# skip\nc=x\n")
        assert read_config_file(cfg) == {"a_b": "1", "c": "x"}


class TestDeterminism:
    def test_train_metrics_bitwise(self, work, tmp_path, capsys):
        outs = []
        for name in ("a", "b"):
            code = run(capsys, "train", "--config", work / "small.cfg", "--dataset", work / "d.jsonl",
                       "--epochs", 1, "--seed", 5, "--checkpoint", tmp_path / f"{name}.mhfm",
                       "--metrics", tmp_path / f"{name}.jsonl")[0]
            assert code == EXIT_OK
            outs.append(((tmp_path / f"{name}.jsonl").read_bytes(), (tmp_path / f"{name}.mhfm").read_bytes()))
        assert outs[0] == outs[1]


def test_module_entry_point():
    import subprocess
    import sys

    res = subprocess.run([sys.executable, "-m", "mhfilm", "--help"], capture_output=True, text=True,
                         env={**os.environ, "PYTHONWARNINGS": "ignore"})
    assert res.returncode == 0 and "gen-data" in res.stdout
