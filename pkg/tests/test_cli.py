import csv
import io

import numpy as np
import pytest

from rbe.cli import main
from rbe.engine import load_index, read_embeddings
from rbe.model import read_checkpoint_header
from rbe.trainer import read_history

SMALL = ["--m", "16", "--n", "8"]
FAST = [*SMALL, "--hash-dim", "1024", "--epochs", "3", "--seed", "1"]


@pytest.fixture(scope="module")
def workdir(tmp_path_factory):
    return tmp_path_factory.mktemp("cli")


@pytest.fixture(scope="module")
def model_path(workdir):
    path = workdir / "model.ckpt"
    assert main(["train", "--out", str(path), *FAST]) == 0
    return path


@pytest.fixture(scope="module")
def keyword_file(workdir):
    path = workdir / "keywords.txt"
    lines = [f"{i}\t{text}" for i, text in enumerate(
        ["cheap flights", "car insurance quote", "running shoes", "used cars", "home loans", "pizza delivery"] * 1
    )]
    path.write_text("\n".join(lines) + "\n", encoding="utf-8")
    return path


@pytest.fixture(scope="module")
def embeddings_path(workdir, model_path, keyword_file):
    path = workdir / "kw.emb"
    assert main(["encode", "--model", str(model_path), "--input", str(keyword_file), "--out", str(path)]) == 0
    return path


@pytest.fixture(scope="module")
def index_path(workdir, embeddings_path):
    path = workdir / "kw.idx"
    assert main(["build", "--embeddings", str(embeddings_path), "--partitions", "2", "--out", str(path)]) == 0
    return path


class TestTrain:
    def test_checkpoint_and_history(self, model_path):
        header = read_checkpoint_header(model_path)
        assert (header["m"], header["n"], header["u"], header["v"], header["hash_dim"]) == (16, 8, 1, 1, 1024)
        hist = read_history(model_path.with_name(model_path.name + ".metrics.jsonl"))
        assert len(hist) == 4  # initial evaluation plus one record per epoch
        assert hist[-1].valid_loss < hist[0].valid_loss

    def test_plane_counts(self, tmp_path, capsys):
        out = tmp_path / "m.ckpt"
        assert main(["train", "--out", str(out), *SMALL, "--u", "3", "--v", "2", "--hash-dim", "256", "--epochs", "1"]) == 0
        assert "4 query planes, 3 keyword planes" in capsys.readouterr().out
        header = read_checkpoint_header(out)
        assert (header["u"], header["v"]) == (3, 2)

    def test_custom_data_with_split(self, tmp_path):
        data = tmp_path / "pairs.tsv"
        data.write_text("".join(f"query {i}\tkeyword {i}\n" for i in range(60)), encoding="utf-8")
        out = tmp_path / "m.ckpt"
        hist = tmp_path / "h.jsonl"
        args = ["train", "--data", str(data), "--out", str(out), "--history", str(hist), "--batch-size", "22"]
        assert main(args + [*SMALL, "--hash-dim", "256", "--epochs", "2"]) == 0
        assert len(read_history(hist)) == 3

    def test_missing_data(self, tmp_path, capsys):
        assert main(["train", "--data", str(tmp_path / "nope.tsv"), "--out", str(tmp_path / "m")]) == 2
        assert "not found" in capsys.readouterr().err

    def test_malformed_data(self, tmp_path):
        bad = tmp_path / "bad.tsv"
        bad.write_text("only one column\n", encoding="utf-8")
        assert main(["train", "--data", str(bad), "--out", str(tmp_path / "m")]) == 1

    def test_bad_option(self, tmp_path):
        assert main(["train", "--out", str(tmp_path / "m"), "--estimator", "nope"]) == 2
        assert main(["train", "--out", str(tmp_path / "m"), "--gamma", "0"]) == 2


class TestEncode:
    def test_records(self, embeddings_path):
        emb = read_embeddings(embeddings_path)
        assert emb.dim == 8 and emb.planes.shape == (2, 6, 1)
        assert list(emb.ids) == list(range(6))
        assert np.all(emb.magnitudes > 0)

    def test_identical_lines_identical_records(self, tmp_path, model_path):
        src = tmp_path / "in.txt"
        src.write_text("red running shoes\nred running shoes\n", encoding="utf-8")
        out = tmp_path / "o.emb"
        assert main(["encode", "--model", str(model_path), "--input", str(src), "--out", str(out)]) == 0
        emb = read_embeddings(out)
        assert list(emb.ids) == [0, 1]
        np.testing.assert_array_equal(emb.planes[:, 0], emb.planes[:, 1])
        assert emb.magnitudes[0] == emb.magnitudes[1]

    def test_empty_line_warns(self, tmp_path, model_path, caplog, capsys):
        src = tmp_path / "in.txt"
        src.write_text("shoes\n\nhats\n", encoding="utf-8")
        out = tmp_path / "o.emb"
        assert main(["encode", "--model", str(model_path), "--input", str(src), "--out", str(out)]) == 0
        assert "empty text" in caplog.text
        assert "skipped 1" in capsys.readouterr().out
        assert list(read_embeddings(out).ids) == [0, 2]

    def test_query_side(self, tmp_path, model_path):
        src = tmp_path / "in.txt"
        src.write_text("shoes\n", encoding="utf-8")
        out = tmp_path / "o.emb"
        assert main(["encode", "--model", str(model_path), "--input", str(src), "--out", str(out), "--side", "query"]) == 0
        assert read_embeddings(out).planes.shape[0] == 2

    def test_duplicate_ids(self, tmp_path, model_path):
        src = tmp_path / "in.txt"
        src.write_text("1\tshoes\n1\thats\n", encoding="utf-8")
        assert main(["encode", "--model", str(model_path), "--input", str(src), "--out", str(tmp_path / "o")]) == 1

    def test_missing_model(self, tmp_path, keyword_file):
        args = ["encode", "--model", str(tmp_path / "x"), "--input", str(keyword_file), "--out", str(tmp_path / "o")]
        assert main(args) == 2


class TestBuild:
    def test_payload_report(self, tmp_path, embeddings_path, capsys):
        out = tmp_path / "a.idx"
        assert main(["build", "--embeddings", str(embeddings_path), "--out", str(out)]) == 0
        assert "16 bytes/keyword" in capsys.readouterr().out

    def test_byte_identical(self, tmp_path, embeddings_path):
        for name in ("a.idx", "b.idx"):
            assert main(["build", "--embeddings", str(embeddings_path), "--partitions", "3", "--out", str(tmp_path / name)]) == 0
        assert (tmp_path / "a.idx").read_bytes() == (tmp_path / "b.idx").read_bytes()
        assert [p.count for p in load_index(tmp_path / "a.idx").partitions] == [2, 2, 2]

    def test_corrupt_input(self, tmp_path, embeddings_path):
        bad = tmp_path / "bad.emb"
        bad.write_bytes(b"JUNK" + embeddings_path.read_bytes()[4:])
        assert main(["build", "--embeddings", str(bad), "--out", str(tmp_path / "o")]) == 1


def run_query(capsys, *args):
    code = main(["query", *args])
    captured = capsys.readouterr()
    return code, captured.out, captured.err


def parse_results(text):
    return list(csv.DictReader(io.StringIO(text), delimiter="\t"))


class TestQuery:
    def test_self_retrieval(self, capsys, workdir, model_path):
        # indexing query-side embeddings makes each indexed text its own best match
        src = workdir / "q_side.txt"
        src.write_text("cheap flights\nrunning shoes\nhome loans\nused cars\n", encoding="utf-8")
        emb, idx = workdir / "q_side.emb", workdir / "q_side.idx"
        assert main(["encode", "--model", str(model_path), "--input", str(src), "--out", str(emb), "--side", "query"]) == 0
        assert main(["build", "--embeddings", str(emb), "--out", str(idx)]) == 0
        capsys.readouterr()
        code, out, _ = run_query(capsys, "--index", str(idx), "--model", str(model_path), "--text", "running shoes")
        assert code == 0
        rows = parse_results(out)
        assert rows[0]["id"] == "1"
        assert float(rows[0]["score"]) == max(float(r["score"]) for r in rows)

    def test_results_shape(self, capsys, index_path, model_path):
        code, out, err = run_query(
            capsys, "--index", str(index_path), "--model", str(model_path), "--text", "cheap flights", "--top", "100"
        )
        assert code == 0
        rows = parse_results(out)
        assert len(rows) == 6  # N larger than the corpus returns everything
        assert [int(r["rank"]) for r in rows] == list(range(1, 7))
        scores = [float(r["score"]) for r in rows]
        assert scores == sorted(scores, reverse=True)
        assert "mean" in err and "p99" in err

    def test_deterministic(self, capsys, index_path, model_path, tmp_path):
        batch = tmp_path / "q.txt"
        batch.write_text("cheap flights\nused cars\n\npizza\n", encoding="utf-8")
        outs = []
        for name in ("a.tsv", "b.tsv"):
            code, _, _ = run_query(
                capsys, "--index", str(index_path), "--model", str(model_path), "--batch", str(batch),
                "--top", "3", "--out", str(tmp_path / name),
            )
            assert code == 0
            outs.append((tmp_path / name).read_bytes())
        assert outs[0] == outs[1]
        rows = parse_results(outs[0].decode())
        assert {r["query"] for r in rows} == {"0", "1", "2"} and len(rows) == 9

    def test_no_queries(self, capsys, index_path, model_path):
        assert run_query(capsys, "--index", str(index_path), "--model", str(model_path))[0] == 2

    def test_model_mismatch(self, capsys, index_path, tmp_path):
        other = tmp_path / "m.ckpt"
        assert main(["train", "--out", str(other), "--m", "16", "--n", "16", "--hash-dim", "256", "--epochs", "1"]) == 0
        code, _, err = run_query(capsys, "--index", str(index_path), "--model", str(other), "--text", "x")
        assert code == 1 and "dim" in err

    def test_geometry_too_small(self, capsys, index_path, model_path):
        code, _, _ = run_query(
            capsys, "--index", str(index_path), "--model", str(model_path), "--text", "x",
            "--threads-per-block", "1", "--items-per-thread", "1", "--blocks", "1",
        )
        assert code == 1


class TestAnalyze:
    def test_reference_table(self, capsys):
        assert main(["analyze"]) == 0
        rows = list(csv.reader(io.StringIO(capsys.readouterr().out)))
        assert rows[0] == ["l", "p_at_most_exact_pct"]
        values = [float(r[1]) for r in rows[1:]]
        assert values == pytest.approx([88.039, 99.256, 99.969], abs=1e-3)

    def test_simulate_to_file(self, tmp_path):
        out = tmp_path / "t.csv"
        args = ["analyze", "-C", "2560", "-N", "10", "-I", "256", "--simulate", "--trials", "20000", "--out", str(out)]
        assert main(args) == 0
        rows = list(csv.DictReader(out.open()))
        assert len(rows) == 3
        for r in rows:
            diff = abs(float(r["p_at_most_sim_pct"]) - float(r["p_at_most_exact_pct"]))
            assert diff <= 4 * max(float(r["sim_stderr_pct"]), 1e-3)

    def test_divisibility(self, capsys):
        assert main(["analyze", "-C", "1000", "-I", "256", "-N", "10"]) == 2
        assert "divisible" in capsys.readouterr().err


class TestBench:
    def test_small_run(self, capsys):
        assert main(["bench", "--keywords", "5000", "--repeats", "2", "--backend", "both"]) == 0
        out = capsys.readouterr().out
        assert "binary\tpython\t5000" in out and "float\tblas\t5000" in out
        assert "throughput ratio" in out

    def test_from_index(self, capsys, index_path):
        assert main(["bench", "--index", str(index_path), "--mode", "binary", "--repeats", "2"]) == 0
        assert "\t6\t" in capsys.readouterr().out

    def test_zero_keywords(self):
        assert main(["bench", "--keywords", "0"]) == 2


class TestConfig:
    def test_config_defaults_and_override(self, tmp_path, capsys):
        cfg = tmp_path / "rbe.cfg"
        cfg.write_text("candidates = 2560\nrelevant = 10\nitems-per-thread = 256\nmax_l = 1\n", encoding="utf-8")
        assert main(["analyze", "--config", str(cfg)]) == 0
        assert len(capsys.readouterr().out.splitlines()) == 3
        assert main(["analyze", "--config", str(cfg), "--max-l", "0"]) == 0
        assert len(capsys.readouterr().out.splitlines()) == 2

    def test_required_option_from_config(self, tmp_path, capsys):
        cfg = tmp_path / "train.cfg"
        cfg.write_text(f"out = {tmp_path / 'm.ckpt'}\nm = 16\nn = 8\nhash-dim = 256\nepochs = 1\n", encoding="utf-8")
        assert main(["train", "--config", str(cfg)]) == 0
        assert (tmp_path / "m.ckpt").is_file()

    def test_unknown_key(self, tmp_path, capsys):
        cfg = tmp_path / "rbe.cfg"
        cfg.write_text("frobnicate = 3\n", encoding="utf-8")
        assert main(["analyze", "--config", str(cfg)]) == 2
        assert "unknown key" in capsys.readouterr().err

    def test_bad_value(self, tmp_path):
        cfg = tmp_path / "rbe.cfg"
        cfg.write_text("candidates = many\n", encoding="utf-8")
        assert main(["analyze", "--config", str(cfg)]) == 2


def test_help_exits_zero(capsys):
    assert main(["--help"]) == 0
    assert "train" in capsys.readouterr().out
