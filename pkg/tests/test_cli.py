import json
import subprocess
import sys

import numpy as np
import pytest

from mmfusion.cli import evaluate_runs, main
from mmfusion.index import GroundTruth, RankedResult, SparseIndex, load_index, read_run, save_index


def run(argv):
    try:
        return main([str(a) for a in argv])
    except SystemExit as exc:
        return exc.code


@pytest.fixture(scope="module")
def corpus(tmp_path_factory):
    out = tmp_path_factory.mktemp("corpus")
    assert run(["gen-data", "--clusters", 6, "--per-cluster", 4, "--views", 3, "--dims", 48,
                "--seed", 7, "--out", out]) == 0
    return out


@pytest.fixture(scope="module")
def fused(corpus, tmp_path_factory):
    out = tmp_path_factory.mktemp("fused")
    views = [corpus / f"view{v}.idx" for v in (1, 2, 3)]
    code = run(["fuse", *views, "--lambda", 0.01, "--sigma", 0.001, "--iters", 3,
                "--truth", corpus / "truth.txt", "--out", out])
    assert code == 0
    return out


class TestGenData:
    def test_files(self, corpus):
        for name in ("view1.idx", "view2.idx", "view3.idx", "truth.txt", "manifest.json"):
            assert (corpus / name).exists()
        idx = load_index(corpus / "view1.idx")
        assert idx.shape == (48, 24)
        manifest = json.loads((corpus / "manifest.json").read_text())
        assert manifest["command"] == "gen-data"
        assert manifest["config"]["seed"] == 7
        assert set(manifest["outputs"]) == {str(corpus / n) for n in
                                             ("view1.idx", "view2.idx", "view3.idx", "truth.txt")}

    def test_missing_out(self, capsys):
        assert run(["gen-data", "--clusters", 2]) == 2
        assert "--out" in capsys.readouterr().err

    def test_identical_digests(self, tmp_path):
        argv = ["gen-data", "--clusters", 3, "--seed", 5]
        assert run(argv + ["--out", tmp_path / "a"]) == 0
        assert run(argv + ["--out", tmp_path / "b"]) == 0
        a = json.loads((tmp_path / "a" / "manifest.json").read_text())["outputs"]
        b = json.loads((tmp_path / "b" / "manifest.json").read_text())["outputs"]
        assert sorted(a.values()) == sorted(b.values())

    def test_invalid_flag(self, tmp_path):
        assert run(["gen-data", "--clusters", 0, "--out", tmp_path]) == 2
        assert run(["gen-data", "--sparsity", 0.001, "--out", tmp_path]) == 1


class TestFuse:
    def test_outputs(self, fused):
        for name in ("view1.idx", "view2.idx", "view3.idx", "report.json", "manifest.json"):
            assert (fused / name).exists()
        report = json.loads((fused / "report.json").read_text())
        assert len(report["iterations"]) == 3
        assert report["iterations"][0]["lam"] == 0.01
        assert len(report["map_per_iteration"]) == 4
        assert all(f >= b for f, b in zip(report["final_map"], report["map_per_iteration"][0]))
        manifest = json.loads((fused / "manifest.json").read_text())
        assert manifest["config"]["alm"]["lam"] == 0.01
        assert manifest["config"]["alm"]["sigma"] == 0.001
        assert manifest["config"]["theta2"] == 0.01
        assert len(manifest["inputs"]) == 3
        assert manifest["outcome"]["converged"] is True

    def test_defaults_recorded(self, corpus, tmp_path):
        assert run(["fuse", corpus / "view1.idx", corpus / "view2.idx", "--iters", 1,
                    "--out", tmp_path]) == 0
        alm = json.loads((tmp_path / "manifest.json").read_text())["config"]["alm"]
        assert (alm["lam"], alm["sigma"]) == (0.01, 0.001)

    def test_plot(self, corpus, tmp_path):
        pytest.importorskip("matplotlib")
        assert run(["fuse", corpus / "view1.idx", corpus / "view2.idx", "--iters", 1,
                    "--truth", corpus / "truth.txt", "--plot", "--out", tmp_path]) == 0
        for name in ("residuals.png", "accuracy.png"):
            assert (tmp_path / name).read_bytes()[:4] == b"\x89PNG"

    def test_strict_nonconvergence(self, corpus, tmp_path, capsys):
        argv = ["fuse", corpus / "view1.idx", "--iters", 1, "--max-inner-iters", 2,
                "--out", tmp_path]
        assert run(argv) == 0
        assert "warning" in capsys.readouterr().err
        assert run(argv + ["--strict"]) == 3
        manifest = json.loads((tmp_path / "manifest.json").read_text())
        assert manifest["outcome"]["converged"] is False
        assert manifest["outcome"]["warnings"]

    def test_size_mismatch(self, corpus, tmp_path):
        save_index(SparseIndex(np.ones((4, 3))), tmp_path / "other.idx")
        assert run(["fuse", corpus / "view1.idx", tmp_path / "other.idx", "--out", tmp_path / "o"]) == 1

    def test_corrupt_input(self, corpus, tmp_path):
        blob = (corpus / "view1.idx").read_bytes()
        (tmp_path / "bad.idx").write_bytes(blob[:-10])
        assert run(["fuse", tmp_path / "bad.idx", "--out", tmp_path / "o"]) == 1


class TestQuery:
    def test_self_match(self, fused, capsys):
        assert run(["query", fused / "view1.idx", "--query-id", 5, "--top", 4]) == 0
        lines = capsys.readouterr().out.splitlines()
        assert len(lines) == 4
        assert lines[0] == "5 5 1 1.000000"

    def test_index_flag(self, fused, tmp_path):
        out = tmp_path / "run.txt"
        assert run(["query", "--index", fused / "view2.idx", "--query-id", 0, "--out", out]) == 0
        assert len(out.read_text().splitlines()) == 24
        manifest = json.loads((tmp_path / "run.txt.manifest.json").read_text())
        assert manifest["command"] == "query"

    def test_top_zero(self, fused, capsys):
        assert run(["query", fused / "view1.idx", "--query-id", 5, "--top", 0]) == 2
        assert "--top" in capsys.readouterr().err

    @pytest.mark.parametrize("extra", [[], ["--query-id", 1, "--all"]])
    def test_query_source_required(self, fused, extra):
        assert run(["query", fused / "view1.idx", *extra]) == 2

    def test_index_required(self):
        assert run(["query", "--query-id", 1]) == 2

    def test_query_file(self, fused, tmp_path):
        x = load_index(fused / "view1.idx").to_dense()
        save_index(SparseIndex(x[:, [2, 7, 11]]), tmp_path / "q.idx")
        out = tmp_path / "run.txt"
        assert run(["query", fused / "view1.idx", "--query-file", tmp_path / "q.idx",
                    "--top", 3, "--out", out]) == 0
        results = read_run(out)
        assert sorted(results) == [0, 1, 2]
        assert [int(results[q].ids[0]) for q in (0, 1, 2)] == [2, 7, 11]

    def test_unknown_id(self, fused):
        assert run(["query", fused / "view1.idx", "--query-id", 99]) == 1

    def test_dimension_mismatch(self, fused, tmp_path):
        save_index(SparseIndex(np.ones((5, 1))), tmp_path / "q.idx")
        assert run(["query", fused / "view1.idx", "--query-file", tmp_path / "q.idx"]) == 1


class TestEvaluate:
    def test_perfect_run(self, tmp_path, capsys):
        truth = tmp_path / "truth.txt"
        truth.write_text("".join(f"{q}: {' '.join(str(4 * (q // 4) + k) for k in range(4))}\n"
                                 for q in range(8)))
        lines = []
        for q in range(8):
            ids = [q] + [i for i in range(4 * (q // 4), 4 * (q // 4) + 4) if i != q]
            ids += [i for i in range(8) if i not in ids]
            lines += [f"{q} {i} {r} {1 - r / 10:.6f}" for r, i in enumerate(ids, start=1)]
        (tmp_path / "run.txt").write_text("\n".join(lines) + "\n")
        assert run(["evaluate", tmp_path / "run.txt", truth, "--out", tmp_path / "m.json"]) == 0
        out = capsys.readouterr().out
        assert "map=1.0" in out and "rank1=1.0" in out and "ns_score=4.0" in out
        assert json.loads((tmp_path / "m.json").read_text())["map"] == 1.0
        assert (tmp_path / "m.json.manifest.json").exists()

    def test_fused_beats_baseline(self, corpus, fused, tmp_path, capsys):
        maps = {}
        for tag, root in (("base", corpus), ("fused", fused)):
            for v in (1, 2, 3):
                out = tmp_path / f"{tag}{v}.txt"
                assert run(["query", root / f"view{v}.idx", "--all", "--out", out]) == 0
                assert run(["evaluate", out, corpus / "truth.txt", "--out", tmp_path / f"{tag}{v}.json"]) == 0
                maps[tag, v] = json.loads((tmp_path / f"{tag}{v}.json").read_text())["map"]
        for v in (1, 2, 3):
            assert maps["fused", v] >= maps["base", v]

    def test_malformed_truth(self, tmp_path, capsys):
        (tmp_path / "run.txt").write_text("0 0 1 1.0\n")
        (tmp_path / "truth.txt").write_text("0: 0\n1 2 3\n")
        assert run(["evaluate", tmp_path / "run.txt", tmp_path / "truth.txt"]) == 1
        assert "truth.txt:2:" in capsys.readouterr().err

    def test_protocol_problems_reported(self):
        results = {0: RankedResult(np.array([0, 1]), np.array([1.0, 0.5])),
                   1: RankedResult(np.array([1, 0]), np.array([1.0, 0.5]))}
        truth = GroundTruth({0: {0, 1}, 1: {1}, 2: {2}, 3: {3}}, {3: {3}})
        metrics, problems = evaluate_runs(results, truth)
        assert metrics["queries"] == 2 and metrics["map"] == 1.0
        assert "ns_score" not in metrics
        assert any("query 2" in p for p in problems)
        assert any("query 3" in p for p in problems)
        assert any("N-S" in p for p in problems)


def test_module_entry_point(tmp_path):
    proc = subprocess.run([sys.executable, "-m", "mmfusion.cli", "gen-data"],
                          capture_output=True, text=True)
    assert proc.returncode == 2
