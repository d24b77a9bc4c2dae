import json
import shutil
from pathlib import Path

import pytest

from udalm import pipeline
from udalm.cli import main
from udalm.config import load_config
from udalm.corpus import DataError
from udalm.pipeline import Cell, Workspace

from conftest import QUICK_INI, ROOT

GOLDEN = ROOT / "tests" / "golden" / "quick"


def _files(d: Path) -> dict[str, bytes]:
    return {str(p.relative_to(d)): p.read_bytes() for p in sorted(d.rglob("*")) if p.is_file()}


def _full(out: Path, jobs: int = 1) -> None:
    cfg = ["--config", str(QUICK_INI), "--out", str(out)]
    assert main(["generate", *cfg]) == 0
    assert main(["train", *cfg, "--jobs", str(jobs)]) == 0
    assert main(["sweep", *cfg, "--jobs", str(jobs)]) == 0
    assert main(["report", "--out", str(out)]) == 0


def _main_stages(out: Path) -> list[Path]:
    """Domain-pretraining checkpoints of the full target set (sweep stages carry an -n suffix)."""
    return [p for p in (out / "stages").glob("dpt-s*.ckpt") if "-n" not in p.name]


@pytest.fixture(scope="module")
def quick_run(tmp_path_factory) -> Path:
    out = tmp_path_factory.mktemp("quick") / "exp"
    _full(out)
    return out


@pytest.fixture
def copy_run(quick_run, tmp_path) -> Path:
    dest = tmp_path / "exp"
    shutil.copytree(quick_run, dest)
    return dest


class TestGenerate:
    def test_byte_identical(self, tmp_path):
        cfg = load_config(QUICK_INI)
        a = pipeline.generate_corpus(cfg, tmp_path / "a")
        b = pipeline.generate_corpus(cfg, tmp_path / "b")
        assert _files(a) == _files(b)

    def test_manifest(self, quick_run):
        m = json.loads((quick_run / "corpus" / "manifest.json").read_text())
        assert m["shift"] == 0.8
        assert m["counts"] == {"source_train": 48, "source_val": 12, "target_train": 128, "target_val": 32,
                               "target_test": 80, "general": 100}

    def test_tampered_split_rejected(self, copy_run):
        with open(copy_run / "corpus" / "source_train.tsv", "a", encoding="utf-8") as f:
            f.write("1\tsource\textra line\n")
        with pytest.raises(DataError, match="manifest"):
            pipeline.load_corpus(copy_run / "corpus")


class TestTrain:
    def test_outputs(self, quick_run):
        # 4 regimes x 2 seeds, UDALM kept once per stopping criterion
        assert len(list((quick_run / "runs").glob("*.jsonl"))) == 3 * 2 + 3 * 2
        assert len(_main_stages(quick_run)) == 2

    def test_cache_hit(self, copy_run):
        before = _files(copy_run / "runs")
        summary = pipeline.train(load_config(QUICK_INI), copy_run)
        assert summary["trained"] == [] and len(summary["cached"]) == 8
        assert _files(copy_run / "runs") == before

    def test_resume_after_deleted_run(self, copy_run, quick_run):
        for p in (copy_run / "runs").glob("DAT.s1.*"):
            p.unlink()
        summary = pipeline.train(load_config(QUICK_INI), copy_run)
        assert summary["trained"] == [Cell("DAT", 1)]
        assert _files(copy_run / "runs") == _files(quick_run / "runs")

    def test_resume_after_interrupt(self, tmp_path, quick_run, monkeypatch):
        cfg = load_config(QUICK_INI)
        out = tmp_path / "exp"
        pipeline.generate_corpus(cfg, out)
        real, calls = Workspace.train_cell, []

        def dying(self, cell):
            if len(calls) == 3:
                raise KeyboardInterrupt
            calls.append(cell)
            return real(self, cell)

        monkeypatch.setattr(Workspace, "train_cell", dying)
        with pytest.raises(KeyboardInterrupt):
            pipeline.train(cfg, out)
        monkeypatch.setattr(Workspace, "train_cell", real)
        summary = pipeline.train(cfg, out)
        assert len(summary["trained"]) == 5 and not set(summary["trained"]) & set(calls)
        assert _files(out / "runs") == _files(quick_run / "runs")

    def test_twenty_records_with_shared_stages(self, tmp_path):
        text = QUICK_INI.read_text() + "\n"
        text = text.replace("seeds = 0, 1", "seeds = 0, 1, 2, 3, 4").replace("epochs = 3", "epochs = 1")
        text = text.replace("patience = 2", "patience = 1")
        text = text.replace("[experiment]", "[experiment]\ncriteria = min_mixed")
        ini = tmp_path / "five.ini"
        ini.write_text(text)
        cfg = load_config(ini)
        out = tmp_path / "exp"
        pipeline.generate_corpus(cfg, out)
        summary = pipeline.train(cfg, out)
        assert len(summary["trained"]) == 20
        assert len(list((out / "runs").glob("*.jsonl"))) == 20
        # one domain-pretraining checkpoint per seed, shared by the regimes that start from it
        assert len(_main_stages(out)) == 5

    def test_never_reads_test_split(self, copy_run):
        shutil.rmtree(copy_run / "runs")
        shutil.rmtree(copy_run / "stages")
        (copy_run / "corpus" / "target_test.tsv").unlink()
        assert len(pipeline.train(load_config(QUICK_INI), copy_run)["trained"]) == 8
        with pytest.raises(DataError, match="target_test"):
            pipeline.evaluate_results(load_config(QUICK_INI), copy_run)

    def test_records_hold_no_test_accuracy(self, quick_run):
        for p in (quick_run / "runs").glob("*.jsonl"):
            assert '"target_test_acc": null' in p.read_text()


class TestReport:
    def test_golden(self, quick_run):
        assert _files(quick_run / "report") == _files(GOLDEN)

    def test_repeat_and_parallel_byte_identical(self, quick_run, tmp_path):
        _full(tmp_path / "again", jobs=2)
        assert _files(tmp_path / "again" / "report") == _files(quick_run / "report")
        assert _files(tmp_path / "again" / "runs") == _files(quick_run / "runs")

    def test_report_rerun_is_stable(self, copy_run, quick_run):
        assert main(["report", "--out", str(copy_run)]) == 0
        assert _files(copy_run / "report") == _files(quick_run / "report")

    def test_sweep_size_zero_is_source_only(self, quick_run):
        res = pipeline.evaluate_results(load_config(QUICK_INI), quick_run)
        row = next(r for r in res.sweep if r.size == 0 and r.regime == "UDALM")
        assert row.accuracies == res.accuracy["SO"]
