import json
import pathlib

import numpy as np
import pytest

from gridflow import examples as EX
from gridflow import harness as H

GOLDEN = pathlib.Path(__file__).parent / "goldens"


def sources(name, n=4, tile=4):
    return EX.get(name).sources(n, tile)


class TestCompile:
    def test_cannon_ir_matches_golden(self):
        comp = H.compile_texts(*sources("cannon-output-stationary"))
        assert comp.ok
        assert comp.ir_dump == (GOLDEN / "cannon_os_ir.txt").read_text()

    def test_trisolve_ir_matches_golden(self):
        comp = H.compile_texts(*sources("trsm-stream"))
        assert comp.ok
        assert comp.ir_dump == (GOLDEN / "trisolve_ir.txt").read_text()

    def test_dumps_byte_stable(self):
        for name in EX.EXAMPLES:
            a = H.compile_texts(*sources(name))
            b = H.compile_texts(*sources(name))
            assert (a.ir_dump, a.program_dump, a.skew_json) == \
                   (b.ir_dump, b.program_dump, b.skew_json), name

    def test_bad_schedule_reports_diagnostics(self):
        rec, _, grid = sources("cannon-output-stationary")
        comp = H.compile_texts(rec, "map i->space0 j->space1 k->time\nstream(A,[k])",
                               grid)
        assert not comp.ok
        assert any("k" in d for d in comp.diagnostics)

    def test_trsm_kernel_confined_to_diagonal_hosts(self):
        comp = H.compile_texts(*sources("trsm-stream"))
        assert "COMPUTE trsm" in comp.program_dump


class TestRun:
    @pytest.mark.parametrize("name", sorted(EX.EXAMPLES))
    def test_every_example_passes_with_tags(self, name):
        out = H.run_texts(*sources(name), seed=11, verify="tags")
        assert out.verdict == "PASS", (name, out.detail)
        assert out.alignment_ok

    def test_seed_changes_inputs_not_verdict(self):
        a = H.run_texts(*sources("summa"), seed=1)
        b = H.run_texts(*sources("summa"), seed=2)
        assert a.verdict == b.verdict == "PASS"
        assert not np.array_equal(a.outputs["C"], b.outputs["C"])

    def test_verify_off_returns_unverified(self):
        out = H.run_texts(*sources("prefix-sum"), verify="off")
        assert out.verdict == "UNVERIFIED"
        assert H.exit_code(out) == H.EXIT_OK

    def test_compile_error_exit_code(self):
        out = H.run_texts("tensor A[2] tile 1x1\nA[i] = (", "map i->space0",
                          "rank=1 extents=2")
        assert out.verdict == "ERROR"
        assert H.exit_code(out) == H.EXIT_DIAGNOSTICS


class TestManifestCommands:
    def test_cmd_compile_writes_artifacts(self, tmp_path):
        man = self._manifest(tmp_path, "cannon-output-stationary")
        comp = H.cmd_compile(man)
        assert comp.ok
        assert (tmp_path / "out" / "ir.txt").exists()
        assert (tmp_path / "out" / "programs.txt").exists()
        assert (tmp_path / "out" / "skews.json").exists()

    def test_cmd_run_writes_metrics_and_trace(self, tmp_path):
        man = self._manifest(tmp_path, "trsm-stream")
        out = H.cmd_run(man)
        assert out.verdict == "PASS"
        metrics = json.loads((tmp_path / "out" / "metrics.json").read_text())
        assert metrics["global"]["pe_count"] == 4
        assert len(metrics["pes"]) == 4
        trace = (tmp_path / "out" / "trace.csv").read_text().splitlines()
        assert trace[0] == "step,pe,event,channel,tag"
        assert "seed=5" in (tmp_path / "out" / "verdict.txt").read_text()

    def test_cmd_sweep_latency_monotone(self, tmp_path):
        man = self._manifest(tmp_path, "cannon-output-stationary")
        csv = H.cmd_sweep(man, latencies=(1, 2, 4))
        rows = [r.split(",") for r in csv.strip().splitlines()[1:]]
        steps = [int(r[3]) for r in rows]
        assert steps == sorted(steps)
        assert (tmp_path / "out" / "sweep.csv").exists()

    def test_cmd_sweep_capacity_never_slows(self, tmp_path):
        man = self._manifest(tmp_path, "cannon-output-stationary")
        csv = H.cmd_sweep(man, capacities=(1, 2, 8))
        steps = [int(r.split(",")[3]) for r in csv.strip().splitlines()[1:]]
        assert steps == sorted(steps, reverse=True)

    def test_cmd_sweep_empty_grid_is_header_only(self, tmp_path):
        man = self._manifest(tmp_path, "prefix-sum")
        csv = H.cmd_sweep(man, latencies=())
        assert csv.strip().splitlines() == [
            "latency,bandwidth,chan_cap,total_steps,mean_utilization,error"]

    def test_cmd_sweep_records_row_errors_and_continues(self, tmp_path):
        man = self._manifest(tmp_path, "cannon-output-stationary")
        rec, sched, grid = EX.get("cannon-output-stationary").sources()
        rows = H.sweep_texts(rec, sched, grid, latencies=(0, 1))
        assert rows[0]["error"] and not rows[1]["error"]

    def test_missing_file_raises(self, tmp_path):
        man = H.RunManifest(str(tmp_path / "nope.rec"), "x", "y")
        with pytest.raises(H.HarnessError, match="missing input file"):
            H.cmd_compile(man)

    @staticmethod
    def _manifest(tmp_path, name):
        rec, sched, grid = EX.get(name).sources()
        (tmp_path / "p.rec").write_text(rec)
        (tmp_path / "p.sched").write_text(sched)
        (tmp_path / "p.grid").write_text(grid)
        return H.RunManifest(str(tmp_path / "p.rec"), str(tmp_path / "p.sched"),
                             str(tmp_path / "p.grid"), seed=5,
                             verify="tags", out_dir=str(tmp_path / "out"))


class TestFailVerdict:
    def test_deskewed_fixture_fails_with_alignment(self, monkeypatch):
        # rotate one B feeder after codegen: the run must report FAIL with an
        # alignment violation and map to exit code 2
        import gridflow.spacetime as ST
        real = ST.compile_grid

        def tampered(dfp, grid):
            comp = real(dfp, grid)
            f = comp.feeders[("feed", "B", (0, 1))]
            f.emissions = f.emissions[1:] + f.emissions[:1]
            return comp

        monkeypatch.setattr(H.ST, "compile_grid", tampered)
        out = H.run_texts(*sources("cannon-output-stationary"), verify="tags")
        assert out.verdict == "FAIL"
        assert "alignment" in out.detail
        assert H.exit_code(out) == H.EXIT_VERIFY_FAIL
