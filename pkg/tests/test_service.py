import pytest
from fastapi.testclient import TestClient

from gridflow import examples as EX
from gridflow.service import app

client = TestClient(app)


def body(name, **extra):
    rec, sched, grid = EX.get(name).sources()
    return {"rec": rec, "sched": sched, "grid": grid, **extra}


class TestServiceEndpoints:
    def test_health(self):
        resp = client.get("/health")
        assert resp.status_code == 200
        assert resp.json()["status"] == "ok"

    def test_compile_returns_ir(self):
        resp = client.post("/compile", json=body("cannon-output-stationary"))
        assert resp.status_code == 200
        payload = resp.json()
        assert payload["ok"]
        assert "(i,0,k)_A^mul <- A[i,k]" in payload["ir"]
        assert "COMPUTE gemm_acc" in payload["programs"]

    def test_compile_diagnostics(self):
        b = body("cannon-output-stationary")
        b["sched"] = "map i->space0 j->space1 k->time\nstream(A,[k])"
        payload = client.post("/compile", json=b).json()
        assert not payload["ok"] and payload["diagnostics"]

    def test_run_pass(self):
        payload = client.post("/run", json=body("trsm-broadcast", seed=3,
                                                verify="tags")).json()
        assert payload["verdict"] == "PASS"
        assert payload["exit_code"] == 0
        assert payload["metrics"]["global"]["pe_count"] == 4

    def test_run_trace_opt_in(self):
        with_trace = client.post("/run", json=body("prefix-sum", trace=True)).json()
        without = client.post("/run", json=body("prefix-sum")).json()
        assert with_trace["trace_csv"].startswith("step,pe,event")
        assert without["trace_csv"] == ""

    def test_sweep_rows(self):
        payload = client.post("/sweep", json=body(
            "cannon-output-stationary", latencies=[1, 2], capacities=[1, 2])).json()
        assert len(payload["rows"]) == 4
        assert payload["csv"].splitlines()[0] == \
            "latency,bandwidth,chan_cap,total_steps,mean_utilization,error"

    def test_examples_listing(self):
        payload = client.get("/examples").json()
        names = [e["name"] for e in payload]
        assert len(names) == 10
        assert "flash-attention-2" in names
        fa2 = next(e for e in payload if e["name"] == "flash-attention-2")
        assert "SOFTMAXSTEP" in fa2["rec"]

    def test_examples_run_through_service(self):
        # the service wraps the exact pipeline; spot-check one heavy example
        payload = client.post("/run", json=body("cholesky", verify="tags")).json()
        assert payload["verdict"] == "PASS"
