import json
import math
import threading
from http.server import BaseHTTPRequestHandler, HTTPServer

import pytest
from hypothesis import given
from hypothesis import strategies as st

from corpora import fixture
from irforge.catalog import load_catalog, schema_text
from irforge.discover import (EvalMetrics, build_prompt, discover, eval_report, evaluate, extract_json,
                              load_provider, parse_response, prompt_template, query_model, run_repetitions)
from irforge.errors import EmptyInput, ProviderError, ProviderTimeout, SchemaViolation, Unparseable


def _cmake():
    with open(fixture("minimd_CMakeLists.txt"), encoding="utf-8") as fh:
        return fh.read()


def _truth():
    return load_catalog(fixture("minimd_truth.json"))


def _offline():
    return load_provider(fixture("offline_provider.json"))


# ---------------------------------------------------------------------------
# prompt


def test_prompt_slots_filled_once():
    text = _cmake()
    prompt = build_prompt([("CMakeLists.txt", text)])
    assert prompt.count(text) == 1 and prompt.count(schema_text()) == 1
    assert "{file_content}" not in prompt and "{schema}" not in prompt
    expected = prompt_template().replace("{file_content}", "\n--- file: CMakeLists.txt ---\n" + text)
    assert prompt == expected.replace("{schema}", schema_text())


def test_prompt_two_files_in_order():
    prompt = build_prompt([("a.cmake", "set(A 1)"), ("b.cmake", "set(B {schema})")])
    first, second = prompt.index("--- file: a.cmake ---"), prompt.index("--- file: b.cmake ---")
    assert first < second
    assert "set(B {schema})" in prompt  # substituted text is not expanded again


def test_prompt_needs_a_file():
    with pytest.raises(EmptyInput):
        build_prompt([])


def test_prompt_examples_prepended():
    prompt = build_prompt(["x"], examples=["EX-ONE"])
    assert prompt.startswith("Example 1:\nEX-ONE")


# ---------------------------------------------------------------------------
# responses


def test_fenced_response():
    doc = json.dumps(json.load(open(fixture("fig5a_catalog.json"), encoding="utf-8")))
    for wrapped in (f"```json\n{doc}\n```", f"Here you go:\n```\n{doc}\n```\nthanks", doc):
        assert extract_json(wrapped) == doc
        assert parse_response(wrapped).gpu_backends["CUDA"].build_flag == "-DGMX_GPU=CUDA"


def test_extra_key_is_schema_violation():
    doc = json.load(open(fixture("fig5a_catalog.json"), encoding="utf-8"))
    doc["notes"] = "extra"
    with pytest.raises(SchemaViolation):
        parse_response(json.dumps(doc))


@pytest.mark.parametrize("text", ["I could not find any options.", "", "```json\n{broken\n```"])
def test_unparseable(text):
    with pytest.raises(Unparseable):
        parse_response(text)


# ---------------------------------------------------------------------------
# metrics

counts = st.integers(0, 10_000)


@given(counts, counts, counts)
def test_metric_bounds_and_identity(tp, fp, fn):
    m = EvalMetrics(tp, fp, fn)
    for v in (m.precision, m.recall, m.f1):
        assert 0.0 <= v <= 1.0
    p, r = m.precision, m.recall
    if p + r > 0:
        assert abs(m.f1 * (p + r) - 2 * p * r) <= 1e-12
    assert m.precision == (tp / (tp + fp) if tp + fp else 0)
    assert m.recall == (tp / (tp + fn) if tp + fn else 0)


def test_nine_one_one():
    m = EvalMetrics(9, 1, 1)
    assert (m.precision, m.recall) == (0.9, 0.9)
    assert math.isclose(m.f1, 0.9, abs_tol=1e-12)


def test_identity_and_disjoint():
    truth = _truth()
    m = evaluate(truth, truth)
    assert (m.tp, m.fp, m.fn, m.f1) == (10, 0, 0, 1.0)
    d = EvalMetrics(0, 5, 7)
    assert (d.precision, d.recall, d.f1) == (0.0, 0.0, 0.0)
    assert EvalMetrics(0, 0, 0).f1 == 0.0


def test_offline_fixture_scores():
    catalog, out = discover([("CMakeLists.txt", _cmake())], _offline())
    m = evaluate(catalog, _truth())
    assert (m.tp, m.fp, m.fn) == (9, 1, 1)
    assert out.latency == 0.0
    with open(fixture("minimd_response.txt"), encoding="utf-8") as fh:
        assert out.text == fh.read()


def test_normalization_never_hurts():
    with open(fixture("minimd_response.txt"), encoding="utf-8") as fh:
        raw = fh.read()
    truth_raw = load_catalog(fixture("minimd_truth.json"), normalize=False)
    plain = evaluate(parse_response(raw, normalize=False), truth_raw, normalize=False)
    normed = evaluate(parse_response(raw), _truth())
    assert (plain.tp, plain.fp, plain.fn) == (8, 2, 2)
    assert normed.f1 >= plain.f1


def test_per_category_report():
    catalog, _ = discover(["x"], _offline())
    report = eval_report(catalog, _truth(), per_category=True)
    assert sum(c["tp"] for c in report["per_category"].values()) == report["overall"]["tp"]
    assert "granularity" in report["metadata"]


def test_ten_repetitions_identical():
    runs = run_repetitions([("CMakeLists.txt", _cmake())], _offline(), _truth(), 10)
    assert len(runs) == 10 and all(r == runs[0] for r in runs)


# ---------------------------------------------------------------------------
# providers


def test_provider_file_must_not_hold_keys(tmp_path):
    path = tmp_path / "p.json"
    path.write_text(json.dumps({"kind": "live", "endpoint": "http://x", "api_key": "secret"}))
    with pytest.raises(ValueError):
        load_provider(str(path))


class _Handler(BaseHTTPRequestHandler):
    seen = []

    def do_POST(self):
        body = json.loads(self.rfile.read(int(self.headers["Content-Length"])))
        _Handler.seen.append((self.headers.get("Authorization"), body))
        if self.path == "/denied":
            self.send_response(401)
            self.end_headers()
            self.wfile.write(b'{"error":"unauthorized"}')
            return
        if self.path == "/slow":
            threading.Event().wait(1.0)
        payload = {"choices": [{"message": {"content": "```json\n{}\n```"}}],
                   "usage": {"prompt_tokens": 11, "completion_tokens": 3}}
        data = json.dumps(payload).encode()
        self.send_response(200)
        self.send_header("Content-Length", str(len(data)))
        self.end_headers()
        self.wfile.write(data)

    def log_message(self, *args):
        pass


@pytest.fixture()
def server():
    httpd = HTTPServer(("127.0.0.1", 0), _Handler)
    thread = threading.Thread(target=httpd.serve_forever, daemon=True)
    thread.start()
    yield f"http://127.0.0.1:{httpd.server_port}"
    httpd.shutdown()
    httpd.server_close()


def test_live_401(server):
    with pytest.raises(ProviderError) as err:
        query_model("hi", {"kind": "live", "endpoint": server + "/denied", "model": "m"})
    assert err.value.status == 401 and "unauthorized" in err.value.body


def test_live_success_reads_key_from_env(server, monkeypatch):
    monkeypatch.setenv("MY_KEY", "k-123")
    _Handler.seen.clear()
    out = query_model("hello", {"kind": "live", "endpoint": server + "/ok", "model": "m", "api_key_env": "MY_KEY"})
    assert (out.tokens_in, out.tokens_out) == (11, 3)
    assert _Handler.seen[0][0] == "Bearer k-123"
    assert _Handler.seen[0][1]["messages"][0]["content"] == "hello"


def test_live_timeout(server):
    with pytest.raises(ProviderTimeout):
        query_model("x", {"kind": "live", "endpoint": server + "/slow", "timeout": 0.2})
