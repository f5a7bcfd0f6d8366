import json

import pytest
from hypothesis import given
from hypothesis import strategies as st

from corpora import fixture, load_fixture_json
from irforge.errors import MalformedBundle, ProbeUnavailable
from irforge.sysprobe import (INFERRED, SystemFeatureReport, discover_system, parse_bundle, probe_live,
                              read_cpu_flags)


def test_fig5b_bundle():
    report = discover_system(fixture("fig5b_features.json"), live=False)
    assert report.cpu.architecture == "x86_64"
    assert report.cpu.vector_features == {"avx512f", "avx", "avx2", "sse4_1"}
    assert report.gpu_backends["CUDA"].version == "12.1"
    assert report.gpu_backends["CUDA"].libraries == ["/lib/libcuda.so.1"]
    cufft = report.libraries["cuFFT"]
    assert cufft.origin == INFERRED and cufft.probe == "gpu_backends.CUDA"


def test_empty_bundle():
    report = discover_system({}, live=False)
    assert report.to_dict() == SystemFeatureReport().to_dict()
    assert report.cpu.vector_features == frozenset()


def test_rocm_infers_rocfft():
    report = discover_system({"GPU Backends": {"ROCm": {"version": "5.4"}}}, live=False)
    assert report.libraries["rocFFT"].origin == INFERRED


def test_canonical_keys_round_trip():
    report = discover_system(fixture("fig5b_features.json"), live=False)
    again = discover_system(json.loads(report.dumps()), live=False)
    assert again.dumps() == report.dumps()


def test_serialization_deterministic():
    a = discover_system(fixture("fig5b_features.json"), live=False).dumps()
    b = discover_system(fixture("fig5b_features.json"), live=False).dumps()
    assert a == b


@pytest.mark.parametrize("bad", ["[1, 2]", "{broken", '{"CPU Info": 3}'])
def test_malformed_bundle(bad):
    with pytest.raises(MalformedBundle):
        parse_bundle(bad)


def test_cpu_flags_from_cpuinfo(tmp_path):
    path = tmp_path / "cpuinfo"
    path.write_text("processor\t: 0\nflags\t\t: fpu SSE4_1 avx2 avx512f\n\nprocessor\t: 1\nflags\t: fpu\n")
    assert read_cpu_flags(str(path)) == {"fpu", "sse4_1", "avx2", "avx512f"}
    arm = tmp_path / "arm"
    arm.write_text("Features\t: fp asimd sve\n")
    assert read_cpu_flags(str(arm)) == {"fp", "asimd", "sve"}


def test_cpuinfo_missing(tmp_path):
    with pytest.raises(ProbeUnavailable):
        read_cpu_flags(str(tmp_path / "absent"))


def test_declared_wins_over_live(tmp_path):
    path = tmp_path / "cpuinfo"
    path.write_text("flags : sse2 avx\n")
    live = probe_live(str(path))
    assert "avx" in live.cpu.vector_features
    declared = {"CPU Info": {"Architecture": "x86_64", "Vectorization": ["avx512f"]},
                "Toolchains": {"clang": "0.1"}}
    report = discover_system(declared, live=True, cpuinfo_path=str(path))
    assert report.cpu.vector_features == {"avx512f"}
    assert report.toolchains["clang"] == "0.1"
    if "clang" in live.toolchains and live.toolchains["clang"] != "0.1":
        assert any("declared version 0.1" in w for w in report.warnings)


_backends = st.dictionaries(st.sampled_from(["CUDA", "ROCm", "HIP", "OpenCL", "SYCL"]),
                            st.fixed_dictionaries({"version": st.sampled_from(["11.8", "12.1", "5.4"])}),
                            max_size=4)


@given(_backends, _backends)
def test_inference_monotone(a, b):
    small = discover_system({"GPU Backends": a}, live=False)
    big = discover_system({"GPU Backends": {**b, **a}}, live=False)
    assert set(small.libraries) <= set(big.libraries)
    assert set(small.gpu_backends) <= set(big.gpu_backends)


def test_fig5b_fixture_uses_figure_keys():
    doc = load_fixture_json("fig5b_features.json")
    assert set(doc) == {"CPU Info", "GPU Backends"}
