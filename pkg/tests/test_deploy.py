import itertools
import os

import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from conftest import requires_clang
from irforge.deploy import (INCOMPATIBLE, GpuCompatInput, Incompatible, JitFromPtx, LowerStep, Native, execute,
                            gpu_compat, image_tag, lowering_base_flags, parse_capability, parse_tag,
                            plan_deployment, select_config)
from irforge.errors import ConfigNotInRecipe, IncompatibleGpu, MissingLayer
from irforge.forge import ARCH_SLOT, ContainerRecipe, Store, emit_ir_set, render_container_recipe, \
    render_install_manifest
from irforge.matcher import ResolvedConfig
from irforge.sysprobe import parse_bundle

# ---------------------------------------------------------------------------
# GPU compatibility


def test_worked_examples():
    assert gpu_compat(GpuCompatInput("12.4", "sm_80", "12.1", cubin_capabilities=["sm_70", "sm_80"])) \
        == Native((8, 0))
    assert gpu_compat(GpuCompatInput("12.4", "sm_90", "12.1", ptx_capability="sm_80",
                                     cubin_capabilities=["sm_70", "sm_80"])) == JitFromPtx
    verdict = gpu_compat(GpuCompatInput("12.1", "sm_80", "12.6"))
    assert verdict.kind == INCOMPATIBLE and "driver too old" in verdict.reason


def _expected(major_match, minor_le, cubin_hit, ptx_le):
    # the rule table, read top to bottom
    if not major_match:
        return Incompatible("major mismatch")
    if not minor_le:
        return Incompatible("driver too old for runtime")
    if cubin_hit:
        return Native((8, 0))
    if ptx_le:
        return JitFromPtx
    return Incompatible("no matching binary or loadable PTX")


CELLS = list(itertools.product([True, False], repeat=4))


@pytest.mark.parametrize("major_match, minor_le, cubin_hit, ptx_le", CELLS)
def test_truth_table(major_match, minor_le, cubin_hit, ptx_le):
    runtime = ("12." if major_match else "11.") + ("1" if minor_le else "6")
    inp = GpuCompatInput(driver_version="12.4", device_capability="sm_80", runtime_version=runtime,
                         ptx_capability="sm_70" if ptx_le else "sm_90",
                         cubin_capabilities=["sm_80"] if cubin_hit else ["sm_70"])
    assert gpu_compat(inp) == _expected(major_match, minor_le, cubin_hit, ptx_le)


def test_truth_table_size():
    assert len(CELLS) == 16


def test_ptx_newer_than_driver_not_loadable():
    inp = GpuCompatInput("12.4", "sm_90", "12.1", ptx_version="12.8", ptx_capability="sm_80")
    assert gpu_compat(inp).reason == "no matching binary or loadable PTX"


@pytest.mark.parametrize("text, cap", [("sm_80", (8, 0)), ("compute_90", (9, 0)), ("8.6", (8, 6)),
                                       ((7, 5), (7, 5)), ("sm_100", (10, 0))])
def test_parse_capability(text, cap):
    assert parse_capability(text) == cap


# ---------------------------------------------------------------------------
# tags


def test_tag_examples():
    tag = image_tag({"gpu": "cuda-12.1", "simd": "avx_512", "mpi": "on"})
    assert tag.startswith("gpu-cuda-12.1_simd-avx") and tag.endswith("512_mpi-on")
    assert parse_tag(tag).assignments == {"gpu": "cuda-12.1", "simd": "avx_512", "mpi": "on"}
    assert image_tag({}) == "generic" and parse_tag("generic") == ResolvedConfig()


_text = st.text(st.characters(blacklist_categories=("Cs",)), min_size=1, max_size=12)


@settings(max_examples=200)
@given(st.dictionaries(_text, _text, max_size=5))
def test_tag_round_trip(assignments):
    tag = image_tag(assignments)
    assert parse_tag(tag).assignments == assignments if assignments else parse_tag(tag) == ResolvedConfig()
    assert all(c in "abcdefghijklmnopqrstuvwxyz0123456789._-%" for c in tag)


# ---------------------------------------------------------------------------
# planning against a hand-written recipe

LAYER = {"layer": "nvidia/cuda:{version}-runtime", "build_version": "12.1",
         "container": {"runtime_version": "12.1", "cubin_capabilities": ["sm_70", "sm_80"], "ptx_capability": "sm_80"}}


def _manifest(name, assignments):
    return {
        "config": name, "assignments": assignments, "build_root": "/b/" + name,
        "entries": [
            {"target": "a.c -> a.o", "output": "«BUILD»/a.o", "opt_level": "-O2", "kind": "ir", "artifact": "aa" * 32,
             "residual": ["-O2", "-I«BUILD»/gen", "-DX=1", "-c"], "arch": ARCH_SLOT,
             "arch_profile": ["-march=x86-64"]},
            {"target": "isa.c -> isa.o", "output": "«BUILD»/isa.o", "opt_level": "-O2", "kind": "ir",
             "artifact": "bb" * 32, "residual": ["-O2", "-c"], "arch": ["-mavx2"], "arch_profile": ["-mavx2"]},
            {"target": "s.S -> s.o", "output": "«BUILD»/s.o", "opt_level": "-O2", "kind": "source",
             "source": "s.S", "language": "other", "flags": ["-O2", "-c"], "residual": ["-O2", "-c"],
             "arch": ARCH_SLOT, "arch_profile": [], "file": "/src/s.S", "directory": "/b/" + name},
        ],
        "link": {"delegate": "build-system", "command": ["make", "-C", "/b/" + name]},
    }


def _recipe(pins=None):
    configs = [{"name": "gpu-none", "assignments": {"gpu": "none"}},
               {"name": "gpu-cuda", "assignments": {"gpu": "CUDA"}}]
    return ContainerRecipe("llvm:14", manifests={c["name"]: _manifest(c["name"], c["assignments"]) for c in configs},
                           configs=configs, deferred_layers={"CUDA": dict(LAYER)}, runtime_pins=pins or {})


CPU_ONLY = parse_bundle({"CPU Info": {"Architecture": "x86_64", "Vectorization": ["avx512f", "avx2"]}})
WITH_GPU = parse_bundle({"CPU Info": {"Architecture": "x86_64", "Vectorization": ["avx512f"]},
                         "GPU Backends": {"CUDA": {"version": "12.4", "device_capability": "sm_80"}}})


def test_avx512_applied_to_every_slot():
    plan = plan_deployment(_recipe(), ResolvedConfig({"vectorization": "AVX_512", "gpu": "none"}), CPU_ONLY)
    assert plan.config == "gpu-none"
    a, isa = plan.steps
    assert a.arch_flags == ["-mavx512f"] and a.flags == ["-O2", "-mavx512f"]
    assert isa.arch_flags == ["-mavx2"]  # preprocessing depended on its own profile
    assert plan.sd_compiles[0]["flags"] == ["-O2", "-c", "-mavx512f"]
    assert a.output == "/irforge/build/a.o"
    assert plan.link_phase["delegate"] == "build-system"
    assert parse_tag(plan.tag) == plan.resolved


def test_no_vectorization_choice_keeps_profile():
    plan = plan_deployment(_recipe(), ResolvedConfig({"gpu": "none"}), CPU_ONLY)
    assert plan.steps[0].arch_flags == ["-march=x86-64"]


def test_paths_restored_against_manifest_root():
    plan = plan_deployment(_recipe(), ResolvedConfig({"gpu": "none"}), CPU_ONLY)
    assert plan.steps[0].residual == ["-O2", "-I/b/gpu-none/gen", "-DX=1", "-c"]


def test_opt_override_is_explicit():
    plan = plan_deployment(_recipe(), ResolvedConfig({"gpu": "none"}), CPU_ONLY, opt_override="-O3")
    assert plan.steps[0].opt_level == "-O3" and plan.steps[0].flags[0] == "-O3"
    assert any("overridden" in n for n in plan.notes)


def test_cuda_on_gpu_less_host():
    with pytest.raises(IncompatibleGpu):
        plan_deployment(_recipe(), ResolvedConfig({"gpu": "CUDA"}), CPU_ONLY)


def test_cuda_native_and_layer_bound():
    plan = plan_deployment(_recipe(), ResolvedConfig({"gpu": "CUDA"}), WITH_GPU)
    assert plan.verdict == Native((8, 0))
    assert plan.layers == {"CUDA": "nvidia/cuda:12.4-runtime"}


def test_pinned_runtime_uses_build_version():
    plan = plan_deployment(_recipe({"CUDA": "12.1"}), ResolvedConfig({"gpu": "CUDA"}), WITH_GPU)
    assert plan.layers == {"CUDA": "nvidia/cuda:12.1-runtime"}
    with pytest.raises(MissingLayer):
        plan_deployment(_recipe({"CUDA": None}), ResolvedConfig({"gpu": "CUDA"}), WITH_GPU)


def test_incompatible_driver():
    old = parse_bundle({"GPU Backends": {"CUDA": {"version": "11.8", "device_capability": "sm_80"}}})
    with pytest.raises(IncompatibleGpu):
        plan_deployment(_recipe(), ResolvedConfig({"gpu": "CUDA"}), old)


def test_missing_deferred_layer():
    recipe = _recipe()
    recipe.deferred_layers = {}
    with pytest.raises(MissingLayer):
        plan_deployment(recipe, ResolvedConfig({"gpu": "CUDA"}), WITH_GPU)


def test_config_not_in_recipe():
    with pytest.raises(ConfigNotInRecipe) as err:
        select_config(_recipe(), ResolvedConfig({"gpu": "HIP"}))
    assert "gpu-none" in str(err.value)
    assert select_config(_recipe(), ResolvedConfig({"gpu": "cuda", "fft": "fftw3"}))["name"] == "gpu-cuda"


def test_two_vectorizations_coexist():
    recipe = _recipe()
    p1 = plan_deployment(recipe, ResolvedConfig({"gpu": "none", "vectorization": "AVX2_256"}), CPU_ONLY)
    p2 = plan_deployment(recipe, ResolvedConfig({"gpu": "none", "vectorization": "AVX_512"}), CPU_ONLY)
    assert p1.tag != p2.tag
    assert [s.artifact for s in p1.steps] == [s.artifact for s in p2.steps]
    assert p1.steps[0].flags != p2.steps[0].flags


def test_plan_deterministic():
    args = (_recipe(), ResolvedConfig({"gpu": "CUDA", "vectorization": "AVX_512"}), WITH_GPU)
    assert plan_deployment(*args).dumps() == plan_deployment(*args).dumps()


def test_lowering_base_flags():
    residual = ["-O2", "-I", "/x", "-DA=1", "-std=c++17", "-fPIC", "-c", "-include", "cfg.h", "-fopenmp", "-MD"]
    assert lowering_base_flags(residual) == ["-O2", "-fPIC", "-fopenmp"]
    step = LowerStep("t", "id", residual, ["-mavx2"], "-O2", "o.o")
    assert step.flags == ["-O2", "-fPIC", "-fopenmp", "-mavx2"]


# ---------------------------------------------------------------------------
# execution with the real toolchain


@requires_clang
def test_execute_lowers_lulesh(lulesh, clang_driver, tmp_path):
    project, plan, _ = lulesh
    store = Store(tmp_path / "store")
    artifacts, _ = emit_ir_set(plan, clang_driver, store, jobs=4)
    by_unit = {a.unit: a for a in artifacts}
    manifests = {c["name"]: render_install_manifest(c["name"], plan, by_unit) for c in plan.configs}
    recipe, _ = render_container_recipe(plan, manifests, {"toolchain": "llvm:14"})
    resolved = ResolvedConfig({"mpi": "off", "openmp": "on", "vectorization": "AVX2_256"})
    dplan = plan_deployment(recipe, resolved, CPU_ONLY, out_root=str(tmp_path / "out"))
    outputs = execute(dplan, store, clang_driver, jobs=4)
    assert len(outputs) == 5 and all(os.path.getsize(p) > 0 for p in outputs)
    assert all(s.arch_flags == ["-mavx2"] for s in dplan.steps)
    with open(outputs[0], "rb") as fh:
        assert fh.read(4) == b"\x7fELF"


@requires_clang
def test_execute_compiles_sd_assembly(tmp_path, clang_driver):
    import projects
    from irforge.dedup import dedup
    project = projects.mixed_project(str(tmp_path / "proj"))
    plan, _ = dedup(project.configs, clang_driver)
    store = Store(tmp_path / "store")
    artifacts, _ = emit_ir_set(plan, clang_driver, store)
    by_unit = {a.unit: a for a in artifacts}
    manifests = {c["name"]: render_install_manifest(c["name"], plan, by_unit) for c in plan.configs}
    recipe, _ = render_container_recipe(plan, manifests, {"toolchain": "llvm:14"})
    dplan = plan_deployment(recipe, ResolvedConfig({"opt": "os"}), CPU_ONLY, out_root=str(tmp_path / "out"))
    assert len(dplan.sd_compiles) == 1 and len(dplan.steps) == 4
    outputs = execute(dplan, store, clang_driver, jobs=2)
    assert len(outputs) == 5 and all(os.path.exists(p) for p in outputs)
