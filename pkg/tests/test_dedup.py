import json
import os
from collections import Counter

import pytest
from hypothesis import given
from hypothesis import strategies as st

import projects
from conftest import requires_clang
from irforge.buildscan import BuildConfiguration, CompilationTarget
from irforge.dedup import (DedupPlan, classify_openmp, codegen_flags, dedup, has_wide_vector_types,
                           is_arch_flag, load_sd_list, make_report, normalize_ir, normalize_line_markers,
                           normalize_openmp, optimization_level, partition_targets, strip_arch_flags)
from irforge.errors import DriverFailure, PreconditionViolated, UnknownTargetId
from oracles import ARCH_PATTERNS, brute_force_groups, drop_openmp_module_flag, oracle_is_arch, plan_groups

# ---------------------------------------------------------------------------
# arch stripping


def test_strip_examples():
    assert strip_arch_flags(["-O3", "-march=skylake-avx512", "-c"]) == (("-O3", "-c"), ("-march=skylake-avx512",))
    assert strip_arch_flags(["-O2", "-c"]) == (("-O2", "-c"), ())
    residual, profile = strip_arch_flags(["-mavx2", "-mfma", "-DGMX_SIMD=AVX2_256"])
    assert profile == ("-mavx2", "-mfma") and residual == ("-DGMX_SIMD=AVX2_256",)


def test_macro_definitions_never_stripped():
    residual, profile = strip_arch_flags(["-D", "-march=x", "-D-mavx", "-U", "-mavx2"])
    assert profile == ()
    assert residual == ("-D", "-march=x", "-D-mavx", "-U", "-mavx2")


def test_separate_target_argument():
    assert strip_arch_flags(["-target", "x86_64-linux-gnu", "-O2"]) == (("-O2",), ("-target", "x86_64-linux-gnu"))


def test_unknown_m_flag_is_arch():
    assert is_arch_flag("-mamx-int8")
    assert not is_arch_flag("-m64")
    assert not is_arch_flag("-mcmodel=large")
    assert not is_arch_flag("-fopenmp")


_ARCH_TOKENS = ["-march=native", "-march=skylake-avx512", "-mtune=znver3", "-mcpu=neoverse-v1", "-mavx",
                "-mavx2", "-mfma", "-msse4.1", "-msse4.2", "-mavx512f", "-mno-avx512f", "-mbmi2", "-mpopcnt",
                "--target=aarch64-linux-gnu", "-mprefer-vector-width=256", "-mf16c", "-mneon"]
_OTHER_TOKENS = ["-O2", "-O3", "-g", "-c", "-fPIC", "-fopenmp", "-Wall", "-DUSE_MPI=1", "-DSIMD=AVX2",
                 "-I/include", "-std=c++17", "-m64", "-mcmodel=medium", "-ffast-math", "-fno-math-errno"]


@given(st.lists(st.sampled_from(_ARCH_TOKENS + _OTHER_TOKENS), max_size=12))
def test_strip_matches_pattern_oracle(tokens):
    residual, profile = strip_arch_flags(tokens)
    assert list(profile) == [t for t in tokens if oracle_is_arch(t)]
    assert list(residual) == [t for t in tokens if not oracle_is_arch(t)]
    # reconstruction as multisets, and both halves keep their original order
    assert Counter(residual) + Counter(profile) == Counter(tokens)


def test_oracle_table_is_literal():
    assert len(ARCH_PATTERNS) >= 5


# ---------------------------------------------------------------------------
# OpenMP


def test_classify_openmp():
    assert classify_openmp(b"void f(int *a) {\n#pragma omp parallel for\n for(;;); }")
    assert classify_openmp(b"int main(void) {\n  _Pragma(\"omp parallel\")\n  return 0; }")
    assert not classify_openmp(b"double dot(double *a, double *b, int n);\n")
    assert classify_openmp(b"int t = omp_get_num_threads();")
    assert not classify_openmp(b"int roomp_count; /* comp_x */")
    assert not classify_openmp(b"# 1 \"comp.h\"\nint x;")


def test_normalize_openmp():
    plain = b"int add(int a, int b) { return a + b; }\n"
    assert normalize_openmp(["-O2", "-fopenmp"], ["-O2"], plain) is True
    assert normalize_openmp(["-O2", "-fopenmp"], ["-O2"], b"#pragma omp parallel\n{}") is False
    with pytest.raises(PreconditionViolated):
        normalize_openmp(["-O2", "-fopenmp"], ["-O3"], plain)


_IR = """; ModuleID = 'a.c'
define i32 @f() #0 {
  ret i32 0, !dbg !5
}
attributes #0 = { "frame-pointer"="none" "target-cpu"="x86-64" }
!llvm.module.flags = !{!0, !1, !2}
!llvm.ident = !{!3}
!0 = !{i32 1, !"wchar_size", i32 4}
!1 = !{i32 7, !"openmp", i32 50}
!2 = !{i32 7, !"uwtable", i32 2}
!3 = !{!"clang"}
!5 = !{}
"""


def test_normalize_ir_drops_openmp_flag():
    out = normalize_ir(_IR.encode()).decode()
    assert '"openmp"' not in out
    assert "!llvm.module.flags = !{!0, !1}" in out
    assert '!1 = !{i32 7, !"uwtable", i32 2}' in out
    assert "!dbg !3" in out
    assert out == drop_openmp_module_flag(_IR)
    no_flag = _IR.replace("!1 = !{i32 7, !\"openmp\", i32 50}\n", "")
    assert normalize_ir(no_flag.encode()) == no_flag.encode()


def test_wide_vectors():
    assert has_wide_vector_types(b"typedef float v8 __attribute__((vector_size(32)));")
    assert not has_wide_vector_types(b"typedef float v4 __attribute__((vector_size(16)));")
    assert not has_wide_vector_types(b"int x;")


def test_line_marker_normalization():
    text = (b'# 1 "/tmp/b1/gen.h" 1\n# 1 "<built-in>" 1\n# 366 "<built-in>" 3\n'
            b'# 1 "<command line>" 1\n#line 7 "/tmp/b1/x.c"\nint x;\n')
    out = normalize_line_markers(text, "/tmp/b1")
    assert out == b'# 1 "\xc2\xabBUILD\xc2\xbb/gen.h" 1\n#line 7 "\xc2\xabBUILD\xc2\xbb/x.c"\nint x;\n'
    assert normalize_line_markers(text.replace(b"/tmp/b1", b"/tmp/other"), "/tmp/other") == out


def test_codegen_flags_and_opt_level():
    assert codegen_flags(("-DX=1", "-I", "inc", "-O2", "-c", "-fPIC", "-Wall")) == ("-O2", "-fPIC")
    assert optimization_level(["-O2", "-O3"]) == "-O3"
    assert optimization_level(["-g"]) == "-O0"
    assert optimization_level(["-O"]) == "-O2"


# ---------------------------------------------------------------------------
# partition


def _cfg(name, files):
    targets = [CompilationTarget(f, f + ".o", ("-O2", "-c"), lang) for f, lang in files]
    return BuildConfiguration(name, {}, targets)


def test_partition_assembly_is_sd():
    configs = [_cfg("a", [("x.c", "c"), ("y.S", "other"), ("mpi_user.c", "c")])]
    si, sd = partition_targets(configs)
    assert sd == {("a", "y.S -> y.S.o")}
    assert ("a", "mpi_user.c -> mpi_user.c.o") in si


def test_partition_user_list_and_unknown():
    configs = [_cfg("a", [("x.c", "c"), ("z.c", "c")]), _cfg("b", [("x.c", "c")])]
    si, sd = partition_targets(configs, ["x.c"])
    assert sd == {("a", "x.c -> x.c.o"), ("b", "x.c -> x.c.o")}
    assert si == {("a", "z.c -> z.c.o")}
    with pytest.raises(UnknownTargetId):
        partition_targets(configs, ["nope.c"])


def test_partition_empty_user_list():
    si, sd = partition_targets([_cfg("a", [("x.c", "c"), ("y.cc", "c++")])])
    assert sd == set() and len(si) == 2


class _NoCuda:
    def can_emit(self, lang):
        return lang in ("c", "c++")


def test_partition_driver_capability():
    si, sd = partition_targets([_cfg("a", [("k.cu", "cuda"), ("x.c", "c")])], driver=_NoCuda())
    assert sd == {("a", "k.cu -> k.cu.o")}


def test_load_sd_list(tmp_path):
    p = tmp_path / "sd.json"
    p.write_text(json.dumps(["a.S", "b.c"]))
    assert load_sd_list(str(p)) == ["a.S", "b.c"]
    p.write_text("# comment\na.S\n\nb.c\n")
    assert load_sd_list(str(p)) == ["a.S", "b.c"]


def test_dedup_preconditions():
    with pytest.raises(PreconditionViolated):
        dedup([], None)
    with pytest.raises(PreconditionViolated):
        dedup([_cfg("a", []), _cfg("a", [])], None)


# ---------------------------------------------------------------------------
# against the real toolchain


@requires_clang
def test_lulesh_counts(lulesh):
    _, plan, report = lulesh
    assert (report.N, report.sum_T, report.T_prime) == (4, 20, 14)
    assert report.T == {"mpi-on_openmp-on": 5, "mpi-on_openmp-off": 5, "mpi-off_openmp-on": 5,
                        "mpi-off_openmp-off": 5}
    assert report.sd_count == 0 and report.si_count == 20
    assert round(report.reduction, 4) == 0.3
    merged = [u for u in plan.units.values() if u.openmp_merged]
    assert len(merged) == 6 and all(len(u.members) == 2 for u in merged)
    assert not plan.coverage_problems()


@requires_clang
def test_lulesh_core_and_deltas(lulesh):
    _, plan, _ = lulesh
    # nothing is shared by all four configurations: every unit is some configs' delta
    assert plan.core == []
    assert sum(len(v) for v in plan.deltas.values()) == sum(len(u.configs) for u in plan.units.values())


@requires_clang
def test_single_config_no_reduction(tmp_path, clang_driver):
    project = projects.single_config_project(str(tmp_path), k=5)
    plan, report = dedup(project.configs, clang_driver)
    assert report.T_prime == report.sum_T == 5
    assert report.dumps().count('"reduction": 0.0000') == 1
    assert set(plan.core) == set(plan.units)


@requires_clang
def test_identical_databases(tmp_path, clang_driver):
    project = projects.single_config_project(str(tmp_path), k=4)
    (cfg,) = project.configs
    twin = BuildConfiguration("twin", {}, list(cfg.targets), cfg.build_root)
    plan, report = dedup([cfg, twin], clang_driver)
    bf = brute_force_groups([cfg, twin], clang_driver)
    assert report.T_prime == len(bf) == 4
    assert report.sum_T == 8


@requires_clang
def test_refinement_only_merges(tmp_path, clang_driver):
    project = projects.mixed_project(str(tmp_path))
    keyed, kreport = dedup(project.configs, clang_driver, refine=False)
    refined, rreport = dedup(project.configs, clang_driver)
    assert rreport.key_units == kreport.ir_units
    assert rreport.T_prime <= kreport.T_prime
    final = plan_groups(refined)
    for group in plan_groups(keyed):
        assert any(group <= g for g in final)


@requires_clang
def test_deterministic_across_jobs(tmp_path, clang_driver):
    project = projects.simd_project(str(tmp_path))
    a, ra = dedup(project.configs, clang_driver, jobs=1)
    b, rb = dedup(project.configs, clang_driver, jobs=8)
    assert a.dumps() == b.dumps() and ra.dumps() == rb.dumps()


@requires_clang
def test_arch_sensitive_units(tmp_path, clang_driver):
    project = projects.simd_project(str(tmp_path))
    plan, _ = dedup(project.configs, clang_driver)
    by_file = {}
    for unit in plan.units.values():
        by_file.setdefault(os.path.basename(unit.emit["file"]), []).append(unit)
    # only the AVX2 profile changes what isa.c preprocesses to
    isa = {frozenset(c.split("_")[0] for c in u.configs): u.arch_sensitive for u in by_file["isa.c"]}
    assert isa.get(frozenset({"isa-avx2"})) is True
    assert isa.get(frozenset({"isa-sse4.1"})) is False
    assert all(u.arch_sensitive for u in by_file["vec.c"])
    assert not any(u.arch_sensitive for u in by_file["vec128.c"])
    locked = {os.path.basename(t.file) for ts in plan.targets.values() for t in ts.values() if t.arch_locked}
    assert locked == {"isa.c", "vec.c"}


@requires_clang
def test_driver_failure_is_fail_fast(tmp_path, clang_driver):
    project = projects.write_project(str(tmp_path), {"ok.c": "int f(void){return 1;}\n",
                                                     "bad.c": "int g(void){ return }\n"},
                                     [("only", {}, lambda rel: ["-O2"])])
    with pytest.raises(DriverFailure) as err:
        dedup(project.configs, clang_driver)
    assert "bad.c" in str(err.value)


@requires_clang
def test_plan_round_trip(lulesh, tmp_path):
    _, plan, _ = lulesh
    path = tmp_path / "plan.json"
    path.write_text(plan.dumps())
    again = DedupPlan.load(str(path))
    assert again.dumps() == plan.dumps()


@requires_clang
def test_report_recomputes(lulesh):
    project, plan, report = lulesh
    again = make_report(project.configs, plan, report.key_units)
    assert again.to_dict() == report.to_dict()
    assert 0 <= again.reduction < 1 and again.T_prime <= again.sum_T
