"""Target-system feature discovery.

Reports come from a declared probe bundle (JSON shaped like
``{"CPU Info": {...}, "GPU Backends": {...}}``), from live probes of the host,
or both; declared values win for overlapping keys.
"""

import glob
import json
import logging
import os
import platform
import re
import shutil
import subprocess
from dataclasses import dataclass, field
from typing import Optional

from .errors import MalformedBundle, ProbeUnavailable

log = logging.getLogger(__name__)

PROBED, INFERRED, DECLARED = "probed", "inferred", "declared"

# backend (lowercase) -> library assumed present whenever the runtime is
INFERRED_LIBRARIES = {
    "cuda": "cuFFT",
    "rocm": "rocFFT",
    "hip": "rocFFT",
}

CUDA_DRIVER_GLOBS = (
    "/usr/lib/x86_64-linux-gnu/libcuda.so*",
    "/usr/lib/aarch64-linux-gnu/libcuda.so*",
    "/usr/lib64/libcuda.so*",
    "/usr/local/cuda/lib64/libcudart.so*",
)
ROCM_GLOBS = ("/opt/rocm/lib/libamdhip64.so*",)


@dataclass
class CpuInfo:
    architecture: str = ""
    vector_features: frozenset = frozenset()


@dataclass
class GpuBackend:
    version: Optional[str] = None
    libraries: list = field(default_factory=list)
    device_capability: Optional[str] = None


@dataclass
class Library:
    version: Optional[str] = None
    origin: str = DECLARED
    probe: Optional[str] = None  # what triggered an inferred entry


@dataclass
class SystemFeatureReport:
    cpu: CpuInfo = field(default_factory=CpuInfo)
    gpu_backends: dict = field(default_factory=dict)
    libraries: dict = field(default_factory=dict)
    toolchains: dict = field(default_factory=dict)  # name -> version
    warnings: list = field(default_factory=list)

    def has_feature(self, token: str) -> bool:
        return token.lower() in self.cpu.vector_features

    def gpu_backend(self, name: str):
        for key, backend in self.gpu_backends.items():
            if key.lower() == name.lower():
                return key, backend
        return None, None

    def library(self, name: str):
        folded = _fold(name)
        for key, lib in self.libraries.items():
            if _fold(key) == folded:
                return lib
        return None

    def to_dict(self) -> dict:
        return {
            "cpu": {
                "architecture": self.cpu.architecture,
                "vector_features": sorted(self.cpu.vector_features),
            },
            "gpu_backends": {
                name: _drop_none({
                    "version": b.version,
                    "libraries": list(b.libraries),
                    "device_capability": b.device_capability,
                })
                for name, b in sorted(self.gpu_backends.items())
            },
            "libraries": {
                name: _drop_none({"version": lib.version, "origin": lib.origin, "probe": lib.probe})
                for name, lib in sorted(self.libraries.items())
            },
            "toolchains": {name: {"version": v} for name, v in sorted(self.toolchains.items())},
            "warnings": list(self.warnings),
        }

    def dumps(self) -> str:
        return json.dumps(self.to_dict(), indent=2, sort_keys=True) + "\n"


def _fold(name: str) -> str:
    return name.lower().replace("-", "_")


def _drop_none(d: dict) -> dict:
    return {k: v for k, v in d.items() if v is not None}


def _pick(d: dict, *names, default=None):
    for n in names:
        if n in d:
            return d[n]
    return default


def parse_bundle(data) -> SystemFeatureReport:
    """Build a report from a declared bundle (dict or JSON text).

    Both the human-facing keys (``"CPU Info"``, ``"GPU Backends"``,
    ``"Architecture"``, ``"Vectorization"``, ``"lib"``) and the canonical
    lowercase keys written by ``SystemFeatureReport.to_dict`` are accepted.
    """
    if isinstance(data, (str, bytes)):
        try:
            data = json.loads(data)
        except json.JSONDecodeError as exc:
            raise MalformedBundle(f"bundle is not valid JSON: {exc}") from exc
    if not isinstance(data, dict):
        raise MalformedBundle("bundle must be a JSON object")
    report = SystemFeatureReport()
    try:
        cpu = _pick(data, "CPU Info", "cpu", default={}) or {}
        arch = _pick(cpu, "Architecture", "architecture", default="") or ""
        feats = _pick(cpu, "Vectorization", "vector_features", "flags", default=[]) or []
        if isinstance(feats, str):
            feats = feats.split()
        report.cpu = CpuInfo(str(arch), frozenset(str(f).lower() for f in feats))

        gpus = _pick(data, "GPU Backends", "gpu_backends", default={}) or {}
        for name, entry in gpus.items():
            entry = entry or {}
            libs = _pick(entry, "lib", "libs", "libraries", default=[]) or []
            if isinstance(libs, str):
                libs = [libs]
            version = _pick(entry, "version", "Version")
            cap = _pick(entry, "device_capability", "compute_capability")
            report.gpu_backends[name] = GpuBackend(
                None if version is None else str(version), [str(p) for p in libs],
                None if cap is None else str(cap),
            )

        for name, entry in (_pick(data, "Libraries", "libraries", default={}) or {}).items():
            if isinstance(entry, str) or entry is None:
                entry = {"version": entry}
            report.libraries[name] = Library(
                entry.get("version"), entry.get("origin", DECLARED), entry.get("probe"))

        for name, entry in (_pick(data, "Toolchains", "toolchains", default={}) or {}).items():
            report.toolchains[name] = entry.get("version") if isinstance(entry, dict) else entry
    except (AttributeError, TypeError) as exc:
        raise MalformedBundle(f"unexpected bundle structure: {exc}") from exc
    return report


# ---------------------------------------------------------------------------
# live probes


def read_cpu_flags(cpuinfo_path="/proc/cpuinfo") -> frozenset:
    try:
        with open(cpuinfo_path, encoding="utf-8", errors="replace") as fh:
            text = fh.read()
    except OSError as exc:
        raise ProbeUnavailable(f"cannot read {cpuinfo_path}: {exc}") from exc
    # x86 uses "flags", arm64 uses "Features"
    m = re.search(r"^(?:flags|Features)\s*:\s*(.*)$", text, re.MULTILINE)
    return frozenset(m.group(1).lower().split()) if m else frozenset()


def _cuda_version(root="/usr/local/cuda"):
    path = os.path.join(root, "version.json")
    if os.path.exists(path):
        with open(path, encoding="utf-8") as fh:
            return json.load(fh).get("cuda", {}).get("version")
    path = os.path.join(root, "version.txt")
    if os.path.exists(path):
        with open(path, encoding="utf-8") as fh:
            m = re.search(r"(\d+\.\d+(?:\.\d+)?)", fh.read())
            return m.group(1) if m else None
    return None


def _rocm_version(root="/opt/rocm"):
    path = os.path.join(root, ".info", "version")
    if os.path.exists(path):
        with open(path, encoding="utf-8") as fh:
            return fh.read().strip().split("-")[0]
    return None


def _tool_version(exe: str):
    path = shutil.which(exe)
    if not path:
        return None
    try:
        out = subprocess.run([path, "--version"], capture_output=True, text=True, timeout=10).stdout
    except (OSError, subprocess.SubprocessError):
        return None
    m = re.search(r"version\s+(\d+(?:\.\d+)+)", out) or re.search(r"(\d+\.\d+(?:\.\d+)?)", out)
    return m.group(1) if m else None


def probe_live(cpuinfo_path="/proc/cpuinfo", extra_library_paths=()) -> SystemFeatureReport:
    if platform.system() != "Linux":
        raise ProbeUnavailable(f"live probing is not supported on {platform.system()}")
    report = SystemFeatureReport()
    report.cpu = CpuInfo(platform.machine(), read_cpu_flags(cpuinfo_path))

    cuda_libs = sorted({p for g in CUDA_DRIVER_GLOBS for p in glob.glob(g)})
    cuda_libs += [p for p in extra_library_paths if "cuda" in os.path.basename(p) and os.path.exists(p)]
    if cuda_libs:
        report.gpu_backends["CUDA"] = GpuBackend(_cuda_version(), cuda_libs)
    rocm_libs = sorted({p for g in ROCM_GLOBS for p in glob.glob(g)})
    if rocm_libs:
        report.gpu_backends["ROCm"] = GpuBackend(_rocm_version(), rocm_libs)

    for exe, name in (("clang", "clang"), ("gcc", "gcc"), ("nvcc", "nvcc"), ("icpx", "icpx")):
        version = _tool_version(exe)
        if version:
            report.toolchains[name] = version
    return report


# ---------------------------------------------------------------------------


def _merge(live: SystemFeatureReport, declared: SystemFeatureReport) -> SystemFeatureReport:
    out = SystemFeatureReport()
    out.cpu = CpuInfo(
        declared.cpu.architecture or live.cpu.architecture,
        declared.cpu.vector_features if declared.cpu.vector_features else live.cpu.vector_features,
    )
    for attr in ("gpu_backends", "libraries", "toolchains"):
        merged = dict(getattr(live, attr))
        for name, value in getattr(declared, attr).items():
            old = merged.get(name)
            old_v = getattr(old, "version", old)
            new_v = getattr(value, "version", value)
            if old is not None and old_v is not None and new_v is not None and old_v != new_v:
                msg = f"{attr}.{name}: declared version {new_v} overrides probed {old_v}"
                out.warnings.append(msg)
                log.warning(msg)
            merged[name] = value
        setattr(out, attr, merged)
    return out


def apply_inference(report: SystemFeatureReport) -> SystemFeatureReport:
    """Add libraries implied by GPU runtimes (cuFFT with CUDA, rocFFT with ROCm)."""
    for backend in sorted(report.gpu_backends):
        lib = INFERRED_LIBRARIES.get(backend.lower())
        if lib and report.library(lib) is None:
            report.libraries[lib] = Library(None, INFERRED, f"gpu_backends.{backend}")
    return report


def discover_system(bundle=None, live: Optional[bool] = None, **probe_kw) -> SystemFeatureReport:
    """Produce a SystemFeatureReport.

    ``bundle`` is a path, JSON text or dict.  ``live`` defaults to True only
    when no bundle is given; declared values win on overlap.
    """
    if live is None:
        live = bundle is None
    declared = None
    if bundle is not None:
        if isinstance(bundle, (str, os.PathLike)) and os.path.exists(bundle):
            with open(bundle, encoding="utf-8") as fh:
                bundle = fh.read()
        declared = parse_bundle(bundle)
    if live:
        probed = probe_live(**probe_kw)
        for lib in probed.libraries.values():
            lib.origin = PROBED
        report = _merge(probed, declared) if declared is not None else probed
    else:
        report = declared if declared is not None else SystemFeatureReport()
    return apply_inference(report)
