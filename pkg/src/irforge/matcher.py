"""Intersect an application's specialization catalog with a system's features."""

import json
import logging
from dataclasses import dataclass, field
from functools import lru_cache
from importlib import resources
from typing import Optional

from .catalog import SpecializationCatalog
from .errors import UnknownPoint, UnresolvedMandatory, UnsupportedValue
from .sysprobe import SystemFeatureReport
from .versions import version_at_least

log = logging.getLogger(__name__)

GPU, VECTORIZATION, LINEAR_ALGEBRA, FFT = "gpu", "vectorization", "linear_algebra", "fft"
NO_GPU = "none"
ON, OFF = "on", "off"

# parallel models the application carries itself
SELF_CONTAINED_PARALLEL = {"pthread", "pthreads", "threads", "thread_mpi", "tmpi", "none"}
# parallel models provided by any compiler toolchain
TOOLCHAIN_PARALLEL = {"openmp", "openmp_simd"}


@lru_cache(maxsize=None)
def simd_table() -> dict:
    text = resources.files("irforge").joinpath("data/simd_levels.json").read_text("utf-8")
    return json.loads(text)


def _fold(name: str) -> str:
    return name.strip().upper().replace("-", "_")


def simd_entry(level: str, table: Optional[dict] = None) -> Optional[dict]:
    table = simd_table() if table is None else table
    folded = _fold(level)
    for name, entry in table.items():
        if _fold(name) == folded:
            return entry
    return None


def lowering_flags(level: str, table: Optional[dict] = None) -> list:
    entry = simd_entry(level, table)
    return list(entry["lower_flags"]) if entry else []


@dataclass
class CommonSpecialization:
    vectorization_flags: dict = field(default_factory=dict)  # level -> flag
    gpu_backends: dict = field(default_factory=dict)  # name -> {"version", "flag"}
    parallel: dict = field(default_factory=dict)  # name -> flag
    libraries: dict = field(default_factory=dict)  # category -> {name: flag}
    defaults: dict = field(default_factory=dict)  # point -> value
    gpu_requested: bool = False

    def points(self) -> dict:
        """Selectable points in canonical order, each with its allowed values."""
        out = {}
        if self.gpu_backends:
            out[GPU] = list(self.gpu_backends)
        if self.vectorization_flags:
            out[VECTORIZATION] = list(self.vectorization_flags)
        for name in self.parallel:
            out[name] = [ON, OFF]
        for category in (LINEAR_ALGEBRA, FFT):
            if self.libraries.get(category):
                out[category] = list(self.libraries[category])
        for name in self.libraries.get("other", {}):
            out[name] = [ON, OFF]
        return out

    def flag_for(self, point: str, value: str) -> Optional[str]:
        if point == GPU:
            return self.gpu_backends.get(value, {}).get("flag")
        if point == VECTORIZATION:
            return self.vectorization_flags.get(value)
        if point in self.parallel:
            return self.parallel[point] if value == ON else None
        if point in (LINEAR_ALGEBRA, FFT):
            return self.libraries.get(point, {}).get(value)
        return self.libraries.get("other", {}).get(point) if value == ON else None

    def to_dict(self, include_resolution: bool = False) -> dict:
        """Figure-shaped document; resolution metadata (defaults, gpu_build) is opt-in."""
        body = {
            "vectorization_flags": dict(self.vectorization_flags),
            "gpu_backends": {n: dict(e) for n, e in self.gpu_backends.items()},
        }
        if self.parallel:
            body["parallel"] = dict(self.parallel)
        if any(self.libraries.values()):
            body["libraries"] = {c: dict(v) for c, v in self.libraries.items() if v}
        if include_resolution:
            body["defaults"] = dict(self.defaults)
            body["gpu_build"] = self.gpu_requested
        return {"common_specialization": body}

    def dumps(self, include_resolution: bool = False) -> str:
        return json.dumps(self.to_dict(include_resolution), indent=2) + "\n"

    @classmethod
    def from_dict(cls, data: dict) -> "CommonSpecialization":
        body = data.get("common_specialization", data)
        return cls(
            dict(body.get("vectorization_flags", {})),
            {n: dict(e) for n, e in body.get("gpu_backends", {}).items()},
            dict(body.get("parallel", {})),
            {c: dict(v) for c, v in body.get("libraries", {}).items()},
            dict(body.get("defaults", {})),
            bool(body.get("gpu_build", False)),
        )


def _library_supported(features, name, minimum=None):
    lib = features.library(name)
    if lib is None:
        return False
    if minimum in (None, "") or lib.version is None:
        return True
    try:
        return version_at_least(lib.version, minimum)
    except ValueError:
        return True


def _parallel_supported(features, name, minimum):
    folded = name.lower().replace("-", "_")
    if folded in SELF_CONTAINED_PARALLEL:
        return True
    if _library_supported(features, name, minimum):
        return True
    return folded in TOOLCHAIN_PARALLEL and bool(features.toolchains)


def intersect(catalog: SpecializationCatalog, features: SystemFeatureReport,
              table: Optional[dict] = None) -> CommonSpecialization:
    common = CommonSpecialization()
    common.gpu_requested = bool(catalog.gpu_build and catalog.gpu_build.value)

    for name, entry in catalog.gpu_backends.items():
        key, backend = features.gpu_backend(name)
        if backend is None:
            continue
        if entry.minimum_version and not (
            backend.version and version_at_least(backend.version, entry.minimum_version)
        ):
            continue
        common.gpu_backends[name] = {"version": backend.version, "flag": entry.build_flag}
        if entry.used_as_default:
            common.defaults[GPU] = name

    for level, entry in catalog.simd_vectorization.items():
        spec = simd_entry(level, table)
        if spec is None:
            log.warning("vectorization level %r has no ISA requirement entry; dropped", level)
            continue
        if not spec["requires"]:
            # needs no hardware feature, so it is not part of what the system offers
            continue
        if all(features.has_feature(tok) for tok in spec["requires"]):
            common.vectorization_flags[level] = entry.build_flag
            if entry.default:
                common.defaults[VECTORIZATION] = level

    for name, entry in catalog.parallel_programming_libraries.items():
        if _parallel_supported(features, name, entry.minimum_version):
            common.parallel[name] = entry.build_flag
            common.defaults[name] = ON if entry.used_as_default else OFF

    for category, entries in ((LINEAR_ALGEBRA, catalog.linear_algebra_libraries),
                              (FFT, catalog.fft_libraries)):
        for name, entry in entries.items():
            built_in = bool(getattr(entry, "built_in", False))
            if built_in or _library_supported(features, name):
                common.libraries.setdefault(category, {})[name] = entry.build_flag
                if entry.used_as_default:
                    common.defaults[category] = name

    for name, entry in catalog.other_external_libraries.items():
        if _library_supported(features, name, entry.version):
            common.libraries.setdefault("other", {})[name] = entry.build_flag
            common.defaults[name] = ON if entry.used_as_default else OFF
    return common


@dataclass
class ResolvedConfig:
    assignments: dict = field(default_factory=dict)  # ordered point -> value
    provenance: dict = field(default_factory=dict)  # point -> user|operator|default

    def __eq__(self, other):
        if not isinstance(other, ResolvedConfig):
            return NotImplemented
        return list(self.assignments.items()) == list(other.assignments.items())

    def to_dict(self) -> dict:
        return {"assignments": dict(self.assignments), "provenance": dict(self.provenance)}

    @classmethod
    def from_dict(cls, data: dict) -> "ResolvedConfig":
        return cls(dict(data.get("assignments", {})), dict(data.get("provenance", {})))


def _match_value(point, value, available):
    if value in available:
        return value
    for cand in available:
        if _fold(cand) == _fold(value):
            return cand
    return None


def resolve(common: CommonSpecialization, choices: Optional[dict] = None,
            operator_prefs: Optional[dict] = None) -> ResolvedConfig:
    """Resolve every point: user choice, then operator preference, then catalog default.

    Single-option points resolve to that option.  The GPU backend is
    mandatory when the catalog requests GPU builds and the system offers a
    backend; ``gpu=none`` opts out explicitly.
    """
    choices = dict(choices or {})
    operator_prefs = dict(operator_prefs or {})
    points = common.points()

    for point in choices:
        if point not in points and not (point == GPU and choices[point] == NO_GPU):
            raise UnknownPoint(f"unknown specialization point {point!r}; known: {list(points)}")

    resolved = ResolvedConfig()
    for point, available in points.items():
        value, source = None, None
        if point in choices:
            value = choices[point]
            if point == GPU and value.lower() == NO_GPU:
                resolved.assignments[point], resolved.provenance[point] = NO_GPU, "user"
                continue
            matched = _match_value(point, value, available)
            if matched is None:
                raise UnsupportedValue(point, value, available)
            value, source = matched, "user"
        elif point in operator_prefs:
            matched = _match_value(point, operator_prefs[point], available)
            if matched is None:
                log.warning("operator preference %s=%s not available here", point, operator_prefs[point])
            else:
                value, source = matched, "operator"
        if value is None and point in common.defaults:
            value, source = common.defaults[point], "default"
        if value is None and len(available) == 1:
            value, source = available[0], "default"
        if value is None:
            if point == GPU and common.gpu_requested:
                raise UnresolvedMandatory(f"choose a GPU backend from {available} (or gpu=none)")
            continue
        resolved.assignments[point] = value
        resolved.provenance[point] = source
    return resolved


def parse_selections(items) -> dict:
    """Parse ``point=value`` strings (as given to --select)."""
    out = {}
    for item in items or ():
        point, sep, value = item.partition("=")
        if not sep or not point:
            raise ValueError(f"expected point=value, got {item!r}")
        out[point.strip()] = value.strip()
    return out
