"""Specialization catalogs: schema validation, data model and flag normalization.

A catalog describes the build-time option space of one application (GPU
backends, parallel runtimes, libraries, vectorization levels).  The on-disk
format is JSON validated against ``data/specialization_schema.json``, which is
the single source of truth; ``validate_catalog`` interprets that schema
directly rather than restating it in code.
"""

import json
import logging
import re
from dataclasses import dataclass, field
from functools import lru_cache
from importlib import resources
from typing import Any, Optional

from .errors import CatalogSyntaxError, InvalidLabel, SchemaViolation

log = logging.getLogger(__name__)

_DEFINE_NAME = re.compile(r"[A-Za-z_][A-Za-z0-9_]*\Z")


@lru_cache(maxsize=None)
def schema_text() -> str:
    return resources.files("irforge").joinpath("data/specialization_schema.json").read_text("utf-8")


def load_schema() -> dict:
    return json.loads(schema_text())


# ---------------------------------------------------------------------------
# flags


@dataclass(frozen=True)
class CanonicalFlag:
    raw: str
    key: Optional[str]  # None for options that are not -D definitions
    value: Optional[str] = None

    @property
    def is_definition(self) -> bool:
        return self.key is not None

    def __str__(self):
        return self.raw


def normalize_flag(raw: str) -> CanonicalFlag:
    """Canonicalize a build flag label.

    Definition-style labels gain a ``-D`` prefix and have hyphens in the
    variable name folded to underscores.  The ``=value`` suffix (and a CMake
    ``:TYPE`` annotation) is kept verbatim.  Other dash options such as
    ``--enable-cuda`` or ``-march=native`` pass through untouched.
    """
    if raw is None or not raw.strip():
        raise InvalidLabel("empty flag label")
    text = raw.strip()
    if text.startswith("-D"):
        body = text[2:]
    elif text.startswith("-"):
        name, sep, value = text.partition("=")
        return CanonicalFlag(text, None, value if sep else None)
    else:
        body = text
    name, sep, value = body.partition("=")
    name, colon, vtype = name.partition(":")
    name = name.strip().replace("-", "_")
    if not _DEFINE_NAME.match(name):
        raise InvalidLabel(f"{raw!r}: definition name {name!r} has characters outside [A-Za-z0-9_]")
    canon = "-D" + name
    if colon:
        canon += ":" + vtype
    if sep:
        canon += "=" + value
    return CanonicalFlag(canon, name, value if sep else None)


def _norm(flag, normalize, problems=None):
    if flag is None or not normalize:
        return flag
    try:
        return normalize_flag(flag).raw
    except InvalidLabel as exc:
        # kept verbatim so the evaluator counts it as a miss
        if problems is not None:
            problems.append(str(exc))
        return flag


# ---------------------------------------------------------------------------
# schema interpretation

_TYPES = {
    "object": lambda v: isinstance(v, dict),
    "array": lambda v: isinstance(v, list),
    "string": lambda v: isinstance(v, str),
    "boolean": lambda v: isinstance(v, bool),
    "null": lambda v: v is None,
    "integer": lambda v: isinstance(v, int) and not isinstance(v, bool),
    "number": lambda v: isinstance(v, (int, float)) and not isinstance(v, bool),
}


def _pointer(path, key):
    return f"{path}/{str(key).replace('~', '~0').replace('/', '~1')}"


def schema_errors(instance, schema, path=""):
    """Yield (json-pointer, reason) for every violation of ``schema``."""
    if schema is True or schema == {}:
        return
    if schema is False:
        yield path or "/", "additional property not allowed"
        return
    types = schema.get("type")
    if types is not None:
        allowed = [types] if isinstance(types, str) else types
        if not any(_TYPES[t](instance) for t in allowed):
            yield path or "/", f"expected {' or '.join(allowed)}"
            return
    if "enum" in schema and instance not in schema["enum"]:
        yield path or "/", f"value {instance!r} not in {schema['enum']}"
    if isinstance(instance, dict):
        for key in schema.get("required", []):
            if key not in instance:
                yield _pointer(path, key), "required key absent"
        props = schema.get("properties", {})
        extra = schema.get("additionalProperties", True)
        for key, value in instance.items():
            if key in props:
                yield from schema_errors(value, props[key], _pointer(path, key))
            elif extra is False:
                yield _pointer(path, key), "additional property not allowed"
            elif isinstance(extra, dict):
                yield from schema_errors(value, extra, _pointer(path, key))
    if isinstance(instance, list) and "items" in schema:
        for i, item in enumerate(instance):
            yield from schema_errors(item, schema["items"], _pointer(path, i))


# ---------------------------------------------------------------------------
# data model


@dataclass
class GpuBuild:
    value: bool
    build_flag: Optional[str] = None
    extra: dict = field(default_factory=dict)


@dataclass
class VersionedOption:
    """Entry of gpu_backends / parallel_programming_libraries."""
    used_as_default: bool
    build_flag: Optional[str] = None
    minimum_version: Optional[str] = None
    extra: dict = field(default_factory=dict)


@dataclass
class LinearAlgebraLibrary:
    used_as_default: bool
    build_flag: Optional[str] = None
    condition: Optional[str] = None
    extra: dict = field(default_factory=dict)


@dataclass
class FFTLibrary:
    used_as_default: bool
    build_flag: Optional[str] = None
    condition: Optional[str] = None
    built_in: Optional[bool] = None
    dependencies: Optional[str] = None
    extra: dict = field(default_factory=dict)


@dataclass
class ExternalLibrary:
    version: str
    used_as_default: bool
    conditions: str
    build_flag: Optional[str] = None
    extra: dict = field(default_factory=dict)


@dataclass
class SimdLevel:
    build_flag: Optional[str]
    default: bool
    extra: dict = field(default_factory=dict)


@dataclass
class BuildSystem:
    type: str
    minimum_version: str
    extra: dict = field(default_factory=dict)


@dataclass
class InternalBuild:
    library_name: str
    build_flag: Optional[str] = None
    extra: dict = field(default_factory=dict)


@dataclass
class SpecializationCatalog:
    gpu_build: Optional[GpuBuild] = None
    gpu_backends: dict = field(default_factory=dict)
    parallel_programming_libraries: dict = field(default_factory=dict)
    linear_algebra_libraries: dict = field(default_factory=dict)
    fft_libraries: dict = field(default_factory=dict)
    other_external_libraries: dict = field(default_factory=dict)
    compiler_flags: list = field(default_factory=list)
    optimization_build_flags: list = field(default_factory=list)
    compilers: dict = field(default_factory=dict)  # name -> {"minimum_version": ...}
    architectures: list = field(default_factory=list)
    simd_vectorization: dict = field(default_factory=dict)
    build_system: Optional[BuildSystem] = None
    internal_build: Optional[InternalBuild] = None
    label_errors: list = field(default_factory=list, compare=False, repr=False)

    OPTION_MAPS = (
        "gpu_backends",
        "parallel_programming_libraries",
        "linear_algebra_libraries",
        "fft_libraries",
        "other_external_libraries",
    )

    def default_conflicts(self) -> dict:
        """Maps with more than one ``used_as_default``/``default`` entry."""
        out = {}
        for attr in self.OPTION_MAPS:
            names = [n for n, e in getattr(self, attr).items() if e.used_as_default]
            if len(names) > 1:
                out[attr] = names
        names = [n for n, e in self.simd_vectorization.items() if e.default]
        if len(names) > 1:
            out["simd_vectorization"] = names
        return out

    def to_dict(self) -> dict:
        return serialize_catalog(self)


def _entry_extra(entry: dict, known) -> dict:
    return {k: v for k, v in entry.items() if k not in known}


def _build(doc: dict, normalize: bool) -> SpecializationCatalog:
    problems = []
    nf = lambda f: _norm(f, normalize, problems)  # noqa: E731

    def versioned(d):
        return {
            name: VersionedOption(
                e["used_as_default"], nf(e.get("build_flag")), e.get("minimum_version"),
                _entry_extra(e, ("used_as_default", "build_flag", "minimum_version")),
            )
            for name, e in d.items()
        }

    gb, bs, ib = doc["gpu_build"], doc["build_system"], doc["internal_build"]
    cat = SpecializationCatalog(
        gpu_build=GpuBuild(gb["value"], nf(gb.get("build_flag")), _entry_extra(gb, ("value", "build_flag"))),
        gpu_backends=versioned(doc["gpu_backends"]),
        parallel_programming_libraries=versioned(doc["parallel_programming_libraries"]),
        linear_algebra_libraries={
            name: LinearAlgebraLibrary(
                e["used_as_default"], nf(e.get("build_flag")), e.get("condition"),
                _entry_extra(e, ("used_as_default", "build_flag", "condition")),
            )
            for name, e in doc["linear_algebra_libraries"].items()
        },
        fft_libraries={
            name: FFTLibrary(
                e["used_as_default"], nf(e.get("build_flag")), e.get("condition"),
                e.get("built-in"), e.get("dependencies"),
                _entry_extra(e, ("used_as_default", "build_flag", "condition", "built-in", "dependencies")),
            )
            for name, e in doc["FFT_libraries"].items()
        },
        other_external_libraries={
            name: ExternalLibrary(
                e["version"], e["used_as_default"], e["conditions"], nf(e.get("build_flag")),
                _entry_extra(e, ("version", "used_as_default", "conditions", "build_flag")),
            )
            for name, e in doc["other_external_libraries"].items()
        },
        compiler_flags=[nf(f) for f in doc["compiler_flags"]],
        optimization_build_flags=[nf(f) for f in doc["optimization_build_flags"]],
        compilers={name: dict(e) for name, e in doc["compilers"].items()},
        architectures=list(doc["architectures"]),
        simd_vectorization={
            name: SimdLevel(nf(e.get("build_flag")), e["default"], _entry_extra(e, ("build_flag", "default")))
            for name, e in doc["simd_vectorization"].items()
        },
        build_system=BuildSystem(bs["type"], bs["minimum_version"], _entry_extra(bs, ("type", "minimum_version"))),
        internal_build=InternalBuild(ib["library_name"], nf(ib.get("build_flag")),
                                     _entry_extra(ib, ("library_name", "build_flag"))),
    )
    cat.label_errors = problems
    return cat


def _empty_keys(doc):
    for attr in ("gpu_backends", "parallel_programming_libraries", "linear_algebra_libraries",
                 "FFT_libraries", "other_external_libraries", "compilers", "simd_vectorization"):
        for name in doc[attr]:
            if not name.strip():
                yield f"/{attr}/", "empty map key"


def validate_catalog(document, normalize: bool = True, strict: bool = False) -> SpecializationCatalog:
    """Parse and validate a catalog document (JSON text, bytes or a decoded dict).

    Acceptance is decided by the schema alone.  Empty option names, several
    defaults in one map and labels that cannot be canonicalized are logged;
    ``strict=True`` turns them into a SchemaViolation.
    """
    if isinstance(document, (str, bytes, bytearray)):
        try:
            document = json.loads(document)
        except json.JSONDecodeError as exc:
            raise CatalogSyntaxError(f"malformed catalog JSON: {exc}") from exc
    violations = list(schema_errors(document, load_schema()))
    if violations:
        raise SchemaViolation(violations)
    cat = _build(document, normalize)
    problems = list(_empty_keys(document))
    problems += [(f"/{k}", f"several defaults: {v}") for k, v in cat.default_conflicts().items()]
    problems += [("/", msg) for msg in cat.label_errors]
    if problems:
        if strict:
            raise SchemaViolation(problems)
        for path, reason in problems:
            log.warning("catalog %s: %s", path, reason)
    return cat


def _with_extra(base: dict, extra: dict) -> dict:
    out = dict(base)
    out.update(extra)
    return out


def serialize_catalog(cat: SpecializationCatalog) -> dict:
    def versioned(d):
        return {
            n: _with_extra({"used_as_default": e.used_as_default, "build_flag": e.build_flag,
                            "minimum_version": e.minimum_version}, e.extra)
            for n, e in d.items()
        }

    fft = {}
    for n, e in cat.fft_libraries.items():
        entry = {}
        if e.built_in is not None:
            entry["built-in"] = e.built_in
        entry["used_as_default"] = e.used_as_default
        if e.dependencies is not None:
            entry["dependencies"] = e.dependencies
        entry["build_flag"] = e.build_flag
        entry["condition"] = e.condition
        fft[n] = _with_extra(entry, e.extra)
    gb = cat.gpu_build or GpuBuild(False, None)
    bs = cat.build_system or BuildSystem("undetermined", "")
    ib = cat.internal_build or InternalBuild("", None)
    return {
        "gpu_build": _with_extra({"value": gb.value, "build_flag": gb.build_flag}, gb.extra),
        "gpu_backends": versioned(cat.gpu_backends),
        "parallel_programming_libraries": versioned(cat.parallel_programming_libraries),
        "linear_algebra_libraries": {
            n: _with_extra({"used_as_default": e.used_as_default, "build_flag": e.build_flag,
                            "condition": e.condition}, e.extra)
            for n, e in cat.linear_algebra_libraries.items()
        },
        "FFT_libraries": fft,
        "other_external_libraries": {
            n: _with_extra({"version": e.version, "used_as_default": e.used_as_default,
                            "conditions": e.conditions, "build_flag": e.build_flag}, e.extra)
            for n, e in cat.other_external_libraries.items()
        },
        "compiler_flags": list(cat.compiler_flags),
        "optimization_build_flags": list(cat.optimization_build_flags),
        "compilers": {n: dict(e) for n, e in cat.compilers.items()},
        "architectures": list(cat.architectures),
        "simd_vectorization": {
            n: _with_extra({"build_flag": e.build_flag, "default": e.default}, e.extra)
            for n, e in cat.simd_vectorization.items()
        },
        "build_system": _with_extra({"type": bs.type, "minimum_version": bs.minimum_version}, bs.extra),
        "internal_build": _with_extra({"library_name": ib.library_name, "build_flag": ib.build_flag}, ib.extra),
    }


def dumps_catalog(cat: SpecializationCatalog) -> str:
    return json.dumps(serialize_catalog(cat), indent=2, ensure_ascii=False) + "\n"


def load_catalog(path, **kw) -> SpecializationCatalog:
    with open(path, encoding="utf-8") as fh:
        return validate_catalog(fh.read(), **kw)


def iter_flags(cat: SpecializationCatalog):
    """Yield (category, name, flag) for every named option in the catalog."""
    if cat.gpu_build is not None:
        yield "gpu_build", "gpu_build", cat.gpu_build.build_flag
    for attr, category in (
        ("gpu_backends", "gpu_backends"),
        ("parallel_programming_libraries", "parallel_programming_libraries"),
        ("linear_algebra_libraries", "linear_algebra_libraries"),
        ("fft_libraries", "FFT_libraries"),
        ("other_external_libraries", "other_external_libraries"),
    ):
        for name, e in getattr(cat, attr).items():
            yield category, name, e.build_flag
    for name, e in cat.simd_vectorization.items():
        yield "simd_vectorization", name, e.build_flag
    for f in cat.compiler_flags:
        yield "compiler_flags", f, f
    for f in cat.optimization_build_flags:
        yield "optimization_build_flags", f, f
    for name in cat.compilers:
        yield "compilers", name, None
    for name in cat.architectures:
        yield "architectures", name, None
    if cat.build_system is not None:
        yield "build_system", cat.build_system.type, None
    if cat.internal_build is not None and cat.internal_build.library_name:
        yield "internal_build", cat.internal_build.library_name, cat.internal_build.build_flag


def to_json(value: Any) -> str:
    return json.dumps(value, indent=2, sort_keys=True, ensure_ascii=False) + "\n"
