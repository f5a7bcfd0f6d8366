"""Deployment: pick a configuration, plan lowering with deferred vectorization, check GPU compatibility."""

import json
import os
import re
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from typing import Optional

from .buildscan import restore_paths
from .errors import ConfigNotInRecipe, IncompatibleGpu, MissingLayer
from .forge import ARCH_SLOT, ContainerRecipe, Store, gpu_backend_of
from .matcher import VECTORIZATION, ResolvedConfig, lowering_flags, simd_entry
from .versions import compare_versions, parse_version

NATIVE, JIT, INCOMPATIBLE = "Native", "JitFromPtx", "Incompatible"

# options that only matter before IR exists; dropped when lowering stored IR
_FRONTEND_WITH_ARG = {"-D", "-U", "-I", "-isystem", "-iquote", "-idirafter", "-include", "-imacros",
                      "-iprefix", "-iwithprefix", "-x", "-MF", "-MT", "-MQ", "-Xpreprocessor"}
_FRONTEND_PREFIXES = ("-D", "-U", "-I", "-isystem", "-iquote", "-idirafter", "-include", "-imacros",
                      "-iprefix", "-iwithprefix", "-x", "-MF", "-MT", "-MQ", "-std=", "--std=")
_FRONTEND_EXACT = {"-c", "-MD", "-MMD", "-MP", "-M", "-MM", "-MG", "-nostdinc", "-nostdinc++"}


# ---------------------------------------------------------------------------
# GPU compatibility


def parse_capability(value):
    """``sm_80`` / ``compute_90`` / ``8.0`` / ``(8, 0)`` -> (major, minor)."""
    if value is None:
        return None
    if isinstance(value, (tuple, list)):
        return int(value[0]), int(value[1])
    text = str(value).strip().lower()
    m = re.fullmatch(r"(?:sm_|compute_|sm|cc)?(\d+)[._]?(\d)?", text)
    if m and "." not in text and m.group(2) is None:
        digits = m.group(1)
        return int(digits[:-1] or 0), int(digits[-1])
    if m:
        return int(m.group(1)), int(m.group(2) or 0)
    m = re.fullmatch(r"(\d+)\.(\d+)", text)
    if m:
        return int(m.group(1)), int(m.group(2))
    raise ValueError(f"not a compute capability: {value!r}")


def format_capability(cap) -> str:
    return f"sm_{cap[0]}{cap[1]}"


@dataclass
class GpuCompatInput:
    driver_version: str
    device_capability: tuple
    runtime_version: str
    ptx_version: Optional[str] = None
    ptx_capability: Optional[tuple] = None
    cubin_capabilities: list = field(default_factory=list)

    def __post_init__(self):
        self.device_capability = parse_capability(self.device_capability)
        self.ptx_capability = parse_capability(self.ptx_capability)
        self.cubin_capabilities = [parse_capability(c) for c in self.cubin_capabilities]


@dataclass(frozen=True)
class CompatVerdict:
    kind: str
    capability: Optional[tuple] = None
    reason: Optional[str] = None

    def to_dict(self) -> dict:
        d = {"kind": self.kind}
        if self.capability is not None:
            d["capability"] = format_capability(self.capability)
        if self.reason is not None:
            d["reason"] = self.reason
        return d


def Native(capability):
    return CompatVerdict(NATIVE, tuple(capability))


JitFromPtx = CompatVerdict(JIT)


def Incompatible(reason):
    return CompatVerdict(INCOMPATIBLE, reason=reason)


def gpu_compat(inp: GpuCompatInput) -> CompatVerdict:
    driver = parse_version(inp.driver_version)
    runtime = parse_version(inp.runtime_version)
    if driver[0] != runtime[0]:
        return Incompatible("major mismatch")
    if (runtime + (0,))[1] > (driver + (0,))[1]:
        return Incompatible("driver too old for runtime")
    if inp.device_capability in inp.cubin_capabilities:
        return Native(inp.device_capability)
    ptx_version = inp.ptx_version or inp.runtime_version
    if (inp.ptx_capability is not None and inp.ptx_capability <= inp.device_capability
            and compare_versions(ptx_version, inp.driver_version) <= 0):
        return JitFromPtx
    return Incompatible("no matching binary or loadable PTX")


# ---------------------------------------------------------------------------
# tags


def _encode(text: str, extra_unsafe: str) -> str:
    out = []
    for ch in text:
        if ("a" <= ch <= "z" or "0" <= ch <= "9" or ch in ".-") and ch not in extra_unsafe:
            out.append(ch)
        else:
            out.extend(f"%{b:02x}" for b in ch.encode("utf-8"))
    return "".join(out)


def _decode(text: str) -> str:
    raw = bytearray()
    i = 0
    while i < len(text):
        if text[i] == "%":
            raw.append(int(text[i + 1:i + 3], 16))
            i += 3
        else:
            raw.extend(text[i].encode())
            i += 1
    return raw.decode("utf-8")


def image_tag(resolved) -> str:
    """Tag for a resolved configuration: ``point-value`` segments joined by ``_``.

    Points keep the configuration's canonical order.  Anything outside
    ``[a-z0-9.-]`` is percent-encoded (lowercase hex), as is ``-`` inside a
    point name, so the tag parses back unambiguously.
    """
    assignments = resolved.assignments if isinstance(resolved, ResolvedConfig) else resolved
    if not assignments:
        return "generic"
    return "_".join(f"{_encode(str(p), '-')}-{_encode(str(v), '')}" for p, v in assignments.items())


def parse_tag(tag: str) -> ResolvedConfig:
    if tag == "generic":
        return ResolvedConfig()
    out = {}
    for segment in tag.split("_"):
        point, sep, value = segment.partition("-")
        if not sep:
            raise ValueError(f"tag segment {segment!r} has no point-value separator")
        out[_decode(point)] = _decode(value)
    return ResolvedConfig(out)


# ---------------------------------------------------------------------------
# planning


def lowering_base_flags(residual) -> list:
    out, skip = [], False
    for tok in residual:
        if skip:
            skip = False
            continue
        if tok in _FRONTEND_WITH_ARG:
            skip = True
            continue
        if tok in _FRONTEND_EXACT or tok.startswith(_FRONTEND_PREFIXES):
            continue
        out.append(tok)
    return out


@dataclass
class LowerStep:
    target: str
    artifact: str
    residual: list
    arch_flags: list
    opt_level: str
    output: str

    @property
    def flags(self) -> list:
        return lowering_base_flags(self.residual) + list(self.arch_flags)

    def to_dict(self) -> dict:
        return {"target": self.target, "artifact": self.artifact, "residual": list(self.residual),
                "arch_flags": list(self.arch_flags), "opt_level": self.opt_level, "output": self.output,
                "flags": self.flags}


@dataclass
class DeploymentPlan:
    config: str
    resolved: ResolvedConfig
    steps: list = field(default_factory=list)
    sd_compiles: list = field(default_factory=list)
    link_phase: dict = field(default_factory=dict)
    tag: str = "generic"
    verdict: Optional[CompatVerdict] = None
    layers: dict = field(default_factory=dict)
    notes: list = field(default_factory=list)

    def to_dict(self) -> dict:
        return {
            "config": self.config,
            "resolved": self.resolved.to_dict(),
            "tag": self.tag,
            "steps": [s.to_dict() for s in self.steps],
            "sd_compiles": list(self.sd_compiles),
            "link_phase": dict(self.link_phase),
            "verdict": self.verdict.to_dict() if self.verdict else None,
            "layers": dict(self.layers),
            "notes": list(self.notes),
        }

    def dumps(self) -> str:
        return json.dumps(self.to_dict(), indent=2, ensure_ascii=False) + "\n"


def _fold(text) -> str:
    return str(text).strip().lower().replace("-", "_")


def select_config(recipe: ContainerRecipe, resolved: ResolvedConfig) -> dict:
    """The recipe configuration whose every assignment agrees with ``resolved``.

    Resolved points that no recipe configuration assigns (library choices that
    were not build axes, deferred vectorization) do not affect the choice.
    """
    chosen = {_fold(p): _fold(v) for p, v in resolved.assignments.items()}
    axes = {_fold(p) for c in recipe.configs for p in c["assignments"]}
    best = None
    for cfg in recipe.configs:
        assigned = {_fold(p): _fold(v) for p, v in cfg["assignments"].items()}
        if any(chosen.get(p) != v for p, v in assigned.items()):
            continue
        if any(p in axes and p not in assigned and p != VECTORIZATION for p in chosen):
            continue
        if best is None or len(assigned) > len(best["assignments"]):
            best = cfg
    if best is None:
        raise ConfigNotInRecipe(
            f"no configuration in the recipe matches {dict(resolved.assignments)}; "
            f"available: {[c['name'] for c in recipe.configs]}")
    return best


def arch_flags_for(resolved: ResolvedConfig, profile, table=None) -> list:
    level = next((v for p, v in resolved.assignments.items() if _fold(p) == VECTORIZATION), None)
    if level is not None and simd_entry(level, table) is not None:
        flags = lowering_flags(level, table)
        if flags:
            return flags
    return list(profile)


def _compat_input(backend, host, spec):
    container = spec.get("container", spec)
    runtime = container.get("runtime_version") or spec.get("build_version")
    if host.version is None or host.device_capability is None or runtime is None:
        return None
    return GpuCompatInput(
        driver_version=host.version,
        device_capability=host.device_capability,
        runtime_version=runtime,
        ptx_version=container.get("ptx_version"),
        ptx_capability=container.get("ptx_capability"),
        cubin_capabilities=container.get("cubin_capabilities", []),
    )


def plan_deployment(recipe: ContainerRecipe, resolved: ResolvedConfig, features, opt_override=None,
                    out_root="/irforge/build", table=None) -> DeploymentPlan:
    cfg = select_config(recipe, resolved)
    manifest = recipe.manifests[cfg["name"]]
    plan = DeploymentPlan(cfg["name"], resolved, tag=image_tag(resolved))
    if opt_override:
        plan.notes.append(f"optimization level overridden to {opt_override} (manifest levels ignored)")

    for entry in manifest["entries"]:
        output = entry["output"].replace("«BUILD»", out_root.rstrip("/"))
        opt = opt_override or entry["opt_level"]
        residual = restore_paths(entry["residual"], manifest["build_root"]) if manifest.get("build_root") \
            else list(entry["residual"])
        if opt_override:
            residual = [opt_override if re.fullmatch(r"-O[0-3sgz]?|-Ofast", t) else t for t in residual]
        if entry["arch"] == ARCH_SLOT:
            arch = arch_flags_for(resolved, entry["arch_profile"], table)
        else:
            arch = list(entry["arch"])  # preprocessing depended on these: keep the target's own profile
        if entry["kind"] == "ir":
            plan.steps.append(LowerStep(entry["target"], entry["artifact"], residual, arch, opt, output))
        else:
            plan.sd_compiles.append({
                "target": entry["target"], "source": entry["source"], "language": entry["language"],
                "file": entry.get("file", ""), "directory": entry.get("directory", ""),
                "flags": residual + arch, "output": output,
            })
    plan.link_phase = {"delegate": "build-system", "command": list(manifest.get("link", {}).get("command", [])),
                       "build_root": out_root}

    backend = gpu_backend_of(cfg["assignments"]) or gpu_backend_of(resolved.assignments)
    if backend is not None:
        _, host = features.gpu_backend(backend)
        if host is None:
            raise IncompatibleGpu(f"target system has no {backend} backend")
        spec = next((v for k, v in recipe.deferred_layers.items() if k.lower() == backend.lower()), None)
        if spec is None:
            raise MissingLayer(f"recipe has no deferred layer for {backend}")
        compat = _compat_input(backend, host, spec)
        if compat is not None:
            plan.verdict = gpu_compat(compat)
            if plan.verdict.kind == INCOMPATIBLE:
                raise IncompatibleGpu(f"{backend}: {plan.verdict.reason}")
        else:
            plan.notes.append(f"{backend}: compatibility not checked (driver version or device capability unknown)")
        pinned = next((v for k, v in recipe.runtime_pins.items() if k.lower() == backend.lower()), "absent")
        if pinned != "absent":
            if pinned is None:
                raise MissingLayer(f"{backend} runtime is pinned by source use but its build version is unknown")
            version = pinned
            plan.notes.append(f"{backend} runtime pinned to build-time version {pinned} (runtime version macros used)")
        else:
            version = host.version
        template = spec.get("layer")
        if not template:
            raise MissingLayer(f"no layer reference for {backend}")
        if "{version}" in template and version is None:
            raise MissingLayer(f"{backend} layer needs a version and none is known")
        plan.layers[backend] = template.replace("{version}", str(version))
    return plan


def execute(plan: DeploymentPlan, store, driver, out_root=None, jobs=1) -> list:
    """Lower every step (and compile SD targets); returns written object paths."""
    store = store if isinstance(store, Store) else Store(store)

    def relocate(path):
        if out_root and plan.link_phase.get("build_root"):
            root = plan.link_phase["build_root"].rstrip("/")
            if path.startswith(root):
                return os.path.join(out_root, path[len(root):].lstrip("/"))
        return path

    def lower(step):
        return driver.lower(store.get(step.artifact), step.flags, relocate(step.output), label=step.target)

    def compile_sd(item):
        return driver.compile(item["flags"], item["file"], relocate(item["output"]), item["directory"] or None,
                              item["language"], item["target"])

    with ThreadPoolExecutor(max_workers=max(1, jobs)) as pool:
        outputs = list(pool.map(lower, plan.steps))
        outputs += list(pool.map(compile_sd, plan.sd_compiles))
    return outputs
