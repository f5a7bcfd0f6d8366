"""IR emission into a content-addressed store, install manifests and container recipes."""

import hashlib
import json
import os
import re
import tempfile
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field

from .buildscan import BUILD
from .dedup import DedupPlan
from .errors import EmptyConfig, EmptyPlan, MissingArtifact, MissingLayer, PreconditionViolated, StoreCorruption

ARCH_SLOT = "«ARCH»"
MANIFEST_FORMAT = "irforge-install-manifest/1"
RECIPE_FORMAT = "irforge-container-recipe/1"
NO_GPU_VALUES = {"", "none", "off", "no", "false", "cpu"}

# identifiers whose use ties compiled code to a specific CUDA runtime version
RUNTIME_VERSION_MACROS = {"cuda": ("CUDA_VERSION", "CUDART_VERSION", "__CUDACC_VER_MAJOR__")}


def digest_bytes(data: bytes) -> str:
    return hashlib.sha256(data).hexdigest()


def _write_atomic(path, data: bytes):
    os.makedirs(os.path.dirname(path), exist_ok=True)
    fd, tmp = tempfile.mkstemp(dir=os.path.dirname(path), prefix=".tmp-")
    try:
        with os.fdopen(fd, "wb") as fh:
            fh.write(data)
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise


class Store:
    """``<root>/<id[:2]>/<id>.ir`` plus ``<root>/index.json`` (unit key -> artifact id)."""

    def __init__(self, root):
        self.root = os.path.abspath(root)
        os.makedirs(self.root, exist_ok=True)
        self.index_path = os.path.join(self.root, "index.json")
        self.index = {}
        if os.path.exists(self.index_path):
            with open(self.index_path, encoding="utf-8") as fh:
                self.index = json.load(fh).get("units", {})

    def path_for(self, artifact_id: str) -> str:
        return os.path.join(self.root, artifact_id[:2], artifact_id + ".ir")

    def has(self, artifact_id: str) -> bool:
        return os.path.exists(self.path_for(artifact_id))

    def put(self, data: bytes) -> str:
        artifact_id = digest_bytes(data)
        path = self.path_for(artifact_id)
        if os.path.exists(path):
            self.verify(artifact_id)
        else:
            _write_atomic(path, data)
        return artifact_id

    def get(self, artifact_id: str) -> bytes:
        path = self.path_for(artifact_id)
        if not os.path.exists(path):
            raise MissingArtifact(f"artifact {artifact_id} is not in store {self.root}")
        with open(path, "rb") as fh:
            data = fh.read()
        if digest_bytes(data) != artifact_id:
            raise StoreCorruption(f"stored bytes of {artifact_id} do not match their id")
        return data

    def verify(self, artifact_id: str):
        self.get(artifact_id)

    def save_index(self):
        text = json.dumps({"units": dict(sorted(self.index.items()))}, indent=2, sort_keys=True) + "\n"
        current = None
        if os.path.exists(self.index_path):
            with open(self.index_path, encoding="utf-8") as fh:
                current = fh.read()
        if current != text:
            _write_atomic(self.index_path, text.encode("utf-8"))


@dataclass
class IRArtifact:
    id: str
    unit: str  # TUKey id
    path: str
    emission_flags: list = field(default_factory=list)
    cached: bool = False

    def to_dict(self) -> dict:
        return {"id": self.id, "unit": self.unit, "path": self.path, "emission_flags": list(self.emission_flags)}


@dataclass
class EmitStats:
    emitted: int = 0
    cache_hits: int = 0


def emit_ir_set(plan: DedupPlan, driver, store, jobs=1):
    """Emit one IR artifact per unit of the plan; returns (artifacts, stats)."""
    if not driver.has("emit_ir"):
        raise PreconditionViolated(f"driver {driver.name} cannot emit IR")
    store = store if isinstance(store, Store) else Store(store)
    unit_ids = list(plan.core) + [u for c in plan.configs for u in plan.deltas.get(c["name"], [])]
    unit_ids = list(dict.fromkeys(unit_ids))

    todo, artifacts = [], {}
    for uid in unit_ids:
        known = store.index.get(uid)
        if known and store.has(known):
            store.verify(known)
            emit = plan.units[uid].emit
            artifacts[uid] = IRArtifact(known, uid, store.path_for(known), list(emit["flags"]), cached=True)
        else:
            todo.append(uid)

    def emit_one(uid):
        emit = plan.units[uid].emit
        data = driver.emit_ir(emit["flags"], emit["file"], emit["directory"], emit["lang"],
                              f"{emit['config']}:{emit['file']}")
        artifact_id = store.put(data)
        return IRArtifact(artifact_id, uid, store.path_for(artifact_id), list(emit["flags"]))

    with ThreadPoolExecutor(max_workers=max(1, jobs)) as pool:
        futures = [pool.submit(emit_one, uid) for uid in todo]
        try:
            for f in futures:
                art = f.result()
                artifacts[art.unit] = art
        except BaseException:
            for f in futures:
                f.cancel()
            raise
    for uid, art in artifacts.items():
        store.index[uid] = art.id
    store.save_index()
    ordered = [artifacts[u] for u in unit_ids]
    return ordered, EmitStats(emitted=len(todo), cache_hits=len(unit_ids) - len(todo))


# ---------------------------------------------------------------------------
# manifests


def render_install_manifest(config_name: str, plan: DedupPlan, artifacts, link_command=None) -> dict:
    """Per-configuration install manifest (as a dict; see ``dumps_manifest``).

    ``artifacts`` maps unit id to artifact id (or IRArtifact).
    """
    cfg = plan.config(config_name)
    if cfg is None:
        raise PreconditionViolated(f"configuration {config_name!r} is not in the plan")
    targets = plan.targets.get(config_name, {})
    if not targets:
        raise EmptyConfig(f"configuration {config_name!r} has no targets")
    entries = []
    for tid, t in targets.items():
        entry = {"target": tid, "output": t.output, "opt_level": t.opt_level}
        if t.partition == "SI":
            art = artifacts.get(t.unit)
            if art is None:
                raise MissingArtifact(f"no IR artifact for {tid} in {config_name}")
            entry.update({
                "kind": "ir",
                "artifact": getattr(art, "id", art),
                "residual": list(t.residual),
                "arch": list(t.arch_profile) if t.arch_locked else ARCH_SLOT,
                "arch_profile": list(t.arch_profile),
            })
        else:
            entry.update({
                "kind": "source",
                "source": t.source,
                "language": t.language,
                "flags": list(t.flags),
                "residual": list(t.residual),
                "arch": ARCH_SLOT,
                "arch_profile": list(t.arch_profile),
                "file": t.file,
                "directory": t.directory,
            })
        entries.append(entry)
    return {
        "format": MANIFEST_FORMAT,
        "config": config_name,
        "assignments": dict(cfg["assignments"]),
        "build_root": cfg["build_root"],
        "entries": entries,
        "link": {"delegate": "build-system", "command": list(link_command or [])},
    }


def dumps_manifest(manifest: dict) -> str:
    return json.dumps(manifest, indent=2, ensure_ascii=False) + "\n"


# ---------------------------------------------------------------------------
# container recipe


def gpu_backend_of(assignments: dict):
    for point, value in assignments.items():
        if point.lower() == "gpu" and str(value).lower() not in NO_GPU_VALUES:
            return str(value)
    return None


def scan_runtime_version_use(files, backend="cuda") -> list:
    """Source files that reference a runtime-version macro (pessimistic API check)."""
    names = RUNTIME_VERSION_MACROS.get(backend.lower(), ())
    if not names:
        return []
    pattern = re.compile(r"\b(?:" + "|".join(map(re.escape, names)) + r")\b")
    hits = []
    for path in files:
        try:
            with open(path, encoding="utf-8", errors="replace") as fh:
                if pattern.search(fh.read()):
                    hits.append(path)
        except OSError:
            continue
    return sorted(set(hits))


@dataclass
class ContainerRecipe:
    toolchain_layer: str
    base_layers: list = field(default_factory=list)
    store_path: str = "/irforge/store"
    source_ref: str = "/irforge/source"
    manifests: dict = field(default_factory=dict)  # config -> manifest dict
    configs: list = field(default_factory=list)  # [{name, assignments}]
    annotations: dict = field(default_factory=dict)
    deferred_layers: dict = field(default_factory=dict)  # backend -> layer spec from bases
    runtime_pins: dict = field(default_factory=dict)  # backend -> build-time version

    def to_dict(self) -> dict:
        return {
            "format": RECIPE_FORMAT,
            "toolchain_layer": self.toolchain_layer,
            "base_layers": list(self.base_layers),
            "store_path": self.store_path,
            "source_ref": self.source_ref,
            "configs": self.configs,
            "annotations": self.annotations,
            "deferred_layers": self.deferred_layers,
            "runtime_pins": self.runtime_pins,
            "manifests": self.manifests,
        }

    def dumps(self) -> str:
        return json.dumps(self.to_dict(), indent=2, ensure_ascii=False) + "\n"

    @classmethod
    def from_dict(cls, d) -> "ContainerRecipe":
        return cls(d["toolchain_layer"], list(d.get("base_layers", [])), d.get("store_path", "/irforge/store"),
                   d.get("source_ref", "/irforge/source"), dict(d.get("manifests", {})),
                   list(d.get("configs", [])), dict(d.get("annotations", {})),
                   dict(d.get("deferred_layers", {})), dict(d.get("runtime_pins", {})))

    @classmethod
    def load(cls, path) -> "ContainerRecipe":
        with open(path, encoding="utf-8") as fh:
            return cls.from_dict(json.load(fh))


def _label(key, value) -> str:
    return f"LABEL {key}={json.dumps(value if isinstance(value, str) else json.dumps(value, sort_keys=True, separators=(',', ':')))}"


def render_container_recipe(plan: DedupPlan, manifests: dict, bases: dict, catalog_subset=None,
                            source_dir="source", store_dir="store"):
    """Returns (ContainerRecipe, build-file text).

    ``bases``: {"toolchain": ref, "base": [refs], "gpu": {backend: {"layer": "img:{version}",
    "build_version": ..., ...}}}.  GPU runtime layers stay symbolic.
    """
    if not plan.configs or not (plan.units or any(plan.sd_targets.values())):
        raise EmptyPlan("the plan has no configurations or targets")
    toolchain = bases.get("toolchain")
    if not toolchain:
        raise MissingLayer("bases must name a toolchain layer")
    names = [c["name"] for c in plan.configs]
    missing = [n for n in names if n not in manifests]
    if missing:
        raise MissingArtifact(f"no manifest for configuration(s) {missing}")

    deferred, pins = {}, {}
    gpu_bases = bases.get("gpu", {}) or {}
    for cfg in plan.configs:
        backend = gpu_backend_of(cfg["assignments"])
        if backend is None or backend in deferred:
            continue
        spec = next((v for k, v in gpu_bases.items() if k.lower() == backend.lower()), None)
        deferred[backend] = dict(spec) if spec else {}
        files = sorted({t.file for t in plan.targets.get(cfg["name"], {}).values() if t.file})
        if scan_runtime_version_use(files, backend):
            build_version = (spec or {}).get("build_version")
            pins[backend] = build_version
    annotations = {
        "org.irforge.configs": names,
        "org.irforge.points": {c["name"]: c["assignments"] for c in plan.configs},
        "org.irforge.deferred-layers": sorted(deferred),
    }
    if catalog_subset is not None:
        annotations["org.irforge.specialization"] = catalog_subset
    recipe = ContainerRecipe(
        toolchain_layer=toolchain,
        base_layers=list(bases.get("base", []) or []),
        manifests={n: manifests[n] for n in names},
        configs=[{"name": c["name"], "assignments": dict(c["assignments"])} for c in plan.configs],
        annotations=annotations,
        deferred_layers=deferred,
        runtime_pins=pins,
    )
    return recipe, recipe_text(recipe, source_dir, store_dir)


def recipe_text(recipe: ContainerRecipe, source_dir="source", store_dir="store") -> str:
    lines = ["# irforge IR container: toolchain, IR store, sources and install manifests",
             f"FROM {recipe.toolchain_layer}"]
    for key, value in recipe.annotations.items():
        lines.append(_label(key, value))
    for ref in recipe.base_layers:
        lines.append(f"COPY --from={ref} / /")
    lines.append(f"COPY {store_dir}/ {recipe.store_path}/")
    lines.append(f"COPY {source_dir}/ {recipe.source_ref}/")
    for cfg in recipe.configs:
        lines.append(f"COPY manifests/{cfg['name']}.json /irforge/manifests/{cfg['name']}.json")
    for backend, spec in sorted(recipe.deferred_layers.items()):
        layer = spec.get("layer", f"<{backend} runtime>")
        lines.append(f"# deferred layer {backend}: {layer} (bound at deployment)")
    lines.append('ENV IRFORGE_STORE=' + recipe.store_path)
    return "\n".join(lines) + "\n"


def placeholder_free(path: str, root: str) -> str:
    return path.replace(BUILD, root.rstrip("/"))
