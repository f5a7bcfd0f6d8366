"""Distinct-IR detection across build configurations.

Two compilation targets get the same IR unit when their preprocessed text is
identical, their remaining code-generation flags agree once architecture
flags are set aside, and an OpenMP flag is the only difference on a file
without OpenMP constructs.  The result is a plan (shared core, per-config
deltas, system-dependent targets) and a counting report.
"""

import hashlib
import json
import logging
import re
from collections import OrderedDict
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from functools import lru_cache
from importlib import resources
from typing import NamedTuple, Optional

from .buildscan import BUILD, SEPARATE_ARG, restore_paths
from .errors import PreconditionViolated, UnknownTargetId

log = logging.getLogger(__name__)

SI, SD = "SI", "SD"


@lru_cache(maxsize=None)
def flag_tables() -> dict:
    return json.loads(resources.files("irforge").joinpath("data/flag_tables.json").read_text("utf-8"))


# ---------------------------------------------------------------------------
# flag classification


def _matches(tok, exact=(), prefixes=()):
    return tok in exact or any(tok.startswith(p) for p in prefixes)


def is_openmp_flag(tok: str) -> bool:
    t = flag_tables()["openmp"]
    return tok in t["flags"] or tok.startswith(tuple(t["prefixes"]))


def is_arch_flag(tok: str) -> bool:
    t = flag_tables()["arch"]
    if not tok.startswith("-m") and not tok.startswith(tuple(t["prefixes"])):
        return False
    if is_openmp_flag(tok):
        return False
    keep = t["keep"]
    if tok in keep or any(k.endswith("=") and tok.startswith(k) for k in keep):
        return False
    return True  # unknown -m* counts as architecture-specific


def _pairs(flags):
    """Group tokens with their separate argument: [(tok,), (opt, arg), ...]."""
    flags = list(flags)
    arch_arg = set(flag_tables()["arch"]["with_argument"])
    out, i = [], 0
    while i < len(flags):
        tok = flags[i]
        if (tok in SEPARATE_ARG or tok in arch_arg) and i + 1 < len(flags):
            out.append((tok, flags[i + 1]))
            i += 2
        else:
            out.append((tok,))
            i += 1
    return out


def strip_arch_flags(flags):
    """Split a FlagSet into (residual, arch_profile), both order-preserving."""
    arch_arg = set(flag_tables()["arch"]["with_argument"])
    residual, profile = [], []
    for group in _pairs(flags):
        tok = group[0]
        if tok.startswith("-D") or tok in ("-U", "-mllvm"):
            residual.extend(group)
        elif (len(group) == 2 and tok in arch_arg) or (len(group) == 1 and is_arch_flag(tok)):
            profile.extend(group)
        else:
            residual.extend(group)
    return tuple(residual), tuple(profile)


def codegen_flags(flags):
    """Flags whose effect is not already captured by the preprocessed text."""
    t = flag_tables()["preprocessor_only"]
    with_arg = set(t["with_argument"])
    out = []
    for group in _pairs(flags):
        tok = group[0]
        if tok in with_arg and len(group) == 2:
            continue
        if _matches(tok, t["exact"], t["prefixes"]):
            continue
        out.extend(group)
    return tuple(out)


def drop_openmp_flags(flags):
    return tuple(t for t in flags if not is_openmp_flag(t))


def optimization_level(flags) -> str:
    level = "-O0"
    for tok in flags:
        if re.fullmatch(r"-O[0-3sgz]?|-Ofast", tok):
            level = "-O2" if tok == "-O" else tok
    return level


# ---------------------------------------------------------------------------
# preprocessed text


_PRAGMA_OMP = re.compile(rb"^[ \t]*#[ \t]*pragma[ \t]+omp\b|_Pragma[ \t]*\([ \t]*\"[ \t]*omp\b", re.MULTILINE)
_LINE_MARKER = re.compile(rb'^(#[ \t]*(?:line[ \t]+)?\d+[ \t]+")([^"]*)(")', re.MULTILINE)


@lru_cache(maxsize=None)
def _api_pattern():
    prefixes = flag_tables()["openmp"]["api_prefixes"]
    alt = b"|".join(re.escape(p.encode()) for p in prefixes)
    return re.compile(rb"(?<![A-Za-z0-9_])(?:" + alt + rb")[A-Za-z0-9_]+")


def classify_openmp(preprocessed_text) -> bool:
    """True iff the text has an OpenMP pragma or names an OpenMP runtime API."""
    if isinstance(preprocessed_text, str):
        preprocessed_text = preprocessed_text.encode("utf-8")
    return bool(_PRAGMA_OMP.search(preprocessed_text) or _api_pattern().search(preprocessed_text))


_VECTOR_SIZE = re.compile(rb"__vector_size__\s*\(\s*(\d+)\s*\)|vector_size\s*\(\s*(\d+)\s*\)")


def has_wide_vector_types(preprocessed_text: bytes, baseline_bytes: int = 16) -> bool:
    """True when the text declares vector types wider than the baseline ISA register.

    Such values are passed differently depending on the enabled ISA (for
    example 256-bit vectors with and without AVX), so the frontend IR itself
    changes with architecture flags even when the preprocessed text does not.
    """
    for m in _VECTOR_SIZE.finditer(preprocessed_text):
        if int(m.group(1) or m.group(2)) > baseline_bytes:
            return True
    return False


_PSEUDO_MARKER = re.compile(rb'^#[ \t]*(?:line[ \t]+)?\d+[ \t]+"<(?:built-in|command line|command-line)>"[^\n]*\n',
                            re.MULTILINE)


def normalize_line_markers(text: bytes, build_root: str) -> bytes:
    """Rewrite build-root paths in line markers and drop pseudo-file markers.

    Markers for ``<built-in>``/``<command line>`` only count predefined and
    command-line macros, so their line numbers shift with flags such as
    ``-fopenmp`` without any change to the code.
    """
    text = _PSEUDO_MARKER.sub(b"", text)
    if not build_root:
        return text
    root = build_root.rstrip("/").encode()
    placeholder = BUILD.encode()

    def fix(m):
        path = m.group(2)
        if path == root or path.startswith(root + b"/"):
            path = placeholder + path[len(root):]
        return m.group(1) + path + m.group(3)

    return _LINE_MARKER.sub(fix, text)


_OMP_MODULE_FLAG = re.compile(rb'^!(\d+) = !\{i32 \d+, !"openmp", i32 \d+\}\n', re.MULTILINE)
_MD_DEF = re.compile(rb"^!(\d+) = ", re.MULTILINE)
_MD_REF = re.compile(rb"!(\d+)\b")


def normalize_ir(text: bytes) -> bytes:
    """Textual IR with the OpenMP module flag removed and metadata renumbered.

    An OpenMP-enabled frontend tags every module with that flag, constructs
    or not, so it alone must not split otherwise identical IR.
    """
    if text.startswith(b"BC\xc0\xde"):
        return text
    m = _OMP_MODULE_FLAG.search(text)
    if not m:
        return text
    node = b"!" + m.group(1)
    text = text[:m.start()] + text[m.end():]
    text = re.sub(rb"(?m)^(!llvm\.module\.flags = !\{)(.*)\}$",
                  lambda mm: mm.group(1) + b", ".join(x for x in mm.group(2).split(b", ") if x != node) + b"}",
                  text)
    numbers = sorted(int(x) for x in _MD_DEF.findall(text))
    remap = {old: new for new, old in enumerate(numbers)}
    return _MD_REF.sub(lambda mm: b"!%d" % remap.get(int(mm.group(1)), int(mm.group(1))), text)


def digest_bytes(data: bytes) -> str:
    return hashlib.sha256(data).hexdigest()


def normalize_openmp(flags_a, flags_b, preprocessed_text) -> bool:
    """Merge decision for two targets with equal preprocessed digests.

    Returns True (merge) when the flag sets differ only by OpenMP enable
    flags and the text has no OpenMP constructs.
    """
    rest_a, rest_b = drop_openmp_flags(flags_a), drop_openmp_flags(flags_b)
    if rest_a != rest_b:
        raise PreconditionViolated(
            f"flags differ beyond the OpenMP flag: {sorted(set(rest_a) ^ set(rest_b))}")
    if tuple(flags_a) == tuple(flags_b):
        return True
    return not classify_openmp(preprocessed_text)


# ---------------------------------------------------------------------------
# plan / report


class TUKey(NamedTuple):
    preprocessed_digest: str
    residual_flags: tuple
    language: str
    extra: tuple = ()

    @property
    def id(self) -> str:
        payload = json.dumps([self.preprocessed_digest, list(self.residual_flags), self.language,
                              list(self.extra)], separators=(",", ":"))
        return hashlib.sha256(payload.encode()).hexdigest()


@dataclass
class Unit:
    key: TUKey
    members: list = field(default_factory=list)  # [config, target-id-str]
    scope: str = "core"
    configs: list = field(default_factory=list)
    openmp_merged: bool = False
    arch_sensitive: bool = False
    emit: dict = field(default_factory=dict)  # directory, file, flags (real paths), lang
    ir_digest: str = ""
    merged_keys: list = field(default_factory=list)  # ids of keys folded in by IR comparison

    def to_dict(self) -> dict:
        return {
            "digest": self.key.preprocessed_digest,
            "flags": list(self.key.residual_flags),
            "language": self.key.language,
            "extra": list(self.key.extra),
            "scope": self.scope,
            "configs": list(self.configs),
            "members": [list(m) for m in self.members],
            "openmp_merged": self.openmp_merged,
            "arch_sensitive": self.arch_sensitive,
            "emit": dict(self.emit),
            "ir_digest": self.ir_digest,
            "merged_keys": list(self.merged_keys),
        }

    @classmethod
    def from_dict(cls, d) -> "Unit":
        key = TUKey(d["digest"], tuple(d["flags"]), d["language"], tuple(d.get("extra", ())))
        return cls(key, [tuple(m) for m in d["members"]], d["scope"], list(d["configs"]),
                   d.get("openmp_merged", False), d.get("arch_sensitive", False), dict(d.get("emit", {})),
                   d.get("ir_digest", ""), list(d.get("merged_keys", [])))


@dataclass
class TargetEntry:
    source: str
    output: str
    language: str
    partition: str  # SI or SD
    unit: Optional[str]
    residual: tuple
    arch_profile: tuple
    opt_level: str
    directory: str = ""
    file: str = ""
    flags: tuple = ()  # full canonical FlagSet
    arch_locked: bool = False  # preprocessing depends on the arch profile

    def to_dict(self) -> dict:
        d = dict(self.__dict__)
        for k in ("residual", "arch_profile", "flags"):
            d[k] = list(d[k])
        return d

    @classmethod
    def from_dict(cls, d) -> "TargetEntry":
        d = dict(d)
        for k in ("residual", "arch_profile", "flags"):
            d[k] = tuple(d.get(k, ()))
        return cls(**d)


@dataclass
class DedupPlan:
    configs: list = field(default_factory=list)  # [{name, assignments, build_root}]
    units: dict = field(default_factory=dict)  # unit id -> Unit
    core: list = field(default_factory=list)
    deltas: dict = field(default_factory=dict)  # config -> [unit id]
    sd_targets: dict = field(default_factory=dict)  # config -> [target id]
    targets: dict = field(default_factory=dict)  # config -> {target id: TargetEntry}

    def config(self, name):
        for c in self.configs:
            if c["name"] == name:
                return c
        return None

    def to_dict(self) -> dict:
        return {
            "configs": self.configs,
            "core": list(self.core),
            "deltas": {k: list(v) for k, v in self.deltas.items()},
            "sd_targets": {k: list(v) for k, v in self.sd_targets.items()},
            "units": {k: u.to_dict() for k, u in self.units.items()},
            "targets": {c: {t: e.to_dict() for t, e in ts.items()} for c, ts in self.targets.items()},
        }

    def dumps(self) -> str:
        return json.dumps(self.to_dict(), indent=2, ensure_ascii=False) + "\n"

    @classmethod
    def from_dict(cls, d) -> "DedupPlan":
        return cls(
            list(d["configs"]),
            {k: Unit.from_dict(u) for k, u in d["units"].items()},
            list(d["core"]),
            {k: list(v) for k, v in d["deltas"].items()},
            {k: list(v) for k, v in d["sd_targets"].items()},
            {c: OrderedDict((t, TargetEntry.from_dict(e)) for t, e in ts.items())
             for c, ts in d["targets"].items()},
        )

    @classmethod
    def load(cls, path) -> "DedupPlan":
        with open(path, encoding="utf-8") as fh:
            return cls.from_dict(json.load(fh))

    def coverage_problems(self) -> list:
        """Every (config, target) must sit in exactly one unit or the SD list."""
        seen = {}
        for uid, unit in self.units.items():
            for cfg, tid in unit.members:
                seen.setdefault((cfg, tid), []).append(uid)
        for cfg, tids in self.sd_targets.items():
            for tid in tids:
                seen.setdefault((cfg, tid), []).append("SD")
        problems = [f"{k} covered {len(v)} times" for k, v in seen.items() if len(v) != 1]
        for cfg, ts in self.targets.items():
            for tid in ts:
                if (cfg, tid) not in seen:
                    problems.append(f"{(cfg, tid)} not covered")
        return problems


@dataclass
class DedupReport:
    N: int
    T: dict
    sum_T: int
    T_prime: int
    reduction: float
    si_count: int
    sd_count: int
    ir_units: int = 0
    core_units: int = 0
    delta_units: int = 0
    key_units: int = 0
    notes: list = field(default_factory=list)

    def to_dict(self) -> dict:
        return {
            "N": self.N,
            "T_i": dict(self.T),
            "sum_T": self.sum_T,
            "T_prime": self.T_prime,
            "reduction": round(self.reduction, 4),
            "si_count": self.si_count,
            "sd_count": self.sd_count,
            "ir_units": self.ir_units,
            "core_units": self.core_units,
            "delta_units": self.delta_units,
            "key_units": self.key_units,
            "notes": list(self.notes),
        }

    def dumps(self) -> str:
        d = self.to_dict()
        text = json.dumps(d, indent=2)
        # fixed four decimals for the reduction ratio
        return text.replace(f'"reduction": {json.dumps(d["reduction"])}', f'"reduction": {d["reduction"]:.4f}') + "\n"


# ---------------------------------------------------------------------------
# partition


def _resolve_user_sd(configs, user_sd_list):
    known = {}
    for cfg in configs:
        for t in cfg.targets:
            for alias in (t.id_str, t.source, t.file):
                if alias:
                    known.setdefault(alias, set()).add(t.id)
    ids = set()
    for item in user_sd_list or ():
        if item not in known:
            raise UnknownTargetId(f"{item!r} names no target in any configuration")
        ids |= known[item]
    return ids


def partition_targets(configs, user_sd_list=(), driver=None):
    """Split (config, target-id) pairs into system-independent and system-dependent sets."""
    user_ids = _resolve_user_sd(configs, user_sd_list)
    si, sd = set(), set()
    for cfg in configs:
        for t in cfg.targets:
            dependent = (
                t.id in user_ids
                or t.language == "other"
                or (driver is not None and not driver.can_emit(t.language))
            )
            (sd if dependent else si).add((cfg.name, t.id_str))
    return si, sd


# ---------------------------------------------------------------------------
# the pipeline


@dataclass
class _Analysis:
    config: str
    target: object
    digest: str
    residual: tuple
    profile: tuple
    key: TUKey
    openmp_merged: bool
    arch_sensitive: bool


def _analyze(cfg, target, driver):
    root = cfg.build_root
    flags = restore_paths(target.flags, root) if root else list(target.flags)
    label = f"{cfg.name}:{target.id_str}"
    text = driver.preprocess(flags, target.file, target.directory, target.language, label)
    text = normalize_line_markers(text, root)
    digest = digest_bytes(text)

    residual, profile = strip_arch_flags(target.flags)
    arch_sensitive = False
    if profile:
        plain = restore_paths(residual, root) if root else list(residual)
        text2 = normalize_line_markers(
            driver.preprocess(plain, target.file, target.directory, target.language, label), root)
        arch_sensitive = digest_bytes(text2) != digest or has_wide_vector_types(text)
    key_flags = codegen_flags(residual + profile if arch_sensitive else residual)

    has_omp_flag = any(is_openmp_flag(t) for t in key_flags)
    openmp_merged = has_omp_flag and not classify_openmp(text)
    if openmp_merged:
        key_flags = drop_openmp_flags(key_flags)
    extra = ()
    if target.language == "cuda":
        extra = ("gpu=" + str(cfg.assignments.get("gpu", "")),)
    key = TUKey(digest, key_flags, target.language, extra)
    return _Analysis(cfg.name, target, digest, residual, profile, key, openmp_merged, arch_sensitive)


def _pool_map(fn, items, jobs):
    with ThreadPoolExecutor(max_workers=max(1, jobs)) as pool:
        futures = [pool.submit(fn, *item) for item in items]
        try:
            return [f.result() for f in futures]
        except BaseException:
            for f in futures:
                f.cancel()
            raise


def _emit_digest(unit, driver):
    e = unit.emit
    text = driver.emit_ir_text(e["flags"], e["file"], e["directory"], e["lang"], f"{e['config']}:{e['file']}")
    return digest_bytes(normalize_ir(text))


def _refine(by_key, driver, jobs):
    """Merge key groups whose emitted IR is identical.

    The key is conservative: frontend output can be identical even when
    the residual flags differ (say -O1 vs -O2 on code the frontend does not
    annotate differently).  One emission per key settles it.
    """
    units = list(by_key.values())
    digests = _pool_map(_emit_digest, [(u, driver) for u in units], jobs)
    merged = OrderedDict()
    for uid, unit, ird in zip(by_key, units, digests):
        unit.ir_digest = ird
        group = (unit.key.language, unit.key.extra, ird)
        head = merged.get(group)
        if head is None:
            merged[group] = (uid, unit)
            continue
        _, first = head
        first.merged_keys.append(uid)
        first.members.extend(unit.members)
        first.configs.extend(c for c in unit.configs if c not in first.configs)
        omp_a = any(is_openmp_flag(t) for t in first.key.residual_flags)
        omp_b = any(is_openmp_flag(t) for t in unit.key.residual_flags)
        first.openmp_merged = first.openmp_merged or unit.openmp_merged or omp_a != omp_b
        first.arch_sensitive = first.arch_sensitive or unit.arch_sensitive
        if any(is_openmp_flag(t) for t in first.emit["flags"]) and \
                not any(is_openmp_flag(t) for t in unit.emit["flags"]):
            first.emit = unit.emit
    return OrderedDict(merged.values())


def dedup(configs, driver, user_sd_list=(), jobs=1, refine=True):
    """Run the distinct-IR pipeline; returns (DedupPlan, DedupReport).

    With ``refine`` each key group is emitted once and groups with
    identical IR are merged.
    """
    if not configs:
        raise PreconditionViolated("at least one configuration is required")
    names = [c.name for c in configs]
    if len(set(names)) != len(names):
        raise PreconditionViolated("configuration names must be unique")
    si, sd = partition_targets(configs, user_sd_list, driver)

    work = [(cfg, t, driver) for cfg in configs for t in cfg.targets if (cfg.name, t.id_str) in si]
    results = _pool_map(_analyze, work, jobs)

    plan = DedupPlan()
    plan.configs = [{"name": c.name, "assignments": dict(c.assignments), "build_root": c.build_root}
                    for c in configs]
    roots = {c.name: c.build_root for c in configs}
    by_key = OrderedDict()
    for a in results:
        uid = a.key.id
        unit = by_key.get(uid)
        if unit is None:
            unit = by_key[uid] = Unit(a.key, arch_sensitive=a.arch_sensitive)
        unit.members.append((a.config, a.target.id_str))
        unit.openmp_merged = unit.openmp_merged or a.openmp_merged
        if a.config not in unit.configs:
            unit.configs.append(a.config)
        # emit from a member that carries no OpenMP flag when the flag was merged away
        rep_has_omp = any(is_openmp_flag(t) for t in unit.emit.get("flags", ()))
        if not unit.emit or (rep_has_omp and not any(is_openmp_flag(t) for t in a.residual)):
            emit_flags = a.residual + a.profile if a.arch_sensitive else a.residual
            if a.openmp_merged:
                emit_flags = drop_openmp_flags(emit_flags)
            root = roots[a.config]
            unit.emit = {
                "config": a.config,
                "directory": a.target.directory,
                "file": a.target.file,
                "flags": restore_paths(emit_flags, root) if root else list(emit_flags),
                "lang": a.target.language,
            }

    key_units = len(by_key)
    if refine and driver.has("emit_ir"):
        by_key = _refine(by_key, driver, jobs)

    configs_with = {}
    for cfg in configs:
        for t in cfg.targets:
            configs_with.setdefault(t.id_str, set()).add(cfg.name)
    for uid, unit in by_key.items():
        containing = set().union(*(configs_with[tid] for _, tid in unit.members))
        unit.scope = "core" if set(unit.configs) == containing else "delta"
        plan.units[uid] = unit
        if unit.scope == "core":
            plan.core.append(uid)
        else:
            for c in unit.configs:
                plan.deltas.setdefault(c, []).append(uid)

    unit_of = {m: uid for uid, u in plan.units.items() for m in u.members}
    analysis = {(a.config, a.target.id_str): a for a in results}
    for cfg in configs:
        entries = plan.targets[cfg.name] = OrderedDict()
        for t in cfg.targets:
            a = analysis.get((cfg.name, t.id_str))
            if a is None:
                plan.sd_targets.setdefault(cfg.name, []).append(t.id_str)
                residual, profile = strip_arch_flags(t.flags)
            else:
                residual, profile = a.residual, a.profile
            entries[t.id_str] = TargetEntry(
                t.source, t.output, t.language, SI if a else SD, unit_of[(cfg.name, t.id_str)] if a else None,
                residual, profile, optimization_level(t.flags), t.directory, t.file, tuple(t.flags),
                bool(a and a.arch_sensitive))
        plan.deltas.setdefault(cfg.name, [])
        plan.sd_targets.setdefault(cfg.name, [])

    problems = plan.coverage_problems()
    if problems:
        raise AssertionError(f"plan coverage broken: {problems[:5]}")
    return plan, make_report(configs, plan, key_units)


def make_report(configs, plan, key_units=None) -> DedupReport:
    T = OrderedDict((c.name, c.T) for c in configs)
    sum_T = sum(T.values())
    sd_count = sum(len(v) for v in plan.sd_targets.values())
    si_count = sum_T - sd_count
    # system-dependent targets are compiled per configuration, so each counts once
    T_prime = len(plan.units) + sd_count
    reduction = 1.0 - T_prime / sum_T if sum_T else 0.0
    notes = []
    merged = sum(1 for u in plan.units.values() if u.openmp_merged and len(u.members) > 1)
    if merged:
        notes.append(f"{merged} unit(s) merged across OpenMP settings (no OpenMP constructs)")
    if key_units is not None and key_units != len(plan.units):
        notes.append(f"{key_units - len(plan.units)} key group(s) folded after comparing emitted IR")
    sensitive = sum(1 for u in plan.units.values() if u.arch_sensitive)
    if sensitive:
        notes.append(f"{sensitive} unit(s) keep architecture flags: preprocessing depends on them")
    if plan.units:
        # rewriting it would also change the object file, so it is reported rather than suppressed
        notes.append("emitted IR records each source's absolute path; artifact ids are reproducible "
                     "only with the source tree at the same location")
    return DedupReport(
        N=len(configs), T=T, sum_T=sum_T, T_prime=T_prime, reduction=reduction,
        si_count=si_count, sd_count=sd_count, ir_units=len(plan.units),
        core_units=len(plan.core), delta_units=len(plan.units) - len(plan.core),
        key_units=len(plan.units) if key_units is None else key_units, notes=notes,
    )


def load_sd_list(path) -> list:
    with open(path, encoding="utf-8") as fh:
        text = fh.read()
    try:
        data = json.loads(text)
        if isinstance(data, list):
            return [str(x) for x in data]
    except json.JSONDecodeError:
        pass
    return [line.strip() for line in text.splitlines() if line.strip() and not line.startswith("#")]
