"""Compile-command database ingestion and flag canonicalization."""

import json
import os
import shlex
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from typing import Optional

from .errors import AmbiguousEntry, DuplicateTarget, Malformed

BUILD = "«BUILD»"
RESPONSE_FILE_DEPTH = 4

LANGUAGE_BY_EXT = {
    ".c": "c",
    ".cc": "c++", ".cpp": "c++", ".cxx": "c++", ".c++": "c++", ".C": "c++", ".cp": "c++",
    ".cu": "cuda",
}
LANGUAGE_BY_X = {
    "c": "c", "c++": "c++", "cuda": "cuda",
    "c-header": "other", "c++-header": "other",
    "assembler": "other", "assembler-with-cpp": "other",
}
SOURCE_EXTS = set(LANGUAGE_BY_EXT) | {".s", ".S", ".asm", ".f", ".f90", ".F90", ".F", ".m", ".mm"}

# options whose argument is the next token
SEPARATE_ARG = {
    "-o", "-I", "-isystem", "-iquote", "-idirafter", "-include", "-imacros", "-x",
    "-MF", "-MT", "-MQ", "-D", "-U", "-Xclang", "-Xpreprocessor", "-Xlinker", "-Xassembler",
    "-target", "-arch", "-isysroot", "--sysroot", "-L", "-l", "-iprefix", "-iwithprefix",
    "-ccbin", "-gencode", "--generate-code", "-Xcompiler", "-mllvm",
}
PATH_PREFIXES = (
    "-I", "-isystem", "-iquote", "-idirafter", "-include", "-imacros", "-L", "-MF", "-MT", "-MQ",
    "-o", "--sysroot=", "-isysroot", "-fprofile-dir=", "-fprofile-use=", "-fprofile-generate=",
)


@dataclass
class CompileCommand:
    directory: str
    file: str
    arguments: list
    output: Optional[str] = None


@dataclass
class CompilationTarget:
    source: str  # canonical (build root replaced)
    output: str
    flags: tuple  # FlagSet: canonical tokens, driver/source/output removed
    language: str
    directory: str = ""  # real paths, for re-running the toolchain
    file: str = ""
    arguments: tuple = ()

    @property
    def id(self) -> tuple:
        return (self.source, self.output)

    @property
    def id_str(self) -> str:
        return target_id_str(self.id)

    def to_dict(self) -> dict:
        return {
            "source": self.source,
            "output": self.output,
            "flags": list(self.flags),
            "language": self.language,
            "directory": self.directory,
            "file": self.file,
            "arguments": list(self.arguments),
        }

    @classmethod
    def from_dict(cls, d: dict) -> "CompilationTarget":
        return cls(d["source"], d["output"], tuple(d["flags"]), d["language"],
                   d.get("directory", ""), d.get("file", ""), tuple(d.get("arguments", ())))


def target_id_str(target_id) -> str:
    return f"{target_id[0]} -> {target_id[1]}"


@dataclass
class BuildConfiguration:
    name: str
    assignments: dict = field(default_factory=dict)
    targets: list = field(default_factory=list)
    build_root: str = ""

    @property
    def T(self) -> int:
        return len(self.targets)

    def to_dict(self) -> dict:
        return {
            "name": self.name,
            "assignments": dict(self.assignments),
            "build_root": self.build_root,
            "T": self.T,
            "targets": [t.to_dict() for t in self.targets],
        }

    @classmethod
    def from_dict(cls, d: dict) -> "BuildConfiguration":
        return cls(d["name"], dict(d.get("assignments", {})),
                   [CompilationTarget.from_dict(t) for t in d.get("targets", [])],
                   d.get("build_root", ""))


# ---------------------------------------------------------------------------
# loading


def expand_response_files(args, directory, depth=0):
    out = []
    for arg in args:
        if arg.startswith("@") and len(arg) > 1:
            if depth >= RESPONSE_FILE_DEPTH:
                raise Malformed("?", f"response files nested deeper than {RESPONSE_FILE_DEPTH}")
            path = os.path.join(directory, arg[1:])
            try:
                with open(path, encoding="utf-8") as fh:
                    inner = shlex.split(fh.read())
            except OSError:
                out.append(arg)  # the compiler treats unreadable @x as a literal
                continue
            out.extend(expand_response_files(inner, directory, depth + 1))
        else:
            out.append(arg)
    return out


def parse_entry(i: int, entry) -> CompileCommand:
    if not isinstance(entry, dict):
        raise Malformed(i, "entry is not an object")
    for key in ("directory", "file"):
        if key not in entry:
            raise Malformed(i, f"{key} absent")
        if not isinstance(entry[key], str):
            raise Malformed(i, f"{key} is not a string")
    has_cmd, has_args = "command" in entry, "arguments" in entry
    if not has_cmd and not has_args:
        raise Malformed(i, "command and arguments both absent")
    directory = entry["directory"]
    if has_args:
        args = entry["arguments"]
        if not isinstance(args, list) or not all(isinstance(a, str) for a in args):
            raise Malformed(i, "arguments is not a list of strings")
    if has_cmd:
        if not isinstance(entry["command"], str):
            raise Malformed(i, "command is not a string")
        try:
            split = shlex.split(entry["command"])
        except ValueError as exc:
            raise Malformed(i, f"cannot split command: {exc}") from exc
        if has_args and split != args:
            raise AmbiguousEntry(i, "command and arguments disagree")
        args = split
    if not args:
        raise Malformed(i, "empty argument list")
    try:
        args = expand_response_files(list(args), directory)
    except Malformed as exc:
        raise Malformed(i, exc.reason) from None
    file = entry["file"]
    if not os.path.isabs(file):
        file = os.path.normpath(os.path.join(directory, file))
    output = entry.get("output")
    if output is not None and not os.path.isabs(output):
        output = os.path.normpath(os.path.join(directory, output))
    return CompileCommand(directory, file, args, output)


def load_compile_db(path) -> list:
    try:
        with open(path, encoding="utf-8") as fh:
            data = json.load(fh)
    except json.JSONDecodeError as exc:
        raise Malformed("-", f"not valid JSON: {exc}") from exc
    if not isinstance(data, list):
        raise Malformed("-", "top level is not an array")
    return [parse_entry(i, e) for i, e in enumerate(data)]


# ---------------------------------------------------------------------------
# canonicalization


def _under(path: str, root: str) -> bool:
    return path == root or path.startswith(root.rstrip("/") + "/")


def rewrite_path(token: str, build_root: str) -> str:
    """Replace a leading build root (bare or after a known option prefix)."""
    if not build_root:
        return token
    root = build_root.rstrip("/") or "/"
    if _under(token, root):
        return BUILD + token[len(root):]
    for prefix in PATH_PREFIXES:
        if token.startswith(prefix) and _under(token[len(prefix):], root):
            return prefix + BUILD + token[len(prefix) + len(root):]
    if token.startswith("-") and "=" in token:
        opt, _, value = token.partition("=")
        if _under(value, root):
            return f"{opt}={BUILD}{value[len(root):]}"
    return token


def restore_paths(tokens, build_root: str) -> list:
    root = build_root.rstrip("/") or "/"
    return [t.replace(BUILD, root) for t in tokens]


def _is_source_token(tok, source, directory):
    if source is not None:
        cand = tok if os.path.isabs(tok) or not directory else os.path.normpath(os.path.join(directory, tok))
        if tok == source or cand == source:
            return True
        return False
    return os.path.splitext(tok)[1] in SOURCE_EXTS


def split_command(args, source=None, directory=None):
    """Return (flags, source_token, output_token) with the driver dropped."""
    flags, src, out = [], None, None
    i = 1
    while i < len(args):
        tok = args[i]
        if tok == "-o" and i + 1 < len(args):
            out = args[i + 1]
            i += 2
            continue
        if tok.startswith("-o") and len(tok) > 2 and not tok.startswith(("-obj", "-openmp")):
            out = tok[2:]
            i += 1
            continue
        if tok in SEPARATE_ARG and i + 1 < len(args):
            flags.extend((tok, args[i + 1]))
            i += 2
            continue
        if not tok.startswith("-") and src is None and _is_source_token(tok, source, directory):
            src = tok
            i += 1
            continue
        flags.append(tok)
        i += 1
    return flags, src, out


def canonicalize_flags(args, build_root: str, source=None, directory=None) -> tuple:
    """FlagSet for a command line: driver, source and output removed, build root replaced."""
    flags, _, _ = split_command(list(args), source, directory)
    return tuple(rewrite_path(t, build_root) for t in flags)


def classify_language(file: str, flags) -> str:
    lang = None
    flags = list(flags)
    for i, tok in enumerate(flags):
        if tok == "-x" and i + 1 < len(flags):
            lang = LANGUAGE_BY_X.get(flags[i + 1], "other")
        elif tok.startswith("-x") and len(tok) > 2:
            lang = LANGUAGE_BY_X.get(tok[2:], "other")
    if lang is not None:
        return lang
    return LANGUAGE_BY_EXT.get(os.path.splitext(file)[1], "other")


def _default_output(cmd: CompileCommand) -> str:
    stem = os.path.splitext(os.path.basename(cmd.file))[0]
    return os.path.join(cmd.directory, stem + ".o")


def extract_targets(db, build_root: str) -> list:
    seen = {}
    for cmd in db:
        flags, _, out = split_command(cmd.arguments, cmd.file, cmd.directory)
        if out is not None:
            output = out if os.path.isabs(out) else os.path.normpath(os.path.join(cmd.directory, out))
        else:
            output = cmd.output or _default_output(cmd)
        canon = tuple(rewrite_path(t, build_root) for t in flags)
        target = CompilationTarget(
            source=rewrite_path(cmd.file, build_root),
            output=rewrite_path(output, build_root),
            flags=canon,
            language=classify_language(cmd.file, flags),
            directory=cmd.directory,
            file=cmd.file,
            arguments=tuple(cmd.arguments),
        )
        prev = seen.get(target.id)
        if prev is None:
            seen[target.id] = target
        elif prev.flags != target.flags:
            raise DuplicateTarget(f"{target.id_str} appears with different flags")
    return list(seen.values())


def scan_configuration(name, db_path, build_root, assignments=None) -> BuildConfiguration:
    root = build_root.replace("{config}", name) if build_root else build_root
    targets = extract_targets(load_compile_db(db_path), root)
    return BuildConfiguration(name, dict(assignments or {}), targets, root)


def scan_many(specs, build_root, jobs=1) -> list:
    """``specs`` is a list of (name, db_path, assignments); order is preserved."""
    with ThreadPoolExecutor(max_workers=max(1, jobs)) as pool:
        return list(pool.map(lambda s: scan_configuration(s[0], s[1], build_root, s[2]), specs))


def dump_scan(configs) -> str:
    return json.dumps({"configs": [c.to_dict() for c in configs]}, indent=2) + "\n"


def load_scan(path) -> list:
    with open(path, encoding="utf-8") as fh:
        data = json.load(fh)
    return [BuildConfiguration.from_dict(c) for c in data["configs"]]
