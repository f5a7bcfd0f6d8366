"""Toolchain driver: command templates for preprocessing, IR emission and lowering.

A driver spec is a TOML (or JSON) file::

    name = "clang"
    languages = ["c", "c++"]

    [commands]
    preprocess = "clang -x {lang} -E {flags} {input} -o {output}"
    emit_ir    = "clang -x {lang} -S -emit-llvm -Xclang -disable-llvm-passes {flags} {input} -o {output}"
    assemble   = "clang -c -emit-llvm -Xclang -disable-llvm-passes {input} -o {output}"
    lower      = "clang -c {flags} {input} -o {output}"
    link       = "cmake --build {input}"

    [ir]
    strip_attributes = ["target-cpu", "target-features", "tune-cpu"]

or the name of a built-in spec (``clang``, optionally ``clang:/path/to/clang``).
"""

import json
import os
import re
import shlex
import shutil
import string
import subprocess
import tempfile

try:
    import tomllib
except ModuleNotFoundError:  # Python < 3.11
    import tomli as tomllib

from .errors import DriverFailure, DriverSpecError

SLOTS = {"flags", "input", "output", "lang"}
CAPABILITIES = ("preprocess", "emit_ir", "assemble", "lower", "link")

BITCODE_MAGIC = b"BC\xc0\xde"

# flags that only make sense for a full compile and would write side files
DEPFILE_FLAGS = {"-MD", "-MMD", "-MP", "-M", "-MM", "-MG"}
DEPFILE_ARG_FLAGS = {"-MF", "-MT", "-MQ"}

_BUILTIN = {
    "name": "clang",
    "languages": ["c", "c++"],
    "commands": {
        "preprocess": "{cc} -x {lang} -E {flags} {input} -o {output}",
        "emit_ir": "{cc} -x {lang} -S -emit-llvm -Xclang -disable-llvm-passes {flags} {input} -o {output}",
        "assemble": "{cc} -c -emit-llvm -Xclang -disable-llvm-passes {input} -o {output}",
        "lower": "{cc} -c {flags} {input} -o {output}",
        "link": "cmake --build {input}",
    },
    "ir": {"strip_attributes": ["target-cpu", "target-features", "tune-cpu"]},
}


def _check_template(name, text):
    try:
        tokens = shlex.split(text)
    except ValueError as exc:
        raise DriverSpecError(f"{name}: {exc}") from exc
    if not tokens:
        raise DriverSpecError(f"{name}: empty command template")
    for tok in tokens:
        for _, field_name, _, _ in string.Formatter().parse(tok):
            if field_name is None:
                continue
            if field_name not in SLOTS:
                raise DriverSpecError(f"{name}: unknown slot {{{field_name}}}")
            if field_name == "flags" and tok != "{flags}":
                raise DriverSpecError(f"{name}: {{flags}} must be a standalone token")
    return tokens


def compile_only(flags):
    """Drop -c and dependency-file options so a command can be re-targeted."""
    out, skip = [], False
    for tok in flags:
        if skip:
            skip = False
            continue
        if tok in DEPFILE_ARG_FLAGS:
            skip = True
            continue
        if tok == "-c" or tok in DEPFILE_FLAGS or tok.startswith(("-MF", "-MT", "-MQ")):
            continue
        out.append(tok)
    return out


class ToolchainDriver:
    def __init__(self, spec: dict):
        self.name = spec.get("name", "driver")
        self.languages = set(spec.get("languages", ["c", "c++"]))
        commands = spec.get("commands", {})
        self.templates = {}
        for cap, text in commands.items():
            if cap not in CAPABILITIES:
                raise DriverSpecError(f"unknown capability {cap!r}")
            self.templates[cap] = _check_template(cap, text)
        self.strip_attributes = list(spec.get("ir", {}).get("strip_attributes", []))
        self.spec = spec

    # capability queries -----------------------------------------------------

    def has(self, capability: str) -> bool:
        return capability in self.templates

    def can_emit(self, language: str) -> bool:
        return language in self.languages and self.has("emit_ir") and self.has("preprocess")

    def render(self, capability, flags=(), input="", output="", lang="c"):
        if capability not in self.templates:
            raise DriverSpecError(f"driver {self.name} has no {capability} capability")
        argv = []
        for tok in self.templates[capability]:
            if tok == "{flags}":
                argv.extend(flags)
            else:
                argv.append(tok.format(input=input, output=output, lang=lang, flags=""))
        return argv

    # execution --------------------------------------------------------------

    def _run(self, argv, cwd, label):
        try:
            proc = subprocess.run(argv, cwd=cwd or None, capture_output=True)
        except OSError as exc:
            raise DriverFailure(label, str(exc)) from exc
        if proc.returncode != 0:
            raise DriverFailure(label, proc.stderr.decode("utf-8", "replace"))
        return proc

    def preprocess(self, flags, input, cwd, lang, label=None) -> bytes:
        with tempfile.TemporaryDirectory(prefix="irforge-pp-") as tmp:
            out = os.path.join(tmp, "out.i")
            self._run(self.render("preprocess", compile_only(flags), input, out, lang), cwd, label or input)
            with open(out, "rb") as fh:
                return fh.read()

    def strip_ir_attributes(self, text: bytes) -> bytes:
        for attr in self.strip_attributes:
            text = re.sub(rb' "' + re.escape(attr.encode()) + rb'"="[^"]*"', b"", text)
        return text

    def emit_ir_text(self, flags, input, cwd, lang, label=None) -> bytes:
        """Emitted IR with target attributes removed, before assembly."""
        with tempfile.TemporaryDirectory(prefix="irforge-ir-") as tmp:
            ll = os.path.join(tmp, "unit.ll")
            self._run(self.render("emit_ir", compile_only(flags), input, ll, lang), cwd, label or input)
            with open(ll, "rb") as fh:
                text = fh.read()
        if text.startswith(BITCODE_MAGIC):
            return text
        return self.strip_ir_attributes(text)

    def emit_ir(self, flags, input, cwd, lang, label=None, text=None) -> bytes:
        """IR bytes for one translation unit, with target attributes removed."""
        if text is None:
            text = self.emit_ir_text(flags, input, cwd, lang, label)
        if text.startswith(BITCODE_MAGIC) or not self.has("assemble"):
            return text
        with tempfile.TemporaryDirectory(prefix="irforge-ir-") as tmp:
            ll = os.path.join(tmp, "unit.ll")
            with open(ll, "wb") as fh:
                fh.write(text)
            bc = os.path.join(tmp, "unit.bc")
            self._run(self.render("assemble", (), ll, bc, lang), tmp, label or input)
            with open(bc, "rb") as fh:
                return fh.read()

    def lower(self, ir: bytes, flags, output, cwd=None, label=None) -> str:
        suffix = ".bc" if ir.startswith(BITCODE_MAGIC) else ".ll"
        with tempfile.TemporaryDirectory(prefix="irforge-lo-") as tmp:
            src = os.path.join(tmp, "unit" + suffix)
            with open(src, "wb") as fh:
                fh.write(ir)
            os.makedirs(os.path.dirname(os.path.abspath(output)), exist_ok=True)
            self._run(self.render("lower", list(flags), src, output, "ir"), cwd or tmp, label or output)
        return output

    def compile(self, flags, input, output, cwd, lang, label=None) -> str:
        """Direct source-to-object compile (SD targets and reference builds)."""
        # "other" (assembly, Fortran, ...) is left to the compiler's own extension rules
        lang_flags = ["-x", lang] if lang in ("c", "c++", "cuda") else []
        argv = self.render("lower", lang_flags + compile_only(flags), input, output, lang)
        os.makedirs(os.path.dirname(os.path.abspath(output)), exist_ok=True)
        self._run(argv, cwd, label or input)
        return output

    def link_command(self, build_dir: str) -> list:
        if not self.has("link"):
            return []
        return self.render("link", (), build_dir, "", "")

    def describe(self) -> dict:
        return {"name": self.name, "languages": sorted(self.languages),
                "capabilities": sorted(self.templates)}


def builtin_spec(compiler: str = "clang") -> dict:
    spec = json.loads(json.dumps(_BUILTIN))
    spec["commands"] = {k: v.replace("{cc}", shlex.quote(compiler)) for k, v in spec["commands"].items()}
    spec["name"] = os.path.basename(compiler)
    return spec


def load_driver(spec) -> ToolchainDriver:
    """Load a driver from a spec file path, a built-in name, or a dict."""
    if isinstance(spec, ToolchainDriver):
        return spec
    if isinstance(spec, dict):
        return ToolchainDriver(spec)
    text = str(spec)
    if os.path.isfile(text):
        with open(text, "rb") as fh:
            raw = fh.read()
        try:
            data = json.loads(raw) if text.endswith(".json") else tomllib.loads(raw.decode("utf-8"))
        except (ValueError, tomllib.TOMLDecodeError) as exc:
            raise DriverSpecError(f"cannot parse driver spec {text}: {exc}") from exc
        return ToolchainDriver(data)
    name, _, path = text.partition(":")
    if name == "clang":
        return ToolchainDriver(builtin_spec(path or "clang"))
    raise DriverSpecError(f"no driver spec file or built-in named {text!r}")


def find_clang():
    """Path of a usable clang, or None."""
    for cand in (os.environ.get("IRFORGE_CLANG"), "clang", "clang-19", "clang-18", "clang-17",
                 "clang-16", "clang-15", "clang-14"):
        if cand and shutil.which(cand):
            return shutil.which(cand)
    return None
