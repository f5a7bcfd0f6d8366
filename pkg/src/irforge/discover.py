"""LLM-assisted catalog discovery: prompt assembly, response parsing and scoring."""

import json
import os
import re
import socket
import time
import urllib.error
import urllib.request
from dataclasses import dataclass, field
from functools import lru_cache
from importlib import resources

from .catalog import SpecializationCatalog, iter_flags, normalize_flag, schema_text, validate_catalog
from .errors import EmptyInput, InvalidLabel, ProviderError, ProviderTimeout, Unparseable

GRANULARITY_NOTE = "each vectorization level counts as one (category, name, flag) item"


@lru_cache(maxsize=None)
def prompt_template() -> str:
    return resources.files("irforge").joinpath("data/discovery_prompt.txt").read_text("utf-8")


@dataclass
class PromptBundle:
    instruction: str
    file_content: str
    schema: str
    examples: list = field(default_factory=list)

    def render(self) -> str:
        text = self.instruction
        if self.examples:
            shots = "\n\n".join(f"Example {i}:\n{ex}" for i, ex in enumerate(self.examples, 1))
            text = shots + "\n\n" + text
        # one pass, so braces inside the substituted file cannot be re-expanded
        return re.sub(r"\{(file_content|schema)\}",
                      lambda m: self.file_content if m.group(1) == "file_content" else self.schema, text)


def _file_header(name: str) -> str:
    return f"\n--- file: {name} ---\n"


def bundle_files(build_files) -> str:
    parts = []
    for i, item in enumerate(build_files):
        if isinstance(item, (tuple, list)):
            name, text = item
        else:
            name, text = f"build file {i + 1}", item
        parts.append(_file_header(name) + text)
    return "".join(parts)


def build_prompt(build_files, schema=None, examples=None) -> str:
    """Render the discovery prompt; ``build_files`` holds texts or (name, text) pairs."""
    build_files = list(build_files or [])
    if not build_files:
        raise EmptyInput("at least one build file is required")
    bundle = PromptBundle(prompt_template(), bundle_files(build_files),
                          schema if schema is not None else schema_text(), list(examples or []))
    return bundle.render()


_FENCE = re.compile(r"```[A-Za-z0-9_-]*[ \t]*\n(.*?)```", re.DOTALL)


def extract_json(text: str) -> str:
    m = _FENCE.search(text)
    if m:
        return m.group(1).strip()
    start, end = text.find("{"), text.rfind("}")
    if start == -1 or end < start:
        raise Unparseable("response contains no JSON object")
    return text[start:end + 1]


def parse_response(text: str, normalize: bool = True) -> SpecializationCatalog:
    body = extract_json(text or "")
    try:
        document = json.loads(body)
    except json.JSONDecodeError as exc:
        raise Unparseable(f"response JSON does not parse: {exc}") from exc
    return validate_catalog(document, normalize=normalize)


# ---------------------------------------------------------------------------
# metrics


@dataclass
class EvalMetrics:
    tp: int
    fp: int
    fn: int

    @property
    def precision(self) -> float:
        return self.tp / (self.tp + self.fp) if self.tp + self.fp else 0.0

    @property
    def recall(self) -> float:
        return self.tp / (self.tp + self.fn) if self.tp + self.fn else 0.0

    @property
    def f1(self) -> float:
        p, r = self.precision, self.recall
        return 2 * p * r / (p + r) if p + r else 0.0

    def to_dict(self) -> dict:
        return {"tp": self.tp, "fp": self.fp, "fn": self.fn, "precision": self.precision,
                "recall": self.recall, "f1": self.f1}


def _fold_name(name) -> str:
    return str(name).strip().lower().replace("-", "_")


def _canon_flag(flag):
    if flag is None:
        return None
    try:
        return normalize_flag(flag).raw
    except InvalidLabel:
        return flag.strip()


def triples(cat: SpecializationCatalog, normalize: bool = True) -> set:
    out = set()
    for category, name, flag in iter_flags(cat):
        if normalize:
            out.add((category, _fold_name(name), _canon_flag(flag)))
        else:
            out.add((category, name, flag))
    return out


def _score(pred: set, truth: set) -> EvalMetrics:
    return EvalMetrics(len(pred & truth), len(pred - truth), len(truth - pred))


def evaluate(predicted, truth, normalize: bool = True, per_category: bool = False):
    """Triple-level comparison.  Returns EvalMetrics, or (overall, {category: EvalMetrics})."""
    pred, gold = triples(predicted, normalize), triples(truth, normalize)
    overall = _score(pred, gold)
    if not per_category:
        return overall
    cats = sorted({t[0] for t in pred | gold})
    return overall, {c: _score({t for t in pred if t[0] == c}, {t for t in gold if t[0] == c}) for c in cats}


def eval_report(predicted, truth, normalize=True, per_category=False) -> dict:
    result = evaluate(predicted, truth, normalize, per_category)
    if per_category:
        overall, cats = result
        return {"overall": overall.to_dict(), "per_category": {c: m.to_dict() for c, m in cats.items()},
                "metadata": {"granularity": GRANULARITY_NOTE, "normalized": normalize}}
    return {"overall": result.to_dict(), "metadata": {"granularity": GRANULARITY_NOTE, "normalized": normalize}}


# ---------------------------------------------------------------------------
# providers


@dataclass
class ModelOutput:
    text: str
    tokens_in: int
    tokens_out: int
    latency: float

    def usage(self) -> dict:
        return {"tokens_in": self.tokens_in, "tokens_out": self.tokens_out, "latency": self.latency}


def load_provider(path) -> dict:
    with open(path, encoding="utf-8") as fh:
        config = json.load(fh)
    if "api_key" in config:
        raise ValueError("provider files must not contain API keys; name an environment variable in api_key_env")
    base = os.path.dirname(os.path.abspath(path))
    if config.get("fixture_path") and not os.path.isabs(config["fixture_path"]):
        config["fixture_path"] = os.path.join(base, config["fixture_path"])
    return config


def _word_count(text: str) -> int:
    return len(text.split())


def query_model(prompt: str, provider: dict) -> ModelOutput:
    kind = provider.get("kind", "offline")
    if kind == "offline":
        with open(provider["fixture_path"], encoding="utf-8") as fh:
            text = fh.read()
        return ModelOutput(text, _word_count(prompt), _word_count(text), 0.0)
    if kind != "live":
        raise ValueError(f"unknown provider kind {kind!r}")

    key_var = provider.get("api_key_env", "IRFORGE_API_KEY")
    headers = {"Content-Type": "application/json"}
    key = os.environ.get(key_var)
    if key:
        headers["Authorization"] = f"Bearer {key}"
    body = {"model": provider.get("model", ""), "messages": [{"role": "user", "content": prompt}]}
    if "temperature" in provider:
        body["temperature"] = provider["temperature"]
    request = urllib.request.Request(provider["endpoint"], json.dumps(body).encode("utf-8"), headers)
    started = time.monotonic()
    try:
        with urllib.request.urlopen(request, timeout=float(provider.get("timeout", 120))) as resp:
            payload = json.loads(resp.read().decode("utf-8"))
    except urllib.error.HTTPError as exc:
        raise ProviderError(exc.code, exc.read().decode("utf-8", "replace")) from exc
    except (socket.timeout, TimeoutError) as exc:
        raise ProviderTimeout(f"no response from {provider['endpoint']}") from exc
    except urllib.error.URLError as exc:
        if isinstance(exc.reason, (socket.timeout, TimeoutError)):
            raise ProviderTimeout(f"no response from {provider['endpoint']}") from exc
        raise ProviderError(0, str(exc.reason)) from exc
    latency = time.monotonic() - started
    try:
        text = payload["choices"][0]["message"]["content"]
    except (KeyError, IndexError, TypeError) as exc:
        raise ProviderError(200, f"unexpected response shape: {json.dumps(payload)[:200]}") from exc
    usage = payload.get("usage", {})
    return ModelOutput(text, int(usage.get("prompt_tokens", _word_count(prompt))),
                       int(usage.get("completion_tokens", _word_count(text))), latency)


def discover(build_files, provider: dict, schema=None):
    """Prompt, query and parse once; returns (catalog, ModelOutput)."""
    out = query_model(build_prompt(build_files, schema), provider)
    return parse_response(out.text), out


def run_repetitions(build_files, provider: dict, truth, repetitions: int = 10) -> list:
    """Repeat discovery and scoring; returns one EvalMetrics per run."""
    return [evaluate(discover(build_files, provider)[0], truth) for _ in range(repetitions)]
