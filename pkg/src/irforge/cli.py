"""Command-line entry point: ``irforge <subcommand> ...``."""

import argparse
import itertools
import json
import logging
import os
import sys
from dataclasses import dataclass, field

try:
    import tomllib
except ModuleNotFoundError:  # Python < 3.11
    import tomli as tomllib

from . import __version__
from .buildscan import dump_scan, load_scan, scan_many
from .catalog import dumps_catalog, load_catalog, serialize_catalog
from .dedup import DedupPlan, dedup, load_sd_list
from .deploy import execute, parse_tag, plan_deployment
from .driver import load_driver
from .errors import EmptyAxis, IrforgeError
from .forge import ContainerRecipe, Store, dumps_manifest, emit_ir_set, render_container_recipe, render_install_manifest
from .matcher import ResolvedConfig, intersect, parse_selections, resolve
from .sysprobe import discover_system

log = logging.getLogger("irforge")


# ---------------------------------------------------------------------------
# workspace / matrix


@dataclass
class WorkspaceConfig:
    project: str = ""
    build_root: str = ""
    matrix: dict = field(default_factory=dict)  # point -> values
    driver: str = "clang"
    store: str = ""

    @classmethod
    def load(cls, path) -> "WorkspaceConfig":
        with open(path, "rb") as fh:
            data = tomllib.load(fh)
        return cls(data.get("project", ""), data.get("build_root", ""),
                   {k: list(v) for k, v in data.get("matrix", {}).items()},
                   data.get("driver", "clang"), data.get("store", ""))

    def configurations(self) -> list:
        return expand_matrix(self.matrix)


def expand_matrix(points: dict) -> list:
    """Cartesian product, points sorted by name, values in the order given."""
    names = sorted(points)
    for name in names:
        if not list(points[name]):
            raise EmptyAxis(f"point {name!r} has no values")
    return [dict(zip(names, combo)) for combo in itertools.product(*(list(points[n]) for n in names))]


# ---------------------------------------------------------------------------
# helpers


def _write(path, text):
    if path in (None, "-"):
        sys.stdout.write(text)
        return
    parent = os.path.dirname(os.path.abspath(path))
    os.makedirs(parent, exist_ok=True)
    with open(path, "w", encoding="utf-8") as fh:
        fh.write(text)


def _dump(obj) -> str:
    return json.dumps(obj, indent=2, ensure_ascii=False) + "\n"


def _load_json(path):
    with open(path, encoding="utf-8") as fh:
        return json.load(fh)


def _default_store():
    return os.environ.get("IRFORGE_STORE", "irforge-store")


def _features(path):
    return discover_system(path, live=False) if path else discover_system()


def _interactive_choices(common, stream_in=sys.stdin, stream_out=sys.stderr) -> dict:
    choices = {}
    for point, options in common.points().items():
        default = common.defaults.get(point, options[0] if len(options) == 1 else "")
        stream_out.write(f"{point} {options} [{default}]: ")
        stream_out.flush()
        answer = stream_in.readline().strip()
        if answer:
            choices[point] = answer
    return choices


# ---------------------------------------------------------------------------
# subcommands


def cmd_probe(args):
    report = discover_system(args.bundle, live=args.live)
    _write(args.out, report.dumps())


def cmd_match(args):
    catalog = load_catalog(args.catalog)
    common = intersect(catalog, _features(args.features))
    choices = parse_selections(args.select)
    if args.interactive:
        choices.update(_interactive_choices(common))
    if not choices and not args.operator and not args.resolve:
        _write(args.out, common.dumps())
        return
    operator = _load_json(args.operator) if args.operator else {}
    resolved = resolve(common, choices, operator)
    doc = common.to_dict(include_resolution=True)
    doc["resolved"] = resolved.to_dict()
    _write(args.out, _dump(doc))


def _parse_config_spec(text):
    name, sep, db = text.partition("=")
    if not sep or not name or not db:
        raise argparse.ArgumentTypeError(f"expected NAME=COMPILE_DB, got {text!r}")
    return name, db


def cmd_scan(args):
    specs = []
    for name, db in args.config:
        try:
            assignments = parse_tag(name).assignments
        except (ValueError, UnicodeDecodeError):
            assignments = {}
        specs.append((name, db, assignments))
    configs = scan_many(specs, args.build_root or "", args.jobs)
    _write(args.out, dump_scan(configs))


def cmd_dedup(args):
    configs = load_scan(args.scan)
    sd = load_sd_list(args.sd_list) if args.sd_list else []
    plan, report = dedup(configs, load_driver(args.driver), sd, args.jobs, refine=not args.no_refine)
    _write(args.out_plan, plan.dumps())
    _write(args.out_report, report.dumps())
    if not args.json:
        print(f"N={report.N} sum_T={report.sum_T} T'={report.T_prime} reduction={report.reduction:.4f}",
              file=sys.stderr)


def cmd_build(args):
    plan = DedupPlan.load(args.plan)
    driver = load_driver(args.driver)
    store = Store(args.store or _default_store())
    artifacts, stats = emit_ir_set(plan, driver, store, args.jobs)
    by_unit = {a.unit: a for a in artifacts}
    manifests = {}
    os.makedirs(args.out_manifests, exist_ok=True)
    for cfg in plan.configs:
        manifest = render_install_manifest(cfg["name"], plan, by_unit, driver.link_command(cfg["build_root"]))
        manifests[cfg["name"]] = manifest
        _write(os.path.join(args.out_manifests, cfg["name"] + ".json"), dumps_manifest(manifest))
    catalog_subset = serialize_catalog(load_catalog(args.catalog)) if args.catalog else None
    recipe, text = render_container_recipe(plan, manifests, _load_json(args.bases), catalog_subset)
    _write(args.out_recipe, text)
    _write(args.out_recipe + ".json", recipe.dumps())
    summary = {"emitted": stats.emitted, "cache_hits": stats.cache_hits, "artifacts": len(artifacts),
               "store": store.root}
    print(_dump(summary) if args.json else
          f"{stats.emitted} emitted, {stats.cache_hits} cache hits, {len(artifacts)} artifacts in {store.root}",
          file=sys.stderr)


def _load_recipe(path):
    if not path.endswith(".json") and os.path.exists(path + ".json"):
        path = path + ".json"
    return ContainerRecipe.load(path)


def cmd_deploy(args):
    recipe = _load_recipe(args.recipe)
    resolved = ResolvedConfig(parse_selections(args.select), {})
    resolved.provenance = {p: "user" for p in resolved.assignments}
    plan = plan_deployment(recipe, resolved, _features(args.features), opt_override=args.opt_level)
    if args.execute:
        if not args.driver:
            raise argparse.ArgumentTypeError("--execute needs --driver")
        store = args.store or _default_store()
        execute(plan, store, load_driver(args.driver), args.out_dir, args.jobs)
    _write(args.out, plan.dumps())


def cmd_discover(args):
    from .discover import discover, load_provider
    files = []
    for path in args.build_file:
        with open(path, encoding="utf-8") as fh:
            files.append((os.path.basename(path), fh.read()))
    catalog, output = discover(files, load_provider(args.provider))
    _write(args.out, dumps_catalog(catalog))
    if args.usage:
        _write(args.usage, _dump(output.usage()))


def cmd_eval(args):
    from .discover import eval_report
    normalize = not args.no_normalize
    pred = load_catalog(args.pred, normalize=normalize)
    truth = load_catalog(args.truth, normalize=normalize)
    _write(args.out, _dump(eval_report(pred, truth, normalize, args.per_category)))


def cmd_matrix(args):
    if args.workspace:
        points = WorkspaceConfig.load(args.workspace).matrix
    else:
        points = {}
    for item in args.point or ():
        name, sep, values = item.partition("=")
        if not sep:
            raise argparse.ArgumentTypeError(f"expected POINT=v1,v2, got {item!r}")
        points[name] = [v for v in values.split(",") if v]
    from .deploy import image_tag
    configs = expand_matrix(points)
    _write(args.out, _dump([{"name": image_tag(c), "assignments": c} for c in configs]))


# ---------------------------------------------------------------------------


def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--json", action="store_true", default=argparse.SUPPRESS,
                        help="machine-readable output and error records")
    common.add_argument("-v", "--verbose", action="store_true", default=argparse.SUPPRESS)

    parser = argparse.ArgumentParser(prog="irforge", parents=[common],
                                     description="Build once to IR, specialize at deployment.")
    parser.add_argument("--version", action="version", version=f"irforge {__version__}")
    sub = parser.add_subparsers(dest="command", metavar="COMMAND")
    sub.required = True

    p = sub.add_parser("probe", parents=[common], help="report target-system features")
    p.add_argument("--bundle", help="declared feature bundle (JSON)")
    p.add_argument("--live", action=argparse.BooleanOptionalAction, default=None,
                   help="probe the host (default: only when no bundle is given)")
    p.add_argument("--out", default="-")
    p.set_defaults(func=cmd_probe)

    p = sub.add_parser("match", parents=[common], help="intersect a catalog with system features")
    p.add_argument("--catalog", required=True)
    p.add_argument("--features", help="feature bundle; live probe when omitted")
    p.add_argument("--select", action="append", default=[], metavar="POINT=VALUE")
    p.add_argument("--operator", help="operator preference file (JSON point -> value)")
    p.add_argument("--resolve", action="store_true", help="resolve using defaults only")
    p.add_argument("--interactive", action="store_true", help="prompt for each point")
    p.add_argument("--out", default="-")
    p.set_defaults(func=cmd_match)

    p = sub.add_parser("scan", parents=[common], help="ingest compile databases")
    p.add_argument("--config", action="append", required=True, type=_parse_config_spec, metavar="NAME=DB")
    p.add_argument("--build-root", default="", help="build directory; may contain {config}")
    p.add_argument("--jobs", type=int, default=1)
    p.add_argument("--out", default="-")
    p.set_defaults(func=cmd_scan)

    p = sub.add_parser("dedup", parents=[common], help="compute the distinct IR set")
    p.add_argument("--scan", required=True)
    p.add_argument("--driver", required=True, help="driver spec file or 'clang[:PATH]'")
    p.add_argument("--sd-list", help="system-dependent target ids (JSON list or one per line)")
    p.add_argument("--jobs", type=int, default=os.cpu_count() or 1)
    p.add_argument("--out-plan", required=True)
    p.add_argument("--out-report", required=True)
    p.add_argument("--no-refine", action="store_true",
                   help="skip the emitted-IR comparison; group by preprocessed digest and flags only")
    p.set_defaults(func=cmd_dedup)

    p = sub.add_parser("build", parents=[common], help="emit IR and render the container recipe")
    p.add_argument("--plan", required=True)
    p.add_argument("--driver", required=True)
    p.add_argument("--store", help="IR store directory (default $IRFORGE_STORE)")
    p.add_argument("--bases", required=True, help="layer map (JSON)")
    p.add_argument("--catalog", help="catalog to embed as recipe annotations")
    p.add_argument("--jobs", type=int, default=os.cpu_count() or 1)
    p.add_argument("--out-recipe", required=True)
    p.add_argument("--out-manifests", required=True)
    p.set_defaults(func=cmd_build)

    p = sub.add_parser("deploy", parents=[common], help="plan (and optionally run) deployment")
    p.add_argument("--recipe", required=True, help="recipe file (its .json sidecar is read)")
    p.add_argument("--select", action="append", default=[], metavar="POINT=VALUE")
    p.add_argument("--features", help="feature bundle; live probe when omitted")
    p.add_argument("--opt-level", help="override the recorded optimization level (e.g. -O3)")
    p.add_argument("--execute", action="store_true", help="lower the IR now")
    p.add_argument("--driver")
    p.add_argument("--store", help="IR store directory (default $IRFORGE_STORE)")
    p.add_argument("--out-dir", help="where objects are written with --execute")
    p.add_argument("--jobs", type=int, default=os.cpu_count() or 1)
    p.add_argument("--out", default="-")
    p.set_defaults(func=cmd_deploy)

    p = sub.add_parser("discover", parents=[common], help="extract a catalog with a language model")
    p.add_argument("--build-file", action="append", required=True)
    p.add_argument("--provider", required=True, help="provider config (JSON)")
    p.add_argument("--usage", help="write token/latency accounting here")
    p.add_argument("--out", default="-")
    p.set_defaults(func=cmd_discover)

    p = sub.add_parser("eval", parents=[common], help="score a predicted catalog")
    p.add_argument("--pred", required=True)
    p.add_argument("--truth", required=True)
    p.add_argument("--per-category", action="store_true")
    p.add_argument("--no-normalize", action="store_true")
    p.add_argument("--out", default="-")
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("matrix", parents=[common], help="expand a configuration matrix")
    p.add_argument("--workspace", help="workspace TOML with a [matrix] table")
    p.add_argument("--point", action="append", metavar="POINT=v1,v2")
    p.add_argument("--out", default="-")
    p.set_defaults(func=cmd_matrix)
    return parser


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    args.json = getattr(args, "json", False)
    logging.basicConfig(level=logging.INFO if getattr(args, "verbose", False) else logging.WARNING,
                        format="irforge: %(levelname)s: %(message)s")
    try:
        args.func(args)
    except IrforgeError as exc:
        if args.json:
            print(json.dumps(exc.record(), separators=(",", ":")), file=sys.stderr)
        else:
            print(f"irforge {args.command}: {type(exc).__name__}: {exc}", file=sys.stderr)
        return 1
    except argparse.ArgumentTypeError as exc:
        print(f"irforge {args.command}: error: {exc}", file=sys.stderr)
        return 2
    except (OSError, ValueError) as exc:
        if args.json:
            print(json.dumps({"error": type(exc).__name__, "message": str(exc)}, separators=(",", ":")),
                  file=sys.stderr)
        else:
            print(f"irforge {args.command}: {exc}", file=sys.stderr)
        return 1
    return 0


if __name__ == "__main__":
    sys.exit(main())
