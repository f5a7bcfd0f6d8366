#!/usr/bin/env python3
"""Configure GROMACS once per SIMD level and print the dedup report.

Needs a GROMACS checkout, CMake and an IR-capable clang.  Each level gets
its own build tree under --work; the trees are built (so generated headers
exist) unless --no-build is given.  With --compile-db the configure step is
skipped and existing compile databases are used instead.

    python scripts/gromacs_harness.py --source ~/gromacs --work /tmp/gmx
    python scripts/gromacs_harness.py --compile-db simd-avx2=/tmp/a/compile_commands.json ...
"""

import argparse
import os
import subprocess
import sys
import time

from irforge.buildscan import scan_many
from irforge.dedup import dedup
from irforge.driver import find_clang, load_driver

DEFAULT_LEVELS = ["SSE4.1", "AVX_256", "AVX2_128", "AVX2_256", "AVX_512"]


def configure(source, work, level, cc, cxx, extra, build, jobs):
    tree = os.path.join(work, "build", "simd-" + level.lower().replace("_", "-"))
    cmd = ["cmake", "-S", source, "-B", tree, "-DCMAKE_EXPORT_COMPILE_COMMANDS=ON",
           f"-DCMAKE_C_COMPILER={cc}", f"-DCMAKE_CXX_COMPILER={cxx}", f"-DGMX_SIMD={level}",
           "-DGMX_GPU=OFF", "-DGMX_BUILD_OWN_FFTW=ON", "-DCMAKE_BUILD_TYPE=Release"] + list(extra)
    subprocess.run(cmd, check=True)
    if build:
        subprocess.run(["cmake", "--build", tree, "-j", str(jobs)], check=True)
    return os.path.basename(tree), os.path.join(tree, "compile_commands.json")


def main(argv=None):
    p = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    p.add_argument("--source", help="GROMACS source checkout")
    p.add_argument("--work", default="gromacs-work")
    p.add_argument("--levels", default=",".join(DEFAULT_LEVELS), help="comma-separated GMX_SIMD values")
    p.add_argument("--cmake-arg", action="append", default=[], help="extra -D option for every configuration")
    p.add_argument("--compile-db", action="append", default=[], metavar="NAME=PATH",
                   help="use an existing compile database (skips configure)")
    p.add_argument("--no-build", action="store_true")
    p.add_argument("--clang", default=find_clang())
    p.add_argument("--jobs", type=int, default=os.cpu_count() or 1)
    p.add_argument("--out", default="-")
    args = p.parse_args(argv)

    if not args.clang:
        p.error("no IR-capable clang found; pass --clang")
    specs = []
    for item in args.compile_db:
        name, _, db = item.partition("=")
        specs.append((name, db, {"simd": name}))
    if not specs:
        if not args.source:
            p.error("--source is required unless --compile-db is given")
        cxx = args.clang + "++" if not args.clang.endswith("++") else args.clang
        for level in [x for x in args.levels.split(",") if x]:
            name, db = configure(args.source, args.work, level, args.clang, cxx, args.cmake_arg,
                                 not args.no_build, args.jobs)
            specs.append((name, db, {"simd": level}))

    started = time.monotonic()
    roots = {name: os.path.dirname(os.path.abspath(db)) for name, db, _ in specs}
    configs = []
    for name, db, assignments in specs:
        configs += scan_many([(name, db, assignments)], roots[name], args.jobs)
    plan, report = dedup(configs, load_driver("clang:" + args.clang), jobs=args.jobs)
    text = report.dumps()
    if args.out == "-":
        sys.stdout.write(text)
    else:
        with open(args.out, "w", encoding="utf-8") as fh:
            fh.write(text)
    print(f"N={report.N} sum_T={report.sum_T} T'={report.T_prime} reduction={report.reduction:.4f} "
          f"({time.monotonic() - started:.1f} s)", file=sys.stderr)
    return 0


if __name__ == "__main__":
    sys.exit(main())
