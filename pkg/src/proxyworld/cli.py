"""Command line entry point: ``proxyworld <command> ...``.

Exit status: 0 ok, 2 bad config, 3 backend or agent failure, 4 validation failure.
"""

from __future__ import annotations

import argparse
import json
import logging
import os
import sys
from pathlib import Path

from . import export, fixtures, pipeline
from .config import load_config
from .errors import ProxyWorldError

log = logging.getLogger("proxyworld")


def _config(args):
    cfg = load_config(args.config)
    if getattr(args, "backend", None):
        cfg.data["backend"]["mode"] = args.backend
        if args.backend == "remote" and not cfg.data["backend"]["url"]:
            cfg.data["backend"]["url"] = os.environ.get("PROXYWORLD_BACKEND_URL")
    return cfg


def cmd_run(args):
    cfg = _config(args)
    p = pipeline.Pipeline(cfg, out_dir=args.out)
    out = p.run(until=args.until, only=args.stage)
    for e in p.events:
        print(f"{e['stage']:2d} {e['name']:<11} {e['cache']}")
    print(out)
    return 0


def cmd_dump_depth(args):
    origin = None if args.origin is None else [float(x) for x in args.origin.split(",")]
    depth, origin = pipeline.dump_depth(args.mesh, args.out, args.resolution, origin)
    print(json.dumps({"out": str(args.out), "width": depth.width, "height": depth.height,
                      "origin": [float(x) for x in origin]}))
    return 0


def cmd_depth_fit(args):
    print(json.dumps(pipeline.depth_fit(args.src, args.lib), indent=1, sort_keys=True))
    return 0


def cmd_arrange(args):
    cfg = _config(args)
    p = pipeline.Pipeline(cfg, out_dir=args.out)
    out = p.run(until=pipeline.STAGES.index("arrange") + 1)
    print((out / "arrange_audit.json").read_text(), end="")
    print((out / "placements.jsonl").read_text(), end="")
    print(out / "grid.png")
    return 0


def cmd_export_validate(args):
    out = Path(args.dir)
    problems = export.check_manifest(out)
    manifest = json.loads((out / export.MANIFEST).read_text())
    if export.validator_command() is not None:
        report = export.validate_gltf(out / manifest["gltf"])
        issues = report["issues"]
        for m in issues["messages"]:
            if m["severity"] == 0:
                problems.append(f"{m['code']} at {m.get('pointer', '?')}: {m['message']}")
        print(f"validator: {issues['numErrors']} errors, {issues['numWarnings']} warnings")
    elif not args.offline:
        print("glTF validator not installed; run `npm install --prefix tools` or pass --offline",
              file=sys.stderr)
        return 4
    for p in problems:
        print(p)
    print("ok" if not problems else f"{len(problems)} problem(s)")
    return 0 if not problems else 4


def cmd_fixtures(args):
    print(fixtures.build_fixtures(args.dir, prompt=args.prompt, seed=args.seed))
    return 0


def build_parser():
    ap = argparse.ArgumentParser(prog="proxyworld", description="Build proxy-geometry panoramic scenes.")
    ap.add_argument("-v", "--verbose", action="store_true")
    sub = ap.add_subparsers(dest="command", required=True)

    r = sub.add_parser("run", help="run the pipeline")
    r.add_argument("config")
    r.add_argument("--stage", type=int, help="recompute only this stage from cached predecessors")
    r.add_argument("--until", type=int, help="stop after this stage")
    r.add_argument("--backend", choices=("stub", "remote"))
    r.add_argument("--out")
    r.set_defaults(fn=cmd_run)

    pano = sub.add_parser("pano", help="panorama utilities").add_subparsers(dest="action", required=True)
    d = pano.add_parser("dump-depth", help="render panoramic depth of an OBJ")
    d.add_argument("--mesh", required=True)
    d.add_argument("--resolution", type=int, default=512)
    d.add_argument("--out", required=True)
    d.add_argument("--origin", help="x,y,z; defaults to eye height above the terrain centre")
    d.set_defaults(fn=cmd_dump_depth)

    depth = sub.add_parser("depth", help="depth adaptation").add_subparsers(dest="action", required=True)
    f = depth.add_parser("fit", help="fit the depth remap against a reference library")
    f.add_argument("--src", required=True)
    f.add_argument("--lib", required=True)
    f.set_defaults(fn=cmd_depth_fit)

    a = sub.add_parser("arrange", help="run up to placement and print the audit")
    a.add_argument("config")
    a.add_argument("--dry-run", action="store_true", help="stop after placement (always on)")
    a.add_argument("--backend", choices=("stub", "remote"))
    a.add_argument("--out")
    a.set_defaults(fn=cmd_arrange)

    ex = sub.add_parser("export", help="export checks").add_subparsers(dest="action", required=True)
    v = ex.add_parser("validate", help="validate an exported scene directory")
    v.add_argument("dir")
    v.add_argument("--offline", action="store_true", help="skip the external validator if missing")
    v.set_defaults(fn=cmd_export_validate)

    fx = sub.add_parser("fixtures", help="write the synthetic fixture libraries")
    fx.add_argument("dir")
    fx.add_argument("--prompt")
    fx.add_argument("--seed", type=int, default=0)
    fx.set_defaults(fn=cmd_fixtures)
    return ap


def main(argv=None):
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        return args.fn(args)
    except ProxyWorldError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return getattr(exc, "exit_code", 1)


if __name__ == "__main__":
    sys.exit(main())
