"""Build a fixture world end to end with the offline stub backend and print what came out.

    python demos/build_scene.py [workdir] [--prompt "..."]
"""

import argparse
import json
import tempfile
from pathlib import Path

from proxyworld import export, fixtures
from proxyworld.pipeline import Pipeline


def main():
    ap = argparse.ArgumentParser()
    ap.add_argument("workdir", nargs="?")
    ap.add_argument("--prompt", default=None)
    ap.add_argument("--seed", type=int, default=0)
    args = ap.parse_args()
    root = Path(args.workdir or tempfile.mkdtemp(prefix="proxyworld_"))

    cfg = fixtures.build_fixtures(root, prompt=args.prompt, seed=args.seed)
    p = Pipeline(cfg)
    p.run()
    for e in p.events:
        print(f"{e['stage']:2d} {e['name']:<11} {e['cache']}")

    records = p.ctx["records"]
    print(f"\nterrain template: {p.ctx['template'].id}")
    print(f"placements: {sum(r.valid for r in records)} valid of {len(records)} proposed")
    for r in records:
        where = f"{r.distance:6.1f} m {r.band}" if r.valid else r.status
        print(f"  {r.coarse_cell:>3}/{r.fine_cell:<3} {where}")

    manifest = json.loads((p.out / export.MANIFEST).read_text())
    b = manifest["budget"]
    print(f"\ntriangles: {b['primitive_count']} / {b['budget']}  texture bytes: {b['texture_bytes']}")
    print("effects:", ", ".join(e["effect"] for e in manifest["effects"]))
    problems = export.check_manifest(p.out)
    print("manifest:", "ok" if not problems else problems)
    if export.validator_command():
        issues = export.validate_gltf(p.out / "scene.gltf")["issues"]
        print(f"validator: {issues['numErrors']} errors, {issues['numWarnings']} warnings")
    print(f"\noutput in {p.out}")


if __name__ == "__main__":
    main()
