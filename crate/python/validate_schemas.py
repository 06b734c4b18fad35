"""Validates run artifacts and saved API replies against docs/schemas.

Usage: python validate_schemas.py DIR [DIR ...]

In each directory, manifest/parts/selection/skeleton.json are checked
against their artifact schemas and api-<name>.json against the matching
reply schema. Needs the `jsonschema` package.
"""

import json, sys, pathlib
from jsonschema import Draft202012Validator
from referencing import Registry, Resource
sd = pathlib.Path(__file__).resolve().parent.parent / "docs" / "schemas"
schemas = {p.name: json.loads(p.read_text()) for p in sd.glob("*.json")}
reg = Registry().with_resources([(n, Resource.from_contents(s)) for n, s in schemas.items()])
def check(schema, path):
    v = Draft202012Validator(schemas[schema], registry=reg)
    errs = list(v.iter_errors(json.loads(pathlib.Path(path).read_text())))
    print(("ok  " if not errs else "BAD ") + f"{path} against {schema}")
    for e in errs[:3]: print("   ", e.message[:200], list(e.path)[:6])
    return not errs
ok = True
for d in sys.argv[1:]:
    d = pathlib.Path(d)
    for art, sch in [("manifest.json","manifest"),("parts.json","parts"),("selection.json","selection"),("skeleton.json","skeleton")]:
        if (d/art).exists(): ok &= check(sch + ".schema.json", d/art)
    for art in ["parts","cloud","error","selection","relink","skeleton"]:
        if (d/f"api-{art}.json").exists(): ok &= check(f"api-{art}.schema.json", d/f"api-{art}.json")
sys.exit(0 if ok else 1)
