"""Run the desk-scale LC / DSN / MC comparison and write metrics as JSON.

    python3 scripts/desk_experiment.py --out desk.json [--epochs-initial 6 ...]
"""
import argparse
import json
import logging
from dataclasses import fields

from layercascade.experiment import DeskConfig, run_desk


def main():
    p = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    for f in fields(DeskConfig):
        kind = (lambda s: s.lower() in ("1", "true", "yes")) if f.type in (bool, "bool") else type(f.default)
        p.add_argument("--" + f.name.replace("_", "-"), type=kind, default=f.default)
    p.add_argument("--out", default="desk.json")
    args = vars(p.parse_args())
    out_path = args.pop("out")
    logging.basicConfig(level=logging.INFO, format="%(asctime)s %(message)s")
    res = run_desk(DeskConfig(**args))
    report = {"config": res["config"], "metrics": res["metrics"], "seconds": res["seconds"]}
    with open(out_path, "w") as f:
        json.dump(report, f, indent=1)
    print(json.dumps(report["metrics"], indent=1))


if __name__ == "__main__":
    main()
