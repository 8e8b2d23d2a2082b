"""Run the bundled experiment specs in sequence.

    python scripts/run_experiments.py                 # every spec in scripts/specs
    python scripts/run_experiments.py mitigation      # just one
    python scripts/run_experiments.py --out results --workers 2
"""

import argparse
import json
import sys
import time
from pathlib import Path

from graph_metamers.errors import MetamerError
from graph_metamers.experiments import ExperimentSpec, run_experiment

SPEC_DIR = Path(__file__).parent / "specs"


def main(argv=None) -> int:
    parser = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    parser.add_argument("names", nargs="*", help="spec file stems (default: all but smoke)")
    parser.add_argument("--out", default="results")
    parser.add_argument("--workers", type=int, default=1)
    args = parser.parse_args(argv)

    names = args.names or sorted(p.stem for p in SPEC_DIR.glob("*.json") if p.stem != "smoke")
    for name in names:
        path = SPEC_DIR / f"{name}.json"
        if not path.exists():
            print(f"no spec {path}", file=sys.stderr)
            return 2
        spec = ExperimentSpec.from_dict(json.loads(path.read_text()))
        spec.workers = args.workers
        start = time.perf_counter()
        try:
            result = run_experiment(spec, Path(args.out) / name)
        except MetamerError as exc:
            print(f"{name}: {exc}", file=sys.stderr)
            return exc.exit_code
        print(f"{name}: {len(result['table'])} cells in {time.perf_counter() - start:.0f}s")
        for row in result["table"]:
            keys = [k for k in row if not k.endswith(("_mean", "_std")) and k not in ("n_ok", "n_failed")]
            cs = row.get("cs_feat_mean", row.get("cs_struct_mean", row.get("test_acc_mean")))
            label = " ".join(f"{k}={row[k]}" for k in keys)
            print(f"  {label}: {cs if cs is None else round(cs, 4)}")
        if result["derived"]:
            print("  " + json.dumps(result["derived"], sort_keys=True))
    return 0


if __name__ == "__main__":
    sys.exit(main())
