"""Train the five smoke-test models and report WER and noise-classifier accuracy.

    python3 scripts/run_smoke.py --out smoke.json
"""
import argparse
import json
import logging
from dataclasses import fields

from noisyasr.experiment import SmokeConfig, run_smoke


def main():
    ap = argparse.ArgumentParser(description=__doc__, formatter_class=argparse.RawDescriptionHelpFormatter)
    ap.add_argument("--out", help="write the report as JSON here")
    for f in fields(SmokeConfig):
        if f.type in ("int", "float", int, float):
            ap.add_argument(f"--{f.name.replace('_', '-')}", type=int if f.type in ("int", int) else float,
                            default=f.default)
    args = ap.parse_args()
    logging.basicConfig(level=logging.INFO, format="%(message)s")
    logging.getLogger("noisyasr.train").setLevel(logging.WARNING)
    cfg = SmokeConfig(**{f.name: getattr(args, f.name) for f in fields(SmokeConfig) if hasattr(args, f.name)})
    report = run_smoke(cfg).to_dict()
    text = json.dumps(report, indent=1)
    print(text)
    if args.out:
        with open(args.out, "w") as fh:
            fh.write(text + "\n")


if __name__ == "__main__":
    main()
