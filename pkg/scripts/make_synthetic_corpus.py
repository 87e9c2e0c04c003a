#!/usr/bin/env python3
"""Write the synthetic anomaly-map corpus used by the ablation experiment.

    python3 scripts/make_synthetic_corpus.py --out runs/corpus
"""

import argparse
from dataclasses import fields

from segad import synthetic


def main():
    p = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    p.add_argument("--out", required=True)
    defaults = synthetic.SyntheticConfig()
    for f in fields(defaults):
        value = getattr(defaults, f.name)
        if isinstance(value, (int, float)) and not isinstance(value, bool):
            p.add_argument(f"--{f.name.replace('_', '-')}", type=type(value), default=value)
    p.add_argument("--with-score", action="store_true")
    args = vars(p.parse_args())
    out = args.pop("out")
    cfg = synthetic.SyntheticConfig(**args)
    manifest, segmap = synthetic.make_corpus(out, cfg)
    print(f"manifest: {manifest}\nsegmap:   {segmap}")


if __name__ == "__main__":
    main()
