#!/usr/bin/env python3
"""Feature-ablation and ensemble-preset comparison on the synthetic corpus.

For each preset, runs ``segad bench`` (full features, per-segment max, one
segment, plus the bare-detector global max) over the given seeds and prints
mean ± std of AUROC and FPR@95TPR.

    python3 scripts/run_ablation.py --out runs/ablation --presets brf,rf,bt
"""

import argparse
import json
import time
from pathlib import Path

from segad import cli, synthetic


def main():
    p = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    p.add_argument("--out", required=True)
    p.add_argument("--corpus", help="existing corpus directory (default: generate one under --out)")
    p.add_argument("--presets", default="brf")
    p.add_argument("--seeds", default="0,1,2,3,4")
    p.add_argument("--protocol", default="high_shot")
    args = p.parse_args()

    out = Path(args.out)
    corpus = Path(args.corpus) if args.corpus else out / "corpus"
    if not (corpus / "manifest.csv").exists():
        synthetic.make_corpus(corpus, synthetic.SyntheticConfig())

    summary = {}
    for preset in args.presets.split(","):
        start = time.perf_counter()
        code = cli.main(["bench", "--manifest", str(corpus / "manifest.csv"), "--segmap", str(corpus / "segmap.pgm"),
                         "--protocol", args.protocol, "--seeds", args.seeds, "--preset", preset,
                         "--out", str(out / preset)])
        if code:
            raise SystemExit(code)
        report = json.loads((out / preset / "report.json").read_text())
        summary[preset] = {m: s["auroc"]["mean"] for m, s in report["summary"].items()}
        print(f"[{preset}] {time.perf_counter() - start:.0f}s\n")

    methods = sorted({m for s in summary.values() for m in s})
    print(f"{'mean AUROC':<16}" + "".join(f"{m:>16}" for m in methods))
    for preset, s in summary.items():
        print(f"{preset:<16}" + "".join(f"{s.get(m, float('nan')):>16.4f}" for m in methods))


if __name__ == "__main__":
    main()
