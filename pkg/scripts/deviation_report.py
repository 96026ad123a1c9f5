"""Second-layer K deviation of isolated vs fused records, and selector position bias."""

import argparse

import numpy as np

from chunkreuse.experiments import deviation_reduction, selection_bias
from chunkreuse.synthetic import CorpusSpec


def main() -> None:
    ap = argparse.ArgumentParser(description=__doc__)
    ap.add_argument("--seeds", default="0,1,2")
    ap.add_argument("--questions", type=int, default=60)
    ap.add_argument("--model", default="random")
    args = ap.parse_args()
    spec = CorpusSpec(questions=args.questions)
    for seed in (int(s) for s in args.seeds.split(",")):
        dev = deviation_reduction(spec, seed, args.model)
        bias = selection_bias(spec, seed, args.model)
        print(f"seed {seed}: deviation isolated {np.mean(dev.isolated):.4g} fused {np.mean(dev.fused):.4g} "
              f"reduction {100 * dev.reduction:.1f}% | chi2 cacheblend {bias.chi2_cacheblend:.3f} "
              f"query-guided {bias.chi2_query_guided:.3f}")


if __name__ == "__main__":
    main()
