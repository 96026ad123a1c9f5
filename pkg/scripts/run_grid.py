"""Quality, TTFT, selection histograms and deviation quantiles over the default grid."""

import argparse
import json

from chunkreuse.experiments import ExperimentGrid, run_grid
from chunkreuse.synthetic import CorpusSpec


def main() -> None:
    ap = argparse.ArgumentParser(description=__doc__)
    ap.add_argument("--out", default="results/grid")
    ap.add_argument("--questions", type=int, default=200)
    ap.add_argument("--seeds", default="0,1,2")
    ap.add_argument("--model", default="binding")
    args = ap.parse_args()
    grid = ExperimentGrid(seeds=tuple(int(s) for s in args.seeds.split(",")),
                          corpus=CorpusSpec(questions=args.questions), model=args.model)
    res = run_grid(grid, args.out)
    for row in res.quality:
        print(json.dumps({k: row[k] for k in ("mode", "ratio", "seed", "f1", "norm_f1", "ttft_ticks")}))


if __name__ == "__main__":
    main()
