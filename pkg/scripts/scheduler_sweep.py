"""Synchronous vs asynchronous scheduling with every record starting on disk."""

import argparse
from pathlib import Path

from chunkreuse.circuits import build_binding_model
from chunkreuse.experiments import THROUGHPUT_HEADER, throughput_sweep, write_csv
from chunkreuse.kv_store import Tier, TierConfig
from chunkreuse.pipeline import build_pipeline
from chunkreuse.synthetic import CorpusSpec, gen_synthetic_corpus


def main() -> None:
    ap = argparse.ArgumentParser(description=__doc__)
    ap.add_argument("--rates", default="10,50,100,200,400")
    ap.add_argument("--questions", type=int, default=60)
    ap.add_argument("--disk-bandwidth", type=float, default=1e8)
    ap.add_argument("--mode", default="fusionrag")
    ap.add_argument("--seed", type=int, default=0)
    ap.add_argument("--out", default="results/throughput.csv")
    args = ap.parse_args()
    chunks, qa = gen_synthetic_corpus(CorpusSpec(questions=args.questions), args.seed)
    pipe, _ = build_pipeline(chunks, build_binding_model())
    disk = pipe.with_tiers(TierConfig(cpu_capacity=0, disk_bandwidth=args.disk_bandwidth), Tier.DISK)
    rows = throughput_sweep(disk, [ex.question for ex in qa], [float(r) for r in args.rates.split(",")],
                            mode=args.mode, seed=args.seed)
    Path(args.out).parent.mkdir(parents=True, exist_ok=True)
    write_csv(rows, args.out, THROUGHPUT_HEADER)
    for row in rows:
        print(row)


if __name__ == "__main__":
    main()
