"""Replay a known / shared-new / unique chunk workload against both cache lookups."""

import argparse
import json

from chunkreuse.experiments import STORAGE_HEADER, replay_storage, storage_rows, write_csv
from chunkreuse.synthetic import StorageWorkloadSpec, storage_workload


def main() -> None:
    ap = argparse.ArgumentParser(description=__doc__)
    ap.add_argument("--queries", type=int, default=1000)
    ap.add_argument("--seed", type=int, default=0)
    ap.add_argument("--out", default="results/storage.csv")
    args = ap.parse_args()
    contexts, known = storage_workload(StorageWorkloadSpec(queries=args.queries), args.seed)
    rep = replay_storage(contexts, known)
    write_csv(storage_rows(rep), args.out, STORAGE_HEADER)
    print(json.dumps(rep.as_dict(), indent=2, sort_keys=True))


if __name__ == "__main__":
    main()
