"""Train the full cascade on the default synthetic set and report loss and mAP.

    python scripts/run_end_to_end.py [--epochs 6] [--n-train 500] [--n-test 100]
"""
import argparse
import dataclasses
import json
import logging

from cascade3d.experiments import A4_PROFILE, run_end_to_end


def main():
    p = argparse.ArgumentParser(description=__doc__, formatter_class=argparse.RawDescriptionHelpFormatter)
    p.add_argument("--epochs", type=int, default=A4_PROFILE.epochs)
    p.add_argument("--n-train", type=int, default=A4_PROFILE.n_train)
    p.add_argument("--n-test", type=int, default=A4_PROFILE.n_test)
    p.add_argument("--seed", type=int, default=A4_PROFILE.master_seed, help="dataset master seed")
    p.add_argument("--out", default=None, help="write the JSON summary here")
    a = p.parse_args()
    logging.basicConfig(level=logging.INFO, format="%(asctime)s %(message)s")
    profile = dataclasses.replace(A4_PROFILE, epochs=a.epochs, n_train=a.n_train, n_test=a.n_test,
                                  master_seed=a.seed)
    summary = run_end_to_end(profile)
    text = json.dumps(summary, indent=1, sort_keys=True)
    print(text)
    if a.out:
        with open(a.out, "w") as fh:
            fh.write(text + "\n")


if __name__ == "__main__":
    main()
