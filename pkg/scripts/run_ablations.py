"""Multi-seed ablations: cascade direction (3D->2D->3D vs 3D->3D, fused vs
2D-only segmentation) and the train-time fusion head (aux vs main).

    python scripts/run_ablations.py [--seeds 0 1 2] [--epochs 6] [--n-train 300]
"""
import argparse
import dataclasses
import json
import logging

from cascade3d.experiments import ABLATION_PROFILE, ABLATION_SEEDS, run_ablations


def main():
    p = argparse.ArgumentParser(description=__doc__, formatter_class=argparse.RawDescriptionHelpFormatter)
    p.add_argument("--seeds", type=int, nargs="+", default=list(ABLATION_SEEDS))
    p.add_argument("--epochs", type=int, default=ABLATION_PROFILE.epochs)
    p.add_argument("--n-train", type=int, default=ABLATION_PROFILE.n_train)
    p.add_argument("--n-test", type=int, default=ABLATION_PROFILE.n_test)
    p.add_argument("--out", default=None)
    a = p.parse_args()
    logging.basicConfig(level=logging.INFO, format="%(asctime)s %(message)s")
    profile = dataclasses.replace(ABLATION_PROFILE, epochs=a.epochs, n_train=a.n_train, n_test=a.n_test)
    summary = run_ablations(profile, a.seeds)
    text = json.dumps(summary, indent=1, sort_keys=True)
    print(text)
    if a.out:
        with open(a.out, "w") as fh:
            fh.write(text + "\n")


if __name__ == "__main__":
    main()
