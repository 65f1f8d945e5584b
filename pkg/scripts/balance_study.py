"""Mean NMI of the pooled job over the balance-slack grid, per seed."""
import argparse

from mtclust import experiments as ex


def main():
    p = argparse.ArgumentParser(description=__doc__)
    p.add_argument("--seeds", type=int, default=10)
    p.add_argument("--objective", default="relationship", choices=["relationship", "feature"])
    args = p.parse_args()
    rows = ex.balance_suite(ex.GroupedSetup(seeds=tuple(range(args.seeds))),
                            objectives=(args.objective,))
    print("seed  " + "  ".join(f"l={l:<5}" for l in ex.BALANCE_GRID))
    for seed in range(args.seeds):
        vals = [r["nmi"]["mean"] for r in rows if r["seed"] == seed]
        print(f"{seed:4d}  " + "  ".join(f"{v:.3f}  " for v in vals))


if __name__ == "__main__":
    main()
