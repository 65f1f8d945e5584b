"""Solve time along n, d and m with log-log slopes."""
import argparse

from mtclust import experiments as ex


def main():
    p = argparse.ArgumentParser(description=__doc__)
    p.add_argument("--axes", nargs="+", default=["n", "d", "m"], choices=["n", "d", "m"])
    p.add_argument("--repeats", type=int, default=1)
    args = p.parse_args()
    out = ex.scaling_suite(ex.ScalingSetup(repeats=args.repeats), axes=tuple(args.axes))
    for axis, res in out.items():
        times = ", ".join(f"{v}:{t:.2f}s" for v, t in zip(res["values"], res["seconds"]))
        print(f"{axis}: slope {res['slope']:.2f}  [{times}]")


if __name__ == "__main__":
    main()
