"""Print MAC counts for the electronic and co-designed reference networks."""

import argparse

from optikonv.macs import count_macs, format_table, mac_table, reduction
from optikonv.models import ModelSpec, build_model, reference_spec


def main():
    ap = argparse.ArgumentParser(description=__doc__)
    ap.add_argument("--width", type=float, default=1.0)
    ap.add_argument("--table", action="store_true", help="also print per-layer rows")
    args = ap.parse_args()
    print(f"{'network':<30} {'MMACs':>9} {'reduction':>10}")
    for arch in ("vgg13", "resnet18"):
        base = build_model(ModelSpec(arch, width=args.width))
        e = count_macs(base)
        variants = [("electronic", base),
                    ("codesign (stage 1)", build_model(ModelSpec(arch, "codesign", width=args.width))),
                    ("codesign (reference)", build_model(reference_spec(arch, width=args.width)))]
        for name, model in variants:
            m = count_macs(model)
            print(f"{arch + ' ' + name:<30} {m / 1e6:>9.1f} {100 * reduction(m, e):>9.1f}%")
            if args.table:
                print(format_table(mac_table(model)))


if __name__ == "__main__":
    main()
