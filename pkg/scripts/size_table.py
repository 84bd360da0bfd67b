"""Parameter counts and float32 sizes for (n_f, n_s) grids under both MB conventions."""
import argparse

from sparsetof.model import ModelConfig, build, count_sizes

REFERENCE = {(64, 5): 50.3}  # published MParams for the full-size network


def main():
    ap = argparse.ArgumentParser(description=__doc__)
    ap.add_argument("--grid", default="8:3,16:4,32:4,32:5,64:5")
    ap.add_argument("--resolutions", default="224x304,480x640")
    args = ap.parse_args()
    grid = [tuple(int(v) for v in g.split(":")) for g in args.grid.split(",")]
    resolutions = [tuple(int(v) for v in r.split("x")) for r in args.resolutions.split(",")]
    print("n_f, n_s, MParams, reference, " + ", ".join(f"W MB / MiB, A MB / MiB @{w}x{h}" for h, w in resolutions))
    for n_f, n_s in grid:
        net = build(ModelConfig(n_f, n_s))
        cells = []
        for res in resolutions:
            rep = count_sizes(net, res)
            cells.append(
                f"{rep.weight_mb:.2f} / {rep.weight_bits / 8 / 2**20:.2f}, "
                f"{rep.activation_mb:.2f} / {rep.activation_bits / 8 / 2**20:.2f}"
            )
        ref = REFERENCE.get((n_f, n_s))
        print(f"{n_f}, {n_s}, {net.mparams():.4f}, {ref if ref else '-'}, " + ", ".join(cells))


if __name__ == "__main__":
    main()
