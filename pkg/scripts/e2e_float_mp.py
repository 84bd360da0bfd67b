"""Float pretraining then MP QAT on the 64-scene synthetic set; prints the eval table.

    python3 scripts/e2e_float_mp.py --out runs/e2e
"""
import argparse
import time
from pathlib import Path

from sparsetof.cli import _row, evaluate, format_table
from sparsetof.data import generate_dataset, load_dataset, mean_sparsity
from sparsetof.model import count_sizes
from sparsetof.train import TrainConfig, train


def main():
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--out", default="runs/e2e")
    ap.add_argument("--scenes", type=int, default=64)
    ap.add_argument("--size", type=int, default=160)
    ap.add_argument("--dots", type=float, default=110)
    ap.add_argument("--seed", type=int, default=1)
    ap.add_argument("--float-epochs", type=int, default=40)
    ap.add_argument("--mp-epochs", type=int, default=60)
    ap.add_argument("--penalty", default="ste_ceil", choices=("ste_ceil", "continuous"))
    ap.add_argument("--act-bits", type=float, default=None)
    args = ap.parse_args()

    out = Path(args.out)
    t0 = time.perf_counter()
    if not (out / "data" / "manifest.txt").is_file():
        generate_dataset(out / "data", args.scenes, args.size, args.size, args.dots, args.seed)
    ds = load_dataset(out / "data")
    print(f"mean K {mean_sparsity(ds):.4f}%, {len(ds.split('train'))} train / {len(ds.split('test'))} val scenes")

    f = train(TrainConfig(epochs=args.float_epochs), ds.split("train"), ds.split("test"), out_dir=out / "float", log=print)
    print(f"float done in {time.perf_counter() - t0:.0f} s")
    mp_cfg = TrainConfig(regime="MP", epochs=args.mp_epochs, weight_bits=4.0, act_bits=args.act_bits, penalty=args.penalty)
    mp = train(mp_cfg, ds.split("train"), ds.split("test"), init=f.net, out_dir=out / "mp", log=print)

    res = (ds.height, ds.width)
    rows = [_row("NNI", evaluate(None, ds), None, None)]
    for name, net in (("float", f.net), ("MP W4", mp.net)):
        sizes = count_sizes(net, res)
        rows.append(_row(name, evaluate(net, ds), sizes.weight_bits, sizes.activation_bits))
    table = format_table(rows)
    (out / "table.txt").write_text(table + "\n")
    print(table)
    print(f"MP average integer weight bits: {mp.history[-1]['b_w_avg']:.4f}")
    print(f"total {time.perf_counter() - t0:.0f} s")


if __name__ == "__main__":
    main()
