"""Pre-train the toy MAE on synthetic storms and write the per-epoch loss curve."""
import argparse
import csv
import time

from cyclonekit import data, mae


def main():
    ap = argparse.ArgumentParser(description=__doc__)
    ap.add_argument("--storms", type=int, default=20)
    ap.add_argument("--epochs", type=int, default=50)
    ap.add_argument("--seed", type=int, default=0)
    ap.add_argument("--out", default="pretrain_curve.csv")
    args = ap.parse_args()

    storms = data.synth_dataset(args.storms, seed=args.seed)
    cropped = [data.crop_sample(s, data.CropConfig()) for _, ss in storms for s in ss]
    samples = data.zscore(cropped, data.fit_stats(cropped))
    t0 = time.perf_counter()
    _, history = mae.pretrain(samples, mae.MAEConfig(), mae.PretrainConfig(epochs=args.epochs, seed=args.seed),
                              progress=lambda e, loss: print(f"epoch {e + 1:3d}  loss {loss:.4f}", flush=True))
    with open(args.out, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["epoch", "loss"])
        w.writerows(enumerate(history, 1))
    print(f"{len(samples)} samples, {time.perf_counter() - t0:.0f} s, final/first = {history[-1] / history[0]:.3f}")


if __name__ == "__main__":
    main()
