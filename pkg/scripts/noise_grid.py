"""Full robustness grid: WER per noise type and SNR for each training mode.

Trains CleanOnly, VanillaDAT and SoftFreezeDAT from scratch, then MTL and AvT
from the SoftFreezeDAT model, and scores every model on the 7 x 5 test grid
(unseen test-split noise) plus the clean test set.

    python3 scripts/noise_grid.py --out results.csv
"""
import argparse
import logging

from noisyasr.evaluate import TEST_SNRS, write_results_csv
from noisyasr.experiment import SmokeConfig, build_data, noisy_grid, train_mode
from noisyasr.model import init_params


def main():
    ap = argparse.ArgumentParser(description=__doc__, formatter_class=argparse.RawDescriptionHelpFormatter)
    ap.add_argument("--out", default="results.csv")
    ap.add_argument("--n-test", type=int, default=50)
    ap.add_argument("--dat-epochs", type=int, default=SmokeConfig.dat_epochs)
    ap.add_argument("--head-epochs", type=int, default=SmokeConfig.head_epochs)
    args = ap.parse_args()
    logging.basicConfig(level=logging.INFO, format="%(message)s")
    logging.getLogger("noisyasr.train").setLevel(logging.WARNING)

    cfg = SmokeConfig(n_test=args.n_test, dat_epochs=args.dat_epochs, head_epochs=args.head_epochs)
    data = build_data(cfg)
    init = init_params(data.model_cfg, cfg.train_seed)
    runs = [("CleanOnly", "VanillaDAT", None, cfg.dat_lr, cfg.dat_epochs, 0.0),
            ("VanillaDAT", "VanillaDAT", None, cfg.dat_lr, cfg.dat_epochs, 0.5),
            ("SoftFreezeDAT", "SoftFreezeDAT", None, cfg.dat_lr, cfg.dat_epochs, 0.5),
            ("MTL", "MTL", "SoftFreezeDAT", cfg.mtl_lr, cfg.head_epochs, 0.5),
            ("AvT", "AvT", "SoftFreezeDAT", cfg.avt_lr, cfg.head_epochs, 0.5)]
    models, grids = {}, []
    for name, mode, parent, lr, epochs, aug in runs:
        logging.info("training %s", name)
        models[name] = train_mode(data, mode, models[parent] if parent else init, lr, epochs, aug,
                                  cfg.train_seed).best
        grid = noisy_grid(models[name], data, TEST_SNRS, name, cfg.grid_seed)
        grids.append(grid)
        row = " ".join(f"{s:g}dB={grid.mean_at(s):.1f}" for s in TEST_SNRS)
        logging.info("%s clean=%.1f %s", name, grid.clean_wer, row)
    write_results_csv(grids, args.out)
    print(f"wrote {args.out}")


if __name__ == "__main__":
    main()
