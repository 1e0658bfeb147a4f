"""Fit MAE(n) = a*exp(-b*n) + c to the reference DKD student MAEs and print the curve."""
import numpy as np

from ppgdistill.scaling import fit_exponential

SIZES = [1, 2, 3, 4, 5, 6, 8, 10]
DKD_MAES = [8.899, 6.772, 6.689, 6.849, 6.522, 6.291, 5.959, 5.759]


def main():
    fit = fit_exponential(SIZES, DKD_MAES)
    print(f"a={fit.a:.4f} b={fit.b:.4f} c={fit.c:.4f} rmse={fit.rmse:.4f} r2={fit.r2:.4f}")
    for n, y in zip(SIZES, DKD_MAES):
        print(f"{n:>3} observed {y:6.3f} fitted {fit.predict(n):6.3f}")
    print("extrapolated floor c =", round(fit.c, 3), "; n=12 ->", round(fit.predict(12), 3))
    grid = np.linspace(1, 12, 12)
    print("monotone decreasing:", bool(np.all(np.diff(fit.predict(grid)) < 0)))


if __name__ == "__main__":
    main()
