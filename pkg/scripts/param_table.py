"""Built ResNet parameter counts next to the reference counts for each sweep size."""
from ppgdistill.models import param_table


def main():
    print(f"{'blocks':>6} {'ours':>8} {'reference':>9} {'delta':>8} {'ratio':>6}")
    for r in param_table():
        print(f"{r['blocks']:>6} {r['params']:>8} {r['reference_params']:>9} {r['delta']:>8} {r['ratio']:>6.3f}")


if __name__ == "__main__":
    main()
