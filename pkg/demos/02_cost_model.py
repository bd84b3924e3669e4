"""The arithmetic behind early exits: what do S stochastic samples cost?

A single-exit network pays the full forward cost once per sample. A
multi-exit network with E exits gets E predictions per pass, so S samples
need only S/E passes, and the exit heads themselves are nearly free.
This demo prints the two cost formulas side by side and the resulting
reduction rate as the exit-to-backbone cost ratio (alpha) varies.
"""

from pathlib import Path

from bayonet.flops import count_flops, multi_exit_cost, reduction_rate, single_exit_cost
from bayonet.graph import load_graph
from bayonet.transform import AFTER_EACH_POOL, ExitPolicy, insert_exits

ROOT = Path(__file__).resolve().parents[1]


def main():
    base = load_graph((ROOT / "assets" / "lenet_like.json").read_text())
    multi = insert_exits(base, ExitPolicy(AFTER_EACH_POOL))
    report = count_flops(multi)
    n_exit = multi.n_exit
    print(f"network '{base.name}': backbone {report.flop_main} flops, "
          f"exit heads {report.flop_exit} flops over {n_exit} exits")
    print(f"alpha = exit/backbone = {report.alpha:.6f}\n")

    print(f"{'samples':>8} {'single-exit':>14} {'multi-exit':>12} {'reduction':>10}")
    for n_sample in (3, 6, 12, 24, 48):
        se = single_exit_cost(report.flop_main, report.flop_exit, n_sample)
        me = multi_exit_cost(report.flop_main, report.flop_exit, n_sample, n_exit)
        rr = reduction_rate(report.alpha, n_sample, n_exit)
        print(f"{n_sample:>8} {se:>14} {me:>12} {rr:>9.3f}x")

    # worked point that is easy to verify by hand:
    # alpha=0.5, 6 samples over 3 exits -> (1+0.5)/(1/6+0.5/3) = 4.5
    print(f"\nhand check: reduction_rate(0.5, 6, 3) = {reduction_rate(0.5, 6, 3)}")

    print("\nreduction rate at 12 samples as exit heads get heavier:")
    for alpha in (0.0, 0.01, 0.05, 0.1, 0.25, 0.5, 1.0):
        print(f"  alpha {alpha:>5}: {reduction_rate(alpha, 12, n_exit):6.3f}x")
    print("\ncheap exit heads (small alpha) keep the reduction close to the")
    print(f"ideal {reduction_rate(0.0, 12, n_exit):.1f}x = n_exit; heavy heads eat the savings.")


if __name__ == "__main__":
    main()
