"""Run the full experiment suite and print the result table.

    python scripts/run_suite.py OUT_DIR [--seeds 0,1,2]

Finished runs already in OUT_DIR are reused, so an interrupted suite picks up
where it stopped. Point MLDA_SUITE_DIR at the same directory to let the
acceptance tests read these runs instead of training their own.
"""
import argparse
import logging

from mlda.experiments import run_suite


def main():
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("out")
    ap.add_argument("--seeds", default="0,1,2")
    args = ap.parse_args()
    logging.basicConfig(level=logging.INFO, format="%(asctime)s %(name)s: %(message)s")
    seeds = tuple(int(s) for s in args.seeds.split(","))
    res = run_suite(args.out, seeds=seeds)
    print(f"{'run':<20} {'target_val':>10} {'source_val':>10} {'train_s':>8} {'eval_s':>7}")
    for r in res.rows:
        print(f"{r.name:<20} {r.target_val_map:>10.4f} {r.source_val_map:>10.4f} {r.seconds:>8.1f} {r.eval_seconds:>7.1f}")
    for s in seeds:
        so, da = res.source_only(s), res.adapted(s)
        print(f"seed {s}: drop {so.source_val_map - so.target_val_map:+.3f}  "
              f"adaptation gain {da.target_val_map - so.target_val_map:+.3f}")


if __name__ == "__main__":
    main()
