"""Run the full pipeline from a config file and print the results table.

    python3 scripts/run_experiment.py configs/simulation.cfg --set sim_users=500
"""

import argparse
import sys

from deconfrec.cli import main as cli_main


def main(argv=None):
    ap = argparse.ArgumentParser(description=__doc__,
                                 formatter_class=argparse.RawDescriptionHelpFormatter)
    ap.add_argument("config", nargs="?", default="configs/simulation.cfg")
    ap.add_argument("--set", action="append", default=[], metavar="KEY=VALUE")
    ap.add_argument("--out")
    args = ap.parse_args(argv)
    cmd = ["run", "--config", args.config]
    for kv in args.set:
        cmd += ["--set", kv]
    if args.out:
        cmd += ["--out", args.out]
    return cli_main(cmd)


if __name__ == "__main__":
    sys.exit(main())
