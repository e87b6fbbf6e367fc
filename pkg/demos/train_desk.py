"""Train SMX-ExIt on a desk preset and print the learning curve.

    python3 demos/train_desk.py permpuzzle_smx runs/permpuzzle
    python3 demos/train_desk.py gridpush_smx runs/gridpush --planner mcts

Outputs land in the given directory exactly as ``smx train`` writes them.
"""

import json
import sys
from pathlib import Path

from smx.cli import main as cli_main


def main(argv):
    if len(argv) < 2:
        print(__doc__)
        return 2
    preset, out, extra = argv[0], Path(argv[1]), argv[2:]
    rc = cli_main(["train", "--config", preset, "--out", str(out), "--export-plot", *extra])
    if rc != 0:
        return rc
    print(f"{'iter':>5} {'env steps':>10} {'search':>7} {'prior':>7}")
    for line in (out / "metrics.jsonl").read_text().splitlines():
        rec = json.loads(line)
        if rec.get("eval_search_solve_rate") is not None:
            print(f"{rec['iteration']:>5} {rec['env_steps']:>10} {rec['eval_search_solve_rate']:>7.3f} "
                  f"{rec['eval_prior_solve_rate']:>7.3f}")
    return 0


if __name__ == "__main__":
    sys.exit(main(sys.argv[1:]))
