"""End-to-end use of the lpfeedback command line tool.

A JSON configuration describes the system and the atlas grid; the tool
writes the atlas as JSON lines and answers queries from CSV point files.
"""

# %%
import json
import subprocess
import sys
import tempfile
from pathlib import Path

work = Path(tempfile.mkdtemp())
config = {
    "system": {"n": 1, "m": 1, "f": ["0"], "g": [["1"]], "epsilon": "x1^2", "Q": [["1"]]},
    "local": {"delta_candidates": [0.04]},
    "atlas": {"tau_max": 2.6, "n_tau": 201},
    "simulate": {"x0": [1.5, -1.0]},
}
(work / "run.json").write_text(json.dumps(config, indent=1))
(work / "points.csv").write_text("x1\n0.4\n-1.2\n0.1\n")


def cli(*args):
    out = subprocess.run([sys.executable, "-m", "lpfeedback.cli", *args], capture_output=True, text=True, cwd=work)
    print(f"$ lpfeedback {' '.join(args)}   (exit {out.returncode})")
    print(out.stdout.strip())
    return out.returncode


# %%
cli("synthesize", "--config", "run.json", "--out", "atlas.jsonl")
cli("eval", "--atlas", "atlas.jsonl", "--points", "points.csv")
cli("feedback", "--atlas", "atlas.jsonl", "--points", "points.csv")

# %%
cli("simulate", "--atlas", "atlas.jsonl", "--config", "run.json", "--out", "runs")
print((work / "runs" / "summary.csv").read_text())

# %%
# check exits with status 5 when a hard invariant fails
cli("check", "--atlas", "atlas.jsonl", "--out", "report.json")
lines = (work / "atlas.jsonl").read_text().splitlines()
rec = json.loads(lines[58])
rec["S"] *= 1.01
lines[58] = json.dumps(rec)
(work / "bad.jsonl").write_text("\n".join(lines) + "\n")
cli("check", "--atlas", "bad.jsonl", "--out", "bad_report.json")
