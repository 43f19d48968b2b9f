# ---
# jupytext:
#   text_representation:
#     format_name: percent
# ---

# %% [markdown]
# # The command line, end to end
#
# The same pipeline is reachable through `pcrpolicy`: generate episodes, build a
# store, infer actions for a test scene, and run a small evaluation sweep. Every
# command is seeded, so rerunning this script reproduces its outputs byte for
# byte.

# %%
import csv
import json
import subprocess
import sys
import tempfile
from pathlib import Path

work = Path(tempfile.mkdtemp())


def run(*args):
    out = subprocess.run([sys.executable, "-m", "pcrpolicy.cli", *map(str, args)], capture_output=True, text=True)
    print("$ pcrpolicy", " ".join(map(str, args)), "->", out.returncode)
    return out


# %%
run("synth", "--seed", 7, "--out", work / "eps", "--n-episodes", 2)
ep = sorted((work / "eps").iterdir())[0]
run("store", "--episodes", ep, "--out", work / "store")
print(json.loads((work / "store" / "manifest.json").read_text())["entries"].keys())

# %% [markdown]
# Infer for the test scene stored with the episode. The output is JSON with a
# row-major 4x4 per stage, the two fitness scores, and the acceptance flag.

# %%
run("infer", "--store", work / "store", "--task", "place-object", "--object", ep / "test_object.ply",
    "--placement", ep / "test_placement.ply", "--out", work / "act.json", "--rng-seed", 0)
for row in json.loads((work / "act.json").read_text())["stages"]:
    print(row["stage"], round(row["s_a"], 3), round(row["s_b"], 3), row["accepted"])

# %% [markdown]
# A small sweep: three episodes, both camera modes, one noise level.

# %%
run("eval", "--seed", 11, "--n-episodes", 3, "--camera", "multi", "single", "--noise", 0.001,
    "--out", work / "eval.csv", "--summary", work / "summary.txt")
print((work / "summary.txt").read_text())
with open(work / "eval.csv") as f:
    rows = [r for r in csv.DictReader(line for line in f if not line.startswith("#"))]
print(len(rows), "rows; columns:", list(rows[0]))
