"""
The command-line workflow
=========================

Same steps as the shell session

    cytoclass fixture --out data --per-class 40
    cytoclass split --data data --out split.csv
    cytoclass features --manifest split.csv --out features.hogf
    cytoclass train --model svm --manifest split.csv --cache features.hogf --out svm.model
    cytoclass eval --model svm.model --manifest split.csv --cache features.hogf --out report
    cytoclass predict --model svm.model --image <some test image>

driven from Python so it runs anywhere.
"""
import json
import os
import tempfile

from cytoclass.cli import run_cli
from cytoclass.dataset import SplitManifest

work = tempfile.mkdtemp(prefix="cytoclass-demo-")
os.chdir(work)

assert run_cli(["fixture", "--out", "data", "--per-class", "40"]) == 0
assert run_cli(["split", "--data", "data", "--out", "split.csv"]) == 0
assert run_cli(["features", "--manifest", "split.csv", "--out", "features.hogf"]) == 0
assert run_cli(["train", "--model", "svm", "--manifest", "split.csv", "--cache", "features.hogf",
                "--out", "svm.model"]) == 0
assert run_cli(["eval", "--model", "svm.model", "--manifest", "split.csv", "--cache", "features.hogf",
                "--out", "report"]) == 0

# what the report directory holds
print(sorted(os.listdir("report")))
print(json.dumps(json.load(open("report/metrics.json"))["per_class_auc"]))

# classify one held-out image
rel, label, _ = SplitManifest.read_csv("split.csv").subset("test")[0]
run_cli(["predict", "--model", "svm.model", "--image", rel])

# usage errors exit with 2, missing model files with 4
print("exit codes:", run_cli(["train", "--model", "rf", "--out", "x"]),
      run_cli(["predict", "--model", "nope.model", "--image", rel]))
print("outputs under", work)
