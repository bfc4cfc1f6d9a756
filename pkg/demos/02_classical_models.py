"""
Four classical classifiers on HOG features
==========================================

k-nearest neighbours, a random forest, gradient boosting and a
one-vs-rest SVM, all trained on the same 8:1:1 split and scored on the
test images.
"""
import tempfile

import numpy as np

from cytoclass.dataset import CLASS_NAMES, PreprocessConfig, generate_fixture_dataset, load_planes, stratified_split
from cytoclass.hog import FeatureMatrix, extract_hog_batch
from cytoclass.knn import KnnModel, select_k
from cytoclass.metrics import EvaluationReport
from cytoclass.svm import ovr_fit
from cytoclass.trees import BoostConfig, ForestConfig, gbm_fit, rf_fit, rf_oob_accuracy

root = tempfile.mkdtemp(prefix="cytoclass-demo-")
split = stratified_split(generate_fixture_dataset(root, 30, seed=7), seed=42)
F = FeatureMatrix(extract_hog_batch(load_planes(split, PreprocessConfig())), split.labels)
train, val, test = (F.take(split.indices(s)) for s in ("train", "val", "test"))
print(f"train {train.rows}, val {val.rows}, test {test.rows} rows of {F.cols} features")

# k comes from the validation split
k = select_k(train, val)
models = {"knn": KnnModel(train, k)}

forest = rf_fit(train, ForestConfig(n_trees=50), seed=0)
print("forest out-of-bag accuracy:", round(rf_oob_accuracy(forest, train).accuracy, 3))
models["rf"] = forest
models["gbm"] = gbm_fit(train, BoostConfig(n_rounds=30))
models["svm"] = ovr_fit(train)

for name, m in models.items():
    r = EvaluationReport.from_scores(test.labels, m.predict_scores(test.values), CLASS_NAMES)
    aucs = [round(c.auc, 3) for c in r.roc_curves().values()]
    print(f"{name:4s} accuracy {r.accuracy:.3f}  one-vs-rest AUC {aucs}")

# the SVM confusion matrix, rows = true class
r = EvaluationReport.from_scores(test.labels, models["svm"].predict_scores(test.values), CLASS_NAMES)
print(np.array2string(r.confusion))
