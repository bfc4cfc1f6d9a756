import os

import numpy as np
import pytest
from hypothesis import HealthCheck, settings

from cytoclass.dataset import PreprocessConfig, generate_fixture_dataset, load_planes, stratified_split
from cytoclass.hog import FeatureMatrix, extract_hog_batch

settings.register_profile("ci", deadline=None, suppress_health_check=[HealthCheck.too_slow])
settings.load_profile(os.environ.get("HYPOTHESIS_PROFILE", "ci"))

SIPAKMED = os.environ.get("CYTOCLASS_SIPAKMED")


@pytest.fixture(scope="session")
def fixture_split(tmp_path_factory):
    """Small synthetic dataset (20 per class) with its seed-42 split."""
    root = tmp_path_factory.mktemp("fixture20")
    m = generate_fixture_dataset(root, 20, seed=5)
    return stratified_split(m, 42)


@pytest.fixture(scope="session")
def fixture_features(fixture_split):
    planes = load_planes(fixture_split, PreprocessConfig())
    return FeatureMatrix(extract_hog_batch(planes), fixture_split.labels)


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


def run_pipeline(base, per_class=20, threads=1, models=("knn", "rf", "gbm", "svm"), train_flags=None, data=None):
    """fixture -> split -> features -> train/eval per model via the CLI; returns the paths it wrote.

    With ``data`` given, the fixture step is skipped and that dataset is used.
    """
    from cytoclass.cli import run_cli

    base = os.fspath(base)
    manifest, cache = f"{base}/split.csv", f"{base}/features.hogf"
    t = ["--threads", str(threads)]
    if data is None:
        data = f"{base}/data"
        assert run_cli(["fixture", "--out", data, "--per-class", str(per_class)] + t) == 0
    assert run_cli(["split", "--data", data, "--out", manifest] + t) == 0
    assert run_cli(["features", "--manifest", manifest, "--out", cache] + t) == 0
    out = {"manifest": manifest, "cache": cache}
    for m in models:
        model = f"{base}/{m}.model"
        flags = (train_flags or {}).get(m, [])
        src = [] if m == "resnet" else ["--cache", cache]
        assert run_cli(["train", "--model", m, "--manifest", manifest, "--out", model] + src + flags + t) == 0
        report = f"{base}/report_{m}"
        assert run_cli(["eval", "--model", model, "--manifest", manifest, "--out", report] + src + t) == 0
        out[m] = {"model": model, "blob": model + ".mdlb", "report": report}
    return out


ACCEPTANCE = []


@pytest.fixture
def criterion(request):
    """Record one pass/fail line per acceptance criterion; printed in the terminal summary."""
    def record(label, ok, detail=""):
        ACCEPTANCE.append(f"{'PASS' if ok else 'FAIL'}  {label}  {detail}".rstrip())
        assert ok, f"{label}: {detail}"
    return record


def pytest_terminal_summary(terminalreporter):
    skipped = [r for r in terminalreporter.stats.get("skipped", []) if "test_acceptance" in r.nodeid]
    if ACCEPTANCE or skipped:
        terminalreporter.section("acceptance criteria")
        for line in ACCEPTANCE:
            terminalreporter.write_line(line)
        for r in skipped:
            terminalreporter.write_line(f"SKIP  {r.nodeid.split('::')[-1]}  {r.longrepr[-1]}")
