import json

import numpy as np
import pandas as pd
import pytest
import yaml

from iguane.cli import main
from iguane.errors import ConfigError, ValidationError
from iguane.evaluation import EvaluationSpec, MethodSpec, evaluate
from iguane.phantom import CohortSpec, SiteSpec, make_cohort
from iguane.trainer import PredictorConfig

SHAPE = (16, 20, 16)


@pytest.fixture(scope="module")
def cohort(tmp_path_factory):
    root = tmp_path_factory.mktemp("evaluation")
    spec = CohortSpec(
        seed=3,
        shape=SHAPE,
        reference_site="ref",
        traveling_subjects=3,
        sites=[
            SiteSpec("ref", 8, ad_fraction=0.5, noise_sigma=5.0),
            SiteSpec("a", 8, ad_fraction=0.5, gamma=0.7, noise_sigma=5.0),
            SiteSpec("b", 8, ad_fraction=0.5, gamma=1.4, bias_amplitude=0.1, noise_sigma=5.0),
        ],
    )
    make_cohort(spec, root / "phantom", show_progress=False)
    code = main(
        [
            "--quiet", "preprocess",
            "--manifest", str(root / "phantom" / "manifest.csv"),
            "--out", str(root / "preproc"),
            "--dims", *map(str, SHAPE),
        ]
    )
    assert code == 0
    return root


def write_spec(root, analyses, **extra):
    d = dict(
        methods=[
            dict(name="raw", manifest="phantom/manifest.csv"),
            dict(name="preproc", manifest="preproc/manifest.csv"),
        ],
        analyses=analyses,
        reference_site="ref",
        measurements="phantom/measurements.csv",
        **extra,
    )
    path = root / "evaluation.yaml"
    with open(path, "w") as f:
        yaml.safe_dump(d, f)
    return path


def test_spec_validation():
    with pytest.raises(ConfigError):
        EvaluationSpec(methods=[])
    with pytest.raises(ConfigError, match="unique"):
        EvaluationSpec(methods=[MethodSpec("a", "x.csv"), MethodSpec("a", "y.csv")])
    with pytest.raises(ConfigError, match="unknown analyses"):
        EvaluationSpec(methods=[MethodSpec("a", "x.csv")], analyses=["fid"])


def test_spec_from_file_resolves_paths(cohort):
    spec = EvaluationSpec.from_file(write_spec(cohort, ["cohens-d"]))
    assert spec.baseline.name == "raw"
    assert spec.methods[1].manifest == str(cohort / "preproc/manifest.csv")
    assert spec.measurements == str(cohort / "phantom/measurements.csv")
    assert isinstance(spec.predictor, PredictorConfig)


def test_no_analyses(tmp_path):
    spec = EvaluationSpec(methods=[MethodSpec("a", "missing.csv")])
    assert evaluate(spec, tmp_path / "out", show_progress=False) == []
    assert (tmp_path / "out" / "run.yaml").exists()


def test_cohens_d_needs_measurements(cohort, tmp_path):
    spec = EvaluationSpec.from_file(write_spec(cohort, ["cohens-d"]))
    spec.measurements = None
    with pytest.raises(ValidationError, match="hippocampus_voxels"):
        evaluate(spec, tmp_path, show_progress=False)


def test_evaluation(cohort, tmp_path):
    analyses = [
        "ssim-traveling",
        "distance-preservation",
        "age-gm-correlation",
        "cohens-d",
        "site-classification",
    ]
    spec = EvaluationSpec.from_file(write_spec(cohort, analyses, plots=True))
    reports = evaluate(spec, tmp_path, show_progress=False)

    assert [r.analysis for r in reports] == analyses
    for analysis in analyses:
        assert (tmp_path / f"{analysis}.json").exists()
        assert (tmp_path / f"{analysis}.csv").exists()
    by_name = {r.analysis: r for r in reports}

    # ssim: one row per method, the second compared to the baseline
    rows = by_name["ssim-traveling"].rows
    assert [row["method"] for row in rows] == ["raw", "preproc"]
    assert "delta" not in rows[0] and "delta" in rows[1]
    assert rows[0]["n"] == 9  # 3 travelers on 3 pairs of sites

    rows = by_name["distance-preservation"].rows
    assert {row["method"] for row in rows} == {"preproc"}

    # ground-truth grey matter declines with age
    rows = by_name["age-gm-correlation"].rows
    overall = [row for row in rows if row["group"] == "all" and row["method"] == "raw"]
    assert overall[0]["r_truth"] < 0

    # measurements do not depend on the method
    rows = by_name["cohens-d"].rows
    assert len(rows) == 8
    d = {(row["method"], row["group"]): row["d"] for row in rows}
    for group in ("ref", "a", "b", "all"):
        assert d["raw", group] == pytest.approx(d["preproc", group])
    assert d["raw", "all"] > 0

    rows = by_name["site-classification"].rows
    assert all(row["chance"] == pytest.approx(1 / 3) for row in rows)
    assert all(0 <= row["accuracy"] <= 1 for row in rows)

    with open(tmp_path / "cohens-d.json") as f:
        saved = json.load(f)
    assert saved["config_hash"] == spec.config_hash
    assert pd.read_csv(tmp_path / "cohens-d.csv")["analysis"].eq("cohens-d").all()

    assert (tmp_path / "slices.png").exists()
    assert (tmp_path / "ssim-traveling.png").exists()
    assert (tmp_path / "age-gm-correlation.png").exists()
    assert (tmp_path / "distance-preservation.png").exists()
    with open(tmp_path / "run.yaml") as f:
        assert yaml.safe_load(f)["command"] == "evaluate"


def ad_subjects(cohort):
    df = pd.read_csv(cohort / "phantom" / "manifest.csv", dtype={"subject_id": str})
    return set(df["subject_id"][df["diagnosis"] == "AD"])


def test_cohens_d_per_method_measurements(cohort, tmp_path):
    measurements = pd.read_csv(cohort / "phantom" / "measurements.csv", dtype={"subject_id": str})
    # a segmentation that finds larger hippocampi in CN participants only
    shifted = measurements.copy()
    shifted["hippocampus_voxels"] = shifted["hippocampus_voxels"] * np.where(
        shifted["subject_id"].isin(ad_subjects(cohort)), 1.0, 1.5
    )
    shifted.to_csv(tmp_path / "measurements.csv", index=False)

    spec = EvaluationSpec.from_file(write_spec(cohort, ["cohens-d"], plots=False))
    spec.methods[1].measurements = str(tmp_path / "measurements.csv")
    (report,) = evaluate(spec, tmp_path / "out", show_progress=False)
    d = {(row["method"], row["group"]): row["d"] for row in report.rows}
    assert d["preproc", "all"] > d["raw", "all"] > 0


def test_method_measurements_from_file(cohort):
    path = write_spec(cohort, ["cohens-d"])
    with open(path) as f:
        d = yaml.safe_load(f)
    d["methods"][1]["measurements"] = "phantom/measurements.csv"
    with open(path, "w") as f:
        yaml.safe_dump(d, f)
    spec = EvaluationSpec.from_file(path)
    assert spec.methods[0].measurements is None
    assert spec.methods[1].measurements == str(cohort / "phantom/measurements.csv")


def test_predictor_train_test(cohort, tmp_path):
    code = main(
        [
            "--quiet", "normalize",
            "--manifest", str(cohort / "preproc" / "manifest.csv"),
            "--out", str(tmp_path / "ws"),
            "--method", "ws",
        ]
    )
    assert code == 0
    spec = EvaluationSpec(
        methods=[
            MethodSpec("preproc", str(cohort / "preproc/manifest.csv"), scaling="preproc"),
            MethodSpec("ws", str(tmp_path / "ws" / "manifest.csv"), scaling="ws"),
        ],
        analyses=["predictor-train-test"],
        reference_site="ref",
        predictor=PredictorConfig(n_epochs=1, batch_size=4, blocks=2, base_channels=2),
        plots=False,
    )
    (report,) = evaluate(spec, tmp_path / "out", show_progress=False)
    rows = {(row["method"], row["group"]): row for row in report.rows}
    assert set(rows) == {(m, g) for m in ("preproc", "ws") for g in ("a", "b", "all")}
    for row in rows.values():
        assert np.isfinite(row["mae"]) and row["mae"] >= 0
        assert "r2" in row
        assert 0 <= row["accuracy"] <= 1
        assert 0 <= row["auc"] <= 1
    assert rows["preproc", "all"]["n"] == 16 + 6

    # absolute age errors compared to the baseline, BH-adjusted
    assert all("p" not in rows["preproc", g] for g in ("a", "b", "all"))
    assert 0 <= rows["ws", "all"]["p"] <= rows["ws", "all"]["p_adj"] <= 1
