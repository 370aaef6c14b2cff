"""Evaluation analyses comparing harmonization methods on manifests of volumes.

Each method is a manifest of volumes (preprocessed, harmonized, normalized...). The
first method listed is the baseline the others are compared against.
"""

from dataclasses import dataclass, field
from itertools import combinations
from pathlib import Path
from typing import List, Optional

import numpy as np
import pandas as pd

from iguane.blocks.normalization import rescale_for_predictor
from iguane.config import config_hash, dataclass_from_dict, load_config
from iguane.console_utils import info, progress, warning
from iguane.errors import ConfigError, ValidationError
from iguane.io import Manifest, load_volume
from iguane.networks import predictor_forward
from iguane.phantom import gm_band_fraction, tissue_band
from iguane.report import EvaluationReport
from iguane.stats import (
    ClusteredSample,
    accuracy,
    brain_histogram,
    clustered_wilcoxon,
    cohens_d,
    distance_preservation,
    mean_absolute_error,
    participant_weights,
    r2_score,
    regression_slope,
    roc_auc,
    site_classification_accuracy,
    ssim,
    steiger_test,
    weighted_pearson,
)
from iguane.trainer import PredictorConfig, train_predictor
from iguane.utils import write_run_record

ANALYSES = (
    "ssim-traveling",
    "distance-preservation",
    "age-gm-correlation",
    "cohens-d",
    "predictor-train-test",
    "site-classification",
)


@dataclass
class MethodSpec:
    name: str
    manifest: str
    shift: float = 0.0
    """added to intensities before SSIM (e.g. 160 for WS, 10 for HM)"""
    scaling: str = "iguane"
    """predictor input scaling: ``preproc``, ``iguane``, ``hm`` or ``ws``"""
    measurements: Optional[str] = None
    """per-image measurements CSV of this method, by default the spec-level one"""


@dataclass
class EvaluationSpec:
    """Declarative evaluation (``iguane evaluate --config``)"""

    methods: List[MethodSpec]
    analyses: list = field(default_factory=list)
    reference_site: Optional[str] = None
    measurements: Optional[str] = None
    """CSV of per-image measurements (subject_id, site_id and measurement columns)"""
    cohens_d_column: str = "hippocampus_voxels"
    histogram_bins: int = 64
    predictor: PredictorConfig = field(default_factory=PredictorConfig)
    plots: bool = True
    seed: int = 0

    def __post_init__(self):
        if len(self.methods) == 0:
            raise ConfigError("at least one method is required")
        names = [m.name for m in self.methods]
        if len(set(names)) != len(names):
            raise ConfigError("method names must be unique")
        unknown = set(self.analyses) - set(ANALYSES)
        if unknown:
            raise ConfigError(
                f"unknown analyses {sorted(unknown)} (one of {', '.join(ANALYSES)})"
            )

    @classmethod
    def from_dict(cls, d, source="<evaluation spec>"):
        return dataclass_from_dict(cls, d, source)

    @classmethod
    def from_file(cls, path):
        spec = load_config(path, cls)
        root = Path(path).parent
        for method in spec.methods:
            method.manifest = str(root / method.manifest)
            if method.measurements is not None:
                method.measurements = str(root / method.measurements)
        if spec.measurements is not None:
            spec.measurements = str(root / spec.measurements)
        return spec

    @property
    def config_hash(self):
        return config_hash(self)

    @property
    def baseline(self) -> MethodSpec:
        return self.methods[0]


class MethodData:
    """Manifest and lazily loaded volumes of one method"""

    def __init__(self, method: MethodSpec):
        self.method = method
        self.manifest = Manifest.from_csv(method.manifest)
        self._volumes = {}

    @property
    def name(self):
        return self.method.name

    def key(self, i):
        row = self.manifest[i]
        return str(row["subject_id"]), str(row["site_id"])

    def keys(self):
        return [self.key(i) for i in range(len(self.manifest))]

    def volume(self, i):
        if i not in self._volumes:
            vol = load_volume(self.manifest.resolve(self.manifest[i]["path"]))
            vol.metadata.update(self.manifest.metadata(i))
            self._volumes[i] = vol
        return self._volumes[i]

    def volumes(self, indices=None):
        indices = range(len(self.manifest)) if indices is None else indices
        return [self.volume(i) for i in indices]

    def index(self):
        return {key: i for i, key in enumerate(self.keys())}


def _aligned(baseline: MethodData, other: MethodData):
    """Index pairs (baseline, other) of images present in both methods"""
    index = other.index()
    return [(i, index[key]) for i, key in enumerate(baseline.keys()) if key in index]


def _reference_site(spec, data: MethodData):
    if spec.reference_site is not None:
        return spec.reference_site
    sites = data.manifest.sites
    if not sites:
        raise ValidationError("manifest has no sites")
    return sites[0]


# Analyses
# --------


def ssim_traveling(spec: EvaluationSpec, methods: list) -> EvaluationReport:
    """SSIM between images of a traveling subject on every pair of sites"""
    report = EvaluationReport("ssim-traveling")
    scores = {}
    for data in methods:
        travelers = data.manifest.traveling_subjects()
        index = data.index()
        values = []
        for subject in travelers:
            sites = sorted(s for (subj, s) in index if subj == subject)
            for s1, s2 in combinations(sites, 2):
                a, b = data.volume(index[subject, s1]), data.volume(index[subject, s2])
                values.append((subject, f"{s1}|{s2}", ssim(a, b, data.method.shift)))
        scores[data.name] = values
        if not values:
            warning(f"ssim-traveling: no traveling subjects in {data.name}")

    baseline = {(s, g): v for s, g, v in scores[methods[0].name]}
    for data in methods:
        values = scores[data.name]
        if not values:
            continue
        ssims = np.array([v for _, _, v in values])
        sd = float(ssims.std(ddof=1)) if len(ssims) > 1 else 0.0
        row = dict(method=data.name, mean=float(ssims.mean()), sd=sd)
        paired = [(s, v - baseline[s, g]) for s, g, v in values if (s, g) in baseline]
        p = None
        if data is not methods[0] and paired:
            row["delta"] = float(np.mean([d for _, d in paired]))
            sample = ClusteredSample([d for _, d in paired], [s for s, _ in paired])
            nonzero = sample.differences != 0
            if nonzero.any() and len(set(sample.clusters[nonzero].tolist())) >= 2:
                p = clustered_wilcoxon(sample).pvalue
        report.add(data.name, len(ssims), p=p, **row)
    report.scores = scores
    return report.adjust()


def distance_preservation_analysis(spec: EvaluationSpec, methods: list) -> EvaluationReport:
    report = EvaluationReport("distance-preservation")
    baseline = methods[0]
    scores = {}
    for data in methods[1:]:
        pairs = _aligned(baseline, data)
        before = baseline.volumes([i for i, _ in pairs])
        after = data.volumes([j for _, j in pairs])
        groups = [baseline.key(i)[1] for i, _ in pairs]
        results = distance_preservation(before, after, groups)
        for group, result in results.items():
            report.add(group, result["n"], method=data.name, r=result["r"], icc=result["icc"])
        if results:
            scores[data.name] = tuple(
                np.concatenate([r["distances"][k] for r in results.values()]) for k in (0, 1)
            )
    report.scores = scores
    return report


def _gm_fractions(spec, data: MethodData):
    reference = _reference_site(spec, data)
    ref_idx = [i for i in range(len(data.manifest)) if data.key(i)[1] == reference]
    if not ref_idx:
        raise ValidationError(f"{data.name}: no image of the reference site {reference}")
    band = tissue_band(data.volumes(ref_idx))
    return np.array([gm_band_fraction(v, band) for v in data.volumes()])


def age_gm_correlation(spec: EvaluationSpec, methods: list) -> EvaluationReport:
    """Correlation between age and grey-matter fraction, per site and overall

    The overall correlation weights each image by 1 / (images of the participant).
    Correlations of each method are compared to the baseline's with Steiger's test.
    """
    report = EvaluationReport("age-gm-correlation")
    scores = {}
    for data in methods:
        data.manifest.require("age")

    baseline = methods[0]
    base_gm = dict(zip(baseline.keys(), _gm_fractions(spec, baseline)))

    for data in methods:
        truth = None
        if data.method.measurements or spec.measurements:
            try:
                truth = _measurements(spec, "gm_fraction", data.method)
            except ValidationError as err:
                warning(f"age-gm-correlation: no measured grey matter for {data.name} ({err})")
        keys = data.keys()
        gm = _gm_fractions(spec, data) if data is not baseline else np.array([base_gm[k] for k in keys])
        ages = data.manifest.df["age"].to_numpy(dtype=float)
        sites = np.array([s for _, s in keys])
        subjects = [s for s, _ in keys]
        scores[data.name] = (ages, gm)

        groups = [(site, sites == site) for site in sorted(set(sites))]
        groups.append(("all", np.ones(len(keys), dtype=bool)))
        for group, selection in groups:
            if selection.sum() < 4:
                warning(f"age-gm-correlation: group {group} has fewer than 4 images, skipped")
                continue
            w = participant_weights(np.array(subjects)[selection])
            x, y = ages[selection], gm[selection]
            r = weighted_pearson(x, y, w)
            row = dict(method=data.name, r=r, slope=regression_slope(x, y, w))
            p = None
            if data is not baseline:
                y0 = np.array([base_gm.get(k, np.nan) for k, s in zip(keys, selection) if s])
                if np.isfinite(y0).all():
                    r0 = weighted_pearson(x, y0, w)
                    r23 = weighted_pearson(y, y0, w)
                    n = len(set(np.array(subjects)[selection]))
                    if max(abs(r0), abs(r), abs(r23)) < 1 and n >= 4:
                        p = steiger_test(r0, r, r23, n).pvalue
            if truth is not None:
                t = np.array([truth.get(k, np.nan) for k, s in zip(keys, selection) if s])
                if np.isfinite(t).all():
                    row["r_truth"] = weighted_pearson(x, t, w)
            report.add(group, int(selection.sum()), p=p, **row)
    report.scores = scores
    return report.adjust()


def _measurements(spec, column, method: MethodSpec = None) -> dict:
    """``(subject_id, site_id) -> value`` of a measurement column, for ``method`` if it has its own file"""
    path = method.measurements if method is not None and method.measurements else spec.measurements
    if path is None:
        raise ValidationError(f"a measurements CSV with column '{column}' is required")
    df = pd.read_csv(path, dtype={"subject_id": str, "site_id": str})
    for c in ("subject_id", "site_id", column):
        if c not in df.columns:
            raise ValidationError(f"{path}: missing column '{c}'")
    return {
        (str(s), str(site)): float(v)
        for s, site, v in zip(df["subject_id"], df["site_id"], df[column])
    }


def cohens_d_analysis(spec: EvaluationSpec, methods: list) -> EvaluationReport:
    """Cohen's d of a measurement between AD and CN participants, per site and overall

    Each method reads the measurement from its own CSV when it has one (e.g. volumes
    segmented on its images), from the spec-level CSV otherwise.
    """
    column = spec.cohens_d_column
    report = EvaluationReport("cohens-d", notes=[f"measurement: {column}"])
    for data in methods:
        values = _measurements(spec, column, data.method)
        data.manifest.require("diagnosis")
        df = data.manifest.df
        keys = data.keys()
        y = np.array([values.get(k, np.nan) for k in keys])
        diagnosis = df["diagnosis"].astype(str).str.upper().to_numpy()
        sites = np.array([s for _, s in keys])
        for group in sorted(set(sites)) + ["all"]:
            selection = np.isfinite(y) & ((sites == group) if group != "all" else True)
            ad, cn = y[selection & (diagnosis == "AD")], y[selection & (diagnosis == "CN")]
            if len(ad) < 2 or len(cn) < 2:
                continue
            report.add(group, len(ad) + len(cn), method=data.name, d=cohens_d(cn, ad),
                       n_ad=len(ad), n_cn=len(cn))
    return report


def _diagnosis_labels(data: MethodData):
    """1 for AD, 0 for CN, NaN for anything else"""
    if "diagnosis" not in data.manifest.df.columns:
        return np.full(len(data.manifest), np.nan)
    diagnosis = data.manifest.df["diagnosis"].astype(str).str.upper().to_numpy()
    return np.where(diagnosis == "AD", 1.0, np.where(diagnosis == "CN", 0.0, np.nan))


def _train_classifier(spec, data, scaled, labels, train_idx):
    train_idx = [i for i in train_idx if np.isfinite(labels[i])]
    if len(set(labels[train_idx].tolist())) < 2:
        warning(f"predictor-train-test: {data.name} reference site lacks AD or CN images, no classifier")
        return None
    info(f"predictor-train-test: training the AD classifier on {len(train_idx)} images ({data.name})")
    params = train_predictor(
        [scaled[i] for i in train_idx], labels[train_idx], "classification", spec.predictor
    )
    model = params.to_module()
    return np.array(
        [predictor_forward(model, v) if np.isfinite(y) else np.nan for v, y in zip(scaled, labels)]
    )


def predictor_train_test(spec: EvaluationSpec, methods: list) -> EvaluationReport:
    """Age and AD predictors trained on the reference site, tested on every other site

    Per test site and over all of them: age MAE and r2, and the accuracy (at 0.5) and
    AUC of the AD/CN classifier when diagnoses allow one. Absolute age errors of each
    method are compared to the baseline's with the clustered Wilcoxon test (clusters are
    participants), BH-adjusted over the report.
    """
    report = EvaluationReport("predictor-train-test")
    errors = {}
    for data in methods:
        data.manifest.require("age")
        reference = _reference_site(spec, data)
        scaled = [rescale_for_predictor(v, data.method.scaling) for v in data.volumes()]
        keys = data.keys()
        ages = data.manifest.df["age"].to_numpy(dtype=float)
        train_idx = [i for i, (_, s) in enumerate(keys) if s == reference]
        info(f"predictor-train-test: training on {len(train_idx)} {reference} images ({data.name})")
        params = train_predictor(
            [scaled[i] for i in train_idx], ages[train_idx], "regression", spec.predictor
        )
        model = params.to_module()
        predictions = np.array([predictor_forward(model, v) for v in scaled])
        error = np.abs(predictions - ages)
        errors[data.name] = dict(zip(keys, error))

        labels = _diagnosis_labels(data)
        probabilities = _train_classifier(spec, data, scaled, labels, train_idx)

        sites = np.array([s for _, s in keys])
        tested = sites != reference
        groups = [(site, sites == site) for site in sorted(set(sites[tested]))]
        if len(groups) > 1:
            groups.append(("all", tested))
        for group, selection in groups:
            row = dict(method=data.name, mae=mean_absolute_error(ages[selection], predictions[selection]))
            if selection.sum() >= 2 and np.ptp(ages[selection]) > 0:
                row["r2"] = r2_score(ages[selection], predictions[selection])
            if probabilities is not None:
                labelled = selection & np.isfinite(labels)
                if labelled.any():
                    y, prob = labels[labelled], probabilities[labelled]
                    row["accuracy"] = accuracy(y, (prob >= 0.5).astype(float))
                    if len(set(y.tolist())) == 2:
                        row["auc"] = roc_auc(y, prob)
            p = None
            if data is not methods[0]:
                p = _error_comparison(errors[methods[0].name], keys, error, selection)
            report.add(group, int(selection.sum()), p=p, **row)
    return report.adjust()


def _error_comparison(baseline_errors, keys, error, selection):
    """Clustered Wilcoxon p of absolute age errors against the baseline's, or None"""
    paired = [
        (k[0], e - baseline_errors[k])
        for k, e, s in zip(keys, error, selection)
        if s and k in baseline_errors
    ]
    sample = ClusteredSample([d for _, d in paired], [s for s, _ in paired])
    nonzero = sample.differences != 0
    if not nonzero.any() or len(set(sample.clusters[nonzero].tolist())) < 2:
        return None
    return clustered_wilcoxon(sample).pvalue


def site_classification(spec: EvaluationSpec, methods: list) -> EvaluationReport:
    """Leave-one-out site classification from brain intensity histograms"""
    report = EvaluationReport("site-classification")
    for data in methods:
        volumes = data.volumes()
        brains = np.concatenate([v.data[v.mask] for v in volumes])
        value_range = tuple(np.percentile(brains, (0.5, 99.5)))
        features = [brain_histogram(v, spec.histogram_bins, value_range) for v in volumes]
        sites = [s for _, s in data.keys()]
        acc = site_classification_accuracy(features, sites)
        report.add("all", len(volumes), method=data.name, accuracy=acc, chance=1 / len(set(sites)))
    return report


RUNNERS = {
    "ssim-traveling": ssim_traveling,
    "distance-preservation": distance_preservation_analysis,
    "age-gm-correlation": age_gm_correlation,
    "cohens-d": cohens_d_analysis,
    "predictor-train-test": predictor_train_test,
    "site-classification": site_classification,
}


def evaluate(spec: EvaluationSpec, out_dir, show_progress=True) -> list:
    """Run the analyses of ``spec``, writing one JSON and one CSV report per analysis

    Returns
    -------
    list of EvaluationReport
    """
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    if len(spec.analyses) == 0:
        warning("no analyses requested")
        write_run_record(out_dir, "evaluate", spec.config_hash, spec.seed)
        return []

    methods = [MethodData(m) for m in spec.methods]
    for data in methods:
        data.manifest.require("subject_id", "site_id")

    reports = []
    for analysis in progress(show_progress, desc="evaluate", unit="analyses")(spec.analyses):
        report = RUNNERS[analysis](spec, methods)
        report.config_hash, report.seed = spec.config_hash, spec.seed
        report.save(out_dir, analysis)
        info(f"\n{report.table()}")
        reports.append(report)

    if spec.plots:
        from iguane import visualization

        visualization.plot_reports(reports, methods, spec, out_dir)

    write_run_record(out_dir, "evaluate", spec.config_hash, spec.seed)
    return reports
