"""Synthetic multi-site phantoms with known anatomy.

A phantom brain is an ellipsoid split into concentric tissue shells (ventricles, white
matter, grey matter, outer CSF) whose grey-matter share declines linearly with age, plus
two small hippocampal ellipsoids that shrink with Alzheimer's disease. Sites differ by
tissue contrast, a smooth multiplicative bias field and noise.
"""

from dataclasses import asdict, dataclass, field
from functools import partial
from pathlib import Path
from typing import List, Optional

import multiprocess as mp
import numpy as np
import pandas as pd
import yaml
from scipy import stats
from scipy.cluster.vq import kmeans2

from iguane.config import config_hash, dataclass_from_dict, load_config, plain
from iguane.console_utils import info, progress, warning
from iguane.core import Space, Volume
from iguane.errors import ValidationError
from iguane.io.manifest import Manifest
from iguane.io.nifti import save_volume
from iguane.utils import rng_for, write_run_record

BACKGROUND, CSF, GM, WM, HIPPOCAMPUS = range(5)
TISSUES = {"csf": CSF, "gm": GM, "wm": WM, "hippocampus": HIPPOCAMPUS}
AGE_RANGE = (18.0, 80.0)
DEFAULT_SHAPE = (32, 40, 32)


@dataclass
class PhantomModel:
    """Constants of the phantom anatomy"""

    gm_intercept: float = 0.55
    """grey-matter fraction at age 0 (a)"""

    gm_slope: float = 0.0025
    """yearly decline of the grey-matter fraction (b)"""

    gm_noise: float = 0.02
    """standard deviation of the grey-matter fraction noise"""

    gm_noise_bound: float = 0.05
    """grey-matter fraction noise is clipped to +/- this bound"""

    ventricle_fraction: float = 0.03
    csf_fraction: float = 0.10

    hippocampus_intercept: float = 0.012
    hippocampus_slope: float = 5e-5
    """yearly decline of the hippocampal fraction of the brain"""

    hippocampus_noise: float = 0.03
    """relative noise on the hippocampal voxel count"""

    atrophy: float = 0.75
    """AD to CN hippocampal voxel count ratio (rho)"""

    brain_extent: float = 0.42
    """brain ellipsoid semi-axes as a fraction of the grid"""

    male_scale: float = 1.06

    def __post_init__(self):
        if not self.gm_slope > 0:
            raise ValidationError("gm_slope must be positive")
        if not 0 < self.atrophy < 1:
            raise ValidationError("atrophy must be in (0, 1)")
        oldest = self.gm_fraction(AGE_RANGE[1], -self.gm_noise_bound)
        youngest = self.gm_fraction(AGE_RANGE[0], self.gm_noise_bound)
        if not oldest > 0:
            raise ValidationError("grey-matter fraction must stay positive up to age 80")
        if min(self.ventricle_fraction, self.csf_fraction) < 0:
            raise ValidationError("ventricle and CSF fractions must be non-negative")
        if self.ventricle_fraction + self.csf_fraction + youngest >= 1:
            raise ValidationError(
                "ventricle, CSF and grey-matter fractions leave no white matter "
                f"({self.ventricle_fraction} + {self.csf_fraction} + {youngest:.3f} >= 1)"
            )

    def gm_fraction(self, age, eps=0.0):
        return self.gm_intercept - self.gm_slope * age + eps

    def hippocampus_fraction(self, age):
        return self.hippocampus_intercept - self.hippocampus_slope * age

    @property
    def gm_noise_variance(self):
        bound = self.gm_noise_bound / self.gm_noise
        return float(stats.truncnorm(-bound, bound, scale=self.gm_noise).var())

    def expected_age_gm_correlation(self, age_low=AGE_RANGE[0], age_high=AGE_RANGE[1]):
        """Pearson r between age and GM fraction for ages uniform in [age_low, age_high]"""
        age_var = (age_high - age_low) ** 2 / 12
        slope_var = self.gm_slope**2 * age_var
        return float(-np.sqrt(slope_var) / np.sqrt(slope_var + self.gm_noise_variance))

    def expected_hippocampus_cohens_d(
        self, age_low=AGE_RANGE[0], age_high=AGE_RANGE[1]
    ):
        """Cohen's d of CN vs AD hippocampal voxel counts for uniform ages (fixed sex)"""
        age_mean = (age_low + age_high) / 2
        age_var = (age_high - age_low) ** 2 / 12
        mean = self.hippocampus_fraction(age_mean)
        second_moment = (self.hippocampus_slope**2 * age_var + mean**2) * (
            1 + self.hippocampus_noise**2
        )
        sd = np.sqrt(second_moment - mean**2)
        pooled = sd * np.sqrt((1 + self.atrophy**2) / 2)
        return float((1 - self.atrophy) * mean / pooled)


@dataclass
class Anatomy:
    """Ground-truth tissue labels of one phantom subject"""

    labels: np.ndarray
    """tissue label grid (0 background, 1 CSF, 2 GM, 3 WM, 4 hippocampus)"""

    age: float
    diagnosis: str = "CN"
    subject_id: str = "subject"
    sex: str = "F"
    gm_fraction: float = None
    hippocampus_voxels: int = None

    @property
    def mask(self):
        return self.labels != BACKGROUND

    @property
    def brain_voxels(self):
        return int(self.mask.sum())

    def count(self, tissue):
        return int((self.labels == TISSUES.get(tissue, tissue)).sum())


@dataclass
class SiteEffect:
    """Intensity transform of one acquisition site

    Parameters
    ----------
    site_id : str
    gamma : float
        contrast exponent applied to normalized intensities, in [0.5, 2]
    tissue_means : dict
        mean intensity per tissue (``csf``, ``gm``, ``wm``, optional ``hippocampus``),
        with csf < gm < wm
    bias_amplitude : float
        strength of the smooth multiplicative field, in [0, 0.5]
    noise_sigma : float
        standard deviation of the additive Gaussian noise
    """

    site_id: str = "site"
    gamma: float = 1.0
    tissue_means: dict = field(
        default_factory=lambda: {"csf": 250.0, "gm": 550.0, "wm": 850.0}
    )
    bias_amplitude: float = 0.0
    noise_sigma: float = 0.0

    def __post_init__(self):
        if not 0.5 <= self.gamma <= 2.0:
            raise ValidationError(f"site {self.site_id}: gamma must be in [0.5, 2]")
        means = self.tissue_means
        if any(k not in means for k in ("csf", "gm", "wm")):
            raise ValidationError(
                f"site {self.site_id}: tissue_means needs csf, gm and wm entries"
            )
        if not 0 < means["csf"] < means["gm"] < means["wm"]:
            raise ValidationError(
                f"site {self.site_id}: tissue means must satisfy 0 < csf < gm < wm"
            )
        if not 0 <= self.bias_amplitude <= 0.5:
            raise ValidationError(
                f"site {self.site_id}: bias_amplitude must be in [0, 0.5]"
            )
        if self.noise_sigma < 0:
            raise ValidationError(f"site {self.site_id}: noise_sigma must be >= 0")

    @property
    def means(self):
        m = self.tissue_means
        return np.array(
            [0.0, m["csf"], m["gm"], m["wm"], m.get("hippocampus", m["gm"])]
        )


# Anatomy
# -------


def _centered_coords(shape):
    center = (np.array(shape) - 1) / 2
    return [
        (np.arange(n) - c)[tuple(slice(None) if a == i else None for a in range(3))]
        for i, (n, c) in enumerate(zip(shape, center))
    ]


def _ellipsoid_distance(coords, center, semi_axes):
    return np.sqrt(
        sum(((x - c) / s) ** 2 for x, c, s in zip(coords, center, semi_axes))
    )


def _cosine_field(rng, shape, modes=3):
    """Sum of low-order separable cosine modes on [-1, 1]^3, bounded by 1"""
    axes = [np.linspace(-1, 1, n) for n in shape]
    total = np.zeros(shape)
    for _ in range(modes):
        frequencies = rng.integers(1, 3, size=3)
        phases = rng.uniform(0, 2 * np.pi, size=3)
        weight = rng.uniform(-1, 1)
        separable = [
            np.cos(np.pi * f * x / 2 + p) for f, x, p in zip(frequencies, axes, phases)
        ]
        total += weight * np.einsum("i,j,k->ijk", *separable)
    return total / modes


def generate_anatomy(
    age,
    diagnosis="CN",
    seed=0,
    subject_id="subject",
    sex="F",
    shape=DEFAULT_SHAPE,
    model: PhantomModel = None,
) -> Anatomy:
    """Generate the tissue labels of a phantom subject

    The random stream depends on ``(seed, subject_id)`` only, so that a CN and an AD
    anatomy generated with the same inputs differ by hippocampal atrophy alone.

    Parameters
    ----------
    age : float
        age in years, within [18, 80]
    diagnosis : str, optional
        ``CN`` or ``AD``, by default "CN"
    seed : int, optional
        global seed, by default 0
    subject_id : str, optional
        subject identifier, by default "subject"
    sex : str, optional
        ``F`` or ``M`` (brain scaled by ``model.male_scale``), by default "F"
    shape : tuple, optional
        grid dimensions, by default (32, 40, 32)
    model : PhantomModel, optional
        anatomy constants, by default PhantomModel()

    Returns
    -------
    Anatomy
    """
    model = model or PhantomModel()
    if not AGE_RANGE[0] <= age <= AGE_RANGE[1]:
        raise ValidationError(f"age {age} outside [18, 80]")
    if diagnosis not in ("CN", "AD"):
        raise ValidationError(f"diagnosis must be CN or AD, got {diagnosis}")
    if sex not in ("F", "M"):
        raise ValidationError(f"sex must be F or M, got {sex}")

    rng = rng_for(seed, subject_id)
    eps_gm = float(
        np.clip(
            rng.normal(0, model.gm_noise), -model.gm_noise_bound, model.gm_noise_bound
        )
    )
    eps_h = float(rng.normal(0, model.hippocampus_noise))
    perturbation = _cosine_field(rng, shape)

    shape = tuple(int(n) for n in shape)
    coords = _centered_coords(shape)
    scale = model.male_scale if sex == "M" else 1.0
    semi_axes = np.array(shape) * model.brain_extent * scale
    radius = _ellipsoid_distance(coords, (0, 0, 0), semi_axes)
    brain = radius <= 1.0
    n_brain = int(brain.sum())

    # tissue shells by rank of a perturbed radius: exact voxel counts
    perturbed = (radius * (1 + 0.04 * perturbation))[brain]
    order = np.argsort(perturbed, kind="stable")
    gm_fraction = model.gm_fraction(age, eps_gm)
    n_ventricles = int(round(model.ventricle_fraction * n_brain))
    n_csf = int(round(model.csf_fraction * n_brain))
    n_gm = int(round(gm_fraction * n_brain))
    n_wm = n_brain - n_ventricles - n_csf - n_gm
    if n_wm <= 0 or n_gm < 0:
        raise ValidationError(
            f"a {shape} grid leaves no white matter ({n_brain} brain voxels, "
            f"{n_ventricles} ventricle, {n_csf} CSF, {n_gm} grey matter)"
        )

    shell = np.empty(n_brain, dtype=np.uint8)
    bounds = np.cumsum([0, n_ventricles, n_wm, n_gm, n_csf])
    for label, lo, hi in zip((CSF, WM, GM, CSF), bounds[:-1], bounds[1:]):
        shell[order[lo:hi]] = label
    labels = np.zeros(shape, dtype=np.uint8)
    labels[brain] = shell

    # hippocampi carved from white matter, closest voxels to their centers first
    h_semi_axes = np.array(shape) * np.array([0.09, 0.13, 0.09]) * scale
    offset = 0.2 * shape[0] * scale
    distance = np.minimum(
        _ellipsoid_distance(coords, (-offset, 0, 0), h_semi_axes),
        _ellipsoid_distance(coords, (offset, 0, 0), h_semi_axes),
    )
    candidates = np.flatnonzero(((labels == WM) & (distance <= 1.0)).ravel())
    n_hippocampus = int(
        round(n_brain * model.hippocampus_fraction(age) * (1 + eps_h))
    )
    if diagnosis == "AD":
        n_hippocampus = int(round(model.atrophy * n_hippocampus))
    if n_hippocampus > len(candidates):
        warning(
            f"{subject_id}: {n_hippocampus} hippocampal voxels requested, "
            f"only {len(candidates)} available"
        )
        n_hippocampus = len(candidates)
    chosen = candidates[
        np.argsort(distance.ravel()[candidates], kind="stable")[:n_hippocampus]
    ]
    labels.ravel()[chosen] = HIPPOCAMPUS

    return Anatomy(
        labels=labels,
        age=float(age),
        diagnosis=diagnosis,
        subject_id=str(subject_id),
        sex=sex,
        gm_fraction=n_gm / n_brain,
        hippocampus_voxels=int(n_hippocampus),
    )


# Rendering
# ---------


def render(anatomy: Anatomy, effect: SiteEffect, seed=0) -> Volume:
    """Image an anatomy as acquired on a site

    Tissue means are assigned, normalized intensities raised to ``gamma``, multiplied by
    a smooth bias field (fixed per site and seed) and corrupted by Gaussian noise
    inside the brain. The background stays at 0.
    """
    means = effect.means
    top = means.max()
    data = top * (means[anatomy.labels] / top) ** effect.gamma

    mask = anatomy.mask
    if effect.bias_amplitude > 0:
        bias = _cosine_field(rng_for(seed, f"bias:{effect.site_id}"), data.shape)
        data = data * (1 + effect.bias_amplitude * bias)
    if effect.noise_sigma > 0:
        rng = rng_for(seed, f"noise:{effect.site_id}:{anatomy.subject_id}")
        data = data + mask * rng.normal(0, effect.noise_sigma, size=data.shape)
    data[~mask] = 0.0

    return Volume(
        data=data,
        mask=mask,
        space=Space.RAW,
        metadata=dict(
            subject_id=anatomy.subject_id,
            site_id=effect.site_id,
            age=anatomy.age,
            sex=anatomy.sex,
            diagnosis=anatomy.diagnosis,
        ),
    )


def tissue_band(volumes, anatomies=None):
    """Grey-matter intensity band (low, high) of a set of volumes

    With anatomies, thresholds are midpoints between the median intensities of
    CSF/GM and GM/WM; otherwise a 3-class k-means on brain intensities is used.
    """
    brains = np.concatenate([v.brain for v in volumes])
    if anatomies is not None:
        labels = np.concatenate([a.labels[a.mask] for a in anatomies])
        centers = [np.median(brains[labels == t]) for t in (CSF, GM, WM)]
    else:
        init = np.percentile(brains, [10, 50, 90]).reshape(-1, 1)
        centers, _ = kmeans2(brains.reshape(-1, 1), init, minit="matrix", iter=20)
        centers = np.sort(centers.ravel())
    return float((centers[0] + centers[1]) / 2), float((centers[1] + centers[2]) / 2)


def gm_band_fraction(vol: Volume, band) -> float:
    """Fraction of brain voxels whose intensity falls in the grey-matter ``band``"""
    brain = vol.brain
    if brain.size == 0:
        raise ValidationError("brain mask is empty")
    lo, hi = band
    return float(np.mean((brain >= lo) & (brain < hi)))


# Cohorts
# -------


@dataclass
class SiteSpec:
    site_id: str
    n_subjects: int = 20
    age_range: tuple = AGE_RANGE
    ad_fraction: float = 0.0
    male_fraction: float = 0.5
    gamma: float = 1.0
    tissue_means: dict = field(
        default_factory=lambda: {"csf": 250.0, "gm": 550.0, "wm": 850.0}
    )
    bias_amplitude: float = 0.0
    noise_sigma: float = 0.0

    def __post_init__(self):
        self.age_range = tuple(float(a) for a in self.age_range)
        lo, hi = self.age_range
        if not AGE_RANGE[0] <= lo <= hi <= AGE_RANGE[1]:
            raise ValidationError(
                f"site {self.site_id}: age_range must lie within [18, 80]"
            )
        if self.n_subjects < 0:
            raise ValidationError(f"site {self.site_id}: n_subjects must be >= 0")
        self.effect  # validates the intensity parameters

    @property
    def effect(self) -> SiteEffect:
        return SiteEffect(
            site_id=self.site_id,
            gamma=self.gamma,
            tissue_means=dict(self.tissue_means),
            bias_amplitude=self.bias_amplitude,
            noise_sigma=self.noise_sigma,
        )


@dataclass
class CohortSpec:
    """Declarative description of a phantom cohort (``iguane phantom --config``)"""

    sites: List[SiteSpec]
    seed: int = 0
    shape: tuple = DEFAULT_SHAPE
    reference_site: Optional[str] = None
    traveling_subjects: int = 0
    traveling_sites: Optional[list] = None
    traveling_age_range: tuple = AGE_RANGE
    model: PhantomModel = field(default_factory=PhantomModel)

    def __post_init__(self):
        self.shape = tuple(int(n) for n in self.shape)
        if len(self.shape) != 3:
            raise ValidationError("shape must hold 3 integers")
        ids = [s.site_id for s in self.sites]
        if len(set(ids)) != len(ids):
            raise ValidationError("site ids must be unique")
        if self.reference_site is None and ids:
            self.reference_site = ids[0]
        if self.reference_site not in ids:
            raise ValidationError(f"reference_site '{self.reference_site}' is not a site")
        if self.traveling_sites is None:
            self.traveling_sites = list(ids)
        unknown = set(self.traveling_sites) - set(ids)
        if unknown:
            raise ValidationError(f"unknown traveling site(s) {sorted(unknown)}")

    @classmethod
    def from_dict(cls, d, source="<cohort spec>"):
        return dataclass_from_dict(cls, d, source)

    @classmethod
    def from_file(cls, path):
        return load_config(path, cls)

    @property
    def config_hash(self):
        return config_hash(self)

    def site(self, site_id) -> SiteSpec:
        return {s.site_id: s for s in self.sites}[site_id]


def default_cohort_spec(seed=0, shape=DEFAULT_SHAPE) -> CohortSpec:
    """Desk cohort: 1 reference and 3 source sites, 5 traveling subjects"""
    return CohortSpec(
        seed=seed,
        shape=shape,
        reference_site="ref",
        traveling_subjects=5,
        sites=[
            SiteSpec(
                "ref", 40, (18, 80), bias_amplitude=0.05, noise_sigma=10.0,
                tissue_means={"csf": 250.0, "gm": 550.0, "wm": 850.0},
            ),
            SiteSpec(
                "siteA", 30, (18, 50), gamma=0.7, bias_amplitude=0.2, noise_sigma=15.0,
                tissue_means={"csf": 320.0, "gm": 600.0, "wm": 800.0},
            ),
            SiteSpec(
                "siteB", 30, (40, 80), gamma=1.4, bias_amplitude=0.15, noise_sigma=8.0,
                tissue_means={"csf": 180.0, "gm": 480.0, "wm": 900.0},
            ),
            SiteSpec(
                "siteC", 30, (55, 80), ad_fraction=0.2, gamma=1.15,
                bias_amplitude=0.1, noise_sigma=12.0,
                tissue_means={"csf": 350.0, "gm": 620.0, "wm": 880.0},
            ),
        ],
    )


def _demographics(spec: CohortSpec):
    """One entry per image: (subject_id, site_id, age, sex, diagnosis)"""
    entries = []
    for site in spec.sites:
        rng = rng_for(spec.seed, f"demographics:{site.site_id}")
        ages = np.round(rng.uniform(*site.age_range, size=site.n_subjects), 1)
        males = rng.uniform(size=site.n_subjects) < site.male_fraction
        n_ad = int(round(site.ad_fraction * site.n_subjects))
        ad = np.zeros(site.n_subjects, dtype=bool)
        ad[rng.permutation(site.n_subjects)[:n_ad]] = True
        for k in range(site.n_subjects):
            entries.append(
                (
                    f"{site.site_id}-{k:03d}",
                    site.site_id,
                    float(ages[k]),
                    "M" if males[k] else "F",
                    "AD" if ad[k] else "CN",
                )
            )

    rng = rng_for(spec.seed, "demographics:traveling")
    for k in range(spec.traveling_subjects):
        age = float(np.round(rng.uniform(*spec.traveling_age_range), 1))
        sex = "M" if rng.uniform() < 0.5 else "F"
        for site_id in spec.traveling_sites:
            entries.append((f"T{k:02d}", site_id, age, sex, "CN"))
    return entries


def _make_image(entry, spec=None, out_dir=None):
    subject_id, site_id, age, sex, diagnosis = entry
    anatomy = generate_anatomy(
        age, diagnosis, spec.seed, subject_id, sex, spec.shape, spec.model
    )
    volume = render(anatomy, spec.site(site_id).effect, spec.seed)
    relative = Path(site_id) / f"{subject_id}.nii.gz"
    save_volume(
        volume, Path(out_dir) / relative, dict(cfg=spec.config_hash, seed=spec.seed)
    )
    row = dict(
        path=relative.as_posix(),
        subject_id=subject_id,
        site_id=site_id,
        age=age,
        sex=sex,
        diagnosis=diagnosis,
    )
    truth = dict(
        subject_id=subject_id,
        site_id=site_id,
        gm_fraction=anatomy.gm_fraction,
        hippocampus_voxels=anatomy.hippocampus_voxels,
        brain_voxels=anatomy.brain_voxels,
    )
    return row, truth


def make_cohort(spec: CohortSpec, out_dir, workers=1, show_progress=True) -> Manifest:
    """Render a cohort to ``out_dir``

    Writes ``{site}/{subject}.nii.gz`` (with mask sidecars), ``manifest.csv``,
    ground-truth ``measurements.csv`` and ``run.yaml``. Traveling subjects share the
    same anatomy on every listed site.

    Parameters
    ----------
    spec : CohortSpec
    out_dir : str or Path
    workers : int, optional
        number of worker processes, by default 1

    Returns
    -------
    Manifest
    """
    out_dir = Path(out_dir)
    try:
        out_dir.mkdir(parents=True, exist_ok=True)
    except OSError as err:
        raise OSError(f"cannot write to {out_dir}: {err}") from err

    entries = _demographics(spec)
    info(f"rendering {len(entries)} phantom volumes in {out_dir}")

    job = partial(_make_image, spec=spec, out_dir=out_dir)
    bar = progress(show_progress, desc="phantom", unit="volumes", total=len(entries))
    if workers and workers > 1:
        with mp.Pool(processes=workers) as pool:
            results = list(bar(pool.imap(job, entries)))
    else:
        results = [job(entry) for entry in bar(entries)]

    manifest = Manifest.from_rows([r for r, _ in results], root=out_dir)
    manifest.to_csv(out_dir / "manifest.csv")
    pd.DataFrame([t for _, t in results]).to_csv(
        out_dir / "measurements.csv", index=False
    )
    with open(out_dir / "cohort.yaml", "w") as f:
        yaml.safe_dump(plain(asdict(spec)), f, sort_keys=False)
    write_run_record(out_dir, "phantom", spec.config_hash, spec.seed)
    return manifest


def example_volume(seed=0, age=45.0, shape=DEFAULT_SHAPE) -> Volume:
    """A rendered phantom from a reference-like site (mask included)"""
    anatomy = generate_anatomy(age, "CN", seed, "example", "F", shape)
    effect = SiteEffect("example", bias_amplitude=0.05, noise_sigma=10.0)
    return render(anatomy, effect, seed)
