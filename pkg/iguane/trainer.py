"""Many-to-one adversarial training of the harmonization generators.

One forward generator maps every source site to the reference site; one backward
generator per source site maps reference images back. Each training step on a source
site updates its forward discriminator, its backward discriminator, then the two
generators jointly (adversarial, cycle and identity losses).
"""

import json
import queue
import threading
from dataclasses import asdict, dataclass, field
from enum import Enum
from pathlib import Path
from typing import Optional

import numpy as np
import scipy.ndimage as ndi
import torch
import torch.nn.functional as F
import yaml

from iguane.blocks.preprocessing import neutralize_background
from iguane.config import config_hash, dataclass_from_dict, load_config, plain
from iguane.console_utils import info, progress, warning
from iguane.core import Space, Volume
from iguane.errors import (
    ConfigError,
    DataError,
    ShapeError,
    SpaceError,
    TrainingDivergedError,
    ValidationError,
)
from iguane.networks import (
    DiscriminatorSpec,
    GeneratorSpec,
    ParameterSet,
    PredictorSpec,
    build,
    generator_forward,
    get_device,
    predictor_forward,
)
from iguane.sampler import compute_sampling_weights, default_bin_edges, uniform_plan
from iguane.utils import rng_for

SHARED_DISCRIMINATOR = "shared"
PLANES = ((0, 1), (0, 2), (1, 2))


class Ablation(str, Enum):
    NONE = "none"
    SINGLE_FWD_DISC = "single_fwd_disc"
    SINGLE_FWD_DISC_UNIFORM_SAMPLING = "single_fwd_disc_uniform_sampling"


# Configs
# -------


@dataclass
class PredictorConfig:
    """Training recipe of the validation (and evaluation) predictors"""

    n_epochs: int = 400
    batch_size: int = 16
    lr_start: float = 1e-3
    lr_end: float = 1e-4
    blocks: int = 5
    base_channels: int = 8
    dense: tuple = ()
    dropout: float = 0.0
    augmentation: bool = True
    seed: int = 0

    def __post_init__(self):
        self.dense = tuple(self.dense)
        if self.n_epochs < 1 or self.batch_size < 1:
            raise ConfigError("predictor n_epochs and batch_size must be positive")

    def spec(self, task, target_offset=0.0, target_scale=1.0) -> PredictorSpec:
        return PredictorSpec(
            task=task,
            blocks=self.blocks,
            base_channels=self.base_channels,
            dense=self.dense,
            dropout=self.dropout,
            target_offset=float(target_offset),
            target_scale=float(target_scale),
        )


@dataclass
class TrainingConfig:
    """Declarative training configuration (``iguane train --config``)"""

    n_epochs: int = 100
    steps_per_epoch: int = 200
    gen_batch: int = 1
    disc_batch: int = 2
    lr_start: float = 2e-4
    lr_end: float = 2e-5
    betas: tuple = (0.5, 0.999)
    lambda_cyc: float = 30.0
    lambda_id: Optional[float] = None
    """identity weight, always ``lambda_cyc / 2`` (left unset or given consistently)"""
    validation_every: int = 5
    """epochs between validations, 0 disables validation"""
    validation_weights: tuple = (0.75, 0.25)
    """weights of the age R2 and sex accuracy in the validation score"""
    holdout_fraction: float = 0.1
    """fraction of each source site held out for validation"""
    ablation: str = "none"
    augmentation: bool = True
    translation: int = 5
    rotation: float = 10.0
    rotation_probability: float = 0.5
    bin_width: float = 5.0
    reference_site: Optional[str] = None
    seed: int = 0
    mixed_precision: bool = False
    prefetch: int = 0
    """images buffered per site stream by a background thread, 0 draws inline"""
    device: Optional[str] = None
    generator: GeneratorSpec = field(default_factory=GeneratorSpec)
    discriminator: DiscriminatorSpec = field(default_factory=DiscriminatorSpec)
    predictor: PredictorConfig = field(default_factory=PredictorConfig)

    def __post_init__(self):
        self.betas = tuple(float(b) for b in self.betas)
        self.validation_weights = tuple(float(w) for w in self.validation_weights)
        try:
            self.ablation = Ablation(self.ablation).value
        except ValueError:
            raise ConfigError(
                f"unknown ablation '{self.ablation}' "
                f"(one of {', '.join(a.value for a in Ablation)})"
            )
        if self.lambda_cyc < 0:
            raise ConfigError("lambda_cyc must be non-negative")
        if self.lambda_id is None:
            self.lambda_id = self.lambda_cyc / 2
        elif not np.isclose(self.lambda_id, self.lambda_cyc / 2):
            raise ConfigError(
                f"lambda_id ({self.lambda_id}) must equal lambda_cyc / 2 ({self.lambda_cyc / 2})"
            )
        for name in ("n_epochs", "steps_per_epoch", "gen_batch", "disc_batch"):
            if getattr(self, name) < 1:
                raise ConfigError(f"{name} must be a positive integer")
        if self.validation_every < 0:
            raise ConfigError("validation_every must be >= 0")
        if not 0 <= self.holdout_fraction < 1:
            raise ConfigError("holdout_fraction must lie in [0, 1)")
        if not (self.lr_start > 0 and self.lr_end > 0):
            raise ConfigError("learning rates must be positive")
        if len(self.validation_weights) != 2:
            raise ConfigError("validation_weights holds the R2 and accuracy weights")

    @classmethod
    def from_dict(cls, d, source="<training config>"):
        return dataclass_from_dict(cls, d, source)

    @classmethod
    def from_file(cls, path):
        return load_config(path, cls)

    @property
    def config_hash(self):
        return config_hash(self)

    @property
    def single_discriminator(self) -> bool:
        return self.ablation != Ablation.NONE.value

    @property
    def uniform_sampling(self) -> bool:
        return self.ablation == Ablation.SINGLE_FWD_DISC_UNIFORM_SAMPLING.value


# Losses
# ------


def adversarial_loss(scores, target):
    """Least-squares adversarial loss: mean of (score - target)**2 over the patch map"""
    if isinstance(scores, torch.Tensor):
        return ((scores - target) ** 2).mean()
    return float(np.mean((np.asarray(scores, dtype=float) - target) ** 2))


def _values(x):
    return x.data if isinstance(x, Volume) else x


def cycle_loss(x, x_cycled):
    """Mean absolute voxel difference over the whole grid"""
    x, x_cycled = _values(x), _values(x_cycled)
    if tuple(x.shape) != tuple(x_cycled.shape):
        raise ValidationError(
            f"dimensions differ: {tuple(x.shape)} and {tuple(x_cycled.shape)}"
        )
    if isinstance(x, torch.Tensor):
        return (x - x_cycled).abs().mean()
    return float(np.mean(np.abs(np.asarray(x, float) - np.asarray(x_cycled, float))))


def identity_loss(x, x_id):
    """Same as :py:func:`cycle_loss`, for an image translated into its own domain"""
    return cycle_loss(x, x_id)


def generator_objective(l_adv, l_cyc, l_id, lambda_cyc=30.0):
    if lambda_cyc < 0:
        raise ValidationError("lambda must be non-negative")
    return l_adv + lambda_cyc * l_cyc + lambda_cyc / 2 * l_id


def learning_rate(t, total, start=2e-4, end=2e-5):
    """Linear decay from ``start`` (update 0) to ``end`` (update ``total``)"""
    if total <= 0:
        return start
    t = min(max(t, 0), total)
    return start + (end - start) * t / total


def validation_score(r2, accuracy, weights=(0.75, 0.25)):
    return weights[0] * r2 + weights[1] * accuracy


# Augmentation
# ------------


def translate(vol: Volume, shift) -> Volume:
    """Integer translation, vacated voxels set to background (and out of the mask)"""
    data = np.full(vol.shape, vol.background_value, dtype=float)
    mask = np.zeros(vol.shape, dtype=bool)
    src, dst = [], []
    for n, s in zip(vol.shape, shift):
        s = int(s)
        src.append(slice(max(0, -s), min(n, n - s)))
        dst.append(slice(max(0, s), min(n, n + s)))
    data[tuple(dst)] = vol.data[tuple(src)]
    mask[tuple(dst)] = vol.mask[tuple(src)]
    out = vol.copy()
    out.data, out.mask = data, mask
    return out


def rotate(vol: Volume, angle, plane=(0, 1)) -> Volume:
    """Rotation by ``angle`` degrees in ``plane`` (linear for data, nearest for mask)"""
    out = vol.copy()
    if angle == 0:
        return out
    data = ndi.rotate(
        vol.data, angle, axes=plane, reshape=False, order=1, mode="constant",
        cval=vol.background_value,
    )
    mask = ndi.rotate(
        vol.mask.astype(np.uint8), angle, axes=plane, reshape=False, order=0,
        mode="constant", cval=0,
    ).astype(bool)
    out.data = np.where(mask, data, vol.background_value)
    out.mask = mask
    return out


def augment(
    vol: Volume, rng: np.random.Generator, translation=5, rotation=10.0, probability=0.5
) -> Volume:
    """Random translation in [-translation, translation] voxels per axis, then with
    ``probability`` a rotation in [-rotation, rotation] degrees about a random
    orthogonal plane
    """
    if vol.space not in (Space.MODEL, Space.PREPROCESSED):
        raise SpaceError(f"cannot augment a {vol.space.value} volume")
    shift = rng.integers(-translation, translation + 1, size=3)
    out = translate(vol, shift)
    if rng.uniform() < probability:
        angle = rng.uniform(-rotation, rotation)
        plane = PLANES[rng.integers(len(PLANES))]
        out = rotate(out, angle, plane)
    return out


# Data
# ----


def _as_arrays(vol: Volume):
    """(masked input with background, neutralized network input, mask)"""
    x = np.where(vol.mask, vol.data, vol.background_value)
    x_in = neutralize_background(vol).data
    return x.astype(np.float32), x_in.astype(np.float32), vol.mask


@dataclass
class Batch:
    x: torch.Tensor
    """images, background at its model-space value"""
    x_in: torch.Tensor
    """images with neutralized background, as fed to the networks"""
    mask: torch.Tensor


class SiteStream:
    """Augmented images of one site drawn with its sampling plan

    Draws of an epoch come from an independent random stream keyed by site and epoch,
    so they do not depend on other sites or on whether prefetching is enabled.
    """

    def __init__(self, site_id, volumes, plan, config: TrainingConfig, device=None):
        if len(volumes) == 0:
            raise DataError(f"site {site_id} has no training images")
        self.site_id = site_id
        self.volumes = list(volumes)
        self.plan = plan
        self.config = config
        self.device = get_device(device)
        self._rng = None
        self._queue = None
        self._thread = None

    def __len__(self):
        return len(self.volumes)

    def _draw(self, rng):
        vol = self.volumes[self.plan.draw(rng)]
        if self.config.augmentation:
            vol = augment(
                vol, rng, self.config.translation, self.config.rotation,
                self.config.rotation_probability,
            )
        return _as_arrays(vol)

    def _produce(self, rng, n):
        try:
            for _ in range(n):
                self._queue.put(self._draw(rng))
        except Exception as err:
            # handed to the consumer, which would otherwise wait forever
            self._queue.put(err)

    def start_epoch(self, epoch, n_draws=None):
        self._rng = rng_for(self.config.seed, f"stream:{self.site_id}:{epoch}")
        if self.config.prefetch > 0 and n_draws:
            self._queue = queue.Queue(maxsize=self.config.prefetch)
            self._thread = threading.Thread(
                target=self._produce, args=(self._rng, n_draws), daemon=True
            )
            self._thread.start()
        else:
            self._queue = None

    def next(self, n) -> Batch:
        if self._rng is None:
            self.start_epoch(0)
        if self._queue is not None:
            items = []
            for _ in range(n):
                item = self._queue.get()
                if isinstance(item, Exception):
                    self._queue = None
                    raise item
                items.append(item)
        else:
            items = [self._draw(self._rng) for _ in range(n)]
        x, x_in, mask = (np.stack(a)[:, None] for a in zip(*items))
        to = lambda a: torch.as_tensor(a, device=self.device)
        return Batch(to(x), to(x_in), to(mask))


def _neutralize(x, mask):
    """Torch counterpart of :py:func:`neutralize_background` on a batch"""
    fills = []
    for xi, mi in zip(x, mask):
        brain = xi[mi]
        fill = torch.quantile(brain.detach().float(), 0.5) if brain.numel() else xi.new_zeros(())
        fills.append(fill.to(x.dtype))
    fill = torch.stack(fills).view(-1, *([1] * (x.dim() - 1)))
    return torch.where(mask, x, fill)


# Model bundle
# ------------


@dataclass
class ModelBundle:
    """Parameters of every network of a training run and its bookkeeping"""

    gen_fwd: ParameterSet
    gen_bwd: dict
    disc_fwd: dict
    """one per source site, or a single ``shared`` one under ablation"""
    disc_bwd: dict
    reference_site: str
    sites: list
    config: TrainingConfig = field(default_factory=TrainingConfig)
    epoch: int = -1
    t: int = 0
    best_validation_score: Optional[float] = None
    best_epoch: Optional[int] = None
    log: list = field(default_factory=list)

    def __post_init__(self):
        n = len(self.sites)
        if set(self.gen_bwd) != set(self.sites) or set(self.disc_bwd) != set(self.sites):
            raise ValidationError("one backward generator and discriminator per source site")
        expected = 1 if self.config.single_discriminator else n
        if len(self.disc_fwd) != expected:
            raise ValidationError(f"{expected} forward discriminator(s) expected")

    def discriminator_key(self, site):
        return SHARED_DISCRIMINATOR if self.config.single_discriminator else site

    def networks(self):
        """(directory, ParameterSet) of every network"""
        yield "gen_fwd", self.gen_fwd
        for group in ("gen_bwd", "disc_fwd", "disc_bwd"):
            for key, params in getattr(self, group).items():
                yield f"{group}/{key}", params

    def save(self, folder):
        folder = Path(folder)
        folder.mkdir(parents=True, exist_ok=True)
        for name, params in self.networks():
            params.save(folder / name)
        record = dict(
            reference_site=self.reference_site,
            sites=list(self.sites),
            epoch=self.epoch,
            t=self.t,
            best_validation_score=self.best_validation_score,
            best_epoch=self.best_epoch,
            config_hash=self.config.config_hash,
            config=plain(asdict(self.config)),
        )
        with open(folder / "bundle.yaml", "w") as f:
            yaml.safe_dump(record, f, sort_keys=False)
        write_log(folder / "train_log.jsonl", self.log)

    @classmethod
    def load(cls, folder) -> "ModelBundle":
        folder = Path(folder)
        with open(folder / "bundle.yaml") as f:
            record = yaml.safe_load(f)
        config = TrainingConfig.from_dict(record["config"], str(folder / "bundle.yaml"))
        sites = record["sites"]
        disc_keys = [SHARED_DISCRIMINATOR] if config.single_discriminator else sites
        log_path = folder / "train_log.jsonl"
        log = []
        if log_path.exists():
            log = [json.loads(line) for line in log_path.read_text().splitlines() if line]
        return cls(
            gen_fwd=ParameterSet.load(folder / "gen_fwd"),
            gen_bwd={s: ParameterSet.load(folder / "gen_bwd" / s) for s in sites},
            disc_fwd={k: ParameterSet.load(folder / "disc_fwd" / k) for k in disc_keys},
            disc_bwd={s: ParameterSet.load(folder / "disc_bwd" / s) for s in sites},
            reference_site=record["reference_site"],
            sites=sites,
            config=config,
            epoch=record["epoch"],
            t=record["t"],
            best_validation_score=record["best_validation_score"],
            best_epoch=record["best_epoch"],
            log=log,
        )

    def harmonizer(self, **kwargs):
        """:py:class:`~iguane.blocks.Harmonize` block of the forward generator"""
        from iguane.blocks.harmonization import Harmonize

        return Harmonize(self.gen_fwd, **kwargs)


def write_log(path, records):
    with open(path, "w") as f:
        for record in records:
            f.write(json.dumps(record, sort_keys=True) + "\n")


# Training state
# --------------


class TrainingState:
    """Live networks and optimizers of a training run (single writer)"""

    def __init__(self, config: TrainingConfig, reference_site, sites, bundle=None):
        self.config = config
        self.reference_site = reference_site
        self.sites = list(sites)
        self.device = get_device(config.device)
        self.t = 0
        self.epoch = -1

        if bundle is None:
            torch.manual_seed(config.seed)
            make = lambda spec: build(spec).to(self.device)
            self.gen_fwd = make(config.generator)
            self.gen_bwd = {s: make(config.generator) for s in self.sites}
            keys = [SHARED_DISCRIMINATOR] if config.single_discriminator else self.sites
            self.disc_fwd = {k: make(config.discriminator) for k in keys}
            self.disc_bwd = {s: make(config.discriminator) for s in self.sites}
        else:
            load = lambda p: p.to_module(self.device)
            self.gen_fwd = load(bundle.gen_fwd)
            self.gen_bwd = {s: load(p) for s, p in bundle.gen_bwd.items()}
            self.disc_fwd = {k: load(p) for k, p in bundle.disc_fwd.items()}
            self.disc_bwd = {s: load(p) for s, p in bundle.disc_bwd.items()}
            self.t, self.epoch = bundle.t, bundle.epoch

        adam = lambda params: torch.optim.Adam(params, lr=config.lr_start, betas=config.betas)
        generator_params = list(self.gen_fwd.parameters())
        for module in self.gen_bwd.values():
            generator_params += list(module.parameters())
        self.opt_gen = adam(generator_params)
        self.opt_disc_fwd = {k: adam(m.parameters()) for k, m in self.disc_fwd.items()}
        self.opt_disc_bwd = {k: adam(m.parameters()) for k, m in self.disc_bwd.items()}

        self.amp = bool(config.mixed_precision and self.device.type == "cuda")
        if config.mixed_precision and not self.amp:
            warning("mixed precision requires a CUDA device, training in full precision")
        self.scaler = torch.amp.GradScaler("cuda", enabled=self.amp)

    @property
    def total_updates(self):
        c = self.config
        return c.n_epochs * c.steps_per_epoch * len(self.sites)

    @property
    def lr(self):
        return learning_rate(
            self.t, self.total_updates, self.config.lr_start, self.config.lr_end
        )

    def discriminator_key(self, site):
        return SHARED_DISCRIMINATOR if self.config.single_discriminator else site

    def optimizers(self):
        yield self.opt_gen
        yield from self.opt_disc_fwd.values()
        yield from self.opt_disc_bwd.values()

    def set_lr(self, lr):
        for optimizer in self.optimizers():
            for group in optimizer.param_groups:
                group["lr"] = lr

    def autocast(self):
        return torch.autocast(device_type=self.device.type, enabled=self.amp)

    def snapshot(self, log=(), best_validation_score=None, best_epoch=None) -> ModelBundle:
        snap = ParameterSet.from_module
        return ModelBundle(
            gen_fwd=snap(self.gen_fwd),
            gen_bwd={s: snap(m) for s, m in self.gen_bwd.items()},
            disc_fwd={k: snap(m) for k, m in self.disc_fwd.items()},
            disc_bwd={s: snap(m) for s, m in self.disc_bwd.items()},
            reference_site=self.reference_site,
            sites=list(self.sites),
            config=self.config,
            epoch=self.epoch,
            t=self.t,
            best_validation_score=best_validation_score,
            best_epoch=best_epoch,
            log=list(log),
        )

    def optimizer_state(self):
        return dict(
            gen=self.opt_gen.state_dict(),
            disc_fwd={k: o.state_dict() for k, o in self.opt_disc_fwd.items()},
            disc_bwd={k: o.state_dict() for k, o in self.opt_disc_bwd.items()},
        )

    def load_optimizer_state(self, state):
        self.opt_gen.load_state_dict(state["gen"])
        for k, o in self.opt_disc_fwd.items():
            o.load_state_dict(state["disc_fwd"][k])
        for k, o in self.opt_disc_bwd.items():
            o.load_state_dict(state["disc_bwd"][k])


def _set_requires_grad(modules, flag):
    for module in modules:
        for p in module.parameters():
            p.requires_grad_(flag)


def _check_finite(name, module, t):
    for p in module.parameters():
        if not torch.isfinite(p).all():
            raise TrainingDivergedError(f"non-finite parameters in {name} after update {t}")


def _update_discriminator(state, disc, optimizer, real, fake):
    _set_requires_grad([disc], True)
    optimizer.zero_grad()
    with state.autocast():
        loss = 0.5 * (
            adversarial_loss(disc(real), 1.0) + adversarial_loss(disc(fake.detach()), 0.0)
        )
    state.scaler.scale(loss).backward()
    state.scaler.step(optimizer)
    state.scaler.update()
    return float(loss.detach())


def train_step(state: TrainingState, site, reference: SiteStream, source: SiteStream):
    """One site-step: forward discriminator, backward discriminator, then generators

    Returns
    -------
    dict
        losses and learning rate of the step
    """
    c = state.config
    gen_fwd, gen_bwd = state.gen_fwd, state.gen_bwd[site]
    disc_key = state.discriminator_key(site)
    disc_fwd, disc_bwd = state.disc_fwd[disc_key], state.disc_bwd[site]
    lr = state.lr
    state.set_lr(lr)
    for module in (gen_fwd, gen_bwd, disc_fwd, disc_bwd):
        module.train()

    # (a) forward discriminator: reference images against translated source images
    ref, src = reference.next(c.disc_batch), source.next(c.disc_batch)
    with torch.no_grad(), state.autocast():
        fake_ref = _neutralize(gen_fwd(src.x_in, src.mask), src.mask)
    loss_disc_fwd = _update_discriminator(
        state, disc_fwd, state.opt_disc_fwd[disc_key], ref.x_in, fake_ref
    )
    _check_finite(f"disc_fwd/{disc_key}", disc_fwd, state.t)

    # (b) backward discriminator: source images against translated reference images
    src, ref = source.next(c.disc_batch), reference.next(c.disc_batch)
    with torch.no_grad(), state.autocast():
        fake_src = _neutralize(gen_bwd(ref.x_in, ref.mask), ref.mask)
    loss_disc_bwd = _update_discriminator(
        state, disc_bwd, state.opt_disc_bwd[site], src.x_in, fake_src
    )
    _check_finite(f"disc_bwd/{site}", disc_bwd, state.t)

    # (c) generators, discriminators frozen
    ref, src = reference.next(c.gen_batch), source.next(c.gen_batch)
    _set_requires_grad([disc_fwd, disc_bwd], False)
    state.opt_gen.zero_grad()
    with state.autocast():
        losses = generator_losses(gen_fwd, gen_bwd, disc_fwd, disc_bwd, ref, src)
        loss_gen = generator_objective(
            losses["loss_adv"], losses["loss_cyc"], losses["loss_id"], c.lambda_cyc
        )
    state.scaler.scale(loss_gen).backward()
    state.scaler.step(state.opt_gen)
    state.scaler.update()
    _set_requires_grad([disc_fwd, disc_bwd], True)
    _check_finite("gen_fwd", gen_fwd, state.t)
    _check_finite(f"gen_bwd/{site}", gen_bwd, state.t)

    state.t += 1
    record = dict(
        lr=lr,
        loss_disc_fwd=loss_disc_fwd,
        loss_disc_bwd=loss_disc_bwd,
        loss_gen=float(loss_gen.detach()),
    )
    record.update({k: float(v.detach()) for k, v in losses.items()})
    return record


def generator_losses(gen_fwd, gen_bwd, disc_fwd, disc_bwd, ref: Batch, src: Batch):
    """Adversarial, cycle and identity losses of a generator pair, both directions"""
    fake_ref = gen_fwd(src.x_in, src.mask)
    fake_src = gen_bwd(ref.x_in, ref.mask)
    fake_ref_in = _neutralize(fake_ref, src.mask)
    fake_src_in = _neutralize(fake_src, ref.mask)

    loss_adv = adversarial_loss(disc_fwd(fake_ref_in), 1.0) + adversarial_loss(
        disc_bwd(fake_src_in), 1.0
    )
    loss_cyc = cycle_loss(src.x, gen_bwd(fake_ref_in, src.mask)) + cycle_loss(
        ref.x, gen_fwd(fake_src_in, ref.mask)
    )
    loss_id = identity_loss(ref.x, gen_fwd(ref.x_in, ref.mask)) + identity_loss(
        src.x, gen_bwd(src.x_in, src.mask)
    )
    return dict(loss_adv=loss_adv, loss_cyc=loss_cyc, loss_id=loss_id)


# Validation
# ----------


def _sex_target(sex):
    return 1.0 if str(sex).upper().startswith("M") else 0.0


def validate(gen_fwd, holdout, age_predictor, sex_predictor, weights=(0.75, 0.25)):
    """Harmonize held-out source images, then score age and sex prediction

    Returns
    -------
    dict
        ``score`` (weighted R2 and accuracy), ``r2`` and ``accuracy``
    """
    from iguane.stats import accuracy, r2_score

    if len(holdout) == 0:
        raise ValidationError("validation needs at least one held-out image")
    module = gen_fwd.to_module() if isinstance(gen_fwd, ParameterSet) else gen_fwd
    age_model = age_predictor.to_module() if isinstance(age_predictor, ParameterSet) else age_predictor
    sex_model = sex_predictor.to_module() if isinstance(sex_predictor, ParameterSet) else sex_predictor

    ages, predicted_ages, sexes, predicted_sexes = [], [], [], []
    for vol in holdout:
        harmonized = generator_forward(module, vol, inference=True)
        ages.append(float(vol.metadata["age"]))
        predicted_ages.append(predictor_forward(age_model, harmonized))
        sexes.append(_sex_target(vol.metadata.get("sex")))
        predicted_sexes.append(float(predictor_forward(sex_model, harmonized) > 0.5))

    r2 = r2_score(ages, predicted_ages)
    acc = accuracy(sexes, predicted_sexes)
    return dict(score=validation_score(r2, acc, weights), r2=r2, accuracy=acc)


# Predictors
# ----------


def train_predictor(
    volumes, targets, task="regression", config: PredictorConfig = None, device=None,
    show_progress=False,
) -> ParameterSet:
    """Train an age (regression) or binary (classification) predictor

    Parameters
    ----------
    volumes : list of Volume
        images already scaled for prediction, same dimensions
    targets : list
        ages, or 0/1 labels
    task : str, optional
        ``regression`` or ``classification``, by default ``regression``
    config : PredictorConfig, optional

    Returns
    -------
    ParameterSet
    """
    config = config or PredictorConfig()
    targets = np.asarray(targets, dtype=float)
    if len(volumes) == 0 or len(volumes) != len(targets):
        raise ValidationError("one target per volume is required")
    if len({v.shape for v in volumes}) > 1:
        raise ShapeError("predictor volumes must share dimensions")
    if task == "classification" and not np.isin(targets, (0.0, 1.0)).all():
        raise ValidationError("classification targets must be 0 or 1")

    offset, scale = 0.0, 1.0
    if task == "regression":
        offset = float(targets.mean())
        scale = float(targets.std()) or 1.0

    device = get_device(device)
    torch.manual_seed(config.seed)
    spec = config.spec(task, offset, scale)
    model = build(spec).to(device)
    model.check_shape(volumes[0].shape)
    optimizer = torch.optim.Adam(model.parameters(), lr=config.lr_start)
    rng = rng_for(config.seed, f"predictor:{task}")

    n = len(volumes)
    batches = int(np.ceil(n / config.batch_size))
    total = config.n_epochs * batches
    t = 0
    bar = progress(show_progress, desc=f"predictor ({task})", unit="epochs")
    for _ in bar(range(config.n_epochs)):
        model.train()
        order = rng.permutation(n)
        for b in range(batches):
            idx = order[b * config.batch_size : (b + 1) * config.batch_size]
            images = []
            for i in idx:
                vol = volumes[i]
                if config.augmentation:
                    vol = augment(vol, rng)
                images.append(np.where(vol.mask, vol.data, vol.background_value))
            x = torch.as_tensor(np.stack(images)[:, None], dtype=torch.float32, device=device)
            y = torch.as_tensor(targets[idx], dtype=torch.float32, device=device)

            for group in optimizer.param_groups:
                group["lr"] = learning_rate(t, total, config.lr_start, config.lr_end)
            optimizer.zero_grad()
            z = model.logits(x)
            if task == "regression":
                loss = F.mse_loss(z, (y - offset) / scale)
            else:
                loss = F.binary_cross_entropy_with_logits(z, y)
            loss.backward()
            optimizer.step()
            _check_finite(f"predictor ({task})", model, t)
            t += 1

    return ParameterSet.from_module(model.cpu())


# Training
# --------


def _check_cohort(config: TrainingConfig, cohort: dict):
    if config.reference_site is None:
        raise ConfigError("reference_site must be set")
    if config.reference_site not in cohort:
        raise ConfigError(f"reference site '{config.reference_site}' has no images")
    if len(cohort) < 2:
        raise ValidationError("training needs a reference site and at least one source site")
    for site, volumes in cohort.items():
        if len(volumes) == 0:
            raise DataError(f"site {site} has no images")
        for vol in volumes:
            if vol.space != Space.MODEL:
                raise SpaceError(f"training expects model_space volumes ({site})")
            if vol.metadata.get("age") is None or not np.isfinite(float(vol.metadata["age"])):
                raise ValidationError(f"missing age for an image of site {site}")
    shapes = {v.shape for volumes in cohort.values() for v in volumes}
    if len(shapes) > 1:
        raise ShapeError(f"training volumes must share dimensions, got {sorted(shapes)}")
    factor = 2**config.generator.levels
    shape = shapes.pop()
    if any(n % factor for n in shape):
        raise ShapeError(f"volume dimensions {shape} must be divisible by {factor}")
    minimum = config.discriminator.stride ** len(config.discriminator.channels)
    if any(n < minimum for n in shape):
        raise ShapeError(f"volume dimensions {shape} too small for the discriminator")


def split_holdout(config: TrainingConfig, cohort: dict):
    """Per source site, hold out ``holdout_fraction`` of the images (at least one kept)"""
    training, holdout = {}, []
    for site, volumes in cohort.items():
        n_out = 0
        if site != config.reference_site and config.validation_every > 0:
            n_out = min(int(round(config.holdout_fraction * len(volumes))), len(volumes) - 1)
        order = rng_for(config.seed, f"holdout:{site}").permutation(len(volumes))
        out = set(order[:n_out].tolist())
        training[site] = [v for i, v in enumerate(volumes) if i not in out]
        holdout += [v for i, v in enumerate(volumes) if i in out]
    return training, holdout


def train_validation_predictors(config: TrainingConfig, reference_volumes, show_progress=False):
    ages = [float(v.metadata["age"]) for v in reference_volumes]
    sexes = [_sex_target(v.metadata.get("sex")) for v in reference_volumes]
    info("training validation predictors on the reference site")
    age = train_predictor(reference_volumes, ages, "regression", config.predictor, config.device, show_progress)
    sex = train_predictor(reference_volumes, sexes, "classification", config.predictor, config.device, show_progress)
    return age, sex


def _is_validation_epoch(config, epoch):
    if config.validation_every <= 0:
        return False
    return (epoch + 1) % config.validation_every == 0 or epoch == config.n_epochs - 1


def train(
    config: TrainingConfig, cohort: dict, out_dir=None, predictors=None, resume=False,
    show_progress=True,
) -> ModelBundle:
    """Train the forward and backward generators

    Parameters
    ----------
    config : TrainingConfig
    cohort : dict
        site id to list of model-space volumes (with ``age`` and ``sex`` metadata)
    out_dir : str or Path, optional
        checkpoint directory: ``last/`` (resume point), ``best/`` and ``train_log.jsonl``
    predictors : tuple, optional
        (age, sex) predictor ParameterSets, trained on the reference site if not given
    resume : bool, optional
        continue from ``out_dir/last``, by default False

    Returns
    -------
    ModelBundle
        best-scoring snapshot (last one if validation is disabled), with the full log
    """
    _check_cohort(config, cohort)
    reference_site = config.reference_site
    sites = sorted(s for s in cohort if s != reference_site)
    training, holdout = split_holdout(config, cohort)
    validating = config.validation_every > 0 and len(holdout) > 0

    bin_edges = default_bin_edges(config.bin_width)
    reference_ages = [float(v.metadata["age"]) for v in training[reference_site]]
    streams = {}
    for site in sites:
        ids = tuple(range(len(training[site])))
        ages = [float(v.metadata["age"]) for v in training[site]]
        if config.uniform_sampling:
            plan = uniform_plan(ids, ages, bin_edges)
        else:
            plan = compute_sampling_weights(ages, reference_ages, bin_edges, ids)
        streams[site] = SiteStream(site, training[site], plan, config, config.device)
    ref_ids = tuple(range(len(training[reference_site])))
    reference = SiteStream(
        reference_site, training[reference_site], uniform_plan(ref_ids), config, config.device
    )

    out_dir = None if out_dir is None else Path(out_dir)
    state, log, best = None, [], None
    if resume:
        if out_dir is None or not (out_dir / "last" / "bundle.yaml").exists():
            raise ValidationError("nothing to resume from")
        last = ModelBundle.load(out_dir / "last")
        if last.config.config_hash != config.config_hash:
            raise ConfigError("resume requires the configuration of the interrupted run")
        state = TrainingState(config, reference_site, sites, last)
        optimizer_file = out_dir / "last" / "optimizers.pt"
        if optimizer_file.exists():
            state.load_optimizer_state(torch.load(optimizer_file, map_location=state.device))
        log = list(last.log)
        if validating and (out_dir / "best" / "bundle.yaml").exists():
            best = ModelBundle.load(out_dir / "best")
        info(f"resuming after epoch {last.epoch} (update {last.t})")
    else:
        state = TrainingState(config, reference_site, sites)

    if validating and predictors is None:
        predictors = train_validation_predictors(config, training[reference_site], show_progress)

    if out_dir is not None:
        out_dir.mkdir(parents=True, exist_ok=True)
        write_log(out_dir / "train_log.jsonl", log)

    def record(entry):
        log.append(entry)
        if out_dir is not None:
            with open(out_dir / "train_log.jsonl", "a") as f:
                f.write(json.dumps(entry, sort_keys=True) + "\n")

    draws = config.steps_per_epoch * (2 * config.disc_batch + config.gen_batch)
    bar = progress(show_progress, desc="training", unit="epochs")
    for epoch in bar(range(state.epoch + 1, config.n_epochs)):
        reference.start_epoch(epoch, draws * len(sites))
        for site in sites:
            streams[site].start_epoch(epoch, draws)
        order_rng = rng_for(config.seed, f"site-order:{epoch}")

        for step in range(config.steps_per_epoch):
            for i in order_rng.permutation(len(sites)):
                site = sites[i]
                t = state.t
                losses = train_step(state, site, reference, streams[site])
                record(dict(epoch=epoch, step=step, t=t, site=site, **losses))
        state.epoch = epoch

        if validating and _is_validation_epoch(config, epoch):
            snapshot = ParameterSet.from_module(state.gen_fwd)
            result = validate(snapshot, holdout, *predictors, config.validation_weights)
            improved = best is None or result["score"] >= best.best_validation_score
            record(
                dict(epoch=epoch, validation=result["score"], r2=result["r2"],
                     accuracy=result["accuracy"], best=improved)
            )
            info(f"epoch {epoch}: validation score {result['score']:.4f}")
            if improved:
                best = state.snapshot(log, result["score"], epoch)
                if out_dir is not None:
                    best.save(out_dir / "best")

        if out_dir is not None:
            score, best_epoch = (None, None) if best is None else (
                best.best_validation_score, best.best_epoch
            )
            state.snapshot(log, score, best_epoch).save(out_dir / "last")
            torch.save(state.optimizer_state(), out_dir / "last" / "optimizers.pt")

    if best is None:
        best = state.snapshot(log)
        if out_dir is not None:
            best.save(out_dir / "best")
    best.log = list(log)
    if out_dir is not None:
        write_log(out_dir / "best" / "train_log.jsonl", log)
    return best
