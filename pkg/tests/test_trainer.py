import json

import numpy as np
import pytest
import torch

from iguane.blocks.preprocessing import median_normalize, to_model_space
from iguane.core import Space
from iguane.errors import (
    ConfigError,
    DataError,
    ShapeError,
    SpaceError,
    ValidationError,
)
from iguane.networks import DiscriminatorSpec, GeneratorSpec
from iguane.phantom import SiteEffect, generate_anatomy, render
from iguane.sampler import uniform_plan
import iguane.trainer as trainer_module
from iguane.trainer import (
    Batch,
    ModelBundle,
    PredictorConfig,
    SiteStream,
    TrainingConfig,
    TrainingState,
    adversarial_loss,
    augment,
    cycle_loss,
    generator_losses,
    generator_objective,
    identity_loss,
    learning_rate,
    split_holdout,
    train,
    train_predictor,
    train_step,
    translate,
    validation_score,
)

AGES = {"ref": [25, 30, 35, 40, 45, 50], "siteA": [25, 35, 45], "siteB": [30, 40, 50]}
EFFECTS = {
    "ref": SiteEffect("ref"),
    "siteA": SiteEffect("siteA", gamma=0.7),
    "siteB": SiteEffect("siteB", gamma=1.4, bias_amplitude=0.1),
}


def make_cohort():
    cohort = {}
    for site, ages in AGES.items():
        cohort[site] = []
        for k, age in enumerate(ages):
            anatomy = generate_anatomy(
                age, subject_id=f"{site}-{k}", sex="M" if k % 2 else "F"
            )
            vol = render(anatomy, EFFECTS[site])
            cohort[site].append(to_model_space(median_normalize(vol)))
    return cohort


def tiny_config(**kwargs):
    defaults = dict(
        n_epochs=2,
        steps_per_epoch=5,
        validation_every=0,
        reference_site="ref",
        device="cpu",
        generator=GeneratorSpec(levels=2, base_channels=4),
        discriminator=DiscriminatorSpec(channels=(4, 8, 16)),
        predictor=PredictorConfig(n_epochs=2, batch_size=4, blocks=2, base_channels=2),
    )
    defaults.update(kwargs)
    return TrainingConfig(**defaults)


@pytest.fixture(scope="module")
def cohort():
    return make_cohort()


def test_config_defaults():
    config = TrainingConfig()
    assert config.lambda_id == 15.0
    assert not config.single_discriminator
    assert TrainingConfig(ablation="single_fwd_disc_uniform_sampling").uniform_sampling


def test_config_errors():
    with pytest.raises(ConfigError):
        TrainingConfig(lambda_cyc=30.0, lambda_id=10.0)
    with pytest.raises(ConfigError):
        TrainingConfig(ablation="no_cycle")
    with pytest.raises(ConfigError):
        TrainingConfig(validation_every=-1)
    with pytest.raises(ConfigError):
        TrainingConfig(steps_per_epoch=0)


def test_config_from_file(tmp_path):
    path = tmp_path / "train.yaml"
    path.write_text(
        "n_epochs: 3\nreference_site: ref\ngenerator:\n  levels: 2\n  base_channels: 4\n"
    )
    config = TrainingConfig.from_file(path)
    assert config.generator == GeneratorSpec(levels=2, base_channels=4)
    assert config.n_epochs == 3

    path.write_text("n_epochs: 3\ngenerator:\n  depth: 2\n")
    with pytest.raises(ConfigError, match="train.yaml:3"):
        TrainingConfig.from_file(path)


def test_config_hash_changes():
    assert tiny_config().config_hash == tiny_config().config_hash
    assert tiny_config().config_hash != tiny_config(seed=1).config_hash


def test_losses():
    assert adversarial_loss(np.ones((2, 2)), 1.0) == 0.0
    assert adversarial_loss(np.array([0.0, 2.0]), 1.0) == 1.0
    assert adversarial_loss(torch.zeros(3), 1.0).item() == 1.0
    assert cycle_loss(np.zeros(4), np.full(4, 0.5)) == 0.5
    with pytest.raises(ValidationError):
        cycle_loss(np.zeros(4), np.zeros(5))
    assert generator_objective(1.0, 2.0, 3.0, 30.0) == 106.0
    assert generator_objective(0.5, 0.1, 0.02, 30.0) == pytest.approx(3.8, abs=1e-9)
    with pytest.raises(ValidationError):
        generator_objective(1.0, 2.0, 3.0, -1.0)


def test_generator_objective_gradient():
    x = torch.rand(4, 4, 4, dtype=torch.float64) * 0.5 + 0.5

    def objective(scores, w):
        # cycled and identity images stay below x: no kink of the L1 losses
        return generator_objective(
            adversarial_loss(scores, 1.0),
            cycle_loss(x, w * x),
            identity_loss(x, w**2 * x),
            30.0,
        )

    scores = torch.randn(2, 1, 2, 2, 2, dtype=torch.float64, requires_grad=True)
    w = torch.tensor(0.6, dtype=torch.float64, requires_grad=True)
    assert torch.autograd.gradcheck(objective, (scores, w))


def test_generator_objective_monotone_in_lambda():
    values = [generator_objective(0.3, 0.2, 0.1, lam) for lam in (0.0, 1.0, 30.0, 1e4)]
    assert values == sorted(values)
    assert generator_objective(0.3, 0.0, 0.0, 1e4) == 0.3


def test_learning_rate():
    assert learning_rate(0, 100) == 2e-4
    assert np.isclose(learning_rate(100, 100), 2e-5)
    assert np.isclose(learning_rate(50, 100), 1.1e-4)
    assert np.isclose(learning_rate(500, 100), 2e-5)


def test_validation_score():
    assert np.isclose(validation_score(0.8, 0.6), 0.75)


def test_translate(cohort):
    vol = cohort["ref"][0]
    moved = translate(vol, (1, 0, 0))
    np.testing.assert_array_equal(moved.data[1:], vol.data[:-1])
    assert (moved.data[0] == -1).all()
    assert not moved.mask[0].any()


def test_augment(cohort):
    vol = cohort["ref"][0]
    a = augment(vol, np.random.default_rng(1))
    b = augment(vol, np.random.default_rng(1))
    np.testing.assert_array_equal(a.data, b.data)
    assert a.shape == vol.shape
    assert (a.data[~a.mask] == -1).all()
    with pytest.raises(SpaceError):
        augment(render(generate_anatomy(30), SiteEffect()), np.random.default_rng(0))


def test_site_stream(cohort):
    config = tiny_config()
    volumes = cohort["siteA"]
    stream = SiteStream("siteA", volumes, uniform_plan(range(len(volumes))), config, "cpu")
    stream.start_epoch(0)
    batch = stream.next(2)
    assert batch.x.shape == (2, 1, 32, 40, 32)
    assert batch.mask.dtype == torch.bool
    # neutralized input carries no background value
    assert (batch.x_in != -1).all()


def test_site_stream_prefetch_error(cohort):
    config = tiny_config(prefetch=2)
    volumes = cohort["siteA"]
    stream = SiteStream("siteA", volumes, uniform_plan(range(len(volumes))), config, "cpu")

    def unreadable(rng):
        raise DataError("unreadable image")

    stream._draw = unreadable
    stream.start_epoch(0, n_draws=4)
    with pytest.raises(DataError, match="unreadable"):
        stream.next(2)


def adam_steps(optimizer):
    return {int(s["step"]) for s in optimizer.state.values()}


def streams(config, cohort):
    make = lambda site: SiteStream(
        site, cohort[site], uniform_plan(range(len(cohort[site]))), config, "cpu"
    )
    return {site: make(site) for site in cohort}


def test_train_step_updates(cohort):
    config = tiny_config(augmentation=False)
    state = TrainingState(config, "ref", ["siteA", "siteB"])
    s = streams(config, cohort)
    before = [p.detach().clone() for p in state.gen_bwd["siteB"].parameters()]

    record = train_step(state, "siteA", s["ref"], s["siteA"])
    assert state.t == 1
    assert adam_steps(state.opt_disc_fwd["siteA"]) == {1}
    assert adam_steps(state.opt_disc_bwd["siteA"]) == {1}
    assert adam_steps(state.opt_gen) == {1}
    assert adam_steps(state.opt_disc_fwd["siteB"]) == set()
    for p, q in zip(before, state.gen_bwd["siteB"].parameters()):
        torch.testing.assert_close(p, q)
    assert set(record) >= {"lr", "loss_disc_fwd", "loss_disc_bwd", "loss_gen", "loss_adv"}
    assert all(np.isfinite(v) for v in record.values())


def test_train_step_shared_discriminator(cohort):
    config = tiny_config(ablation="single_fwd_disc", augmentation=False)
    state = TrainingState(config, "ref", ["siteA", "siteB"])
    s = streams(config, cohort)
    train_step(state, "siteA", s["ref"], s["siteA"])
    train_step(state, "siteB", s["ref"], s["siteB"])
    assert list(state.disc_fwd) == ["shared"]
    assert adam_steps(state.opt_disc_fwd["shared"]) == {2}
    assert adam_steps(state.opt_disc_bwd["siteB"]) == {1}


@pytest.mark.parametrize("lr", [1e-4, 1e-5])
def test_generator_update_decreases_objective(cohort, lr):
    config = tiny_config(augmentation=False)
    state = TrainingState(config, "ref", ["siteA", "siteB"])
    s = streams(config, cohort)
    ref, src = (
        Batch(b.x.double(), b.x_in.double(), b.mask)
        for b in (s["ref"].next(1), s["siteA"].next(1))
    )
    networks = [state.gen_fwd, state.gen_bwd["siteA"], state.disc_fwd["siteA"], state.disc_bwd["siteA"]]
    for network in networks:
        network.double().train()

    def objective():
        losses = generator_losses(*networks, ref, src)
        return generator_objective(
            losses["loss_adv"], losses["loss_cyc"], losses["loss_id"], config.lambda_cyc
        )

    parameters = list(networks[0].parameters()) + list(networks[1].parameters())
    optimizer = torch.optim.Adam(parameters, lr=lr, betas=config.betas)
    before = objective()
    before.backward()
    optimizer.step()
    with torch.no_grad():
        after = objective()
    assert after.item() < before.item()


def test_check_cohort_errors(cohort):
    with pytest.raises(ConfigError):
        train(tiny_config(reference_site="other"), cohort, show_progress=False)
    with pytest.raises(ValidationError):
        train(tiny_config(), {"ref": cohort["ref"]}, show_progress=False)
    raw = {"ref": cohort["ref"], "siteA": [render(generate_anatomy(30), SiteEffect())]}
    with pytest.raises(SpaceError):
        train(tiny_config(), raw, show_progress=False)
    odd = {"ref": cohort["ref"], "siteA": [v.copy() for v in cohort["siteA"]]}
    odd["siteA"][0] = to_model_space(
        median_normalize(render(generate_anatomy(30, shape=(32, 32, 32)), SiteEffect()))
    )
    with pytest.raises(ShapeError):
        train(tiny_config(), odd, show_progress=False)


def test_split_holdout():
    config = tiny_config(validation_every=1, holdout_fraction=0.1)
    cohort = {"ref": list(range(10)), "a": list(range(10)), "b": list(range(3))}
    training, holdout = split_holdout(config, cohort)
    assert len(training["ref"]) == 10
    assert len(training["a"]) == 9
    assert len(training["b"]) == 3
    assert len(holdout) == 1
    same, _ = split_holdout(config, cohort)
    assert same == training


def test_train_predictor_errors(cohort):
    with pytest.raises(ValidationError):
        train_predictor(cohort["ref"], [0, 1, 2, 0, 1, 0], "classification")
    with pytest.raises(ValidationError):
        train_predictor(cohort["ref"], [30, 40])


def test_train_desk(cohort, tmp_path):
    config = tiny_config()
    bundle = train(config, cohort, out_dir=tmp_path, show_progress=False)
    assert bundle.sites == ["siteA", "siteB"]
    assert bundle.epoch == 1
    assert bundle.t == 20
    steps = [r for r in bundle.log if "site" in r]
    assert len(steps) == 20
    assert {r["site"] for r in steps} == {"siteA", "siteB"}
    assert all(np.isfinite(r["loss_gen"]) for r in steps)

    lines = (tmp_path / "train_log.jsonl").read_text().splitlines()
    assert [json.loads(line) for line in lines] == bundle.log
    assert (tmp_path / "last" / "optimizers.pt").exists()

    loaded = ModelBundle.load(tmp_path / "best")
    assert loaded.gen_fwd.hash == bundle.gen_fwd.hash
    assert loaded.config.config_hash == config.config_hash
    assert set(loaded.disc_fwd) == {"siteA", "siteB"}

    out = loaded.harmonizer(device="cpu")(cohort["siteA"][0])
    assert out.space == Space.MODEL
    assert out.shape == (32, 40, 32)
    assert np.isfinite(out.data).all()


def test_train_resume(cohort, tmp_path):
    config = tiny_config(n_epochs=1)
    first = train(config, cohort, out_dir=tmp_path, show_progress=False)
    resumed = train(config, cohort, out_dir=tmp_path, resume=True, show_progress=False)
    assert resumed.gen_fwd.hash == first.gen_fwd.hash
    assert resumed.log == first.log

    with pytest.raises(ConfigError):
        train(tiny_config(n_epochs=1, seed=5), cohort, out_dir=tmp_path, resume=True,
              show_progress=False)
    with pytest.raises(ValidationError):
        train(config, cohort, out_dir=tmp_path / "empty", resume=True, show_progress=False)


def test_train_resume_mid_run(cohort, tmp_path, monkeypatch):
    config = tiny_config(n_epochs=2, steps_per_epoch=2)
    uninterrupted = train(config, cohort, show_progress=False)

    # stop at the first update of the second epoch
    calls = []

    def interrupted_step(*args):
        if len(calls) == config.steps_per_epoch * 2:
            raise RuntimeError("interrupted")
        calls.append(args[1])
        return train_step(*args)

    monkeypatch.setattr(trainer_module, "train_step", interrupted_step)
    with pytest.raises(RuntimeError, match="interrupted"):
        train(config, cohort, out_dir=tmp_path, show_progress=False)
    monkeypatch.undo()
    checkpoint = ModelBundle.load(tmp_path / "last")
    assert (checkpoint.epoch, checkpoint.t) == (0, 4)

    resumed = train(config, cohort, out_dir=tmp_path, resume=True, show_progress=False)
    assert (resumed.epoch, resumed.t) == (uninterrupted.epoch, uninterrupted.t) == (1, 8)
    steps = lambda log: [(r["epoch"], r["step"], r["t"], r["site"], r["lr"]) for r in log]
    assert steps(resumed.log) == steps(uninterrupted.log)
    np.testing.assert_allclose(
        [r["loss_gen"] for r in resumed.log], [r["loss_gen"] for r in uninterrupted.log], rtol=1e-5
    )
    for p, q in zip(resumed.gen_fwd.to_module().parameters(), uninterrupted.gen_fwd.to_module().parameters()):
        torch.testing.assert_close(p, q)


def test_train_ablation(cohort):
    config = tiny_config(n_epochs=1, steps_per_epoch=2, ablation="single_fwd_disc")
    bundle = train(config, cohort, show_progress=False)
    assert list(bundle.disc_fwd) == ["shared"]
    assert len(bundle.disc_bwd) == 2


@pytest.mark.slow
def test_large_lambda_keeps_generator_near_identity(cohort):
    deviation = {}
    for lambda_cyc in (0.0, 1e4):
        config = tiny_config(n_epochs=2, steps_per_epoch=10, lambda_cyc=lambda_cyc, augmentation=False)
        harmonizer = train(config, cohort, show_progress=False).harmonizer(device="cpu")
        deviation[lambda_cyc] = np.mean(
            [np.abs(harmonizer(v).data - v.data)[v.mask].mean() for v in cohort["siteA"]]
        )
    assert deviation[1e4] < deviation[0.0]


@pytest.mark.slow
def test_train_with_validation(cohort, tmp_path):
    config = tiny_config(validation_every=1, holdout_fraction=0.34)
    bundle = train(config, cohort, out_dir=tmp_path, show_progress=False)
    validations = [r for r in bundle.log if "validation" in r]
    assert [r["epoch"] for r in validations] == [0, 1]
    assert bundle.best_epoch in (0, 1)
    assert bundle.best_validation_score == max(r["validation"] for r in validations)
    assert (tmp_path / "best" / "bundle.yaml").exists()
