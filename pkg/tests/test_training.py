import copy
import json
import math

import numpy as np
import pytest
import torch
from hypothesis import given, settings
from hypothesis import strategies as st

from sgap.data import DatasetSpec
from sgap.errors import ConfigurationError, NonFiniteLossError
from sgap.training import Trainer, TrainingConfig, cross_entropy, derive_seed, train

TINY_DS = DatasetSpec(kind="SYNTHETIC", image_size=32, identities=4, images_per_identity=4, epoch_pair_count=16,
                      seed=0)


def tiny_cfg(**kw):
    base = dict(lam=1.0, epochs=3, batch_size=8, seed=0, generator={"base_channels": 4},
                discriminator={"conv_channels": [4, 4, 8], "dense_units": 16})
    base.update(kw)
    return TrainingConfig(**base)


def _state(module):
    return {k: v.clone() for k, v in module.state_dict().items()}


def _same(a, b):
    return all(torch.equal(a[k], b[k]) for k in a)


# -- cross entropy ----------------------------------------------------------------

def test_cross_entropy_values():
    assert cross_entropy(1, 0.5).item() == pytest.approx(math.log(2), rel=1e-7)
    assert cross_entropy(0, 0.5).item() == cross_entropy(1, 0.5).item()
    assert cross_entropy(0, torch.tensor(1.0, dtype=torch.float64)).item() == pytest.approx(1e-7, rel=1e-6)
    # clamping keeps the extremes finite
    assert math.isfinite(cross_entropy(0, torch.tensor(0.0)).item())
    assert math.isfinite(cross_entropy(1, torch.tensor(1.0)).item())


@settings(max_examples=50, deadline=None)
@given(p=st.floats(0, 1), label=st.sampled_from([0, 1]))
def test_cross_entropy_nonnegative(p, label):
    v = cross_entropy(label, torch.tensor(p, dtype=torch.float64)).item()
    assert v >= 0 and math.isfinite(v)


# -- optimizer --------------------------------------------------------------------

def test_adam_matches_reference_recurrence():
    cfg = tiny_cfg()
    lr, b1, b2, eps = 1e-2, cfg.adam_beta1, cfg.adam_beta2, 1e-8
    x = torch.tensor([0.5], dtype=torch.float64, requires_grad=True)
    opt = torch.optim.Adam([x], lr=lr, betas=(b1, b2), eps=eps)
    ref, m, v = 0.5, 0.0, 0.0
    for t in range(1, 101):
        opt.zero_grad()
        ((x - 3.0) ** 2).sum().backward()
        opt.step()
        g = 2 * (ref - 3.0)
        m = b1 * m + (1 - b1) * g
        v = b2 * v + (1 - b2) * g * g
        ref -= lr * (m / (1 - b1**t)) / (math.sqrt(v / (1 - b2**t)) + eps)
        assert x.item() == pytest.approx(ref, abs=1e-10)


def test_trainer_optimizer_settings():
    t = Trainer(TINY_DS, tiny_cfg(learning_rate_g=3e-3, adam_beta1=0.5))
    assert t.opt_g.param_groups[0]["lr"] == 3e-3
    assert t.opt_g.param_groups[0]["betas"] == (0.5, 0.999)
    assert t.opt_d.param_groups[0]["lr"] == 2e-4


# -- config ----------------------------------------------------------------------

@pytest.mark.parametrize("bad", [dict(epochs=0), dict(lam=-1.0), dict(lam=float("nan")),
                                 dict(alternation="RANDOM"), dict(batch_size=0), dict(adam_beta1=1.0)])
def test_config_validation(bad):
    with pytest.raises(ConfigurationError):
        tiny_cfg(**bad)


def test_problems_name_lambda_field():
    cfg = tiny_cfg()
    cfg.lam = -2
    assert ("lambda", "must be a finite non-negative number") in cfg.problems()


def test_derive_seed_stable():
    assert derive_seed(1, 2, 3) == derive_seed(1, 2, 3)
    assert derive_seed(1, 2, 3) != derive_seed(1, 2, 4)
    assert 0 <= derive_seed(0) < 2**63


# -- steps -------------------------------------------------------------------------

@pytest.fixture
def trainer():
    t = Trainer(TINY_DS, tiny_cfg())
    t._begin_epoch(0)
    return t


@pytest.fixture
def batch(trainer):
    return next(trainer.protocol.batches(8, 0))


def test_generator_step_freezes_discriminator(trainer, batch):
    d_before, g_before = _state(trainer.disc), _state(trainer.gen)
    trainer.generator_step(batch)
    assert _same(d_before, _state(trainer.disc))  # weights and BN statistics
    assert not _same(g_before, _state(trainer.gen))
    assert all(p.requires_grad for p in trainer.disc.parameters())


def test_discriminator_step_freezes_generator(trainer, batch):
    d_before, g_before = _state(trainer.disc), _state(trainer.gen)
    trainer.discriminator_step(batch)
    assert _same(g_before, _state(trainer.gen))
    assert not _same(d_before, _state(trainer.disc))


def test_steps_deterministic(batch):
    outs = []
    for _ in range(2):
        t = Trainer(TINY_DS, tiny_cfg())
        t._begin_epoch(0)
        t.discriminator_step(batch)
        t.generator_step(batch)
        outs.append((_state(t.gen), _state(t.disc)))
    assert _same(outs[0][0], outs[1][0]) and _same(outs[0][1], outs[1][1])


def test_generator_loss_uses_label_zero(trainer, batch):
    # with lam = 0 the step loss is exactly -L(0, p) = log p averaged
    trainer.cfg.lam = 0.0
    out = trainer.generator_step(batch)
    assert out["g_loss"] == pytest.approx(-out["adv_term"], rel=1e-12)
    assert out["adv_term"] >= 0


def test_discriminator_separates_toy_problem():
    # two well-separated identities: many D steps drive d_loss down
    ds = DatasetSpec(kind="SYNTHETIC", image_size=32, identities=2, images_per_identity=8, epoch_pair_count=16,
                     seed=1)
    t = Trainer(ds, tiny_cfg(learning_rate_d=1e-3))
    losses = []
    for epoch in range(100):
        t._begin_epoch(epoch)
        for b in t.protocol.batches(16, epoch):
            losses.append(t.discriminator_step(b, with_privatized=False)["d_loss"])
    assert np.mean(losses[-10:]) < 0.1


def test_non_finite_loss_aborts(trainer):
    with torch.no_grad():
        trainer.disc.head[-1].weight.fill_(float("nan"))
    with pytest.raises(NonFiniteLossError):
        trainer.run_epoch()


# -- full loop ----------------------------------------------------------------------

def test_objective_decomposition():
    result = train(TINY_DS, tiny_cfg(lam=2.5))
    seen = 0
    for r in result.records:
        if math.isnan(r.mean_distortion):
            continue
        seen += 1
        expected = r.d_term + r.adv_term + 2.5 * r.mean_distortion
        assert r.objective == pytest.approx(expected, rel=1e-6)
        assert 0 <= r.mean_distortion <= 2
        assert r.g_adv_loss == r.adv_term
    assert seen == len(result.records)


def test_alternation_k_to_1_and_pretrain():
    result = train(TINY_DS, tiny_cfg(alternation="K_TO_1", d_steps=2, d_pretrain_epochs=1, epochs=2))
    first = [r for r in result.records if r.epoch == 0]
    second = [r for r in result.records if r.epoch == 1]
    assert all(math.isnan(r.g_adv_loss) for r in first)
    assert [math.isnan(r.g_adv_loss) for r in second] == [True, False]


def test_train_reproducible(tmp_path):
    a = train(TINY_DS, tiny_cfg(), output_dir=tmp_path / "a")
    b = train(TINY_DS, tiny_cfg(), output_dir=tmp_path / "b")
    assert (tmp_path / "a" / "final.sgap").read_bytes() == (tmp_path / "b" / "final.sgap").read_bytes()
    assert [r.deterministic() for r in a.records] == [r.deterministic() for r in b.records]
    c = train(TINY_DS, tiny_cfg(seed=1))
    assert [r.d_loss for r in a.records] != [r.d_loss for r in c.records]


def test_log_stream(tmp_path):
    result = train(TINY_DS, tiny_cfg(epochs=2), output_dir=tmp_path)
    lines = result.log_path.read_text().splitlines()
    assert len(lines) == len(result.records) == 4
    rec = json.loads(lines[0])
    assert {"epoch", "step", "d_loss", "g_adv_loss", "mean_distortion", "wall_ms"} <= rec.keys()


def test_resume_matches_uninterrupted(tmp_path):
    cfg = tiny_cfg(epochs=4, checkpoint_every=2)
    full = train(TINY_DS, cfg, output_dir=tmp_path / "full")
    train(TINY_DS, cfg, output_dir=tmp_path / "part", stop_after=2)
    ckpt = tmp_path / "part" / "checkpoint_e0002.sgap"
    resumed = train(TINY_DS, cfg, output_dir=tmp_path / "part", resume_from=ckpt)
    tail = [r.deterministic() for r in full.records if r.epoch >= 2]
    assert [r.deterministic() for r in resumed.records] == tail
    assert (tmp_path / "full" / "final.sgap").read_bytes() == (tmp_path / "part" / "final.sgap").read_bytes()
    # the appended log equals the uninterrupted one apart from wall times
    strip = lambda path: [{k: v for k, v in json.loads(l).items() if k != "wall_ms"}
                          for l in path.read_text().splitlines()]
    assert strip(tmp_path / "part" / "train_log.jsonl") == strip(tmp_path / "full" / "train_log.jsonl")


def test_abort_keeps_previous_checkpoint(tmp_path, monkeypatch):
    original = Trainer.run_epoch

    def poisoned(self):
        if self.epoch == 2:
            with torch.no_grad():
                self.disc.head[-1].weight.fill_(float("inf"))
        return original(self)

    monkeypatch.setattr(Trainer, "run_epoch", poisoned)
    with pytest.raises(NonFiniteLossError) as exc:
        train(TINY_DS, tiny_cfg(epochs=4, checkpoint_every=1), output_dir=tmp_path)
    assert exc.value.checkpoint == tmp_path / "checkpoint_e0002.sgap"
    assert exc.value.checkpoint.exists()
    assert exc.value.last_record.epoch == 1


def test_passthrough_generator_trains_discriminator_only():
    cfg = tiny_cfg(generator={"base_channels": 4, "passthrough": True}, epochs=1)
    t = Trainer(TINY_DS, cfg)
    g_before = _state(t.gen)
    t.run_epoch()
    assert _same(g_before, _state(t.gen))


# -- behaviour at the extremes of lambda ---------------------------------------------

EXTREME_DS = DatasetSpec(kind="SYNTHETIC", image_size=32, identities=8, images_per_identity=8, epoch_pair_count=128,
                         seed=0)
EXTREME_NETS = dict(batch_size=16, seed=0, generator={"base_channels": 8},
                    discriminator={"conv_channels": [8, 16, 16], "dense_units": 64})


@pytest.mark.slow
def test_huge_lambda_tracks_input():
    result = train(EXTREME_DS, TrainingConfig(lam=1e6, epochs=10, learning_rate_g=5e-3, **EXTREME_NETS))
    last = [r.mean_distortion for r in result.records if r.epoch == 9]
    assert np.mean(last) < 0.05


@pytest.mark.slow
def test_zero_lambda_fools_discriminator():
    result = train(EXTREME_DS, TrainingConfig(lam=0.0, epochs=20, learning_rate_g=1e-3, **EXTREME_NETS))
    per_epoch = [np.mean([r.mean_prob for r in result.records if r.epoch == e]) for e in range(20)]
    assert per_epoch[0] > 0.9
    assert min(per_epoch) < 0.5
