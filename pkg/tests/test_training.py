import json

import numpy as np
import pytest
import torch

from vmfnet.checkpoint import load_checkpoint
from vmfnet.data import split
from vmfnet.errors import ConfigError, InvalidInputError
from vmfnet.networks import EncoderConfig, ModelConfig, VMFNet
from vmfnet.training import (
    BatchSampler,
    TrainConfig,
    build_optimizer,
    dump_config,
    fit,
    forward_loss,
    load_config,
    make_batch,
    run_ablation,
    train,
)

from .helpers import central_difference, rel_err, sample_indices


def tiny_model_config(size=32):
    enc = EncoderConfig(depth=2, base_channels=4, feature_dim=8, input_size=(size, size))
    return ModelConfig(encoder=enc, num_kernels=4, head_hidden=4)


def tiny_train_config(**kw):
    base = dict(learning_rate=3e-3, iterations=20, batch_size=4, seed=0, log_every=5, model=tiny_model_config())
    base.update(kw)
    return TrainConfig(**base)


def strip_clock(records):
    return [{k: v for k, v in r.items() if k != "wall_clock"} for r in records]


@pytest.fixture(scope="module")
def mixed_batch(small_dataset):
    samples = small_dataset.samples[:3]
    batch = make_batch(samples)
    batch.labeled[:] = torch.tensor([True, False, True])
    return batch


# ------------------------------------------------------------ config


def test_config_defaults():
    cfg = TrainConfig()
    assert cfg.learning_rate == 1e-4
    assert cfg.batch_size == 4
    assert cfg.lambda_dice == 1.0


@pytest.mark.parametrize("kw", [{"learning_rate": 0}, {"batch_size": 0}, {"iterations": -1}, {"labeled_fraction": 0}, {"labeled_fraction": 1.2}])
def test_config_rejects(kw):
    with pytest.raises(ConfigError):
        TrainConfig(**kw)


def test_config_yaml_round_trip(tmp_path):
    cfg = tiny_train_config(labeled_fraction=0.3, use_rec_loss=False)
    dump_config(cfg, tmp_path / "c.yaml")
    back = load_config(tmp_path / "c.yaml")
    assert back.to_dict() == cfg.to_dict()


def test_config_unknown_key(tmp_path):
    (tmp_path / "c.yaml").write_text("learning_rate: 0.1\nmomentum: 0.9\n")
    with pytest.raises(ConfigError, match="momentum"):
        load_config(tmp_path / "c.yaml")
    (tmp_path / "d.yaml").write_text("learning_rate: [\n")
    with pytest.raises(ConfigError):
        load_config(tmp_path / "d.yaml")


# ------------------------------------------------------------ objective


def test_unlabeled_batch_has_no_dice_term(small_dataset, mixed_batch):
    model = VMFNet(tiny_model_config()).eval()
    batch = type(mixed_batch)(mixed_batch.images, mixed_batch.labels, torch.zeros(3, dtype=torch.bool))
    total, rep = forward_loss(model, batch)
    assert rep.dice_loss is None
    assert rep.labeled_count_in_batch == 0
    assert rep.total == rep.rec_loss + rep.vmf_loss


def test_labeled_batch_has_all_terms(mixed_batch):
    model = VMFNet(tiny_model_config()).eval()
    batch = type(mixed_batch)(mixed_batch.images, mixed_batch.labels, torch.ones(3, dtype=torch.bool))
    total, rep = forward_loss(model, batch, lambda_dice=0.7)
    assert rep.dice_loss is not None and rep.dice_loss > 0
    assert rep.total == pytest.approx(0.7 * rep.dice_loss + rep.rec_loss + rep.vmf_loss, rel=1e-6)


def test_lambda_gating_is_per_sample(mixed_batch):
    # eval mode: with batch statistics the other samples would leak in through
    # batch norm regardless of the loss weighting
    model = VMFNet(tiny_model_config()).eval()
    lab = mixed_batch.labeled
    only_labeled = type(mixed_batch)(mixed_batch.images[lab], mixed_batch.labels[lab], lab[lab])
    _, a = forward_loss(model, only_labeled)
    _, b = forward_loss(model, mixed_batch)
    assert b.labeled_count_in_batch == 2
    assert b.dice_loss == pytest.approx(a.dice_loss, rel=1e-6, abs=1e-7)


def test_ablation_switches(mixed_batch):
    model = VMFNet(tiny_model_config()).eval()
    _, full = forward_loss(model, mixed_batch)
    _, none = forward_loss(model, mixed_batch, use_rec=False, use_vmf=False)
    assert none.total == pytest.approx(full.dice_loss, rel=1e-6)
    # the unused terms are still reported
    assert none.rec_loss == full.rec_loss and none.vmf_loss == full.vmf_loss


def test_empty_batch():
    with pytest.raises(InvalidInputError):
        make_batch([])


@pytest.mark.parametrize("dtype,tol", [(torch.float64, 1e-4), (torch.float32, 1e-3)])
def test_total_loss_gradient_matches_finite_differences(small_dataset, dtype, tol):
    enc = EncoderConfig(depth=2, base_channels=4, feature_dim=8, input_size=(16, 16))
    cfg = ModelConfig(encoder=enc, num_kernels=3, head_hidden=4)
    model = VMFNet(cfg, seed=2).double().train()
    imgs = torch.from_numpy(np.stack([s.image[8:24, 8:24] for s in small_dataset.samples[:2]]))[:, None]
    labels = torch.from_numpy(np.stack([s.mask[8:24, 8:24] for s in small_dataset.samples[:2]])).long()
    batch_d = type(make_batch(small_dataset.samples[:1]))(imgs.double(), labels, torch.tensor([True, False]))

    def f():
        return forward_loss(model, batch_d)[0]

    params = dict(model.named_parameters())
    names = ["encoder.inc.0.weight", "encoder.ups.0.conv.3.weight", "kernels.weight", "task.conv1.0.weight",
             "task.out.weight", "reconstructor.up.weight", "reconstructor.out.bias"]
    # analytic gradient at the requested precision, oracle always in double
    work = VMFNet(cfg, seed=2).to(dtype).train()
    work.load_state_dict({k: v.to(dtype) for k, v in model.state_dict().items()})
    batch_w = type(batch_d)(imgs.to(dtype), labels, batch_d.labeled)
    forward_loss(work, batch_w)[0].backward()
    wparams = dict(work.named_parameters())
    for name in names:
        idx = sample_indices(params[name], 12, seed=len(name))
        analytic = wparams[name].grad.reshape(-1)[idx].double()
        numeric = central_difference(f, params[name], idx, 1e-6)
        assert rel_err(analytic, numeric) < tol, name


# ------------------------------------------------------------ optimization


def test_zero_learning_rate_step_leaves_params(mixed_batch):
    model = VMFNet(tiny_model_config()).train()
    before = {k: p.clone() for k, p in model.named_parameters()}
    opt = build_optimizer(model, 0.0)
    total, _ = forward_loss(model, mixed_batch)
    total.backward()
    opt.step()
    for k, p in model.named_parameters():
        assert torch.equal(p, before[k]), k


def test_kernels_unit_norm_after_training(small_dataset):
    train_set, _ = split(small_dataset, "C", 0.5)
    state, _ = fit(tiny_train_config(iterations=30, learning_rate=5e-2), train_set)
    raw = torch.linalg.vector_norm(state.model.kernels.weight, dim=1)
    assert not torch.allclose(raw, torch.ones_like(raw), atol=1e-3)  # the stored weights drift...
    mu = state.model.kernels()
    assert torch.allclose(torch.linalg.vector_norm(mu, dim=1), torch.ones(4), atol=1e-6)  # ...the bank does not


@pytest.mark.parametrize("seed", [0, 1, 2])
def test_loss_halves_in_200_steps_on_four_images(small_dataset, seed):
    four = type(small_dataset)(small_dataset.samples[:4], 3, {})
    cfg = tiny_train_config(iterations=200, batch_size=4, log_every=1, seed=seed, learning_rate=3e-3)
    _, log = fit(cfg, four)
    first, last = log[0], log[-1]
    # the vMF term is negative, so compare the drop against the magnitude
    assert first["total"] - last["total"] >= 0.5 * abs(first["total"])
    nonneg_first = first["dice_loss"] + first["rec_loss"]
    nonneg_last = last["dice_loss"] + last["rec_loss"]
    assert nonneg_last <= 0.5 * nonneg_first


def test_fit_deterministic(small_dataset):
    train_set, _ = split(small_dataset, "A", 0.5, seed=1)
    cfg = tiny_train_config(iterations=10)
    s1, log1 = fit(cfg, train_set)
    s2, log2 = fit(cfg, train_set)
    assert strip_clock(log1) == strip_clock(log2)
    for (k, a), b in zip(s1.model.state_dict().items(), s2.model.state_dict().values()):
        assert torch.equal(a, b), k


def test_batch_sampler_deterministic_and_source_only(small_dataset):
    train_set, _ = split(small_dataset, "B", 1.0)
    a = BatchSampler(train_set, 4, seed=3)
    b = BatchSampler(train_set, 4, seed=3)
    seq_a = [a.next_indices() for _ in range(20)]
    assert seq_a == [b.next_indices() for _ in range(20)]
    used = {train_set.samples[i].domain_id for batch in seq_a for i in batch}
    assert "B" not in used


def test_train_outputs_on_disk(small_dataset, tmp_path):
    cfg = tiny_train_config(iterations=10, checkpoint_every=5, log_every=4, labeled_fraction=0.25)
    result = train(cfg, small_dataset, "A", tmp_path)
    names = sorted(p.name for p in (tmp_path / "checkpoints").iterdir())
    assert names == ["final.ckpt", "iter_000005.ckpt", "iter_000010.ckpt"]
    lines = [json.loads(line) for line in (tmp_path / "metrics.jsonl").read_text().splitlines()]
    assert [r["iteration"] for r in lines] == [4, 8, 10]
    assert {"iteration", "dice_loss", "rec_loss", "vmf_loss", "total", "labeled_count", "wall_clock"} <= set(lines[0])
    assert load_config(tmp_path / "config.yaml").to_dict() == cfg.to_dict()
    final = load_checkpoint(tmp_path / "checkpoints" / "final.ckpt")
    assert final.meta["holdout_domain"] == "A"
    assert final.iteration == 10
    for a, b in zip(result.state.model.state_dict().values(), final.model.state_dict().values()):
        assert torch.equal(a, b)
    assert result.test_set.domains == ["A"]
    assert "A" not in result.train_set.domains


def test_train_rejects_unknown_holdout(small_dataset):
    with pytest.raises(ConfigError, match="A.*B.*C"):
        train(tiny_train_config(), small_dataset, "Z")


def test_train_ceil_rule_point_one(default_dataset):
    train_set, _ = split(default_dataset, "D", 0.1, seed=0)
    for d in train_set.domains:
        assert len({s.subject_id for s in train_set.samples if s.domain_id == d and s.labeled}) == 1


def test_ablation_runs_all_variants(small_dataset):
    rows = run_ablation(tiny_train_config(iterations=3), small_dataset, "C")
    assert [r["variant"] for r in rows] == ["full", "no_rec", "no_vmf", "neither"]
    for r in rows:
        assert 0 <= r["dice"] <= 100
        assert np.isfinite(r["final_total_loss"])
