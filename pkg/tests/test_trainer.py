import math

import numpy as np
import pytest
import torch

from anlcl.checkpoint import load_checkpoint, save_checkpoint
from anlcl.config import TrainConfig
from anlcl.data import RainParams, SynthDataset, write_synth_dataset
from anlcl.errors import ConfigError, FormatError
from anlcl.losses import COMPONENTS
from anlcl.trainer import Trainer, pairwise_mean_distance


def tiny_config(**overrides) -> TrainConfig:
    base = {
        "crop": 80, "batch_size": 2, "pretrain_iters": 2, "finetune_iters": 2, "seed": 3, "probe_count": 2,
        "network": {"ngf": 4, "ndf": 4, "n_blocks": 1, "proj_dim": 16},
        "sampler": {"num_pos": 4, "num_neg": 12, "num_loc": 12, "loc_anchors": 3},
    }
    cfg = TrainConfig.from_dict(base)
    return cfg.with_overrides(overrides) if overrides else cfg


@pytest.fixture(scope="module")
def toy(tmp_path_factory):
    root = write_synth_dataset(tmp_path_factory.mktemp("toy"), 4, RainParams(streak_count=15), seed=0, size=96)
    return SynthDataset(root)


def params_of(module):
    return [p.detach().clone() for p in module.parameters()]


def same(a, b):
    return all(torch.equal(x, y) for x, y in zip(a, b))


def test_zero_iterations_pass_through(toy):
    tr = Trainer(tiny_config(), toy)
    before = params_of(tr.nets.g_b) + params_of(tr.nets.disc)
    tr.pretrain(0)
    tr.finetune(0)
    assert same(before, params_of(tr.nets.g_b) + params_of(tr.nets.disc))
    assert tr.iteration == 0 and not tr.loss_log


def test_loss_log_finite_and_curve_recorded(toy):
    tr = Trainer(tiny_config(), toy)
    tr.pretrain(2)
    tr.finetune(2)
    assert len(tr.loss_log) == 4
    for rec in tr.loss_log:
        assert all(math.isfinite(rec[k]) for k in COMPONENTS + ("l_sup", "l_disc"))
    assert [r["stage"] for r in tr.loss_log] == ["pretrain"] * 2 + ["finetune"] * 2
    assert all(r["eta"] in (1, -1) for r in tr.loss_log[2:])
    assert len(tr.curve) >= 2
    assert all(min(r["intra_B"], r["intra_R"], r["inter_BR"]) >= 0 for r in tr.curve.records)


def test_empty_dataset_rejected(tmp_path):
    with pytest.raises(ConfigError):
        Trainer(tiny_config(), None).pretrain(1)


def test_determinism_ten_steps(toy):
    logs = []
    for _ in range(2):
        tr = Trainer(tiny_config(), toy)
        tr.pretrain(5)
        tr.finetune(5)
        logs.append(tr.loss_log)
    assert logs[0] == logs[1]


def test_checkpoint_round_trip(toy, tmp_path):
    tr = Trainer(tiny_config(), toy)
    tr.pretrain(1)
    tr.save(tmp_path / "a.ckpt")
    back = Trainer.from_checkpoint(tmp_path / "a.ckpt", toy)
    back.save(tmp_path / "b.ckpt")
    assert (tmp_path / "a.ckpt").read_bytes() == (tmp_path / "b.ckpt").read_bytes()
    assert back.iteration == 1
    for name, module in tr.nets.groups().items():
        other = back.nets.groups()[name].state_dict()
        for key, value in module.state_dict().items():
            assert torch.equal(value, other[key]), (name, key)
    raw = (tmp_path / "a.ckpt").read_bytes()
    (tmp_path / "cut.ckpt").write_bytes(raw[: len(raw) // 2])
    with pytest.raises(FormatError):
        load_checkpoint(tmp_path / "cut.ckpt")
    (tmp_path / "bad.ckpt").write_bytes(b"XXXX" + raw[4:])
    with pytest.raises(FormatError):
        load_checkpoint(tmp_path / "bad.ckpt")


def test_checkpoint_plain_state_dict(tmp_path):
    state = {"groups": {"w": {"x": torch.arange(6.0).reshape(2, 3)}}, "meta": {"k": 1}}
    save_checkpoint(state, tmp_path / "s.ckpt")
    back = load_checkpoint(tmp_path / "s.ckpt")
    assert torch.equal(back["groups"]["w"]["x"], state["groups"]["w"]["x"]) and back["meta"] == {"k": 1}


def test_finetune_with_zero_contrastive_weights_matches_pretrain(toy):
    cfg = tiny_config(**{"loss_weights.w_loc": 0.0, "loss_weights.w_layer": 0.0,
                         "loss_weights.w_asy": 0.0, "w_supervised": 0.0})
    a, b = Trainer(cfg, toy), Trainer(cfg, toy)
    a.pretrain(1)
    b.finetune(1)
    for name in ("l_mse", "l_sparse", "l_adv", "l_disc"):
        assert a.loss_log[0][name] == b.loss_log[0][name]
    assert same(params_of(a.nets.g_b), params_of(b.nets.g_b))


@pytest.mark.parametrize("off", ["w_loc", "w_layer", "w_asy", "w_sparse"])
def test_ablation_changes_one_column(toy, off):
    full = Trainer(tiny_config(), toy)
    full.finetune(1)
    abl = Trainer(tiny_config(**{f"loss_weights.{off}": 0.0}), toy)
    abl.finetune(1)
    column = {"w_loc": "l_loc", "w_layer": "l_layer", "w_asy": "l_asy", "w_sparse": None}[off]
    for name in COMPONENTS + ("eta",):
        if name == column:
            assert abl.loss_log[0][name] == 0.0 != full.loss_log[0][name]
        else:
            assert abl.loss_log[0][name] == full.loss_log[0][name], name


def test_updates_touch_only_their_own_parameters(toy):
    tr = Trainer(tiny_config(), toy)
    batch = next(toy.batches(2, 80, 0))
    g0, d0 = params_of(tr.nets.g_b) + params_of(tr.nets.g_r), params_of(tr.nets.disc)
    # a step with the discriminator optimiser disabled leaves D untouched
    d_step, tr.opt_d.step = tr.opt_d.step, lambda *a, **k: None
    tr.step(batch, "finetune")
    assert same(d0, params_of(tr.nets.disc))
    assert not same(g0, params_of(tr.nets.g_b) + params_of(tr.nets.g_r))
    # and with the generator optimiser disabled G stays put while D moves
    tr.opt_d.step = d_step
    g1, d1 = params_of(tr.nets.g_b) + params_of(tr.nets.g_r), params_of(tr.nets.disc)
    tr.opt_g.step = lambda *a, **k: None
    tr.step(batch, "finetune")
    assert same(g1, params_of(tr.nets.g_b) + params_of(tr.nets.g_r))
    assert not same(d1, params_of(tr.nets.disc))


def test_optimiser_groups_are_disjoint(toy):
    tr = Trainer(tiny_config(), toy)
    g = {id(p) for p in tr._g_params}
    d = {id(p) for p in tr._d_params}
    assert not g & d
    assert {id(p) for p in tr.nets.g_b.parameters()} <= g
    assert {id(p) for p in tr.nets.disc.parameters()} <= d


def test_track_distances_matches_loop_oracle(toy):
    tr = Trainer(tiny_config(), toy)
    probes = tr.probe_images()
    rec = tr.track_distances(probes)
    embs = tr.probe_embeddings(probes)

    def loop_mean(a, b=None):
        vals = []
        for i in range(len(a)):
            for j in range(len(b) if b is not None else len(a)):
                if b is None and j <= i:
                    continue
                other = b[j] if b is not None else a[j]
                vals.append(math.sqrt(sum((float(x) - float(y)) ** 2 for x, y in zip(a[i], other))))
        return sum(vals) / len(vals)

    assert rec["intra_B"] == pytest.approx(np.mean([loop_mean(fb) for fb, _ in embs]), rel=1e-9)
    assert rec["intra_R"] == pytest.approx(np.mean([loop_mean(fr) for _, fr in embs]), rel=1e-9)
    assert rec["inter_BR"] == pytest.approx(np.mean([loop_mean(fb, fr) for fb, fr in embs]), rel=1e-9)
    tr.track_distances(probes)
    assert len(tr.curve) == 2
    assert pairwise_mean_distance(np.ones((5, 3))) == 0.0


def test_derain_any_size(toy):
    tr = Trainer(tiny_config(), toy)
    B, R = tr.derain(toy.rainy[0][:90, :83])
    assert B.shape == R.shape == (90, 83, 3)
    assert 0 <= B.min() and B.max() <= 1


def test_write_logs(toy, tmp_path):
    tr = Trainer(tiny_config(), toy)
    tr.finetune(1)
    tr.write_logs(tmp_path)
    header = (tmp_path / "loss_log.csv").read_text().splitlines()[0].split(",")
    assert header[:8] == ["iter", "stage", "l_mse", "l_sparse", "l_adv", "l_loc", "l_layer", "l_asy"]
    assert (tmp_path / "distance_curve.csv").read_text().startswith("epoch,iter,intra_B")


def test_finetune_lr_only_slows_the_generators(toy):
    tr = Trainer(tiny_config(lr=2e-4, finetune_lr=2e-5), toy)
    tr.pretrain(1)
    assert {g["lr"] for g in tr.opt_g.param_groups} == {2e-4}
    tr.finetune(1)
    assert {g["lr"] for g in tr.opt_g.param_groups} == {2e-5}
    assert {g["lr"] for g in tr.opt_d.param_groups} == {2e-4}
    with pytest.raises(ConfigError):
        tiny_config(finetune_lr="fast")
