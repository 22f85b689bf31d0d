import csv
import warnings

import numpy as np
import pytest

from rivercast import autodiff as ad
from rivercast import grc
from rivercast import training as tr
from rivercast.network import generate_network
from rivercast.oracle import OraclePhysics, make_observations, route, synthesize_runoff
from rivercast.pipeline import Dataset, SplitSpec


@pytest.fixture(scope="module")
def data():
    g, f = generate_network(10, 0.3, 1)
    forcing = synthesize_runoff(g, f, 260, 1)
    with warnings.catch_warnings():
        warnings.simplefilter("ignore", RuntimeWarning)
        truth = route(g, f, forcing)
        obs = make_observations(OraclePhysics(), OraclePhysics(manning_scale=1.3), g, f, forcing)
    split = SplitSpec.from_lengths(180, 40, 40)
    ds = Dataset(g, f, forcing, truth, split)
    return ds, Dataset(g, f, forcing, obs, split, ds.norm)


def tiny_cfg(mode="coldstart", **kw):
    base = dict(mode=mode, h_lag=4, f_horizon=3, d_fusion=8, d_hidden=6)
    base.update(kw)
    return grc.GrcConfig(**base)


def tiny_train(**kw):
    base = dict(epochs=3, batch=8, lr=3e-3, stride=4, val_stride=7, max_batches=4)
    base.update(kw)
    return tr.TrainConfig(**base)


def _params(**arrays):
    return grc.GrcParams({k: ad.Tensor(np.asarray(v, float), requires_grad=True, name=k) for k, v in arrays.items()})


def test_loss_examples():
    p = _params(**{"readout.w": [[0.0]]})
    pred = ad.Tensor(np.array([1.0, 2.0]))
    assert tr.loss(pred, np.array([1.0, 2.0]), p).value == 0.0
    assert tr.loss(ad.Tensor(np.array([1.0, 3.0])), np.array([0.0, 2.0]), p).value == 1.0
    w = _params(**{"readout.w": [[2.0]], "readout.b": [5.0]})
    assert tr.loss(pred, np.array([1.0, 2.0]), w, weight_decay=0.1).value == pytest.approx(0.4, abs=1e-15)


def test_plateau_trace():
    s = tr.PlateauScheduler(1e-3, 0.3, 5)
    lrs = [s.step(m) for m in [1.0] + [1.0] * 5]
    assert lrs[:5] == [1e-3] * 5
    assert lrs[5] == pytest.approx(3e-4, rel=1e-12)


def test_early_stopping_after_patience():
    es = tr.EarlyStopping(10)
    assert not es.step(1.0, 0)
    flags = [es.step(2.0, e) for e in range(1, 11)]
    assert flags == [False] * 9 + [True] and es.best_epoch == 0


def test_adam_quadratic_bowl():
    target = np.array([1.5, -2.0, 0.25])
    x = ad.Tensor(np.zeros(3), requires_grad=True, name="x")
    opt = tr.Adam({"x": x}, lr=0.05)
    for _ in range(5000):
        x.grad = None
        with ad.Tape() as tape:
            value = ad.sum_all(ad.square(ad.sub(x, target)))
            tape.backward(value, [x])
        opt.step({"x": x})
        if np.abs(x.value - target).max() <= 1e-6:
            break
    assert np.abs(x.value - target).max() <= 1e-6


def test_adam_zero_scale_freezes():
    a = ad.Tensor(np.ones(2), requires_grad=True)
    b = ad.Tensor(np.ones(2), requires_grad=True)
    a.grad, b.grad = np.ones(2), np.ones(2)
    tr.Adam({"a": a, "b": b}, lr=0.1, lr_scale={"a": 0.0, "b": 1.0}).step({"a": a, "b": b})
    assert np.all(a.value == 1.0) and np.all(b.value < 1.0)


def test_train_config_validation():
    with pytest.raises(ValueError):
        tr.TrainConfig(epochs=0)
    with pytest.raises(ValueError):
        tr.TrainConfig(plateau_factor=1.5)


def test_smoke_training_reduces_loss(data):
    ds, _ = data
    res = tr.pretrain(tiny_cfg(), tiny_train(epochs=6, max_batches=None, stride=2), ds)
    assert res.log[-1]["train_loss"] < res.log[0]["train_loss"]
    assert res.log[-1]["val_loss"] < res.log[0]["val_loss"]
    assert res.best_val == min(r["val_loss"] for r in res.log)


def test_training_is_deterministic(data):
    ds, _ = data
    a = tr.pretrain(tiny_cfg("hotstart"), tiny_train(epochs=2), ds)
    b = tr.pretrain(tiny_cfg("hotstart"), tiny_train(epochs=2), ds)
    assert all(a.params[n].value.tobytes() == b.params[n].value.tobytes() for n in a.params)
    assert a.log == b.log


def test_train_log_csv(tmp_path, data):
    ds, _ = data
    res = tr.pretrain(tiny_cfg(), tiny_train(epochs=2), ds)
    res.write_log(tmp_path / "log.csv")
    rows = list(csv.DictReader(open(tmp_path / "log.csv")))
    assert [r["epoch"] for r in rows] == ["0", "1"]


def test_ablation_matrix_budget_parity(data):
    ds, _ = data
    logged = {}
    out = tr.run_ablation_matrix(ds, tiny_cfg(), tiny_train(epochs=2, early_stop_patience=50),
                                 log_fn=lambda k, row: logged.setdefault(k, []).append(row))
    assert len(out) == 8 and set(out) == set(tr.all_variants())
    assert {len(v) for v in logged.values()} == {2}
    assert all(isinstance(r, tr.TrainResult) for r in out.values())
    assert out[frozenset()].cfg.variant == "none"
    with pytest.raises(ValueError):
        tr.variant_config(tiny_cfg(), {"Space"})


def test_finetune_zero_epochs_is_identity(data):
    ds, obs = data
    cfg = tiny_cfg()
    params = grc.init_params(cfg, 0)
    res = tr.finetune(cfg, params, obs, [0, 1], tr.FinetuneConfig(epochs=0))
    assert all(res.params[n].value.tobytes() == params[n].value.tobytes() for n in params)


def test_finetune_touches_only_tuned_layers(data):
    ds, obs = data
    cfg = tiny_cfg()
    params = tr.pretrain(cfg, tiny_train(epochs=1), ds).params
    ft = tr.FinetuneConfig(base_lr=1e-2, epochs=2, max_batches=3, stride=4)
    res = tr.finetune(cfg, params, obs, [0, 2, 5], ft)
    frozen, tuned = ft.layer_plan(cfg)
    assert tuned == {"gcn2": 0.1, "readout": 1.0}
    assert tr.frozen_unchanged(params, res.params, frozen)
    assert any(res.params[n].value.tobytes() != params[n].value.tobytes() for n in res.params.names_in("readout"))


def test_layer_plan_rejects_overlap():
    with pytest.raises(ValueError):
        tr.FinetuneConfig(frozen=("readout",), tuned={"readout": 1.0}).layer_plan(tiny_cfg())


def test_unknown_gauge_rejected(data):
    _, obs = data
    with pytest.raises(ValueError, match="not in graph"):
        tr.gauge_mask(obs.n_reaches, [3, 99])
    mask = tr.gauge_mask(obs.n_reaches, [3])
    assert mask.sum() == 1 and mask[3, 0, 0] == 1


def test_sweep_rows_and_notice(tmp_path, data, caplog):
    ds, obs = data
    cfg = tiny_cfg()
    params = tr.pretrain(cfg, tiny_train(epochs=1), ds).params
    ft = tr.FinetuneConfig(base_lr=1e-3, epochs=1, max_batches=2, stride=4)
    sweep = tr.finetune_ratio_sweep(cfg, params, obs, range(8), [0.25, 0.5, 1.0], ft,
                                    scratch_cfg=tiny_train(epochs=1, max_batches=2))
    for a, b in zip(sweep.gauge_sets, sweep.gauge_sets[1:]):
        assert a.supervised <= b.supervised
    assert [r["n_supervised"] for r in sweep.rows] == [2, 4, 8]
    last = sweep.rows[-1]
    assert last["foundation_unsup_nse"] is None and "skipped" in last["notice"]
    assert "skipped" in caplog.text
    sweep.write_csv(tmp_path / "sweep.csv")
    rows = list(csv.DictReader(open(tmp_path / "sweep.csv")))
    assert len(rows) == 3 and rows[-1]["foundation_unsup_nse"] == ""
