"""Loss semantics, sample construction, the optimizer, and checkpointing."""

import numpy as np
import pytest

from stlgt.config import ModelConfig, TrainConfig
from stlgt.model_train import (AdamW, Normalizer, Samples, batch_loss,
                               clip_gradients, evaluate, forward,
                               load_checkpoint, make_samples,
                               persistence_metrics, pinball, predict,
                               save_checkpoint, split_windows, train)
from stlgt.numeric_core import Tape, Tensor, as_tensor
from stlgt.span_graph import SpanGraph, StageNode, WindowFeatures
from stlgt.spatial_encoder import build_operators

RNG = np.random.default_rng(55)


def tiny_cfg(**kw):
    base = dict(d=8, d_in=9, d_c=7, rho=0.5, encoder_blocks=1,
                L=4, H=2, B=1, K=1, decoder="timesnet")
    base.update(kw)
    return ModelConfig(**base)


def tiny_graph(n=3):
    nodes = tuple(StageNode(i, "client" if i == 0 else f"s{i-1}", f"s{i}")
                  for i in range(n))
    return SpanGraph("api", nodes, tuple((i, i + 1) for i in range(n - 1)))


def fake_windows(ts, n=3, seed=0):
    rng = np.random.default_rng(seed)
    out = []
    for t in ts:
        out.append(WindowFeatures(
            t=t,
            X=rng.normal(size=(n, 9)),
            c=rng.normal(size=7),
            y=float(50 + 10 * np.sin(t / 3) + rng.normal(0, 0.5)),
            trace_count=int(rng.integers(50, 200)),
        ))
    return out


# --------------------------------------------------------------------------
# pinball loss

def test_pinball_values():
    q = 0.95
    # under-prediction of 2 ms costs q * 2
    assert pinball(as_tensor(np.array(10.0)),
                   as_tensor(np.array(8.0)), q).item() == pytest.approx(1.9)
    # over-prediction of 2 ms costs (1 - q) * 2
    assert pinball(as_tensor(np.array(8.0)),
                   as_tensor(np.array(10.0)), q).item() == pytest.approx(0.1)


def test_pinball_asymmetry_ratio_19():
    q = 0.95
    for u in (0.5, 1.0, 7.25):
        under = pinball(as_tensor(np.array(u)), as_tensor(np.array(0.0)), q).item()
        over = pinball(as_tensor(np.array(0.0)), as_tensor(np.array(u)), q).item()
        assert under / over == pytest.approx(19.0)


def test_pinball_median_is_symmetric():
    u = 3.0
    lo = pinball(as_tensor(np.array(u)), as_tensor(np.array(0.0)), 0.5).item()
    hi = pinball(as_tensor(np.array(0.0)), as_tensor(np.array(u)), 0.5).item()
    assert lo == pytest.approx(hi) == pytest.approx(1.5)


def test_batch_loss_is_mean_over_all_entries():
    pred = as_tensor(np.zeros((2, 3)))
    targ = as_tensor(np.array([[1.0, 1.0, 1.0], [-1.0, -1.0, -1.0]]))
    # half under by 1 (cost q), half over by 1 (cost 1-q) -> mean 0.5
    assert batch_loss(pred, targ, 0.95).item() == pytest.approx(0.5)


def test_batch_loss_shape_mismatch():
    from stlgt.numeric_core import ShapeError
    with pytest.raises(ShapeError):
        batch_loss(as_tensor(np.zeros((2, 3))), as_tensor(np.zeros((3, 2))), 0.9)


# --------------------------------------------------------------------------
# splits and samples

def test_split_windows_positional():
    ws = fake_windows(range(20))
    tr, va, te = split_windows(ws, 0.70, 0.15)
    assert [w.t for w in tr] == list(range(14))
    assert [w.t for w in va] == [14, 15, 16]
    assert [w.t for w in te] == [17, 18, 19]


def test_make_samples_counts():
    # L + H = 6; 6 windows -> 1 sample, 7 -> 2
    assert len(make_samples(fake_windows(range(6)), 4, 2)) == 1
    assert len(make_samples(fake_windows(range(7)), 4, 2)) == 2


def test_make_samples_respects_gaps():
    # runs [0..5] and [10..15]: each yields exactly one sample; none cross
    ws = fake_windows(list(range(6)) + list(range(10, 16)))
    s = make_samples(ws, 4, 2)
    assert len(s) == 2
    assert list(s.origins) == [3, 13]


def test_make_samples_no_leakage():
    ws = fake_windows(range(8))
    s = make_samples(ws, 4, 2)
    by_t = {w.t: w for w in ws}
    for i, origin in enumerate(s.origins):
        hist = [by_t[t].y for t in range(origin - 3, origin + 1)]
        fut = [by_t[t].y for t in range(origin + 1, origin + 3)]
        assert s.y_origin[i] == pytest.approx(by_t[origin].y)
        assert np.allclose(s.y[i], fut)
        assert s.x.shape[1:] == (4, 3, 9)
        del hist


def test_make_samples_empty_warns():
    with pytest.warns(UserWarning):
        s = make_samples(fake_windows(range(3)), 4, 2)
    assert len(s) == 0


# --------------------------------------------------------------------------
# normalizer

def test_normalizer_round_trip_and_floor():
    ws = fake_windows(range(12), seed=3)
    norm = Normalizer.fit(ws)
    y = np.array([w.y for w in ws])
    assert np.allclose(norm.denorm_y(norm.norm_y(y)), y, atol=1e-9)
    x = np.stack([w.X for w in ws])
    assert np.allclose(norm.norm_x(x).mean(axis=(0, 1)), 0.0, atol=1e-9)
    back = Normalizer.from_dict(norm.to_dict())
    assert np.allclose(back.norm_y(y), norm.norm_y(y), atol=0)


def test_normalizer_constant_feature_is_safe():
    ws = fake_windows(range(6))
    frozen = [WindowFeatures(w.t, np.zeros_like(w.X), w.c, w.y, w.trace_count)
              for w in ws]
    norm = Normalizer.fit(frozen)
    out = norm.norm_x(np.zeros_like(frozen[0].X))
    assert np.isfinite(out).all()


# --------------------------------------------------------------------------
# optimizer

def test_adamw_zero_lr_is_pure_shrinkage():
    p = Tensor(np.array([2.0, -4.0]), requires_grad=True)
    opt = AdamW({"p": p}, lr=0.0, weight_decay=0.01)
    p.grad = np.array([100.0, -100.0])   # should be ignored at lr=0
    opt.step()
    assert np.allclose(p.data, [2.0 * 0.99, -4.0 * 0.99], atol=1e-15)


def test_adamw_decay_not_scaled_by_lr():
    # two optimizers with different lr but the same wd shrink identically
    # when gradients are zero
    a = Tensor(np.array([1.0]), requires_grad=True)
    b = Tensor(np.array([1.0]), requires_grad=True)
    for p, lr in ((a, 1e-3), (b, 1e-1)):
        opt = AdamW({"p": p}, lr=lr, weight_decay=0.5)
        p.grad = np.array([0.0])
        opt.step()
    assert a.data == pytest.approx(b.data)
    assert a.data == pytest.approx(0.5)


def test_adamw_wd_zero_leaves_params_without_grad():
    p = Tensor(np.array([3.0]), requires_grad=True)
    opt = AdamW({"p": p}, lr=1e-2, weight_decay=0.0)
    opt.step()   # no grad set -> skipped entirely
    assert p.data == pytest.approx(3.0)


def test_adamw_descends_quadratic():
    p = Tensor(np.array([5.0]), requires_grad=True)
    opt = AdamW({"p": p}, lr=0.1, weight_decay=0.0)
    for _ in range(200):
        p.grad = 2.0 * p.data
        opt.step()
    assert abs(float(p.data[0])) < 0.1


def test_clip_gradients_global_norm():
    a = Tensor(np.zeros(3), requires_grad=True)
    b = Tensor(np.zeros(4), requires_grad=True)
    a.grad = np.full(3, 10.0)
    b.grad = np.full(4, 10.0)
    before = np.sqrt(7 * 100.0)
    norm = clip_gradients({"a": a, "b": b}, max_norm=1.0)
    assert norm == pytest.approx(before)
    total = np.sqrt((a.grad ** 2).sum() + (b.grad ** 2).sum())
    assert total == pytest.approx(1.0)
    # ratios preserved
    assert np.allclose(a.grad / b.grad[0], np.ones(3))


# --------------------------------------------------------------------------
# training loop

def _pipeline(seed=0, n_windows=40, **cfg_kw):
    cfg = tiny_cfg(**cfg_kw)
    tcfg = TrainConfig(max_epochs=3, patience=2, batch_size=8, seed=seed)
    graph = tiny_graph()
    ws = fake_windows(range(n_windows), seed=9)
    tr, va, te = split_windows(ws, tcfg.train_frac, tcfg.val_frac)
    norm = Normalizer.fit(tr)
    ops = build_operators(graph)
    s_tr = make_samples(tr, cfg.L, cfg.H)
    s_va = make_samples(va, cfg.L, cfg.H)
    s_te = make_samples(te, cfg.L, cfg.H)
    result = train(s_tr, s_va, cfg, tcfg, ops, norm)
    return cfg, tcfg, graph, ops, norm, result, s_te, ws


def test_training_is_deterministic():
    *_, r1, _, _ = _pipeline(seed=4)
    *_, r2, _, _ = _pipeline(seed=4)
    assert [e.train_pinball for e in r1.report] == [e.train_pinball
                                                    for e in r2.report]
    assert [e.val_mae_ms for e in r1.report] == [e.val_mae_ms for e in r2.report]
    for k in r1.params:
        assert np.array_equal(r1.params[k].data, r2.params[k].data)


def test_training_seed_changes_run():
    *_, r1, _, _ = _pipeline(seed=1)
    *_, r2, _, _ = _pipeline(seed=2)
    assert any(not np.array_equal(r1.params[k].data, r2.params[k].data)
               for k in r1.params)


def test_evaluate_and_persistence_shapes():
    cfg, tcfg, _, ops, norm, result, s_te, _ = _pipeline()
    m = evaluate(result.params, cfg, ops, norm, s_te, tcfg.q)
    p = persistence_metrics(s_te, tcfg.q)
    assert m.pinball_ms.shape == (cfg.H,) and p.mae_ms.shape == (cfg.H,)
    assert m.mean_pinball > 0 and p.mean_pinball > 0


def test_checkpoint_round_trip_bit_identical(tmp_path):
    cfg, tcfg, graph, ops, norm, result, s_te, ws = _pipeline()
    p1 = tmp_path / "m1.ckpt"
    p2 = tmp_path / "m2.ckpt"
    save_checkpoint(p1, result.params, cfg, tcfg, norm, graph)
    params, cfg2, tcfg2, norm2, graph2 = load_checkpoint(p1)
    save_checkpoint(p2, params, cfg2, tcfg2, norm2, graph2)
    assert p1.read_bytes() == p2.read_bytes()
    assert cfg2 == cfg and tcfg2 == tcfg and graph2 == graph
    for k in result.params:
        assert np.array_equal(params[k].data, result.params[k].data)


def test_checkpoint_rejects_bad_magic(tmp_path):
    p = tmp_path / "bad.ckpt"
    p.write_bytes(b"NOTMAGIC" + b"\x00" * 32)
    with pytest.raises(ValueError):
        load_checkpoint(p)


def test_predict_matches_forward(tmp_path):
    cfg, tcfg, graph, ops, norm, result, s_te, ws = _pipeline()
    hist = ws[-cfg.L:]
    fc = predict(result.params, cfg, ops, norm, hist)
    assert fc.origin_t == ws[-1].t
    assert len(fc.yhat_ms) == cfg.H
    # same history through the batched path
    x = np.stack([norm.norm_x(w.X) for w in hist])[None]
    c = np.stack([norm.norm_c(w.c) for w in hist])[None]
    out = forward(result.params, cfg, ops, as_tensor(x), as_tensor(c)).data
    assert np.allclose(fc.yhat_ms, norm.denorm_y(out[0]), atol=1e-9)


def test_predict_validates_history(tmp_path):
    cfg, tcfg, graph, ops, norm, result, s_te, ws = _pipeline()
    with pytest.raises(ValueError):
        predict(result.params, cfg, ops, norm, ws[-(cfg.L - 1):])
    wrong = WindowFeatures(ws[-1].t + 1, np.zeros((7, 9)), ws[-1].c,
                           ws[-1].y, 5)
    with pytest.raises(ValueError):
        predict(result.params, cfg, ops, norm, ws[-(cfg.L - 1):] + [wrong])


def test_report_csv_round_trip(tmp_path):
    *_, result, _, _ = _pipeline()
    path = tmp_path / "report.csv"
    from stlgt.model_train import write_training_report
    write_training_report(path, result.report)
    rows = path.read_text().strip().splitlines()
    assert rows[0] == "epoch,train_pinball,val_pinball,val_mae_ms"
    assert len(rows) == len(result.report) + 1
    got = float(rows[1].split(",")[1])
    assert got == pytest.approx(result.report[0].train_pinball, rel=0, abs=0)
