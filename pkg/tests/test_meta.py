import dataclasses
import math

import numpy as np
import pytest

from generallog import meta, neural
from generallog.data import LogSequence
from generallog.embedding import EventEmbedding
from generallog.errors import DivergedTask, InsufficientData, MetaStepFailed, NoLabels, OneDomainOnly
from oracles import bce, forward_loop, head_loop, sigmoid

D, H = 3, 4


def toy_data(seed=0, n_src=8, n_tgt=6, labels=None):
    rng = np.random.default_rng(seed)
    src = [rng.standard_normal((int(rng.integers(1, 5)), D)) for _ in range(n_src)]
    tgt = [rng.standard_normal((int(rng.integers(1, 5)), D)) for _ in range(n_tgt)]
    if labels is None:
        labels = [1, 0, 0, 1, 0, 0, 0, 0, 1, 0, 0, 0][:n_src]
    return meta.DomainDataset(src, labels, tgt)


def toy_cfg(**kw):
    base = dict(delta=0.1, alpha=0.2, beta=0.3, gamma=1.0, support_size=4, query_size=4, hidden=H,
                epochs=3, head_lr=0.1, tasks_per_meta_batch=2, cap_adversarial=False)
    base.update(kw)
    return meta.TrainConfig(**base)


def toy_params(seed=0):
    p = neural.init_params(D, H, seed)
    rng = np.random.default_rng(seed + 50)
    return {k: v + 0.3 * rng.standard_normal(v.shape) for k, v in p.items()}


def fd_grad(fn, params, names, step=1e-5):
    out = {}
    for name in names:
        g = np.zeros_like(params[name])
        for idx in np.ndindex(g.shape):
            plus = {k: v.copy() for k, v in params.items()}
            minus = {k: v.copy() for k, v in params.items()}
            plus[name][idx] += step
            minus[name][idx] -= step
            g[idx] = (fn(plus) - fn(minus)) / (2 * step)
        out[name] = g
    return out


def side_value(data, side, cfg):
    return lambda p: meta.task_objective(data, side, p, cfg, wrt=())[0].total


# sample_meta_task

def test_disjoint_four_four_split():
    data = toy_data()
    task = meta.sample_meta_task(data, toy_cfg(), np.random.default_rng(1))
    assert len(task.support.source) == 4 and len(task.query.source) == 4
    assert set(task.support.source).isdisjoint(task.query.source)
    assert sorted(set(task.support.source) | set(task.query.source)) == list(range(8))


def test_single_class_source_is_unstratified():
    data = toy_data(labels=[0] * 8)
    task = meta.sample_meta_task(data, toy_cfg(), np.random.default_rng(1))
    assert task.unstratified
    assert len(task.support.source) == 4


def test_sampling_is_deterministic():
    data = toy_data(n_src=12, n_tgt=20)
    a = meta.sample_meta_task(data, toy_cfg(), np.random.default_rng(5))
    b = meta.sample_meta_task(data, toy_cfg(), np.random.default_rng(5))
    for side in ("support", "query"):
        for part in ("source", "target"):
            assert np.array_equal(getattr(getattr(a, side), part), getattr(getattr(b, side), part))


def test_stratification_keeps_anomaly_ratio():
    labels = [1] * 10 + [0] * 90
    data = toy_data(n_src=100, n_tgt=10, labels=labels)
    cfg = toy_cfg(support_size=30, query_size=30)
    rng = np.random.default_rng(0)
    for _ in range(20):
        task = meta.sample_meta_task(data, cfg, rng)
        for side in (task.support, task.query):
            n_anom = int(data.source_y[side.source].sum())
            assert abs(n_anom - 3) <= 1


def test_insufficient_source():
    with pytest.raises(InsufficientData):
        meta.sample_meta_task(toy_data(n_src=5), toy_cfg(), np.random.default_rng(0))


# losses

def test_domain_loss_zero_head_is_ln2():
    data = toy_data()
    p = toy_params()
    p["domain.w"][:] = 0.0
    p["domain.b"][:] = 0.0
    side = meta.Side(np.array([0, 1]), np.array([0, 1]))
    assert meta.domain_loss(data, side, p) == pytest.approx(math.log(2), abs=1e-15)


def test_domain_loss_separating_head_goes_to_zero():
    # features from a constant input differ only through the bias; make domains separable by input sign
    src = [np.full((2, D), 1.0)] * 4
    tgt = [np.full((2, D), -1.0)] * 4
    data = meta.DomainDataset(src, [0, 1, 0, 1], tgt)
    p = toy_params()
    side = meta.Side(np.arange(4), np.arange(4))
    rep_s = np.array(forward_loop(p, src[0])[0])
    rep_t = np.array(forward_loop(p, tgt[0])[0])
    direction = rep_t - rep_s
    p["domain.w"] = 1e4 * direction
    p["domain.b"] = np.array([-1e4 * direction @ (rep_s + rep_t) / 2])
    assert meta.domain_loss(data, side, p) < 1e-12


def test_two_by_two_losses_scalar_oracle():
    data = toy_data()
    p = toy_params(3)
    side = meta.Side(np.array([0, 1]), np.array([2, 3]))
    reps_s = [forward_loop(p, data.source_x[i])[0] for i in (0, 1)]
    reps_t = [forward_loop(p, data.target_x[i])[0] for i in (2, 3)]
    l_ad = sum(bce(head_loop(p, "domain", r), 0) for r in reps_s) + sum(bce(head_loop(p, "domain", r), 1) for r in reps_t)
    assert meta.domain_loss(data, side, p) == pytest.approx(l_ad / 4, abs=1e-13)
    l_c = bce(head_loop(p, "anomaly", reps_s[0]), 1) + bce(head_loop(p, "anomaly", reps_s[1]), 0)
    assert meta.class_loss(data, side, p) == pytest.approx(l_c / 2, abs=1e-13)


def test_class_loss_zero_head_and_errors():
    data = toy_data()
    p = toy_params()
    p["anomaly.w"][:] = 0.0
    p["anomaly.b"][:] = 0.0
    assert meta.class_loss(data, meta.Side(np.array([0, 1, 2]), np.array([0])), p) == pytest.approx(math.log(2))
    with pytest.raises(NoLabels):
        meta.class_loss(data, meta.Side(np.array([], dtype=int), np.array([0])), p)
    with pytest.raises(OneDomainOnly):
        meta.domain_loss(data, meta.Side(np.array([0]), np.array([], dtype=int)), p)


def test_class_loss_saturated_correct_head():
    src = [np.full((1, D), 1.0), np.full((1, D), -1.0)]
    data = meta.DomainDataset(src, [1, 0], [np.zeros((1, D))])
    p = toy_params()
    r1 = np.array(forward_loop(p, src[0])[0])
    r0 = np.array(forward_loop(p, src[1])[0])
    p["anomaly.w"] = 1e4 * (r1 - r0)
    p["anomaly.b"] = np.array([-1e4 * (r1 - r0) @ (r1 + r0) / 2])
    assert meta.class_loss(data, meta.Side(np.array([0, 1]), np.array([0])), p) < 1e-12


# inner_adapt

def one_task(data, seed=2, cfg=None):
    return meta.sample_meta_task(data, cfg or toy_cfg(), np.random.default_rng(seed), task_id=7)


def test_inner_adapt_identities():
    data = toy_data()
    p = toy_params()
    task = one_task(data)
    for cfg in (toy_cfg(beta=0.0, gamma=0.0), toy_cfg(delta=0.0)):
        adapted = meta.inner_adapt(p, task, data, cfg)
        for n in neural.PARAM_NAMES:
            assert np.array_equal(adapted[n], p[n])


def test_inner_adapt_matches_finite_differences_and_isolates():
    data = toy_data()
    p = toy_params()
    snapshot = {k: v.tobytes() for k, v in p.items()}
    cfg = toy_cfg()
    task = one_task(data)
    adapted = meta.inner_adapt(p, task, data, cfg)
    fd = fd_grad(side_value(data, task.support, cfg), p, neural.EXTRACTOR_NAMES)
    for n in neural.EXTRACTOR_NAMES:
        assert adapted[n] - p[n] == pytest.approx(-cfg.delta * fd[n], abs=1e-8)
    for n in neural.ANOMALY_NAMES + neural.DOMAIN_NAMES:
        assert adapted[n] is p[n] or np.array_equal(adapted[n], p[n])
    assert {k: v.tobytes() for k, v in p.items()} == snapshot


@pytest.mark.filterwarnings("ignore::RuntimeWarning")
def test_inner_adapt_divergence_carries_task_id():
    data = toy_data()
    p = toy_params()
    p["gru.W_z"][0, 0] = np.inf
    with pytest.raises(DivergedTask) as info:
        meta.inner_adapt(p, one_task(data), data, toy_cfg())
    assert info.value.task_id == 7


# meta_step

def test_meta_step_alpha_zero():
    data = toy_data()
    p = toy_params()
    out = meta.meta_step(p, [one_task(data)], data, toy_cfg(alpha=0.0))
    for n in neural.PARAM_NAMES:
        assert np.array_equal(out[n], p[n])


def test_meta_step_delta_zero_is_plain_sgd_on_query():
    data = toy_data()
    p = toy_params()
    cfg = toy_cfg(delta=0.0)
    task = one_task(data)
    out = meta.meta_step(p, [task], data, cfg)
    _, g = meta.task_objective(data, task.query, p, cfg)
    for n in neural.EXTRACTOR_NAMES:
        assert np.array_equal(out[n], p[n] - cfg.alpha * g[n])


def test_meta_step_two_tasks_finite_difference_oracle():
    data = toy_data(n_src=12, n_tgt=10)
    p = toy_params(1)
    cfg = toy_cfg()
    rng = np.random.default_rng(3)
    tasks = [meta.sample_meta_task(data, cfg, rng, i) for i in range(2)]
    out = meta.meta_step(p, tasks, data, cfg)
    expected = {n: np.zeros_like(p[n]) for n in neural.EXTRACTOR_NAMES}
    for task in tasks:
        g_sup = fd_grad(side_value(data, task.support, cfg), p, neural.EXTRACTOR_NAMES)
        adapted = {k: (v - cfg.delta * g_sup[k] if k in g_sup else v) for k, v in p.items()}
        g_que = fd_grad(side_value(data, task.query, cfg), adapted, neural.EXTRACTOR_NAMES)
        for n in expected:
            expected[n] += g_que[n]
    for n in neural.EXTRACTOR_NAMES:
        assert out[n] == pytest.approx(p[n] - cfg.alpha * expected[n], abs=1e-7)


def test_meta_gradient_all_diverged():
    data = toy_data()
    p = toy_params()
    p["gru.U_h"][:] = np.nan
    with pytest.raises(MetaStepFailed):
        meta.meta_gradient(p, [one_task(data)], data, toy_cfg())


def test_objective_wiring():
    data = toy_data()
    p = toy_params(4)
    side = one_task(data).support
    batch, labels, domains = meta.side_batch(data, side)
    _, g_beta0 = meta.task_objective(data, side, p, toy_cfg(beta=0.0))
    _, g_cls = neural.objective(p, batch, labels, domains, 1.0, 0.0)
    _, g_gamma0 = meta.task_objective(data, side, p, toy_cfg(gamma=0.0, beta=0.3))
    _, g_adv = neural.objective(p, batch, labels, domains, 0.0, 1.0)
    for n in neural.EXTRACTOR_NAMES:
        assert np.array_equal(g_beta0[n], g_cls[n])
        assert g_gamma0[n] == pytest.approx(-0.3 * g_adv[n], abs=1e-15)


def test_adversarial_cap_in_task_objective():
    data = toy_data()
    p = toy_params(4)
    side = one_task(data).support
    p["domain.w"] = -50 * np.ones(H)  # a badly wrong domain head: L_ad far above ln 2
    assert meta.domain_loss(data, side, p) > math.log(2)
    capped, g = meta.task_objective(data, side, p, toy_cfg(cap_adversarial=True))
    _, g_cls = meta.task_objective(data, side, p, toy_cfg(beta=0.0))
    assert capped.total == pytest.approx(capped.class_loss - 0.3 * math.log(2))
    for n in neural.EXTRACTOR_NAMES:
        assert np.array_equal(g[n], g_cls[n])


# head step and training

def test_domain_head_step_never_increases_loss_at_default_rate():
    from generallog.config import DEFAULTS
    data = toy_data(n_src=40, n_tgt=40, labels=[1, 0, 0, 0] * 10)
    cfg = toy_cfg(head_lr=DEFAULTS["train_head_lr"], tasks_per_meta_batch=4)
    rng = np.random.default_rng(0)
    p = toy_params(5)
    for _ in range(30):
        tasks = [meta.sample_meta_task(data, cfg, rng, i) for i in range(4)]
        before = sum(meta.domain_loss(data, t.support, p) for t in tasks)
        new, _, _ = meta.head_step(p, tasks, data, cfg)
        after = sum(meta.domain_loss(data, t.support, new) for t in tasks)
        assert after <= before
        for n in neural.EXTRACTOR_NAMES:
            assert new[n] is p[n]
        p = new
        # keep features moving so the head faces fresh batches
        p = neural.sgd_step(p, {"gru.W_h": rng.standard_normal(p["gru.W_h"].shape)}, 0.05)


def test_train_zero_epochs_returns_init():
    data = toy_data()
    cfg = toy_cfg(epochs=0, seed=3)
    model = meta.train(data, cfg)
    init = neural.init_params(D, H, 3)
    for n in neural.PARAM_NAMES:
        assert np.array_equal(model.params[n], init[n])
    assert model.history == []


def test_train_is_deterministic(tmp_path):
    data = toy_data(n_src=12, n_tgt=10)
    cfg = toy_cfg(epochs=4, seed=9)
    meta.train(data, cfg).save(tmp_path / "a.ckpt")
    meta.train(data, cfg).save(tmp_path / "b.ckpt")
    assert (tmp_path / "a.ckpt").read_bytes() == (tmp_path / "b.ckpt").read_bytes()
    back = meta.TrainedModel.load(tmp_path / "a.ckpt")
    assert back.d == D and back.h == H and back.decision_threshold == 0.5


def test_train_log_lines(tmp_path):
    model = meta.train(toy_data(n_src=12, n_tgt=10), toy_cfg(epochs=2))
    meta.write_train_log(tmp_path / "log.tsv", model.history)
    rows = [line.split("\t") for line in (tmp_path / "log.tsv").read_text().splitlines()]
    assert [r[0] for r in rows] == ["0", "1"]
    assert all(len(r) == 4 and all(math.isfinite(float(x)) for x in r) for r in rows)


# predict

def embeddings_for(vectors):
    return {i: EventEmbedding(i, np.asarray(v, dtype=float)) for i, v in enumerate(vectors)}


def test_predict_zero_params_half():
    zero = {k: np.zeros(s) for k, s in neural.param_shapes(D, H).items()}
    model = meta.TrainedModel(zero, D, H, toy_cfg())
    p, label = meta.predict(model, LogSequence("s", [0, 1]), embeddings_for([[1, 0, 0], [0, 1, 0]]))
    assert p == 0.5
    assert label == 1  # boundary: probability == threshold counts as anomalous


def test_predict_matches_scalar_forward():
    params = toy_params(6)
    model = meta.TrainedModel(params, D, H, toy_cfg(), decision_threshold=0.55)
    vecs = [[0.3, -0.2, 0.9], [1.0, 0.0, 0.0], [0.0, 0.0, 0.0], [-2.0, 1.0, 0.5]]
    embs = embeddings_for(vecs)
    seqs = [LogSequence("a", [0, 1]), LogSequence("b", [2, 3, 3]), LogSequence("c", [1])]
    got = meta.predict_many(model, seqs, embs)
    for s, (prob, label) in zip(seqs, got):
        rows = []
        for tid in s.template_ids:
            v = np.asarray(vecs[tid], dtype=float)
            n = math.sqrt(float(v @ v))
            rows.append(v / n if n > 0 else v)
        rep, _, _ = forward_loop(params, rows)
        expected = sigmoid(head_loop(params, "anomaly", rep))
        assert prob == pytest.approx(expected, abs=1e-14)
        assert label == int(expected >= 0.55)
        assert 0.0 < prob < 1.0


def test_dataset_from_sequences_and_threshold_config():
    embs = embeddings_for([[3.0, 4.0, 0.0], [0, 0, 0]])
    data = meta.DomainDataset.from_sequences([LogSequence("s", [0, 1], "src", 1)], [LogSequence("t", [1])], embs)
    assert data.source_x[0][0] == pytest.approx([0.6, 0.8, 0.0])
    assert not np.any(data.source_x[0][1])
    with pytest.raises(ValueError):
        dataclasses.replace(toy_cfg(), decision_threshold=1.0)


def test_training_learns_held_out_source_labels(tmp_path):
    """Tuned defaults, 50 epochs: a model trained on 420 source sessions labels the other 180 well."""
    from conftest import synth_config
    from generallog.data import SynthSpec
    from generallog.metrics import compute_metrics
    from generallog.pipeline import prepare
    from generallog.routing import RouterConfig, route_corpus

    cfg = synth_config(tmp_path, 1, SynthSpec(n_source=600, n_target=600), train_epochs=50)
    prepared = prepare(cfg)
    general, _, _ = route_corpus(prepared.target, prepared.index, prepared.embeddings, RouterConfig(cfg.tau))
    train_src, held_out = prepared.source[:420], prepared.source[420:]
    data = meta.DomainDataset.from_sequences(train_src, general, prepared.embeddings)
    model = meta.train(data, cfg.train_config())
    preds = meta.predict_many(model, held_out, prepared.embeddings)
    m = compute_metrics([label for _, label in preds], [s.truth_label for s in held_out])
    assert sum(s.truth_label for s in held_out) > 0
    assert m.f1 >= 95.0
