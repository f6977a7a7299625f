import copy
import json

import numpy as np
import pytest
from hypothesis import given, strategies as st

from rankem import contrast, encoder as enc, gmm as gm
from rankem.data import CorpusRecord, SyntheticCorpusSpec, generate, training_streams
from rankem.encoder import Sentence
from rankem.gmm import GmmParameters
from rankem.trainer import (CheckpointError, EmQueue, EStepLabels, TrainConfig, TrainingError, cosine_lr,
                            estep_labels, init_state, load_checkpoint, mstep_update, phase1_step,
                            phase2_step, save_checkpoint, start_phase2, state_from_json, state_to_json,
                            train)

SMALL_SPEC = SyntheticCorpusSpec(num_languages=3, base_vocab=30, min_len=4, max_len=8, num_supertopics=2,
                                 topics_per_supertopic=2, groups_per_topic=2, sentences_per_group=4,
                                 parallel_per_group=3, supertopic_tokens=2, topic_tokens=2, group_tokens=3)


def small_config(**kw):
    base = dict(dim=4, hidden=6, num_layers=2, vocab_size=SMALL_SPEC.vocab_size, num_languages=3,
                batch_size=4, queue_size=12, phase1_steps=6, phase2_steps=6, seed=3)
    base.update(kw)
    return TrainConfig.desk(**base)


@pytest.fixture(scope="module")
def streams():
    return training_streams(generate(SMALL_SPEC, 0))


def clone(state):
    return state_from_json(json.loads(json.dumps(state_to_json(state))))


def phase2_ready(streams, **kw):
    parallel, mono = streams
    cfg = small_config(**kw)
    state = train(cfg, parallel, mono, stop_after=cfg.phase1_steps)
    start_phase2(state, mono)
    return state


# config

def test_defaults_follow_published_hyperparameters():
    cfg = TrainConfig()
    assert cfg.num_ranks == 4
    assert cfg.queue_size == 256
    assert cfg.tau_base == 0.04
    assert cfg.moco_momentum == 0.999
    assert cfg.anchor_momentum == 0.999
    assert cfg.gmm_lr == 3e-5
    assert cfg.encoder_lr == 5e-4
    assert cfg.optimizer == "adam"
    assert (cfg.adam_beta1, cfg.adam_beta2) == (0.9, 0.999)
    assert cfg.virtuals_per_pair == 2
    assert (cfg.batch_size, cfg.phase1_steps, cfg.phase2_steps) == (32, 500, 1000)
    assert cfg.phase_rates(1) == cfg.phase_rates(2) == (5e-4, 3e-5)
    np.testing.assert_allclose(cfg.temps.taus, [0.04, 0.06, 0.09, 0.135])


@pytest.mark.parametrize("bad", [dict(num_ranks=1), dict(queue_size=8, batch_size=16), dict(gmm_lr=0.0),
                                 dict(encoder_lr=-1.0), dict(optimizer="rmsprop"), dict(batch_size=1)])
def test_config_validation(bad):
    with pytest.raises(ValueError):
        TrainConfig(**bad)


def test_config_from_dict_rejects_unknown():
    with pytest.raises(ValueError, match="unknown"):
        TrainConfig.from_dict({"bogus": 1})


def test_cosine_schedule():
    assert cosine_lr(1.0, 0, 10) == 1.0
    assert cosine_lr(1.0, 5, 10) == pytest.approx(0.5)
    assert cosine_lr(1.0, 10, 10) == pytest.approx(0.0)


# phase 1

def test_phase1_loss_decreases_on_fixed_batch():
    cfg = TrainConfig(dim=8, hidden=12, vocab_size=40, num_languages=1, batch_size=6, queue_size=6,
                      phase1_steps=10, seed=1)
    state = init_state(cfg)
    r = np.random.default_rng(0)
    sents = [Sentence(tuple(r.integers(0, 40, size=5))) for _ in range(6)]
    batch = [(s, s) for s in sents]
    losses = [phase1_step(state, batch)["ctl_loss"] for _ in range(10)]
    assert all(b < a for a, b in zip(losses, losses[1:])), losses


def test_phase1_without_virtuals_uses_only_extreme_labels(streams):
    parallel, _ = streams
    state = init_state(small_config(virtuals_per_pair=0))
    m = phase1_step(state, parallel[:4])
    assert m["label_hist"] == [4, 0, 0, 4]


def test_phase1_with_virtuals_counts(streams):
    parallel, _ = streams
    state = init_state(small_config(virtuals_per_pair=3))
    m = phase1_step(state, parallel[:4])
    assert sum(m["label_hist"]) == 4 * (2 + 3)
    assert m["label_hist"][0] >= 4 and m["label_hist"][-1] >= 4


def test_phase1_batch_too_small(streams):
    parallel, _ = streams
    with pytest.raises(TrainingError):
        phase1_step(init_state(small_config()), parallel[:1])


def test_warm_gmm_accuracy_on_extremes(warm_run):
    from rankem.evaluation import gmm_predictor, heldout_pairs, rank_accuracy

    corpus, state = warm_run
    i, j, gold = heldout_pairs(corpus.heldout, 4)
    emb = enc.encode_batch(state.encoder, [r.sentence for r in corpus.heldout])
    keep = (gold == 1) | (gold == 4)
    _, acc = rank_accuracy(emb[i[keep]], emb[j[keep]], gold[keep], gmm_predictor(state.gmm), 4)
    assert acc >= 0.9


# E-step

def test_estep_self_pair(streams):
    state = phase2_ready(streams)
    x = streams[1][:3]
    q = EmQueue(8, state.config.dim)
    q.enqueue(enc.encode_batch(state.encoder, x), [s.language for s in x])
    lab = estep_labels(state.encoder, state.gmm, contrast.AnchorSet.initial(4), x, q)
    np.testing.assert_allclose(np.diag(lab.sims), 1.0, atol=1e-12)
    assert np.all(np.diag(lab.encoder_ranks) == 1)


def test_estep_identical_components_give_rank_one(streams):
    state = phase2_ready(streams)
    flat = GmmParameters(np.zeros(4), np.zeros((4, 4)), np.zeros((4, 4)))
    lab = estep_labels(state.encoder, flat, state.anchors, streams[1][:5], state.queue)
    assert np.all(lab.gmm_ranks == 1)


def test_estep_matches_per_pair_argmax(streams):
    state = phase2_ready(streams)
    batch = streams[1][:4]
    lab = estep_labels(state.encoder, state.gmm, state.anchors, batch, state.queue)
    emb = enc.encode_batch(state.encoder, batch)
    for i in range(len(batch)):
        for k in range(len(state.queue)):
            diff = emb[i] - state.queue.embeddings[k]
            joint = [np.log(state.gmm.priors[r]) + gm.gaussian_log_density(state.gmm, r + 1, diff)
                     for r in range(4)]
            assert lab.gmm_ranks[i, k] == int(np.argmax(joint)) + 1
            assert lab.sims[i, k] == pytest.approx(float(emb[i] @ state.queue.embeddings[k]), abs=1e-12)


def test_estep_modifies_nothing(streams):
    state = phase2_ready(streams)
    before = json.dumps(state_to_json(state))
    estep_labels(state.encoder, state.gmm, state.anchors, streams[1][:4], state.queue)
    assert json.dumps(state_to_json(state)) == before


def test_estep_empty_queue(streams):
    state = init_state(small_config())
    with pytest.raises(TrainingError):
        estep_labels(state.encoder, state.gmm, state.anchors, streams[1][:2], state.queue)


# M-step

def test_zero_rates_freeze_parameters_but_not_anchors(streams):
    state = phase2_ready(streams)
    # the config refuses zero rates; the update rule itself accepts them
    state.config.encoder_lr = 0.0
    state.config.gmm_lr = 0.0
    enc_before, gmm_before = state.encoder.flat(), np.concatenate([a.ravel() for a in state.gmm.arrays()])
    anchors_before = state.anchors.s
    phase2_step(state, streams[1])
    assert np.array_equal(state.encoder.flat(), enc_before)
    assert np.array_equal(np.concatenate([a.ravel() for a in state.gmm.arrays()]), gmm_before)
    assert state.anchors.s != anchors_before


def test_all_rank_n_gives_zero_encoder_loss(streams):
    state = phase2_ready(streams)
    batch = streams[1][:4]
    lab = estep_labels(state.encoder, state.gmm, state.anchors, batch, state.queue)
    lab = EStepLabels(np.full_like(lab.gmm_ranks, 4), lab.encoder_ranks, lab.sims, lab.anchor_embeddings)
    before = state.encoder.flat()
    m = mstep_update(state, batch, lab)
    assert m["ctl_loss"] == 0.0
    assert np.array_equal(state.encoder.flat(), before)


def test_mstep_replay(streams):
    state = phase2_ready(streams)
    ref = clone(state)
    batch = streams[1][2:6]
    m = mstep_update(state, batch, estep_labels(state.encoder, state.gmm, state.anchors, batch, state.queue))

    # step-through re-execution from the saved copy
    cfg = ref.config
    ex = enc.encode_batch(ref.encoder, batch)
    q = ref.queue.embeddings
    sims = ex @ q.T
    diffs = (ex[:, None, :] - q[None]).reshape(-1, cfg.dim)
    c_g = gm.predict_ranks(ref.gmm, diffs).reshape(sims.shape)
    c_m = contrast.predict_ranks_encoder(ref.anchors, sims)
    mle = gm.mle_loss(ref.gmm, diffs, c_m.ravel())
    rank = contrast.ranking_infonce_matrix(ex, q, c_g, cfg.temps)
    assert m["mle_loss"] == pytest.approx(mle.loss, abs=1e-10)
    assert m["ctl_loss"] == pytest.approx(rank.loss, abs=1e-10)

    # first Adam step from fresh moments moves every coordinate by lr * g / (|g| + eps')
    lr = cfg.gmm_lr
    g = mle.grad.means
    step = lr * g / (np.abs(g) + cfg.adam_eps)
    np.testing.assert_allclose(ref.gmm.means - step, state.gmm.means, atol=1e-10)

    anchors = ref.anchors
    for r, s in zip(c_g.ravel(), sims.ravel()):
        anchors = contrast.update_anchor(anchors, int(r), float(s))
    np.testing.assert_allclose(state.anchors.s, anchors.s, atol=1e-10)
    np.testing.assert_allclose(state.queue.embeddings[-4:], enc.encode_batch(ref.momentum, batch), atol=1e-12)


# queue

@given(st.integers(1, 12), st.lists(st.integers(0, 5), max_size=12))
def test_queue_fifo(capacity, sizes):
    q = EmQueue(capacity, 2)
    pushed = []
    counter = 0
    for n in sizes:
        rows = np.arange(counter, counter + n, dtype=float)
        counter += n
        q.enqueue(np.stack([rows, -rows], axis=1), np.zeros(n))
        pushed.extend(rows.tolist())
        assert len(q) == min(capacity, len(pushed))
        assert q.embeddings[:, 0].tolist() == pushed[-capacity:]


# train

def test_zero_steps_is_initialisation(streams):
    cfg = small_config(phase1_steps=0, phase2_steps=0)
    out = train(cfg, *streams)
    assert state_to_json(out) == state_to_json(init_state(cfg))


def metrics_of(cfg, streams, state=None, stop_after=None):
    log = []
    state = train(cfg, *streams, state=state, on_metrics=log.append, stop_after=stop_after)
    return state, json.dumps(log)


def test_determinism(streams):
    cfg = small_config()
    _, a = metrics_of(cfg, streams)
    _, b = metrics_of(small_config(), streams)
    assert a == b
    _, c = metrics_of(small_config(seed=4), streams)
    assert c != a


def test_metrics_line_fields(streams):
    log = []
    train(small_config(), *streams, on_metrics=log.append)
    assert [m["phase"] for m in log] == [1] * 6 + [2] * 6
    assert [m["step"] for m in log] == list(range(1, 13))
    for m in log:
        assert set(m) == {"step", "phase", "ctl_loss", "mle_loss", "anchors", "label_hist"}
        assert len(m["anchors"]) == 4 and len(m["label_hist"]) == 4


def test_resume_mid_phase2_matches_unbroken_run(streams, tmp_path):
    cfg = small_config()
    _, full = metrics_of(cfg, streams)
    first, head = metrics_of(small_config(), streams, stop_after=9)
    path = tmp_path / "mid.json"
    save_checkpoint(first, path)
    resumed = load_checkpoint(path)
    _, tail = metrics_of(resumed.config, streams, state=resumed)
    assert json.loads(head) + json.loads(tail) == json.loads(full)


def test_checkpoint_round_trip(streams, tmp_path):
    state = phase2_ready(streams)
    path = tmp_path / "ckpt.json"
    save_checkpoint(state, path)
    back = load_checkpoint(path)
    assert np.array_equal(back.encoder.flat(), state.encoder.flat())
    assert np.array_equal(back.momentum.flat(), state.momentum.flat())
    assert state_to_json(back) == state_to_json(state)
    doc = json.loads(path.read_text())
    assert doc["format_version"] == 1 and "gmm" in doc and "flat_params" in doc


def test_truncated_checkpoint(streams, tmp_path):
    path = tmp_path / "ckpt.json"
    save_checkpoint(init_state(small_config()), path)
    text = path.read_text()
    path.write_text(text[: len(text) // 2])
    with pytest.raises(CheckpointError, match="corrupt"):
        load_checkpoint(path)


@pytest.mark.parametrize("field", ["format_version", "gmm", "queue", "rng", "optimizer"])
def test_checkpoint_names_bad_field(streams, field):
    doc = state_to_json(init_state(small_config()))
    if field == "format_version":
        doc[field] = 99
    else:
        del doc[field]
    with pytest.raises(CheckpointError, match=field):
        state_from_json(doc)


def test_missing_corpora(streams):
    with pytest.raises(TrainingError, match="parallel"):
        train(small_config(), [], streams[1])
    with pytest.raises(TrainingError, match="monolingual"):
        train(small_config(), streams[0], [])


def test_nan_aborts_with_diagnostic_checkpoint(streams, tmp_path):
    state = init_state(small_config())
    state.encoder.token_table[:] = np.nan
    diag = tmp_path / "diag.json"
    with pytest.raises(TrainingError, match="non-finite"):
        train(state.config, *streams, state=state, diagnostic_path=str(diag))
    assert diag.exists()


def test_sgd_switch(streams):
    state = init_state(small_config(optimizer="sgd"))
    before = state.gmm.means.copy()
    phase1_step(state, streams[0][:4])
    assert not np.array_equal(before, state.gmm.means)


def _poison(records, sentinel):
    return [CorpusRecord(r.sentence, sentinel, sentinel, sentinel) for r in records]


def test_phase2_ignores_alignment_and_ids(streams):
    corpus = generate(SMALL_SPEC, 0)
    parallel, mono = training_streams(corpus)
    cfg = small_config()
    warm = train(cfg, parallel, mono, stop_after=cfg.phase1_steps)
    saved = json.dumps(state_to_json(warm))

    stripped = copy.deepcopy(corpus)
    for lang, recs in stripped.monolingual.items():
        stripped.monolingual[lang] = [CorpusRecord(r.sentence) for r in recs]
    stripped.parallel = []
    poisoned = copy.deepcopy(corpus)
    for lang, recs in poisoned.monolingual.items():
        poisoned.monolingual[lang] = _poison(recs, -987654321)
    # mispaired bitext with sentinel ids
    srcs = [a.sentence for a, _ in corpus.parallel]
    poisoned.parallel = [(CorpusRecord(s, -1, -1, -1), CorpusRecord(t, -1, -1, -1))
                         for s, t in zip(srcs, reversed(srcs))]

    logs = []
    for c in (stripped, poisoned):
        p, m = training_streams(c)
        log = []
        train(cfg, p, m, state=state_from_json(json.loads(saved)), on_metrics=log.append)
        logs.append(json.dumps(log))
    assert logs[0] == logs[1]
