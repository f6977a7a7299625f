# %% [markdown]
# # Warm-up, then EM
#
# Train the desk preset on the default synthetic corpus and watch what the
# second phase does to long-tail retrieval, the anchors and the GMM labels.
# Runs in about half a minute on one core.

# %%
import numpy as np

from rankem import encoder as enc
from rankem.data import SyntheticCorpusSpec, generate, training_streams
from rankem.evaluation import (anchor_predictor, crosslingual_retrieval, gmm_predictor, heldout_pairs,
                               ordering_report, rank_accuracy)
from rankem.trainer import TrainConfig, train

spec = SyntheticCorpusSpec()
corpus = generate(spec, seed=0)
parallel, mono = training_streams(corpus)
print("head languages", spec.head_languages, "long tail", spec.long_tail_languages)
print(len(parallel), "translation pairs,", len(mono), "monolingual sentences")

# %% [markdown]
# Phase 1 only sees translation pairs between language 0 and languages 1, 2.

# %%
cfg = TrainConfig.desk(seed=0, vocab_size=spec.vocab_size, num_languages=spec.num_languages)
log = []
state = train(cfg, parallel, mono, stop_after=cfg.phase1_steps, on_metrics=log.append)
warm = crosslingual_retrieval(state.encoder, corpus.heldout)
print("retrieval after warm-up", {k: round(v, 3) for k, v in warm.items()})
print("anchors", np.round(state.anchors.s, 3))

# %%
i, j, gold = heldout_pairs(corpus.heldout)
emb = enc.encode_batch(state.encoder, [r.sentence for r in corpus.heldout])
ext = (gold == 1) | (gold == 4)
conf, acc = rank_accuracy(emb[i[ext]], emb[j[ext]], gold[ext], gmm_predictor(state.gmm), 4)
print(f"GMM on held-out translations vs unrelated pairs: {acc:.3f}")
print(conf)

# %% [markdown]
# Phase 2 uses bare monolingual sentences. The GMM labels queue members for
# the ranking loss, and the anchor similarities label the same pairs for the GMM.

# %%
state = train(cfg, parallel, mono, state=state, on_metrics=log.append)
final = crosslingual_retrieval(state.encoder, corpus.heldout)
for lang in sorted(final):
    tag = "tail" if lang in spec.long_tail_languages else "head"
    print(f"lang {lang} ({tag}): {warm[lang]:.3f} -> {final[lang]:.3f}")

# %%
phase2 = [m for m in log if m["phase"] == 2]
for m in phase2[:: len(phase2) // 5]:
    print(m["step"], f"ctl {m['ctl_loss']:.3f}", f"mle {m['mle_loss']:.3f}",
          np.round(m["anchors"], 3), m["label_hist"])

# %%
emb = enc.encode_batch(state.encoder, [r.sentence for r in corpus.heldout])
rep = ordering_report(emb[i], emb[j], gold, 4)
print("mean cosine per gold rank", np.round(rep["mean_cosine"], 3), rep["cosine_decreasing"])
for name, pred in (("gmm", gmm_predictor(state.gmm)), ("anchors", anchor_predictor(state.anchors))):
    conf, acc = rank_accuracy(emb[i], emb[j], gold, pred, 4)
    print(name, f"accuracy {acc:.3f}")
    print(conf)
