# %% [markdown]
# # Geometry measurements and their edge cases
#
# Invariance, canonical form and isotropy on toy clouds, then on a quickly
# warmed-up encoder.

# %%
import math

import numpy as np

from rankem import encoder as enc
from rankem.data import SyntheticCorpusSpec, generate, training_streams
from rankem.geometry import canonical_score, geometry_report, invariance_score, isotropy_score
from rankem.trainer import TrainConfig, init_state, train

rng = np.random.default_rng(0)

# %% [markdown]
# Isotropy of unit vectors is bounded below by exp(-2): every partition value
# lies between n/e and n*e. A line of unit vectors scores 1/e, so a cloud only
# scores near zero when it is long and unnormalised.

# %%
cloud = rng.standard_normal((1000, 8))
cloud /= np.linalg.norm(cloud, axis=1, keepdims=True)
line = np.zeros((1000, 8))
line[:, 0] = 1
line += 1e-4 * rng.standard_normal(line.shape)
line /= np.linalg.norm(line, axis=1, keepdims=True)
long_line = rng.normal(3, 0.5, size=(1000, 1)) * np.eye(8)[0] + 1e-3 * rng.standard_normal((1000, 8))
print("gaussian cloud", round(isotropy_score(cloud), 3))
print("unit line", round(isotropy_score(line), 4), "vs 1/e", round(math.exp(-1), 4))
print("long line", round(isotropy_score(long_line), 4))

# %% [markdown]
# Canonical form on the two-cluster toy, and its scale invariance.

# %%
pts = [np.array([[0, 0], [0, 2]]), np.array([[10, 0], [10, 2]])]
print(canonical_score(pts), canonical_score([3 * p for p in pts]))

# %% [markdown]
# Invariance with an outlier language.

# %%
a = rng.standard_normal((200, 4))
b = a + 0.05 * rng.standard_normal(a.shape)
c = 2.0 + 0.5 * rng.standard_normal(a.shape)
print("two matched", round(invariance_score([a, b]), 4), "with outlier", round(invariance_score([a, b, c]), 4))

# %% [markdown]
# The same report on embeddings from an untrained and a warmed-up encoder.

# %%
spec = SyntheticCorpusSpec()
corpus = generate(spec, 0)
cfg = TrainConfig.desk(seed=0, vocab_size=spec.vocab_size, num_languages=spec.num_languages,
                       phase1_steps=200)
langs = [r.language for r in corpus.heldout]
items = [r.group for r in corpus.heldout]
for name, state in (("init", init_state(cfg)),
                    ("warm", train(cfg, *training_streams(corpus), stop_after=cfg.phase1_steps))):
    emb = enc.encode_batch(state.encoder, [r.sentence for r in corpus.heldout])
    print(name, {k: round(v, 4) for k, v in geometry_report(emb, langs, items).to_json().items()})
