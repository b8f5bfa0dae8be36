# %% [markdown]
# # One episode, step by step
#
# We follow a single 1-way 1-shot episode through the pipeline by hand. The
# encoder is untrained here, so the numbers are poor, but every stage is
# visible: pooling a prototype, scoring the query, picking confident pixels
# and fusing.

# %%
import numpy as np

from protoseg import protocore as pc
from protoseg.encoder import EncoderConfig, extract_features, init_encoder
from protoseg.episodes import DatasetSplit, SynthConfig, SyntheticSource, sample_episode
from protoseg.refine import RefineConfig, hard_select, refine_and_segment, self_adaptive_threshold

np.set_printoptions(precision=3, suppress=True)

source = SyntheticSource(SynthConfig(image_size=32), per_class=10, seed=0)
split = DatasetSplit(source.folds, test_fold=0, role="test")
episode = sample_episode(source, split, n_ways=1, k_shots=1, n_queries=1, seed=3)
print("episode class ->", episode.class_map)

# %% [markdown]
# Masks use episode-local ids: 0 is background, 1 is the sampled class and -1
# is ignore. A coarse view of the support mask:

# %%
print(episode.support_masks[0][0][::4, ::4])

# %% [markdown]
# ## Prototypes
#
# Features are taken at the encoder's output stride. The support mask is
# resized to that grid with nearest-neighbour sampling and averaged under each
# label. Background pools over all non-class pixels.

# %%
params = init_encoder(EncoderConfig(widths=(16, 16), strides=(2, 1), dilations=(1, 2)), seed=0)
support_feat = extract_features(params, episode.support_images[0][0], track_gradients=False)
protos = pc.support_prototypes([[support_feat]], episode.support_masks, n_ways=1)
print("feature map", support_feat.shape, "-> prototypes", protos.numpy().shape)

# %% [markdown]
# ## Scoring the query
#
# Cosine similarity to each prototype gives one score map per class, and the
# argmax is the prediction. The refinement pipeline scales these scores by a
# temperature and softmaxes them, which never changes the argmax.

# %%
query_feat = extract_features(params, episode.query_images[0], track_gradients=False)
scores = pc.cosine_score_map(query_feat, protos)
labels = pc.argmax_labels(scores.numpy())
print("predicted foreground fraction", labels.mean().round(3))

# %% [markdown]
# ## Confident pixels
#
# Each class's threshold is halfway between its best and average score.
# Pixels whose winning score is below the threshold become -1 and are not used
# to build query prototypes.

# %%
alpha = self_adaptive_threshold(scores)
kept = hard_select(labels, scores, alpha)
print("thresholds", alpha)
print("kept", (kept >= 0).mean().round(3), "of pixels")

# %% [markdown]
# ## The whole pipeline
#
# `refine_and_segment` runs adaptation and fusion and keeps a trace of every
# fusion step. The trace records thresholds, how many pixels were selected and
# the norm of each fused prototype.

# %%
result = refine_and_segment(params, episode, RefineConfig(adapt_steps=0, fusion_steps=2))
print(result.trace.to_text())
