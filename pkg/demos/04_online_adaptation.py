"""
Adapting online: predict first, then update
===========================================

The online loop walks an unlabeled stream one batch at a time. For every
batch it first predicts with the parameters as they stand, then takes one
clipped momentum-SGD step on the method's unsupervised loss. Predictions
for batch m therefore reflect only what was learned from batches up to
m-1 -- no test sample influences its own prediction's parameters.
"""

import dataclasses

import numpy as np

from ttaforge import (
    AdaptConfig,
    ArchConfig,
    CorruptionSpec,
    GeneratorSpec,
    VisionTransformer,
    adapt_online,
    batches,
    corrupt,
    gen_synthetic_dataset,
    model_features,
    normalize_features,
    source_statistics,
    tfa_source_statistics,
    train_source_model,
)

# --- train the source model, store its statistics ---------------------------
source = gen_synthetic_dataset(GeneratorSpec(n_classes=3, per_class=64), seed=0)
model = VisionTransformer(ArchConfig(n_classes=3), seed=0)
train_source_model(model, source.images, source.labels, steps=400, seed=0)
raw = model_features(model, source.images)
src_stats = source_statistics(normalize_features(raw), source.labels, k_max=3, n_classes=3)
tfa_stats = tfa_source_statistics(raw)

# --- build a shifted target stream ------------------------------------------
target = gen_synthetic_dataset(GeneratorSpec(n_classes=3, per_class=512), seed=1)
images = corrupt(target.images, CorruptionSpec("contrast", 5), seed=3)
shifted = dataclasses.replace(target, images=images)

def stream():
    # A fresh shuffled pass; labels ride along but adapt_online ignores them.
    return batches(shifted, 64, seed=0)

order = np.random.Generator(np.random.PCG64(0)).permutation(len(shifted))
labels = shifted.labels[order]

def error(result):
    return 100.0 * np.mean(result.flat_predictions() != labels)

# --- run every method on the same stream -------------------------------------
print(f"{'method':>8} {'error':>8}   loss first -> last")
for method in ("source", "t3a", "tent", "pl", "shot-im", "tfa", "cfa-f", "cfa-c", "cfa"):
    res = adapt_online(model.copy(), stream(), AdaptConfig(method=method),
                       src_stats=src_stats, tfa_stats=tfa_stats)
    assert not res.failed, res.message
    span = (f"{res.losses[0]:8.4f} -> {res.losses[-1]:8.4f}"
            if res.losses[0] is not None else "      (no loss)")
    print(f"{method:>8} {error(res):>7.1f}%   {span}")

# The source row is the frozen model's error on the shifted stream; every
# gradient row spent exactly one step per batch on layer-norm affine
# parameters only (the default modulation group), so in one pass over 24
# batches the alignment methods claw back several points. The prototype
# method (t3a) never touches the model at all -- it re-estimates classifier
# prototypes from confident samples, which happens to suit this shift
# well. Longer streams widen the gradient methods' margin; the benchmark
# in the next demo measures exactly that.
