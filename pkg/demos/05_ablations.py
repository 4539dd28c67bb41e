"""Reproduce the ablation grids (window scale, layer subsets) on synthetic
data via the library API; the `mfadapter ablate` subcommand wraps exactly
this loop.
"""

from mfadapter import (
    EpisodeSpec,
    TrainConfig,
    build_cache,
    evaluate,
    generate_synthetic,
    sample_episode,
    train,
)

bundle, manifest = generate_synthetic(
    n_classes=5, shots=16, test_per_class=10, separation=3.0, seed=0
)
support_idx, test_idx = sample_episode(bundle, EpisodeSpec(n_shots=16, seed=0), manifest)
support = bundle.subset(support_idx)


def cell(scale, layers):
    cache, global_cache = build_cache(support, scale=scale, layers=layers)
    config = TrainConfig(batch_size=8, epochs=30, seed=0, scale=scale, layers=layers)
    result = train(support, cache, global_cache, config)
    return evaluate(bundle, test_idx, cache, global_cache, params=result.params).accuracy


print("window-scale ablation (layers 3+4, 16-shot):")
print("  scale   " + "".join(f"{s:>8d}" for s in range(1, 6)))
print("  accuracy" + "".join(f"{cell(s, (3, 4)):8.3f}" for s in range(1, 6)))

print("\nlayer ablation (scale 2, 16-shot):")
for layers in [(3,), (4,), (3, 4)]:
    print(f"  layers {','.join(map(str, layers)):4s} -> {cell(2, layers):.3f}")
