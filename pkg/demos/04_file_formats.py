"""Round-trip the three on-disk artifacts and poke at their error handling.

Bundles ("MFFB"), caches ("MFUC"), and adapter checkpoints ("MFAD") share
one little-endian container: magic, version, format header, then an index
of named float32 tensors and byte blobs. Round trips are bit-exact and
malformed input fails with an offset-bearing format error.
"""

import tempfile
from pathlib import Path

from mfadapter import (
    FormatError,
    TrainConfig,
    build_cache,
    bundle_checksum,
    cache_checksum,
    generate_synthetic,
    load_checkpoint,
    read_bundle,
    read_cache,
    save_checkpoint,
    train,
    write_bundle,
    write_cache,
)

tmp = Path(tempfile.mkdtemp())
bundle, manifest = generate_synthetic(3, 4, 2, separation=8.0, seed=0)

bundle_path = tmp / "demo.mffb"
write_bundle(bundle, bundle_path)
again = read_bundle(bundle_path)
print(f"bundle round trip: {bundle_path.stat().st_size} bytes, "
      f"bit-exact = {bundle_checksum(bundle) == bundle_checksum(again)}")

support = bundle.subset(range(12))
cache, global_cache = build_cache(support, scale=2)
cache_path = tmp / "demo.mfuc"
write_cache(cache_path, cache, global_cache, support.item_ids())
cache2, global2, ids = read_cache(cache_path)
print(f"cache round trip:  {cache_path.stat().st_size} bytes, "
      f"bit-exact = {cache_checksum(cache, global_cache) == cache_checksum(cache2, global2)}, "
      f"{len(ids)} support ids recorded")

result = train(support, cache, global_cache, TrainConfig(batch_size=4, epochs=2, seed=0))
ckpt_path = tmp / "demo.mfad"
save_checkpoint(ckpt_path, result.params, result.config)
params, config = load_checkpoint(ckpt_path)
print(f"checkpoint round trip: layers {sorted(params.per_layer)}, config epochs {config.epochs}")

print("\nwhat malformed input looks like:")
blob = bundle_path.read_bytes()
for label, broken in [
    ("wrong magic", b"WHAT" + blob[4:]),
    ("truncated  ", blob[: len(blob) // 3]),
]:
    try:
        from mfadapter.dataio import bundle_from_bytes

        bundle_from_bytes(broken)
    except FormatError as exc:
        print(f"  {label}: {exc}")
