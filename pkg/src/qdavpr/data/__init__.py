from qdavpr.data.augment import augment_manifest
from qdavpr.data.domains import (
    ORIGINAL,
    SyntheticDomain,
    apply_domain,
    apply_unseen_domain,
    basic_augment,
    parse_domains,
    render_source,
)
from qdavpr.data.manifest import (
    DatasetManifest,
    ManifestRow,
    Split,
    load_manifest,
    save_manifest,
)
from qdavpr.data.sampler import (
    SampledBatch,
    draw_source,
    iter_batches,
    sample_batch,
    sample_feature_batch,
    sample_seed,
)
from qdavpr.data.toy import ToyDataset, generate_toy_places

__all__ = [
    "ORIGINAL",
    "DatasetManifest",
    "ManifestRow",
    "SampledBatch",
    "Split",
    "SyntheticDomain",
    "ToyDataset",
    "apply_domain",
    "apply_unseen_domain",
    "augment_manifest",
    "basic_augment",
    "draw_source",
    "generate_toy_places",
    "iter_batches",
    "load_manifest",
    "parse_domains",
    "render_source",
    "sample_batch",
    "sample_feature_batch",
    "sample_seed",
    "save_manifest",
]
