from .bpp import bytes_per_pixel, coded_bits, quant_table
from .dedup import (
    DedupConfigError,
    DedupIndex,
    KMeansResult,
    UnionFind,
    all_pairs_dedup,
    assign,
    dedup_features,
    dedup_report,
    dedup_run,
    intra_cluster_dedup,
    kmeans,
    pair_recall,
)
from .features import ExternalFeatures, FeatureVector, builtin_features, extract_features
from .filters import FilterResult, FilterStage, MissingScoreError, bpp_stage, external_stage, filter_chain
from .records import ImageRecord, attach_scores, load_manifest, load_scores
