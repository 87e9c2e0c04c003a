"""Segment-wise statistics of anomaly maps scored by a boosted random forest."""

from .brf import BrfConfig, BrfModel, predict_margin, preset, train
from .core import AnomalyMap, DatasetManifest, Label, SampleRecord, SegmentationMap, SplitTag, load_manifest, split_dataset
from .metrics import aggregate, auroc, evaluate, fpr_at_tpr
from .stats import FeatureLayout, FeatureVector, extract_corpus, extract_features

__version__ = "0.1.0"
