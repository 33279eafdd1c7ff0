"""Temporal parsing of procedure videos.

A key-frame frame encoder produces per-frame embeddings, a multi-label
multi-stage temporal convolutional network turns them into per-group class
probabilities over time, and a parser decodes those into segments and
procedure-level reports (withdrawal time and the like).  Unlabelled videos can
be pseudo-labelled through temporal smoothing and consistency filtering.  A
synthetic procedure simulator stands in for real videos.
"""

from .config import EvalConfig, PipelineConfig, load_config
from .encoder import EncoderConfig, FrameEncoder, embed_video, train_encoder
from .evaluation import EvalResult, balanced_accuracy, evaluate
from .parsing import ProcedureReport, build_report, export_timeline, extract_segments, parse_stream
from .pipeline import ModelStack, run_protocol, train_stack
from .pseudolabel import build_pseudo_dataset, consistency_filter, make_gaussian_kernel, smooth_stream
from .schema import ABSENT, Corpus, LabelGroup, LabelSchema, SegmentAnnotation, VideoRecord, default_schema
from .storage import read_corpus, write_corpus
from .streams import ProbabilityStream, decode_labels, per_group_softmax
from .synthgen import GeneratorConfig, generate_corpus, generate_filter_violations, generate_video
from .tempnet import MultiStageTCN, TemporalConfig, predict, train_temporal

__version__ = "0.1.0"

__all__ = [
    "ABSENT",
    "Corpus",
    "EncoderConfig",
    "EvalConfig",
    "EvalResult",
    "FrameEncoder",
    "GeneratorConfig",
    "LabelGroup",
    "LabelSchema",
    "ModelStack",
    "MultiStageTCN",
    "PipelineConfig",
    "ProbabilityStream",
    "ProcedureReport",
    "SegmentAnnotation",
    "TemporalConfig",
    "VideoRecord",
    "balanced_accuracy",
    "build_pseudo_dataset",
    "build_report",
    "consistency_filter",
    "decode_labels",
    "default_schema",
    "embed_video",
    "evaluate",
    "export_timeline",
    "extract_segments",
    "generate_corpus",
    "generate_filter_violations",
    "generate_video",
    "load_config",
    "make_gaussian_kernel",
    "parse_stream",
    "per_group_softmax",
    "predict",
    "read_corpus",
    "run_protocol",
    "smooth_stream",
    "train_encoder",
    "train_stack",
    "train_temporal",
    "write_corpus",
]
