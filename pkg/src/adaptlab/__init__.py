"""Linear probing, fine-tuning and their compositions on fixed embeddings,
with augmentation, virtual adversarial training and a safety-metric suite."""
from .datamodel import Dataset, EvalSuite, PredictionSet, read_embedding_file, split_dataset, write_embedding_file
from .metrics import MetricsReport, evaluate_all
from .protocols import AdaptedModel, ProtocolSpec, StageConfig, new_model, parse_protocol, run_protocol
from .synth import SynthSpec, build_benchmark, generate_task

__version__ = "0.1.0"
