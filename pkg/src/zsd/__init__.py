"""Zero-shot object detection with visual-semantic embeddings."""
from .embeddings import BACKGROUND, ClassVocabulary, EmbeddingStore, build_open_vocabulary, cosine_similarity, load_embeddings
from .geometry import Box, Detection, assign_training_label, greedy_nms, iou
from .model import OptimizerState, ProjectionModel, adam_step, loss, predict, project, score
from .trainers import LabConfig, SampleSet, TrainConfig, TrainReport, augment_dses, train_baseline, train_lab, train_sb
from .evaluation import ALL, EvalConfig, detect_image, gzsd_decide, harmonic_mean, mean_average_precision, recall_at_k
from .data_io import build_training_set, generate_synthetic, load_features, make_split

__version__ = "0.1.0"
