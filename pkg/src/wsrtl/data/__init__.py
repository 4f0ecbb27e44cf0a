from .alignment import align_face, align_frame_pair, estimate_similarity, transform_points, warp_image
from .dataset import Batch, Sample, batch_iterator, eval_batches, read_manifest, write_manifest
from .flow import FlowField, extract_flow, read_flow, write_flow
from .landmarks import AURule, AURuleTable, compute_au_centers, synthetic_landmarks, synthetic_rule_table
from .synthetic import FramePair, SyntheticDataset, generate_synthetic_dataset

__all__ = [
    "AURule", "AURuleTable", "Batch", "FlowField", "FramePair", "Sample", "SyntheticDataset",
    "align_face", "align_frame_pair", "batch_iterator", "compute_au_centers", "estimate_similarity",
    "eval_batches", "extract_flow", "generate_synthetic_dataset", "read_flow", "read_manifest",
    "synthetic_landmarks", "synthetic_rule_table", "transform_points", "warp_image", "write_flow",
    "write_manifest",
]
