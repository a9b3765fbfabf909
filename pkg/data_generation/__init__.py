from .generate_data import (
    GroundTruth,
    fresh_data,
    generate_ground_truth,
    load_ground_truth,
    random_measurement_matrix,
    save_ground_truth,
    simulate,
    sparsify,
)

__all__ = [
    "GroundTruth",
    "fresh_data",
    "generate_ground_truth",
    "load_ground_truth",
    "random_measurement_matrix",
    "save_ground_truth",
    "simulate",
    "sparsify",
]
