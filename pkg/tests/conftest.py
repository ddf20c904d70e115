"""Shared fixtures: generated dataset directories and a trained source model."""

import json

import pytest

from ftlab.cli import main


def write_config(path, cfg: dict) -> str:
    with open(path, "w", encoding="utf-8") as f:
        json.dump(cfg, f, indent=2)
    return str(path)


FAST_POLICY = {"base_lr": 0.01, "step_size": 20, "total_iterations": 40,
               "gamma": 0.1}
TINY_MODEL = {"input_shape": [1, 8, 8], "widths": [2, 3]}


@pytest.fixture(scope="session")
def data_root(tmp_path_factory):
    """Three synthetic domains on disk: a source pool and two targets."""
    root = tmp_path_factory.mktemp("data")
    cfg = {
        "policy": FAST_POLICY,
        "domains": [
            {"name": "srcdom", "num_labels": 3, "examples_per_label": 24,
             "image_size": 8, "motif_size": 4, "num_motifs": 4,
             "relatedness": 1.0, "seed": 1, "family_seed": 5},
            {"name": "near", "num_labels": 3, "examples_per_label": 12,
             "image_size": 8, "motif_size": 4, "num_motifs": 4,
             "relatedness": 0.9, "seed": 2, "family_seed": 5},
            {"name": "far", "num_labels": 3, "examples_per_label": 12,
             "image_size": 8, "motif_size": 4, "num_motifs": 4,
             "relatedness": 0.1, "seed": 3, "family_seed": 5},
        ],
    }
    config = write_config(root / "gen.json", cfg)
    assert main(["gen-data", config, "--out", str(root / "domains")]) == 0
    return root / "domains"


@pytest.fixture(scope="session")
def source_run(tmp_path_factory, data_root):
    """A trained source checkpoint over the srcdom partition protocol."""
    out = tmp_path_factory.mktemp("source")
    cfg = {
        "policy": FAST_POLICY,
        "model": TINY_MODEL,
        "batch_size": 6,
        "seed": 3,
        "data": {"dataset": str(data_root / "srcdom"), "partition_seed": 4},
    }
    config = write_config(out / "train.json", cfg)
    assert main(["train-source", config, "--out", str(out)]) == 0
    return out
