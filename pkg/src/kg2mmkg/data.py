"""Access to the bundled mini dataset."""

from importlib import resources
from pathlib import Path


def mini_dataset_dir() -> Path:
    return Path(resources.files("kg2mmkg") / "data" / "mini")


def mini_dataset_paths() -> dict[str, Path]:
    root = mini_dataset_dir()
    return {
        "train": root / "train.tsv",
        "valid": root / "valid.tsv",
        "test": root / "test.tsv",
        "labels": root / "labels.json",
    }
