"""Shipped example workload specs (doc-tested tutorials)."""

from importlib import resources
from pathlib import Path

NAMES = ("vlm_fig8", "distill_toy", "omni_toy")


def spec_path(name: str) -> Path:
    """Filesystem path of a shipped example spec."""
    if name not in NAMES:
        raise KeyError(f"unknown example '{name}' (known: {', '.join(NAMES)})")
    with resources.as_file(resources.files(__package__) / f"{name}.yaml") as p:
        return Path(p)


def spec_text(name: str) -> str:
    if name not in NAMES:
        raise KeyError(f"unknown example '{name}' (known: {', '.join(NAMES)})")
    return (resources.files(__package__) / f"{name}.yaml").read_text(encoding="utf-8")
