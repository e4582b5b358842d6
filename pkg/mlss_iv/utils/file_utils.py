"""
File utilities for creating sample datasets
"""

from pathlib import Path
from typing import Optional, Union

from mlss_iv.core.data_model import write_csv


def create_sample_dataset(
    base_path: Optional[Union[str, Path]] = None,
    dgp: str = "dgp_nocov",
    n: int = 1000,
    seed: int = 0,
) -> Path:
    """
    Write a simulated dataset in the estimation CSV schema.

    Args:
        base_path: Directory to write into (default: the repo's demo/data)
        dgp: Name of the simulation design
        n: Number of rows
        seed: Simulation seed

    Returns:
        Path to the written CSV
    """
    from mlss_iv.montecarlo.dgp import DGPS

    if dgp not in DGPS:
        raise ValueError(f"unknown dgp {dgp!r}; valid: {', '.join(DGPS)}")
    if base_path is None:
        base_path = Path(__file__).parent.parent.parent / "demo" / "data"
    out_dir = Path(base_path)
    out_dir.mkdir(parents=True, exist_ok=True)
    sim = DGPS[dgp](n, seed)
    return write_csv(sim.dataset, out_dir / f"{dgp}-n{n}-seed{seed}.csv")
