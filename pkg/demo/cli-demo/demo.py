#!/usr/bin/env python3
"""
Demo for the mlss-iv command line
Writes a simulated dataset, then runs `estimate` and `ar` on it with the sample config
"""

import os
import sys

from mlss_iv.cli.cli_client import main as cli_main
from mlss_iv.utils import create_sample_dataset


def main():
    """Main entry point for the demo"""
    here = os.path.dirname(__file__)
    config_path = os.path.join(here, "config", "estimate.toml")

    if not os.path.exists(config_path):
        print(f"Error: Config file not found at {config_path}")
        return 1

    data_path = create_sample_dataset(os.path.join(here, "data"), dgp="dgp_cov", n=2000, seed=7)
    print(f"Sample data written to {data_path}")

    out_dir = os.path.join(here, "out")
    code = cli_main(["estimate", "--config", config_path, "--data", str(data_path),
                     "--out", os.path.join(out_dir, "estimate.json")])
    if code != 0:
        return code
    return cli_main(["ar", "--config", config_path, "--data", str(data_path),
                     "--out", os.path.join(out_dir, "ar.json")])


if __name__ == "__main__":
    sys.exit(main())
