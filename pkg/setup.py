"""
Setup script for MLSS-IV
"""

from setuptools import setup, find_packages
from pathlib import Path

# Read README
readme_path = Path(__file__).parent / "README.md"
long_description = readme_path.read_text() if readme_path.exists() else ""

# Read requirements
requirements_path = Path(__file__).parent / "requirements.txt"
requirements = []
if requirements_path.exists():
    requirements = requirements_path.read_text().splitlines()
    # Filter out comments and empty lines
    requirements = [req.strip() for req in requirements if req.strip() and not req.startswith('#')]

setup(
    name="mlss-iv",
    version="0.1.0",
    description="Split-sample IV estimation with machine-learned optimal instruments",
    long_description=long_description,
    long_description_content_type="text/markdown",
    author="MLSS-IV Team",
    python_requires=">=3.10",
    packages=find_packages(exclude=("tests", "tests.*", "demo", "demo.*")),
    install_requires=requirements,
    classifiers=[
        "Development Status :: 3 - Alpha",
        "Intended Audience :: Science/Research",
        "License :: OSI Approved :: MIT License",
        "Programming Language :: Python :: 3",
        "Programming Language :: Python :: 3.10",
        "Programming Language :: Python :: 3.11",
        "Programming Language :: Python :: 3.12",
        "Topic :: Scientific/Engineering :: Mathematics",
    ],
    entry_points={
        'console_scripts': [
            'mlss-iv=mlss_iv.cli.cli_client:main',
        ],
    },
    include_package_data=True,
)
