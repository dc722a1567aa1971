#!/usr/bin/env python3
"""
Setup script for ColaCare
Mortality prediction with expert EHR models and an LLM consultation

Installs the ``colacare`` package and its command-line entry point:

    pip install -e .
    colacare synth --run-dir runs/demo
"""

import os

from setuptools import find_packages, setup

HERE = os.path.dirname(os.path.abspath(__file__))


def read_requirements():
    """Runtime requirements from requirements.txt (comments and test tools skipped)."""
    requirements = []
    with open(os.path.join(HERE, "requirements.txt"), "r") as f:
        for line in f:
            line = line.split("#", 1)[0].strip()
            if line and not line.startswith("pytest"):
                requirements.append(line)
    return requirements


setup(
    name="colacare",
    version="1.0.0",
    description="Expert EHR models, Shapley attribution, RAG and a multi-agent LLM consultation for mortality prediction",
    author="ColaCare Research Team",
    license="MIT",
    python_requires=">=3.8",
    packages=find_packages(exclude=["examples", "examples.*"]),
    install_requires=read_requirements(),
    extras_require={"test": ["pytest>=7.0"]},
    entry_points={"console_scripts": ["colacare=colacare.cli:main"]},
)
