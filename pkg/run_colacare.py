#!/usr/bin/env python3
"""
ColaCare pipeline driver.

Usage:
    python3 run_colacare.py synth --run-dir runs/demo
    python3 run_colacare.py train-experts --run-dir runs/demo
    python3 run_colacare.py build-index --run-dir runs/demo
    python3 run_colacare.py consult --run-dir runs/demo --parallel 4
    python3 run_colacare.py train-fusion --run-dir runs/demo
    python3 run_colacare.py evaluate --run-dir runs/demo

Author: ColaCare Research Team
"""

import os
import sys

# Add the project root to Python path
sys.path.insert(0, os.path.dirname(os.path.abspath(__file__)))

from colacare.cli import main

if __name__ == "__main__":
    sys.exit(main())
