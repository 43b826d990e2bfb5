"""
Configuration and environment variables for the neatpad workbench.
Experiment hyperparameters are not here; they live in TOML configs (see config/*.toml).
"""

import os
from dotenv import load_dotenv

# Load environment variables from .env file
load_dotenv(override=True)

VERSION = "0.4.0"

# Application settings
APP_NAME = os.getenv("APP_NAME", "neatpad")
DEBUG = os.getenv("DEBUG", "False").lower() == "true"

# Evaluation worker threads
DEFAULT_THREADS = int(os.getenv("NEATPAD_THREADS", str(os.cpu_count() or 1)))

# Run output directory
RUNS_DIR = os.getenv("NEATPAD_RUNS_DIR", "runs")

# Genome document format
GENOME_FORMAT = "neatpad-genome"
GENOME_VERSION = 1

# Display precision
DIAGRAM_DECIMALS = 3
SERIALIZATION_DIGITS = 17
