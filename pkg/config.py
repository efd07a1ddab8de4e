"""
Configuration management for OrliczFlow
"""
import os
from dotenv import load_dotenv
from typing import Tuple

load_dotenv()


class Config:
    """Main configuration class"""

    # Output Directories
    OUTPUT_DIR: str = os.getenv("ORLICZFLOW_OUTPUT_DIR", "./output")
    RUNS_DB: str = os.getenv("ORLICZFLOW_RUNS_DB", "")

    # Execution
    WORKERS: int = int(os.getenv("ORLICZFLOW_WORKERS", "2"))
    VERBOSE: bool = os.getenv("ORLICZFLOW_VERBOSE", "true").lower() in ("1", "true", "yes")
    DEFAULT_SEED: int = 1234

    # Phi-function evaluation
    SATURATION_CAP: float = 1.0e300
    CONJUGATE_RTOL: float = 1e-10
    PROX_ATOL: float = 1e-12
    PROX_MAX_ITER: int = 100

    # Delta_2 / nabla_2 probes
    DELTA2_Z_RANGE: Tuple[float, float] = (1e-3, 1e6)
    DELTA2_SAMPLES: int = 200
    DELTA2_RATIO_LIMIT: float = 1e6
    PHI_BATTERY_SAMPLES: int = 32

    # Modular layer
    LUXEMBURG_RTOL: float = 1e-10
    LUXEMBURG_MAX_ITER: int = 200

    # Resolvent solvers
    RESOLVENT_TOL: float = 1e-10
    RESOLVENT_MAX_ITER: int = 100
    SPLITTING_MAX_ITER: int = 20000
    SPLITTING_POLISH_LEVEL: float = 1e-4
    SPLITTING_POLISH_EVERY: int = 50
    CONJUGATE_OUTER_ITER: int = 60

    @staticmethod
    def output_root() -> str:
        """Output root, re-read from the environment so overrides apply per call"""
        return os.getenv("ORLICZFLOW_OUTPUT_DIR", Config.OUTPUT_DIR)

    @staticmethod
    def runs_db_path() -> str:
        """Location of the SQLite run registry"""
        explicit = os.getenv("ORLICZFLOW_RUNS_DB", Config.RUNS_DB)
        if explicit:
            return explicit
        return os.path.join(Config.output_root(), "runs.db")

    @staticmethod
    def create_directories(*subdirs: str):
        """Create the output root and any requested subdirectories"""
        root = Config.output_root()
        os.makedirs(root, exist_ok=True)
        for sub in subdirs:
            os.makedirs(os.path.join(root, sub), exist_ok=True)

    @staticmethod
    def validate():
        """Validate critical configuration"""
        if Config.WORKERS < 1:
            print("⚠️  WARNING: ORLICZFLOW_WORKERS < 1, sweeps fall back to a single worker.")
        if not os.access(os.path.dirname(os.path.abspath(Config.output_root())) or ".", os.W_OK):
            print(f"⚠️  WARNING: output root {Config.output_root()} is not writable.")
