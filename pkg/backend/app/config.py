from pydantic_settings import BaseSettings, SettingsConfigDict
from pydantic import Field
from functools import lru_cache
from pathlib import Path

# Get the path to the .env file (in project root, one level up from backend)
# A missing .env is fine; every setting has a default
ENV_FILE_PATH = Path(__file__).resolve().parent.parent.parent / ".env"
if not ENV_FILE_PATH.exists():
    ENV_FILE_PATH = None

DATA_DIR = Path(__file__).resolve().parent / "data"


class Settings(BaseSettings):
    """Toolkit settings loaded from environment variables."""

    # Model
    preset: str = Field(default="cube", validation_alias="LATTICE_PRESET")
    lattice_side: int = Field(default=16, validation_alias="LATTICE_L")
    gamma: float = Field(default=1.0, validation_alias="LATTICE_GAMMA")

    # Monte Carlo
    seed: int = Field(default=7, validation_alias="LATTICE_SEED")
    replicas: int = Field(default=32, validation_alias="LATTICE_REPLICAS")
    # Only environment variable the CLI documents
    worker_threads: int = Field(default=1, validation_alias="LATTICE_THREADS")
    rng_block_size: int = Field(default=4096)

    # Exact checks and hierarchy solves
    exact_check_side: int = Field(default=4)
    resolvent_side: int = Field(default=6)
    canonical_chunk_size: int = Field(default=200_000)

    # Newton inversion of the chemical potential map
    newton_tolerance: float = Field(default=1e-10)
    newton_max_iter: int = Field(default=100)
    newton_damping: float = Field(default=0.5)

    # Iterative solvers
    cg_tolerance: float = Field(default=1e-10)
    cg_max_iter: int = Field(default=10_000)

    # Bound integrals
    bound_c1: float = Field(default=1.0)
    bound_epsilon: float = Field(default=1.0)

    # Outputs
    output_dir: str = Field(default="output", validation_alias="LATTICE_OUTPUT_DIR")

    model_config = SettingsConfigDict(
        env_file=str(ENV_FILE_PATH) if ENV_FILE_PATH else None,
        env_file_encoding="utf-8",
        extra="ignore"
    )


@lru_cache()
def get_settings() -> Settings:
    """Get cached settings instance."""
    return Settings()
