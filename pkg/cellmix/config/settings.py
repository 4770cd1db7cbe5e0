"""
Runtime Settings

Environment-backed settings. Values are read from the process environment and from an
optional ``.env`` file (loaded by ``cellmix.main``); command-line flags override them.
"""

import os
from functools import lru_cache
from typing import Optional

from pydantic import BaseSettings, Field, validator


class Settings(BaseSettings):
    """Process-wide knobs, all overridable through ``CELLMIX_*`` variables."""

    jobs: Optional[int] = Field(None, description="Worker processes for independent units")
    log_level: str = Field("INFO", description="Root logging level")
    chunk_steps: int = Field(4096, description="SDE steps integrated per kernel call", ge=16)
    fft_workers: int = Field(1, description="Threads used by scipy.fft", ge=1)

    @validator("jobs", pre=True)
    def validate_jobs(cls, v):
        if v in (None, ""):
            return None
        v = int(v)
        if v < 1:
            raise ValueError("jobs must be a positive integer")
        return v

    @validator("log_level")
    def validate_log_level(cls, v):
        v = v.upper()
        if v not in {"DEBUG", "INFO", "WARNING", "ERROR", "CRITICAL"}:
            raise ValueError(f"unknown log level {v}")
        return v

    class Config:
        env_prefix = "CELLMIX_"
        case_sensitive = False


@lru_cache()
def get_settings() -> Settings:
    return Settings()


def resolve_jobs(flag: Optional[int]) -> int:
    """Worker count: flag, then CELLMIX_JOBS, then available parallelism."""
    if flag is not None:
        if flag < 1:
            raise ValueError("--jobs must be a positive integer")
        return flag
    env_jobs = get_settings().jobs
    if env_jobs is not None:
        return env_jobs
    return os.cpu_count() or 1
