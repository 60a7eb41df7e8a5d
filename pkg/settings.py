"""
Process-level settings for the Entropic Dynamics Laboratory.
Values come from the environment (prefix EDLAB_) and an optional .env file via python-dotenv.
"""

from functools import lru_cache
from pathlib import Path

from dotenv import load_dotenv
from pydantic import Field
from pydantic_settings import BaseSettings, SettingsConfigDict

load_dotenv()


class LabSettings(BaseSettings):
    """Runtime knobs that are not part of a scenario file."""

    model_config = SettingsConfigDict(env_prefix="EDLAB_", env_file=".env", extra="ignore")

    output_dir: Path = Field(
        Path("runs"),
        description="Directory that receives run artifacts when --out is not given.",
    )
    log_level: str = Field(
        "INFO",
        description="Root log level (DEBUG, INFO, WARNING, ERROR).",
    )
    workers: int = Field(
        1,
        ge=1,
        description="Thread workers for trajectory blocks. Results do not depend on this value.",
    )
    default_seed: int = Field(
        20100101,
        ge=0,
        description="Seed used when neither the scenario nor --seed provides one.",
    )


@lru_cache
def get_settings() -> LabSettings:
    return LabSettings()
