"""Environment overrides for runtime knobs that do not belong in a scenario."""

from __future__ import annotations

import os
from typing import Literal, Optional

from dotenv import load_dotenv
from pydantic import BaseModel, ConfigDict


class RuntimeSettings(BaseModel):
    model_config = ConfigDict(frozen=True)

    log_level: Optional[str] = None
    log_format: Optional[Literal["console", "json"]] = None
    solver_backend: Optional[Literal["highs", "bnb"]] = None

    @classmethod
    def from_env(cls, dotenv_path: Optional[str] = None) -> "RuntimeSettings":
        # .env never overrides variables already exported in the shell
        load_dotenv(dotenv_path=dotenv_path, override=False)
        return cls(
            log_level=os.getenv("FMG_LOG_LEVEL") or None,
            log_format=os.getenv("FMG_LOG_FORMAT") or None,
            solver_backend=os.getenv("FMG_SOLVER_BACKEND") or None,
        )
