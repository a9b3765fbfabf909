from pydantic import BaseModel, Field
from dotenv import load_dotenv
import os

load_dotenv()


class Config(BaseModel):
    RESULTS_DIR: str = Field(default_factory=lambda: os.getenv("RESULTS_DIR", "results"))
    LOG_LEVEL: str = Field(default_factory=lambda: os.getenv("LOG_LEVEL", "INFO"))
    LOG_FILE: str = Field(
        default_factory=lambda: os.getenv("LOG_FILE", "dual_estimation.log")
    )
    JOBS: int = Field(default_factory=lambda: int(os.getenv("JOBS", "1")), ge=1)


config = Config()
