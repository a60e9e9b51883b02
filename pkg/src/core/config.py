from functools import lru_cache
from typing import Optional

from pydantic_settings import BaseSettings


class Settings(BaseSettings):
    """
    Application settings.
    """
    # API Configuration
    API_HOST: str = "0.0.0.0"
    API_PORT: int = 8000
    DEBUG: bool = False
    LOG_LEVEL: str = "INFO"

    # Signal Configuration
    SAMPLE_RATE_HZ: int = 512
    DEFAULT_CHANNELS: int = 5

    # Windowing / voting Configuration
    WINDOW_LEN: int = 1024  # 2 s at 512 Hz
    STRIDE: int = 1024
    OFFSETS: list[int] = [0, 256, 512, 768]
    OFFSET_WEIGHTS: Optional[list[float]] = None  # None means pure majority

    # Evaluation Configuration
    IOU_THRESHOLD: float = 0.5

    # Training Configuration
    EPOCHS: int = 50
    BATCH_SIZE: int = 8
    LEARNING_RATE: float = 1e-3
    DROPOUT_RATE: float = 0.2
    PATIENCE: int = 10
    SEED: int = 0

    # Search Configuration
    RESULTS_DIR: str = "results"
    TOP_K: int = 3

    # Serving Configuration
    CHECKPOINT_PATH: Optional[str] = None

    class Config:
        env_file = ".env"
        case_sensitive = True


@lru_cache()
def get_settings() -> Settings:
    """
    Get cached settings instance.
    """
    return Settings()
