import os
import sys
from pathlib import Path
from pydantic import HttpUrl, SecretStr
from pydantic_settings import BaseSettings, SettingsConfigDict


ENVIRONMENTS = {
    "development": ".env.dev",
    "test": ".env.test",
    "production": ".env.prod",
}

# Load environment variables from .env file based on the APP_ENV env var
app_env = os.getenv("APP_ENV")
env = "Unknown"
env_file = None

# Load env file if APP_ENV is set, otherwise defaults will be loaded
if app_env is not None:
    if app_env not in ENVIRONMENTS.keys():
        valid = ', '.join(ENVIRONMENTS.keys())
        print(f"Error: Invalid or missing APP_ENV '{app_env}'. Must be one of: {valid}")
        sys.exit(1)  # Exit with error
    else:
        env = app_env
        env_file = ENVIRONMENTS[app_env]


class Config(BaseSettings):
    """Application settings loaded from environment variables."""
    model_config = SettingsConfigDict(
        env_prefix="SAGCN_", env_file=env_file, extra="ignore"
    )

    env: str = env
    ollama_url: HttpUrl = "http://localhost:11434"
    ollama_model: str = "vicuna:13b"
    # Credential for backends sitting behind an authenticating proxy
    llm_api_key: SecretStr | None = None
    llm_timeout_s: float = 60.0
    llm_max_retries: int = 3
    llm_concurrency: int = 4
    workspace_path: Path = Path("workspace")
    log_level: str = "INFO"


# Instantiate settings for easy access
config = Config()
