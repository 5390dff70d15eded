"""Configuration de l'application avec variables d'environnement."""

from pathlib import Path

from pydantic_settings import BaseSettings, SettingsConfigDict

# Le fichier .env à la racine du dépôt est lu s'il est présent
ENV_FILE = Path(__file__).parent.parent / ".env"


class Settings(BaseSettings):
    """Process-wide knobs, read from ``ELTO_*`` variables or ``.env``."""

    model_config = SettingsConfigDict(
        env_prefix="ELTO_", env_file=ENV_FILE, extra="ignore"
    )

    threads: int = 1
    debug: bool = False
    output_dir: Path = Path("./results")


settings = Settings()

# Worker pools (trials, sweep cells)
THREADS = settings.threads
if THREADS < 1:
    raise ValueError(
        f"CRITICAL: ELTO_THREADS must be a positive integer, got {THREADS}. "
        "Unset it to run single-threaded."
    )

# Default output directory for the CLI
OUTPUT_DIR = settings.output_dir

# Debug mode
DEBUG = settings.debug
