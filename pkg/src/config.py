"""
Configuration Management
Centralized settings for meshing, simulation, training and experiment output
"""

from pathlib import Path
from typing import List

from pydantic_settings import BaseSettings, SettingsConfigDict


class LungEitSettings(BaseSettings):
    """Configuration settings with desk-scale defaults"""

    model_config = SettingsConfigDict(env_file=".env", env_prefix="LUNGEIT_", extra="ignore")

    # Geometry
    electrodes: int = 16
    coverage_fraction: float = 0.5
    target_elements: int = 800
    grid_size: int = 32
    aspect_ratio: float = 1.3

    # Simulation
    drive_amplitude: float = 1.0
    noise_level: float = 0.05
    n_base: int = 200
    n_noise: int = 10
    filter_scale: float = 1e-3  # lambda_f relative to mean squared column norm of S_bdry
    solver_tol: float = 1e-10

    # Baselines
    tv_epsilon: float = 1e-4
    tv_max_iters: int = 50
    tv_conv_tol: float = 1e-6

    # Learning
    latent_dim: int = 16
    epochs: int = 50
    batch_size: int = 32
    learning_rate: float = 1e-3
    regressor_widths: List[int] = [256, 256, 256]
    seed: int = 0

    # Execution
    threads: int = 1
    debug: bool = False
    log_level: str = "INFO"

    # Paths
    output_root: str = "runs"
    logs_dir: str = "logs"


# Global settings instance
settings = LungEitSettings()


def create_directories() -> None:
    """Create output and log directories if they don't exist"""
    for directory in (settings.output_root, settings.logs_dir):
        Path(directory).mkdir(parents=True, exist_ok=True)
