from pydantic_settings import BaseSettings
from pydantic import field_validator
from functools import lru_cache


class Settings(BaseSettings):
    """Toolkit settings loaded from SCKLS_* environment variables"""

    # Logging / parallelism
    log_level: str = "INFO"
    threads: int = 1

    # Kernel smoothing
    kernel: str = "gaussian"
    rule_of_thumb_c: float = 1.06
    cv_multipliers: int = 16
    cv_low: float = 0.25
    cv_high: float = 4.0
    kde_c: float = 1.06

    # Quadratic programming
    qp_tol: float = 1e-8
    qp_pre_polish_tol: float = 1e-5
    qp_max_iter: int = 50000
    lazy_max_rounds: int = 50
    tikhonov: float = 1e-10

    # Feasibility checks
    hull_tol: float = 1e-9
    afriat_tol: float = 1e-6

    # Bootstrap
    bootstrap_failure_fraction: float = 0.05
    delta_c: float = 0.0

    @field_validator('threads', 'qp_max_iter', 'lazy_max_rounds', 'cv_multipliers')
    @classmethod
    def validate_positive_int(cls, v: int, info) -> int:
        """Counts must be at least one"""
        if v < 1:
            raise ValueError(
                f"SCKLS_{info.field_name.upper()} must be a positive integer, got {v}"
            )
        return v

    @field_validator('qp_tol', 'qp_pre_polish_tol', 'hull_tol', 'afriat_tol', 'cv_low', 'cv_high',
                     'rule_of_thumb_c', 'kde_c')
    @classmethod
    def validate_positive_float(cls, v: float, info) -> float:
        """Tolerances and scale constants must be strictly positive"""
        if not v > 0:
            raise ValueError(
                f"SCKLS_{info.field_name.upper()} must be strictly positive, got {v}"
            )
        return v

    @field_validator('kernel')
    @classmethod
    def validate_kernel(cls, v: str) -> str:
        """Only the two supported kernel families"""
        v = v.strip().lower()
        if v not in ("gaussian", "epanechnikov"):
            raise ValueError("SCKLS_KERNEL must be 'gaussian' or 'epanechnikov'")
        return v

    class Config:
        env_prefix = "SCKLS_"
        env_file = ".env"
        case_sensitive = False


@lru_cache()
def get_settings() -> Settings:
    """Get cached settings instance"""
    return Settings()
