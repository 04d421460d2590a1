"""Two-stage pyramid diffusion for low-light RAW enhancement."""

__version__ = "0.1.0"
