"""Memory-efficient federated adversarial training by cascade learning, simulated on one machine."""

from .config import RunConfig, load_config, parse_config
from .orchestrator import module_converged, report, run

__all__ = ["RunConfig", "load_config", "parse_config", "module_converged", "report", "run"]
__version__ = "0.1.0"
