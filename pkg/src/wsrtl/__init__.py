"""AU recognition with a relation transformer, RoI inpainting, flow estimation and MixMatch."""
from .backbone import Backbone
from .config import Config, ConfigError, load_config
from .trainer import Trainer, WSRTLModel, fit

__all__ = ["Backbone", "Config", "ConfigError", "Trainer", "WSRTLModel", "fit", "load_config"]
__version__ = "0.1.0"
