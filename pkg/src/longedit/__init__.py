"""Training-free long video editing over a pretrained latent diffusion backbone."""

__version__ = "0.1.0"

from .backends import ToyBackbone, load_backend  # noqa: E402
from .config import EditConfig, load_config, make_config, preset_for_task  # noqa: E402
from .metrics import evaluate  # noqa: E402
from .pipeline import InversionStore, edit_video, invert_all  # noqa: E402
from .smoothing import midpoint  # noqa: E402
from .video import VideoClip, load_video, save_video  # noqa: E402

__all__ = [
    "EditConfig", "InversionStore", "ToyBackbone", "VideoClip", "edit_video", "evaluate",
    "invert_all", "load_backend", "load_config", "load_video", "make_config", "midpoint",
    "preset_for_task", "save_video",
]
