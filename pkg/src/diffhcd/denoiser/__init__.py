from .model import ConvDenoiser, denoiser_forward, load_checkpoint, save_checkpoint
from .optim import SWA, RAdam

__all__ = ["ConvDenoiser", "RAdam", "SWA", "denoiser_forward", "load_checkpoint", "save_checkpoint"]
