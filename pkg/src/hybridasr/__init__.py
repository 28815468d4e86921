"""Hybrid CTC/attention speech recognition with multilingual transfer, built on a small numpy autodiff core."""

from .data import Vocabulary, cer, wer
from .decode import DecodeConfig, joint_beam_search
from .model import HybridModel, ModelArch, mol_loss

__version__ = "0.1.0"

__all__ = ["DecodeConfig", "HybridModel", "ModelArch", "Vocabulary", "cer", "joint_beam_search", "mol_loss", "wer"]
