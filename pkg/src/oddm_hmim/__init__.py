"""ODDM with hierarchical mode-based index modulation: simulation toolkit."""

from .hqc import Constellation, ConstellationInfeasibleError, build_hqc
from .hmim_codec import FrameConfig, HmimModem, ImBaselineConfig, ImModem
from .dd_channel import ChannelRealization, gen_channel
from .detectors import detect_ml, detect_mmse_blockwise, detect_sicmmse

__version__ = "0.1.0"

__all__ = [
    "Constellation",
    "ConstellationInfeasibleError",
    "build_hqc",
    "FrameConfig",
    "HmimModem",
    "ImBaselineConfig",
    "ImModem",
    "ChannelRealization",
    "gen_channel",
    "detect_ml",
    "detect_mmse_blockwise",
    "detect_sicmmse",
    "__version__",
]
