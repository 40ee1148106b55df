"""Dynamic-scene Gaussian splatting with mask decoupling, relay copies and a HexPlane motion field."""

from .config import PipelineConfig
from .scene import (BACKGROUND, FOREGROUND, RELAY, Camera, FrameSet, GaussianCloud, TemporalSegment,
                    segment_frames, select_frames)

__version__ = "0.1.0"

__all__ = ["PipelineConfig", "Camera", "FrameSet", "GaussianCloud", "TemporalSegment", "segment_frames",
           "select_frames", "BACKGROUND", "FOREGROUND", "RELAY"]
