"""Optical communication with an event camera: blob tracking and on/off-keyed decoding."""
from .events import EVENT_DTYPE, EventPacket, RingBuffer, packetize, read_events, write_events
from .gaukf import FilterBelief, Measurement, UkfParams
from .modem import OnOffSchedule, encode, word_accuracy
from .pipeline import PipelineConfig, RunReport, run
from .simulate import GroundTruth, LedModel, Trajectory, simulate

__version__ = "0.1.0"
