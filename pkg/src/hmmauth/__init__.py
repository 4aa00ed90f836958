"""Continuous authentication from touch, accelerometer and gyroscope gestures.

Each owner gets one template per gesture kind (tap, slide) holding a
left-right GMM-HMM per sensor channel. Gestures are scored by likelihood and
state occupancy, fused across channels, and averaged over a sliding window
of consecutive gestures before an accept/reject decision.
"""

from .config import RunConfig, load_config
from .engine import AuthSession, Decision, ScoreWindow, calibrate_threshold, push_and_decide
from .evaluation import eer, far_frr, fixed_rate_curves, protocol_run, window_scores
from .hmm import HmmModel, baum_welch, forward_log_likelihood, init_model, select_model, viterbi
from .ingest import RawEventLog, parse_log, segment, serialize_log
from .preprocess import ObservationSequence, ProcessedGesture, build_processed, resample
from .template import GestureScore, UserTemplate, enroll, similarity

__version__ = "0.1.0"
